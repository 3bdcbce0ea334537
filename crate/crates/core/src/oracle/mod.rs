//! Ex-post full-information benchmark. Given a realized day (every arrival
//! and realized duration), finds a schedule maximizing the day objective,
//! leaving patients unserved when serving them does not pay.
//!
//! A schedule is a start sequence per room. Every penalty is nondecreasing
//! in start times, so each sequence is decoded semi-actively: a case starts
//! at `max(room free, arrival)` and is dropped when that is past `T - 1`.

mod search;

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Patient, SimConfig, Slot};
use crate::reward;
use crate::simenv::{CaseOutcome, EpisodeRecord, Roster};

pub use search::{solve_search, SearchOptions};

/// A realized day with nothing left to chance.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleInstance {
    pub config: SimConfig,
    pub roster: Roster,
}

impl OracleInstance {
    pub fn new(config: SimConfig, roster: Roster) -> Self {
        OracleInstance { config, roster }
    }

    /// The realization behind a finished episode.
    pub fn from_record(config: SimConfig, record: &EpisodeRecord) -> Self {
        let roster = Roster {
            seed: record.seed,
            patients: record.patients.clone(),
            emergency_slot: record.emergency_slot,
        };
        OracleInstance { config, roster }
    }

    pub fn num_patients(&self) -> usize {
        self.roster.patients.len()
    }

    fn patient(&self, id: usize) -> &Patient {
        &self.roster.patients[id]
    }

    fn credit(&self, id: usize, start: Slot) -> f64 {
        let p = self.patient(id);
        reward::immediate_reward::<f64>(self.config.class(p.class_id), reward::waiting_time(p, start))
    }

    /// Upper bound on any schedule's objective: every patient served with
    /// no wait and no overtime.
    pub fn utility_bound(&self) -> f64 {
        self.roster
            .patients
            .iter()
            .map(|p| self.config.class(p.class_id).utility)
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolverStatus {
    /// Proven optimal.
    Exact,
    /// Best found by local search.
    LocalSearch,
    /// Exact search stopped at its node limit; the incumbent is returned.
    BudgetExhausted,
}

impl fmt::Display for SolverStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SolverStatus::Exact => "exact",
            SolverStatus::LocalSearch => "local-search",
            SolverStatus::BudgetExhausted => "budget-exhausted",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduledCase {
    pub patient: usize,
    pub or: usize,
    pub start: Slot,
    pub setup: Slot,
    pub finish: Slot,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleSolution {
    /// Served patients per room, in start order.
    pub rooms: Vec<Vec<usize>>,
    pub cases: Vec<ScheduledCase>,
    pub objective: f64,
    pub status: SolverStatus,
    /// Distance to the utility bound, or 0 when proven optimal.
    pub bound_gap: Option<f64>,
    /// Search iterations, or branch-and-bound nodes.
    pub iterations: u64,
}

impl OracleSolution {
    pub fn served_count(&self) -> usize {
        self.cases.len()
    }

    /// The schedule as an episode record, readable by every consumer of
    /// simulated days.
    pub fn to_record(&self, inst: &OracleInstance) -> EpisodeRecord {
        schedule_record(inst, &self.cases)
    }
}

pub(crate) struct Decoded {
    pub cases: Vec<ScheduledCase>,
    pub credit: f64,
    pub overtime: Slot,
}

impl Decoded {
    pub fn objective(&self, overtime_cost: f64) -> f64 {
        self.credit + reward::terminal_reward(self.overtime as f64, overtime_cost)
    }
}

/// Earliest-start decoding of one room's sequence.
pub(crate) fn decode_room(
    inst: &OracleInstance,
    or: usize,
    seq: &[usize],
    out: &mut Vec<ScheduledCase>,
) -> (f64, Slot) {
    let cfg = &inst.config;
    let mut free = 0;
    let mut last = None;
    let mut credit = 0.0;
    let mut last_finish = 0;
    for &id in seq {
        let p = inst.patient(id);
        let start = free.max(p.arrival);
        if start >= cfg.horizon {
            continue;
        }
        let setup = cfg.setup.get(last, p.class_id);
        let finish = start + setup + p.duration;
        credit += inst.credit(id, start);
        out.push(ScheduledCase {
            patient: id,
            or,
            start,
            setup,
            finish,
        });
        free = finish;
        last = Some(p.class_id);
        last_finish = finish;
    }
    (credit, last_finish.saturating_sub(cfg.horizon))
}

pub(crate) fn decode(inst: &OracleInstance, rooms: &[Vec<usize>]) -> Decoded {
    let mut cases = Vec::new();
    let mut credit = 0.0;
    let mut overtime = 0;
    for (or, seq) in rooms.iter().enumerate() {
        let (c, ot) = decode_room(inst, or, seq, &mut cases);
        credit += c;
        overtime += ot;
    }
    Decoded {
        cases,
        credit,
        overtime,
    }
}

pub(crate) fn finish_solution(
    inst: &OracleInstance,
    rooms: &[Vec<usize>],
    status: SolverStatus,
    iterations: u64,
) -> OracleSolution {
    let d = decode(inst, rooms);
    let mut kept = vec![Vec::new(); inst.config.num_ors];
    for c in &d.cases {
        kept[c.or].push(c.patient);
    }
    let objective = d.objective(inst.config.reward.overtime_cost);
    let bound_gap = match status {
        SolverStatus::Exact => Some(0.0),
        _ => Some(inst.utility_bound() - objective),
    };
    OracleSolution {
        rooms: kept,
        cases: d.cases,
        objective,
        status,
        bound_gap,
        iterations,
    }
}

/// Builds an episode record from a list of scheduled cases. Epoch rewards
/// are streamed at each start so the record's streamed total is meaningful.
pub fn schedule_record(inst: &OracleInstance, cases: &[ScheduledCase]) -> EpisodeRecord {
    let cfg = &inst.config;
    let mut outcomes = vec![None; inst.num_patients()];
    let mut or_last_finish = vec![0; cfg.num_ors];
    let mut epoch_rewards = vec![0.0; cfg.horizon as usize];
    for c in cases {
        outcomes[c.patient] = Some(CaseOutcome {
            start: c.start,
            or: c.or,
            setup: c.setup,
            finish: c.finish,
        });
        or_last_finish[c.or] = or_last_finish[c.or].max(c.finish);
        if let Some(r) = epoch_rewards.get_mut(c.start as usize) {
            *r += inst.credit(c.patient, c.start);
        }
    }
    let ot = reward::overtime(&or_last_finish, cfg.horizon);
    EpisodeRecord {
        seed: inst.roster.seed,
        horizon: cfg.horizon,
        num_ors: cfg.num_ors,
        emergency_slot: inst.roster.emergency_slot,
        patients: inst.roster.patients.clone(),
        outcomes,
        or_last_finish,
        epoch_rewards,
        terminal_reward: reward::terminal_reward(ot as f64, cfg.reward.overtime_cost),
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FeasibilityError {
    #[error("patient {0} does not exist")]
    UnknownPatient(usize),
    #[error("patient {0} is scheduled twice")]
    Duplicate(usize),
    #[error("room {or} does not exist")]
    UnknownRoom { or: usize },
    #[error("patient {patient} starts at {start} before arriving at {arrival}")]
    BeforeArrival { patient: usize, start: Slot, arrival: Slot },
    #[error("patient {patient} starts at {start}, past the last decision epoch")]
    AfterHorizon { patient: usize, start: Slot },
    #[error("patient {patient}: setup {found} where the room sequence requires {expected}")]
    Setup {
        patient: usize,
        expected: Slot,
        found: Slot,
    },
    #[error("patient {patient}: finish {found} where start + setup + duration is {expected}")]
    Finish {
        patient: usize,
        expected: Slot,
        found: Slot,
    },
    #[error("room {or}: patient {second} starts at {start} before patient {first} finishes at {finish}")]
    Overlap {
        or: usize,
        first: usize,
        second: usize,
        start: Slot,
        finish: Slot,
    },
}

/// Verifies a schedule independently of how it was produced.
pub fn check_feasible(inst: &OracleInstance, cases: &[ScheduledCase]) -> Result<(), FeasibilityError> {
    let cfg = &inst.config;
    let mut seen = vec![false; inst.num_patients()];
    let mut by_room: Vec<Vec<&ScheduledCase>> = vec![Vec::new(); cfg.num_ors];
    for c in cases {
        if c.patient >= seen.len() {
            return Err(FeasibilityError::UnknownPatient(c.patient));
        }
        if std::mem::replace(&mut seen[c.patient], true) {
            return Err(FeasibilityError::Duplicate(c.patient));
        }
        let p = inst.patient(c.patient);
        if c.start < p.arrival {
            return Err(FeasibilityError::BeforeArrival {
                patient: c.patient,
                start: c.start,
                arrival: p.arrival,
            });
        }
        if c.start >= cfg.horizon {
            return Err(FeasibilityError::AfterHorizon {
                patient: c.patient,
                start: c.start,
            });
        }
        by_room
            .get_mut(c.or)
            .ok_or(FeasibilityError::UnknownRoom { or: c.or })?
            .push(c);
    }
    for (or, room) in by_room.iter_mut().enumerate() {
        room.sort_by_key(|c| c.start);
        let mut prev: Option<&ScheduledCase> = None;
        for &c in room.iter() {
            let p = inst.patient(c.patient);
            let last_class = prev.map(|q| inst.patient(q.patient).class_id);
            let expected = cfg.setup.get(last_class, p.class_id);
            if c.setup != expected {
                return Err(FeasibilityError::Setup {
                    patient: c.patient,
                    expected,
                    found: c.setup,
                });
            }
            if c.finish != c.start + c.setup + p.duration {
                return Err(FeasibilityError::Finish {
                    patient: c.patient,
                    expected: c.start + c.setup + p.duration,
                    found: c.finish,
                });
            }
            if let Some(q) = prev {
                if c.start < q.finish {
                    return Err(FeasibilityError::Overlap {
                        or,
                        first: q.patient,
                        second: c.patient,
                        start: c.start,
                        finish: q.finish,
                    });
                }
            }
            prev = Some(c);
        }
    }
    Ok(())
}

/// Size limits for exhaustive search.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExactLimits {
    pub max_patients: usize,
    pub max_ors: usize,
    /// Nodes to expand before giving up with the incumbent.
    pub node_limit: Option<u64>,
}

impl Default for ExactLimits {
    fn default() -> Self {
        ExactLimits {
            max_patients: 10,
            max_ors: 3,
            node_limit: None,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OracleError {
    #[error("instance too large for exact search: {patients} patients on {ors} rooms (limit {max_patients} on {max_ors}); use the search solver")]
    TooLarge {
        patients: usize,
        ors: usize,
        max_patients: usize,
        max_ors: usize,
    },
}

struct Bnb<'a> {
    inst: &'a OracleInstance,
    n: usize,
    horizon: Slot,
    cost: f64,
    rooms: Vec<Vec<usize>>,
    best: f64,
    best_rooms: Vec<Vec<usize>>,
    nodes: u64,
    node_limit: Option<u64>,
    stopped: bool,
}

impl Bnb<'_> {
    /// Rooms are filled one at a time. `value` is the credit so far minus
    /// the overtime of closed rooms; `free`/`last` describe the open room.
    fn dfs(&mut self, room: usize, used: u64, free: Slot, last: Option<usize>, value: f64) {
        if self.stopped {
            return;
        }
        self.nodes += 1;
        if self.node_limit.is_some_and(|l| self.nodes > l) {
            self.stopped = true;
            return;
        }
        let cfg = &self.inst.config;
        let room_ot = if self.rooms[room].is_empty() {
            0
        } else {
            free.saturating_sub(self.horizon)
        };
        let here = value - self.cost * room_ot as f64;
        if here > self.best + 1e-12 {
            self.best = here;
            self.best_rooms = self.rooms.clone();
        }
        let more_rooms = room + 1 < cfg.num_ors;
        let mut bound = here;
        for i in 0..self.n {
            if used & (1 << i) != 0 {
                continue;
            }
            let p = self.inst.patient(i);
            let earliest = if more_rooms { p.arrival } else { free.max(p.arrival) };
            if earliest < self.horizon {
                bound += self.inst.credit(i, earliest).max(0.0);
            }
        }
        if bound <= self.best + 1e-12 {
            return;
        }
        // the first case of a later room must have a larger id than the
        // first case of the room before it, which removes room relabelings
        let floor = if self.rooms[room].is_empty() && room > 0 {
            self.rooms[room - 1].first().map_or(self.n, |&f| f + 1)
        } else {
            0
        };
        for i in floor..self.n {
            if used & (1 << i) != 0 {
                continue;
            }
            let p = self.inst.patient(i);
            let start = free.max(p.arrival);
            if start >= self.horizon {
                continue;
            }
            let finish = start + cfg.setup.get(last, p.class_id) + p.duration;
            let credit = self.inst.credit(i, start);
            self.rooms[room].push(i);
            self.dfs(room, used | (1 << i), finish, Some(p.class_id), value + credit);
            self.rooms[room].pop();
        }
        if more_rooms && !self.rooms[room].is_empty() {
            self.dfs(room + 1, used, 0, None, here);
        }
    }
}

/// Depth-first branch-and-bound over room sequences. The bound adds, for
/// every remaining patient, its credit at the earliest start still open.
pub fn solve_exact(inst: &OracleInstance) -> Result<OracleSolution, OracleError> {
    solve_exact_with(inst, ExactLimits::default())
}

pub fn solve_exact_with(inst: &OracleInstance, limits: ExactLimits) -> Result<OracleSolution, OracleError> {
    let n = inst.num_patients();
    let j = inst.config.num_ors;
    if n > limits.max_patients || j > limits.max_ors || n > 63 {
        return Err(OracleError::TooLarge {
            patients: n,
            ors: j,
            max_patients: limits.max_patients,
            max_ors: limits.max_ors,
        });
    }
    let mut b = Bnb {
        inst,
        n,
        horizon: inst.config.horizon,
        cost: inst.config.reward.overtime_cost,
        rooms: vec![Vec::new(); j],
        best: 0.0,
        best_rooms: vec![Vec::new(); j],
        nodes: 0,
        node_limit: limits.node_limit,
        stopped: false,
    };
    if j > 0 {
        b.dfs(0, 0, 0, None, 0.0);
    }
    let status = if b.stopped {
        SolverStatus::BudgetExhausted
    } else {
        SolverStatus::Exact
    };
    Ok(finish_solution(inst, &b.best_rooms, status, b.nodes))
}

/// Exact when the instance is small enough, search otherwise.
pub fn solve(inst: &OracleInstance, search: &SearchOptions) -> OracleSolution {
    solve_exact(inst).unwrap_or_else(|_| solve_search(inst, search))
}

/// Oracle-versus-policy comparison on one realization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegretReport {
    pub policy: String,
    pub seed: u64,
    pub policy_cr: f64,
    pub oracle_cr: f64,
    pub status: SolverStatus,
    /// `oracle_cr - policy_cr`.
    pub gap: f64,
    /// Oracle revenue minus policy revenue.
    pub revenue_diff: f64,
    /// Policy delay penalty minus oracle delay penalty.
    pub delay_penalty_diff: f64,
    /// Policy overtime minus oracle overtime, in slots.
    pub overtime_diff: f64,
    /// `C_o * overtime_diff`.
    pub overtime_penalty_diff: f64,
}

impl RegretReport {
    pub fn new(inst: &OracleInstance, policy: &str, policy_record: &EpisodeRecord, oracle: &OracleSolution) -> Self {
        let cfg = &inst.config;
        let pol = reward::day_reward::<f64>(policy_record, cfg);
        let ora = reward::day_reward::<f64>(&oracle.to_record(inst), cfg);
        let overtime_diff = pol.overtime_slots as f64 - ora.overtime_slots as f64;
        RegretReport {
            policy: policy.to_string(),
            seed: inst.roster.seed,
            policy_cr: pol.day_reward,
            oracle_cr: ora.day_reward,
            status: oracle.status,
            gap: ora.day_reward - pol.day_reward,
            revenue_diff: ora.revenue() - pol.revenue(),
            delay_penalty_diff: pol.total_delay_penalty() - ora.total_delay_penalty(),
            overtime_diff,
            overtime_penalty_diff: cfg.reward.overtime_cost * overtime_diff,
        }
    }
}

pub fn write_regret_csv<W: Write>(out: W, reports: &[RegretReport]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "policy",
        "seed",
        "policy_cr",
        "oracle_cr",
        "status",
        "gap",
        "revenue_diff",
        "delay_penalty_diff",
        "overtime_diff",
        "overtime_penalty_diff",
    ])?;
    for r in reports {
        w.write_record([
            r.policy.clone(),
            r.seed.to_string(),
            format!("{:.6}", r.policy_cr),
            format!("{:.6}", r.oracle_cr),
            r.status.to_string(),
            format!("{:.6}", r.gap),
            format!("{:.6}", r.revenue_diff),
            format!("{:.6}", r.delay_penalty_diff),
            format!("{:.3}", r.overtime_diff),
            format!("{:.6}", r.overtime_penalty_diff),
        ])?;
    }
    w.flush()?;
    Ok(())
}
