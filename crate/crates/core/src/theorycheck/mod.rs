//! Executable checks of the sequential protocol's theory on tiny instances:
//! per-epoch equivalence with the joint maximizer under weak coupling, the
//! regret bounds against the exact oracle, and the single-urgent-case gap.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{Category, DurationClass, Patient, SetupMatrix, SimConfig, Slot};
use crate::heuristics::{heuristic_policy, sequential_assign, AssignContext, HeuristicKind};
use crate::oracle::{solve_exact, OracleError, OracleInstance, OracleSolution};
use crate::reward;
use crate::simenv::{run_on_roster, Episode, EpisodeRecord, Roster};

/// Class ids of the three-class tiny catalogue.
pub const ELECTIVE: usize = 1;
pub const URGENT: usize = 2;
pub const EMERGENCY: usize = 3;

/// Three classes (elective minor, urgent moderate, emergency complex) on a
/// short day.
pub fn tiny_config(num_ors: usize, horizon: Slot, setups: bool) -> SimConfig {
    let base = SimConfig::default_day();
    let pick = |cat: Category, dc: DurationClass| {
        base.classes
            .iter()
            .find(|c| c.category == cat && c.duration_class == dc)
            .expect("default catalogue covers the tiny classes")
            .clone()
    };
    let mut classes = vec![
        pick(Category::Elective, DurationClass::Minor),
        pick(Category::Urgent, DurationClass::Moderate),
        pick(Category::Emergency, DurationClass::Complex),
    ];
    for (i, c) in classes.iter_mut().enumerate() {
        c.id = i + 1;
    }
    let setup = if setups {
        SetupMatrix::by_duration_class(&classes, 1, 2)
    } else {
        SetupMatrix::zeros(classes.len())
    };
    SimConfig {
        horizon,
        num_ors,
        classes,
        setup,
        elective_counts: [0; 4],
        urgent_rate: 0.0,
        emergency_day_prob: 0.0,
        ..base
    }
}

/// A day small enough for exhaustive enumeration. Durations are drawn
/// uniformly on a few slots because the full-scale laws would not fit.
#[derive(Clone, Debug, PartialEq)]
pub struct TinyInstance {
    pub config: SimConfig,
    pub roster: Roster,
    /// A1: the setup matrix is zero.
    pub zero_setups: bool,
    /// A4 as generated: every class arrives as one batch of at least `J`
    /// patients.
    pub no_contention: bool,
}

impl TinyInstance {
    pub fn oracle_instance(&self) -> OracleInstance {
        OracleInstance::new(self.config.clone(), self.roster.clone())
    }

    /// Arbitrary tiny day: random classes, arrivals and reference slots,
    /// setups on.
    pub fn random(seed: u64, max_patients: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let j = rng.random_range(1..=3);
        let horizon = rng.random_range(8..=12);
        let n = rng.random_range(2..=max_patients.max(2));
        let config = tiny_config(j, horizon, true);
        let patients = (0..n)
            .map(|id| {
                let class_id = rng.random_range(1..=3);
                let elective = class_id == ELECTIVE;
                let arrival = if elective { 0 } else { rng.random_range(0..horizon) };
                let reference = elective.then(|| rng.random_range(0..horizon));
                make_patient(id, class_id, arrival, reference, rng.random_range(1..=4), j)
            })
            .collect();
        TinyInstance {
            config,
            roster: Roster {
                seed,
                patients,
                emergency_slot: None,
            },
            zero_setups: false,
            no_contention: false,
        }
    }

    /// A1 to A4 by construction: zero setups, and every class present
    /// arrives as a single batch (shared arrival slot, shared reference
    /// slot) of at least `J` patients.
    pub fn random_weakly_coupled(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let j = rng.random_range(1..=3);
        let horizon = rng.random_range(6..=12);
        let config = tiny_config(j, horizon, false);
        let mut patients = Vec::new();
        for class_id in 1..=3 {
            if rng.random_bool(0.25) {
                continue;
            }
            let size = rng.random_range(j..=j + 1);
            let elective = class_id == ELECTIVE;
            let arrival = if elective { 0 } else { rng.random_range(0..horizon) };
            let reference = elective.then(|| rng.random_range(0..horizon));
            for _ in 0..size {
                let id = patients.len();
                patients.push(make_patient(
                    id,
                    class_id,
                    arrival,
                    reference,
                    rng.random_range(1..=4),
                    j,
                ));
            }
        }
        TinyInstance {
            config,
            roster: Roster {
                seed,
                patients,
                emergency_slot: None,
            },
            zero_setups: true,
            no_contention: true,
        }
    }
}

fn make_patient(
    id: usize,
    class_id: usize,
    arrival: Slot,
    reference: Option<Slot>,
    duration: Slot,
    ors: usize,
) -> Patient {
    Patient {
        id,
        class_id,
        arrival,
        reference,
        duration,
        raw_duration: duration as f64,
        planned_or: reference.map(|_| id % ors),
    }
}

/// One-step value of a room starting a patient now.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum OneStepQ {
    /// Immediate reward only.
    #[default]
    Immediate,
    /// Immediate reward minus the overtime cost of the case's own overrun.
    WithOvertime,
}

impl OneStepQ {
    fn value(self, cfg: &SimConfig, p: &Patient, clock: Slot, last_class: Option<usize>) -> f64 {
        let r = reward::immediate_reward::<f64>(cfg.class(p.class_id), reward::waiting_time(p, clock));
        match self {
            OneStepQ::Immediate => r,
            OneStepQ::WithOvertime => {
                let finish = clock + cfg.setup.get(last_class, p.class_id) + p.duration;
                r - cfg.reward.overtime_cost * finish.saturating_sub(cfg.horizon) as f64
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochCheck {
    pub clock: Slot,
    pub free_ors: usize,
    pub joint_value: f64,
    pub sequential_value: f64,
    /// `joint_value - sequential_value`, the myopic externality.
    pub gamma: f64,
    pub equal: bool,
    /// A1, A2 (position-independent values in every queue) and A4 (every
    /// selected class holds at least one patient per free room) hold.
    pub in_scope: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingReport {
    pub seed: u64,
    pub epochs: Vec<EpochCheck>,
}

impl CouplingReport {
    pub fn in_scope(&self) -> impl Iterator<Item = &EpochCheck> {
        self.epochs.iter().filter(|e| e.in_scope)
    }

    /// Every in-scope epoch matched.
    pub fn holds(&self) -> bool {
        self.in_scope().all(|e| e.equal)
    }
}

const TOL: f64 = 1e-9;

/// Best summed one-step value over every conflict-free joint action of the
/// free rooms, taken in room order from the raw queues. Also returns the
/// maximizing picks and the smallest value visited.
fn joint_maximum(ep: &Episode<'_>, free: &[usize], q: OneStepQ) -> (f64, Vec<usize>, f64) {
    struct Search<'e, 'a> {
        ep: &'e Episode<'a>,
        free: &'e [usize],
        q: OneStepQ,
        taken: Vec<usize>,
        picks: Vec<usize>,
        best: (f64, Vec<usize>),
        worst: f64,
    }
    impl Search<'_, '_> {
        fn go(&mut self, i: usize, value: f64) {
            if i == self.free.len() {
                if value > self.best.0 {
                    self.best = (value, self.picks.clone());
                }
                self.worst = self.worst.min(value);
                return;
            }
            let cfg = self.ep.config;
            let state = self.ep.state();
            self.picks[i] = 0;
            self.go(i + 1, value);
            for class in 1..=cfg.num_classes() {
                let queue = &state.queues[class - 1];
                let n = self.taken[class - 1];
                if n >= queue.len() {
                    continue;
                }
                let v = self.q.value(
                    cfg,
                    self.ep.patient(queue[n]),
                    state.clock,
                    state.ors[self.free[i]].last_class,
                );
                self.taken[class - 1] += 1;
                self.picks[i] = class;
                self.go(i + 1, value + v);
                self.taken[class - 1] -= 1;
            }
            self.picks[i] = 0;
        }
    }
    let mut s = Search {
        ep,
        free,
        q,
        taken: vec![0; ep.config.num_classes()],
        picks: vec![0; free.len()],
        best: (f64::NEG_INFINITY, Vec::new()),
        worst: f64::INFINITY,
    };
    s.go(0, 0.0);
    (s.best.0, s.best.1, s.worst)
}

/// Runs the day under sequential greedy on the one-step value and compares
/// every epoch with the exhaustive joint maximum.
pub fn check_weak_coupling(inst: &TinyInstance, q: OneStepQ) -> CouplingReport {
    let cfg = &inst.config;
    let mut ep = Episode::new(cfg, &inst.roster);
    let mut epochs = Vec::new();
    while !ep.is_done() {
        let free: Vec<usize> = ep.state().free_ors().collect();
        let mut greedy = |ctx: &AssignContext<'_, '_>| {
            let last = ctx.episode.state().ors[ctx.or].last_class;
            let mut best = (0.0, 0);
            for k in 1..=ctx.config().num_classes() {
                if let Some(id) = ctx.head(k) {
                    let v = q.value(ctx.config(), ctx.episode.patient(id), ctx.clock(), last);
                    if v > best.0 {
                        best = (v, k);
                    }
                }
            }
            best.1
        };
        let action = sequential_assign(&ep, &mut greedy);
        if !free.is_empty() {
            let (joint_value, joint_picks, worst) = joint_maximum(&ep, &free, q);
            let sequential_value = sequential_value(&ep, &free, &action.0, q);
            // the enumerator must dominate every joint action it visits,
            // the sequential one included
            assert!(joint_value + TOL >= sequential_value && joint_value + TOL >= worst);
            let in_scope = assumptions_hold(
                &ep,
                &free,
                &[&joint_picks, &free.iter().map(|&o| action.0[o]).collect::<Vec<_>>()],
                q,
            );
            epochs.push(EpochCheck {
                clock: ep.clock(),
                free_ors: free.len(),
                joint_value,
                sequential_value,
                gamma: joint_value - sequential_value,
                equal: (joint_value - sequential_value).abs() <= TOL,
                in_scope,
            });
        }
        ep.step(&action).expect("sequential assignment is conflict-free");
    }
    CouplingReport {
        seed: inst.roster.seed,
        epochs,
    }
}

fn sequential_value(ep: &Episode<'_>, free: &[usize], action: &[usize], q: OneStepQ) -> f64 {
    let cfg = ep.config;
    let state = ep.state();
    let mut taken = vec![0usize; cfg.num_classes()];
    let mut total = 0.0;
    for &or in free {
        let k = action[or];
        if k == 0 {
            continue;
        }
        let p = ep.patient(state.queues[k - 1][taken[k - 1]]);
        taken[k - 1] += 1;
        total += q.value(cfg, p, state.clock, state.ors[or].last_class);
    }
    total
}

fn assumptions_hold(ep: &Episode<'_>, free: &[usize], selections: &[&Vec<usize>], q: OneStepQ) -> bool {
    let cfg = ep.config;
    let state = ep.state();
    if !cfg.setup.is_zero() {
        return false;
    }
    let jp = free.len();
    for queue in &state.queues {
        let vals: Vec<f64> = queue
            .iter()
            .take(jp)
            .map(|&id| q.value(cfg, ep.patient(id), state.clock, None))
            .collect();
        if vals.windows(2).any(|w| (w[0] - w[1]).abs() > 1e-12) {
            return false;
        }
    }
    selections
        .iter()
        .flat_map(|s| s.iter())
        .filter(|&&k| k > 0)
        .all(|&k| state.queues[k - 1].len() >= jp)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CouplingSummary {
    pub instances: usize,
    pub epochs: usize,
    pub in_scope_epochs: usize,
    pub in_scope_equal: usize,
    pub out_of_scope_unequal: usize,
    pub max_gamma: f64,
}

impl CouplingSummary {
    pub fn of(reports: &[CouplingReport]) -> Self {
        let mut s = CouplingSummary {
            instances: reports.len(),
            ..Default::default()
        };
        for e in reports.iter().flat_map(|r| &r.epochs) {
            s.epochs += 1;
            if e.in_scope {
                s.in_scope_epochs += 1;
                s.in_scope_equal += e.equal as usize;
            } else if !e.equal {
                s.out_of_scope_unequal += 1;
            }
            s.max_gamma = s.max_gamma.max(e.gamma);
        }
        s
    }

    pub fn holds(&self) -> bool {
        self.in_scope_equal == self.in_scope_epochs
    }
}

/// Both sides of the two regret inequalities on one realization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub seed: u64,
    pub seq_cr: f64,
    pub opt_cr: f64,
    /// `V* - V^seq`.
    pub regret: f64,
    /// `sum c_k (w_seq^2 - w_opt^2) + C_o (OT_seq - OT_opt)`.
    pub wait_bound: f64,
    /// `2T sum c_k (w_seq - w_opt) + C_o (OT_seq - OT_opt)`.
    pub linear_bound: f64,
    /// Both schedules serve the same patients, so every wait term is
    /// defined on both sides.
    pub same_coverage: bool,
    /// Patients served by exactly one of the two schedules.
    pub unmatched: usize,
}

impl BoundReport {
    pub fn wait_holds(&self) -> bool {
        self.regret <= self.wait_bound + TOL
    }

    pub fn linear_holds(&self) -> bool {
        self.regret <= self.linear_bound + TOL
    }

    pub fn monotone(&self) -> bool {
        self.linear_bound + TOL >= self.wait_bound
    }
}

/// Evaluates the bounds for a sequential run against an optimal schedule.
/// Wait terms range over patients served by both.
pub fn check_regret_bounds(inst: &OracleInstance, seq: &EpisodeRecord, opt: &OracleSolution) -> BoundReport {
    let cfg = &inst.config;
    let opt_rec = opt.to_record(inst);
    let seq_out = reward::day_reward::<f64>(seq, cfg);
    let opt_out = reward::day_reward::<f64>(&opt_rec, cfg);
    let t = cfg.horizon as f64;
    let (mut quad, mut lin, mut unmatched) = (0.0, 0.0, 0);
    for (i, p) in inst.roster.patients.iter().enumerate() {
        match (&seq.outcomes[i], &opt_rec.outcomes[i]) {
            (Some(s), Some(o)) => {
                let c = cfg.class(p.class_id).delay_coeff;
                let ws = reward::waiting_time(p, s.start) as f64;
                let wo = reward::waiting_time(p, o.start) as f64;
                quad += c * (ws * ws - wo * wo);
                lin += c * (ws - wo);
            }
            (None, None) => {}
            _ => unmatched += 1,
        }
    }
    let ot = cfg.reward.overtime_cost * (seq_out.overtime_slots as f64 - opt_out.overtime_slots as f64);
    BoundReport {
        seed: inst.roster.seed,
        seq_cr: seq_out.day_reward,
        opt_cr: opt_out.day_reward,
        regret: opt_out.day_reward - seq_out.day_reward,
        wait_bound: quad + ot,
        linear_bound: 2.0 * t * lin + ot,
        same_coverage: unmatched == 0,
        unmatched,
    }
}

/// Runs `policy` and the exact oracle on a tiny day and checks the bounds.
pub fn regret_for_policy(inst: &TinyInstance, policy: HeuristicKind) -> Result<BoundReport, OracleError> {
    let oi = inst.oracle_instance();
    let opt = solve_exact(&oi)?;
    let seq = run_on_roster(&inst.config, &inst.roster, &mut heuristic_policy(policy))
        .expect("heuristics respect the protocol");
    Ok(check_regret_bounds(&oi, &seq, &opt))
}

/// The single-urgent-case construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorollaryReport {
    pub num_ors: usize,
    pub arrival: Slot,
    /// Slots the urgent patient waits under the sequential policy.
    pub delta: Slot,
    pub opt_wait: Slot,
    /// `V* - V^seq`.
    pub gap: f64,
    /// `c_k * delta^2`.
    pub bound: f64,
}

impl CorollaryReport {
    pub fn premise_holds(&self) -> bool {
        self.opt_wait == 0
    }

    pub fn holds(&self) -> bool {
        self.gap <= self.bound + TOL
    }
}

/// `num_ors` electives, each long enough to keep its room busy until
/// `arrival + delta`, are available at slot 0; one urgent patient arrives at
/// `arrival`. Every room starts an elective at once under NE_LPT, so the
/// urgent case waits exactly `delta`.
pub fn corollary_instance(num_ors: usize, arrival: Slot, delta: Slot) -> TinyInstance {
    let horizon = arrival + delta + 2;
    let config = tiny_config(num_ors, horizon, false);
    let mut patients: Vec<Patient> = (0..num_ors)
        .map(|id| make_patient(id, ELECTIVE, 0, Some(0), arrival + delta, num_ors))
        .collect();
    patients.push(make_patient(num_ors, URGENT, arrival, None, 1, num_ors));
    TinyInstance {
        config,
        roster: Roster {
            seed: 0,
            patients,
            emergency_slot: None,
        },
        zero_setups: true,
        no_contention: false,
    }
}

pub fn check_corollary(num_ors: usize, arrival: Slot, delta: Slot) -> Result<CorollaryReport, OracleError> {
    let inst = corollary_instance(num_ors, arrival, delta);
    let oi = inst.oracle_instance();
    let opt = solve_exact(&oi)?;
    let seq = run_on_roster(&inst.config, &inst.roster, &mut heuristic_policy(HeuristicKind::NeLpt))
        .expect("heuristics respect the protocol");
    let urgent = num_ors;
    let p = &inst.roster.patients[urgent];
    let seq_wait = seq.outcomes[urgent].map(|o| reward::waiting_time(p, o.start));
    debug_assert_eq!(seq_wait, Some(delta));
    let opt_wait = opt
        .cases
        .iter()
        .find(|c| c.patient == urgent)
        .map_or(Slot::MAX, |c| reward::waiting_time(p, c.start));
    let seq_cr = reward::day_reward::<f64>(&seq, &inst.config).day_reward;
    let d = delta as f64;
    Ok(CorollaryReport {
        num_ors,
        arrival,
        delta: seq_wait.unwrap_or(delta),
        opt_wait,
        gap: opt.objective - seq_cr,
        bound: inst.config.class(URGENT).delay_coeff * d * d,
    })
}

/// Full pass used by the command line and the acceptance suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheorySummary {
    pub coupling: CouplingSummary,
    /// Per-instance epoch ledgers behind `coupling`.
    pub coupling_reports: Vec<CouplingReport>,
    pub bounds: Vec<BoundReport>,
    /// Draws skipped because the two schedules served different patients.
    pub coverage_skipped: usize,
    pub corollary: Vec<CorollaryReport>,
}

impl TheorySummary {
    pub fn wait_violations(&self) -> usize {
        self.bounds.iter().filter(|b| !b.wait_holds()).count()
    }

    pub fn linear_violations(&self) -> usize {
        self.bounds.iter().filter(|b| !b.linear_holds()).count()
    }

    pub fn monotone_violations(&self) -> usize {
        self.bounds.iter().filter(|b| !b.monotone()).count()
    }

    pub fn corollary_holds(&self) -> bool {
        self.corollary.iter().all(|c| c.holds())
    }
}

/// Weak-coupling checks on `coupling_instances` generated days and bound
/// checks on `bound_instances` days where both schedules share coverage.
pub fn run_theory_checks(base_seed: u64, coupling_instances: usize, bound_instances: usize) -> TheorySummary {
    let reports: Vec<CouplingReport> = (0..coupling_instances as u64)
        .into_par_iter()
        .map(|i| {
            check_weak_coupling(
                &TinyInstance::random_weakly_coupled(crate::seeding::derive_seed(base_seed, i)),
                OneStepQ::Immediate,
            )
        })
        .collect();
    let mut bounds = Vec::with_capacity(bound_instances);
    let mut skipped = 0;
    let mut i = 0u64;
    let bound_base = base_seed ^ 0xB0B0_B0B0;
    while bounds.len() < bound_instances && i < 50 * bound_instances as u64 + 50 {
        let batch: Vec<BoundReport> = (i..i + 64)
            .into_par_iter()
            .map(|s| {
                let inst = TinyInstance::random(crate::seeding::derive_seed(bound_base, s), 8);
                regret_for_policy(&inst, HeuristicKind::NeLpt).expect("generated within the exact limits")
            })
            .collect();
        i += 64;
        for b in batch {
            if bounds.len() == bound_instances {
                break;
            }
            if b.same_coverage {
                bounds.push(b);
            } else {
                skipped += 1;
            }
        }
    }
    let mut corollary = Vec::new();
    for j in 1..=3 {
        for arrival in 1..=3 {
            for delta in 1..=(12 - arrival - 2) {
                corollary.push(check_corollary(j, arrival, delta).expect("construction within the exact limits"));
            }
        }
    }
    TheorySummary {
        coupling: CouplingSummary::of(&reports),
        coupling_reports: reports,
        bounds,
        coverage_skipped: skipped,
        corollary,
    }
}

#[cfg(test)]
mod tests;
