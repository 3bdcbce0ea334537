//! Discrete-time multi-room environment.
//!
//! A day is fully realized at [`Simulator::roster`]: elective durations,
//! urgent arrivals, the emergency event and every non-elective duration are
//! drawn from the seed before any decision is taken, so two policies run
//! on the same seed face the same day.

mod record;

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use thiserror::Error;

pub use record::{CaseOutcome, EpisodeRecord, RecordParseError};

use crate::domain::{effective_duration, Category, GammaLaw, Patient, SimConfig, Slot};
use crate::preschedule::{build_preschedule, elective_roster, PreSchedule};
use crate::reward;

/// Draws a Gamma duration and rounds it up to whole slots (at least one).
/// Returns the rounded slots and the raw draw.
pub fn sample_duration<R: Rng + ?Sized>(law: &GammaLaw, rng: &mut R) -> (Slot, f64) {
    let gamma = Gamma::new(law.shape, law.scale).expect("validated gamma law");
    let raw: f64 = gamma.sample(rng);
    (raw.ceil().max(1.0) as Slot, raw)
}

/// Per-slot hazard that makes at least one trigger over `horizon` slots
/// happen with probability `day_prob`.
pub fn emergency_hazard(day_prob: f64, horizon: Slot) -> f64 {
    1.0 - (1.0 - day_prob).powf(1.0 / horizon as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Arrival {
    pub slot: Slot,
    pub class_id: usize,
}

/// Non-elective arrivals for one day, in slot order. Urgent cases follow a
/// per-slot Poisson law spread uniformly over the urgent classes; at most
/// one emergency event releases a batch of emergency cases.
pub fn sample_arrivals<R: Rng + ?Sized>(config: &SimConfig, rng: &mut R) -> (Vec<Arrival>, Option<Slot>) {
    let urgent: Vec<usize> = config.classes_in(Category::Urgent).map(|c| c.id).collect();
    let emergency = config.classes_in(Category::Emergency).map(|c| c.id).next();
    let poisson = (config.urgent_rate > 0.0 && !urgent.is_empty())
        .then(|| Poisson::new(config.urgent_rate).expect("positive rate"));
    let hazard = emergency_hazard(config.emergency_day_prob, config.horizon);
    let mut out = Vec::new();
    let mut fired = None;
    for slot in 0..config.horizon {
        if let Some(p) = &poisson {
            let n = p.sample(rng) as usize;
            for _ in 0..n {
                let class_id = urgent[rng.random_range(0..urgent.len())];
                out.push(Arrival { slot, class_id });
            }
        }
        if fired.is_none() && hazard > 0.0 && rng.random::<f64>() < hazard {
            fired = Some(slot);
            if let Some(class_id) = emergency {
                for _ in 0..config.emergency_batch_size {
                    out.push(Arrival { slot, class_id });
                }
            }
        }
    }
    (out, fired)
}

/// All stochastic draws of one day.
#[derive(Clone, Debug, PartialEq)]
pub struct Roster {
    pub seed: u64,
    /// Electives first (ids `0..n_e`), then non-electives in arrival order.
    pub patients: Vec<Patient>,
    pub emergency_slot: Option<Slot>,
}

impl Roster {
    pub fn electives(&self) -> impl Iterator<Item = &Patient> {
        self.patients.iter().filter(|p| p.is_elective())
    }

    pub fn non_electives(&self) -> impl Iterator<Item = &Patient> {
        self.patients.iter().filter(|p| !p.is_elective())
    }

    /// Sum of the continuous duration draws.
    pub fn raw_workload(&self) -> f64 {
        self.patients.iter().map(|p| p.raw_duration).sum()
    }
}

/// A validated config with its pre-day plan.
#[derive(Clone, Debug)]
pub struct Simulator {
    pub config: SimConfig,
    pub plan: PreSchedule,
    electives: Vec<usize>,
}

impl Simulator {
    pub fn new(config: SimConfig) -> Self {
        let electives = elective_roster(&config);
        let plan = build_preschedule(&electives, &config);
        Simulator {
            config,
            plan,
            electives,
        }
    }

    pub fn with_plan(config: SimConfig, plan: PreSchedule) -> Self {
        let electives = elective_roster(&config);
        assert_eq!(
            plan.entries.len(),
            electives.len(),
            "plan does not match elective roster"
        );
        Simulator {
            config,
            plan,
            electives,
        }
    }

    /// Realizes the day for `seed`.
    pub fn roster(&self, seed: u64) -> Roster {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut patients = Vec::with_capacity(self.electives.len() + 16);
        for (i, &class_id) in self.electives.iter().enumerate() {
            let (duration, raw) = sample_duration(&self.config.class(class_id).duration, &mut rng);
            patients.push(Patient {
                id: i,
                class_id,
                arrival: 0,
                reference: Some(self.plan.reference(i)),
                duration,
                raw_duration: raw,
                planned_or: Some(self.plan.planned_or(i)),
            });
        }
        let (arrivals, emergency_slot) = sample_arrivals(&self.config, &mut rng);
        for a in arrivals {
            let (duration, raw) = sample_duration(&self.config.class(a.class_id).duration, &mut rng);
            patients.push(Patient {
                id: patients.len(),
                class_id: a.class_id,
                arrival: a.slot,
                reference: None,
                duration,
                raw_duration: raw,
                planned_or: None,
            });
        }
        Roster {
            seed,
            patients,
            emergency_slot,
        }
    }

    /// Fresh episode state for `seed` together with the realized roster.
    pub fn reset(&self, seed: u64) -> (GlobalState, Roster) {
        let roster = self.roster(seed);
        (GlobalState::initial(&self.config, &roster), roster)
    }

    pub fn run_episode<P: ActionProvider + ?Sized>(
        &self,
        seed: u64,
        policy: &mut P,
    ) -> Result<EpisodeRecord, ProtocolError> {
        let roster = self.roster(seed);
        run_on_roster(&self.config, &roster, policy)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrStatus {
    pub or_id: usize,
    /// Slot at which the room frees up; `Some` only while a case runs.
    pub busy_until: Option<Slot>,
    pub current: Option<usize>,
    pub started_at: Slot,
    pub last_class: Option<usize>,
    /// Running maximum of completions on this room (`f_j`).
    pub last_finish: Slot,
}

impl OrStatus {
    pub fn is_free(&self) -> bool {
        self.busy_until.is_none()
    }

    pub fn elapsed(&self, clock: Slot) -> Slot {
        if self.busy_until.is_some() {
            clock - self.started_at
        } else {
            0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Assignment {
    pub patient: usize,
    pub start: Slot,
    pub or: usize,
    pub setup: Slot,
    pub finish: Slot,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalState {
    pub clock: Slot,
    /// FIFO per class (index `k - 1`), holding patient ids.
    pub queues: Vec<VecDeque<usize>>,
    pub ors: Vec<OrStatus>,
    pub served: Vec<Assignment>,
    pub emergency_fired: bool,
    /// Non-elective ids by (arrival, id); entries before `next_arrival`
    /// have been admitted.
    pending: Vec<usize>,
    next_arrival: usize,
}

impl GlobalState {
    pub fn initial(config: &SimConfig, roster: &Roster) -> Self {
        let mut queues = vec![VecDeque::new(); config.num_classes()];
        let mut electives: Vec<&Patient> = roster.electives().collect();
        electives.sort_by_key(|p| (p.reference, p.id));
        for p in electives {
            queues[p.class_id - 1].push_back(p.id);
        }
        let ors = (0..config.num_ors)
            .map(|or_id| OrStatus {
                or_id,
                busy_until: None,
                current: None,
                started_at: 0,
                last_class: None,
                last_finish: 0,
            })
            .collect();
        let mut pending: Vec<usize> = roster.non_electives().map(|p| p.id).collect();
        pending.sort_by_key(|&id| (roster.patients[id].arrival, id));
        let mut state = GlobalState {
            clock: 0,
            queues,
            ors,
            served: Vec::new(),
            emergency_fired: false,
            pending,
            next_arrival: 0,
        };
        state.admit_arrivals(roster);
        state
    }

    fn admit_arrivals(&mut self, roster: &Roster) {
        while let Some(&id) = self.pending.get(self.next_arrival) {
            let p = &roster.patients[id];
            if p.arrival > self.clock {
                break;
            }
            self.queues[p.class_id - 1].push_back(p.id);
            self.next_arrival += 1;
        }
        if roster.emergency_slot.is_some_and(|s| s <= self.clock) {
            self.emergency_fired = true;
        }
    }

    pub fn free_ors(&self) -> impl Iterator<Item = usize> + '_ {
        self.ors.iter().filter(|o| o.is_free()).map(|o| o.or_id)
    }

    pub fn queue_len(&self, class_id: usize) -> usize {
        self.queues[class_id - 1].len()
    }

    pub fn in_progress(&self) -> usize {
        self.ors.iter().filter(|o| !o.is_free()).count()
    }

    /// Patients that have arrived but are not yet visible (`arrival > clock`).
    pub fn not_yet_arrived(&self) -> usize {
        self.pending.len() - self.next_arrival
    }
}

/// Per-room decision for one epoch: 0 idles, `k` starts the head of queue `k`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct JointAction(pub Vec<usize>);

impl JointAction {
    pub fn idle(num_ors: usize) -> Self {
        JointAction(vec![0; num_ors])
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("joint action has {got} entries for {expected} rooms")]
    WrongArity { expected: usize, got: usize },
    #[error("room {or} is busy at slot {clock} but was asked to start class {class}")]
    BusyRoom { or: usize, class: usize, clock: Slot },
    #[error("room {or} selected empty queue {class} at slot {clock}")]
    EmptyQueue { or: usize, class: usize, clock: Slot },
    #[error("room {or} selected unknown class {class}")]
    UnknownClass { or: usize, class: usize },
    #[error("no decision epochs remain (clock {clock} ≥ horizon)")]
    HorizonReached { clock: Slot },
}

/// Something that produces a conflict-free joint action for the current
/// epoch of an episode.
pub trait ActionProvider {
    fn joint_action(&mut self, episode: &Episode<'_>) -> JointAction;
}

impl<F: FnMut(&Episode<'_>) -> JointAction> ActionProvider for F {
    fn joint_action(&mut self, episode: &Episode<'_>) -> JointAction {
        self(episode)
    }
}

/// One running day.
#[derive(Clone, Debug)]
pub struct Episode<'a> {
    pub config: &'a SimConfig,
    pub roster: &'a Roster,
    state: GlobalState,
    epoch_rewards: Vec<f64>,
}

impl<'a> Episode<'a> {
    pub fn new(config: &'a SimConfig, roster: &'a Roster) -> Self {
        Episode {
            config,
            roster,
            state: GlobalState::initial(config, roster),
            epoch_rewards: Vec::with_capacity(config.horizon as usize),
        }
    }

    pub fn state(&self) -> &GlobalState {
        &self.state
    }

    pub fn clock(&self) -> Slot {
        self.state.clock
    }

    pub fn is_done(&self) -> bool {
        self.state.clock >= self.config.horizon
    }

    pub fn patient(&self, id: usize) -> &Patient {
        &self.roster.patients[id]
    }

    /// Applies one joint action and advances the clock by one slot. Returns
    /// the assignments started at this epoch, in room order.
    pub fn step(&mut self, action: &JointAction) -> Result<Vec<Assignment>, ProtocolError> {
        let clock = self.state.clock;
        if clock >= self.config.horizon {
            return Err(ProtocolError::HorizonReached { clock });
        }
        let j = self.config.num_ors;
        if action.0.len() != j {
            return Err(ProtocolError::WrongArity {
                expected: j,
                got: action.0.len(),
            });
        }
        // validate the whole action before mutating anything
        let mut taken = vec![0usize; self.config.num_classes()];
        for (or, &k) in action.0.iter().enumerate() {
            if k == 0 {
                continue;
            }
            if k > self.config.num_classes() {
                return Err(ProtocolError::UnknownClass { or, class: k });
            }
            if !self.state.ors[or].is_free() {
                return Err(ProtocolError::BusyRoom { or, class: k, clock });
            }
            taken[k - 1] += 1;
            if taken[k - 1] > self.state.queues[k - 1].len() {
                return Err(ProtocolError::EmptyQueue { or, class: k, clock });
            }
        }

        let mut started = Vec::new();
        let mut team_reward = 0.0;
        for (or, &k) in action.0.iter().enumerate() {
            if k == 0 {
                continue;
            }
            let pid = self.state.queues[k - 1].pop_front().expect("validated non-empty");
            let patient = &self.roster.patients[pid];
            let room = &mut self.state.ors[or];
            let setup = self.config.setup.get(room.last_class, k);
            let busy = effective_duration(patient.duration, room.last_class, k, &self.config.setup);
            let finish = clock + busy;
            room.busy_until = Some(finish);
            room.current = Some(pid);
            room.started_at = clock;
            room.last_class = Some(k);
            room.last_finish = room.last_finish.max(finish);
            let wait = reward::waiting_time(patient, clock);
            team_reward += reward::immediate_reward::<f64>(self.config.class(k), wait);
            let a = Assignment {
                patient: pid,
                start: clock,
                or,
                setup,
                finish,
            };
            self.state.served.push(a);
            started.push(a);
        }
        self.epoch_rewards.push(team_reward);

        self.state.clock += 1;
        let now = self.state.clock;
        for room in &mut self.state.ors {
            if room.busy_until.is_some_and(|b| b <= now) {
                room.busy_until = None;
                room.current = None;
            }
        }
        self.state.admit_arrivals(self.roster);
        Ok(started)
    }

    /// Closes the day: cases still running finish at their scheduled slot.
    pub fn finish(self) -> EpisodeRecord {
        let mut outcomes = vec![None; self.roster.patients.len()];
        for a in &self.state.served {
            outcomes[a.patient] = Some(CaseOutcome {
                start: a.start,
                or: a.or,
                setup: a.setup,
                finish: a.finish,
            });
        }
        let or_last_finish: Vec<Slot> = self.state.ors.iter().map(|o| o.last_finish).collect();
        let ot = reward::overtime(&or_last_finish, self.config.horizon);
        EpisodeRecord {
            seed: self.roster.seed,
            horizon: self.config.horizon,
            num_ors: self.config.num_ors,
            emergency_slot: self.roster.emergency_slot,
            patients: self.roster.patients.clone(),
            outcomes,
            or_last_finish,
            epoch_rewards: self.epoch_rewards,
            terminal_reward: reward::terminal_reward(ot as f64, self.config.reward.overtime_cost),
        }
    }
}

/// Runs a full day on a given realization.
pub fn run_on_roster<P: ActionProvider + ?Sized>(
    config: &SimConfig,
    roster: &Roster,
    policy: &mut P,
) -> Result<EpisodeRecord, ProtocolError> {
    let mut ep = Episode::new(config, roster);
    while !ep.is_done() {
        let action = policy.joint_action(&ep);
        ep.step(&action)?;
    }
    Ok(ep.finish())
}
