//! Rule-based dispatchers and the within-epoch sequential assignment
//! protocol shared by every policy.

use std::fmt;
use std::str::FromStr;

use crate::domain::{Category, SimConfig, Slot};
use crate::simenv::{ActionProvider, Episode, JointAction};

/// View offered to the agent whose turn it is inside one epoch.
#[derive(Clone, Copy, Debug)]
pub struct AssignContext<'e, 'a> {
    pub episode: &'e Episode<'a>,
    pub or: usize,
    /// Patients already claimed this epoch, per class (index `k - 1`).
    pub taken: &'e [usize],
    /// `(or, class)` picks of the agents that acted earlier this epoch.
    pub earlier: &'e [(usize, usize)],
}

impl<'e, 'a> AssignContext<'e, 'a> {
    pub fn config(&self) -> &'a SimConfig {
        self.episode.config
    }

    pub fn clock(&self) -> Slot {
        self.episode.clock()
    }

    /// Queue length of class `k` after earlier picks.
    pub fn available(&self, class_id: usize) -> usize {
        self.episode.state().queue_len(class_id) - self.taken[class_id - 1]
    }

    /// Patient at the head of the depleted queue `k`.
    pub fn head(&self, class_id: usize) -> Option<usize> {
        self.episode.state().queues[class_id - 1]
            .get(self.taken[class_id - 1])
            .copied()
    }

    /// Feasibility mask over `{0..K}`; action 0 is always allowed.
    pub fn mask(&self) -> Vec<bool> {
        let k = self.config().num_classes();
        std::iter::once(true)
            .chain((1..=k).map(|c| self.available(c) > 0))
            .collect()
    }

    /// Whether `or` has not yet claimed anything and is idle at this epoch.
    fn room_open(&self, or: usize) -> bool {
        self.episode.state().ors[or].is_free() && !self.earlier.iter().any(|&(o, _)| o == or)
    }
}

/// A per-agent chooser. The returned class must be feasible under
/// [`AssignContext::mask`]; anything else is replaced by idling.
pub trait Dispatcher {
    fn choose(&mut self, ctx: &AssignContext<'_, '_>) -> usize;
}

impl<F: FnMut(&AssignContext<'_, '_>) -> usize> Dispatcher for F {
    fn choose(&mut self, ctx: &AssignContext<'_, '_>) -> usize {
        self(ctx)
    }
}

/// Sequential assignment in ascending room order.
pub fn sequential_assign<D: Dispatcher + ?Sized>(episode: &Episode<'_>, dispatcher: &mut D) -> JointAction {
    let order: Vec<usize> = (0..episode.config.num_ors).collect();
    sequential_assign_ordered(episode, &order, dispatcher)
}

/// Sequential assignment visiting rooms in `order`. Busy rooms idle; each
/// free room sees the queues depleted by the rooms visited before it.
pub fn sequential_assign_ordered<D: Dispatcher + ?Sized>(
    episode: &Episode<'_>,
    order: &[usize],
    dispatcher: &mut D,
) -> JointAction {
    let state = episode.state();
    let mut action = JointAction::idle(episode.config.num_ors);
    let mut taken = vec![0usize; episode.config.num_classes()];
    let mut earlier = Vec::with_capacity(order.len());
    for &or in order {
        if !state.ors[or].is_free() {
            continue;
        }
        let ctx = AssignContext {
            episode,
            or,
            taken: &taken,
            earlier: &earlier,
        };
        let pick = dispatcher.choose(&ctx);
        let pick = if pick >= 1 && pick <= taken.len() && ctx.available(pick) > 0 {
            pick
        } else {
            0
        };
        if pick > 0 {
            taken[pick - 1] += 1;
        }
        action.0[or] = pick;
        earlier.push((or, pick));
    }
    action
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeuristicKind {
    SptU,
    LptU,
    NeLpt,
    ELpt,
    NeSpt,
    PreSched,
}

impl HeuristicKind {
    pub const ALL: [HeuristicKind; 6] = [
        HeuristicKind::SptU,
        HeuristicKind::LptU,
        HeuristicKind::NeLpt,
        HeuristicKind::ELpt,
        HeuristicKind::NeSpt,
        HeuristicKind::PreSched,
    ];

    /// Short label used in tables and on the command line.
    pub fn label(self) -> &'static str {
        match self {
            HeuristicKind::SptU => "SPT_U",
            HeuristicKind::LptU => "LPT_U",
            HeuristicKind::NeLpt => "NE_LPT",
            HeuristicKind::ELpt => "E_LPT",
            HeuristicKind::NeSpt => "NE_SPT",
            HeuristicKind::PreSched => "Pre-s",
        }
    }
}

impl fmt::Display for HeuristicKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown heuristic `{0}` (expected spt_u, lpt_u, ne_lpt, e_lpt, ne_spt or pre_s)")]
pub struct UnknownHeuristic(pub String);

impl FromStr for HeuristicKind {
    type Err = UnknownHeuristic;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        Ok(match key.as_str() {
            "sptu" => HeuristicKind::SptU,
            "lptu" => HeuristicKind::LptU,
            "nelpt" => HeuristicKind::NeLpt,
            "elpt" => HeuristicKind::ELpt,
            "nespt" => HeuristicKind::NeSpt,
            "pres" | "presched" | "preschedule" => HeuristicKind::PreSched,
            _ => return Err(UnknownHeuristic(s.to_string())),
        })
    }
}

/// Ranked preference over the currently feasible classes. The first entry
/// is the pick; an empty list means idle.
pub fn heuristic_choose(kind: HeuristicKind, ctx: &AssignContext<'_, '_>) -> Vec<usize> {
    let cfg = ctx.config();
    let mut feasible: Vec<usize> = (1..=cfg.num_classes()).filter(|&k| ctx.available(k) > 0).collect();
    let mean = |k: usize| cfg.class(k).duration.mean();
    let elective = |k: usize| cfg.class(k).category.is_elective();
    let by = |a: f64, b: f64| a.partial_cmp(&b).expect("finite means");
    match kind {
        HeuristicKind::SptU => {
            feasible.sort_by(|&a, &b| by(mean(a), mean(b)).then(elective(a).cmp(&elective(b))).then(a.cmp(&b)))
        }
        HeuristicKind::LptU => {
            feasible.sort_by(|&a, &b| by(mean(b), mean(a)).then(elective(a).cmp(&elective(b))).then(a.cmp(&b)))
        }
        HeuristicKind::NeSpt => {
            feasible.sort_by(|&a, &b| elective(a).cmp(&elective(b)).then(by(mean(a), mean(b))).then(a.cmp(&b)))
        }
        HeuristicKind::NeLpt => {
            feasible.sort_by(|&a, &b| elective(a).cmp(&elective(b)).then(by(mean(b), mean(a))).then(a.cmp(&b)))
        }
        HeuristicKind::ELpt => {
            feasible.sort_by(|&a, &b| elective(b).cmp(&elective(a)).then(by(mean(b), mean(a))).then(a.cmp(&b)))
        }
        HeuristicKind::PreSched => return presched_rank(ctx, &feasible),
    }
    feasible
}

/// Waiting non-electives first (most delay-sensitive first), then due
/// electives planned on this room, then due electives whose own room cannot
/// take them this epoch. An elective is started only once its reference is
/// reached and only if its expected block still ends within regular hours.
fn presched_rank(ctx: &AssignContext<'_, '_>, feasible: &[usize]) -> Vec<usize> {
    let cfg = ctx.config();
    let clock = ctx.clock();
    let last = ctx.episode.state().ors[ctx.or].last_class;
    let mut own = Vec::new();
    let mut non_elective = Vec::new();
    let mut stranded = Vec::new();
    for &k in feasible {
        let class = cfg.class(k);
        if class.category != Category::Elective {
            non_elective.push(k);
            continue;
        }
        let p = ctx.episode.patient(ctx.head(k).expect("feasible class has a head"));
        let tau = p.reference.expect("elective has a reference");
        if tau > clock || clock + class.duration.mean_slots() + cfg.setup.get(last, k) > cfg.horizon {
            continue;
        }
        match p.planned_or {
            Some(r) if r == ctx.or => own.push((tau, k)),
            Some(r) if ctx.room_open(r) => {}
            _ => stranded.push((tau, k)),
        }
    }
    own.sort();
    stranded.sort();
    non_elective.sort_by(|&a, &b| {
        cfg.class(b)
            .delay_coeff
            .partial_cmp(&cfg.class(a).delay_coeff)
            .expect("finite")
            .then(a.cmp(&b))
    });
    non_elective
        .into_iter()
        .chain(own.into_iter().map(|(_, k)| k))
        .chain(stranded.into_iter().map(|(_, k)| k))
        .collect()
}

/// A stateless rule dispatcher.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Heuristic(pub HeuristicKind);

impl Dispatcher for Heuristic {
    fn choose(&mut self, ctx: &AssignContext<'_, '_>) -> usize {
        heuristic_choose(self.0, ctx).first().copied().unwrap_or(0)
    }
}

/// Adapts any dispatcher to a full joint-action policy.
#[derive(Clone, Debug)]
pub struct Sequential<D>(pub D);

impl<D: Dispatcher> ActionProvider for Sequential<D> {
    fn joint_action(&mut self, episode: &Episode<'_>) -> JointAction {
        sequential_assign(episode, &mut self.0)
    }
}

/// Convenience constructor for a heuristic policy.
pub fn heuristic_policy(kind: HeuristicKind) -> Sequential<Heuristic> {
    Sequential(Heuristic(kind))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Patient;
    use crate::simenv::{Roster, Simulator};

    fn quiet() -> SimConfig {
        let mut cfg = SimConfig::default_day();
        cfg.urgent_rate = 0.0;
        cfg.emergency_day_prob = 0.0;
        cfg.elective_counts = [0; 4];
        cfg
    }

    fn ne(id: usize, class_id: usize) -> Patient {
        Patient {
            id,
            class_id,
            arrival: 0,
            reference: None,
            duration: 3,
            raw_duration: 3.0,
            planned_or: None,
        }
    }

    fn el(id: usize, class_id: usize, tau: Slot, or: usize) -> Patient {
        Patient {
            id,
            class_id,
            arrival: 0,
            reference: Some(tau),
            duration: 3,
            raw_duration: 3.0,
            planned_or: Some(or),
        }
    }

    fn roster(patients: Vec<Patient>) -> Roster {
        Roster {
            seed: 0,
            patients,
            emergency_slot: None,
        }
    }

    fn first_action(cfg: &SimConfig, r: &Roster, kind: HeuristicKind) -> Vec<usize> {
        let ep = Episode::new(cfg, r);
        sequential_assign(&ep, &mut Heuristic(kind)).0
    }

    #[test]
    fn parses_labels() {
        for k in HeuristicKind::ALL {
            assert_eq!(k.label().parse::<HeuristicKind>().unwrap(), k);
        }
        assert_eq!("ne_lpt".parse::<HeuristicKind>().unwrap(), HeuristicKind::NeLpt);
        assert!("fifo".parse::<HeuristicKind>().is_err());
    }

    #[test]
    fn two_rooms_cannot_take_the_same_patient() {
        let mut cfg = quiet();
        cfg.num_ors = 2;
        let r = roster(vec![ne(0, 5)]);
        assert_eq!(first_action(&cfg, &r, HeuristicKind::NeLpt), vec![5, 0]);
        let r = roster(vec![ne(0, 5), ne(1, 7)]);
        assert_eq!(first_action(&cfg, &r, HeuristicKind::NeLpt), vec![7, 5]);
    }

    #[test]
    fn empty_queues_idle() {
        let cfg = quiet();
        let r = roster(vec![]);
        for kind in HeuristicKind::ALL {
            assert_eq!(first_action(&cfg, &r, kind), vec![0; 6]);
        }
    }

    #[test]
    fn spt_prefers_short_urgent() {
        let mut cfg = quiet();
        cfg.num_ors = 1;
        let r = roster(vec![ne(0, 5), ne(1, 7)]);
        assert_eq!(first_action(&cfg, &r, HeuristicKind::SptU), vec![5]);
        assert_eq!(first_action(&cfg, &r, HeuristicKind::LptU), vec![7]);
    }

    #[test]
    fn group_rules() {
        let mut cfg = quiet();
        cfg.num_ors = 1;
        let r = roster(vec![el(0, 4, 0, 0), el(1, 1, 0, 0), ne(2, 5), ne(3, 8)]);
        assert_eq!(first_action(&cfg, &r, HeuristicKind::ELpt), vec![4]);
        assert_eq!(first_action(&cfg, &r, HeuristicKind::NeLpt), vec![8]);
        assert_eq!(first_action(&cfg, &r, HeuristicKind::NeSpt), vec![5]);
        // equal means across groups: the non-elective wins the tie
        assert_eq!(first_action(&cfg, &r, HeuristicKind::SptU), vec![5]);
        assert_eq!(first_action(&cfg, &r, HeuristicKind::LptU), vec![8]);
        let only_electives = roster(vec![el(0, 1, 0, 0), el(1, 3, 0, 0)]);
        assert_eq!(first_action(&cfg, &only_electives, HeuristicKind::NeLpt), vec![3]);
        assert_eq!(first_action(&cfg, &only_electives, HeuristicKind::NeSpt), vec![1]);
    }

    #[test]
    fn presched_waits_for_reference_and_room() {
        let mut cfg = quiet();
        cfg.num_ors = 2;
        let r = roster(vec![el(0, 2, 0, 1), el(1, 3, 4, 0)]);
        // elective 0 is due on room 1, elective 1 is not yet due
        assert_eq!(first_action(&cfg, &r, HeuristicKind::PreSched), vec![0, 2]);
        let r = roster(vec![el(0, 2, 0, 0), ne(1, 6)]);
        assert_eq!(first_action(&cfg, &r, HeuristicKind::PreSched), vec![6, 2]);
    }

    #[test]
    fn presched_keeps_electives_within_regular_hours() {
        let mut cfg = quiet();
        cfg.num_ors = 1;
        cfg.horizon = 30;
        // complex electives take 35 expected slots; class 1 takes 4
        let r = roster(vec![el(0, 4, 0, 0), el(1, 1, 0, 0)]);
        assert_eq!(first_action(&cfg, &r, HeuristicKind::PreSched), vec![1]);
    }

    #[test]
    fn presched_moves_stranded_electives() {
        let mut cfg = quiet();
        cfg.num_ors = 2;
        let r = roster(vec![el(0, 4, 0, 0), el(1, 1, 1, 0)]);
        let mut ep = Episode::new(&cfg, &r);
        // room 0 takes class 4 and stays busy when class 1 falls due
        let first = sequential_assign(&ep, &mut Heuristic(HeuristicKind::PreSched));
        assert_eq!(first.0, vec![4, 0]);
        ep.step(&first).unwrap();
        let second = sequential_assign(&ep, &mut Heuristic(HeuristicKind::PreSched));
        assert_eq!(second.0, vec![0, 1]);
    }

    #[test]
    fn heuristics_run_full_days() {
        let sim = Simulator::new(SimConfig::default_day());
        for kind in HeuristicKind::ALL {
            let rec = sim.run_episode(11, &mut heuristic_policy(kind)).unwrap();
            assert!(rec.served_count() >= 20, "{kind}: {}", rec.served_count());
            let again = sim.run_episode(11, &mut heuristic_policy(kind)).unwrap();
            assert_eq!(rec, again);
        }
    }
}
