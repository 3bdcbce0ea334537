//! Day-long trajectory collection with the shared policy.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::obs::encode_observation;
use super::ActorCritic;
use crate::domain::Slot;
use crate::heuristics::{sequential_assign_ordered, AssignContext, Dispatcher};
use crate::reward;
use crate::scalar::Scalar;
use crate::simenv::{Episode, EpisodeRecord, ProtocolError, Roster, Simulator};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionMode {
    /// Draw from the masked policy with the given stream seed.
    Sample(u64),
    /// Highest-probability feasible action, lowest index on ties.
    Greedy,
}

/// One agent decision.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition<S> {
    pub clock: Slot,
    pub agent: usize,
    pub obs: Vec<S>,
    pub mask: Vec<bool>,
    pub action: usize,
    pub logp: S,
    pub value: S,
    /// Immediate reward of this agent's pick.
    pub reward: S,
}

/// A full day under the shared policy. Only decisions with a real choice
/// are stored: busy rooms and free rooms facing only empty queues idle by
/// force and earn nothing.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<S> {
    pub seed: u64,
    pub transitions: Vec<Transition<S>>,
    /// Team reward per epoch: the sum of that epoch's agent rewards.
    pub epoch_rewards: Vec<S>,
    pub terminal_reward: S,
    pub record: EpisodeRecord,
}

impl<S: Scalar> Trajectory<S> {
    /// Day objective: streamed rewards plus the terminal penalty.
    pub fn day_reward(&self) -> f64 {
        self.epoch_rewards.iter().map(|r| r.as_f64()).sum::<f64>() + self.terminal_reward.as_f64()
    }
}

fn argmax<S: Scalar>(p: &[S]) -> usize {
    let mut best = 0;
    for (j, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = j;
        }
    }
    best
}

/// Inverse-CDF draw from `p`; zero-probability entries are never returned.
pub fn sample_action<S: Scalar, R: Rng + ?Sized>(p: &[S], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (j, &v) in p.iter().enumerate() {
        let v = v.as_f64();
        if v > 0.0 {
            acc += v;
            last = j;
            if u < acc {
                return j;
            }
        }
    }
    last
}

struct Collector<'n, S> {
    net: &'n ActorCritic<S>,
    mode: ActionMode,
    rng: ChaCha8Rng,
    obs: Vec<S>,
    transitions: Vec<Transition<S>>,
    epoch_reward: S,
}

impl<S: Scalar> Dispatcher for Collector<'_, S> {
    fn choose(&mut self, ctx: &AssignContext<'_, '_>) -> usize {
        let mask = ctx.mask();
        if mask.iter().skip(1).all(|&m| !m) {
            return 0;
        }
        encode_observation(ctx, &mut self.obs);
        let p = self.net.policy(&self.obs, &mask);
        let action = match self.mode {
            ActionMode::Sample(_) => sample_action(&p, &mut self.rng),
            ActionMode::Greedy => argmax(&p),
        };
        let r = if action == 0 {
            S::zero()
        } else {
            let patient = ctx.episode.patient(ctx.head(action).expect("feasible action"));
            let wait = reward::waiting_time(patient, ctx.clock());
            reward::immediate_reward::<S>(ctx.config().class(action), wait)
        };
        self.epoch_reward = self.epoch_reward + r;
        let value = self.net.value(&self.net.layout.critic_view(&self.obs));
        self.transitions.push(Transition {
            clock: ctx.clock(),
            agent: ctx.or,
            obs: self.obs.clone(),
            mask,
            action,
            logp: p[action].ln(),
            value,
            reward: r,
        });
        action
    }
}

/// Runs one day on a realized roster. With `randomize_order` the agent
/// order within each epoch is shuffled from the action stream.
pub fn collect_on_roster<S: Scalar>(
    sim: &Simulator,
    roster: &Roster,
    net: &ActorCritic<S>,
    mode: ActionMode,
    randomize_order: bool,
) -> Result<Trajectory<S>, ProtocolError> {
    let stream = match mode {
        ActionMode::Sample(s) => s,
        ActionMode::Greedy => 0,
    };
    let mut c = Collector {
        net,
        mode,
        rng: ChaCha8Rng::seed_from_u64(stream),
        obs: Vec::with_capacity(net.layout.len()),
        transitions: Vec::new(),
        epoch_reward: S::zero(),
    };
    let mut order: Vec<usize> = (0..sim.config.num_ors).collect();
    let mut epoch_rewards = Vec::with_capacity(sim.config.horizon as usize);
    let mut ep = Episode::new(&sim.config, roster);
    while !ep.is_done() {
        if randomize_order {
            order.shuffle(&mut c.rng);
        }
        c.epoch_reward = S::zero();
        let action = sequential_assign_ordered(&ep, &order, &mut c);
        ep.step(&action)?;
        epoch_rewards.push(c.epoch_reward);
    }
    let record = ep.finish();
    Ok(Trajectory {
        seed: roster.seed,
        transitions: c.transitions,
        epoch_rewards,
        terminal_reward: S::lit(record.terminal_reward),
        record,
    })
}

pub fn collect_trajectory<S: Scalar>(
    sim: &Simulator,
    seed: u64,
    net: &ActorCritic<S>,
    mode: ActionMode,
    randomize_order: bool,
) -> Result<Trajectory<S>, ProtocolError> {
    collect_on_roster(sim, &sim.roster(seed), net, mode, randomize_order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::SimConfig;
    use crate::marl::ObsLayout;

    fn setup() -> (Simulator, ActorCritic<f64>) {
        let sim = Simulator::new(SimConfig::default_day());
        let net = ActorCritic::new(ObsLayout::new(8, 6), &[16, 16], 1);
        (sim, net)
    }

    #[test]
    fn greedy_runs_are_identical() {
        let (sim, net) = setup();
        let a = collect_trajectory(&sim, 3, &net, ActionMode::Greedy, false).unwrap();
        let b = collect_trajectory(&sim, 3, &net, ActionMode::Greedy, false).unwrap();
        assert_eq!(a, b);
        let s1 = collect_trajectory(&sim, 3, &net, ActionMode::Sample(9), true).unwrap();
        let s2 = collect_trajectory(&sim, 3, &net, ActionMode::Sample(9), true).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn team_reward_is_sum_of_agent_rewards() {
        let (sim, net) = setup();
        let t = collect_trajectory(&sim, 5, &net, ActionMode::Sample(2), false).unwrap();
        for (clock, &r) in t.epoch_rewards.iter().enumerate() {
            let sum: f64 = t
                .transitions
                .iter()
                .filter(|x| x.clock as usize == clock)
                .map(|x| x.reward)
                .sum();
            assert!((sum - r).abs() < 1e-9);
            assert!((t.record.epoch_rewards[clock] - r).abs() < 1e-9);
        }
        assert!((t.day_reward() - t.record.streamed_total()).abs() < 1e-9);
    }

    #[test]
    fn masked_actions_are_never_taken() {
        let (sim, net) = setup();
        for seed in 0..5 {
            let t = collect_trajectory(&sim, seed, &net, ActionMode::Sample(seed), false).unwrap();
            for x in &t.transitions {
                assert!(x.mask[x.action]);
                assert!(x.mask.iter().skip(1).any(|&m| m));
            }
        }
    }

    #[test]
    fn busy_rooms_record_nothing() {
        let (sim, net) = setup();
        let t = collect_trajectory(&sim, 7, &net, ActionMode::Sample(1), false).unwrap();
        for x in &t.transitions {
            let busy = t
                .record
                .outcomes
                .iter()
                .flatten()
                .any(|o| o.or == x.agent && o.start < x.clock && x.clock < o.finish);
            assert!(!busy, "agent {} decided at {} while busy", x.agent, x.clock);
        }
    }

    #[test]
    fn empty_day_has_zero_rewards() {
        let mut cfg = SimConfig::default_day();
        cfg.urgent_rate = 0.0;
        cfg.emergency_day_prob = 0.0;
        cfg.elective_counts = [0; 4];
        let sim = Simulator::new(cfg);
        let net = ActorCritic::<f64>::new(ObsLayout::new(8, 6), &[8], 1);
        let t = collect_trajectory(&sim, 1, &net, ActionMode::Sample(1), false).unwrap();
        assert!(t.transitions.is_empty());
        assert!(t.epoch_rewards.iter().all(|&r| r == 0.0));
        assert_eq!(t.terminal_reward, 0.0);
    }
}
