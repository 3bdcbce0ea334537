//! Shared actor-critic trained with PPO. Every room runs the same actor;
//! the critic scores the global state.

pub mod nn;
mod obs;
pub mod ppo;
mod rollout;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use obs::{encode_observation, ObsLayout};
pub use rollout::{collect_on_roster, collect_trajectory, sample_action, ActionMode, Trajectory, Transition};
pub use train::{
    evaluate_greedy, load_checkpoint, save_checkpoint, train, training_seed, validation_seeds, write_curve_csv,
    Checkpoint, CheckpointError, CurvePoint, TrainError, TrainReport, CHECKPOINT_FORMAT,
};

use crate::heuristics::{AssignContext, Dispatcher, Sequential};
use crate::scalar::Scalar;
use crate::seeding;
use nn::{masked_softmax, Mlp};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActorCritic<S> {
    pub layout: ObsLayout,
    /// Categorical head over `{0..K}`.
    pub actor: Mlp<S>,
    /// Scalar value head on the agent-free view.
    pub critic: Mlp<S>,
}

impl<S: Scalar> ActorCritic<S> {
    /// Both trunks share `hidden`. The actor head starts small so the
    /// initial policy is close to uniform over feasible actions.
    pub fn new(layout: ObsLayout, hidden: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive_seed(seed, seeding::stream::INIT));
        let sizes = |out: usize| {
            let mut v = vec![layout.len()];
            v.extend_from_slice(hidden);
            v.push(out);
            v
        };
        let actor = Mlp::new(&sizes(layout.num_classes + 1), 0.01, &mut rng);
        let critic = Mlp::new(&sizes(1), 1.0, &mut rng);
        ActorCritic { layout, actor, critic }
    }

    /// Masked action distribution.
    pub fn policy(&self, obs: &[S], mask: &[bool]) -> Vec<S> {
        masked_softmax(&self.actor.forward(obs), mask)
    }

    pub fn value(&self, critic_obs: &[S]) -> S {
        self.critic.forward(critic_obs)[0]
    }

    pub fn is_finite(&self) -> bool {
        self.actor.is_finite() && self.critic.is_finite()
    }
}

/// Greedy execution of a trained actor.
#[derive(Clone, Debug)]
pub struct MarlDispatcher<'n, S> {
    net: &'n ActorCritic<S>,
    obs: Vec<S>,
}

impl<'n, S: Scalar> MarlDispatcher<'n, S> {
    pub fn new(net: &'n ActorCritic<S>) -> Self {
        MarlDispatcher {
            net,
            obs: Vec::with_capacity(net.layout.len()),
        }
    }
}

impl<S: Scalar> Dispatcher for MarlDispatcher<'_, S> {
    fn choose(&mut self, ctx: &AssignContext<'_, '_>) -> usize {
        let mask = ctx.mask();
        if mask.iter().skip(1).all(|&m| !m) {
            return 0;
        }
        encode_observation(ctx, &mut self.obs);
        let p = self.net.policy(&self.obs, &mask);
        let mut best = 0;
        for (j, &v) in p.iter().enumerate() {
            if v > p[best] {
                best = j;
            }
        }
        best
    }
}

/// Joint-action policy for a trained network.
pub fn marl_policy<S: Scalar>(net: &ActorCritic<S>) -> Sequential<MarlDispatcher<'_, S>> {
    Sequential(MarlDispatcher::new(net))
}
