//! Per-agent observation vector.
//!
//! Layout, for `K` classes and `J` rooms:
//!
//! | block              | width      |
//! |--------------------|------------|
//! | clock `t / T`      | 1          |
//! | queue lengths / 10 | K          |
//! | queue gaps / T     | K          |
//! | per room: busy, residual / T, last-class one-hot | J (2 + K) |
//! | acting-agent one-hot | J        |
//! | earlier in-epoch picks over `{0..K}` | K + 1 |
//!
//! Queue features describe the queues depleted by earlier picks. The gap
//! is `clock - tau` (elective head) or `clock - alpha` (non-elective head).

use serde::{Deserialize, Serialize};

use crate::heuristics::AssignContext;
use crate::scalar::Scalar;

const QUEUE_SCALE: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObsLayout {
    pub num_classes: usize,
    pub num_ors: usize,
}

impl ObsLayout {
    pub fn new(num_classes: usize, num_ors: usize) -> Self {
        ObsLayout { num_classes, num_ors }
    }

    pub fn len(&self) -> usize {
        let (k, j) = (self.num_classes, self.num_ors);
        1 + 2 * k + j * (2 + k) + j + (k + 1)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Offset of the acting-agent one-hot block.
    pub fn agent_offset(&self) -> usize {
        let (k, j) = (self.num_classes, self.num_ors);
        1 + 2 * k + j * (2 + k)
    }

    pub fn earlier_offset(&self) -> usize {
        self.agent_offset() + self.num_ors
    }

    /// Critic input: the observation with the agent one-hot cleared.
    pub fn critic_view<S: Scalar>(&self, obs: &[S]) -> Vec<S> {
        let mut v = obs.to_vec();
        let a = self.agent_offset();
        for x in &mut v[a..a + self.num_ors] {
            *x = S::zero();
        }
        v
    }
}

/// Encodes the state seen by `ctx.or` into `out` (cleared first).
pub fn encode_observation<S: Scalar>(ctx: &AssignContext<'_, '_>, out: &mut Vec<S>) {
    let cfg = ctx.config();
    let layout = ObsLayout::new(cfg.num_classes(), cfg.num_ors);
    let state = ctx.episode.state();
    let t = cfg.horizon as f64;
    let clock = ctx.clock();
    out.clear();
    out.reserve(layout.len());
    out.push(S::lit(clock as f64 / t));
    for k in 1..=layout.num_classes {
        out.push(S::lit(ctx.available(k) as f64 / QUEUE_SCALE));
    }
    for k in 1..=layout.num_classes {
        let gap = ctx.head(k).map_or(0.0, |id| {
            let p = ctx.episode.patient(id);
            let anchor = p.reference.unwrap_or(p.arrival);
            (clock as f64 - anchor as f64) / t
        });
        out.push(S::lit(gap));
    }
    for room in &state.ors {
        match room.current {
            Some(pid) if !room.is_free() => {
                let class = ctx.episode.patient(pid).class_id;
                let setup = state
                    .served
                    .iter()
                    .rev()
                    .find(|a| a.or == room.or_id)
                    .map_or(0, |a| a.setup);
                let expected = cfg.class(class).duration.mean() + setup as f64;
                let residual = (expected - room.elapsed(clock) as f64).max(1.0);
                out.push(S::one());
                out.push(S::lit(residual / t));
            }
            _ => {
                out.push(S::zero());
                out.push(S::zero());
            }
        }
        for k in 1..=layout.num_classes {
            out.push(if room.last_class == Some(k) {
                S::one()
            } else {
                S::zero()
            });
        }
    }
    for j in 0..layout.num_ors {
        out.push(if j == ctx.or { S::one() } else { S::zero() });
    }
    let mut hist = vec![0usize; layout.num_classes + 1];
    for &(_, a) in ctx.earlier {
        hist[a] += 1;
    }
    out.extend(hist.into_iter().map(S::from_count));
    debug_assert_eq!(out.len(), layout.len());
}
