//! Advantage estimation and the clipped-surrogate update.

use thiserror::Error;

use super::nn::{entropy, global_norm, masked_softmax, Adam, Mlp};
use super::ActorCritic;
use crate::scalar::Scalar;

/// Backward recursion `A_t = delta_t + gamma * lambda * A_{t+1}` with
/// `delta_t = r_t + gamma * V_{t+1} - V_t`, `V_n = bootstrap`. Returns the
/// advantages and the critic targets `A_t + V_t`.
pub fn compute_gae<S: Scalar>(rewards: &[S], values: &[S], bootstrap: S, gamma: S, lambda: S) -> (Vec<S>, Vec<S>) {
    assert_eq!(rewards.len(), values.len());
    let n = rewards.len();
    let mut adv = vec![S::zero(); n];
    let mut next_value = bootstrap;
    let mut running = S::zero();
    for t in (0..n).rev() {
        let delta = rewards[t] + gamma * next_value - values[t];
        running = delta + gamma * lambda * running;
        adv[t] = running;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(&a, &v)| a + v).collect();
    (adv, returns)
}

/// One stored decision, ready for an update.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<S> {
    pub obs: Vec<S>,
    pub critic_obs: Vec<S>,
    pub mask: Vec<bool>,
    pub action: usize,
    pub logp_old: S,
    pub advantage: S,
    pub target: S,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ActorStats<S> {
    pub loss: S,
    pub entropy: S,
    pub mean_ratio: S,
    pub clip_fraction: S,
}

/// Mean over the batch of `-min(r A, clip(r) A) - ent_coef * H`, with its
/// gradient accumulated into `grads` when given.
pub fn actor_loss<S: Scalar>(
    actor: &Mlp<S>,
    batch: &[&Sample<S>],
    clip_eps: S,
    ent_coef: S,
    mut grads: Option<&mut Mlp<S>>,
) -> ActorStats<S> {
    let inv_b = S::one() / S::from_count(batch.len());
    let mut stats = ActorStats::default();
    for s in batch {
        let tape = actor.forward_tape(&s.obs);
        let p = masked_softmax(tape.output(), &s.mask);
        let logp = p[s.action].ln();
        let h = entropy(&p);
        let ratio = (logp - s.logp_old).exp();
        let lo = S::one() - clip_eps;
        let hi = S::one() + clip_eps;
        let unclipped = ratio * s.advantage;
        let clipped = ratio.max(lo).min(hi) * s.advantage;
        let surrogate = unclipped.min(clipped);
        let active = unclipped <= clipped;
        stats.loss = stats.loss + (-surrogate - ent_coef * h) * inv_b;
        stats.entropy = stats.entropy + h * inv_b;
        stats.mean_ratio = stats.mean_ratio + ratio * inv_b;
        if !active {
            stats.clip_fraction = stats.clip_fraction + inv_b;
        }
        if let Some(g) = grads.as_deref_mut() {
            // dL/dlogp through the surrogate; zero on the clipped branch
            let dlogp = if active { -s.advantage * ratio } else { S::zero() };
            let dz: Vec<S> = p
                .iter()
                .enumerate()
                .map(|(j, &pj)| {
                    if !s.mask[j] {
                        return S::zero();
                    }
                    let onehot = if j == s.action { S::one() } else { S::zero() };
                    let dent = if pj > S::zero() { pj * (pj.ln() + h) } else { S::zero() };
                    (dlogp * (onehot - pj) + ent_coef * dent) * inv_b
                })
                .collect();
            actor.backward(&tape, &dz, g);
        }
    }
    stats
}

/// Mean squared error between the critic and its targets.
pub fn critic_loss<S: Scalar>(critic: &Mlp<S>, batch: &[&Sample<S>], mut grads: Option<&mut Mlp<S>>) -> S {
    let inv_b = S::one() / S::from_count(batch.len());
    let mut loss = S::zero();
    for s in batch {
        let tape = critic.forward_tape(&s.critic_obs);
        let err = tape.output()[0] - s.target;
        loss = loss + err * err * inv_b;
        if let Some(g) = grads.as_deref_mut() {
            critic.backward(&tape, &[S::lit(2.0) * err * inv_b], g);
        }
    }
    loss
}

#[derive(Debug, Error, PartialEq)]
pub enum PpoError {
    #[error("non-finite {what} (actor loss {actor_loss}, critic loss {critic_loss}, grad norms {actor_grad_norm} / {critic_grad_norm})")]
    NonFinite {
        what: &'static str,
        actor_loss: f64,
        critic_loss: f64,
        actor_grad_norm: f64,
        critic_grad_norm: f64,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub entropy: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
}

/// Adam states for both networks.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizers<S> {
    pub actor: Adam<S>,
    pub critic: Adam<S>,
}

impl<S: Scalar> Optimizers<S> {
    pub fn new(net: &ActorCritic<S>, actor_lr: f64, critic_lr: f64) -> Self {
        Optimizers {
            actor: Adam::new(actor_lr, net.actor.num_params()),
            critic: Adam::new(critic_lr, net.critic.num_params()),
        }
    }
}

fn clip_norm<S: Scalar>(g: &mut Mlp<S>, max_norm: f64) -> S {
    let norm = global_norm(&[&*g]);
    if max_norm > 0.0 && norm > S::lit(max_norm) {
        let scale = S::lit(max_norm) / norm;
        for p in g.params_mut() {
            *p = *p * scale;
        }
    }
    norm
}

/// One gradient step on both networks. Nothing is modified when a loss or
/// gradient is non-finite.
pub fn ppo_update<S: Scalar>(
    net: &mut ActorCritic<S>,
    opt: &mut Optimizers<S>,
    batch: &[&Sample<S>],
    clip_eps: f64,
    ent_coef: f64,
    max_grad_norm: f64,
) -> Result<UpdateStats, PpoError> {
    let mut ga = net.actor.zeros_like();
    let mut gc = net.critic.zeros_like();
    let a = actor_loss(&net.actor, batch, S::lit(clip_eps), S::lit(ent_coef), Some(&mut ga));
    let c = critic_loss(&net.critic, batch, Some(&mut gc));
    let na = clip_norm(&mut ga, max_grad_norm);
    let nc = clip_norm(&mut gc, max_grad_norm);
    let finite = [a.loss, c, na, nc].iter().all(|v| v.is_finite());
    if !finite {
        return Err(PpoError::NonFinite {
            what: if a.loss.is_finite() && c.is_finite() {
                "gradient"
            } else {
                "loss"
            },
            actor_loss: a.loss.as_f64(),
            critic_loss: c.as_f64(),
            actor_grad_norm: na.as_f64(),
            critic_grad_norm: nc.as_f64(),
        });
    }
    opt.actor.step(&mut net.actor, &ga);
    opt.critic.step(&mut net.critic, &gc);
    Ok(UpdateStats {
        actor_loss: a.loss.as_f64(),
        critic_loss: c.as_f64(),
        entropy: a.entropy.as_f64(),
        mean_ratio: a.mean_ratio.as_f64(),
        clip_fraction: a.clip_fraction.as_f64(),
    })
}

/// Standardizes advantages in place (zero mean, unit variance).
pub fn normalize_advantages<S: Scalar>(samples: &mut [Sample<S>]) {
    if samples.len() < 2 {
        return;
    }
    let n = S::from_count(samples.len());
    let mean = samples.iter().map(|s| s.advantage).sum::<S>() / n;
    let var = samples
        .iter()
        .map(|s| (s.advantage - mean) * (s.advantage - mean))
        .sum::<S>()
        / n;
    let sd = var.sqrt() + S::lit(1e-8);
    for s in samples {
        s.advantage = (s.advantage - mean) / sd;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::marl::ObsLayout;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn direct_gae(r: &[f64], v: &[f64], boot: f64, g: f64, l: f64) -> Vec<f64> {
        let n = r.len();
        let val = |t: usize| if t < n { v[t] } else { boot };
        (0..n)
            .map(|t| {
                (t..n)
                    .map(|k| {
                        let delta = r[k] + g * val(k + 1) - v[k];
                        (g * l).powi((k - t) as i32) * delta
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn gae_examples() {
        let (a, ret) = compute_gae(&[1.0, 2.0], &[0.0, 0.0], 0.0, 1.0, 1.0);
        assert_eq!(a, vec![3.0, 2.0]);
        assert_eq!(ret, vec![3.0, 2.0]);
        let r = [0.5_f64, -1.0, 2.0];
        let v = [0.1, 0.4, -0.3];
        let (a, _) = compute_gae(&r, &v, 0.7, 0.9, 0.0);
        let deltas = [0.5 + 0.9 * 0.4 - 0.1, -1.0 + 0.9 * -0.3 - 0.4, 2.0 + 0.9 * 0.7 + 0.3];
        for (x, d) in a.iter().zip(deltas) {
            assert!((x - d).abs() < 1e-15);
        }
    }

    #[test]
    fn gae_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let r: Vec<f64> = (0..50).map(|_| rng.random_range(-5.0..5.0)).collect();
            let v: Vec<f64> = (0..50).map(|_| rng.random_range(-5.0..5.0)).collect();
            let boot = rng.random_range(-1.0..1.0);
            let (g, l) = (rng.random_range(0.5..1.0), rng.random_range(0.0..1.0));
            let (a, ret) = compute_gae(&r, &v, boot, g, l);
            let d = direct_gae(&r, &v, boot, g, l);
            for t in 0..50 {
                assert!((a[t] - d[t]).abs() < 1e-10);
                assert!((ret[t] - a[t] - v[t]).abs() < 1e-12);
            }
        }
    }

    fn tiny_batch(net: &ActorCritic<f64>, rng: &mut ChaCha8Rng) -> Vec<Sample<f64>> {
        let layout = net.layout;
        (0..6)
            .map(|_| {
                let obs: Vec<f64> = (0..layout.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
                let mut mask: Vec<bool> = (0..=layout.num_classes).map(|_| rng.random_bool(0.6)).collect();
                mask[0] = true;
                let feasible: Vec<usize> = (0..mask.len()).filter(|&j| mask[j]).collect();
                let action = feasible[rng.random_range(0..feasible.len())];
                let p = net.policy(&obs, &mask);
                Sample {
                    critic_obs: layout.critic_view(&obs),
                    obs,
                    mask,
                    action,
                    // keep ratios inside the clip range so the loss is smooth
                    logp_old: p[action].ln() + rng.random_range(-0.05..0.05),
                    advantage: rng.random_range(-2.0..2.0),
                    target: rng.random_range(-2.0..2.0),
                }
            })
            .collect()
    }

    #[test]
    fn first_update_ratio_is_one() {
        let net = ActorCritic::<f64>::new(ObsLayout::new(2, 2), &[4, 4], 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut batch = tiny_batch(&net, &mut rng);
        for s in &mut batch {
            s.logp_old = net.policy(&s.obs, &s.mask)[s.action].ln();
        }
        let refs: Vec<&Sample<f64>> = batch.iter().collect();
        let stats = actor_loss(&net.actor, &refs, 0.2, 0.01, None);
        assert!((stats.mean_ratio - 1.0).abs() < 1e-12);
        assert_eq!(stats.clip_fraction, 0.0);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let net = ActorCritic::<f64>::new(ObsLayout::new(2, 2), &[4, 4], 7);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = tiny_batch(&net, &mut rng);
        let refs: Vec<&Sample<f64>> = batch.iter().collect();
        let mut ga = net.actor.zeros_like();
        actor_loss(&net.actor, &refs, 0.2, 0.05, Some(&mut ga));
        let mut gc = net.critic.zeros_like();
        critic_loss(&net.critic, &refs, Some(&mut gc));
        let h = 1e-6;
        let check = |analytic: &Mlp<f64>, base: &Mlp<f64>, f: &dyn Fn(&Mlp<f64>) -> f64| {
            for (i, &a) in analytic.params().enumerate() {
                let mut plus = base.clone();
                *plus.params_mut().nth(i).unwrap() += h;
                let mut minus = base.clone();
                *minus.params_mut().nth(i).unwrap() -= h;
                let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
                let scale = a.abs().max(numeric.abs());
                assert!(
                    scale < 1e-9 || (a - numeric).abs() / scale < 1e-4,
                    "param {i}: analytic {a} numeric {numeric}"
                );
            }
        };
        check(&ga, &net.actor, &|m| actor_loss(m, &refs, 0.2, 0.05, None).loss);
        check(&gc, &net.critic, &|m| critic_loss(m, &refs, None));
    }

    #[test]
    fn update_reduces_critic_error() {
        let mut net = ActorCritic::<f64>::new(ObsLayout::new(2, 2), &[8, 8], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let batch = tiny_batch(&net, &mut rng);
        let refs: Vec<&Sample<f64>> = batch.iter().collect();
        let mut opt = Optimizers::new(&net, 1e-3, 1e-2);
        let before = critic_loss(&net.critic, &refs, None);
        for _ in 0..200 {
            ppo_update(&mut net, &mut opt, &refs, 0.2, 0.0, 0.5).unwrap();
        }
        assert!(critic_loss(&net.critic, &refs, None) < 0.5 * before);
    }

    #[test]
    fn non_finite_batch_is_rejected() {
        let mut net = ActorCritic::<f64>::new(ObsLayout::new(2, 2), &[4], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut batch = tiny_batch(&net, &mut rng);
        batch[0].target = f64::NAN;
        let refs: Vec<&Sample<f64>> = batch.iter().collect();
        let mut opt = Optimizers::new(&net, 1e-3, 1e-3);
        let before = net.clone();
        assert!(ppo_update(&mut net, &mut opt, &refs, 0.2, 0.0, 0.5).is_err());
        assert_eq!(net, before);
    }
}
