//! Training loop: collect, estimate advantages, update, clear.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::ppo::{compute_gae, normalize_advantages, ppo_update, Optimizers, PpoError, Sample};
use super::rollout::{collect_trajectory, ActionMode, Trajectory};
use super::{ActorCritic, ObsLayout};
use crate::domain::PpoHyper;
use crate::scalar::Scalar;
use crate::seeding::{derive_seed, stream};
use crate::simenv::{ProtocolError, Simulator};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iter: usize,
    /// Mean day reward of the iteration's sampled trajectories.
    pub mean_cr: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub entropy: f64,
    /// Mean importance ratio of the first minibatch after collection; 1 up
    /// to rounding since the policy has not moved yet.
    pub first_ratio: f64,
    /// Greedy mean day reward on the validation days, when scored.
    pub validation_cr: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainReport<S> {
    /// Parameters with the best validation score (the last ones when
    /// validation is disabled).
    pub best: ActorCritic<S>,
    pub best_iter: usize,
    pub best_validation_cr: Option<f64>,
    pub last: ActorCritic<S>,
    pub curve: Vec<CurvePoint>,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("iteration {iter}: {source}")]
    Diverged { iter: usize, source: PpoError },
}

/// Training-day seed for episode `i` of iteration `iter`.
pub fn training_seed(hyper: &PpoHyper, iter: usize, i: usize) -> u64 {
    derive_seed(
        hyper.seed ^ stream::TRAIN,
        (iter * hyper.trajectories_per_epoch + i) as u64,
    )
}

pub fn validation_seeds(hyper: &PpoHyper) -> Vec<u64> {
    (0..hyper.validation_days)
        .map(|i| derive_seed(hyper.seed ^ stream::VALIDATE, i as u64))
        .collect()
}

fn to_samples<S: Scalar>(traj: &Trajectory<S>, hyper: &PpoHyper, layout: &ObsLayout) -> Vec<Sample<S>> {
    let scale = S::lit(hyper.reward_scale);
    let mut rewards: Vec<S> = traj.transitions.iter().map(|t| t.reward * scale).collect();
    if let Some(last) = rewards.last_mut() {
        *last = *last + traj.terminal_reward * scale;
    }
    let values: Vec<S> = traj.transitions.iter().map(|t| t.value).collect();
    let (adv, targets) = compute_gae(
        &rewards,
        &values,
        S::zero(),
        S::lit(hyper.discount),
        S::lit(hyper.gae_lambda),
    );
    traj.transitions
        .iter()
        .zip(adv.into_iter().zip(targets))
        .map(|(t, (advantage, target))| Sample {
            critic_obs: layout.critic_view(&t.obs),
            obs: t.obs.clone(),
            mask: t.mask.clone(),
            action: t.action,
            logp_old: t.logp,
            advantage,
            target,
        })
        .collect()
}

/// Greedy mean day reward over `seeds`.
pub fn evaluate_greedy<S: Scalar>(sim: &Simulator, net: &ActorCritic<S>, seeds: &[u64]) -> Result<f64, ProtocolError> {
    let total: Result<Vec<f64>, ProtocolError> = seeds
        .par_iter()
        .map(|&s| collect_trajectory(sim, s, net, ActionMode::Greedy, false).map(|t| t.day_reward()))
        .collect();
    let v = total?;
    Ok(v.iter().sum::<f64>() / v.len().max(1) as f64)
}

/// Runs `hyper.epochs` iterations. `on_iter` sees every curve point as it
/// is produced.
pub fn train<S: Scalar>(
    sim: &Simulator,
    hyper: &PpoHyper,
    mut on_iter: impl FnMut(&CurvePoint),
) -> Result<TrainReport<S>, TrainError> {
    let layout = ObsLayout::new(sim.config.num_classes(), sim.config.num_ors);
    let mut net = ActorCritic::<S>::new(layout, &hyper.hidden, hyper.seed);
    let mut opt = Optimizers::new(&net, hyper.actor_lr, hyper.critic_lr);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(hyper.seed ^ stream::SAMPLING, u64::MAX));
    let val_seeds = validation_seeds(hyper);
    let validate = hyper.validation_every > 0 && !val_seeds.is_empty();
    let mut best = (net.clone(), 0usize, None::<f64>);
    let mut curve = Vec::with_capacity(hyper.epochs);

    for iter in 0..hyper.epochs {
        let trajectories: Result<Vec<Trajectory<S>>, ProtocolError> = (0..hyper.trajectories_per_epoch)
            .into_par_iter()
            .map(|i| {
                let seed = training_seed(hyper, iter, i);
                let stream_seed = derive_seed(
                    hyper.seed ^ stream::SAMPLING,
                    (iter * hyper.trajectories_per_epoch + i) as u64,
                );
                collect_trajectory(
                    sim,
                    seed,
                    &net,
                    ActionMode::Sample(stream_seed),
                    hyper.randomize_agent_order,
                )
            })
            .collect();
        let trajectories = trajectories?;
        let mean_cr = trajectories.iter().map(|t| t.day_reward()).sum::<f64>() / trajectories.len() as f64;
        let mut samples: Vec<Sample<S>> = trajectories
            .iter()
            .flat_map(|t| to_samples(t, hyper, &layout))
            .collect();
        drop(trajectories);
        if hyper.normalize_advantages {
            normalize_advantages(&mut samples);
        }
        let ent_coef = if hyper.entropy_decay {
            hyper.entropy_coeff * (1.0 - iter as f64 / hyper.epochs as f64)
        } else {
            hyper.entropy_coeff
        };

        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut cursor = order.len();
        let (mut al, mut cl, mut ent) = (0.0, 0.0, 0.0);
        let mut steps = 0;
        let mut first_ratio = 1.0;
        if !samples.is_empty() {
            for _ in 0..hyper.updates_per_epoch {
                let mb = hyper.minibatch_size.min(samples.len());
                if cursor + mb > order.len() {
                    order.shuffle(&mut shuffle_rng);
                    cursor = 0;
                }
                let batch: Vec<&Sample<S>> = order[cursor..cursor + mb].iter().map(|&i| &samples[i]).collect();
                cursor += mb;
                let stats = ppo_update(
                    &mut net,
                    &mut opt,
                    &batch,
                    hyper.clip_eps,
                    ent_coef,
                    hyper.max_grad_norm,
                )
                .map_err(|source| TrainError::Diverged { iter, source })?;
                if steps == 0 {
                    first_ratio = stats.mean_ratio;
                }
                al += stats.actor_loss;
                cl += stats.critic_loss;
                ent += stats.entropy;
                steps += 1;
            }
        }
        let denom = steps.max(1) as f64;
        let last_iter = iter + 1 == hyper.epochs;
        let validation_cr = if validate && ((iter + 1) % hyper.validation_every == 0 || last_iter) {
            let v = evaluate_greedy(sim, &net, &val_seeds)?;
            if best.2.is_none_or(|b| v > b) {
                best = (net.clone(), iter, Some(v));
            }
            Some(v)
        } else {
            None
        };
        let point = CurvePoint {
            iter,
            mean_cr,
            actor_loss: al / denom,
            critic_loss: cl / denom,
            entropy: ent / denom,
            first_ratio,
            validation_cr,
        };
        on_iter(&point);
        curve.push(point);
    }
    if !validate {
        best = (net.clone(), hyper.epochs.saturating_sub(1), None);
    }
    Ok(TrainReport {
        best: best.0,
        best_iter: best.1,
        best_validation_cr: best.2,
        last: net,
        curve,
    })
}

pub fn write_curve_csv<W: Write>(out: W, curve: &[CurvePoint]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "iter",
        "mean_cr",
        "actor_loss",
        "critic_loss",
        "entropy",
        "first_ratio",
        "validation_cr",
    ])?;
    for p in curve {
        w.write_record([
            p.iter.to_string(),
            format!("{:.6}", p.mean_cr),
            format!("{:.6}", p.actor_loss),
            format!("{:.6}", p.critic_loss),
            format!("{:.6}", p.entropy),
            format!("{:.9}", p.first_ratio),
            p.validation_cr.map_or(String::new(), |v| format!("{v:.6}")),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub const CHECKPOINT_FORMAT: &str = "orsched-checkpoint-v1";

/// Weights plus the provenance needed to reuse them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<S> {
    pub format: String,
    pub config_hash: String,
    pub scalar: String,
    pub iteration: usize,
    pub validation_cr: Option<f64>,
    pub hyper: PpoHyper,
    pub net: ActorCritic<S>,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported checkpoint format `{0}`")]
    Format(String),
    #[error("checkpoint was trained on config {found}, current config is {expected}")]
    ConfigMismatch { expected: String, found: String },
    #[error("checkpoint holds non-finite weights")]
    NonFinite,
}

pub fn save_checkpoint<S: Scalar + Serialize>(
    path: impl AsRef<Path>,
    ckpt: &Checkpoint<S>,
) -> Result<(), CheckpointError> {
    let text = serde_json::to_string(ckpt)?;
    crate::analytics::write_file(path, text.as_bytes())?;
    Ok(())
}

/// Loads a checkpoint; with `expected_hash` the config hash must match.
pub fn load_checkpoint<S: Scalar + DeserializeOwned>(
    path: impl AsRef<Path>,
    expected_hash: Option<&str>,
) -> Result<Checkpoint<S>, CheckpointError> {
    let text = std::fs::read_to_string(path)?;
    let ckpt: Checkpoint<S> = serde_json::from_str(&text)?;
    if ckpt.format != CHECKPOINT_FORMAT {
        return Err(CheckpointError::Format(ckpt.format));
    }
    if let Some(h) = expected_hash {
        if h != ckpt.config_hash {
            return Err(CheckpointError::ConfigMismatch {
                expected: h.to_string(),
                found: ckpt.config_hash,
            });
        }
    }
    if !ckpt.net.is_finite() {
        return Err(CheckpointError::NonFinite);
    }
    Ok(ckpt)
}
