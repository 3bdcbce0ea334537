//! Value types, configuration schema and validation shared by every module.
//!
//! The configuration file is TOML. Two symbols carry aliases in the
//! literature this model comes from: `utility` is also written `p_k`, and
//! `delay_coeff` is also written `delta_k`.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A discrete time slot index (or a duration measured in slots).
pub type Slot = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DurationClass {
    Minor,
    Moderate,
    Long,
    Complex,
}

impl DurationClass {
    pub const ALL: [DurationClass; 4] = [
        DurationClass::Minor,
        DurationClass::Moderate,
        DurationClass::Long,
        DurationClass::Complex,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    Elective,
    Urgent,
    Emergency,
}

impl Category {
    pub fn is_elective(self) -> bool {
        self == Category::Elective
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Category::Elective => "elective",
            Category::Urgent => "urgent",
            Category::Emergency => "emergency",
        };
        f.write_str(s)
    }
}

/// Gamma duration law in slots, before rounding up.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaLaw {
    pub shape: f64,
    pub scale: f64,
}

impl GammaLaw {
    pub fn mean(&self) -> f64 {
        self.shape * self.scale
    }

    /// Analytic mean rounded up to whole slots.
    pub fn mean_slots(&self) -> Slot {
        self.mean().ceil().max(1.0) as Slot
    }
}

/// One surgery type `k`. Ids are 1-based; action `k` starts the head of
/// queue `k` and action 0 is idle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurgeryClass {
    pub id: usize,
    pub duration_class: DurationClass,
    pub category: Category,
    /// Throughput credit `u_k` (alias `p_k`).
    pub utility: f64,
    /// Quadratic waiting penalty weight `c_k` (alias `delta_k`).
    pub delay_coeff: f64,
    pub duration: GammaLaw,
}

/// Sequence-dependent changeover slots `sigma[prev][next]` (0-based class
/// indices) plus the row used for the first case of the day in a room.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetupMatrix {
    pub sigma: Vec<Vec<Slot>>,
    #[serde(default)]
    pub fresh: Vec<Slot>,
}

impl SetupMatrix {
    pub fn zeros(k: usize) -> Self {
        SetupMatrix {
            sigma: vec![vec![0; k]; k],
            fresh: vec![0; k],
        }
    }

    /// `same` slots between distinct classes of one duration class, `other`
    /// slots across duration classes, zero on the diagonal and from a fresh
    /// room.
    pub fn by_duration_class(classes: &[SurgeryClass], same: Slot, other: Slot) -> Self {
        let k = classes.len();
        let mut sigma = vec![vec![0; k]; k];
        for (a, ca) in classes.iter().enumerate() {
            for (b, cb) in classes.iter().enumerate() {
                if a != b {
                    sigma[a][b] = if ca.duration_class == cb.duration_class {
                        same
                    } else {
                        other
                    };
                }
            }
        }
        SetupMatrix {
            sigma,
            fresh: vec![0; k],
        }
    }

    /// Setup before a case of class `next` (1-based ids).
    #[inline]
    pub fn get(&self, prev: Option<usize>, next: usize) -> Slot {
        match prev {
            Some(p) => self.sigma[p - 1][next - 1],
            None => self.fresh[next - 1],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.sigma.iter().flatten().all(|&s| s == 0) && self.fresh.iter().all(|&s| s == 0)
    }
}

/// Occupied time of a room that starts a case: realized duration plus the
/// changeover from the previous class on that room.
#[inline]
pub fn effective_duration(xi: Slot, prev_class: Option<usize>, next_class: usize, setup: &SetupMatrix) -> Slot {
    xi + setup.get(prev_class, next_class)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    /// `C_o`, cost per overtime slot.
    pub overtime_cost: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoHyper {
    /// gamma. Finite horizon with a terminal penalty, so no discounting.
    pub discount: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub entropy_coeff: f64,
    /// Linearly anneal the entropy weight to zero over training.
    pub entropy_decay: bool,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Training iterations (MaxIters).
    pub epochs: usize,
    /// Day-episodes collected per iteration (M_traj).
    pub trajectories_per_epoch: usize,
    /// Minibatch gradient steps per iteration (M_upd).
    pub updates_per_epoch: usize,
    pub minibatch_size: usize,
    pub hidden: Vec<usize>,
    /// Global gradient-norm clip; 0 disables.
    pub max_grad_norm: f64,
    pub normalize_advantages: bool,
    /// Shuffle the within-epoch agent order instead of ascending room id.
    pub randomize_agent_order: bool,
    /// Multiplies rewards inside the learner only; reported rewards are
    /// never scaled.
    pub reward_scale: f64,
    /// Held-out days scored greedily to pick the best checkpoint.
    pub validation_days: usize,
    /// Iterations between validation passes; 0 disables validation.
    pub validation_every: usize,
    pub seed: u64,
}

impl Default for PpoHyper {
    fn default() -> Self {
        PpoHyper {
            discount: 1.0,
            gae_lambda: 0.95,
            clip_eps: 0.2,
            entropy_coeff: 0.03,
            entropy_decay: true,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            epochs: 1000,
            trajectories_per_epoch: 16,
            updates_per_epoch: 10,
            minibatch_size: 256,
            hidden: vec![128, 128],
            max_grad_norm: 0.5,
            normalize_advantages: true,
            randomize_agent_order: false,
            reward_scale: 0.01,
            validation_days: 32,
            validation_every: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// T, slots of regular hours.
    pub horizon: Slot,
    /// J, number of homogeneous rooms.
    pub num_ors: usize,
    pub classes: Vec<SurgeryClass>,
    pub setup: SetupMatrix,
    /// Elective volume per duration class, Minor..Complex.
    pub elective_counts: [usize; 4],
    /// lambda_u, Poisson urgent arrivals per slot.
    pub urgent_rate: f64,
    /// epsilon, probability that a day has an emergency event.
    pub emergency_day_prob: f64,
    pub emergency_batch_size: usize,
    pub reward: RewardWeights,
    #[serde(default)]
    pub ppo: PpoHyper,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig::default_day()
    }
}

impl SimConfig {
    /// The calibrated six-room, eight-type day.
    pub fn default_day() -> Self {
        use Category::*;
        use DurationClass::*;
        let laws = [(2.0, 2.0), (3.0, 3.0), (6.0, 4.0), (7.0, 5.0)];
        let utilities = [8.0, 12.0, 30.0, 50.0];
        let mut classes = Vec::with_capacity(8);
        let mut push = |dc: DurationClass, cat: Category, delay: f64| {
            let (shape, scale) = laws[dc.index()];
            classes.push(SurgeryClass {
                id: classes.len() + 1,
                duration_class: dc,
                category: cat,
                utility: utilities[dc.index()],
                delay_coeff: delay,
                duration: GammaLaw { shape, scale },
            });
        };
        for dc in DurationClass::ALL {
            push(dc, Elective, 0.002);
        }
        for dc in [Minor, Moderate, Long] {
            push(dc, Urgent, 0.004);
        }
        push(Complex, Emergency, 0.005);
        let setup = SetupMatrix::by_duration_class(&classes, 1, 2);
        SimConfig {
            horizon: 100,
            num_ors: 6,
            classes,
            setup,
            elective_counts: [28, 19, 5, 3],
            urgent_rate: 0.08,
            emergency_day_prob: 0.40,
            emergency_batch_size: 5,
            reward: RewardWeights { overtime_cost: 0.005 },
            ppo: PpoHyper::default(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Class by 1-based id.
    #[inline]
    pub fn class(&self, id: usize) -> &SurgeryClass {
        &self.classes[id - 1]
    }

    pub fn classes_in(&self, category: Category) -> impl Iterator<Item = &SurgeryClass> {
        self.classes.iter().filter(move |c| c.category == category)
    }

    /// The elective class carrying each duration class, if any.
    pub fn elective_class_for(&self, dc: DurationClass) -> Option<&SurgeryClass> {
        self.classes
            .iter()
            .find(|c| c.category == Category::Elective && c.duration_class == dc)
    }

    pub fn total_electives(&self) -> usize {
        self.elective_counts.iter().sum()
    }

    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let raw: SimConfig = toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))?;
        validate_config(raw)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ConfigError> {
        std::fs::write(path, self.to_toml_string())?;
        Ok(())
    }

    /// Hex digest of the canonical serialization, used to tie checkpoints
    /// and run manifests to the config that produced them.
    pub fn hash_hex(&self) -> String {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(self.to_toml_string().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config io error: {0}")]
    Io(#[from] std::io::Error),
}

fn invalid(path: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        path: path.into(),
        message: message.into(),
    }
}

/// Checks every invariant of the schema, filling the fresh-room setup row
/// with zeros when it is absent. Idempotent.
// negated comparisons also reject NaN
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn validate_config(mut cfg: SimConfig) -> Result<SimConfig, ConfigError> {
    if cfg.horizon < 1 {
        return Err(invalid("horizon", "horizon ≥ 1"));
    }
    if cfg.num_ors < 1 {
        return Err(invalid("num_ors", "num_ors ≥ 1"));
    }
    let k = cfg.classes.len();
    if k < 1 {
        return Err(invalid("classes", "at least one surgery class (K ≥ 1)"));
    }
    for (i, c) in cfg.classes.iter().enumerate() {
        let path = format!("classes[{i}]");
        if c.id != i + 1 {
            return Err(invalid(format!("{path}.id"), "class ids must be 1..K in order"));
        }
        if !(c.utility > 0.0) || !c.utility.is_finite() {
            return Err(invalid(format!("{path}.utility"), "utility must be > 0"));
        }
        if !(c.delay_coeff >= 0.0) || !c.delay_coeff.is_finite() {
            return Err(invalid(format!("{path}.delay_coeff"), "delay_coeff must be ≥ 0"));
        }
        if !(c.duration.shape > 0.0 && c.duration.scale > 0.0) {
            return Err(invalid(format!("{path}.duration"), "gamma shape and scale must be > 0"));
        }
    }

    if cfg.setup.sigma.len() != k || cfg.setup.sigma.iter().any(|row| row.len() != k) {
        return Err(invalid("setup.sigma", format!("setup matrix must be {k}×{k}")));
    }
    if cfg.setup.fresh.is_empty() {
        cfg.setup.fresh = vec![0; k];
    }
    if cfg.setup.fresh.len() != k {
        return Err(invalid("setup.fresh", format!("fresh-room row must have {k} entries")));
    }
    for (a, row) in cfg.setup.sigma.iter().enumerate() {
        if row[a] != 0 {
            return Err(invalid(format!("setup.sigma[{a}][{a}]"), "setup diagonal must be zero"));
        }
        if let Some(b) = row.iter().position(|&s| s > cfg.horizon) {
            return Err(invalid(
                format!("setup.sigma[{a}][{b}]"),
                "setup entries must be ≤ horizon",
            ));
        }
    }
    if cfg.setup.fresh.iter().any(|&s| s > cfg.horizon) {
        return Err(invalid("setup.fresh", "setup entries must be ≤ horizon"));
    }

    if !(0.0..=1.0).contains(&cfg.emergency_day_prob) {
        return Err(invalid("emergency_day_prob", "emergency_day_prob must lie in [0, 1]"));
    }
    if !(cfg.urgent_rate >= 0.0) || !cfg.urgent_rate.is_finite() {
        return Err(invalid("urgent_rate", "urgent_rate must be ≥ 0"));
    }
    if !(cfg.reward.overtime_cost >= 0.0) || !cfg.reward.overtime_cost.is_finite() {
        return Err(invalid("reward.overtime_cost", "overtime_cost must be ≥ 0"));
    }
    for dc in DurationClass::ALL {
        if cfg.elective_counts[dc.index()] > 0 && cfg.elective_class_for(dc).is_none() {
            return Err(invalid(
                format!("elective_counts[{}]", dc.index()),
                format!("electives requested for {dc:?} but no elective class has that duration class"),
            ));
        }
    }
    if cfg.urgent_rate > 0.0 && cfg.classes_in(Category::Urgent).next().is_none() {
        return Err(invalid("urgent_rate", "urgent arrivals need at least one urgent class"));
    }
    if cfg.emergency_day_prob > 0.0
        && cfg.emergency_batch_size > 0
        && cfg.classes_in(Category::Emergency).next().is_none()
    {
        return Err(invalid(
            "emergency_day_prob",
            "emergency events need an emergency class",
        ));
    }
    validate_ppo(&cfg.ppo)?;
    Ok(cfg)
}

#[allow(clippy::neg_cmp_op_on_partial_ord)]
fn validate_ppo(p: &PpoHyper) -> Result<(), ConfigError> {
    let unit = |v: f64| (0.0..=1.0).contains(&v);
    if !unit(p.discount) {
        return Err(invalid("ppo.discount", "discount must lie in [0, 1]"));
    }
    if !unit(p.gae_lambda) {
        return Err(invalid("ppo.gae_lambda", "gae_lambda must lie in [0, 1]"));
    }
    if !(p.clip_eps > 0.0) {
        return Err(invalid("ppo.clip_eps", "clip_eps must be > 0"));
    }
    if !(p.entropy_coeff >= 0.0) {
        return Err(invalid("ppo.entropy_coeff", "entropy_coeff must be ≥ 0"));
    }
    if !(p.actor_lr > 0.0) || !(p.critic_lr > 0.0) {
        return Err(invalid("ppo.actor_lr", "learning rates must be > 0"));
    }
    if p.trajectories_per_epoch == 0 || p.updates_per_epoch == 0 || p.minibatch_size == 0 {
        return Err(invalid(
            "ppo.minibatch_size",
            "trajectories, updates and minibatch size must be ≥ 1",
        ));
    }
    if p.hidden.is_empty() || p.hidden.contains(&0) {
        return Err(invalid("ppo.hidden", "hidden widths must be non-empty and ≥ 1"));
    }
    if !(p.reward_scale > 0.0) || !p.reward_scale.is_finite() {
        return Err(invalid("ppo.reward_scale", "reward_scale must be finite and > 0"));
    }
    if !(p.max_grad_norm >= 0.0) {
        return Err(invalid("ppo.max_grad_norm", "max_grad_norm must be ≥ 0"));
    }
    Ok(())
}

/// One surgical case. Electives have `arrival == 0` and a reference slot
/// from the pre-day plan; non-electives have no reference.
#[derive(Clone, Debug, PartialEq)]
pub struct Patient {
    pub id: usize,
    pub class_id: usize,
    pub arrival: Slot,
    pub reference: Option<Slot>,
    /// Realized duration `xi`, already rounded up to whole slots.
    pub duration: Slot,
    /// The continuous draw before rounding (calibration only).
    pub raw_duration: f64,
    pub planned_or: Option<usize>,
}

impl Patient {
    pub fn is_elective(&self) -> bool {
        self.reference.is_some()
    }
}
