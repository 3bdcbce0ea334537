//! Intraday operating-room scheduling laboratory.

pub mod analytics;
pub mod domain;
pub mod heuristics;
pub mod marl;
pub mod oracle;
pub mod preschedule;
pub mod reward;
pub mod scalar;
pub mod seeding;
pub mod simenv;
pub mod theorycheck;

pub use domain::{Category, DurationClass, PpoHyper, SimConfig, Slot};
pub use scalar::Scalar;
pub use simenv::{Episode, EpisodeRecord, JointAction, Simulator};

pub type ActorCritic32 = marl::ActorCritic<f32>;
pub type ActorCritic64 = marl::ActorCritic<f64>;
