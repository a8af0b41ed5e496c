//! Persona-aware dialogue strategy planning: user simulators, a trainable
//! strategy planner, REINFORCE over simulator populations, and evaluation.
//!
//! The numeric code is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix it to `f64`.

pub mod agent;
pub mod archive;
pub mod catalog;
pub mod dialogue;
pub mod eval;
pub mod gateway;
pub mod live;
pub mod planner;
pub mod reward;
pub mod scalar;
pub mod simulator;
pub mod synthetic;
pub mod tom;
pub mod trainer;
mod util;

pub use scalar::Scalar;
pub use util::derive_seed;

pub type Policy = planner::PolicyParameters<f64>;
pub type Features = planner::FeatureVector<f64>;
pub type Episode = trainer::EpisodeRecord<f64>;
pub type EpisodeRollout = trainer::Rollout<f64>;
pub type SftSample = planner::sft::SftExample<f64>;
pub type TrainOutcome = trainer::TrainReport<f64>;
