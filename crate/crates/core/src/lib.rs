//! Active anomaly detection with a transferable query meta-policy.
//!
//! A small actor-critic network is trained with PPO on labeled datasets,
//! seeing one instance at a time through six dataset-independent
//! meta-features. The trained policy is then applied unchanged to new
//! datasets, where it ranks every unqueried instance by its query
//! probability and asks an analyst about the top one, round after round.

pub mod bench;
pub mod data;
pub mod detector;
pub mod engine;
pub mod error;
pub mod features;
pub mod policy;
pub mod rng;
pub mod strategy;
pub mod synth;
pub mod trainer;

pub use data::{Label, Matrix, RawDataset};
pub use engine::{QuerySession, SessionConfig};
pub use error::{Error, Result};
pub use features::{FeatureMask, MetaFeatures, QueryState};
pub use policy::{PolicyModel, PpoHyper};
pub use strategy::{QueryStrategy, StrategyRegistry};
