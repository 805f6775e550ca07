//! Tree-structured preference data construction and preference-loss kernels.
//!
//! The data side builds one preference tree per instruction by letting an
//! actor model act, executing its code, critiquing incorrect actions and
//! expanding them for up to five turns ([`engine`], [`sampling`]). Trees are
//! turned into SFT and preference-pair records ([`pairs`]) after screening
//! against evaluation sets ([`decontam`]).
//!
//! The numeric side ([`loss`], [`rerank`]) is generic over the float type; the
//! aliases below fix it to `f64` or `f32`.

pub mod answer;
pub mod client;
pub mod corpus;
pub mod decontam;
pub mod engine;
pub mod loss;
pub mod pairs;
pub mod rerank;
pub mod rng;
pub mod sampling;
pub mod sandbox;
pub mod scalar;
pub mod template;
pub mod testkit;
pub mod tree;

pub use scalar::Scalar;
pub use tree::{ActionNode, ActionPair, Instruction, PreferenceTree, Task};

pub type RewardParams64 = loss::RewardParams<f64>;
pub type RewardParams32 = loss::RewardParams<f32>;
pub type PrefExample64 = loss::PrefExample<f64>;
pub type PrefExample32 = loss::PrefExample<f32>;
pub type TrainConfig64 = loss::TrainConfig<f64>;
pub type TrainConfig32 = loss::TrainConfig<f32>;
pub type RewardTrace64 = loss::RewardTrace<f64>;
pub type RewardTrace32 = loss::RewardTrace<f32>;
pub type LogRatio64 = loss::PolicyPairLogRatio<f64>;
pub type LogRatio32 = loss::PolicyPairLogRatio<f32>;
