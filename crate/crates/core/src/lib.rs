//! Federated DP-SGD for frame-level senone classification.
//!
//! Workers train a shared LSTM frame classifier by exchanging only
//! differentially private gradient releases through a coordinator. Each
//! worker clips per-utterance gradients, adds Gaussian noise to the clipped
//! mean and charges the step to its own privacy ledger. The evaluation
//! module measures how much more accurate a model is on an outlier
//! contributor than a baseline, which is the membership signal DP training
//! is meant to suppress.

pub mod config;
pub mod data;
pub mod dp;
pub mod dpsgd;
pub mod error;
pub mod eval;
pub mod federation;
pub mod nn;
pub mod rng;

pub use data::{synth_generate, Dataset, FeatureSequence, SynthSpec};
pub use dp::{AccountLedger, Adjacency, ClampBounds, PrivacyParams, Sensitivity};
pub use dpsgd::{DpSgdConfig, GradientRelease};
pub use error::{Error, Result};
pub use eval::{accuracy, membership_gap, EvalReport, GapProbe};
pub use nn::{FlatGradient, Network, NetworkDims};
pub use rng::RandomSource;
