//! Sequence models over a float-64 autodiff tape, with the data pipeline and
//! sweep harness used to predict heart-failure death counts from clinical
//! features.
//!
//! The crate is organized around six pieces:
//!
//! - [`tensor`] / [`tape`]: dense f64 tensors and reverse-mode differentiation
//! - [`gradcheck`] / [`verify`]: finite-difference verification of gradients
//! - [`attention`]: encoder/decoder attention model for sequence regression
//! - [`lstm`]: the single-layer LSTM baseline
//! - [`optim`]: SGD, RMSProp, Adam, and Adadelta update rules
//! - [`data`] / [`harness`]: clinical CSV ingestion, death-count aggregation,
//!   and the optimizer x learning-rate sweep front end used by the CLI

pub mod attention;
pub mod data;
pub mod gradcheck;
pub mod harness;
pub mod lstm;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod verify;

pub use attention::{AttentionModel, ModelConfig, ModelError, ModelMode};
pub use data::{DataError, Feature, FeatureSeries, PatientRecord, SupervisedWindows};
pub use gradcheck::grad_check;
pub use harness::{HarnessError, Model, ModelKind, RunReport, SweepConfig};
pub use lstm::LstmModel;
pub use optim::{OptimKind, Optimizer, OptimizerSpec, OptimizerState};
pub use params::Parameters;
pub use tape::{Activation, GradientMap, LossKind, NodeId, Tape};
pub use tensor::{Mask, Tensor, TensorError};
pub use verify::VerificationReport;
