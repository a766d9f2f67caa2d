//! Deterministic federated transfer-learning simulator.
//!
//! The crate runs federated pretraining over non-iid clients with FedAvg,
//! FedGTST (guide-norm exchange plus Jacobian-norm alignment) and a
//! FedIIR-style gradient-alignment baseline, finetunes the pretrained model on
//! a shifted target domain, and checks the round-wise, telescoped and
//! learning-rate-optimized loss bounds numerically against recorded traces.

// `!(x >= y)` is used on purpose so that NaN fails every range check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod domains;
pub mod error;
pub mod federation;
pub mod linalg;
pub mod models;
pub mod seed;
pub mod statistics;
pub mod transfer;

pub use domains::{Dataset, PartitionPlan, ShiftSpec};
pub use error::{Error, Result};
pub use models::{ModelKind, ModelSpec, WeightVector};
