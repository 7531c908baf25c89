//! Deterministic federated-learning simulator.
//!
//! The crate implements client-side local training with sharpness-aware
//! perturbation, client momentum and a Lorentz-model representation
//! regularizer, plus vanilla and norm-preserving (normalized) server
//! aggregation. Baselines (FedAvg, FedProx, FedCM, MoFedSAM) and the two
//! ablations of the full method are variants of the same state machine.
//!
//! Module map:
//!
//! - [`nn`]: dense ReLU network with exact reverse-mode gradients.
//! - [`hyperbolic`]: hyperboloid lift, Lorentzian scalar product and the
//!   exponential distance regularizer.
//! - [`fl`]: local training loop and server aggregation.
//! - [`data`]: synthetic blobs, IDX loading and non-IID partitioning.
//! - [`harness`]: seeded round loop and metrics.
//! - [`config`], [`report`]: JSON run configuration, CSV and SVG output.
//! - [`selftest`]: fast invariant batteries used by `fedsim selftest`.

pub mod config;
pub mod data;
mod error;
pub mod fl;
pub mod harness;
pub mod hyperbolic;
pub mod linalg;
pub mod nn;
pub mod report;
pub mod rng;
pub mod selftest;

pub use config::RunConfig;
pub use data::{Dataset, PartitionSpec, Shard};
pub use error::{Error, Result};
pub use fl::{AlgorithmKind, ClientUpdate, HyperParams, ServerState};
pub use harness::RoundMetrics;
pub use hyperbolic::LorentzPoint;
pub use linalg::Matrix;
pub use nn::{Batch, ForwardOutput, Gradient, MlpSpec, ParamVector};
