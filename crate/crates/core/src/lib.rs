//! Simulation and analysis of FedAvg and FedProx on kernel regression.
//!
//! The crate is organised bottom-up:
//!
//! * [`kernel`]: kernels, feature maps and normalized Gram matrices.
//! * [`dataset`]: per-client data with sizes, weights and true local models.
//! * [`engine`]: the literal per-client simulation (primal), the closed-form
//!   prediction recursion (dual) and a compiled affine form of a round.
//! * [`spectral`]: stability constants, eigen-structure of `K_x P`, error
//!   bounds, early stopping, the limiting model and federation-gain predictors.
//! * [`datagen`]: seeded synthetic scenarios.
//! * [`metrics`]: measured errors, gradient norms, Monte-Carlo MSE and
//!   empirical federation gain.
//! * [`harness`]: experiment registry, configuration, CSV output and plots.

pub mod datagen;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod harness;
pub mod kernel;
pub mod linalg;
pub mod metrics;
pub mod spectral;

pub use dataset::{ClientData, FederatedDataset};
pub use engine::{Algorithm, AlgorithmConfig, ModelState, RoundTrace};
pub use error::{Error, Result};
pub use kernel::{GramMatrix, KernelSpec};
