//! Dynamical low-rank training (DLRT) of feed-forward networks.
//!
//! Weight matrices are kept in factored form `Y = U S Vᵀ` and advanced by
//! projector-splitting integrators of the projected gradient flow. The
//! augmented backward-corrected integrator ([`integrators::abc_psi_step`])
//! adapts the rank each step and is the default for training; the classical
//! splitting ([`integrators::psi_step`]), its backward-corrected variant and
//! the fixed-rank basis-update & Galerkin step are available for comparison.
//!
//! Modules:
//! - [`linalg`]: dense `f64` matrices, Householder QR, thin SVD.
//! - [`lowrank`]: factored state, tangent projection, truncation, accounting.
//! - [`integrators`]: one step of each integrator plus verification harnesses.
//! - [`nn`]: small MLP with factored layers, manual backprop, training loop.
//! - [`data`]: IDX (MNIST) ingestion and seeded batching.

pub mod data;
pub mod error;
pub mod integrators;
pub mod linalg;
pub mod lowrank;
pub mod nn;

pub use error::{DlrtError, Result};
pub use integrators::{GradientOracle, Integrator, LossOracle, QuadraticLoss, StepConfig};
pub use linalg::Matrix;
pub use lowrank::{LowRankState, TruncationCriterion, TruncationPolicy};
