//! Time integrators for the (projected) gradient flow `Ẇ = −∇ℓ(W)`.
//!
//! Each low-rank integrator is written once in a layered form that advances
//! several factored layers in lockstep against a [`LayeredOracle`]; the
//! single-layer functions ([`psi_step`], [`abc_psi_step`], …) wrap it with a
//! [`GradientOracle`]. All sub-flows use explicit Euler, repeated
//! [`StepConfig::substeps`] times.

mod oracle;
mod steps;
pub mod study;

use std::fmt;
use std::str::FromStr;

use crate::error::{DlrtError, Result};
use crate::lowrank::TruncationPolicy;

pub use oracle::{GradientOracle, LayeredOracle, LossOracle, QuadraticLoss, SingleLayer};
pub use steps::{
    abc_psi_layers, abc_psi_step, abc_psi_step_traced, bc_psi_layers, bc_psi_step,
    bc_psi_step_traced, bug_fixed_layers, bug_fixed_step, euler_full_step, lowrank_layers,
    psi_layers, psi_step, psi_step_traced, s_step_loss_delta_psi, AbcTrace, BcPsiTrace, PsiTrace,
};

/// Integrator choice for a training run or study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Integrator {
    /// Dense weights, plain explicit Euler (SGD).
    Full,
    /// Projector-splitting: K-step, S-step backwards in time, L-step.
    Psi,
    /// PSI with the S-step replaced by the projection `U₁ᵀU₀S₀`.
    BcPsi,
    /// Fixed-rank basis-update & Galerkin.
    Bug,
    /// Augmented backward-corrected PSI with rank truncation.
    AbcPsi,
}

impl Integrator {
    pub const ALL: [Integrator; 5] = [
        Integrator::Full,
        Integrator::Psi,
        Integrator::BcPsi,
        Integrator::Bug,
        Integrator::AbcPsi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Integrator::Full => "full",
            Integrator::Psi => "psi",
            Integrator::BcPsi => "bc-psi",
            Integrator::Bug => "bug",
            Integrator::AbcPsi => "abc-psi",
        }
    }

    pub fn is_rank_adaptive(self) -> bool {
        self == Integrator::AbcPsi
    }
}

impl fmt::Display for Integrator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Integrator {
    type Err = DlrtError;

    fn from_str(s: &str) -> Result<Self> {
        Integrator::ALL
            .into_iter()
            .find(|i| i.name() == s)
            .ok_or_else(|| DlrtError::InvalidArgument(format!("unknown integrator {s:?}")))
    }
}

/// Per-step settings shared by all integrators.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepConfig {
    /// Learning rate, i.e. the time step.
    pub h: f64,
    /// Explicit-Euler steps per K-, S- and L-substep.
    pub substeps: usize,
    /// Used by the augmented integrator only.
    pub policy: TruncationPolicy,
}

impl StepConfig {
    pub fn new(h: f64, policy: TruncationPolicy) -> Self {
        Self {
            h,
            substeps: 1,
            policy,
        }
    }

    pub fn with_substeps(mut self, substeps: usize) -> Self {
        self.substeps = substeps;
        self
    }

    pub fn with_h(mut self, h: f64) -> Self {
        self.h = h;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(DlrtError::InvalidArgument(format!(
                "step size h = {} must be > 0",
                self.h
            )));
        }
        if self.substeps == 0 {
            return Err(DlrtError::InvalidArgument("substeps must be ≥ 1".into()));
        }
        self.policy.validate()
    }
}

/// Learning-rate schedule indexed by the 1-based iteration count.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LearningRate {
    Constant(f64),
    /// `h_t = h₀ / t`, satisfying `Σh_t = ∞`, `Σh_t² < ∞`.
    InverseTime(f64),
}

impl LearningRate {
    pub fn at(&self, t: usize) -> f64 {
        match *self {
            LearningRate::Constant(h) => h,
            LearningRate::InverseTime(h0) => h0 / t.max(1) as f64,
        }
    }
}
