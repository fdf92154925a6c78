use crate::error::{dim_err, DlrtError, Result};
use crate::linalg::{householder_qr, svd_thin, Matrix};

/// How the discarded singular-value tail is compared against the tolerance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TruncationCriterion {
    /// Keep the smallest `r` with `‖σ_{r+1..}‖₂ ≤ τ · ‖σ‖₂`.
    #[default]
    NormRatio,
    /// Keep the smallest `r` with `Σ_{i>r} σᵢ² < τ · ‖σ‖₂` (un-normalized
    /// squared tail against a relative threshold).
    SquaredTail,
}

/// Rank selection after augmentation: tolerance plus hard rank bounds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruncationPolicy {
    pub tau: f64,
    pub r_min: usize,
    pub r_max: usize,
    pub criterion: TruncationCriterion,
}

impl TruncationPolicy {
    pub fn new(tau: f64, r_min: usize, r_max: usize) -> Result<Self> {
        let p = Self {
            tau,
            r_min,
            r_max,
            criterion: TruncationCriterion::NormRatio,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_criterion(mut self, criterion: TruncationCriterion) -> Self {
        self.criterion = criterion;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(DlrtError::InvalidArgument(format!(
                "tau = {} must be finite and ≥ 0",
                self.tau
            )));
        }
        if self.r_min < 1 || self.r_min > self.r_max {
            return Err(DlrtError::InvalidRank(format!(
                "need 1 ≤ r_min ≤ r_max, got r_min={} r_max={}",
                self.r_min, self.r_max
            )));
        }
        Ok(())
    }

    /// Clamps the bounds to what an `m x n` layer can hold.
    pub fn for_layer(&self, m: usize, n: usize) -> Self {
        let cap = m.min(n);
        let r_max = self.r_max.min(cap).max(1);
        Self {
            r_min: self.r_min.min(r_max),
            r_max,
            ..*self
        }
    }
}

/// Rank retained after truncating `sigma` (descending, non-negative): the
/// smallest `r` meeting the policy criterion, clamped to
/// `[r_min, min(r_max, len)]`.
pub fn truncation_rank(sigma: &[f64], policy: &TruncationPolicy) -> Result<usize> {
    if sigma.is_empty() {
        return Err(DlrtError::InvalidArgument(
            "truncation_rank: empty sigma".into(),
        ));
    }
    if sigma.iter().any(|s| s.is_nan() || *s < 0.0) || sigma.windows(2).any(|w| w[1] > w[0]) {
        return Err(DlrtError::InvalidArgument(
            "truncation_rank: sigma must be non-negative and descending".into(),
        ));
    }
    let q = sigma.len();
    // tail_sq[r] = Σ_{i ≥ r} σᵢ², accumulated from the small end.
    let mut tail_sq = vec![0.0; q + 1];
    for i in (0..q).rev() {
        tail_sq[i] = tail_sq[i + 1] + sigma[i] * sigma[i];
    }
    let total = tail_sq[0].sqrt();
    let keeps = |r: usize| match policy.criterion {
        TruncationCriterion::NormRatio => tail_sq[r].sqrt() <= policy.tau * total,
        TruncationCriterion::SquaredTail => tail_sq[r] < policy.tau * total,
    };
    let r = (0..=q).find(|&r| keeps(r)).unwrap_or(q);
    let hi = policy.r_max.min(q);
    Ok(r.max(policy.r_min).min(hi))
}

/// Result of [`truncate_state`]: `K* V*ᵀ` approximates `Û L₁ᵀ`.
#[derive(Clone, Debug)]
pub struct TruncatedFactors {
    /// `m x r₁`, columns orthogonal with norms `σ₁..σ_{r₁}`.
    pub k: Matrix,
    /// `n x r₁`, orthonormal.
    pub v: Matrix,
    pub rank: usize,
    /// All singular values of `L₁`, descending.
    pub sigma: Vec<f64>,
    /// `‖σ_{r₁+1..}‖₂`, the Frobenius error of the truncation.
    pub discarded: f64,
}

/// Truncated re-factorization of `Ŷ = Û L₁ᵀ`.
///
/// With `L₁ = P Σ Qᵀ`: `K* = Û Q[:, ..r₁] diag(σ₁..σ_{r₁})`, `V* = P[:, ..r₁]`.
/// When `L₁` is wider than tall it is first compressed by a QR of `L₁ᵀ`.
pub fn truncate_state(
    u_hat: &Matrix,
    l1: &Matrix,
    policy: &TruncationPolicy,
) -> Result<TruncatedFactors> {
    if u_hat.cols() != l1.cols() {
        return Err(dim_err(
            "truncate_state",
            format!("û has {} columns, l1 has {}", u_hat.cols(), l1.cols()),
        ));
    }
    let (n, q) = l1.shape();
    let (basis, l) = if n < q {
        // L₁ᵀ = Q_l R_l  ⇒  Û L₁ᵀ = (Û Q_l) R_l
        let qr = householder_qr(&l1.transpose())?;
        (u_hat.matmul(&qr.q)?, qr.r.transpose())
    } else {
        (u_hat.clone(), l1.clone())
    };
    let svd = svd_thin(&l)?;
    let r1 = truncation_rank(&svd.sigma, policy)?;

    let mut qs = svd.qmat.leading_columns(r1);
    for i in 0..qs.rows() {
        for (x, s) in qs.row_mut(i).iter_mut().zip(&svd.sigma) {
            *x *= s;
        }
    }
    let k = basis.matmul(&qs)?;
    let v = svd.p.leading_columns(r1);
    let discarded = svd.sigma[r1..].iter().map(|s| s * s).sum::<f64>().sqrt();
    Ok(TruncatedFactors {
        k,
        v,
        rank: r1,
        sigma: svd.sigma,
        discarded,
    })
}
