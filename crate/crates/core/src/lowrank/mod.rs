//! Factored low-rank state `Y = U S Vᵀ`, tangent-space projection,
//! rank-adaptive truncation and parameter accounting.

mod accounting;
pub mod checkpoint;
mod truncation;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{dim_err, DlrtError, Result};
use crate::linalg::{householder_qr, Matrix};

pub use accounting::{compression_rate, param_count, LayerShape};
pub use truncation::{
    truncate_state, truncation_rank, TruncatedFactors, TruncationCriterion, TruncationPolicy,
};

/// Orthonormality tolerance factor: `‖UᵀU − I‖_F ≤ ORTHO_TOL · √r`.
pub const ORTHO_TOL: f64 = 1e-10;

/// `Y = U S Vᵀ` with `U: m x r`, `S: r x r`, `V: n x r` and orthonormal
/// columns in `U` and `V`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankState {
    u: Matrix,
    s: Matrix,
    v: Matrix,
}

impl LowRankState {
    /// Validates shapes, finiteness and orthonormality of the factors.
    pub fn new(u: Matrix, s: Matrix, v: Matrix) -> Result<Self> {
        let r = u.cols();
        if s.shape() != (r, r) || v.cols() != r {
            return Err(dim_err(
                "LowRankState::new",
                format!("u {:?}, s {:?}, v {:?}", u.shape(), s.shape(), v.shape()),
            ));
        }
        if r == 0 || r > u.rows().min(v.rows()) {
            return Err(DlrtError::InvalidRank(format!(
                "rank {r} for a {}x{} matrix",
                u.rows(),
                v.rows()
            )));
        }
        if !(u.is_finite() && s.is_finite() && v.is_finite()) {
            return Err(DlrtError::NonFinite("LowRankState factors"));
        }
        let tol = ORTHO_TOL * (r as f64).sqrt();
        let (eu, ev) = (u.orthonormality_error(), v.orthonormality_error());
        if eu > tol || ev > tol {
            return Err(DlrtError::InvalidArgument(format!(
                "factors not orthonormal: ‖UᵀU−I‖={eu:.3e}, ‖VᵀV−I‖={ev:.3e}"
            )));
        }
        Ok(Self { u, s, v })
    }

    pub fn u(&self) -> &Matrix {
        &self.u
    }

    pub fn s(&self) -> &Matrix {
        &self.s
    }

    pub fn v(&self) -> &Matrix {
        &self.v
    }

    pub fn rank(&self) -> usize {
        self.u.cols()
    }

    /// `(m, n)` of the represented matrix.
    pub fn dims(&self) -> (usize, usize) {
        (self.u.rows(), self.v.rows())
    }

    /// `K = U S`.
    pub fn k(&self) -> Matrix {
        self.u.matmul(&self.s).expect("state shapes")
    }

    /// Materializes `U S Vᵀ`.
    pub fn to_dense(&self) -> Matrix {
        self.k().matmul_nt(&self.v).expect("state shapes")
    }

    pub fn into_parts(self) -> (Matrix, Matrix, Matrix) {
        (self.u, self.s, self.v)
    }
}

/// Seeded initialization: `U`, `V` are the Q factors of Gaussian draws and
/// `S = diag(1/√r)`, so `‖Y‖_F = 1`.
pub fn init_lowrank(m: usize, n: usize, r: usize, seed: u64) -> Result<LowRankState> {
    init_lowrank_scaled(m, n, r, seed, 1.0 / (r.max(1) as f64).sqrt())
}

/// As [`init_lowrank`] with every singular value set to `sigma`.
pub fn init_lowrank_scaled(
    m: usize,
    n: usize,
    r: usize,
    seed: u64,
    sigma: f64,
) -> Result<LowRankState> {
    if r == 0 || r > m.min(n) {
        return Err(DlrtError::InvalidRank(format!(
            "rank {r} for a {m}x{n} matrix"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = householder_qr(&gaussian(m, r, &mut rng))?.q;
    let v = householder_qr(&gaussian(n, r, &mut rng))?.q;
    LowRankState::new(u, Matrix::diag(&vec![sigma; r]), v)
}

pub(crate) fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Orthogonal projection onto the tangent space of the rank-r manifold at
/// `state`: `P(Y)G = UUᵀG − UUᵀGVVᵀ + GVVᵀ`.
pub fn tangent_project(state: &LowRankState, g: &Matrix) -> Result<Matrix> {
    let (m, n) = state.dims();
    if g.shape() != (m, n) {
        return Err(dim_err(
            "tangent_project",
            format!("state {m}x{n}, g {:?}", g.shape()),
        ));
    }
    let (u, v) = (state.u(), state.v());
    let utg = u.matmul_tn(g)?; // r x n
    let gv = g.matmul(v)?; // m x r
    let utgv = utg.matmul(v)?; // r x r
    let mut out = u.matmul(&utg)?;
    out.axpy(1.0, &gv.matmul_nt(v)?)?;
    out.axpy(-1.0, &u.matmul(&utgv)?.matmul_nt(v)?)?;
    Ok(out)
}
