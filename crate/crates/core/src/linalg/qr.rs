use crate::error::{dim_err, DlrtError, Result};
use crate::linalg::matrix::{dot, Matrix};

/// Relative threshold below which a column of `[u0 | k1]` counts as
/// numerically dependent on the columns already accepted.
pub const DEPENDENCY_TOL: f64 = 1e-12;

/// Thin QR factorization `a = q · r`.
#[derive(Clone, Debug)]
pub struct QrResult {
    /// `m x k`, orthonormal columns.
    pub q: Matrix,
    /// `k x k`, upper triangular with non-negative diagonal.
    pub r: Matrix,
}

struct Reflector {
    pivot: usize,
    // Unit vector acting on rows `pivot..m`.
    v: Vec<f64>,
}

impl Reflector {
    /// Builds `H = I − 2vvᵀ` mapping `x` onto a multiple of `e₁`. Returns the
    /// reflector (or `None` if `x = 0`) and the resulting leading entry.
    fn annihilate(pivot: usize, x: &[f64]) -> (Option<Self>, f64) {
        let alpha = dot(x, x).sqrt();
        if alpha == 0.0 {
            return (None, 0.0);
        }
        let s = if x[0] >= 0.0 { 1.0 } else { -1.0 };
        let mut v = x.to_vec();
        v[0] += s * alpha;
        let vn = dot(&v, &v).sqrt();
        v.iter_mut().for_each(|e| *e /= vn);
        (Some(Self { pivot, v }), -s * alpha)
    }

    fn apply(&self, col: &mut [f64]) {
        let tail = &mut col[self.pivot..];
        let d = 2.0 * dot(&self.v, tail);
        for (c, v) in tail.iter_mut().zip(&self.v) {
            *c -= d * v;
        }
    }
}

/// `Q = H₀ H₁ ⋯ H_{p−1} [e₀ … e_{p−1}]`.
fn form_q(m: usize, reflectors: &[Option<Reflector>]) -> Vec<Vec<f64>> {
    (0..reflectors.len())
        .map(|t| {
            let mut e = vec![0.0; m];
            e[t] = 1.0;
            for h in reflectors.iter().rev().flatten() {
                h.apply(&mut e);
            }
            e
        })
        .collect()
}

/// Householder QR of a tall matrix (`m ≥ k`). The diagonal of `r` is made
/// non-negative by flipping signs of matching columns of `q`, so the result
/// is deterministic for identical input.
pub fn householder_qr(a: &Matrix) -> Result<QrResult> {
    let (m, k) = a.shape();
    if m < k {
        return Err(dim_err(
            "householder_qr",
            format!("{m}x{k} matrix has m < k"),
        ));
    }
    if !a.is_finite() {
        return Err(DlrtError::NonFinite("householder_qr input"));
    }
    let mut cols = a.to_columns();
    let mut reflectors = Vec::with_capacity(k);
    let mut r = Matrix::zeros(k, k);
    for j in 0..k {
        let (h, diag) = Reflector::annihilate(j, &cols[j][j..]);
        if let Some(h) = &h {
            for c in cols.iter_mut().skip(j + 1) {
                h.apply(c);
            }
        }
        for i in 0..j {
            r[(i, j)] = cols[j][i];
        }
        r[(j, j)] = diag;
        reflectors.push(h);
    }
    let mut q_cols = form_q(m, &reflectors);
    for t in 0..k {
        if r[(t, t)] < 0.0 {
            q_cols[t].iter_mut().for_each(|v| *v = -*v);
            r.row_mut(t).iter_mut().for_each(|v| *v = -*v);
        }
    }
    let q = Matrix::from_columns(m, &q_cols);
    if !q.is_finite() || !r.is_finite() {
        return Err(DlrtError::NonFinite("householder_qr output"));
    }
    Ok(QrResult { q, r })
}

/// Orthonormal basis `Û` of `span([u0 | k1])`.
///
/// Householder QR of the concatenation with dependency dropping: a column
/// whose component outside the already accepted columns has norm at most
/// [`DEPENDENCY_TOL`] times the largest input column norm gets no reflector,
/// so `Û` has `q ≤ 2r` (and `q ≤ m`) columns. The leading columns reproduce
/// `u0` up to sign.
pub fn ortho_augment(u0: &Matrix, k1: &Matrix) -> Result<Matrix> {
    if u0.rows() != k1.rows() {
        return Err(dim_err(
            "ortho_augment",
            format!("u0 has {} rows, k1 has {}", u0.rows(), k1.rows()),
        ));
    }
    if !k1.is_finite() {
        return Err(DlrtError::NonFinite("ortho_augment k1"));
    }
    let m = u0.rows();
    let mut cols = u0.to_columns();
    cols.extend(k1.to_columns());
    let scale = cols.iter().map(|c| dot(c, c).sqrt()).fold(0.0, f64::max);
    let tol = DEPENDENCY_TOL * scale;

    let mut reflectors: Vec<Option<Reflector>> = Vec::new();
    let mut signs = Vec::new();
    let mut p = 0;
    for j in 0..cols.len() {
        if p == m {
            break;
        }
        let residual = dot(&cols[j][p..], &cols[j][p..]).sqrt();
        if residual <= tol {
            continue;
        }
        let (h, diag) = Reflector::annihilate(p, &cols[j][p..]);
        let h = h.expect("nonzero residual");
        for c in cols.iter_mut().skip(j + 1) {
            h.apply(c);
        }
        reflectors.push(Some(h));
        signs.push(diag.signum());
        p += 1;
    }
    let mut q_cols = form_q(m, &reflectors);
    for (c, s) in q_cols.iter_mut().zip(&signs) {
        if *s < 0.0 {
            c.iter_mut().for_each(|v| *v = -*v);
        }
    }
    Ok(Matrix::from_columns(m, &q_cols))
}
