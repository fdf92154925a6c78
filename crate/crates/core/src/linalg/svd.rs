use crate::error::{dim_err, DlrtError, Result};
use crate::linalg::matrix::{dot, Matrix};
use crate::linalg::qr::householder_qr;

const MAX_SWEEPS: usize = 80;

/// Thin SVD `l = p · diag(sigma) · qmatᵀ` of an `n x q` matrix with `n ≥ q`.
#[derive(Clone, Debug)]
pub struct SvdResult {
    /// `n x q`, orthonormal columns.
    pub p: Matrix,
    /// Descending, non-negative.
    pub sigma: Vec<f64>,
    /// `q x q`, orthogonal.
    pub qmat: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let mut ps = self.p.clone();
        for i in 0..ps.rows() {
            for (v, s) in ps.row_mut(i).iter_mut().zip(&self.sigma) {
                *v *= s;
            }
        }
        ps.matmul_nt(&self.qmat).expect("consistent svd shapes")
    }
}

/// Thin SVD via QR followed by one-sided Jacobi on the small `q x q` factor.
///
/// `l = Q R`, then Jacobi rotations `R V = W` until the columns of `W` are
/// mutually orthogonal; `σᵢ = ‖wᵢ‖`, `p = Q · [wᵢ/σᵢ]`. Columns belonging to
/// zero singular values are completed to an orthonormal set.
pub fn svd_thin(l: &Matrix) -> Result<SvdResult> {
    let (n, q) = l.shape();
    if n < q {
        return Err(dim_err("svd_thin", format!("{n}x{q} matrix has n < q")));
    }
    if q == 0 {
        return Ok(SvdResult {
            p: Matrix::zeros(n, 0),
            sigma: vec![],
            qmat: Matrix::zeros(0, 0),
        });
    }
    let qr = householder_qr(l)?;

    // Column-major working copies of R and V.
    let mut w = qr.r.to_columns();
    let mut v: Vec<Vec<f64>> = (0..q)
        .map(|j| (0..q).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let eps = f64::EPSILON;
    // Rounding in a length-q dot product is O(q·eps); a stricter test can
    // stall in clusters of equal singular values.
    let tol = eps * q as f64;
    // Columns below this squared norm are numerically zero; rotating them
    // against each other only stirs rounding noise.
    let negligible = {
        let total: f64 = w.iter().map(|c| dot(c, c)).sum();
        (eps * eps) * total
    };
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..q {
            for j in (i + 1)..q {
                let alpha = dot(&w[i], &w[i]);
                let beta = dot(&w[j], &w[j]);
                let gamma = dot(&w[i], &w[j]);
                if gamma == 0.0
                    || gamma.abs() <= tol * (alpha * beta).sqrt()
                    || alpha.min(beta) <= negligible
                {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut w, i, j, c, s);
                rotate(&mut v, i, j, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(DlrtError::NoConvergence {
            op: "svd_thin (Jacobi sweeps)",
            iterations: MAX_SWEEPS,
        });
    }

    let norms: Vec<f64> = w.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));

    let smax = norms[order[0]];
    let cutoff = smax * eps * q as f64;
    let mut sigma = Vec::with_capacity(q);
    let mut pr: Vec<Vec<f64>> = Vec::with_capacity(q);
    let mut vq: Vec<Vec<f64>> = Vec::with_capacity(q);
    let mut missing = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        let s = norms[j];
        vq.push(v[j].clone());
        if s > cutoff && s > 0.0 {
            sigma.push(s);
            pr.push(w[j].iter().map(|x| x / s).collect());
        } else {
            sigma.push(0.0);
            pr.push(vec![0.0; q]);
            missing.push(slot);
        }
    }
    complete_orthonormal(&mut pr, &missing);

    let p = qr.q.matmul(&Matrix::from_columns(q, &pr))?;
    let qmat = Matrix::from_columns(q, &vq);
    if !p.is_finite() || !qmat.is_finite() || sigma.iter().any(|s| !s.is_finite()) {
        return Err(DlrtError::NonFinite("svd_thin output"));
    }
    Ok(SvdResult { p, sigma, qmat })
}

fn rotate(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(j);
    for (a, b) in lo[i].iter_mut().zip(hi[0].iter_mut()) {
        let (x, y) = (*a, *b);
        *a = c * x - s * y;
        *b = s * x + c * y;
    }
}

/// Fills the `missing` slots of `cols` with unit vectors orthogonal to every
/// other column, choosing among the standard basis the candidate with the
/// largest residual (two Gram-Schmidt passes).
fn complete_orthonormal(cols: &mut [Vec<f64>], missing: &[usize]) {
    let dim = cols.first().map_or(0, Vec::len);
    for &slot in missing {
        let mut best: Option<Vec<f64>> = None;
        let mut best_norm = -1.0;
        for e in 0..dim {
            let mut cand = vec![0.0; dim];
            cand[e] = 1.0;
            for _ in 0..2 {
                for (k, c) in cols.iter().enumerate() {
                    if k == slot {
                        continue;
                    }
                    let d = dot(&cand, c);
                    cand.iter_mut().zip(c).for_each(|(x, y)| *x -= d * y);
                }
            }
            let nrm = dot(&cand, &cand).sqrt();
            if nrm > best_norm {
                best_norm = nrm;
                best = Some(cand);
            }
        }
        let mut b = best.expect("non-empty basis");
        b.iter_mut().for_each(|x| *x /= best_norm);
        cols[slot] = b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_case() {
        let l = Matrix::from_rows(&[[3.0, 0.0], [0.0, 1.0], [0.0, 0.0], [0.0, 0.0]]);
        let svd = svd_thin(&l).unwrap();
        assert!((svd.sigma[0] - 3.0).abs() < 1e-14);
        assert!((svd.sigma[1] - 1.0).abs() < 1e-14);
        assert!(svd.reconstruct().sub(&l).unwrap().frobenius_norm() < 1e-14);
    }

    #[test]
    fn rank_one_outer_product() {
        // ‖u‖ = 2, ‖v‖ = 5
        let u = [0.0, 2.0, 0.0, 0.0, 0.0];
        let v = [3.0, 4.0, 0.0];
        let l = Matrix::from_fn(5, 3, |i, j| u[i] * v[j]);
        let svd = svd_thin(&l).unwrap();
        assert!((svd.sigma[0] - 10.0).abs() < 1e-13);
        assert!(svd.sigma[1].abs() < 1e-13 && svd.sigma[2].abs() < 1e-13);
        assert!(svd.p.orthonormality_error() < 1e-13);
        assert!(svd.qmat.orthonormality_error() < 1e-13);
        assert!(svd.reconstruct().sub(&l).unwrap().frobenius_norm() < 1e-12);
    }

    #[test]
    fn zero_matrix() {
        let svd = svd_thin(&Matrix::zeros(4, 3)).unwrap();
        assert_eq!(svd.sigma, vec![0.0; 3]);
        assert!(svd.p.orthonormality_error() < 1e-14);
    }

    #[test]
    fn wide_rejected() {
        assert!(svd_thin(&Matrix::zeros(2, 3)).is_err());
    }
}
