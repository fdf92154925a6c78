//! Harnesses on deterministic quadratic problems: error-vs-step-size studies,
//! descent audits and projected-gradient traces.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DlrtError, Result};
use crate::integrators::oracle::{GradientOracle, LossOracle, QuadraticLoss};
use crate::integrators::steps::{
    abc_psi_step, abc_psi_step_traced, bc_psi_step, bug_fixed_step, euler_full_step, psi_step,
};
use crate::integrators::{Integrator, LearningRate, StepConfig};
use crate::linalg::{householder_qr, Matrix};
use crate::lowrank::{gaussian, tangent_project, LowRankState, TruncationPolicy};

/// `ℓ(Y) = ½‖Y − A‖²` with `A = A_r + ε·E`, where `A_r` is a random rank-`r`
/// matrix with `‖A_r‖ = scale` and `‖E‖ = 1`, started from an independent
/// random rank-`r` point `Y₀` with `‖Y₀‖ = scale`.
#[derive(Clone, Debug)]
pub struct SyntheticQuadratic {
    pub target: Matrix,
    pub initial: LowRankState,
    pub eps: f64,
}

fn random_rank_r(
    m: usize,
    n: usize,
    r: usize,
    norm: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LowRankState> {
    let u = householder_qr(&gaussian(m, r, rng))?.q;
    let v = householder_qr(&gaussian(n, r, rng))?.q;
    // Spread singular values over [1, 2] so the factors are well separated.
    let raw: Vec<f64> = (0..r).map(|i| 2.0 - i as f64 / r.max(2) as f64).collect();
    let nrm = raw.iter().map(|s| s * s).sum::<f64>().sqrt();
    let s: Vec<f64> = raw.iter().map(|s| s * norm / nrm).collect();
    LowRankState::new(u, Matrix::diag(&s), v)
}

impl SyntheticQuadratic {
    pub fn generate(
        m: usize,
        n: usize,
        rank: usize,
        eps: f64,
        scale: f64,
        seed: u64,
    ) -> Result<Self> {
        if rank == 0 || rank > m.min(n) {
            return Err(DlrtError::InvalidRank(format!(
                "rank {rank} for a {m}x{n} problem"
            )));
        }
        if !(eps >= 0.0 && scale > 0.0 && eps.is_finite() && scale.is_finite()) {
            return Err(DlrtError::InvalidArgument(format!(
                "need eps ≥ 0 and scale > 0, got {eps}, {scale}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a_r = random_rank_r(m, n, rank, scale, &mut rng)?.to_dense();
        let e = gaussian(m, n, &mut rng);
        let e = e.scale(1.0 / e.frobenius_norm());
        let mut target = a_r;
        target.axpy(eps, &e)?;
        let initial = random_rank_r(m, n, rank, scale, &mut rng)?;
        Ok(Self {
            target,
            initial,
            eps,
        })
    }

    pub fn oracle(&self) -> QuadraticLoss {
        QuadraticLoss::new(self.target.clone())
    }
}

/// Number of steps of size `h` that reach `t_end` exactly.
pub fn step_count(t_end: f64, h: f64) -> Result<usize> {
    if !(h > 0.0 && t_end >= 0.0) {
        return Err(DlrtError::InvalidArgument(format!(
            "need h > 0 and t_end ≥ 0, got {h}, {t_end}"
        )));
    }
    let n = (t_end / h).round();
    if (n * h - t_end).abs() > 1e-9 * t_end.max(1.0) {
        return Err(DlrtError::InvalidArgument(format!(
            "t_end = {t_end} is not a multiple of h = {h}"
        )));
    }
    Ok(n as usize)
}

/// Advances `state` by one step of a factored integrator.
pub fn lowrank_step<O: GradientOracle + ?Sized>(
    integrator: Integrator,
    state: &LowRankState,
    oracle: &mut O,
    cfg: &StepConfig,
) -> Result<LowRankState> {
    match integrator {
        Integrator::Psi => psi_step(state, oracle, cfg),
        Integrator::BcPsi => bc_psi_step(state, oracle, cfg),
        Integrator::Bug => bug_fixed_step(state, oracle, cfg),
        Integrator::AbcPsi => abc_psi_step(state, oracle, cfg),
        Integrator::Full => Err(DlrtError::InvalidArgument(
            "the full-rank integrator has no factored step".into(),
        )),
    }
}

/// `steps` explicit-Euler steps of size `h` on the dense matrix.
pub fn euler_trajectory<O: GradientOracle + ?Sized>(
    w0: &Matrix,
    oracle: &mut O,
    h: f64,
    steps: usize,
) -> Result<Matrix> {
    let mut w = w0.clone();
    for _ in 0..steps {
        w = euler_full_step(&w, oracle, h)?;
    }
    Ok(w)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorRow {
    pub h: f64,
    pub steps: usize,
    /// `‖Y_N − W_ref(t_end)‖_F`.
    pub error: f64,
    /// `log₂(e(h_prev)/e(h)) / log₂(h_prev/h)` against the previous row.
    pub order: Option<f64>,
    pub final_rank: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorTable {
    pub integrator: Integrator,
    pub rows: Vec<ErrorRow>,
}

impl ErrorTable {
    /// True when the last observed order fell below one half, i.e. refining
    /// `h` no longer reduces the error.
    pub fn plateaued(&self) -> bool {
        self.rows
            .last()
            .and_then(|r| r.order)
            .is_some_and(|o| o < 0.5)
    }
}

/// Integrates `problem` to `t_end` with each `h` in `h_list` and measures
/// the error against full explicit Euler with step `ref_h`.
pub fn ode_error_study(
    problem: &SyntheticQuadratic,
    integrator: Integrator,
    h_list: &[f64],
    t_end: f64,
    ref_h: f64,
    policy: TruncationPolicy,
) -> Result<ErrorTable> {
    if h_list.is_empty() {
        return Err(DlrtError::InvalidArgument("empty step-size list".into()));
    }
    policy.validate()?;
    let mut oracle = problem.oracle();
    let y0 = problem.initial.to_dense();
    let reference = euler_trajectory(&y0, &mut oracle, ref_h, step_count(t_end, ref_h)?)?;

    let mut rows: Vec<ErrorRow> = Vec::with_capacity(h_list.len());
    for &h in h_list {
        let steps = step_count(t_end, h)?;
        let (y, final_rank) = if integrator == Integrator::Full {
            let (m, n) = y0.shape();
            (euler_trajectory(&y0, &mut oracle, h, steps)?, m.min(n))
        } else {
            let cfg = StepConfig::new(h, policy);
            let mut state = problem.initial.clone();
            for _ in 0..steps {
                state = lowrank_step(integrator, &state, &mut oracle, &cfg)?;
            }
            (state.to_dense(), state.rank())
        };
        let error = y.sub(&reference)?.frobenius_norm();
        let order = rows.last().and_then(|prev| {
            (prev.error > 0.0 && error > 0.0)
                .then(|| (prev.error / error).log2() / (prev.h / h).log2())
        });
        rows.push(ErrorRow {
            h,
            steps,
            error,
            order,
            final_rank,
        });
    }
    Ok(ErrorTable { integrator, rows })
}

/// Both sides of `ℓ(Ŷ₁) ≤ ℓ(Y₀) − (1 − h·c_l/2)·h·‖ÛÛᵀ∇ℓ(Y₀)‖²` for one step.
#[derive(Clone, Debug, PartialEq)]
pub struct DescentRecord {
    pub step: usize,
    pub rank_before: usize,
    pub rank_after: usize,
    pub loss_before: f64,
    /// `ℓ(Ŷ₁)` with `Ŷ₁ = ÛL₁ᵀ`.
    pub loss_pre_truncation: f64,
    /// `ℓ(Y₁)` after truncation.
    pub loss_after: f64,
    /// Right-hand side of the inequality.
    pub bound: f64,
    /// `ℓ(Ŷ₁) − bound`; non-positive when the inequality holds exactly.
    pub excess: f64,
}

impl DescentRecord {
    pub fn holds(&self, slack: f64) -> bool {
        self.excess <= slack
    }
}

/// Runs `steps` augmented steps and records the descent inequality at each.
/// The inequality is only guaranteed for `h ≤ 2/c_l`; the records are
/// produced regardless.
pub fn descent_audit<O: LossOracle + ?Sized>(
    oracle: &mut O,
    initial: &LowRankState,
    cfg: &StepConfig,
    steps: usize,
    c_l: f64,
) -> Result<Vec<DescentRecord>> {
    let h = cfg.h;
    let mut state = initial.clone();
    let mut out = Vec::with_capacity(steps);
    for step in 0..steps {
        let y0 = state.to_dense();
        let loss_before = oracle.loss(&y0)?;
        let g = oracle.eval_full(&y0)?;
        let trace = abc_psi_step_traced(&state, oracle, cfg)?;
        let pg = trace.u_hat.matmul(&trace.u_hat.matmul_tn(&g)?)?;
        let pn = pg.frobenius_norm();
        let bound = loss_before - (1.0 - h * c_l / 2.0) * h * pn * pn;
        let loss_pre_truncation = oracle.loss(&trace.pre_truncation())?;
        let loss_after = oracle.loss(&trace.state.to_dense())?;
        out.push(DescentRecord {
            step,
            rank_before: state.rank(),
            rank_after: trace.state.rank(),
            loss_before,
            loss_pre_truncation,
            loss_after,
            bound,
            excess: loss_pre_truncation - bound,
        });
        state = trace.state;
    }
    Ok(out)
}

/// `‖P(Y_t)∇ℓ(Y_t)‖_F` for `t = 0..=steps` along an augmented run with the
/// given learning-rate schedule (`t` is 1-based in the schedule).
pub fn projected_gradient_trace<O: GradientOracle + ?Sized>(
    oracle: &mut O,
    initial: &LowRankState,
    lr: LearningRate,
    policy: TruncationPolicy,
    steps: usize,
) -> Result<Vec<f64>> {
    let mut state = initial.clone();
    let mut norms = Vec::with_capacity(steps + 1);
    let pg_norm = |state: &LowRankState, oracle: &mut O| -> Result<f64> {
        let g = oracle.eval_full(&state.to_dense())?;
        Ok(tangent_project(state, &g)?.frobenius_norm())
    };
    norms.push(pg_norm(&state, oracle)?);
    for t in 1..=steps {
        let cfg = StepConfig::new(lr.at(t), policy);
        state = abc_psi_step(&state, oracle, &cfg)?;
        norms.push(pg_norm(&state, oracle)?);
    }
    Ok(norms)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_count_checks_divisibility() {
        assert_eq!(step_count(1.0, 0.1).unwrap(), 10);
        assert_eq!(step_count(1.0, 0.0125).unwrap(), 80);
        assert!(step_count(1.0, 0.3).is_err());
        assert!(step_count(1.0, 0.0).is_err());
    }

    #[test]
    fn generated_problem_has_requested_structure() {
        let p = SyntheticQuadratic::generate(12, 9, 3, 0.0, 2.0, 5).unwrap();
        assert!((p.target.frobenius_norm() - 2.0).abs() < 1e-12);
        assert!((p.initial.to_dense().frobenius_norm() - 2.0).abs() < 1e-12);
        assert_eq!(p.initial.rank(), 3);
    }

    #[test]
    fn euler_self_comparison_is_exact() {
        let p = SyntheticQuadratic::generate(8, 6, 2, 0.0, 1.0, 1).unwrap();
        let pol = TruncationPolicy::new(0.0, 1, 4).unwrap();
        let t = ode_error_study(&p, Integrator::Full, &[0.1], 1.0, 0.1, pol).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.rows[0].error, 0.0);
        assert_eq!(t.rows[0].order, None);
    }

    #[test]
    fn descent_records_on_small_instance() {
        let p = SyntheticQuadratic::generate(6, 5, 2, 0.1, 1.0, 2).unwrap();
        let mut o = p.oracle();
        let cfg = StepConfig::new(0.3, TruncationPolicy::new(0.0, 1, 4).unwrap());
        let recs = descent_audit(&mut o, &p.initial, &cfg, 10, QuadraticLoss::LIPSCHITZ).unwrap();
        assert_eq!(recs.len(), 10);
        assert!(recs.iter().all(|r| r.holds(1e-12)));
    }
}
