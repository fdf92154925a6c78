use crate::error::{dim_err, DlrtError, Result};
use crate::integrators::oracle::{GradientOracle, LayeredOracle, LossOracle, SingleLayer};
use crate::integrators::{Integrator, StepConfig};
use crate::linalg::{householder_qr, ortho_augment, Matrix};
use crate::lowrank::{truncate_state, LowRankState, TruncatedFactors, TruncationPolicy};

/// `w − h·∇ℓ(w)`.
pub fn euler_full_step<O: GradientOracle + ?Sized>(
    w: &Matrix,
    oracle: &mut O,
    h: f64,
) -> Result<Matrix> {
    let g = oracle.eval_full(w)?;
    if g.shape() != w.shape() {
        return Err(dim_err(
            "euler_full_step",
            format!("gradient {:?} for w {:?}", g.shape(), w.shape()),
        ));
    }
    if !g.is_finite() {
        return Err(DlrtError::NonFinite("euler_full_step gradient"));
    }
    let mut out = w.clone();
    out.axpy(-h, &g)?;
    Ok(out)
}

fn check_grads(grads: &[Matrix], expect: &[(usize, usize)], what: &'static str) -> Result<()> {
    if grads.len() != expect.len() {
        return Err(dim_err(
            what,
            format!("{} gradients for {} layers", grads.len(), expect.len()),
        ));
    }
    for (g, s) in grads.iter().zip(expect) {
        if g.shape() != *s {
            return Err(dim_err(
                what,
                format!("gradient {:?}, expected {s:?}", g.shape()),
            ));
        }
        if !g.is_finite() {
            return Err(DlrtError::NonFinite(what));
        }
    }
    Ok(())
}

/// K-step from `K₀ = U₀S₀` with `V₀` frozen: `K ← K − h·∇ℓ(KV₀ᵀ)V₀`.
/// Returns `(K₀, K₁)` per layer.
fn k_phase<L: LayeredOracle + ?Sized>(
    states: &[LowRankState],
    oracle: &mut L,
    cfg: &StepConfig,
) -> Result<(Vec<Matrix>, Vec<Matrix>)> {
    let k0: Vec<Matrix> = states.iter().map(LowRankState::k).collect();
    let mut k = k0.clone();
    let shapes: Vec<_> = k.iter().map(Matrix::shape).collect();
    for _ in 0..cfg.substeps {
        let pts: Vec<_> = k.iter().zip(states).map(|(k, s)| (k, s.v())).collect();
        let g = oracle.kgrads(&pts)?;
        check_grads(&g, &shapes, "K-step gradient")?;
        for (k, g) in k.iter_mut().zip(&g) {
            k.axpy(-cfg.h, g)?;
        }
    }
    Ok((k0, k))
}

/// L-step with the basis `U` frozen: `L ← L − h·∇ℓ(ULᵀ)ᵀU`.
fn l_phase<L: LayeredOracle + ?Sized>(
    bases: &[Matrix],
    mut l: Vec<Matrix>,
    oracle: &mut L,
    cfg: &StepConfig,
) -> Result<Vec<Matrix>> {
    let shapes: Vec<_> = l.iter().map(Matrix::shape).collect();
    for _ in 0..cfg.substeps {
        let pts: Vec<_> = bases.iter().zip(&l).collect();
        let g = oracle.lgrads(&pts)?;
        check_grads(&g, &shapes, "L-step gradient")?;
        for (l, g) in l.iter_mut().zip(&g) {
            l.axpy(-cfg.h, g)?;
        }
    }
    Ok(l)
}

/// `L₁ = V₁ S₁ᵀ` by QR, giving the final state `(U₁, S₁, V₁)`.
fn close_with_l(u1: Matrix, l1: &Matrix) -> Result<LowRankState> {
    let qr = householder_qr(l1)?;
    LowRankState::new(u1, qr.r.transpose(), qr.q)
}

/// Intermediate quantities of one PSI step.
#[derive(Clone, Debug)]
pub struct PsiTrace {
    pub u1: Matrix,
    /// `S̃₀ = R` from `K₁ = U₁R`.
    pub s_tilde0: Matrix,
    /// After the S-step, which moves along `+U₁ᵀ∇ℓ V₀`.
    pub s1: Matrix,
    pub state: LowRankState,
}

/// Projector-splitting step in lockstep over layers: K-step, QR, S-step
/// backwards in time, L-step from `V₀S₁ᵀ`, QR. Rank is fixed.
pub fn psi_layers<L: LayeredOracle + ?Sized>(
    states: &[LowRankState],
    oracle: &mut L,
    cfg: &StepConfig,
) -> Result<Vec<PsiTrace>> {
    cfg.validate()?;
    let (_, k1) = k_phase(states, oracle, cfg)?;
    let mut u1 = Vec::with_capacity(states.len());
    let mut s = Vec::with_capacity(states.len());
    for k in &k1 {
        let qr = householder_qr(k)?;
        u1.push(qr.q);
        s.push(qr.r);
    }
    let s_tilde0 = s.clone();
    let shapes: Vec<_> = states.iter().map(|st| (st.dims().0, st.rank())).collect();
    for _ in 0..cfg.substeps {
        let us: Vec<Matrix> = u1
            .iter()
            .zip(&s)
            .map(|(u, s)| u.matmul(s))
            .collect::<Result<_>>()?;
        let pts: Vec<_> = us.iter().zip(states).map(|(k, st)| (k, st.v())).collect();
        let g = oracle.kgrads(&pts)?;
        check_grads(&g, &shapes, "S-step gradient")?;
        for ((s, u), g) in s.iter_mut().zip(&u1).zip(&g) {
            s.axpy(cfg.h, &u.matmul_tn(g)?)?;
        }
    }
    let l0: Vec<Matrix> = states
        .iter()
        .zip(&s)
        .map(|(st, s)| st.v().matmul_nt(s))
        .collect::<Result<_>>()?;
    let l1 = l_phase(&u1, l0, oracle, cfg)?;
    u1.into_iter()
        .zip(s_tilde0)
        .zip(s)
        .zip(&l1)
        .map(|(((u1, s_tilde0), s1), l1)| {
            let state = close_with_l(u1.clone(), l1)?;
            Ok(PsiTrace {
                u1,
                s_tilde0,
                s1,
                state,
            })
        })
        .collect()
}

/// Intermediate quantities of one backward-corrected PSI step.
#[derive(Clone, Debug)]
pub struct BcPsiTrace {
    pub u1: Matrix,
    /// `S̄₁ = U₁ᵀU₀S₀`.
    pub s_bar1: Matrix,
    pub state: LowRankState,
}

/// Backward-corrected PSI in lockstep over layers: the S-step is replaced
/// by the projection `S̄₁ = U₁ᵀU₀S₀`, so every sub-flow runs forward.
pub fn bc_psi_layers<L: LayeredOracle + ?Sized>(
    states: &[LowRankState],
    oracle: &mut L,
    cfg: &StepConfig,
) -> Result<Vec<BcPsiTrace>> {
    cfg.validate()?;
    let (k0, k1) = k_phase(states, oracle, cfg)?;
    let mut u1 = Vec::with_capacity(states.len());
    let mut s_bar = Vec::with_capacity(states.len());
    for (k0, k1) in k0.iter().zip(&k1) {
        let u = householder_qr(k1)?.q;
        s_bar.push(u.matmul_tn(k0)?);
        u1.push(u);
    }
    let l0: Vec<Matrix> = states
        .iter()
        .zip(&s_bar)
        .map(|(st, s)| st.v().matmul_nt(s))
        .collect::<Result<_>>()?;
    let l1 = l_phase(&u1, l0, oracle, cfg)?;
    u1.into_iter()
        .zip(s_bar)
        .zip(&l1)
        .map(|((u1, s_bar1), l1)| {
            let state = close_with_l(u1.clone(), l1)?;
            Ok(BcPsiTrace { u1, s_bar1, state })
        })
        .collect()
}

/// Fixed-rank basis-update & Galerkin step in lockstep over layers.
///
/// K- and L-steps both start from the old factors; after QR of `K₁` and
/// `L₁` the coefficients `U₁ᵀU₀S₀V₀ᵀV₁` are advanced by a Galerkin step.
pub fn bug_fixed_layers<L: LayeredOracle + ?Sized>(
    states: &[LowRankState],
    oracle: &mut L,
    cfg: &StepConfig,
) -> Result<Vec<LowRankState>> {
    cfg.validate()?;
    let (_, k1) = k_phase(states, oracle, cfg)?;
    let u0: Vec<Matrix> = states.iter().map(|s| s.u().clone()).collect();
    let l0: Vec<Matrix> = states
        .iter()
        .map(|s| s.v().matmul_nt(s.s()))
        .collect::<Result<_>>()?;
    let l1 = l_phase(&u0, l0, oracle, cfg)?;

    let mut u1 = Vec::with_capacity(states.len());
    let mut v1 = Vec::with_capacity(states.len());
    let mut s = Vec::with_capacity(states.len());
    for ((st, k1), l1) in states.iter().zip(&k1).zip(&l1) {
        let u = householder_qr(k1)?.q;
        let v = householder_qr(l1)?.q;
        let m_left = u.matmul_tn(st.u())?;
        let n_right = st.v().matmul_tn(&v)?;
        s.push(m_left.matmul(st.s())?.matmul(&n_right)?);
        u1.push(u);
        v1.push(v);
    }
    let shapes: Vec<_> = states.iter().map(|st| (st.dims().0, st.rank())).collect();
    for _ in 0..cfg.substeps {
        let us: Vec<Matrix> = u1
            .iter()
            .zip(&s)
            .map(|(u, s)| u.matmul(s))
            .collect::<Result<_>>()?;
        let pts: Vec<_> = us.iter().zip(&v1).collect();
        let g = oracle.kgrads(&pts)?;
        check_grads(&g, &shapes, "Galerkin S-step gradient")?;
        for ((s, u), g) in s.iter_mut().zip(&u1).zip(&g) {
            s.axpy(-cfg.h, &u.matmul_tn(g)?)?;
        }
    }
    u1.into_iter()
        .zip(s)
        .zip(v1)
        .map(|((u, s), v)| LowRankState::new(u, s, v))
        .collect()
}

/// Intermediate quantities of one augmented backward-corrected PSI step.
#[derive(Clone, Debug)]
pub struct AbcTrace {
    /// `K₀ = U₀S₀`.
    pub k0: Matrix,
    /// After the K-step.
    pub k1: Matrix,
    /// Augmented basis `ortho([U₀ | K₁])`, `m x q` with `q ≤ 2r`.
    pub u_hat: Matrix,
    /// `V₀ K₀ᵀ Û`.
    pub l0: Matrix,
    /// After the L-step; `Ŷ₁ = Û L₁ᵀ` is the pre-truncation iterate.
    pub l1: Matrix,
    /// Truncated factors of `Ŷ₁` before re-factorization.
    pub truncation: TruncatedFactors,
    pub state: LowRankState,
}

impl AbcTrace {
    /// `Ŷ₁ = Û L₁ᵀ`.
    pub fn pre_truncation(&self) -> Matrix {
        self.u_hat.matmul_nt(&self.l1).expect("trace shapes")
    }
}

/// Augmented backward-corrected PSI in lockstep over layers.
///
/// 1. K-step `K₁ = K₀ − h∇ℓ(K₀V₀ᵀ)V₀`.
/// 2. `Û = ortho([U₀ | K₁])`.
/// 3. `L₀ = V₀K₀ᵀÛ`.
/// 4. L-step `L₁ = L₀ − h∇ℓ(ÛL₀ᵀ)ᵀÛ`.
/// 5. Truncate the SVD of `L₁` per `policies[i]` and re-factor `K*` by QR.
pub fn abc_psi_layers<L: LayeredOracle + ?Sized>(
    states: &[LowRankState],
    oracle: &mut L,
    cfg: &StepConfig,
    policies: &[TruncationPolicy],
) -> Result<Vec<AbcTrace>> {
    cfg.validate()?;
    if policies.len() != states.len() {
        return Err(dim_err(
            "abc_psi_layers",
            format!("{} policies for {} layers", policies.len(), states.len()),
        ));
    }
    let (k0, k1) = k_phase(states, oracle, cfg)?;
    let mut u_hat = Vec::with_capacity(states.len());
    let mut l0 = Vec::with_capacity(states.len());
    for ((st, k0), k1) in states.iter().zip(&k0).zip(&k1) {
        let uh = ortho_augment(st.u(), k1)?;
        // L₀ = V₀ (Ûᵀ K₀)ᵀ
        l0.push(st.v().matmul_nt(&uh.matmul_tn(k0)?)?);
        u_hat.push(uh);
    }
    let l1 = l_phase(&u_hat, l0.clone(), oracle, cfg)?;

    let mut out = Vec::with_capacity(states.len());
    for (i, (((k0, k1), u_hat), (l0, l1))) in k0
        .into_iter()
        .zip(k1)
        .zip(u_hat)
        .zip(l0.into_iter().zip(l1))
        .enumerate()
    {
        let (m, n) = states[i].dims();
        let truncation = truncate_state(&u_hat, &l1, &policies[i].for_layer(m, n))?;
        let qr = householder_qr(&truncation.k)?;
        let state = LowRankState::new(qr.q, qr.r, truncation.v.clone())?;
        out.push(AbcTrace {
            k0,
            k1,
            u_hat,
            l0,
            l1,
            truncation,
            state,
        });
    }
    Ok(out)
}

/// Advances every layer with `integrator` and returns the new states.
/// `Integrator::Full` is not a factored scheme and is rejected.
pub fn lowrank_layers<L: LayeredOracle + ?Sized>(
    integrator: Integrator,
    states: &[LowRankState],
    oracle: &mut L,
    cfg: &StepConfig,
    policies: &[TruncationPolicy],
) -> Result<Vec<LowRankState>> {
    match integrator {
        Integrator::Psi => Ok(psi_layers(states, oracle, cfg)?
            .into_iter()
            .map(|t| t.state)
            .collect()),
        Integrator::BcPsi => Ok(bc_psi_layers(states, oracle, cfg)?
            .into_iter()
            .map(|t| t.state)
            .collect()),
        Integrator::Bug => bug_fixed_layers(states, oracle, cfg),
        Integrator::AbcPsi => Ok(abc_psi_layers(states, oracle, cfg, policies)?
            .into_iter()
            .map(|t| t.state)
            .collect()),
        Integrator::Full => Err(DlrtError::InvalidArgument(
            "the full-rank integrator has no factored step".into(),
        )),
    }
}

fn single<T>(mut v: Vec<T>) -> T {
    debug_assert_eq!(v.len(), 1);
    v.pop().expect("one layer")
}

pub fn psi_step_traced<O: GradientOracle + ?Sized>(
    state: &LowRankState,
    oracle: &mut O,
    cfg: &StepConfig,
) -> Result<PsiTrace> {
    Ok(single(psi_layers(
        std::slice::from_ref(state),
        &mut SingleLayer(oracle),
        cfg,
    )?))
}

/// One projector-splitting step.
pub fn psi_step<O: GradientOracle + ?Sized>(
    state: &LowRankState,
    oracle: &mut O,
    cfg: &StepConfig,
) -> Result<LowRankState> {
    Ok(psi_step_traced(state, oracle, cfg)?.state)
}

pub fn bc_psi_step_traced<O: GradientOracle + ?Sized>(
    state: &LowRankState,
    oracle: &mut O,
    cfg: &StepConfig,
) -> Result<BcPsiTrace> {
    Ok(single(bc_psi_layers(
        std::slice::from_ref(state),
        &mut SingleLayer(oracle),
        cfg,
    )?))
}

/// One backward-corrected projector-splitting step.
pub fn bc_psi_step<O: GradientOracle + ?Sized>(
    state: &LowRankState,
    oracle: &mut O,
    cfg: &StepConfig,
) -> Result<LowRankState> {
    Ok(bc_psi_step_traced(state, oracle, cfg)?.state)
}

/// One fixed-rank basis-update & Galerkin step.
pub fn bug_fixed_step<O: GradientOracle + ?Sized>(
    state: &LowRankState,
    oracle: &mut O,
    cfg: &StepConfig,
) -> Result<LowRankState> {
    Ok(single(bug_fixed_layers(
        std::slice::from_ref(state),
        &mut SingleLayer(oracle),
        cfg,
    )?))
}

pub fn abc_psi_step_traced<O: GradientOracle + ?Sized>(
    state: &LowRankState,
    oracle: &mut O,
    cfg: &StepConfig,
) -> Result<AbcTrace> {
    Ok(single(abc_psi_layers(
        std::slice::from_ref(state),
        &mut SingleLayer(oracle),
        cfg,
        &[cfg.policy],
    )?))
}

/// One augmented backward-corrected projector-splitting step (rank adaptive).
pub fn abc_psi_step<O: GradientOracle + ?Sized>(
    state: &LowRankState,
    oracle: &mut O,
    cfg: &StepConfig,
) -> Result<LowRankState> {
    Ok(abc_psi_step_traced(state, oracle, cfg)?.state)
}

/// Runs the PSI K-step and S-step only and reports `(ℓ before, ℓ after)`
/// the S-step, i.e. `ℓ(U₁S̃₀V₀ᵀ)` and `ℓ(U₁S₁V₀ᵀ)`.
pub fn s_step_loss_delta_psi<O: LossOracle + ?Sized>(
    state: &LowRankState,
    oracle: &mut O,
    cfg: &StepConfig,
) -> Result<(f64, f64)> {
    cfg.validate()?;
    let v0 = state.v();
    let mut k = state.k();
    for _ in 0..cfg.substeps {
        let g = oracle.eval_kgrad(&k, v0)?;
        k.axpy(-cfg.h, &g)?;
    }
    let qr = householder_qr(&k)?;
    let u1 = qr.q;
    let mut s = qr.r;
    let before = oracle.loss(&u1.matmul(&s)?.matmul_nt(v0)?)?;
    for _ in 0..cfg.substeps {
        let g = oracle.eval_kgrad(&u1.matmul(&s)?, v0)?;
        s.axpy(cfg.h, &u1.matmul_tn(&g)?)?;
    }
    let after = oracle.loss(&u1.matmul(&s)?.matmul_nt(v0)?)?;
    Ok((before, after))
}
