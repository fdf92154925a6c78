use dlrt_core::linalg::Matrix;
use dlrt_core::lowrank::checkpoint::{read_states, write_states};
use dlrt_core::lowrank::{
    init_lowrank, tangent_project, truncate_state, truncation_rank, LowRankState,
    TruncationCriterion, TruncationPolicy,
};
use proptest::prelude::*;

/// Exhaustive reference: tests every candidate rank with a directly summed
/// tail, no shared prefix sums.
fn exhaustive_rank(sigma: &[f64], p: &TruncationPolicy) -> usize {
    let total = sigma.iter().map(|s| s * s).sum::<f64>().sqrt();
    let mut best = sigma.len();
    for r in 0..=sigma.len() {
        let tail_sq: f64 = sigma[r..].iter().map(|s| s * s).sum();
        let ok = match p.criterion {
            TruncationCriterion::NormRatio => tail_sq.sqrt() <= p.tau * total,
            TruncationCriterion::SquaredTail => tail_sq < p.tau * total,
        };
        if ok {
            best = r;
            break;
        }
    }
    best.max(p.r_min).min(p.r_max.min(sigma.len()))
}

fn sigmas() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..10.0f64, 1..12).prop_map(|mut v| {
        v.sort_by(|a, b| b.total_cmp(a));
        v
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn truncation_rank_equals_exhaustive_search(
        sigma in sigmas(),
        tau in prop_oneof![Just(0.0), 0.0..0.5f64],
        r_min in 1usize..4,
        extra in 0usize..8,
        squared in any::<bool>(),
    ) {
        let crit = if squared { TruncationCriterion::SquaredTail } else { TruncationCriterion::NormRatio };
        let p = TruncationPolicy::new(tau, r_min, r_min + extra).unwrap().with_criterion(crit);
        prop_assert_eq!(truncation_rank(&sigma, &p).unwrap(), exhaustive_rank(&sigma, &p));
    }

    #[test]
    fn tangent_projection_is_linear_and_idempotent(seed in 0u64..10_000, a in -3.0..3.0f64) {
        let st = init_lowrank(9, 7, 3, seed).unwrap();
        let g1 = Matrix::from_fn(9, 7, |i, j| ((i * 5 + j * 3 + seed as usize) % 11) as f64 - 5.0);
        let g2 = Matrix::from_fn(9, 7, |i, j| ((i * 2 + j * 7 + seed as usize) % 13) as f64 - 6.0);
        let p1 = tangent_project(&st, &g1).unwrap();
        let pp = tangent_project(&st, &p1).unwrap();
        prop_assert!(pp.sub(&p1).unwrap().frobenius_norm() < 1e-12 * g1.frobenius_norm().max(1.0));
        let mut comb = g1.clone();
        comb.axpy(a, &g2).unwrap();
        let mut expect = p1.clone();
        expect.axpy(a, &tangent_project(&st, &g2).unwrap()).unwrap();
        let got = tangent_project(&st, &comb).unwrap();
        prop_assert!(got.sub(&expect).unwrap().frobenius_norm() < 1e-11 * comb.frobenius_norm().max(1.0));
        // Self-adjoint: ⟨P g1, g2⟩ = ⟨g1, P g2⟩.
        let lhs = p1.inner(&g2).unwrap();
        let rhs = g1.inner(&tangent_project(&st, &g2).unwrap()).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(seeds in prop::collection::vec(0u64..1000, 0..4)) {
        let states: Vec<LowRankState> = seeds.iter().enumerate()
            .map(|(i, &s)| init_lowrank(5 + i, 4 + i, 1 + i % 3, s).unwrap())
            .collect();
        let mut buf = Vec::new();
        write_states(&mut buf, &states).unwrap();
        prop_assert_eq!(read_states(&mut buf.as_slice()).unwrap(), states);
    }

    #[test]
    fn truncation_error_equals_discarded_tail(seed in 0u64..1000, tau in 0.0..0.6f64) {
        let st = init_lowrank(10, 8, 6, seed).unwrap();
        let u_hat = st.u().clone();
        let l1 = Matrix::from_fn(8, 6, |i, j| (((i + 1) * (j + 2) + seed as usize) % 9) as f64 / (1.0 + j as f64));
        let p = TruncationPolicy::new(tau, 1, 6).unwrap();
        let t = truncate_state(&u_hat, &l1, &p).unwrap();
        let full = u_hat.matmul_nt(&l1).unwrap();
        let approx = t.k.matmul_nt(&t.v).unwrap();
        let err = full.sub(&approx).unwrap().frobenius_norm();
        prop_assert!((err - t.discarded).abs() < 1e-10 * full.frobenius_norm().max(1.0));
        prop_assert!(t.v.orthonormality_error() < 1e-12);
        prop_assert_eq!(t.rank, truncation_rank(&t.sigma, &p).unwrap());
    }
}

#[test]
fn truncation_of_wide_l() {
    // q > n: the L factor is first compressed by a QR of its transpose.
    let u_hat = Matrix::from_fn(12, 5, |i, j| if i == j { 1.0 } else { 0.0 });
    let l1 = Matrix::from_fn(3, 5, |i, j| (i * 5 + j) as f64 - 7.0);
    let t = truncate_state(&u_hat, &l1, &TruncationPolicy::new(0.0, 1, 10).unwrap()).unwrap();
    let full = u_hat.matmul_nt(&l1).unwrap();
    assert!(
        t.k.matmul_nt(&t.v)
            .unwrap()
            .sub(&full)
            .unwrap()
            .frobenius_norm()
            < 1e-12
    );
    assert!(t.rank <= 3);
}

#[test]
fn example_truncation_cases() {
    let p = TruncationPolicy::new(0.3, 1, 4).unwrap();
    assert_eq!(truncation_rank(&[4.0, 2.0, 1.0, 0.5], &p).unwrap(), 2);
    let p0 = TruncationPolicy::new(0.0, 1, 4).unwrap();
    assert_eq!(truncation_rank(&[3.0, 0.0, 0.0], &p0).unwrap(), 1);
    let clamp = TruncationPolicy::new(0.9, 2, 4).unwrap();
    assert_eq!(truncation_rank(&[5.0, 1.0, 1.0], &clamp).unwrap(), 2);
}
