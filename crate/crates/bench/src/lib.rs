//! Inputs shared by the criterion benches in `benches/`.

use dlrt_core::linalg::Matrix;
use dlrt_core::lowrank::{init_lowrank, LowRankState};
use dlrt_core::nn::{mlp, Network};
use dlrt_core::QuadraticLoss;

/// Deterministic dense matrix with entries in `[-1, 1)`.
pub fn matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut x = seed
        .wrapping_mul(6364136223846793005)
        .wrapping_add(1442695040888963407);
    Matrix::from_fn(rows, cols, |_, _| {
        x = x
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (x >> 11) as f64 / (1u64 << 52) as f64 - 1.0
    })
}

/// Rank-`r` start point and a quadratic loss with a dense target.
pub fn quadratic(m: usize, n: usize, r: usize) -> (LowRankState, QuadraticLoss) {
    (
        init_lowrank(m, n, r, 1).expect("valid rank"),
        QuadraticLoss::new(matrix(m, n, 2)),
    )
}

/// The 784-500-500-500-500-10 network with factored layers at `rank`, and a
/// batch of `batch` inputs in `[0, 1]` with labels.
pub fn mnist_net(rank: usize, batch: usize) -> (Network, Matrix, Vec<usize>) {
    let net =
        Network::init(&mlp(&[784, 500, 500, 500, 500, 10], Some(rank)), 1).expect("valid specs");
    let mut x = matrix(batch, 784, 3);
    x.as_mut_slice()
        .iter_mut()
        .for_each(|v| *v = 0.5 * (*v + 1.0));
    let labels = (0..batch).map(|i| i % 10).collect();
    (net, x, labels)
}
