//! Helpers shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use dlrt_core::linalg::Matrix;
use dlrt_core::nn::{
    backward, forward, softmax_cross_entropy, Activation, Layer, LayerSpec, Network, WeightView,
    Weights,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random small network mixing dense and factored layers, with random
/// biases, plus a batch and labels.
pub fn tiny_problem(seed: u64) -> (Network, Matrix, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = rng.gen_range(1..=3);
    let widths: Vec<usize> = (0..=depth).map(|_| rng.gen_range(2..=6)).collect();
    let specs: Vec<LayerSpec> = (0..depth)
        .map(|i| {
            let (a, b) = (widths[i], widths[i + 1]);
            let act = if i + 1 == depth {
                Activation::Identity
            } else {
                Activation::Relu
            };
            if rng.gen_bool(0.6) {
                LayerSpec::lowrank(a, b, rng.gen_range(1..=a.min(b)), act)
            } else {
                LayerSpec::dense(a, b, act)
            }
        })
        .collect();
    let net = Network::init(&specs, seed).unwrap();
    let layers = net
        .layers()
        .iter()
        .map(|l| Layer {
            bias: l.bias.iter().map(|_| rng.gen_range(-0.5..0.5)).collect(),
            ..l.clone()
        })
        .collect();
    let net = Network::from_layers(layers).unwrap();
    let b = rng.gen_range(1..=5);
    let x = Matrix::from_fn(b, widths[0], |_, _| rng.gen_range(-1.0..1.0));
    let labels = (0..b).map(|_| rng.gen_range(0..widths[depth])).collect();
    (net, x, labels)
}

/// How factored layers are presented to the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    /// `W = K Vᵀ`, `K = U S`.
    K,
    /// `W = U Lᵀ`, `L = V Sᵀ`.
    L,
}

fn factors(net: &Network, split: Split) -> Vec<Option<(Matrix, Matrix)>> {
    net.layers()
        .iter()
        .map(|l| match &l.weights {
            Weights::Dense(_) => None,
            Weights::LowRank(s) => Some(match split {
                Split::K => (s.k(), s.v().clone()),
                Split::L => (s.u().clone(), s.v().matmul_nt(s.s()).unwrap()),
            }),
        })
        .collect()
}

fn loss_at(
    layers: &[Layer],
    fac: &[Option<(Matrix, Matrix)>],
    x: &Matrix,
    labels: &[usize],
) -> f64 {
    let views: Vec<WeightView> = layers
        .iter()
        .zip(fac)
        .map(|(l, f)| match (&l.weights, f) {
            (_, Some((a, b))) => WeightView::Factored(a, b),
            (Weights::Dense(w), None) => WeightView::Dense(w),
            _ => unreachable!(),
        })
        .collect();
    let (logits, _) = forward(layers, &views, x).unwrap();
    softmax_cross_entropy(&logits, labels).unwrap().0
}

/// Largest normwise relative error between central differences and the
/// backward pass over every parameter group: dense weights, biases, and the
/// free factor (`K` or `L`) of each factored layer.
pub fn finite_difference_error(net: &Network, x: &Matrix, labels: &[usize], split: Split) -> f64 {
    const EPS: f64 = 1e-6;
    let mut layers = net.layers().to_vec();
    let mut fac = factors(net, split);

    let views: Vec<WeightView> = layers
        .iter()
        .zip(&fac)
        .map(|(l, f)| match (&l.weights, f) {
            (_, Some((a, b))) => WeightView::Factored(a, b),
            (Weights::Dense(w), None) => WeightView::Dense(w),
            _ => unreachable!(),
        })
        .collect();
    let (logits, cache) = forward(&layers, &views, x).unwrap();
    let (_, d) = softmax_cross_entropy(&logits, labels).unwrap();
    let grad = backward(&layers, &views, &cache, &d).unwrap();
    drop(views);

    let rel = |fd: &[f64], an: &[f64]| {
        let diff: f64 = fd
            .iter()
            .zip(an)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale: f64 = an.iter().map(|a| a * a).sum::<f64>().sqrt();
        diff / scale.max(1e-6)
    };

    let mut worst: f64 = 0.0;
    for i in 0..layers.len() {
        // Weights.
        let analytic = match &fac[i] {
            None => grad.layers[i].full(),
            Some((l, r)) => match split {
                Split::K => grad.layers[i].times_right(r).unwrap(),
                Split::L => grad.layers[i].transpose_times_left(l).unwrap(),
            },
        };
        let mut fd = vec![0.0; analytic.as_slice().len()];
        for (j, slot) in fd.iter_mut().enumerate() {
            let probe =
                |delta: f64, layers: &mut Vec<Layer>, fac: &mut Vec<Option<(Matrix, Matrix)>>| {
                    match (&mut fac[i], &mut layers[i].weights) {
                        (Some((l, r)), _) => {
                            let m = if split == Split::K { l } else { r };
                            m.as_mut_slice()[j] += delta;
                        }
                        (None, Weights::Dense(w)) => w.as_mut_slice()[j] += delta,
                        _ => unreachable!(),
                    }
                    loss_at(layers, fac, x, labels)
                };
            let plus = probe(EPS, &mut layers, &mut fac);
            let minus = probe(-2.0 * EPS, &mut layers, &mut fac);
            probe(EPS, &mut layers, &mut fac);
            *slot = (plus - minus) / (2.0 * EPS);
        }
        worst = worst.max(rel(&fd, analytic.as_slice()));

        // Bias.
        let mut fd = vec![0.0; layers[i].bias.len()];
        for (j, slot) in fd.iter_mut().enumerate() {
            layers[i].bias[j] += EPS;
            let plus = loss_at(&layers, &fac, x, labels);
            layers[i].bias[j] -= 2.0 * EPS;
            let minus = loss_at(&layers, &fac, x, labels);
            layers[i].bias[j] += EPS;
            *slot = (plus - minus) / (2.0 * EPS);
        }
        worst = worst.max(rel(&fd, &grad.layers[i].bias));
    }
    worst
}
