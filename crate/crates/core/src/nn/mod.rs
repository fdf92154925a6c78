//! Feed-forward network with dense and factored layers.
//!
//! A layer computes `a = σ(x·Wᵀ + b)` on row-major batches `x` (`b x in`),
//! with `W` stored `out x in`. Factored layers are evaluated through a pair
//! `W = left · rightᵀ` (`out x k`, `in x k`) without forming `W`, and their
//! gradients are kept as the batch factors `G = δᵀx` so the integrators can
//! contract them with either side.

pub mod checkpoint;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::Dataset;
use crate::error::{dim_err, DlrtError, Result};
use crate::linalg::{householder_qr, Matrix};
use crate::lowrank::{gaussian, LowRankState};

pub use train::{
    train, train_step, BatchOracle, EpochRecord, TrainConfig, TrainOutcome, TrainStatus,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: &Matrix) -> Matrix {
        match self {
            Activation::Identity => z.clone(),
            Activation::Relu => {
                let mut a = z.clone();
                a.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
                a
            }
        }
    }

    /// `d ⊙ σ'(z)` in place.
    fn backprop(self, z: &Matrix, d: &mut Matrix) {
        if self == Activation::Relu {
            for (d, z) in d.as_mut_slice().iter_mut().zip(z.as_slice()) {
                if *z <= 0.0 {
                    *d = 0.0;
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Dense,
    LowRank { initial_rank: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn dense(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            kind: LayerKind::Dense,
            in_dim,
            out_dim,
            activation,
        }
    }

    pub fn lowrank(in_dim: usize, out_dim: usize, rank: usize, activation: Activation) -> Self {
        Self {
            kind: LayerKind::LowRank { initial_rank: rank },
            in_dim,
            out_dim,
            activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 {
            return Err(DlrtError::InvalidArgument(format!(
                "layer dims must be positive, got {}x{}",
                self.out_dim, self.in_dim
            )));
        }
        if let LayerKind::LowRank { initial_rank: r } = self.kind {
            if r == 0 || r > self.in_dim.min(self.out_dim) {
                return Err(DlrtError::InvalidRank(format!(
                    "initial rank {r} for a {}x{} layer",
                    self.out_dim, self.in_dim
                )));
            }
        }
        Ok(())
    }
}

/// Specs for an MLP with the given widths: ReLU hidden layers, identity
/// output. With `rank = Some(r)` every layer is factored with initial rank
/// `min(r, out, in)`; otherwise every layer is dense.
pub fn mlp(widths: &[usize], rank: Option<usize>) -> Vec<LayerSpec> {
    let n = widths.len().saturating_sub(1);
    (0..n)
        .map(|i| {
            let (a, b) = (widths[i], widths[i + 1]);
            let act = if i + 1 == n {
                Activation::Identity
            } else {
                Activation::Relu
            };
            match rank {
                Some(r) => LayerSpec::lowrank(a, b, r.min(a).min(b), act),
                None => LayerSpec::dense(a, b, act),
            }
        })
        .collect()
}

/// Weights of one layer, `out x in`.
#[derive(Clone, Debug, PartialEq)]
pub enum Weights {
    Dense(Matrix),
    LowRank(LowRankState),
}

impl Weights {
    /// `(out, in)`.
    pub fn dims(&self) -> (usize, usize) {
        match self {
            Weights::Dense(w) => w.shape(),
            Weights::LowRank(s) => s.dims(),
        }
    }

    pub fn rank(&self) -> Option<usize> {
        match self {
            Weights::Dense(_) => None,
            Weights::LowRank(s) => Some(s.rank()),
        }
    }

    pub fn to_dense(&self) -> Matrix {
        match self {
            Weights::Dense(w) => w.clone(),
            Weights::LowRank(s) => s.to_dense(),
        }
    }

    /// Stored entries: `out·in` dense, `(out+in)·r + r²` factored.
    pub fn param_count(&self) -> usize {
        let (m, n) = self.dims();
        match self.rank() {
            None => m * n,
            Some(r) => (m + n) * r + r * r,
        }
    }

    /// Frobenius norm of the coefficient part (`S` or `W`).
    fn coefficient_norm(&self) -> f64 {
        match self {
            Weights::Dense(w) => w.frobenius_norm(),
            Weights::LowRank(s) => s.s().frobenius_norm(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weights: Weights,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn dims(&self) -> (usize, usize) {
        self.weights.dims()
    }
}

/// How a layer's weight enters a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum WeightView<'a> {
    Dense(&'a Matrix),
    /// `W = left · rightᵀ`.
    Factored(&'a Matrix, &'a Matrix),
}

impl WeightView<'_> {
    fn dims(&self) -> (usize, usize) {
        match self {
            WeightView::Dense(w) => w.shape(),
            WeightView::Factored(l, r) => (l.rows(), r.rows()),
        }
    }

    /// `x · Wᵀ`.
    fn apply(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            WeightView::Dense(w) => x.matmul_nt(w),
            WeightView::Factored(l, r) => x.matmul(r)?.matmul_nt(l),
        }
    }

    /// `δ · W`.
    fn apply_transpose(&self, d: &Matrix) -> Result<Matrix> {
        match self {
            WeightView::Dense(w) => d.matmul(w),
            WeightView::Factored(l, r) => d.matmul(l)?.matmul_nt(r),
        }
    }
}

/// Activations recorded by [`forward`] for the matching [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
    dims: Vec<(usize, usize)>,
}

/// Gradient of the batch loss for one layer, held as `G = deltaᵀ · input`.
#[derive(Clone, Debug)]
pub struct LayerGrad {
    /// `b x out`.
    pub delta: Matrix,
    /// `b x in`.
    pub input: Matrix,
    pub bias: Vec<f64>,
}

impl LayerGrad {
    /// `G`, `out x in`.
    pub fn full(&self) -> Matrix {
        self.delta.matmul_tn(&self.input).expect("cached shapes")
    }

    /// `G · v = δᵀ(x v)` for `v` of shape `in x k`.
    pub fn times_right(&self, v: &Matrix) -> Result<Matrix> {
        self.delta.matmul_tn(&self.input.matmul(v)?)
    }

    /// `Gᵀ · u = xᵀ(δ u)` for `u` of shape `out x k`.
    pub fn transpose_times_left(&self, u: &Matrix) -> Result<Matrix> {
        self.input.matmul_tn(&self.delta.matmul(u)?)
    }
}

#[derive(Clone, Debug)]
pub struct BatchGrad {
    pub layers: Vec<LayerGrad>,
}

/// Forward pass with explicit weight views; `layers` supplies biases and
/// activations.
pub fn forward(
    layers: &[Layer],
    views: &[WeightView],
    x: &Matrix,
) -> Result<(Matrix, ForwardCache)> {
    if views.len() != layers.len() {
        return Err(dim_err(
            "forward",
            format!("{} views for {} layers", views.len(), layers.len()),
        ));
    }
    let mut cache = ForwardCache {
        inputs: Vec::with_capacity(layers.len()),
        pre: Vec::with_capacity(layers.len()),
        dims: Vec::with_capacity(layers.len()),
    };
    let mut a = x.clone();
    for (i, (layer, view)) in layers.iter().zip(views).enumerate() {
        let (m, n) = view.dims();
        if a.cols() != n || layer.bias.len() != m {
            return Err(dim_err(
                "forward",
                format!(
                    "layer {i}: input width {}, weight {m}x{n}, bias {}",
                    a.cols(),
                    layer.bias.len()
                ),
            ));
        }
        let mut z = view.apply(&a)?;
        for r in 0..z.rows() {
            z.row_mut(r)
                .iter_mut()
                .zip(&layer.bias)
                .for_each(|(v, b)| *v += b);
        }
        if !z.is_finite() {
            return Err(DlrtError::NonFinite("forward activation"));
        }
        let next = layer.activation.apply(&z);
        cache.inputs.push(a);
        cache.pre.push(z);
        cache.dims.push((m, n));
        a = next;
    }
    Ok((a, cache))
}

/// Exact gradients of the batch loss given `dlogits = ∂ℓ/∂logits`.
pub fn backward(
    layers: &[Layer],
    views: &[WeightView],
    cache: &ForwardCache,
    dlogits: &Matrix,
) -> Result<BatchGrad> {
    let fresh = views.len() == layers.len()
        && cache.dims.len() == layers.len()
        && views.iter().zip(&cache.dims).all(|(v, d)| v.dims() == *d)
        && cache
            .pre
            .last()
            .is_some_and(|z| z.shape() == dlogits.shape());
    if !fresh {
        return Err(dim_err(
            "backward",
            "cache does not match the weights or dlogits",
        ));
    }
    let mut grads = Vec::with_capacity(layers.len());
    let mut d = dlogits.clone();
    for i in (0..layers.len()).rev() {
        layers[i].activation.backprop(&cache.pre[i], &mut d);
        let mut bias = vec![0.0; d.cols()];
        for r in 0..d.rows() {
            bias.iter_mut().zip(d.row(r)).for_each(|(b, v)| *b += v);
        }
        let next = if i > 0 {
            views[i].apply_transpose(&d)?
        } else {
            Matrix::zeros(0, 0)
        };
        let delta = std::mem::replace(&mut d, next);
        grads.push(LayerGrad {
            delta,
            input: cache.inputs[i].clone(),
            bias,
        });
    }
    grads.reverse();
    Ok(BatchGrad { layers: grads })
}

/// Mean softmax cross-entropy and its gradient `(softmax − onehot)/b`.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (b, c) = logits.shape();
    if labels.len() != b {
        return Err(dim_err(
            "softmax_cross_entropy",
            format!("{b} rows, {} labels", labels.len()),
        ));
    }
    let mut d = Matrix::zeros(b, c);
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(DlrtError::LabelRange {
                label: y,
                classes: c,
            });
        }
        let row = logits.row(i);
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|z| (z - mx).exp()).sum();
        let lse = mx + sum.ln();
        total += lse - row[y];
        for (j, dv) in d.row_mut(i).iter_mut().enumerate() {
            *dv = (row[j] - lse).exp() / b as f64;
        }
        d.row_mut(i)[y] -= 1.0 / b as f64;
    }
    let loss = total / b.max(1) as f64;
    if !loss.is_finite() {
        return Err(DlrtError::NonFinite("softmax_cross_entropy loss"));
    }
    Ok((loss, d))
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = logits.row(i);
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best == y
        })
        .count();
    hits as f64 / labels.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
}

const EVAL_CHUNK: usize = 1000;

impl Network {
    /// Checks that dimensions chain and biases match.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(DlrtError::InvalidArgument(
                "network needs at least one layer".into(),
            ));
        }
        for (i, l) in layers.iter().enumerate() {
            let (m, _) = l.dims();
            if l.bias.len() != m {
                return Err(dim_err(
                    "Network",
                    format!("layer {i}: bias {} for {m} outputs", l.bias.len()),
                ));
            }
            if i > 0 && layers[i - 1].dims().0 != l.dims().1 {
                return Err(dim_err(
                    "Network",
                    format!(
                        "layer {i} expects {} inputs, previous layer gives {}",
                        l.dims().1,
                        layers[i - 1].dims().0
                    ),
                ));
            }
        }
        Ok(Self { layers })
    }

    /// Seeded initialization with zero biases.
    ///
    /// Dense layers: entries `N(0, g/in)` with `g = 2` after a ReLU layer
    /// and 1 otherwise. Factored layers: `U` is the Q factor of a Gaussian
    /// draw; `V` reuses the previous factored layer's `U` (completed with
    /// random orthonormal columns when the rank grows), so the subspace a
    /// layer writes to is the one the next layer reads from; `S = g·I` with
    /// the same gain `g`. A ReLU keeps about half of a sign-symmetric signal
    /// inside the producing basis, which the factor 2 restores. The input
    /// layer, having no predecessor, gets a random `V` and `S = I`.
    pub fn init(specs: &[LayerSpec], seed: u64) -> Result<Self> {
        for s in specs {
            s.validate()?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(specs.len());
        let mut prev: Option<(Activation, Option<Matrix>)> = None;
        for s in specs {
            let g = match prev {
                Some((Activation::Relu, _)) => 2.0,
                _ => 1.0,
            };
            let (weights, basis) = match s.kind {
                LayerKind::Dense => {
                    let dist =
                        Normal::new(0.0, (g / s.in_dim as f64).sqrt()).expect("positive std");
                    (
                        Weights::Dense(Matrix::from_fn(s.out_dim, s.in_dim, |_, _| {
                            dist.sample(&mut rng)
                        })),
                        None,
                    )
                }
                LayerKind::LowRank { initial_rank: r } => {
                    let u = householder_qr(&gaussian(s.out_dim, r, &mut rng))?.q;
                    let v = match prev.as_ref().and_then(|(_, b)| b.as_ref()) {
                        Some(b) if b.cols() >= r => b.leading_columns(r),
                        Some(b) => {
                            let extra = gaussian(s.in_dim, r - b.cols(), &mut rng);
                            householder_qr(&Matrix::hcat(b, &extra)?)?.q
                        }
                        None => householder_qr(&gaussian(s.in_dim, r, &mut rng))?.q,
                    };
                    let state = LowRankState::new(u, Matrix::diag(&vec![g; r]), v)?;
                    let basis = state.u().clone();
                    (Weights::LowRank(state), Some(basis))
                }
            };
            layers.push(Layer {
                weights,
                bias: vec![0.0; s.out_dim],
                activation: s.activation,
            });
            prev = Some((s.activation, basis));
        }
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].dims().1
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].dims().0
    }

    /// Rank of every factored layer, in order.
    pub fn ranks(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| l.weights.rank())
            .collect()
    }

    pub fn has_lowrank(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l.weights, Weights::LowRank(_)))
    }

    /// Stored weight entries (biases excluded).
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.param_count()).sum()
    }

    /// `(1 − Σ stored/Σ dense) · 100`, counting `(out+in)·r` entries for a
    /// factored layer and `out·in` for a dense one.
    pub fn compression_rate(&self) -> f64 {
        let mut stored = 0usize;
        let mut dense = 0usize;
        for l in &self.layers {
            let (m, n) = l.dims();
            dense += m * n;
            stored += l.weights.rank().map_or(m * n, |r| (m + n) * r);
        }
        (1.0 - stored as f64 / dense as f64) * 100.0
    }

    /// Largest coefficient norm over layers (`‖S‖` or `‖W‖`).
    pub fn max_coefficient_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weights.coefficient_norm())
            .fold(0.0, f64::max)
    }

    /// The same network with every factored layer materialized.
    pub fn densified(&self) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|l| Layer {
                weights: Weights::Dense(l.weights.to_dense()),
                ..l.clone()
            })
            .collect();
        Self { layers }
    }

    /// `(K, V)` with `K = US` for each factored layer, `None` for dense ones.
    fn factored_pairs(&self) -> Vec<Option<(Matrix, Matrix)>> {
        self.layers
            .iter()
            .map(|l| match &l.weights {
                Weights::Dense(_) => None,
                Weights::LowRank(s) => Some((s.k(), s.v().clone())),
            })
            .collect()
    }

    fn views<'a>(&'a self, pairs: &'a [Option<(Matrix, Matrix)>]) -> Vec<WeightView<'a>> {
        self.layers
            .iter()
            .zip(pairs)
            .map(|(l, p)| match (&l.weights, p) {
                (_, Some((k, v))) => WeightView::Factored(k, v),
                (Weights::Dense(w), None) => WeightView::Dense(w),
                (Weights::LowRank(_), None) => unreachable!("pairs built from the same layers"),
            })
            .collect()
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
        let pairs = self.factored_pairs();
        forward(&self.layers, &self.views(&pairs), x)
    }

    /// Batch loss and gradients at the current weights.
    pub fn loss_and_grad(&self, x: &Matrix, labels: &[usize]) -> Result<(f64, BatchGrad)> {
        let pairs = self.factored_pairs();
        let views = self.views(&pairs);
        let (logits, cache) = forward(&self.layers, &views, x)?;
        let (loss, d) = softmax_cross_entropy(&logits, labels)?;
        Ok((loss, backward(&self.layers, &views, &cache, &d)?))
    }

    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x)?.0)
    }

    /// Accuracy and mean loss over `data`, evaluated in chunks.
    pub fn evaluate_full(&self, data: &Dataset) -> Result<(f64, f64)> {
        let n = data.len();
        if n == 0 {
            return Ok((0.0, 0.0));
        }
        let (mut hits, mut loss) = (0.0, 0.0);
        for start in (0..n).step_by(EVAL_CHUNK) {
            let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
            let x = data.images().select_rows(&idx);
            let y: Vec<usize> = idx.iter().map(|&i| data.labels()[i]).collect();
            let logits = self.predict(&x)?;
            hits += accuracy(&logits, &y) * y.len() as f64;
            loss += softmax_cross_entropy(&logits, &y)?.0 * y.len() as f64;
        }
        Ok((hits / n as f64, loss / n as f64))
    }

    pub fn evaluate(&self, data: &Dataset) -> Result<f64> {
        Ok(self.evaluate_full(data)?.0)
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }
}
