/// `(input, output, rank)` of one factored layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub input: usize,
    pub output: usize,
    pub rank: usize,
}

impl LayerShape {
    pub fn new(input: usize, output: usize, rank: usize) -> Self {
        Self {
            input,
            output,
            rank,
        }
    }
}

/// `(1 − Σ(iₗ+oₗ)·rₗ / Σ iₗ·oₗ) · 100`. Negative when the factors hold more
/// entries than the dense matrices would.
pub fn compression_rate(layers: &[LayerShape]) -> f64 {
    let factored: usize = layers.iter().map(|l| (l.input + l.output) * l.rank).sum();
    let dense: usize = layers.iter().map(|l| l.input * l.output).sum();
    (1.0 - factored as f64 / dense as f64) * 100.0
}

/// Entries of `U`, `S` and `V` summed over layers: `Σ mₗrₗ + nₗrₗ + rₗ²`.
pub fn param_count(layers: &[LayerShape]) -> usize {
    layers
        .iter()
        .map(|l| (l.input + l.output) * l.rank + l.rank * l.rank)
        .sum()
}
