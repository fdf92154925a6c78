use std::ops::ControlFlow;

use crate::data::{batches, Dataset};
use crate::error::{DlrtError, Result};
use crate::integrators::{lowrank_layers, Integrator, LayeredOracle, StepConfig};
use crate::linalg::Matrix;
use crate::lowrank::LowRankState;
use crate::nn::{
    backward, forward, softmax_cross_entropy, BatchGrad, Layer, Network, WeightView, Weights,
};

/// Batch-loss gradients for the factored layers of a network, evaluated with
/// every factored layer placed at the requested point and every dense layer
/// at its current weights. The first evaluation is remembered: it supplies
/// the pre-step loss and the gradients for dense weights and biases.
pub struct BatchOracle<'a> {
    layers: &'a [Layer],
    x: &'a Matrix,
    labels: &'a [usize],
    first: Option<(f64, BatchGrad)>,
    evaluations: usize,
}

impl<'a> BatchOracle<'a> {
    pub fn new(net: &'a Network, x: &'a Matrix, labels: &'a [usize]) -> Self {
        Self {
            layers: net.layers(),
            x,
            labels,
            first: None,
            evaluations: 0,
        }
    }

    /// Forward and backward passes performed so far.
    pub fn evaluations(&self) -> usize {
        self.evaluations
    }

    pub fn first_evaluation(&self) -> Option<&(f64, BatchGrad)> {
        self.first.as_ref()
    }

    fn into_first(self) -> Option<(f64, BatchGrad)> {
        self.first
    }

    /// Loss and gradients with factored layers at `points`, in layer order.
    pub fn evaluate(&mut self, points: &[(&Matrix, &Matrix)]) -> Result<(f64, BatchGrad)> {
        let mut pts = points.iter();
        let views = self
            .layers
            .iter()
            .map(|l| match &l.weights {
                Weights::Dense(w) => Ok(WeightView::Dense(w)),
                Weights::LowRank(_) => pts
                    .next()
                    .map(|(a, b)| WeightView::Factored(a, b))
                    .ok_or_else(|| DlrtError::InvalidArgument("too few factored points".into())),
            })
            .collect::<Result<Vec<_>>>()?;
        if pts.next().is_some() {
            return Err(DlrtError::InvalidArgument(
                "too many factored points".into(),
            ));
        }
        let (logits, cache) = forward(self.layers, &views, self.x)?;
        let (loss, d) = softmax_cross_entropy(&logits, self.labels)?;
        let grad = backward(self.layers, &views, &cache, &d)?;
        self.evaluations += 1;
        if self.first.is_none() {
            self.first = Some((loss, grad.clone()));
        }
        Ok((loss, grad))
    }

    fn factored_grads<'g>(
        &self,
        grad: &'g BatchGrad,
    ) -> impl Iterator<Item = &'g super::LayerGrad> + 'g {
        let kinds: Vec<bool> = self
            .layers
            .iter()
            .map(|l| matches!(l.weights, Weights::LowRank(_)))
            .collect();
        grad.layers
            .iter()
            .zip(kinds)
            .filter_map(|(g, f)| f.then_some(g))
    }
}

impl LayeredOracle for BatchOracle<'_> {
    fn kgrads(&mut self, points: &[(&Matrix, &Matrix)]) -> Result<Vec<Matrix>> {
        let (_, grad) = self.evaluate(points)?;
        self.factored_grads(&grad)
            .zip(points)
            .map(|(g, (_, v))| g.times_right(v))
            .collect()
    }

    fn lgrads(&mut self, points: &[(&Matrix, &Matrix)]) -> Result<Vec<Matrix>> {
        let (_, grad) = self.evaluate(points)?;
        self.factored_grads(&grad)
            .zip(points)
            .map(|(g, (u, _))| g.transpose_times_left(u))
            .collect()
    }
}

/// One optimization step on a mini-batch; returns the batch loss before the
/// step.
///
/// Factored layers are advanced together by `integrator`; dense weights and
/// all biases take a plain gradient step with the gradient at the starting
/// point. `Integrator::Full` requires a network without factored layers.
pub fn train_step(
    net: &mut Network,
    x: &Matrix,
    labels: &[usize],
    integrator: Integrator,
    cfg: &StepConfig,
) -> Result<f64> {
    cfg.validate()?;
    if integrator == Integrator::Full && net.has_lowrank() {
        return Err(DlrtError::InvalidArgument(
            "the full-rank integrator needs a network with dense layers only".into(),
        ));
    }
    let states: Vec<LowRankState> = net
        .layers()
        .iter()
        .filter_map(|l| match &l.weights {
            Weights::LowRank(s) => Some(s.clone()),
            Weights::Dense(_) => None,
        })
        .collect();

    let (new_states, (loss, grad)) = {
        let mut oracle = BatchOracle::new(net, x, labels);
        let new_states = if states.is_empty() {
            oracle.evaluate(&[])?;
            Vec::new()
        } else {
            let policies = vec![cfg.policy; states.len()];
            lowrank_layers(integrator, &states, &mut oracle, cfg, &policies)?
        };
        let first = oracle.into_first().expect("at least one evaluation");
        (new_states, first)
    };

    let mut fresh = new_states.into_iter();
    for (layer, g) in net.layers_mut().iter_mut().zip(&grad.layers) {
        match &mut layer.weights {
            Weights::Dense(w) => w.axpy(-cfg.h, &g.full())?,
            Weights::LowRank(s) => *s = fresh.next().expect("one state per factored layer"),
        }
        layer
            .bias
            .iter_mut()
            .zip(&g.bias)
            .for_each(|(b, gb)| *b -= cfg.h * gb);
    }
    Ok(loss)
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub integrator: Integrator,
    pub step: StepConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

/// Metrics after an epoch; epoch 0 describes the initial network.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Epoch 0: loss of the initial network over the training set; later:
    /// mean pre-step batch loss over the epoch.
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub ranks: Vec<usize>,
    pub param_count: usize,
    pub compression_rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainStatus {
    Completed,
    /// The epoch callback asked to stop after `epoch`.
    Stopped {
        epoch: usize,
    },
    Diverged {
        epoch: usize,
        batch: usize,
        reason: String,
    },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub status: TrainStatus,
}

/// Coefficient norm above which a run counts as diverged.
pub const DIVERGENCE_NORM: f64 = 1e12;

fn record(net: &Network, epoch: usize, train_loss: f64, test: &Dataset) -> Result<EpochRecord> {
    Ok(EpochRecord {
        epoch,
        train_loss,
        test_accuracy: net.evaluate(test)?,
        ranks: net.ranks(),
        param_count: net.param_count(),
        compression_rate: net.compression_rate(),
    })
}

/// Trains for `cfg.epochs` epochs, calling `on_epoch` after each record
/// (including the initial one); returning `ControlFlow::Break` ends the run
/// with [`TrainStatus::Stopped`]. A non-finite loss, a non-finite step or a
/// coefficient norm above [`DIVERGENCE_NORM`] stops the run with
/// [`TrainStatus::Diverged`]; records up to that point are kept.
pub fn train(
    net: &mut Network,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord) -> ControlFlow<()>,
) -> Result<TrainOutcome> {
    if cfg.batch_size == 0 {
        return Err(DlrtError::InvalidArgument("batch size must be ≥ 1".into()));
    }
    cfg.step.validate()?;
    let mut records = Vec::with_capacity(cfg.epochs + 1);
    let initial_loss = net.evaluate_full(train_set)?.1;
    let r0 = record(net, 0, initial_loss, test_set)?;
    let flow = on_epoch(&r0);
    records.push(r0);
    if flow.is_break() {
        return Ok(TrainOutcome {
            records,
            status: TrainStatus::Stopped { epoch: 0 },
        });
    }

    for epoch in 1..=cfg.epochs {
        let (mut sum, mut count) = (0.0, 0usize);
        for (b, idx) in batches(train_set.len(), cfg.batch_size, cfg.seed, epoch as u64)
            .iter()
            .enumerate()
        {
            let x = train_set.images().select_rows(idx);
            let y: Vec<usize> = idx.iter().map(|&i| train_set.labels()[i]).collect();
            let diverged = |reason: String| TrainOutcome {
                records: records.clone(),
                status: TrainStatus::Diverged {
                    epoch,
                    batch: b,
                    reason,
                },
            };
            let loss = match train_step(net, &x, &y, cfg.integrator, &cfg.step) {
                Ok(l) => l,
                Err(DlrtError::NonFinite(what)) => {
                    return Ok(diverged(format!("non-finite value in {what}")))
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Ok(diverged(format!("batch loss {loss}")));
            }
            let norm = net.max_coefficient_norm();
            if norm.is_nan() || norm > DIVERGENCE_NORM {
                return Ok(diverged(format!("coefficient norm {norm:e}")));
            }
            sum += loss * idx.len() as f64;
            count += idx.len();
        }
        let rec = record(net, epoch, sum / count.max(1) as f64, test_set)?;
        let flow = on_epoch(&rec);
        records.push(rec);
        if flow.is_break() {
            return Ok(TrainOutcome {
                records,
                status: TrainStatus::Stopped { epoch },
            });
        }
    }
    Ok(TrainOutcome {
        records,
        status: TrainStatus::Completed,
    })
}
