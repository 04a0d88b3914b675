//! Source training of both branches with Adam on every parameter.

use std::sync::Arc;

use crate::batchnorm::{batch_statistics, batchnorm_forward, BnMode};
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::eval::evaluate_pair;
use crate::harness::metrics::SegmentationScores;
use crate::model::{Architecture, BranchNet, Role};
use crate::rng;
use crate::synth::{Dataset, MultiModalBatch};
use crate::tape::{GradTape, Gradients};
use crate::tensor::{linear_forward, relu, softmax_rows, Tensor};

const INIT_STREAM_2D: u64 = 100;
const INIT_STREAM_3D: u64 = 101;
const ORDER_STREAM: u64 = 200;
const LABEL_STREAM: u64 = 300;

struct Adam {
    lr: f32,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    const BETA1: f32 = 0.9;
    const BETA2: f32 = 0.999;
    const EPS: f32 = 1e-8;

    fn new(lr: f64) -> Self {
        Self {
            lr: lr as f32,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Parameters and gradients in a fixed order: every linear layer's
    /// weight and bias, then every normalization layer's gamma and beta.
    fn step(&mut self, net: &mut BranchNet, grads: &Gradients) -> Result<()> {
        let mut gs: Vec<&[f32]> = Vec::new();
        for l in 0..net.layers().len() {
            let g = grads
                .linear
                .get(&l)
                .ok_or_else(|| Error::Numeric(format!("missing gradient for layer {l}")))?;
            gs.push(g.weight.data());
            gs.push(&g.bias);
        }
        for l in 0..net.bn_states().len() {
            let g = grads
                .affine
                .get(&l)
                .ok_or_else(|| Error::Numeric(format!("missing gradient for norm {l}")))?;
            gs.push(&g.gamma);
            gs.push(&g.beta);
        }
        if self.m.is_empty() {
            self.m = gs.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let mut params: Vec<&mut [f32]> = Vec::new();
        for layer in net.layers_mut() {
            params.push(Arc::make_mut(&mut layer.weight).data_mut());
            params.push(Arc::make_mut(&mut layer.bias).data_mut());
        }
        let mut idx = 0;
        for p in params {
            self.update(idx, p, gs[idx]);
            idx += 1;
        }
        for bn in net.bn_states_mut() {
            self.update(idx, bn.gamma_mut(), gs[idx]);
            self.update(idx + 1, bn.beta_mut(), gs[idx + 1]);
            idx += 2;
        }
        Ok(())
    }

    fn update(&mut self, idx: usize, p: &mut [f32], g: &[f32]) {
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
        for i in 0..p.len() {
            m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * g[i];
            v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            p[i] -= self.lr * mhat / (vhat.sqrt() + Self::EPS);
        }
    }
}

/// Mean cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy_with_grad(logits: &Tensor, labels: &[usize]) -> (f64, Tensor) {
    let p = softmax_rows(logits);
    let n = labels.len() as f32;
    let mut loss = 0.0f64;
    let mut grad = p.clone();
    for (i, &y) in labels.iter().enumerate() {
        loss -= (p.get(i, y).max(1e-12) as f64).ln();
        let row = grad.row_mut(i);
        row[y] -= 1.0;
        for g in row.iter_mut() {
            *g /= n;
        }
    }
    (loss / labels.len() as f64, grad)
}

/// Replaces every stored mean and deviation by the statistics of the whole
/// of `x`, layer by layer, so later layers see normalized inputs.
pub fn set_population_statistics(net: &mut BranchNet, x: &Tensor) -> Result<()> {
    let depth = net.bn_states().len();
    let mut h = x.clone();
    for l in 0..depth {
        let layer = net.layers()[l].clone();
        h = linear_forward(&h, &layer.weight, &layer.bias)?;
        let (mu, sigma) = batch_statistics(&h)?;
        let bn = &mut net.bn_states_mut()[l];
        bn.set_stats(mu, sigma)?;
        h = relu(&batchnorm_forward(&h, bn, BnMode::StoredStats)?);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    /// Mean training loss (2D + 3D) per epoch.
    pub epoch_losses: Vec<f64>,
    pub source_test: SegmentationScores,
}

/// Splits off the last `fraction` of the frames as a test set.
pub fn split_source(data: &Dataset, fraction: f64) -> (Dataset, Dataset) {
    let n = data.len();
    let test = ((n as f64 * fraction).round() as usize).clamp(usize::from(n > 1), n.saturating_sub(1));
    (data.slice(0..n - test), data.slice(n - test..n))
}

fn shuffled_labels(train: &Dataset, seed: u64) -> Dataset {
    let mut out = train.clone();
    let mut r = rng::stream(seed, LABEL_STREAM);
    for frame in &mut out.frames {
        for y in frame.labels.iter_mut() {
            *y = rng::below(&mut r, train.classes);
        }
    }
    out
}

/// Trains both branches on the source training split, then sets population
/// statistics and scores the held-out source frames.
pub fn pretrain(config: &ExperimentConfig, source: &Dataset) -> Result<(BranchNet, BranchNet, PretrainReport)> {
    config.validate()?;
    let (f2, f3, _) = source.widths();
    let (train, test) = split_source(source, config.source_test_fraction);
    if train.is_empty() {
        return Err(Error::Config("no source frames to train on".into()));
    }
    let train = if config.shuffle_labels {
        shuffled_labels(&train, config.adapt.seed)
    } else {
        train
    };
    let seed = config.adapt.seed;
    let k = source.classes;
    let mut net2d = BranchNet::init(Architecture::desk_scale(f2, k), Role::Source, &mut rng::stream(seed, INIT_STREAM_2D));
    let mut net3d = BranchNet::init(Architecture::desk_scale(f3, k), Role::Source, &mut rng::stream(seed, INIT_STREAM_3D));
    let mut adam2d = Adam::new(config.pretrain_lr);
    let mut adam3d = Adam::new(config.pretrain_lr);
    let mut order_rng = rng::stream(seed, ORDER_STREAM);
    let mut epoch_losses = Vec::with_capacity(config.pretrain_epochs);
    for epoch in 0..config.pretrain_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        rng::shuffle(&mut order_rng, &mut order);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.pretrain_batch_frames) {
            let parts: Vec<&MultiModalBatch> = chunk.iter().map(|&i| &train.frames[i]).collect();
            let batch = MultiModalBatch::concat(&parts)?;
            for (net, adam, x) in [
                (&mut net2d, &mut adam2d, &batch.x2d),
                (&mut net3d, &mut adam3d, &batch.x3d),
            ] {
                let mut tape = GradTape::new();
                let logits = net.logits_taped(x, BnMode::BatchStats, &mut tape, true)?;
                let (loss, grad) = cross_entropy_with_grad(&logits, &batch.labels);
                let grads = tape.backward(&grad)?;
                if !loss.is_finite() || !grads.is_finite() {
                    return Err(Error::Numeric(format!(
                        "pretraining diverged in epoch {epoch} (seed {seed}, lr {})",
                        config.pretrain_lr
                    )));
                }
                adam.step(net, &grads)?;
                total += loss;
            }
            batches += 1;
        }
        epoch_losses.push(total / batches.max(1) as f64);
    }
    let all = train.stacked()?;
    set_population_statistics(&mut net2d, &all.x2d)?;
    set_population_statistics(&mut net3d, &all.x3d)?;
    let source_test = evaluate_pair(&net2d, &net3d, &test, BnMode::StoredStats)?;
    Ok((
        net2d,
        net3d,
        PretrainReport {
            epoch_losses,
            source_test,
        },
    ))
}
