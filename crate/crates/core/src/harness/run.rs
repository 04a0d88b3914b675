//! One epoch of test-time adaptation over a target dataset.

use crate::batchnorm::BnMode;
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::eval::evaluate_pair;
use crate::harness::metrics::{MetricsTable, SegmentationScores};
use crate::model::MultiModalModel;
use crate::rng;
use crate::synth::{Dataset, MultiModalBatch};
use crate::tta::{adapt_step, Method};

const ADAPT_ORDER_STREAM: u64 = 400;

/// Number of pseudo-accuracy samples per epoch.
pub const ACCURACY_CHECKPOINTS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct StepRow {
    pub iteration: usize,
    pub points: usize,
    pub loss: f64,
    pub valid_fraction: Option<f64>,
    pub pseudo_correct: usize,
    pub pseudo_valid: usize,
    pub skipped: bool,
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub model: MultiModalModel,
    pub steps: Vec<StepRow>,
    pub metrics: MetricsTable,
    /// How often each target frame was fed to the model.
    pub visits: Vec<usize>,
    /// Step at which a tolerant run stopped on a non-finite update.
    pub diverged_at: Option<usize>,
}

/// Step boundaries over `total` points: `total / batch` steps, the last one
/// absorbing the remainder so no step has fewer than `batch` points.
fn step_ranges(total: usize, batch: usize) -> Vec<std::ops::Range<usize>> {
    if total < 2 {
        return Vec::new();
    }
    let steps = (total / batch).max(1);
    (0..steps)
        .map(|i| i * batch..if i + 1 == steps { total } else { (i + 1) * batch })
        .collect()
}

/// Pooled pseudo-label accuracy over ten equal windows of the epoch,
/// labelled by the last iteration of each window.
pub fn pseudo_accuracy_curve(steps: &[StepRow]) -> Vec<(usize, Option<f64>)> {
    let n = steps.len();
    if n == 0 {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(ACCURACY_CHECKPOINTS);
    let mut start = 0;
    for c in 1..=ACCURACY_CHECKPOINTS {
        let end = (c * n).div_ceil(ACCURACY_CHECKPOINTS);
        if end <= start {
            continue;
        }
        let window = &steps[start..end];
        let correct: usize = window.iter().map(|s| s.pseudo_correct).sum();
        let valid: usize = window.iter().map(|s| s.pseudo_valid).sum();
        out.push((window[window.len() - 1].iteration, (valid > 0).then(|| correct as f64 / valid as f64)));
        start = end;
    }
    out
}

/// Evaluation copy of an adapted model: the slow networks for methods that
/// keep one, the source for `source_only`, the fast networks otherwise.
pub fn evaluate_adapted(model: &MultiModalModel, data: &Dataset, config: &ExperimentConfig) -> Result<SegmentationScores> {
    let method = config.adapt.method;
    if method.uses_slow_model() {
        evaluate_pair(&model.branch2d.slow, &model.branch3d.slow, data, BnMode::StoredStats)
    } else if method == Method::SourceOnly {
        evaluate_pair(&model.branch2d.source, &model.branch3d.source, data, BnMode::StoredStats)
    } else {
        let mode = if config.eval_batch_stats {
            BnMode::BatchStats
        } else {
            BnMode::StoredStats
        };
        evaluate_pair(&model.branch2d.fast, &model.branch3d.fast, data, mode)
    }
}

/// Streams every target frame once in a seeded order, adapting on
/// consecutive `batch_size`-point slices, then evaluates on the whole target.
pub fn adapt(model: MultiModalModel, target: &Dataset, config: &ExperimentConfig) -> Result<AdaptOutcome> {
    run_epoch(model, target, config, false)
}

/// Like [`adapt`], but a non-finite update ends the epoch early and the
/// model is scored in its last finite state.
pub fn adapt_tolerant(model: MultiModalModel, target: &Dataset, config: &ExperimentConfig) -> Result<AdaptOutcome> {
    run_epoch(model, target, config, true)
}

fn run_epoch(mut model: MultiModalModel, target: &Dataset, config: &ExperimentConfig, tolerate: bool) -> Result<AdaptOutcome> {
    config.validate()?;
    model.reset();
    let mut order: Vec<usize> = (0..target.len()).collect();
    rng::shuffle(&mut rng::stream(config.adapt.seed, ADAPT_ORDER_STREAM), &mut order);
    let mut visits = vec![0usize; target.len()];
    for &i in &order {
        visits[i] += 1;
    }
    let mut steps = Vec::new();
    let mut diverged_at = None;
    if !target.is_empty() && config.adapt.method.adapts() {
        let parts: Vec<&MultiModalBatch> = order.iter().map(|&i| &target.frames[i]).collect();
        let stream = MultiModalBatch::concat(&parts)?;
        for (iteration, range) in step_ranges(stream.len(), config.adapt.batch_size).into_iter().enumerate() {
            let rows: Vec<usize> = range.collect();
            let x2d = stream.x2d.select_rows(&rows);
            let x3d = stream.x3d.select_rows(&rows);
            let truth: Vec<usize> = rows.iter().map(|&r| stream.labels[r]).collect();
            let report = match adapt_step(&mut model, &x2d, &x3d, Some(&truth), &config.adapt) {
                Err(Error::Numeric(_)) if tolerate => {
                    diverged_at = Some(iteration);
                    break;
                }
                other => other?,
            };
            steps.push(StepRow {
                iteration,
                points: rows.len(),
                loss: report.loss,
                valid_fraction: report.valid_fraction,
                pseudo_correct: report.pseudo_correct,
                pseudo_valid: report.pseudo_valid,
                skipped: report.skipped,
            });
        }
    }
    if visits.iter().any(|&v| v != 1) {
        return Err(Error::Numeric("a target frame was not visited exactly once".into()));
    }
    let scores = evaluate_adapted(&model, target, config)?;
    let fractions: Vec<f64> = steps.iter().filter_map(|s| s.valid_fraction).collect();
    let metrics = MetricsTable {
        scores,
        pseudo_accuracy: pseudo_accuracy_curve(&steps),
        valid_fraction: (!fractions.is_empty()).then(|| fractions.iter().sum::<f64>() / fractions.len() as f64),
    };
    Ok(AdaptOutcome {
        model,
        steps,
        metrics,
        visits,
        diverged_at,
    })
}
