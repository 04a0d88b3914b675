//! Learning-rate stability and ablation sweeps. Every run starts from the
//! same source model; runs fan out over worker threads and results come back
//! in grid order.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::metrics::{mean_std, SegmentationScores};
use crate::harness::run::adapt_tolerant;
use crate::model::MultiModalModel;
use crate::synth::Dataset;
use crate::tta::Method;

/// 2D/3D learning-rate ratios of the stability grid, multiplied by a scale.
pub const LR_PATTERN: [(f64, f64); 4] = [(1.0, 2.4), (1.0, 24.0), (10.0, 24.0), (10.0, 240.0)];

/// Default scale: the first pair equals the default adaptation learning
/// rates, the others step up by 10x and 100x.
pub const DESK_LR_SCALE: f64 = 0.05;

pub const STABILITY_METHODS: [Method; 6] = [
    Method::Tent,
    Method::TentEns,
    Method::Xmuda,
    Method::XmudaPl,
    Method::MmttaHard,
    Method::MmttaSoft,
];

/// Pseudo-labelling variants, from fast-only argmax to the full method.
pub const ABLATION_VARIANTS: [Method; 9] = [
    Method::PlFast,
    Method::PlIntra,
    Method::Consensus,
    Method::ConsensusThr,
    Method::MergeThr,
    Method::MergeFastThr,
    Method::EntropySelect,
    Method::MmttaHard,
    Method::MmttaSoft,
];

pub const ABLATION_THETAS: [f64; 4] = [0.1, 0.3, 0.5, 0.7];
pub const ABLATION_LAMBDAS: [f64; 3] = [1.0, 0.99, 0.95];

pub fn lr_pairs(scale: f64) -> Vec<(f64, f64)> {
    LR_PATTERN.iter().map(|&(a, b)| (a * scale, b * scale)).collect()
}

/// Result of one adaptation run inside a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRun {
    pub method: Method,
    pub lr2d: f64,
    pub lr3d: f64,
    pub theta: f64,
    pub lambda: f64,
    pub scores: SegmentationScores,
    pub diverged_at: Option<usize>,
}

/// Runs every config from a fresh copy of `model`, using up to the
/// available parallelism. Output order follows `configs`.
pub fn run_grid(model: &MultiModalModel, target: &Dataset, configs: &[ExperimentConfig]) -> Result<Vec<SweepRun>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(configs.len()).max(1);
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<SweepRun>>>> = Mutex::new((0..configs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(config) = configs.get(i) else { break };
                let run = adapt_tolerant(model.clone(), target, config).map(|out| SweepRun {
                    method: config.adapt.method,
                    lr2d: config.adapt.lr2d,
                    lr3d: config.adapt.lr3d,
                    theta: config.adapt.theta,
                    lambda: config.adapt.lambda,
                    scores: out.metrics.scores,
                    diverged_at: out.diverged_at,
                });
                results.lock().expect("worker panicked")[i] = Some(run);
            });
        }
    });
    results
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilitySummary {
    pub method: Method,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LrSweep {
    pub runs: Vec<SweepRun>,
    pub summary: Vec<StabilitySummary>,
}

/// Adapts each method under each lr pair and summarizes the final ensemble
/// mIoU per method by its mean and population standard deviation.
pub fn sweep_lr(
    config: &ExperimentConfig,
    model: &MultiModalModel,
    target: &Dataset,
    methods: &[Method],
    pairs: &[(f64, f64)],
) -> Result<LrSweep> {
    if pairs.is_empty() || methods.is_empty() {
        return Err(Error::Config("sweep-lr needs at least one method and one lr pair".into()));
    }
    let mut configs = Vec::with_capacity(methods.len() * pairs.len());
    for &method in methods {
        for &(lr2d, lr3d) in pairs {
            let mut c = config.clone();
            c.adapt.method = method;
            c.adapt.lr2d = lr2d;
            c.adapt.lr3d = lr3d;
            c.validate()?;
            configs.push(c);
        }
    }
    let runs = run_grid(model, target, &configs)?;
    let summary = methods
        .iter()
        .zip(runs.chunks(pairs.len()))
        .map(|(&method, chunk)| {
            let (mean, std) = mean_std(&chunk.iter().map(|r| r.scores.miou_ens).collect::<Vec<_>>());
            StabilitySummary { method, mean, std }
        })
        .collect();
    Ok(LrSweep { runs, summary })
}

/// Which part of the ablation grid a row belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationGroup {
    Variant,
    Theta,
    Lambda,
}

impl AblationGroup {
    pub fn name(self) -> &'static str {
        match self {
            AblationGroup::Variant => "variant",
            AblationGroup::Theta => "theta",
            AblationGroup::Lambda => "lambda",
        }
    }
}

/// Cells of the ablation grid: every pseudo-labelling variant at the base
/// config, then hard/soft selection over the θ values and over the λ values.
pub fn ablation_grid(config: &ExperimentConfig) -> Vec<(AblationGroup, ExperimentConfig)> {
    let with = |method, theta, lambda| {
        let mut c = config.clone();
        c.adapt.method = method;
        c.adapt.theta = theta;
        c.adapt.lambda = lambda;
        c
    };
    let (theta, lambda) = (config.adapt.theta, config.adapt.lambda);
    let mut grid: Vec<_> = ABLATION_VARIANTS
        .iter()
        .map(|&m| (AblationGroup::Variant, with(m, theta, lambda)))
        .collect();
    for m in [Method::MmttaHard, Method::MmttaSoft] {
        grid.extend(ABLATION_THETAS.iter().map(|&t| (AblationGroup::Theta, with(m, t, lambda))));
    }
    for m in [Method::MmttaHard, Method::MmttaSoft] {
        grid.extend(ABLATION_LAMBDAS.iter().map(|&l| (AblationGroup::Lambda, with(m, theta, l))));
    }
    grid
}

pub fn sweep_ablation(
    config: &ExperimentConfig,
    model: &MultiModalModel,
    target: &Dataset,
) -> Result<Vec<(AblationGroup, SweepRun)>> {
    config.validate()?;
    let grid = ablation_grid(config);
    let configs: Vec<ExperimentConfig> = grid.iter().map(|(_, c)| c.clone()).collect();
    let runs = run_grid(model, target, &configs)?;
    Ok(grid.into_iter().map(|(g, _)| g).zip(runs).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_has_the_expected_cells() {
        let grid = ablation_grid(&ExperimentConfig::default());
        let count = |g| grid.iter().filter(|(x, _)| *x == g).count();
        assert_eq!(count(AblationGroup::Variant), 9);
        assert_eq!(count(AblationGroup::Theta), 8);
        assert_eq!(count(AblationGroup::Lambda), 6);
    }

    #[test]
    fn lr_pairs_keep_the_ratio_pattern() {
        let pairs = lr_pairs(0.5);
        assert_eq!(pairs[0], (0.5, 1.2));
        assert_eq!(pairs[3], (5.0, 120.0));
    }
}
