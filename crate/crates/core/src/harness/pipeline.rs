//! Subcommand bodies: each reads what the config points at (or generates
//! and pretrains when nothing is given) and writes one output directory.

use std::path::Path;

use crate::batchnorm::BnMode;
use crate::error::Result;
use crate::harness::config::ExperimentConfig;
use crate::harness::eval::evaluate_pair;
use crate::harness::metrics::SegmentationScores;
use crate::harness::pretrain::{pretrain, PretrainReport};
use crate::harness::report::{self, write_provenance, write_text};
use crate::harness::run::{adapt, AdaptOutcome};
use crate::harness::sweep::{lr_pairs, sweep_ablation, sweep_lr, STABILITY_METHODS};
use crate::model::{decode_checkpoint, encode_checkpoint, BranchNet, MultiModalModel, Role};
use crate::synth::{generate, load_dataset, save_dataset, Dataset, Domain};

pub const SOURCE_FILE: &str = "source.mmds";
pub const TARGET_FILE: &str = "target.mmds";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const ADAPTED_FILE: &str = "adapted.bin";

pub fn dataset(config: &ExperimentConfig, domain: Domain) -> Result<Dataset> {
    let path = match domain {
        Domain::Source => config.source_path(),
        Domain::Target => config.target_path(),
    };
    match path {
        Some(p) => load_dataset(&p),
        None => generate(&config.scenario_spec()?, domain),
    }
}

/// A source network pair with its encoded checkpoint bytes.
pub struct SourceModel {
    pub net2d: BranchNet,
    pub net3d: BranchNet,
    pub checkpoint: Vec<u8>,
    /// Present when the pair was trained in this call.
    pub pretrain: Option<PretrainReport>,
}

impl SourceModel {
    pub fn model(&self) -> Result<MultiModalModel> {
        MultiModalModel::new(&self.net2d, &self.net3d)
    }
}

pub fn source_model(config: &ExperimentConfig) -> Result<SourceModel> {
    if let Some(path) = config.checkpoint_path() {
        let bytes = std::fs::read(&path).map_err(|e| crate::Error::io(&path, e))?;
        let (net2d, net3d) = decode_checkpoint(&bytes)?;
        return Ok(SourceModel {
            net2d,
            net3d,
            checkpoint: bytes,
            pretrain: None,
        });
    }
    let source = dataset(config, Domain::Source)?;
    let (net2d, net3d, report) = pretrain(config, &source)?;
    let checkpoint = encode_checkpoint(&net2d, &net3d)?;
    Ok(SourceModel {
        net2d,
        net3d,
        checkpoint,
        pretrain: Some(report),
    })
}

pub fn gen_data(config: &ExperimentConfig, out: &Path) -> Result<(Dataset, Dataset)> {
    let source = dataset(config, Domain::Source)?;
    let target = dataset(config, Domain::Target)?;
    write_provenance(out, config, None)?;
    save_dataset(&out.join(SOURCE_FILE), &source)?;
    save_dataset(&out.join(TARGET_FILE), &target)?;
    Ok((source, target))
}

pub fn pretrain_command(config: &ExperimentConfig, out: &Path) -> Result<SourceModel> {
    let source = dataset(config, Domain::Source)?;
    let (net2d, net3d, report) = pretrain(config, &source)?;
    let checkpoint = encode_checkpoint(&net2d, &net3d)?;
    write_provenance(out, config, Some(&checkpoint))?;
    std::fs::write(out.join(CHECKPOINT_FILE), &checkpoint).map_err(|e| crate::Error::io(out.join(CHECKPOINT_FILE), e))?;
    write_text(out, "pretrain.csv", &report::pretrain_csv(&report.epoch_losses))?;
    write_text(out, "metrics.csv", &report::metrics_csv(&report.source_test))?;
    Ok(SourceModel {
        net2d,
        net3d,
        checkpoint,
        pretrain: Some(report),
    })
}

/// The networks an adapted model is scored with, as a checkpoint pair.
fn evaluation_nets(outcome: &AdaptOutcome, config: &ExperimentConfig) -> (BranchNet, BranchNet) {
    let role = if config.adapt.method.uses_slow_model() {
        Role::Slow
    } else if config.adapt.method.adapts() {
        Role::Fast
    } else {
        Role::Source
    };
    (
        outcome.model.branch2d.get(role).with_role(Role::Source),
        outcome.model.branch3d.get(role).with_role(Role::Source),
    )
}

pub fn adapt_command(config: &ExperimentConfig, out: &Path) -> Result<AdaptOutcome> {
    let source = source_model(config)?;
    let target = dataset(config, Domain::Target)?;
    let outcome = adapt(source.model()?, &target, config)?;
    write_provenance(out, config, Some(&source.checkpoint))?;
    write_text(out, "steps.csv", &report::steps_csv(&outcome.steps))?;
    write_text(out, "metrics.csv", &report::metrics_csv(&outcome.metrics.scores))?;
    write_text(
        out,
        "pseudo_accuracy.csv",
        &report::pseudo_accuracy_csv(&[(config.adapt.method, outcome.metrics.pseudo_accuracy.clone())]),
    )?;
    let (net2d, net3d) = evaluation_nets(&outcome, config);
    let adapted = encode_checkpoint(&net2d, &net3d)?;
    std::fs::write(out.join(ADAPTED_FILE), adapted).map_err(|e| crate::Error::io(out.join(ADAPTED_FILE), e))?;
    Ok(outcome)
}

/// Scores the checkpoint's stored statistics on the target data.
pub fn eval_command(config: &ExperimentConfig, out: &Path) -> Result<SegmentationScores> {
    let source = source_model(config)?;
    let target = dataset(config, Domain::Target)?;
    let scores = evaluate_pair(&source.net2d, &source.net3d, &target, BnMode::StoredStats)?;
    write_provenance(out, config, Some(&source.checkpoint))?;
    write_text(out, "metrics.csv", &report::metrics_csv(&scores))?;
    Ok(scores)
}

pub fn sweep_lr_command(config: &ExperimentConfig, out: &Path) -> Result<crate::harness::LrSweep> {
    config.validate()?;
    let source = source_model(config)?;
    let target = dataset(config, Domain::Target)?;
    let sweep = sweep_lr(config, &source.model()?, &target, &STABILITY_METHODS, &lr_pairs(config.lr_scale))?;
    write_provenance(out, config, Some(&source.checkpoint))?;
    write_text(out, "sweep_lr.csv", &report::sweep_lr_csv(&sweep))?;
    write_text(out, "stability.csv", &report::stability_csv(&sweep))?;
    Ok(sweep)
}

pub fn sweep_ablation_command(
    config: &ExperimentConfig,
    out: &Path,
) -> Result<Vec<(crate::harness::sweep::AblationGroup, crate::harness::SweepRun)>> {
    let source = source_model(config)?;
    let target = dataset(config, Domain::Target)?;
    let rows = sweep_ablation(config, &source.model()?, &target)?;
    write_provenance(out, config, Some(&source.checkpoint))?;
    write_text(out, "ablation.csv", &report::ablation_csv(&rows))?;
    Ok(rows)
}
