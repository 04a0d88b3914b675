//! CSV and provenance files. Every CSV has a header row, comma separators,
//! `.` decimals and a fixed column order; scores use six decimals and
//! undefined values are empty fields.
//!
//! | file | columns |
//! |------|---------|
//! | `steps.csv` | iteration, points, loss, valid_fraction, pseudo_correct, pseudo_valid, pseudo_accuracy, skipped |
//! | `metrics.csv` | output, miou, iou_0 .. iou_{K-1} |
//! | `pseudo_accuracy.csv` | method, iteration, accuracy |
//! | `pretrain.csv` | epoch, loss |
//! | `sweep_lr.csv` | method, lr2d, lr3d, miou_2d, miou_3d, miou_ensemble, diverged_at |
//! | `stability.csv` | method, mean, std |
//! | `ablation.csv` | group, method, theta, lambda, miou_2d, miou_3d, miou_ensemble, diverged_at |

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::metrics::SegmentationScores;
use crate::harness::run::StepRow;
use crate::harness::sweep::{AblationGroup, LrSweep, SweepRun};
use crate::tta::Method;

pub const CONFIG_FILE: &str = "config.toml";
pub const HASH_FILE: &str = "checkpoint.sha256";

fn real(x: f64) -> String {
    format!("{x:.6}")
}

fn opt_real(x: Option<f64>) -> String {
    x.map(real).unwrap_or_default()
}

fn opt_int(x: Option<usize>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn steps_csv(steps: &[StepRow]) -> String {
    let mut out = String::from("iteration,points,loss,valid_fraction,pseudo_correct,pseudo_valid,pseudo_accuracy,skipped\n");
    for s in steps {
        let acc = (s.pseudo_valid > 0).then(|| s.pseudo_correct as f64 / s.pseudo_valid as f64);
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            s.iteration,
            s.points,
            real(s.loss),
            opt_real(s.valid_fraction),
            s.pseudo_correct,
            s.pseudo_valid,
            opt_real(acc),
            u8::from(s.skipped)
        )
        .expect("string write");
    }
    out
}

pub fn metrics_csv(scores: &SegmentationScores) -> String {
    let k = scores.iou_ens.len();
    let mut out = String::from("output,miou");
    for c in 0..k {
        write!(out, ",iou_{c}").expect("string write");
    }
    out.push('\n');
    for (name, miou, iou) in [
        ("2d", scores.miou2d, &scores.iou2d),
        ("3d", scores.miou3d, &scores.iou3d),
        ("ensemble", scores.miou_ens, &scores.iou_ens),
    ] {
        out.push_str(name);
        out.push(',');
        out.push_str(&real(miou));
        for v in iou {
            out.push(',');
            out.push_str(&opt_real(*v));
        }
        out.push('\n');
    }
    out
}

/// `(last step of a window, accuracy)` samples of one run.
pub type AccuracyCurve = Vec<(usize, Option<f64>)>;

pub fn pseudo_accuracy_csv(curves: &[(Method, AccuracyCurve)]) -> String {
    let mut out = String::from("method,iteration,accuracy\n");
    for (method, curve) in curves {
        for (iteration, acc) in curve {
            writeln!(out, "{method},{iteration},{}", opt_real(*acc)).expect("string write");
        }
    }
    out
}

pub fn pretrain_csv(epoch_losses: &[f64]) -> String {
    let mut out = String::from("epoch,loss\n");
    for (e, l) in epoch_losses.iter().enumerate() {
        writeln!(out, "{e},{}", real(*l)).expect("string write");
    }
    out
}

fn score_fields(run: &SweepRun) -> String {
    format!(
        "{},{},{},{}",
        real(run.scores.miou2d),
        real(run.scores.miou3d),
        real(run.scores.miou_ens),
        opt_int(run.diverged_at)
    )
}

pub fn sweep_lr_csv(sweep: &LrSweep) -> String {
    let mut out = String::from("method,lr2d,lr3d,miou_2d,miou_3d,miou_ensemble,diverged_at\n");
    for r in &sweep.runs {
        writeln!(out, "{},{},{},{}", r.method, r.lr2d, r.lr3d, score_fields(r)).expect("string write");
    }
    out
}

pub fn stability_csv(sweep: &LrSweep) -> String {
    let mut out = String::from("method,mean,std\n");
    for s in &sweep.summary {
        writeln!(out, "{},{},{}", s.method, real(s.mean), real(s.std)).expect("string write");
    }
    out
}

pub fn ablation_csv(rows: &[(AblationGroup, SweepRun)]) -> String {
    let mut out = String::from("group,method,theta,lambda,miou_2d,miou_3d,miou_ensemble,diverged_at\n");
    for (g, r) in rows {
        writeln!(out, "{},{},{},{},{}", g.name(), r.method, r.theta, r.lambda, score_fields(r)).expect("string write");
    }
    out
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Writes the serialized config and, when a checkpoint was involved, its
/// SHA-256 next to the results.
pub fn write_provenance(dir: &Path, config: &ExperimentConfig, checkpoint: Option<&[u8]>) -> Result<()> {
    write_text(dir, CONFIG_FILE, &config.to_toml())?;
    if let Some(bytes) = checkpoint {
        write_text(dir, HASH_FILE, &format!("{}\n", sha256_hex(bytes)))?;
    }
    Ok(())
}
