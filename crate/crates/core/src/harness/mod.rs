//! Experiment runner: source pretraining, one-epoch adaptation, evaluation,
//! sweeps and report files.

pub mod config;
pub mod eval;
pub mod metrics;
pub mod pipeline;
pub mod pretrain;
pub mod report;
pub mod run;
pub mod sweep;

pub use config::ExperimentConfig;
pub use metrics::{ConfusionMatrix, MetricsTable, SegmentationScores};
pub use pretrain::{pretrain, PretrainReport};
pub use run::{adapt, adapt_tolerant, AdaptOutcome, StepRow};
pub use sweep::{lr_pairs, sweep_ablation, sweep_lr, LrSweep, SweepRun};
