use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mmtta_core::harness::pipeline;
use mmtta_core::harness::ExperimentConfig;
use mmtta_core::Error;

/// Multi-modal test-time adaptation experiments on synthetic scenarios.
#[derive(Parser)]
#[command(name = "mmtta", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the source and target datasets of the scenario.
    GenData(Common),
    /// Train both branches on source data and write a checkpoint.
    Pretrain(Common),
    /// Adapt a source model over one epoch of target data.
    Adapt(Common),
    /// Score a checkpoint on target data without adapting.
    Eval(Common),
    /// Learning-rate stability sweep.
    SweepLr(Common),
    /// Pseudo-label variant, threshold and momentum sweep.
    SweepAblation(Common),
}

#[derive(Args)]
struct Common {
    /// TOML config file; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the run seed of the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the checkpoint path of the config.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig, Error> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.adapt.seed = seed;
        }
        if let Some(path) = &self.checkpoint {
            config.checkpoint = path.to_string_lossy().into_owned();
        }
        config.validate()?;
        Ok(config)
    }
}

fn run(command: &Command) -> Result<(), Error> {
    let (common, out): (&Common, &Path) = match command {
        Command::GenData(c)
        | Command::Pretrain(c)
        | Command::Adapt(c)
        | Command::Eval(c)
        | Command::SweepLr(c)
        | Command::SweepAblation(c) => (c, &c.out),
    };
    let config = common.config()?;
    match command {
        Command::GenData(_) => {
            let (source, target) = pipeline::gen_data(&config, out)?;
            println!("wrote {} source and {} target frames to {}", source.len(), target.len(), out.display());
        }
        Command::Pretrain(_) => {
            let model = pipeline::pretrain_command(&config, out)?;
            if let Some(report) = &model.pretrain {
                println!("source-test mIoU: ensemble {:.4}", report.source_test.miou_ens);
            }
        }
        Command::Adapt(_) => {
            let outcome = pipeline::adapt_command(&config, out)?;
            let s = &outcome.metrics.scores;
            println!(
                "{}: mIoU 2d {:.4} 3d {:.4} ensemble {:.4}",
                config.adapt.method, s.miou2d, s.miou3d, s.miou_ens
            );
        }
        Command::Eval(_) => {
            let s = pipeline::eval_command(&config, out)?;
            println!("mIoU 2d {:.4} 3d {:.4} ensemble {:.4}", s.miou2d, s.miou3d, s.miou_ens);
        }
        Command::SweepLr(_) => {
            let sweep = pipeline::sweep_lr_command(&config, out)?;
            for s in &sweep.summary {
                println!("{:<12} mean {:.4} std {:.4}", s.method.name(), s.mean, s.std);
            }
        }
        Command::SweepAblation(_) => {
            let rows = pipeline::sweep_ablation_command(&config, out)?;
            println!("wrote {} ablation rows to {}", rows.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numeric(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
