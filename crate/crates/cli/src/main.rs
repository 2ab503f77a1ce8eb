use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use vlight::dataset::{DatasetKind, Split};
use vlight::inference::Binarization;
use vlight_cli::commands::{self, CrossDbArgs, PredictTarget, TrainArgs};
use vlight_cli::{exit_code, resolve_config, Overrides};

/// Retinal vessel segmentation: training, tiled multi-scale inference and evaluation.
#[derive(Parser)]
#[command(name = "vlight", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    dataset_root: Option<PathBuf>,
    /// Parent of the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Test scales, comma separated.
    #[arg(long, value_delimiter = ',')]
    scales: Option<Vec<f64>>,
    /// Inference tile size.
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    overlap: Option<f64>,
    #[arg(long, value_enum)]
    threshold: Option<Threshold>,
    /// Only `cpu` is available.
    #[arg(long, default_value = "cpu")]
    device: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum Threshold {
    Fixed,
    Otsu,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Drive,
    ChaseDb1,
    Hrf,
}

impl From<Kind> for DatasetKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Drive => DatasetKind::Drive,
            Kind::ChaseDb1 => DatasetKind::ChaseDb1,
            Kind::Hrf => DatasetKind::Hrf,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoints and loss.tsv into the run directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the newest checkpoint of the run directory.
        #[arg(long)]
        resume: bool,
        /// Background sampling queue depth (0 = serial and bit-reproducible).
        #[arg(long, default_value_t = 0)]
        prefetch: usize,
    },
    /// Write probability maps and masks for one image or a dataset split.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "split")]
        image: Option<PathBuf>,
        #[arg(long, value_parser = ["train", "test"], default_value = "test")]
        split: String,
    },
    /// Score the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score the test split of another dataset without adaptation.
    Crossdb {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        target: Kind,
        #[arg(long)]
        target_root: PathBuf,
    },
    /// Time inference per test image.
    Benchmark {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1)]
        repeat: usize,
    },
    /// Write an untrained checkpoint for the configured model.
    Init {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            dataset_root: self.dataset_root.clone(),
            out: self.out.clone(),
            seed: self.seed,
            scales: self.scales.clone(),
            patch: self.patch,
            overlap: self.overlap,
            threshold: self.threshold.map(|t| match t {
                Threshold::Fixed => Binarization::Fixed05,
                Threshold::Otsu => Binarization::Otsu,
            }),
        }
    }

    fn resolve(&self) -> Result<vlight::config::RunConfig> {
        if self.device != "cpu" {
            bail!(vlight::Error::Config(format!(
                "device {} is not available; use cpu",
                self.device
            )));
        }
        resolve_config(&self.config, &self.overrides())
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            common,
            resume,
            prefetch,
        } => {
            let cfg = common.resolve()?;
            let (dir, report) = commands::train(&cfg, &TrainArgs { resume, prefetch })?;
            println!(
                "{} checkpoints in {}; final loss {:.5}",
                report.checkpoints.len(),
                dir.display(),
                report.losses.last().map_or(f64::NAN, |l| l.loss)
            );
        }
        Command::Predict {
            common,
            checkpoint,
            image,
            split,
        } => {
            let cfg = common.resolve()?;
            let target = match image {
                Some(p) => PredictTarget::Image(p),
                None if split == "train" => PredictTarget::Split(Split::Train),
                None => PredictTarget::Split(Split::Test),
            };
            let out = commands::predict_cmd(&cfg, &checkpoint, &target)?;
            println!("{}", out.display());
        }
        Command::Evaluate { common, checkpoint } => {
            let cfg = common.resolve()?;
            let (out, _) = commands::evaluate_cmd(&cfg, &checkpoint)?;
            println!("{}", out.display());
        }
        Command::Crossdb {
            common,
            checkpoint,
            target,
            target_root,
        } => {
            let cfg = common.resolve()?;
            let args = CrossDbArgs {
                target_kind: target.into(),
                target_root,
                scales: common.scales.clone(),
            };
            let (out, _) = commands::crossdb_cmd(&cfg, &checkpoint, &args)?;
            println!("{}", out.display());
        }
        Command::Benchmark {
            common,
            checkpoint,
            repeat,
        } => {
            let cfg = common.resolve()?;
            let out = commands::benchmark_cmd(&cfg, &checkpoint, repeat)?;
            println!("{}", out.display());
        }
        Command::Init { common, checkpoint } => {
            let cfg = common.resolve()?;
            commands::init_checkpoint(&cfg, &checkpoint)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
