//! The `triseg` command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::{Ablation, RunConfig};
use crate::data::{self, SynthConfig};
use crate::error::{Error, Result};
use crate::labelproc::PoolSnapshot;
use crate::metrics::{self, MetricReport};
use crate::{overlay, trainer};

#[derive(Parser, Debug)]
#[command(name = "triseg", version, about = "Triple-view co-training for binary image segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    fn enabled(self) -> bool {
        self == Switch::On
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AblationArg {
    A3,
    B3,
    C3,
    Abc,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic images/ + masks/ dataset.
    Synth {
        #[arg(long, default_value_t = 500)]
        count: usize,
        /// Square image side in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Standard deviation of the intensity noise.
        #[arg(long, default_value_t = SynthConfig::default().noise_sigma)]
        sigma: f64,
        #[arg(long)]
        out: PathBuf,
        /// Write into a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Run all training stages and evaluate on the test split.
    Train {
        /// TOML run configuration.
        config: PathBuf,
        /// View layout: three copies of one architecture or the distinct trio.
        #[arg(long, value_enum)]
        ablation: Option<AblationArg>,
        #[arg(long, value_enum)]
        label_processing: Option<Switch>,
        #[arg(long, value_enum)]
        dual_loss: Option<Switch>,
        /// Stage 1 only, single view.
        #[arg(long)]
        supervised_only: bool,
        /// Override run_name from the config.
        #[arg(long)]
        run_name: Option<String>,
    },
    /// Evaluate a directory of predicted masks against ground truth.
    Eval {
        ms_dir: PathBuf,
        gt_dir: PathBuf,
        /// Where report.csv and report.json go.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Render TP/FN/FP/TN overlays for a finished run.
    Report { run_dir: PathBuf },
    /// Print the disagreement histogram of a pool snapshot.
    InspectPool {
        snapshot: PathBuf,
        #[arg(long, default_value_t = 10)]
        bins: usize,
    },
}

/// Distinguishes bad input (exit 2) from runtime failures (exit 1).
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            Error::Diverged { checkpoint: Some(ref p), .. } => {
                Failure::Runtime(format!("{e}; last checkpoint: {}", p.display()))
            }
            other => Failure::Runtime(other.to_string()),
        }
    }
}

pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

pub fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Synth {
            count,
            size,
            seed,
            sigma,
            out,
            force,
        } => cmd_synth(count, size, seed, sigma, &out, force),
        Command::Train {
            config,
            ablation,
            label_processing,
            dual_loss,
            supervised_only,
            run_name,
        } => {
            let mut cfg = RunConfig::load(&config).map_err(|e| Failure::Usage(e.to_string()))?;
            if let Some(a) = ablation {
                cfg.apply_ablation(match a {
                    AblationArg::A3 => Ablation::A3,
                    AblationArg::B3 => Ablation::B3,
                    AblationArg::C3 => Ablation::C3,
                    AblationArg::Abc => Ablation::Abc,
                });
            }
            if let Some(s) = label_processing {
                cfg.label_processing.enabled = s.enabled();
            }
            if let Some(s) = dual_loss {
                cfg.dual_loss = s.enabled();
            }
            cfg.supervised_only |= supervised_only;
            if let Some(n) = run_name {
                cfg.run_name = n;
            }
            cfg.validate()?;
            let out = trainer::run_pipeline(&cfg)?;
            println!(
                "{}: IOU {:.4}, Dice {:.4}",
                out.run_dir.display(),
                out.report.aggregate.iou.unwrap_or(f64::NAN),
                out.report.aggregate.dice.unwrap_or(f64::NAN)
            );
            Ok(())
        }
        Command::Eval { ms_dir, gt_dir, out } => cmd_eval(&ms_dir, &gt_dir, &out),
        Command::Report { run_dir } => {
            let n = overlay::write_run_overlays(&run_dir)?;
            println!("wrote {n} overlays to {}", run_dir.join("overlays").display());
            Ok(())
        }
        Command::InspectPool { snapshot, bins } => {
            if bins == 0 {
                return Err(Failure::Usage("--bins must be positive".into()));
            }
            print!("{}", PoolSnapshot::read(&snapshot)?.render_histogram(bins, 40));
            Ok(())
        }
    }
}

fn cmd_synth(count: usize, size: usize, seed: u64, sigma: f64, out: &Path, force: bool) -> Result<(), Failure> {
    if count == 0 {
        return Err(Failure::Usage("--count must be at least 1".into()));
    }
    if size < 16 {
        return Err(Failure::Usage("--size must be at least 16".into()));
    }
    if !(sigma >= 0.0) {
        return Err(Failure::Usage("--sigma must be non-negative".into()));
    }
    if out.is_dir() && fs::read_dir(out).map_err(Error::from)?.next().is_some() && !force {
        return Err(Failure::Runtime(format!(
            "{} exists and is not empty; pass --force to write into it",
            out.display()
        )));
    }
    let cfg = SynthConfig {
        noise_sigma: sigma,
        ..SynthConfig::default()
    };
    let samples = data::generate_synthetic_with(count, (size, size), seed, &cfg)?;
    data::save_dataset(out, &samples)?;
    println!("wrote {count} image/mask pairs to {}", out.display());
    Ok(())
}

fn cmd_eval(ms_dir: &Path, gt_dir: &Path, out: &Path) -> Result<(), Failure> {
    let pairs = data::match_mask_files(ms_dir, gt_dir)?;
    if !pairs.is_complete() {
        for n in &pairs.only_left {
            eprintln!("unmatched prediction: {n}");
        }
        for n in &pairs.only_right {
            eprintln!("unmatched ground truth: {n}");
        }
        return Err(Failure::Runtime(format!(
            "{} files without a counterpart",
            pairs.only_left.len() + pairs.only_right.len()
        )));
    }
    let mut rows = Vec::with_capacity(pairs.pairs.len());
    for (name, ms, gt) in &pairs.pairs {
        rows.push(metrics::evaluate_pair(name, &data::read_mask_png(ms)?, &data::read_mask_png(gt)?)?);
    }
    let report = MetricReport::from_images(rows);
    fs::create_dir_all(out).map_err(Error::from)?;
    trainer::write_report(out, &report)?;
    println!(
        "{} images: Dice {:.4}, IOU {:.4}",
        report.aggregate.count,
        report.aggregate.dice.unwrap_or(f64::NAN),
        report.aggregate.iou.unwrap_or(f64::NAN)
    );
    Ok(())
}
