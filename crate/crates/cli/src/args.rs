//! Argument parsing and dispatch.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rofusion::evaluation::{BoxSource, OriginMode};
use rofusion::CodecMode;

use crate::ablation::run_ablation;
use crate::bench::{run_benchmark, Manifest};
use crate::commands::{self, EvalOverrides, TrainOptions};
use crate::exit::{CliResult, Exit};

#[derive(Debug, Parser)]
#[command(name = "rofusion", version, about = "Radar and camera point-level detection on simulated frames")]
pub struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Experiment config JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in preset used when no config file is given.
    #[arg(long, conflicts_with = "config")]
    pub preset: Option<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum BoxSourceArg {
    Oracle,
    Jittered,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum OriginArg {
    Gt,
    #[value(name = "hLC", alias = "hlc")]
    Hlc,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum CodecModeArg {
    Local,
    Global,
}

#[derive(Debug, Args)]
pub struct EvalFlags {
    /// Experiment the checkpoint must match; its eval section is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub box_source: Option<BoxSourceArg>,
    #[arg(long, value_enum)]
    pub origin: Option<OriginArg>,
    /// Refuse unless the checkpoint was trained in this codec mode.
    #[arg(long, value_enum)]
    pub codec_mode: Option<CodecModeArg>,
}

impl EvalFlags {
    fn overrides(&self) -> CliResult<EvalOverrides> {
        Ok(EvalOverrides {
            config: self.config.as_deref().map(|p| commands::load_config(Some(p), None)).transpose()?,
            box_source: self.box_source.map(|b| match b {
                BoxSourceArg::Oracle => BoxSource::Oracle,
                BoxSourceArg::Jittered => BoxSource::Jittered,
            }),
            origin: self.origin.map(|o| match o {
                OriginArg::Gt => OriginMode::Gt,
                OriginArg::Hlc => OriginMode::Hlc,
            }),
            codec_mode: self.codec_mode.map(|m| match m {
                CodecModeArg::Local => CodecMode::Local,
                CodecModeArg::Global => CodecMode::Global,
            }),
        })
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate frames into a line-delimited JSON file.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model and write the best checkpoint and a per-epoch log.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out_ckpt: PathBuf,
        #[arg(long)]
        log: PathBuf,
        /// Also save the final state with optimizer moments.
        #[arg(long)]
        last_ckpt: Option<PathBuf>,
        /// Continue from a checkpoint saved with --last-ckpt.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Train on this frame file instead of the simulated split.
        #[arg(long)]
        train_frames: Option<PathBuf>,
        #[arg(long)]
        val_frames: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a frame file.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        frames: PathBuf,
        #[command(flatten)]
        flags: EvalFlags,
        /// Report CSV; a text table is written next to it.
        #[arg(long)]
        report: PathBuf,
        /// Also write per-detection predictions CSV.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Print the detections of one frame.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        frame_id: u64,
        #[command(flatten)]
        flags: EvalFlags,
    },
    /// Score a predictions CSV against a frame file.
    Score {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        frames: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        report: PathBuf,
    },
    /// Compare every op's gradient with central finite differences.
    Gradcheck {
        #[arg(long, default_value = "small")]
        arch_preset: String,
        /// Test hook: corrupt the named op's backward pass.
        #[arg(long)]
        inject_fault: Option<String>,
    },
    /// Train and evaluate the w/o LC, radar-only and full variants.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a benchmark preset and check its metrics against the manifest.
    Bench {
        #[arg(long, default_value = "bench/manifest.json")]
        manifest: PathBuf,
        #[arg(long)]
        preset: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print an experiment config as canonical JSON.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn config(c: &ConfigArgs) -> CliResult<rofusion::ExperimentConfig> {
    commands::load_config(c.config.as_deref(), c.preset.as_deref())
}

/// Runs one parsed command, printing results to stdout.
pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Simulate { cfg, out, frames, seed } => {
            let summary = commands::simulate(&config(&cfg)?, &out, frames, seed)?;
            println!("{summary}");
        }
        Command::Train {
            cfg,
            out_ckpt,
            log,
            last_ckpt,
            resume,
            train_frames,
            val_frames,
        } => {
            let opts = TrainOptions {
                out_ckpt,
                log,
                last_ckpt,
                resume,
                train_frames,
                val_frames,
            };
            let outcome = commands::train(&config(&cfg)?, &opts)?;
            if let Some(last) = outcome.log.last() {
                let val = last.val_loss.map_or("n/a".to_string(), |v| format!("{v:.6}"));
                println!("epoch {}: train loss {:.6}, val loss {val}", last.epoch, last.train_loss);
            }
        }
        Command::Eval {
            ckpt,
            frames,
            flags,
            report,
            predictions,
        } => {
            let r = commands::eval(&ckpt, &frames, &flags.overrides()?, &report, predictions.as_deref())?;
            print!("{}", r.to_table());
        }
        Command::Predict { ckpt, frames, frame_id, flags } => {
            let dets = commands::predict(&ckpt, &frames, frame_id, &flags.overrides()?)?;
            println!("center_r,center_a,confidence");
            for d in dets {
                println!("{},{},{}", d.center_r, d.center_a, d.confidence);
            }
        }
        Command::Score {
            predictions,
            frames,
            cfg,
            report,
        } => {
            let eval = config(&cfg)?.eval;
            let r = commands::score(&predictions, &frames, &eval, &report)?;
            print!("{}", r.to_table());
        }
        Command::Gradcheck { arch_preset, inject_fault } => {
            let arch = commands::arch_preset(&arch_preset)?;
            let entries = commands::gradcheck(&arch, inject_fault.as_deref())?;
            print!("{}", commands::gradcheck_table(&entries));
            let failed = commands::gradcheck_failures(&entries);
            if !failed.is_empty() {
                return Err(Exit::failure(format!("gradient check failed for: {}", failed.join(", "))));
            }
        }
        Command::Ablate { cfg, out } => {
            let outcome = run_ablation(&config(&cfg)?, &out)?;
            print!("{}", outcome.to_table());
        }
        Command::Bench { manifest, preset, out } => {
            let m = Manifest::load(&manifest)?;
            let outcome = run_benchmark(&m, &preset, &out)?;
            print!("{}", crate::bench::summary(&outcome, m.preset(&preset)?));
            if !outcome.passed() {
                let msgs: Vec<String> = outcome.violations.iter().map(|v| v.to_string()).collect();
                return Err(Exit::failure(format!("benchmark {preset} failed: {}", msgs.join("; "))));
            }
        }
        Command::Config { cfg } => print!("{}", config(&cfg)?.to_canonical_json()),
    }
    Ok(())
}
