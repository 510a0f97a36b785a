//! Command implementations. Each returns its artifacts so that tests and
//! the benchmark runner can call them in-process.

use std::path::{Path, PathBuf};

use log::info;
use rofusion::checkpoint::Checkpoint;
use rofusion::config::ExperimentConfig;
use rofusion::evaluation::{compute_metrics, detect_frame, run_detection, BoxSource, Detection, EvalConfig, EvalReport, FrameResult, OriginMode};
use rofusion::frame_io::{read_frames, write_atomic, write_frames};
use rofusion::gradcheck::{op_suite, GradCheckConfig, SuiteEntry};
use rofusion::sim::{generate_frames, Difficulty};
use rofusion::training::{log_csv, prepare_samples, split_frames, train_on, Split, TrainOutcome};
use rofusion::{ArchConfig, CodecMode, Frame, OpKind};

use crate::exit::{CliResult, Exit};
use crate::predictions;

/// Gradient-check tolerance on the worst relative error.
pub const GRADCHECK_TOL: f64 = 1e-5;

/// Loads `path` if given, else the named preset, else the defaults.
pub fn load_config(path: Option<&Path>, preset: Option<&str>) -> CliResult<ExperimentConfig> {
    match (path, preset) {
        (Some(_), Some(_)) => Err(Exit::config("--config and --preset are mutually exclusive")),
        (Some(p), None) => {
            let text = std::fs::read_to_string(p).map_err(|e| Exit::io(format!("{}: {e}", p.display())))?;
            ExperimentConfig::from_json(&text).map_err(|e| Exit::from(e).context(p.display()))
        }
        (None, name) => Ok(ExperimentConfig::preset(name.unwrap_or("default"))?),
    }
}

pub fn read_frame_file(path: &Path) -> CliResult<Vec<Frame>> {
    read_frames(path).map_err(|e| Exit::from(e).context(path.display()))
}

pub fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Checkpoint::load(path).map_err(|e| Exit::from(e).context(path.display()))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimSummary {
    pub frames: usize,
    pub objects: usize,
    pub points: usize,
    pub easy: usize,
    pub hard: usize,
}

impl SimSummary {
    pub fn of(frames: &[Frame]) -> Self {
        let hard = frames.iter().filter(|f| f.difficulty == Difficulty::Hard).count();
        Self {
            frames: frames.len(),
            objects: frames.iter().map(|f| f.objects.len()).sum(),
            points: frames.iter().map(|f| f.points.len()).sum(),
            easy: frames.len() - hard,
            hard,
        }
    }
}

impl std::fmt::Display for SimSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} frames, {} objects, {} points; difficulty easy={} hard={}",
            self.frames, self.objects, self.points, self.easy, self.hard
        )
    }
}

/// Writes `count` frames with seeds `seed, seed + 1, ...`.
pub fn simulate(cfg: &ExperimentConfig, out: &Path, count: usize, seed: u64) -> CliResult<SimSummary> {
    let frames = generate_frames(&cfg.sim, seed, count)?;
    write_frames(out, &frames).map_err(|e| Exit::from(e).context(out.display()))?;
    Ok(SimSummary::of(&frames))
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub out_ckpt: PathBuf,
    pub log: PathBuf,
    /// Final state with optimizer moments, for resuming.
    pub last_ckpt: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    /// Frame files; the configured splits are simulated when absent.
    pub train_frames: Option<PathBuf>,
    pub val_frames: Option<PathBuf>,
}

pub fn train(cfg: &ExperimentConfig, opts: &TrainOptions) -> CliResult<TrainOutcome> {
    cfg.validate()?;
    let resume = opts.resume.as_deref().map(load_checkpoint).transpose()?;
    let train_frames = match &opts.train_frames {
        Some(p) => read_frame_file(p)?,
        None => split_frames(cfg, Split::Train)?,
    };
    let val_frames = match &opts.val_frames {
        Some(p) => read_frame_file(p)?,
        None => split_frames(cfg, Split::Val)?,
    };
    let aug = cfg.train.augment_non_trivial;
    let train = prepare_samples(&train_frames, &cfg.sim, &cfg.codec, aug)?;
    let val = prepare_samples(&val_frames, &cfg.sim, &cfg.codec, aug)?;
    info!("training on {} samples, validating on {}", train.len(), val.len());
    let outcome = train_on(cfg, &train, &val, resume.as_ref())?;
    outcome.best.save(&opts.out_ckpt).map_err(|e| Exit::from(e).context(opts.out_ckpt.display()))?;
    if let Some(p) = &opts.last_ckpt {
        outcome.last.save(p).map_err(|e| Exit::from(e).context(p.display()))?;
    }
    write_atomic(&opts.log, log_csv(&outcome.log).as_bytes()).map_err(|e| Exit::from(e).context(opts.log.display()))?;
    Ok(outcome)
}

/// Evaluation-time settings layered over a checkpoint.
#[derive(Clone, Debug, Default)]
pub struct EvalOverrides {
    /// Experiment the caller expects the checkpoint to match.
    pub config: Option<ExperimentConfig>,
    pub box_source: Option<BoxSource>,
    pub origin: Option<OriginMode>,
    pub codec_mode: Option<CodecMode>,
}

impl EvalOverrides {
    /// Checks compatibility with `ck` and returns the effective experiment.
    pub fn resolve(&self, ck: &Checkpoint) -> CliResult<ExperimentConfig> {
        if let Some(cfg) = &self.config {
            ck.check_compatible(cfg)?;
        }
        if let Some(mode) = self.codec_mode {
            if mode != ck.codec.mode {
                let mut wanted = ck.codec;
                wanted.mode = mode;
                return Err(Exit::config(format!(
                    "codec mismatch: checkpoint codec {} but requested codec {}",
                    serde_json::to_string(&ck.codec)?,
                    serde_json::to_string(&wanted)?
                )));
            }
        }
        let mut eval = self.config.as_ref().map_or_else(EvalConfig::default, |c| c.eval);
        if let Some(b) = self.box_source {
            eval.box_source = b;
        }
        if let Some(o) = self.origin {
            eval.origin_mode = o;
        }
        let exp = ck.experiment(eval);
        exp.eval.validate()?;
        Ok(exp)
    }
}

/// Runs detection on `frames` with a loaded model.
pub fn detect_all(ck: &Checkpoint, exp: &ExperimentConfig, frames: &[Frame]) -> CliResult<Vec<FrameResult>> {
    let params = ck.params_f64();
    Ok(run_detection(frames, &exp.sim, &params, &exp.arch, &exp.codec, &exp.eval)?)
}

/// CSV at `path`, text table next to it with a `.txt` extension.
pub fn write_report(report: &EvalReport, path: &Path) -> CliResult<()> {
    write_atomic(path, report.to_csv().as_bytes()).map_err(|e| Exit::from(e).context(path.display()))?;
    let txt = path.with_extension("txt");
    write_atomic(&txt, report.to_table().as_bytes()).map_err(|e| Exit::from(e).context(txt.display()))?;
    Ok(())
}

pub fn eval(ckpt: &Path, frames: &Path, overrides: &EvalOverrides, report: &Path, predictions_out: Option<&Path>) -> CliResult<EvalReport> {
    let ck = load_checkpoint(ckpt)?;
    let exp = overrides.resolve(&ck)?;
    let frames = read_frame_file(frames)?;
    let results = detect_all(&ck, &exp, &frames)?;
    let r = compute_metrics(&results, exp.eval.iou_thr, &exp.eval.template());
    write_report(&r, report)?;
    if let Some(p) = predictions_out {
        predictions::write(p, &predictions::records(&results))?;
    }
    Ok(r)
}

/// Detections of one frame of a frame file.
pub fn predict(ckpt: &Path, frames: &Path, frame_id: u64, overrides: &EvalOverrides) -> CliResult<Vec<Detection>> {
    let ck = load_checkpoint(ckpt)?;
    let exp = overrides.resolve(&ck)?;
    let frames = read_frame_file(frames)?;
    let frame = frames
        .iter()
        .find(|f| f.frame_id == frame_id)
        .ok_or_else(|| Exit::config(format!("frame {frame_id} is not in the frame file")))?;
    Ok(detect_frame(frame, &exp.sim, &ck.params_f64(), &exp.arch, &exp.codec, &exp.eval)?)
}

/// Metrics of an existing predictions file.
pub fn score(predictions_file: &Path, frames: &Path, eval_cfg: &EvalConfig, report: &Path) -> CliResult<EvalReport> {
    eval_cfg.validate()?;
    let frames = read_frame_file(frames)?;
    let recs = predictions::read(predictions_file)?;
    let results = predictions::join(&frames, &recs)?;
    let r = compute_metrics(&results, eval_cfg.iou_thr, &eval_cfg.template());
    write_report(&r, report)?;
    Ok(r)
}

pub fn arch_preset(name: &str) -> CliResult<ArchConfig> {
    match name {
        "small" => Ok(ArchConfig::small()),
        "default" => Ok(ArchConfig::default()),
        other => Err(Exit::config(format!("unknown arch preset `{other}`, expected small or default"))),
    }
}

/// Runs the gradient suite on `arch`, optionally arming the fault hook for
/// the op named `fault`.
pub fn gradcheck(arch: &ArchConfig, fault: Option<&str>) -> CliResult<Vec<SuiteEntry>> {
    let fault = match fault {
        None => None,
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| {
            let known: Vec<&str> = OpKind::DIFFERENTIABLE.iter().map(|k| k.name()).collect();
            Exit::config(format!("unknown op `{name}`, expected one of {}", known.join(", ")))
        })?),
    };
    Ok(op_suite(arch, fault, &GradCheckConfig::default())?)
}

pub fn gradcheck_table(entries: &[SuiteEntry]) -> String {
    let mut s = format!("{:<24} {:>12} {:>8} {:>8}  result\n", "op", "max_rel_err", "checked", "skipped");
    for e in entries {
        s.push_str(&format!(
            "{:<24} {:>12.3e} {:>8} {:>8}  {}\n",
            e.name,
            e.report.max_rel_error,
            e.report.checked,
            e.report.skipped,
            if e.passed(GRADCHECK_TOL) { "PASS" } else { "FAIL" }
        ));
    }
    s
}

pub fn gradcheck_failures(entries: &[SuiteEntry]) -> Vec<&'static str> {
    entries.iter().filter(|e| !e.passed(GRADCHECK_TOL)).map(|e| e.name).collect()
}
