//! Benchmark presets: a fixed simulate/train/eval/ablate sequence per
//! preset, with every emitted metric checked against a committed range.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rofusion::config::ExperimentConfig;
use rofusion::evaluation::{compute_metrics, EvalReport};
use rofusion::frame_io::{write_atomic, write_frames};
use rofusion::training::{split_frames, Split};
use rofusion::sim::Difficulty;
use serde::{Deserialize, Serialize};

use crate::ablation::{run_ablation, MODES};
use crate::commands::{self, detect_all, write_report, TrainOptions};
use crate::exit::{CliResult, Exit};

pub const MANIFEST_SCHEMA: &str = "rofusion-bench/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    Simulate,
    Train,
    Eval,
    Ablate,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PresetSpec {
    /// Config preset the run starts from.
    pub config: String,
    /// Pinned into `train.seed`, which seeds the splits and the model.
    pub seed: u64,
    pub steps: Vec<Step>,
    pub expected: BTreeMap<String, Range>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema: String,
    pub presets: BTreeMap<String, PresetSpec>,
}

impl Manifest {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let m: Self = serde_json::from_str(text)?;
        if m.schema != MANIFEST_SCHEMA {
            return Err(Exit::config(format!("manifest schema `{}`, expected `{MANIFEST_SCHEMA}`", m.schema)));
        }
        for (name, p) in &m.presets {
            ExperimentConfig::preset(&p.config).map_err(|e| Exit::from(e).context(format!("preset {name}")))?;
            if p.steps.contains(&Step::Eval) && !p.steps.contains(&Step::Train) {
                return Err(Exit::config(format!("preset {name}: eval needs a train step")));
            }
            for (metric, r) in &p.expected {
                if !(r.min <= r.max) {
                    return Err(Exit::config(format!("preset {name}: range of {metric} has min > max")));
                }
            }
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Exit::io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| e.context(path.display()))
    }

    pub fn preset(&self, name: &str) -> CliResult<&PresetSpec> {
        self.presets.get(name).ok_or_else(|| {
            let known: Vec<&str> = self.presets.keys().map(String::as_str).collect();
            Exit::config(format!("unknown bench preset `{name}`, expected one of {}", known.join(", ")))
        })
    }
}

#[derive(Clone, Debug)]
pub struct Violation {
    pub metric: String,
    /// `None` when the preset never produced the metric.
    pub value: Option<f64>,
    pub range: Range,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.value {
            Some(v) => write!(f, "{} = {v} outside [{}, {}]", self.metric, self.range.min, self.range.max),
            None => write!(f, "{} was not produced (expected [{}, {}])", self.metric, self.range.min, self.range.max),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchOutcome {
    pub preset: String,
    pub metrics: BTreeMap<String, f64>,
    pub violations: Vec<Violation>,
    pub seconds: f64,
    /// Every file written into the bundle.
    pub files: Vec<PathBuf>,
}

impl BenchOutcome {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in &self.metrics {
            s.push_str(&format!("{k},{v}\n"));
        }
        s
    }
}

/// Compares `metrics` with the expected ranges.
pub fn check(metrics: &BTreeMap<String, f64>, expected: &BTreeMap<String, Range>) -> Vec<Violation> {
    expected
        .iter()
        .filter_map(|(name, range)| {
            let value = metrics.get(name).copied();
            match value {
                Some(v) if range.contains(v) => None,
                _ => Some(Violation {
                    metric: name.clone(),
                    value,
                    range: *range,
                }),
            }
        })
        .collect()
}

fn put_report(metrics: &mut BTreeMap<String, f64>, prefix: &str, r: &EvalReport) {
    for (split, m) in [("", &r.overall), ("easy.", &r.easy), ("hard.", &r.hard)] {
        let mut put = |k: &str, v: Option<f64>| {
            if let Some(v) = v {
                metrics.insert(format!("{prefix}.{split}{k}"), v);
            }
        };
        put("AR", m.ar);
        if split.is_empty() {
            put("AP", m.ap);
            put("R_err_m", m.range_err);
            put("A_err_deg", m.angle_err);
        }
    }
}

fn save(path: &Path, text: &str, files: &mut Vec<PathBuf>) -> CliResult<()> {
    write_atomic(path, text.as_bytes()).map_err(|e| Exit::from(e).context(path.display()))?;
    files.push(path.to_path_buf());
    Ok(())
}

/// Runs the preset's steps into the bundle directory `out`, writes
/// `metrics.csv` and `summary.txt`, and reports range violations.
pub fn run_benchmark(manifest: &Manifest, name: &str, out: &Path) -> CliResult<BenchOutcome> {
    let spec = manifest.preset(name)?;
    let mut cfg = ExperimentConfig::preset(&spec.config)?;
    cfg.train.seed = spec.seed;
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Exit::io(format!("{}: {e}", out.display())))?;
    let t0 = Instant::now();
    let mut metrics = BTreeMap::new();
    let mut files = Vec::new();
    save(&out.join("config.json"), &cfg.to_canonical_json(), &mut files)?;

    let test_path = out.join("test.jsonl");
    let ckpt = out.join("model.ckpt");
    for step in &spec.steps {
        info!("{name}: {step:?}");
        match step {
            Step::Simulate => {
                let test = split_frames(&cfg, Split::Test)?;
                write_frames(&test_path, &test).map_err(|e| Exit::from(e).context(test_path.display()))?;
                files.push(test_path.clone());
                let hard = test.iter().filter(|f| f.difficulty == Difficulty::Hard).count();
                metrics.insert("sim.frames".into(), test.len() as f64);
                metrics.insert("sim.hard_fraction".into(), hard as f64 / test.len().max(1) as f64);
            }
            Step::Train => {
                let opts = TrainOptions {
                    out_ckpt: ckpt.clone(),
                    log: out.join("train_log.csv"),
                    ..Default::default()
                };
                let outcome = commands::train(&cfg, &opts)?;
                files.push(opts.log.clone());
                if let (Some(first), Some(last)) = (outcome.log.first(), outcome.log.last()) {
                    metrics.insert("train.loss_ratio".into(), last.train_loss / first.train_loss);
                    metrics.insert("train.final_loss".into(), last.train_loss);
                    if let Some(v) = last.val_loss {
                        metrics.insert("train.final_val_loss".into(), v);
                    }
                }
            }
            Step::Eval => {
                let test = if test_path.exists() {
                    rofusion::frame_io::read_frames(&test_path).map_err(|e| Exit::from(e).context(test_path.display()))?
                } else {
                    split_frames(&cfg, Split::Test)?
                };
                let ck = commands::load_checkpoint(&ckpt)?;
                for &(mode, box_source, origin) in &MODES {
                    let mut exp = cfg.clone();
                    exp.eval.box_source = box_source;
                    exp.eval.origin_mode = origin;
                    let results = detect_all(&ck, &exp, &test)?;
                    let report = compute_metrics(&results, exp.eval.iou_thr, &exp.eval.template());
                    let path = out.join(format!("eval_{}.csv", mode.replace('/', "_").to_lowercase()));
                    write_report(&report, &path)?;
                    files.push(path.clone());
                    files.push(path.with_extension("txt"));
                    put_report(&mut metrics, &format!("eval.{}", mode.to_lowercase()), &report);
                }
            }
            Step::Ablate => {
                let dir = out.join("ablation");
                let outcome = run_ablation(&cfg, &dir)?;
                for entry in std::fs::read_dir(&dir).map_err(|e| Exit::io(format!("{}: {e}", dir.display())))? {
                    let p = entry.map_err(|e| Exit::io(e.to_string()))?.path();
                    if p.extension().is_some_and(|x| x == "csv" || x == "txt") {
                        files.push(p);
                    }
                }
                for v in &outcome.variants {
                    put_report(&mut metrics, &format!("ablation.{}", v.name.replace("w/o ", "wo_")), &v.report);
                }
                // The first mode repeats the full variant's own row.
                for (mode, r) in outcome.modes.iter().skip(1) {
                    put_report(&mut metrics, &format!("ablation.full.{}", mode.to_lowercase()), r);
                }
            }
        }
    }
    let violations = check(&metrics, &spec.expected);
    let seconds = t0.elapsed().as_secs_f64();
    let mut outcome = BenchOutcome {
        preset: name.to_string(),
        metrics,
        violations,
        seconds,
        files,
    };
    let csv = outcome.metrics_csv();
    save(&out.join("metrics.csv"), &csv, &mut outcome.files)?;
    let summary = summary(&outcome, spec);
    save(&out.join("summary.txt"), &summary, &mut outcome.files)?;
    Ok(outcome)
}

pub fn summary(outcome: &BenchOutcome, spec: &PresetSpec) -> String {
    let mut s = format!("preset {} (config {}, seed {}) in {:.1}s\n", outcome.preset, spec.config, spec.seed, outcome.seconds);
    for (k, v) in &outcome.metrics {
        let status = match spec.expected.get(k) {
            Some(r) if r.contains(*v) => format!("ok [{}, {}]", r.min, r.max),
            Some(r) => format!("OUT OF RANGE [{}, {}]", r.min, r.max),
            None => "unchecked".into(),
        };
        s.push_str(&format!("{k:<32} {v:>14.6} {status}\n"));
    }
    for v in outcome.violations.iter().filter(|v| v.value.is_none()) {
        s.push_str(&format!("{v}\n"));
    }
    s.push_str(if outcome.passed() { "PASS\n" } else { "FAIL\n" });
    s
}
