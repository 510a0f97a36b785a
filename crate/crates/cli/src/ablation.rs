//! Ablation matrix: global coordinates, radar only and the full model,
//! trained and evaluated on identical, hash-checked frame files.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rofusion::config::ExperimentConfig;
use rofusion::evaluation::{compute_metrics, BoxSource, EvalReport, OriginMode, SplitMetrics};
use rofusion::frame_io::{read_frames, write_atomic, write_frames};
use rofusion::training::{log_csv, prepare_samples, split_frames, train_on, Split};
use rofusion::{CodecMode, Frame};
use sha2::{Digest, Sha256};

use crate::commands::{detect_all, write_report};
use crate::exit::{CliResult, Exit};

pub const VARIANTS: [&str; 3] = ["w/o LC", "radar-only", "full"];

/// Evaluation modes reported for the full model.
pub const MODES: [(&str, BoxSource, OriginMode); 3] = [
    ("oracle/gt", BoxSource::Oracle, OriginMode::Gt),
    ("jittered/gt", BoxSource::Jittered, OriginMode::Gt),
    ("oracle/hLC", BoxSource::Oracle, OriginMode::Hlc),
];

/// Config of each variant derived from `base`.
pub fn variant_config(base: &ExperimentConfig, name: &str) -> CliResult<ExperimentConfig> {
    let mut cfg = base.clone();
    cfg.codec.mode = CodecMode::Local;
    cfg.arch.use_image = true;
    match name {
        "w/o LC" => cfg.codec.mode = CodecMode::Global,
        "radar-only" => cfg.arch.use_image = false,
        "full" => {}
        other => return Err(Exit::config(format!("unknown ablation variant `{other}`"))),
    }
    cfg.arch.cls_out = cfg.codec.cls_width();
    cfg.validate()?;
    Ok(cfg)
}

fn slug(name: &str) -> String {
    name.replace("w/o ", "wo_").replace(['-', '/'], "_")
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| Exit::io(format!("{}: {e}", path.display())))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

#[derive(Clone, Debug)]
pub struct VariantResult {
    pub name: &'static str,
    /// Oracle boxes, ground-truth origin.
    pub report: EvalReport,
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct AblationOutcome {
    pub variants: Vec<VariantResult>,
    /// Full model under each of [`MODES`].
    pub modes: Vec<(&'static str, EvalReport)>,
    /// SHA-256 of the train, val and test frame files.
    pub hashes: [String; 3],
}

impl AblationOutcome {
    pub fn variant(&self, name: &str) -> Option<&VariantResult> {
        self.variants.iter().find(|v| v.name == name)
    }

    pub fn mode(&self, name: &str) -> Option<&EvalReport> {
        self.modes.iter().find(|(n, _)| *n == name).map(|(_, r)| r)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,AP,AR,AR_easy,AR_hard,R_err_m,A_err_deg\n");
        for v in &self.variants {
            let m = &v.report;
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                v.name,
                opt(m.overall.ap),
                opt(m.overall.ar),
                opt(m.easy.ar),
                opt(m.hard.ar),
                opt(m.overall.range_err),
                opt(m.overall.angle_err)
            ));
        }
        s
    }

    pub fn modes_csv(&self) -> String {
        let mut s = String::from("mode,AP,AR,R_err_m,A_err_deg\n");
        for (name, r) in &self.modes {
            let m: &SplitMetrics = &r.overall;
            s.push_str(&format!("{name},{},{},{},{}\n", opt(m.ap), opt(m.ar), opt(m.range_err), opt(m.angle_err)));
        }
        s
    }

    /// Overall / easy / hard AR with R and A, one row per variant.
    pub fn to_table(&self) -> String {
        let f = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$}"));
        let mut s = format!(
            "{:<12} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            "variant", "AP(%)", "AR(%)", "easy", "hard", "R(m)", "A(deg)"
        );
        for v in &self.variants {
            let m = &v.report;
            s.push_str(&format!(
                "{:<12} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
                v.name,
                f(m.overall.ap, 2),
                f(m.overall.ar, 2),
                f(m.easy.ar, 2),
                f(m.hard.ar, 2),
                f(m.overall.range_err, 3),
                f(m.overall.angle_err, 3)
            ));
        }
        s
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x}"))
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    write_atomic(path, text.as_bytes()).map_err(|e| Exit::from(e).context(path.display()))
}

/// Reads a frame file after checking it still has the recorded hash.
fn read_checked(path: &Path, hash: &str) -> CliResult<Vec<Frame>> {
    let now = sha256_file(path)?;
    if now != hash {
        return Err(Exit::failure(format!("{} changed during the ablation: {now} != {hash}", path.display())));
    }
    read_frames(path).map_err(|e| Exit::from(e).context(path.display()))
}

/// Simulates the splits once into `out`, then trains and evaluates every
/// variant from those files. Writes checkpoints, logs and reports.
pub fn run_ablation(base: &ExperimentConfig, out: &Path) -> CliResult<AblationOutcome> {
    let configs: Vec<ExperimentConfig> = VARIANTS.iter().map(|v| variant_config(base, v)).collect::<CliResult<_>>()?;
    std::fs::create_dir_all(out).map_err(|e| Exit::io(format!("{}: {e}", out.display())))?;

    let files: [PathBuf; 3] = [out.join("train.jsonl"), out.join("val.jsonl"), out.join("test.jsonl")];
    for (split, path) in [Split::Train, Split::Val, Split::Test].into_iter().zip(&files) {
        let frames = split_frames(base, split)?;
        write_frames(path, &frames).map_err(|e| Exit::from(e).context(path.display()))?;
    }
    let hashes = [sha256_file(&files[0])?, sha256_file(&files[1])?, sha256_file(&files[2])?];
    write(
        &out.join("hashes.txt"),
        &files
            .iter()
            .zip(&hashes)
            .map(|(f, h)| format!("{h}  {}\n", f.file_name().unwrap_or_default().to_string_lossy()))
            .collect::<String>(),
    )?;

    let mut variants = Vec::new();
    let mut modes = Vec::new();
    for (name, cfg) in VARIANTS.into_iter().zip(&configs) {
        let t0 = Instant::now();
        let train_frames = read_checked(&files[0], &hashes[0])?;
        let val_frames = read_checked(&files[1], &hashes[1])?;
        let aug = cfg.train.augment_non_trivial;
        let train = prepare_samples(&train_frames, &cfg.sim, &cfg.codec, aug)?;
        let val = prepare_samples(&val_frames, &cfg.sim, &cfg.codec, aug)?;
        let outcome = train_on(cfg, &train, &val, None)?;
        let train_seconds = t0.elapsed().as_secs_f64();
        let slug = slug(name);
        let ck_path = out.join(format!("{slug}.ckpt"));
        outcome.best.save(&ck_path).map_err(|e| Exit::from(e).context(ck_path.display()))?;
        write(&out.join(format!("{slug}_log.csv")), &log_csv(&outcome.log))?;

        let t1 = Instant::now();
        let test = read_checked(&files[2], &hashes[2])?;
        let mode_list: &[(&str, BoxSource, OriginMode)] = if name == "full" { &MODES } else { &MODES[..1] };
        for &(mode, box_source, origin) in mode_list {
            let mut exp = cfg.clone();
            exp.eval.box_source = box_source;
            exp.eval.origin_mode = origin;
            let results = detect_all(&outcome.best, &exp, &test)?;
            let report = compute_metrics(&results, exp.eval.iou_thr, &exp.eval.template());
            write_report(&report, &out.join(format!("{slug}_{}.csv", slug_mode(mode))))?;
            if name == "full" {
                modes.push((mode, report.clone()));
            }
            if mode == MODES[0].0 {
                variants.push(VariantResult {
                    name,
                    report,
                    train_seconds,
                    eval_seconds: 0.0,
                });
            }
        }
        if let Some(v) = variants.last_mut() {
            v.eval_seconds = t1.elapsed().as_secs_f64();
        }
        info!("{name}: trained in {train_seconds:.1}s");
    }
    let outcome = AblationOutcome { variants, modes, hashes };
    write(&out.join("ablation.csv"), &outcome.to_csv())?;
    write(&out.join("ablation.txt"), &outcome.to_table())?;
    write(&out.join("eval_modes.csv"), &outcome.modes_csv())?;
    Ok(outcome)
}

fn slug_mode(mode: &str) -> String {
    mode.replace('/', "_").to_lowercase()
}
