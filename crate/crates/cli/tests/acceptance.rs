//! Acceptance run: one `[PASS]`/`[FAIL]` line per criterion.
//!
//! Criterion 6 is known red (see README, "Known gaps"). Its line still
//! prints FAIL; the process exits non-zero only for unexpected failures.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rofusion::autograd::Tape;
use rofusion::checkpoint::{Checkpoint, CheckpointMeta};
use rofusion::codec::{decode, encode};
use rofusion::config::ExperimentConfig;
use rofusion::evaluation::{box_iou, center_iou, compute_metrics, BoxTemplate, Detection, FrameResult};
use rofusion::frame_io::{frames_to_jsonl, write_frames};
use rofusion::fusion::{forward, init_params};
use rofusion::geometry::{cartesian_to_polar, polar_to_cartesian, project_point};
use rofusion::rng::StreamRng;
use rofusion::sim::{generate_frames, Difficulty, ObjectGT};
use rofusion::training::{compute_loss, train, EpochLog};
use rofusion::{ArchConfig, CameraExtrinsics, CameraIntrinsics, CodecConfig, LocalTarget, SignConvention, Tensor};
use rofusion_cli::ablation::{run_ablation, AblationOutcome};
use rofusion_cli::commands::{gradcheck, gradcheck_failures};

const KNOWN_RED: &[u32] = &[6];

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn c1_gradient_suite() -> Outcome {
    let t0 = Instant::now();
    let entries = gradcheck(&ArchConfig::small(), None).map_err(|e| e.message)?;
    let secs = t0.elapsed().as_secs_f64();
    let failed = gradcheck_failures(&entries);
    let worst = entries.iter().map(|e| e.report.max_rel_error).fold(0.0, f64::max);
    ensure(failed.is_empty(), format!("failing ops: {}", failed.join(", ")))?;
    ensure(secs < 30.0, format!("took {secs:.1}s"))?;
    Ok(format!("{} entries, worst rel err {worst:.2e}, {secs:.2}s", entries.len()))
}

fn c2_codec() -> Outcome {
    let cfg = CodecConfig::default();
    let mut rng = StreamRng::new(20, 0);
    let (hr, ha) = (cfg.span_r(), cfg.span_a());
    let mut worst = (0.0f64, 0.0f64);
    for _ in 0..100_000 {
        let p = (rng.uniform_range(5.0, 100.0), rng.uniform_range(-50.0, 50.0));
        let c = (p.0 + rng.uniform_range(-hr, hr), p.1 + rng.uniform_range(-ha, ha));
        let t = encode(p, c, &cfg).map_err(|e| e.to_string())?;
        ensure(t.residual.0.abs() <= cfg.r_bin_width / 2.0 + 1e-12, format!("range residual {} at {p:?}->{c:?}", t.residual.0))?;
        ensure(t.residual.1.abs() <= cfg.az_bin_width / 2.0 + 1e-12, format!("azimuth residual {} at {p:?}->{c:?}", t.residual.1))?;
        let d = decode(p, t.az_bin, t.r_bin, t.residual, &cfg).map_err(|e| e.to_string())?;
        worst = (worst.0.max((d.0 - c.0).abs()), worst.1.max((d.1 - c.1).abs()));
    }
    ensure(worst.0 <= 1e-12 && worst.1 <= 1e-12, format!("round-trip error {worst:?}"))?;

    // Dyadic coordinates keep `center - point` exact, so targets must match bitwise.
    let q = 1.0 / 1024.0;
    let delta = (1331.0 * q, -563.0 * q);
    let reference = encode((50.0, 0.0), (50.0 + delta.0, delta.1), &cfg).map_err(|e| e.to_string())?;
    let bits = |t: &LocalTarget<f64>| (t.r_bin, t.az_bin, t.residual.0.to_bits(), t.residual.1.to_bits(), t.axis_mask);
    for _ in 0..100 {
        let p = (10.0 + rng.int_range(0, 80 * 1024) as f64 * q, -40.0 + rng.int_range(0, 80 * 1024) as f64 * q);
        let c = (p.0 + delta.0, p.1 + delta.1);
        ensure(c.0 - p.0 == delta.0 && c.1 - p.1 == delta.1, "offset not exact")?;
        let t = encode(p, c, &cfg).map_err(|e| e.to_string())?;
        ensure(bits(&t) == bits(&reference), format!("target at {p:?} differs from the reference"))?;
    }
    Ok(format!("1e5 round trips, worst error ({:.1e} m, {:.1e} deg); 100 positions bitwise equal", worst.0, worst.1))
}

/// Rotation from a unit quaternion `(w, x, y, z)`.
fn quat_rotation(q: [f64; 4]) -> [[f64; 3]; 3] {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / n);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Homogeneous 3×4 projection `P = K·[R | t]`, then dehomogenize.
fn oracle_projection(k: [f64; 4], sign: f64, r: &[[f64; 3]; 3], t: [f64; 3], xyz: [f64; 3]) -> (f64, f64) {
    let kmat = [[k[0], 0.0, sign * k[2]], [0.0, k[1], sign * k[3]], [0.0, 0.0, 1.0]];
    let rt: Vec<[f64; 4]> = (0..3).map(|i| [r[i][0], r[i][1], r[i][2], t[i]]).collect();
    let mut p = [[0.0; 4]; 3];
    for i in 0..3 {
        for j in 0..4 {
            p[i][j] = (0..3).map(|m| kmat[i][m] * rt[m][j]).sum();
        }
    }
    let h = [xyz[0], xyz[1], xyz[2], 1.0];
    let img: Vec<f64> = p.iter().map(|row| row.iter().zip(&h).map(|(a, b)| a * b).sum()).collect();
    (img[0] / img[2], img[1] / img[2])
}

fn c3_geometry() -> Outcome {
    let mut rng = StreamRng::new(30, 0);
    let mut worst_px = 0.0f64;
    let mut cases = 0;
    while cases < 1000 {
        let k = [rng.uniform_range(300.0, 2000.0), rng.uniform_range(300.0, 2000.0), rng.uniform_range(-800.0, 800.0), rng.uniform_range(-600.0, 600.0)];
        let plus = rng.bernoulli(0.5);
        let conv = if plus { SignConvention::StandardPlus } else { SignConvention::PaperMinus };
        let q = [rng.normal(0.0, 1.0) + 4.0, rng.normal(0.0, 0.2), rng.normal(0.0, 0.2), rng.normal(0.0, 0.2)];
        let rot = quat_rotation(q);
        let t = [rng.uniform_range(-1.0, 1.0), rng.uniform_range(-1.0, 1.0), rng.uniform_range(-1.0, 1.0)];
        let xyz = [rng.uniform_range(-20.0, 20.0), rng.uniform_range(-5.0, 5.0), rng.uniform_range(2.0, 100.0)];
        let intr = CameraIntrinsics::new(k[0], k[1], k[2], k[3], conv).map_err(|e| e.to_string())?;
        let extr = CameraExtrinsics::new(rot, t).map_err(|e| e.to_string())?;
        let Ok(got) = project_point(xyz, &intr, &extr) else {
            continue;
        };
        let want = oracle_projection(k, if plus { 1.0 } else { -1.0 }, &rot, t, xyz);
        worst_px = worst_px.max((got.0 - want.0).abs()).max((got.1 - want.1).abs());
        cases += 1;
    }
    ensure(worst_px <= 1e-9, format!("projection error {worst_px:e} px"))?;
    let mut worst_rt = 0.0f64;
    for _ in 0..1000 {
        let (r, a) = (rng.uniform_range(0.5, 150.0), rng.uniform_range(-89.0, 89.0));
        let (x, y) = polar_to_cartesian(r, a);
        let (r2, a2) = cartesian_to_polar(x, y);
        worst_rt = worst_rt.max((r2 - r).abs()).max((a2 - a).abs());
        let (x, y) = (rng.uniform_range(-100.0, 100.0), rng.uniform_range(-100.0, 100.0));
        let (r, a) = cartesian_to_polar(x, y);
        let (x2, y2) = polar_to_cartesian(r, a);
        worst_rt = worst_rt.max((x2 - x).abs()).max((y2 - y).abs());
    }
    ensure(worst_rt <= 1e-9, format!("polar round-trip error {worst_rt:e}"))?;
    Ok(format!("1000 projections, worst {worst_px:.1e} px; polar round trip worst {worst_rt:.1e}"))
}

/// IoU by counting 1 cm cells whose centers fall inside each template.
/// The grid is anchored at the ground-truth box corner.
fn raster_iou(gt_xy: (f64, f64), det_xy: (f64, f64), t: &BoxTemplate) -> f64 {
    const H: f64 = 0.01;
    let g0 = (gt_xy.0 - t.length / 2.0, gt_xy.1 - t.width / 2.0);
    let d0 = (det_xy.0 - t.length / 2.0 - g0.0, det_xy.1 - t.width / 2.0 - g0.1);
    let inside = |x: f64, lo: f64, len: f64| x >= lo && x <= lo + len;
    let x_lo = d0.0.min(0.0);
    let y_lo = d0.1.min(0.0);
    let nx = ((d0.0.max(0.0) + t.length - x_lo) / H).ceil() as i64 + 1;
    let ny = ((d0.1.max(0.0) + t.width - y_lo) / H).ceil() as i64 + 1;
    let i0 = (x_lo / H).floor() as i64;
    let j0 = (y_lo / H).floor() as i64;
    let (mut inter, mut union) = (0u64, 0u64);
    for i in i0..i0 + nx {
        let x = (i as f64 + 0.5) * H;
        let (gx, dx) = (inside(x, 0.0, t.length), inside(x, d0.0, t.length));
        if !gx && !dx {
            continue;
        }
        for j in j0..j0 + ny {
            let y = (j as f64 + 0.5) * H;
            let g = gx && inside(y, 0.0, t.width);
            let d = dx && inside(y, d0.1, t.width);
            inter += (g && d) as u64;
            union += (g || d) as u64;
        }
    }
    inter as f64 / union as f64
}

fn c4_iou() -> Outcome {
    let t = BoxTemplate::default();
    let mut rng = StreamRng::new(40, 0);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let gt_polar = (rng.uniform_range(10.0, 100.0), rng.uniform_range(-30.0, 30.0));
        let gt_xy = polar_to_cartesian(gt_polar.0, gt_polar.1);
        // Offsets on the 1 cm lattice, so cell-center counting is exact.
        let off = (rng.int_range(0, 1000) as f64 / 100.0 - 5.0, rng.int_range(0, 440) as f64 / 100.0 - 2.2);
        let det_xy = (gt_xy.0 + off.0, gt_xy.1 + off.1);
        let (dr, da) = cartesian_to_polar(det_xy.0, det_xy.1);
        let gt = ObjectGT {
            id: 0,
            center_r: gt_polar.0,
            center_a: gt_polar.1,
            length: 4.0,
            width_deg: 1.0,
            velocity: 0.0,
            z_height: 0.0,
        };
        let det = Detection {
            center_r: dr,
            center_a: da,
            confidence: 1.0,
            source_object_id: None,
        };
        let got = box_iou(&det, &gt, &t);
        let want = raster_iou(gt_xy, det_xy, &t);
        worst = worst.max((got - want).abs());
    }
    ensure(worst <= 1e-3, format!("max |IoU - raster| = {worst:e}"))?;
    // L/3 has no exact binary form, so the algebraic 0.5 holds to rounding.
    let analytic = center_iou((30.0, 0.0), (30.0 + t.length / 3.0, 0.0), &t);
    ensure((analytic - 0.5).abs() <= 1e-12, format!("L/3 offset gives {analytic}"))?;
    Ok(format!("1000 pairs, worst deviation {worst:.1e}; L/3 offset IoU = {analytic}"))
}

fn c5_loss_identities() -> Outcome {
    let codec = CodecConfig::default();
    let n = 6;
    let mut rng = StreamRng::new(50, 0);
    let targets: Vec<LocalTarget<f64>> = (0..n)
        .map(|i| LocalTarget {
            az_bin: i % 5,
            r_bin: (3 * i) % 11,
            residual: (rng.uniform_range(-0.25, 0.25), rng.uniform_range(-0.2, 0.2)),
            axis_mask: [true, true],
        })
        .collect();
    let mut tape = Tape::new();
    let cls = tape.leaf(Tensor::zeros(n, codec.cls_width()));
    let reg = tape.leaf(Tensor::zeros(n, 2));
    let v = compute_loss(&mut tape, cls, reg, &targets, 10.0, &codec).map_err(|e| e.to_string())?.values(&tape);
    let uniform = v.ce_r + v.ce_a;
    let want = 11f64.ln() + 5f64.ln();
    ensure((uniform - want).abs() <= 1e-9, format!("uniform CE {uniform} vs ln 11 + ln 5 = {want}"))?;

    let logits: Vec<f64> = (0..n * codec.cls_width()).map(|_| rng.uniform_range(-2.0, 2.0)).collect();
    let regs: Vec<f64> = (0..n * 2).map(|_| rng.uniform_range(-0.5, 0.5)).collect();
    let loss_at = |alpha: f64, targets: &[LocalTarget<f64>], logits: &[f64]| {
        let mut tape = Tape::new();
        let cls = tape.leaf(Tensor::from_vec(n, codec.cls_width(), logits.to_vec()).unwrap());
        let reg = tape.leaf(Tensor::from_vec(n, 2, regs.clone()).unwrap());
        let nodes = compute_loss(&mut tape, cls, reg, targets, alpha, &codec).unwrap();
        let grads = tape.backward(nodes.total).unwrap();
        (nodes.values(&tape), grads.wrt(cls), grads.wrt(reg))
    };
    let (base, _, _) = loss_at(0.0, &targets, &logits);
    for alpha in [0.5, 1.0, 10.0, 37.25] {
        let (v, _, _) = loss_at(alpha, &targets, &logits);
        ensure(v.reg == base.reg && v.ce_r == base.ce_r && v.ce_a == base.ce_a, "components depend on alpha")?;
        ensure(v.total == (base.ce_r + base.ce_a) + alpha * base.reg, format!("total at alpha {alpha} is not CE + alpha*reg"))?;
    }

    // Rows 1 and 4 fully masked, row 2 supervises range only.
    let mut masked = targets.clone();
    masked[1].axis_mask = [false, false];
    masked[4].axis_mask = [false, false];
    masked[2].axis_mask = [true, false];
    let (v0, gcls, greg) = loss_at(10.0, &masked, &logits);
    let nr = codec.range_classes();
    for i in [1, 4] {
        ensure(gcls.row(i).iter().all(|&g| g == 0.0) && greg.row(i).iter().all(|&g| g == 0.0), format!("row {i} has analytic gradient"))?;
    }
    ensure(gcls.row(2)[nr..].iter().all(|&g| g == 0.0) && greg.row(2)[1] == 0.0, "masked azimuth axis has gradient")?;
    let step = 1e-3;
    let mut worst_fd = 0.0f64;
    for (i, cols) in [(1usize, 0..codec.cls_width()), (4, 0..codec.cls_width()), (2, nr..codec.cls_width())] {
        for c in cols {
            let mut plus = logits.clone();
            plus[i * codec.cls_width() + c] += step;
            let mut minus = logits.clone();
            minus[i * codec.cls_width() + c] -= step;
            let fd = (loss_at(10.0, &masked, &plus).0.total - loss_at(10.0, &masked, &minus).0.total) / (2.0 * step);
            worst_fd = worst_fd.max(fd.abs());
        }
    }
    ensure(worst_fd == 0.0, format!("finite difference through masked logits {worst_fd:e}"))?;
    Ok(format!("uniform CE {uniform:.12} ; alpha-linearity exact ; masked finite difference {worst_fd} (loss {:.4})", v0.total))
}

fn c6_overfit() -> Outcome {
    let exp = ExperimentConfig::preset("overfit-smoke").map_err(|e| e.to_string())?;
    let t0 = Instant::now();
    let a = train(&exp).map_err(|e| e.to_string())?;
    let b = train(&exp).map_err(|e| e.to_string())?;
    let secs = t0.elapsed().as_secs_f64();
    let losses = |log: &[EpochLog]| log.iter().map(|e| e.train_loss.to_bits()).collect::<Vec<_>>();
    ensure(losses(&a.log) == losses(&b.log) && a.best.params == b.best.params, "two runs with the same seed differ")?;
    ensure(secs / 2.0 < 180.0, format!("one run took {:.1}s", secs / 2.0))?;
    let first = a.log[0].train_loss;
    let last = a.log.last().unwrap().train_loss;
    let ratio = last / first;
    let detail = format!("{} epochs, loss {first:.4} -> {last:.4}, ratio {ratio:.4} (need < 0.05), deterministic, {:.1}s per run", a.log.len(), secs / 2.0);
    ensure(a.log.len() == 200 && ratio < 0.05, detail.clone())?;
    Ok(detail)
}

fn c7_benchmark(ab: &AblationOutcome) -> Outcome {
    let full = ab.variant("full").ok_or("no full variant")?;
    let m = &full.report.overall;
    let ar = m.ar.unwrap_or(0.0);
    let r = m.range_err.unwrap_or(f64::INFINITY);
    let secs = full.train_seconds + full.eval_seconds;
    let detail = format!("AR {ar:.2}%, R {r:.3} m, A {:.3} deg, {secs:.0}s", m.angle_err.unwrap_or(f64::NAN));
    ensure(ar >= 95.0 && r <= 0.15 && secs < 900.0, detail.clone())?;
    Ok(detail)
}

fn c8_directional(ab: &AblationOutcome) -> Outcome {
    let ar = |name: &str| ab.variant(name).and_then(|v| v.report.overall.ar).unwrap_or(f64::NAN);
    let mode = |name: &str| ab.mode(name).and_then(|r| r.overall.ar).unwrap_or(f64::NAN);
    let (full, radar, wo) = (ar("full"), ar("radar-only"), ar("w/o LC"));
    let wo_report = &ab.variant("w/o LC").ok_or("no w/o LC variant")?.report;
    let (easy, hard) = (wo_report.easy.ar.unwrap_or(f64::NAN), wo_report.hard.ar.unwrap_or(f64::NAN));
    let (oracle, jittered, hlc) = (mode("oracle/gt"), mode("jittered/gt"), mode("oracle/hLC"));
    let detail = format!(
        "full {full:.2} >= radar-only {radar:.2} >= w/o LC {wo:.2} (gap {:.1}); oracle {oracle:.2} >= jittered {jittered:.2}; gt {oracle:.2} >= hLC {hlc:.2}; w/o LC easy {easy:.2} >= hard {hard:.2}",
        full - wo
    );
    ensure(full >= radar && radar >= wo && wo <= full - 20.0, format!("ablation ordering: {detail}"))?;
    ensure(oracle >= jittered, format!("box source: {detail}"))?;
    ensure(oracle >= hlc, format!("origin: {detail}"))?;
    ensure(easy >= hard, format!("difficulty: {detail}"))?;
    Ok(detail)
}

fn c9_metrics() -> Outcome {
    let t = BoxTemplate::default();
    let gt = |id, r, a| ObjectGT {
        id,
        center_r: r,
        center_a: a,
        length: 4.0,
        width_deg: 2.0,
        velocity: 0.0,
        z_height: 0.0,
    };
    let det = |r, a, c| Detection {
        center_r: r,
        center_a: a,
        confidence: c,
        source_object_id: None,
    };
    let gts = vec![gt(0, 40.0, 0.0), gt(1, 60.0, 10.0), gt(2, 80.0, -12.0)];
    let perfect: Vec<FrameResult> = (0..3)
        .map(|i| FrameResult {
            frame_id: i,
            difficulty: if i == 2 { Difficulty::Hard } else { Difficulty::Easy },
            detections: gts.iter().map(|g| det(g.center_r, g.center_a, 0.5 + 0.1 * g.id as f64)).collect(),
            gts: gts.clone(),
        })
        .collect();
    let m = compute_metrics(&perfect, 0.5, &t).overall;
    ensure(
        m.ap == Some(100.0) && m.ar == Some(100.0) && m.range_err == Some(0.0) && m.angle_err == Some(0.0),
        format!("perfect input gives {m:?}"),
    )?;
    let walked = vec![FrameResult {
        frame_id: 0,
        difficulty: Difficulty::Easy,
        detections: vec![det(40.0, 0.0, 0.9), det(20.0, 20.0, 0.8)],
        gts: vec![gt(0, 40.0, 0.0), gt(1, 70.0, -5.0)],
    }];
    let m2 = compute_metrics(&walked, 0.5, &t).overall;
    ensure(m2.ar == Some(50.0) && m2.ap == Some(50.0), format!("2-GT/1-TP/1-FP gives {m2:?}"))?;
    Ok(format!("perfect AP=AR={}, R=A=0; 2-GT/1-TP/1-FP AR={} AP={}", m.ap.unwrap(), m2.ar.unwrap(), m2.ap.unwrap()))
}

fn c10_persistence() -> Outcome {
    let exp = ExperimentConfig::default();
    let params = init_params::<f64>(&exp.arch, 99).map_err(|e| e.to_string())?;
    let ck = Checkpoint::from_training(&exp, &params, None, CheckpointMeta::empty(&exp));
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.ckpt");
    ck.save(&path).map_err(|e| e.to_string())?;
    let loaded = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    ensure(loaded == ck, "loaded checkpoint differs")?;

    let mut rng = StreamRng::new(100, 0);
    let n = 9;
    let radar = Tensor::from_vec(n, exp.arch.c_radar_in, (0..n * exp.arch.c_radar_in).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap();
    let image = Tensor::from_vec(n, exp.arch.c_image_in, (0..n * exp.arch.c_image_in).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap();
    let groups = [0, 0, 0, 1, 1, 2, 2, 2, 2];
    let run = |p: &rofusion::Params<f64>| forward(&radar, &image, &groups, p, &exp.arch).unwrap();
    let (cls_a, reg_a) = run(&params);
    let (cls_b, reg_b) = run(&loaded.params_f64());
    // Weights are stored as f32: compare at that precision.
    let worst = cls_a
        .data()
        .iter()
        .zip(cls_b.data())
        .chain(reg_a.data().iter().zip(reg_b.data()))
        .map(|(a, b)| (a - b).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max);
    ensure(worst <= 1e-5, format!("forward deviation {worst:e} after reload"))?;
    let (cls_c, _) = run(&params.cast::<f32>().cast::<f64>());
    ensure(cls_c == cls_b, "reloaded forward differs from the f32-rounded parameters")?;

    let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    for pos in [0, 9, 20, bytes.len() / 2, bytes.len() - 1] {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x10;
        ensure(Checkpoint::from_bytes(&bad).is_err(), format!("flipped byte {pos} accepted"))?;
    }
    ensure(Checkpoint::from_bytes(&bytes[..bytes.len() - 5]).is_err(), "truncated file accepted")?;

    let frames_a = generate_frames(&exp.sim, 1234, 20).map_err(|e| e.to_string())?;
    let frames_b = generate_frames(&exp.sim, 1234, 20).map_err(|e| e.to_string())?;
    let (pa, pb) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    write_frames(&pa, &frames_a).map_err(|e| e.to_string())?;
    write_frames(&pb, &frames_b).map_err(|e| e.to_string())?;
    let (ba, bb) = (std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
    ensure(ba == bb && ba == frames_to_jsonl(&frames_a).unwrap().into_bytes(), "frame files differ for the same seed")?;
    Ok(format!("forward deviation {worst:.1e} after f32 reload, 6 corruptions rejected, {} frame bytes reproduced", ba.len()))
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    })
}

fn run_shared_ablation(dir: &std::path::Path) -> Result<AblationOutcome, String> {
    let cfg = ExperimentConfig::preset("ablation").map_err(|e| e.to_string())?;
    catch_unwind(AssertUnwindSafe(|| run_ablation(&cfg, dir)))
        .map_err(|_| "ablation run panicked".to_string())?
        .map_err(|e| e.message)
}

fn main() {
    // `cargo test -- --list` and filters from other targets pass through here.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    // Numeric arguments select criteria: `cargo test --test acceptance -- 2 4`.
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |id: u32| only.is_empty() || only.contains(&id);
    let mut failed = Vec::new();
    let mut ran = 0;
    let mut report = |id: u32, name: &str, outcome: Outcome| {
        ran += 1;
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d.as_str()),
            Err(d) => ("FAIL", d.as_str()),
        };
        println!("[{tag}] {id:>2} {name}: {detail}");
        if outcome.is_err() {
            failed.push(id);
        }
    };
    if wanted(1) {
        report(1, "gradient suite", guarded(c1_gradient_suite));
    }
    if wanted(2) {
        report(2, "codec round trip", guarded(c2_codec));
    }
    if wanted(3) {
        report(3, "geometry oracle", guarded(c3_geometry));
    }
    if wanted(4) {
        report(4, "IoU oracle", guarded(c4_iou));
    }
    if wanted(5) {
        report(5, "loss identities", guarded(c5_loss_identities));
    }
    if wanted(6) {
        report(6, "overfit convergence", guarded(c6_overfit));
    }

    // Criteria 7 and 8 share one ablation run; its full variant is the
    // default-preset model.
    let dir = tempfile::tempdir().expect("tempdir");
    match (wanted(7) || wanted(8)).then(|| run_shared_ablation(dir.path())) {
        None => {}
        Some(Ok(ab)) => {
            if wanted(7) {
                report(7, "synthetic benchmark", guarded(|| c7_benchmark(&ab)));
            }
            if wanted(8) {
                report(8, "directional orderings", guarded(|| c8_directional(&ab)));
            }
        }
        Some(Err(e)) => {
            report(7, "synthetic benchmark", Err(e.clone()));
            report(8, "directional orderings", Err(e));
        }
    }
    if wanted(9) {
        report(9, "metrics harness", guarded(c9_metrics));
    }
    if wanted(10) {
        report(10, "persistence", guarded(c10_persistence));
    }

    let unexpected: Vec<u32> = failed.iter().copied().filter(|id| !KNOWN_RED.contains(id)).collect();
    println!("acceptance: {} of {ran} passed; failed {failed:?}; known red {KNOWN_RED:?}", ran - failed.len());
    if !unexpected.is_empty() {
        std::process::exit(1);
    }
}
