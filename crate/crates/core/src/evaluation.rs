//! Per-object aggregation, center-template IoU matching and AP/AR metrics.

use serde::{Deserialize, Serialize};

use crate::association::{associate, BBox2D, PointClass};
use crate::codec::{decode_target, heuristic_origin, CodecConfig};
use crate::error::{Error, Result};
use crate::features::synth_features;
use crate::fusion::{predict_groups, ArchConfig, Params};
use crate::geometry::polar_to_cartesian;
use crate::sim::{Difficulty, Frame, ObjectGT, SimConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxSource {
    /// Ground-truth boxes.
    Oracle,
    /// Emulated detector output.
    Jittered,
}

impl BoxSource {
    pub fn boxes(self, frame: &Frame) -> &[BBox2D] {
        match self {
            BoxSource::Oracle => &frame.gt_boxes,
            BoxSource::Jittered => &frame.detector_boxes,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OriginMode {
    /// Candidates are filtered against the true object center.
    #[serde(rename = "gt")]
    Gt,
    /// Candidates are filtered against the heuristic origin.
    #[serde(rename = "hLC")]
    Hlc,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_thr: f64,
    pub template_length: f64,
    pub template_width: f64,
    pub box_source: BoxSource,
    pub origin_mode: OriginMode,
    /// Object length assumed by the heuristic origin.
    pub obj_length_prior: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thr: 0.5,
            template_length: 4.0,
            template_width: 1.8,
            box_source: BoxSource::Oracle,
            origin_mode: OriginMode::Gt,
            obj_length_prior: 4.0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_thr > 0.0 && self.iou_thr <= 1.0) {
            return Err(Error::config("eval.iou_thr", "must lie in (0, 1]"));
        }
        if !(self.template_length > 0.0 && self.template_width > 0.0) {
            return Err(Error::config("eval.template_length/template_width", "must be positive"));
        }
        if !(self.obj_length_prior >= 0.0) {
            return Err(Error::config("eval.obj_length_prior", "must be non-negative"));
        }
        Ok(())
    }

    pub fn template(&self) -> BoxTemplate {
        BoxTemplate {
            length: self.template_length,
            width: self.template_width,
        }
    }
}

/// Axis-aligned box placed at every center; length along x.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxTemplate {
    pub length: f64,
    pub width: f64,
}

impl Default for BoxTemplate {
    fn default() -> Self {
        Self { length: 4.0, width: 1.8 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub center_r: f64,
    pub center_a: f64,
    pub confidence: f64,
    /// Candidate set identity; never used for matching.
    pub source_object_id: Option<u32>,
}

/// One detection per group: confidence-weighted mean center, maximum
/// confidence. Groups are `0..=max(groups)`; empty ids are skipped.
pub fn aggregate_detections(centers: &[(f64, f64)], confidences: &[f64], groups: &[usize]) -> Vec<Detection> {
    let n_groups = groups.iter().max().map_or(0, |&g| g + 1);
    let mut acc = vec![(0.0, 0.0, 0.0, 0.0, 0usize, 0.0, 0.0); n_groups];
    for ((&(r, a), &c), &g) in centers.iter().zip(confidences).zip(groups) {
        let e = &mut acc[g];
        e.0 += c * r;
        e.1 += c * a;
        e.2 += c;
        e.3 = f64::max(e.3, c);
        e.4 += 1;
        e.5 += r;
        e.6 += a;
    }
    acc.into_iter()
        .filter(|e| e.4 > 0)
        .map(|(wr, wa, w, max_c, n, sr, sa)| {
            let (center_r, center_a) = if w > 0.0 {
                (wr / w, wa / w)
            } else {
                (sr / n as f64, sa / n as f64)
            };
            Detection {
                center_r,
                center_a,
                confidence: max_c,
                source_object_id: None,
            }
        })
        .collect()
}

/// IoU of two templates centered at polar positions `(r, a)`.
pub fn center_iou(a: (f64, f64), b: (f64, f64), t: &BoxTemplate) -> f64 {
    let (ax, ay) = polar_to_cartesian(a.0, a.1);
    let (bx, by) = polar_to_cartesian(b.0, b.1);
    let ox = (t.length - (ax - bx).abs()).max(0.0);
    let oy = (t.width - (ay - by).abs()).max(0.0);
    let inter = ox * oy;
    let area = t.length * t.width;
    inter / (2.0 * area - inter)
}

pub fn box_iou(det: &Detection, gt: &ObjectGT, t: &BoxTemplate) -> f64 {
    center_iou((det.center_r, det.center_a), (gt.center_r, gt.center_a), t)
}

/// Detections and ground truth of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameResult {
    pub frame_id: u64,
    pub difficulty: Difficulty,
    pub detections: Vec<Detection>,
    pub gts: Vec<ObjectGT>,
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct SplitMetrics {
    /// Percent; absent without ground truth.
    pub ap: Option<f64>,
    /// Percent; absent without ground truth.
    pub ar: Option<f64>,
    /// Mean |Δr| over matches, meters.
    pub range_err: Option<f64>,
    /// Mean |Δa| over matches, degrees.
    pub angle_err: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameRow {
    pub frame_id: u64,
    pub difficulty: Difficulty,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub overall: SplitMetrics,
    pub easy: SplitMetrics,
    pub hard: SplitMetrics,
    pub rows: Vec<FrameRow>,
}

pub const REPORT_CSV_HEADER: &str = "split,AP,AR,R_err_m,A_err_deg,TP,FP,FN";

impl EvalReport {
    pub fn subsets(&self) -> [(&'static str, &SplitMetrics); 3] {
        [("overall", &self.overall), ("easy", &self.easy), ("hard", &self.hard)]
    }

    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
        let mut s = format!("{REPORT_CSV_HEADER}\n");
        for (name, m) in self.subsets() {
            s.push_str(&format!(
                "{name},{},{},{},{},{},{},{}\n",
                f(m.ap),
                f(m.ar),
                f(m.range_err),
                f(m.angle_err),
                m.tp,
                m.fp,
                m.fn_
            ));
        }
        s
    }

    /// Overall / easy / hard columns of AR, R and A, with AP.
    pub fn to_table(&self) -> String {
        let f = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$}"));
        let mut s = String::new();
        s.push_str(&format!("{:<8} {:>7} {:>7} {:>8} {:>8} {:>5} {:>5} {:>5}\n", "split", "AP(%)", "AR(%)", "R(m)", "A(deg)", "TP", "FP", "FN"));
        for (name, m) in self.subsets() {
            s.push_str(&format!(
                "{:<8} {:>7} {:>7} {:>8} {:>8} {:>5} {:>5} {:>5}\n",
                name,
                f(m.ap, 2),
                f(m.ar, 2),
                f(m.range_err, 3),
                f(m.angle_err, 3),
                m.tp,
                m.fp,
                m.fn_
            ));
        }
        s
    }
}

struct Scored {
    confidence: f64,
    tp: bool,
}

/// Greedy matching of one frame: detections by descending confidence,
/// each to the unmatched ground truth of highest IoU at or above `thr`.
/// Returns per-detection match (gt index) in input order.
pub fn match_frame(dets: &[Detection], gts: &[ObjectGT], thr: f64, t: &BoxTemplate) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    let mut taken = vec![false; gts.len()];
    let mut out = vec![None; dets.len()];
    for i in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let iou = box_iou(&dets[i], gt, t);
            if iou >= thr && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            out[i] = Some(g);
        }
    }
    out
}

/// All-points interpolated average precision in `[0, 1]`.
fn average_precision(scored: &mut [Scored], n_gt: usize) -> f64 {
    scored.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(scored.len());
    for (k, s) in scored.iter().enumerate() {
        if s.tp {
            tp += 1;
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }
    // Precision envelope, right to left.
    for k in (0..points.len().saturating_sub(1)).rev() {
        points[k].1 = points[k].1.max(points[k + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for &(r, p) in &points {
        ap += (r - prev_r) * p;
        prev_r = r;
    }
    ap
}

pub fn compute_metrics(frames: &[FrameResult], iou_thr: f64, t: &BoxTemplate) -> EvalReport {
    #[derive(Default)]
    struct Acc {
        scored: Vec<Scored>,
        n_gt: usize,
        tp: usize,
        fp: usize,
        dr: f64,
        da: f64,
    }
    let mut overall = Acc::default();
    let mut easy = Acc::default();
    let mut hard = Acc::default();
    let mut rows = Vec::with_capacity(frames.len());
    for fr in frames {
        let matches = match_frame(&fr.detections, &fr.gts, iou_thr, t);
        let sub = match fr.difficulty {
            Difficulty::Easy => &mut easy,
            Difficulty::Hard => &mut hard,
        };
        let mut row = FrameRow {
            frame_id: fr.frame_id,
            difficulty: fr.difficulty,
            tp: 0,
            fp: 0,
            fn_: 0,
        };
        for acc in [&mut overall, &mut *sub] {
            acc.n_gt += fr.gts.len();
            for (d, m) in fr.detections.iter().zip(&matches) {
                acc.scored.push(Scored {
                    confidence: d.confidence,
                    tp: m.is_some(),
                });
                match m {
                    Some(g) => {
                        acc.tp += 1;
                        acc.dr += (d.center_r - fr.gts[*g].center_r).abs();
                        acc.da += (d.center_a - fr.gts[*g].center_a).abs();
                    }
                    None => acc.fp += 1,
                }
            }
        }
        row.tp = matches.iter().filter(|m| m.is_some()).count();
        row.fp = matches.len() - row.tp;
        row.fn_ = fr.gts.len() - row.tp;
        rows.push(row);
    }
    let finish = |mut a: Acc| -> SplitMetrics {
        let has_gt = a.n_gt > 0;
        SplitMetrics {
            ap: has_gt.then(|| 100.0 * average_precision(&mut a.scored, a.n_gt)),
            ar: has_gt.then(|| 100.0 * a.tp as f64 / a.n_gt as f64),
            range_err: (a.tp > 0).then(|| a.dr / a.tp as f64),
            angle_err: (a.tp > 0).then(|| a.da / a.tp as f64),
            tp: a.tp,
            fp: a.fp,
            fn_: a.n_gt - a.tp,
        }
    };
    EvalReport {
        overall: finish(overall),
        easy: finish(easy),
        hard: finish(hard),
        rows,
    }
}

/// Runs association, filtering, the network and decoding on one frame.
pub fn detect_frame(
    frame: &Frame,
    sim: &SimConfig,
    params: &Params<f64>,
    arch: &ArchConfig,
    codec: &CodecConfig,
    eval: &EvalConfig,
) -> Result<Vec<Detection>> {
    let features = synth_features(frame, sim)?;
    let mut groups = Vec::new();
    let mut classes = Vec::new();
    let mut sources = Vec::new();
    for mut set in associate(&frame.points, eval.box_source.boxes(frame)) {
        let gt_center = set.object_id.and_then(|id| frame.object(id)).map(|o| (o.center_r, o.center_a));
        let origin = match (eval.origin_mode, gt_center) {
            (OriginMode::Gt, Some(c)) => c,
            _ => heuristic_origin(&set, &frame.points, eval.obj_length_prior)?,
        };
        set.classify_against(&frame.points, origin, codec);
        let (idx, cls): (Vec<usize>, Vec<PointClass>) = set.foreground().unzip();
        if idx.is_empty() {
            continue;
        }
        groups.push(idx);
        classes.push(cls);
        sources.push(set.object_id);
    }
    let preds = predict_groups(frame, &features, &groups, params, arch, codec)?;
    let mut out = Vec::with_capacity(groups.len());
    for ((idx, cls), (pp, src)) in groups.iter().zip(&classes).zip(preds.iter().zip(&sources)) {
        let any_full = cls.contains(&PointClass::Full);
        let mut centers = Vec::with_capacity(idx.len());
        let mut conf = Vec::with_capacity(idx.len());
        for ((&i, &c), p) in idx.iter().zip(cls).zip(pp) {
            if any_full && c != PointClass::Full {
                continue;
            }
            let pt = &frame.points[i];
            centers.push(decode_target((pt.r, pt.a), p.az_bin(), p.range_bin(), p.residual, codec)?);
            conf.push(p.confidence);
        }
        let group_ids = vec![0; centers.len()];
        if let Some(mut d) = aggregate_detections(&centers, &conf, &group_ids).pop() {
            d.source_object_id = *src;
            out.push(d);
        }
    }
    Ok(out)
}

/// Detections for every frame, paired with ground truth.
pub fn run_detection(
    frames: &[Frame],
    sim: &SimConfig,
    params: &Params<f64>,
    arch: &ArchConfig,
    codec: &CodecConfig,
    eval: &EvalConfig,
) -> Result<Vec<FrameResult>> {
    frames
        .iter()
        .map(|f| {
            Ok(FrameResult {
                frame_id: f.frame_id,
                difficulty: f.difficulty,
                detections: detect_frame(f, sim, params, arch, codec, eval)?,
                gts: f.objects.clone(),
            })
        })
        .collect()
}
