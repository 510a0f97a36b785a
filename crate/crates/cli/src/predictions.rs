//! Predictions file: one CSV record per detection.

use std::collections::BTreeMap;
use std::path::Path;

use rofusion::evaluation::{Detection, FrameResult};
use rofusion::frame_io::write_atomic;
use rofusion::Frame;
use serde::{Deserialize, Serialize};

use crate::exit::{CliResult, Exit};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub frame_id: u64,
    pub center_r: f64,
    pub center_a: f64,
    pub confidence: f64,
}

pub fn records(results: &[FrameResult]) -> Vec<PredictionRecord> {
    results
        .iter()
        .flat_map(|r| {
            r.detections.iter().map(move |d| PredictionRecord {
                frame_id: r.frame_id,
                center_r: d.center_r,
                center_a: d.center_a,
                confidence: d.confidence,
            })
        })
        .collect()
}

pub fn to_csv(records: &[PredictionRecord]) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r)?;
    }
    if records.is_empty() {
        w.write_record(["frame_id", "center_r", "center_a", "confidence"])?;
    }
    w.into_inner().map_err(|e| Exit::io(e.to_string()))
}

pub fn write(path: &Path, records: &[PredictionRecord]) -> CliResult<()> {
    write_atomic(path, &to_csv(records)?).map_err(|e| Exit::from(e).context(path.display()))
}

pub fn read(path: &Path) -> CliResult<Vec<PredictionRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Exit::from(e).context(path.display()))?;
    let mut out = Vec::new();
    for rec in r.deserialize() {
        let rec: PredictionRecord = rec.map_err(|e| Exit::from(e).context(path.display()))?;
        if !(0.0..=1.0).contains(&rec.confidence) {
            return Err(Exit::config(format!(
                "{}: frame {} has confidence {} outside [0, 1]",
                path.display(),
                rec.frame_id,
                rec.confidence
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Pairs records with ground truth by frame id, keeping file order within
/// each frame. Records of unknown frames are an error.
pub fn join(frames: &[Frame], records: &[PredictionRecord]) -> CliResult<Vec<FrameResult>> {
    let mut by_frame: BTreeMap<u64, Vec<Detection>> = BTreeMap::new();
    for r in records {
        by_frame.entry(r.frame_id).or_default().push(Detection {
            center_r: r.center_r,
            center_a: r.center_a,
            confidence: r.confidence,
            source_object_id: None,
        });
    }
    let mut out = Vec::with_capacity(frames.len());
    for f in frames {
        out.push(FrameResult {
            frame_id: f.frame_id,
            difficulty: f.difficulty,
            detections: by_frame.remove(&f.frame_id).unwrap_or_default(),
            gts: f.objects.clone(),
        });
    }
    if let Some(id) = by_frame.keys().next() {
        return Err(Exit::config(format!("predictions reference frame {id}, which is not in the frame file")));
    }
    Ok(out)
}
