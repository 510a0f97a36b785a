//! Image–radar association: gate radar points by 2D boxes, then sort each
//! candidate by how its offset to the object center fits the bin lattice.

use log::debug;
use serde::{Deserialize, Serialize};

use crate::codec::{CodecConfig, CodecMode};
use crate::geometry::{in_bbox, RadarPoint};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox2D {
    pub u_min: f64,
    pub v_min: f64,
    pub u_max: f64,
    pub v_max: f64,
    #[serde(default)]
    pub object_id: Option<u32>,
    #[serde(default)]
    pub score: Option<f64>,
}

impl BBox2D {
    pub fn new(u_min: f64, v_min: f64, u_max: f64, v_max: f64) -> Self {
        Self {
            u_min,
            v_min,
            u_max,
            v_max,
            object_id: None,
            score: None,
        }
    }

    pub fn with_object(mut self, id: u32) -> Self {
        self.object_id = Some(id);
        self
    }

    pub fn is_well_formed(&self) -> bool {
        self.u_min <= self.u_max && self.v_min <= self.v_max
    }

    pub fn width(&self) -> f64 {
        self.u_max - self.u_min
    }

    pub fn height(&self) -> f64 {
        self.v_max - self.v_min
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.u_min + self.u_max), 0.5 * (self.v_min + self.v_max))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointClass {
    /// Both axes inside the lattice.
    Full,
    /// Only the range offset fits.
    RangeOnly,
    /// Only the azimuth offset fits.
    AzimuthOnly,
    Background,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub object_id: Option<u32>,
    pub bbox: BBox2D,
    /// Indices into the frame's point list, in ascending order.
    pub point_indices: Vec<usize>,
    /// Parallel to `point_indices`.
    pub point_class: Vec<PointClass>,
}

impl CandidateSet {
    /// Re-labels every candidate against `origin = (r, a)`. Global mode has
    /// no lattice to filter with, so every candidate stays full.
    pub fn classify_against(&mut self, points: &[RadarPoint], origin: (f64, f64), codec: &CodecConfig) {
        if codec.mode == CodecMode::Global {
            self.point_class = vec![PointClass::Full; self.point_indices.len()];
            return;
        }
        self.point_class = self
            .point_indices
            .iter()
            .map(|&i| classify_offset(points[i].r - origin.0, points[i].a - origin.1, codec))
            .collect();
    }

    /// Indices (into the frame) of candidates that are not background.
    pub fn foreground(&self) -> impl Iterator<Item = (usize, PointClass)> + '_ {
        self.point_indices
            .iter()
            .zip(&self.point_class)
            .filter(|(_, c)| **c != PointClass::Background)
            .map(|(&i, &c)| (i, c))
    }
}

/// One candidate set per box holding every point projected inside it.
/// Candidates start out labelled [`PointClass::Full`]; use
/// [`CandidateSet::classify_against`] once an origin is known. Boxes that
/// capture no point are dropped.
pub fn associate(points: &[RadarPoint], boxes: &[BBox2D]) -> Vec<CandidateSet> {
    let mut out = Vec::with_capacity(boxes.len());
    let mut dropped = 0usize;
    for b in boxes {
        let idx: Vec<usize> = points
            .iter()
            .enumerate()
            .filter(|(_, p)| in_bbox(p.u, p.v, b))
            .map(|(i, _)| i)
            .collect();
        if idx.is_empty() {
            dropped += 1;
            continue;
        }
        let n = idx.len();
        out.push(CandidateSet {
            object_id: b.object_id,
            bbox: *b,
            point_indices: idx,
            point_class: vec![PointClass::Full; n],
        });
    }
    if dropped > 0 {
        debug!("associate: dropped {dropped} box(es) without radar points");
    }
    out
}

/// Classifies the signed offset `point − center` per axis against the
/// lattice half-spans.
pub fn classify_offset(dr: f64, da: f64, codec: &CodecConfig) -> PointClass {
    let r_in = dr.abs() <= codec.span_r();
    let a_in = da.abs() <= codec.span_a();
    match (r_in, a_in) {
        (true, true) => PointClass::Full,
        (true, false) => PointClass::RangeOnly,
        (false, true) => PointClass::AzimuthOnly,
        (false, false) => PointClass::Background,
    }
}

pub fn classify_point(point: &RadarPoint, center: (f64, f64), codec: &CodecConfig) -> PointClass {
    classify_offset(point.r - center.0, point.a - center.1, codec)
}

/// `(use_point, [range_supervised, azimuth_supervised])`.
pub fn training_mask(class: PointClass) -> (bool, [bool; 2]) {
    match class {
        PointClass::Full => (true, [true, true]),
        PointClass::RangeOnly => (true, [true, false]),
        PointClass::AzimuthOnly => (true, [false, true]),
        PointClass::Background => (false, [false, false]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(u: f64, v: f64) -> RadarPoint {
        RadarPoint {
            r: 10.0,
            a: 0.0,
            d: 0.0,
            u,
            v,
            x: 10.0,
            y: 0.0,
            z: 0.0,
        }
    }

    #[test]
    fn gathers_inside_points() {
        let pts: Vec<RadarPoint> = [(5.0, 5.0), (6.0, 6.0), (7.0, 7.0), (8.0, 8.0), (9.0, 9.0), (0.0, 0.0), (20.0, 5.0), (5.0, 20.0)]
            .iter()
            .map(|&(u, v)| at(u, v))
            .collect();
        let sets = associate(&pts, &[BBox2D::new(4.0, 4.0, 10.0, 10.0)]);
        assert_eq!(sets.len(), 1);
        assert_eq!(sets[0].point_indices, vec![0, 1, 2, 3, 4]);
        assert_eq!(sets[0].point_class.len(), 5);
    }

    #[test]
    fn overlapping_boxes_share_points() {
        let pts = vec![at(5.0, 5.0), at(1.0, 1.0), at(9.0, 9.0)];
        let sets = associate(&pts, &[BBox2D::new(0.0, 0.0, 6.0, 6.0), BBox2D::new(4.0, 4.0, 10.0, 10.0)]);
        assert_eq!(sets[0].point_indices, vec![0, 1]);
        assert_eq!(sets[1].point_indices, vec![0, 2]);
    }

    #[test]
    fn empty_inputs_and_empty_boxes() {
        let pts = vec![at(5.0, 5.0)];
        assert!(associate(&pts, &[]).is_empty());
        assert!(associate(&pts, &[BBox2D::new(100.0, 100.0, 110.0, 110.0)]).is_empty());
    }

    #[test]
    fn classification_examples() {
        let c = CodecConfig::default();
        assert_eq!(c.span_r(), 2.75);
        assert!((c.span_a() - 1.0).abs() < 1e-15);
        assert_eq!(classify_offset(0.0, 0.0, &c), PointClass::Full);
        assert_eq!(classify_offset(10.0, 0.3, &c), PointClass::AzimuthOnly);
        assert_eq!(classify_offset(1.0, 3.0, &c), PointClass::RangeOnly);
        assert_eq!(classify_offset(10.0, 10.0, &c), PointClass::Background);
        assert_eq!(classify_offset(2.75, -1.0, &c), PointClass::Full);
    }

    #[test]
    fn masks_per_class() {
        assert_eq!(training_mask(PointClass::Full), (true, [true, true]));
        assert_eq!(training_mask(PointClass::RangeOnly), (true, [true, false]));
        assert_eq!(training_mask(PointClass::AzimuthOnly), (true, [false, true]));
        assert_eq!(training_mask(PointClass::Background), (false, [false, false]));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn classify_is_symmetric(dr in -20.0f64..20.0, da in -5.0f64..5.0) {
                let c = CodecConfig::default();
                let base = classify_offset(dr, da, &c);
                prop_assert_eq!(base, classify_offset(-dr, da, &c));
                prop_assert_eq!(base, classify_offset(dr, -da, &c));
            }

            #[test]
            fn association_is_order_independent(
                coords in proptest::collection::vec((0.0f64..20.0, 0.0f64..20.0), 1..30),
                seed in any::<u64>(),
            ) {
                let pts: Vec<RadarPoint> = coords.iter().map(|&(u, v)| at(u, v)).collect();
                let boxes = [BBox2D::new(3.0, 3.0, 12.0, 12.0), BBox2D::new(8.0, 0.0, 20.0, 9.0)];
                let base = associate(&pts, &boxes);
                let mut perm: Vec<usize> = (0..pts.len()).collect();
                crate::rng::StreamRng::new(seed, 0).shuffle(&mut perm);
                let shuffled: Vec<RadarPoint> = perm.iter().map(|&i| pts[i]).collect();
                let other = associate(&shuffled, &boxes);
                prop_assert_eq!(base.len(), other.len());
                for (a, b) in base.iter().zip(&other) {
                    let mut mapped: Vec<usize> = b.point_indices.iter().map(|&j| perm[j]).collect();
                    mapped.sort_unstable();
                    prop_assert_eq!(&a.point_indices, &mapped);
                }
                prop_assert_eq!(associate(&pts, &boxes), base);
            }
        }
    }
}
