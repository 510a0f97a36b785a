//! Deterministic synthetic scenes: objects, radar scatterers, clutter,
//! ground-truth boxes and jittered detector boxes.
//!
//! Every frame is a pure function of `(SimConfig, seed)`. Independent
//! [`StreamRng`] streams feed difficulty, object placement, clutter and the
//! emulated 2D detector, so changing the clutter count never moves objects.

use serde::{Deserialize, Serialize};

use crate::association::BBox2D;
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::geometry::{in_bbox, CameraExtrinsics, CameraIntrinsics, RadarPoint, SignConvention};
use crate::rng::{stream, StreamRng};

pub const FRAME_SCHEMA: &str = "rofusion-frame/1";

/// Attempts per object before giving up on a configuration.
const MAX_ATTEMPTS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Hard,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibration {
    pub fx: f64,
    pub fy: f64,
    pub px: f64,
    pub py: f64,
    pub sign_convention: SignConvention,
    /// Row-major ego→camera rotation.
    #[serde(rename = "R")]
    pub rotation: [f64; 9],
    #[serde(rename = "t")]
    pub translation: [f64; 3],
    pub image_width: f64,
    pub image_height: f64,
}

impl Default for Calibration {
    /// 960×540 camera looking along the radar boresight, mounted 1 m above
    /// and 0.3 m behind the radar.
    fn default() -> Self {
        Self {
            fx: 1000.0,
            fy: 1000.0,
            px: 480.0,
            py: 270.0,
            sign_convention: SignConvention::StandardPlus,
            rotation: [0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0],
            translation: [0.0, 1.0, 0.3],
            image_width: 960.0,
            image_height: 540.0,
        }
    }
}

impl Calibration {
    pub fn intrinsics(&self) -> Result<CameraIntrinsics<f64>> {
        CameraIntrinsics::new(self.fx, self.fy, self.px, self.py, self.sign_convention)
    }

    pub fn extrinsics(&self) -> Result<CameraExtrinsics<f64>> {
        let r = &self.rotation;
        CameraExtrinsics::new([[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]], self.translation)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JitterConfig {
    /// Per-edge Gaussian shift in pixels.
    pub sigma_px: f64,
    /// Probability that the detector misses the object.
    pub p_miss: f64,
}

impl Default for JitterConfig {
    fn default() -> Self {
        Self {
            sigma_px: 3.0,
            p_miss: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object center range bounds in meters.
    pub range_min: f64,
    pub range_max: f64,
    /// Object center azimuth bounds in degrees.
    pub az_min: f64,
    pub az_max: f64,
    /// Object extent along range, meters.
    pub object_length: f64,
    /// Physical object width in meters; the angular width follows from range.
    pub object_width_m: f64,
    /// Box height above and below the scatterer plane, meters.
    pub object_half_height: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub velocity_max: f64,
    /// Minimum Cartesian distance between object centers, meters.
    pub min_separation: f64,
    pub min_pts: usize,
    pub max_pts: usize,
    pub sigma_r: f64,
    pub sigma_a: f64,
    pub sigma_d: f64,
    pub n_clutter: usize,
    pub clutter_r_min: f64,
    pub clutter_r_max: f64,
    pub clutter_az_half: f64,
    /// Fraction of frames tagged hard.
    pub hard_fraction: f64,
    /// Noise and clutter multiplier for hard frames.
    pub hard_factor: f64,
    pub box_pad: f64,
    pub calibration: Calibration,
    pub jitter: JitterConfig,
    pub features: FeatureConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            min_objects: 1,
            max_objects: 4,
            range_min: 55.0,
            range_max: 100.0,
            az_min: -20.0,
            az_max: 20.0,
            object_length: 4.0,
            object_width_m: 1.8,
            object_half_height: 0.75,
            z_min: 0.3,
            z_max: 0.8,
            velocity_max: 15.0,
            min_separation: 8.0,
            min_pts: 3,
            max_pts: 12,
            sigma_r: 0.1,
            sigma_a: 0.2,
            sigma_d: 0.1,
            n_clutter: 20,
            clutter_r_min: 5.0,
            clutter_r_max: 103.0,
            clutter_az_half: 30.0,
            hard_fraction: 0.3,
            hard_factor: 3.0,
            box_pad: 4.0,
            calibration: Calibration::default(),
            jitter: JitterConfig::default(),
            features: FeatureConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=6).contains(&self.min_objects) || !(self.min_objects..=6).contains(&self.max_objects) {
            return Err(Error::config("sim.min_objects/max_objects", "need 1 <= min <= max <= 6"));
        }
        if !(5.0 <= self.range_min && self.range_min <= self.range_max && self.range_max <= 100.0) {
            return Err(Error::config("sim.range_min/range_max", "object ranges must lie within [5, 100] m"));
        }
        if !(-60.0 <= self.az_min && self.az_min <= self.az_max && self.az_max <= 60.0) {
            return Err(Error::config("sim.az_min/az_max", "object azimuths must lie within [-60, 60] deg"));
        }
        if !(self.object_length > 0.0 && self.object_width_m > 0.0) {
            return Err(Error::config("sim.object_length/object_width_m", "must be positive"));
        }
        if self.min_pts == 0 || self.min_pts > self.max_pts {
            return Err(Error::config("sim.min_pts/max_pts", "need 1 <= min_pts <= max_pts"));
        }
        for (name, v) in [
            ("sim.sigma_r", self.sigma_r),
            ("sim.sigma_a", self.sigma_a),
            ("sim.sigma_d", self.sigma_d),
            ("sim.box_pad", self.box_pad),
            ("sim.jitter.sigma_px", self.jitter.sigma_px),
        ] {
            if !(v >= 0.0) {
                return Err(Error::config(name, "must be non-negative"));
            }
        }
        if !(0.0..=1.0).contains(&self.hard_fraction) {
            return Err(Error::config("sim.hard_fraction", "must be a probability"));
        }
        if !(0.0..=1.0).contains(&self.jitter.p_miss) {
            return Err(Error::config("sim.jitter.p_miss", "must be a probability"));
        }
        if !(self.hard_factor >= 1.0) {
            return Err(Error::config("sim.hard_factor", "must be >= 1"));
        }
        if !(self.clutter_r_min > 0.0 && self.clutter_r_min <= self.clutter_r_max) {
            return Err(Error::config("sim.clutter_r_min/clutter_r_max", "invalid clutter range"));
        }
        self.calibration.intrinsics()?;
        self.calibration.extrinsics()?;
        self.features.validate()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectGT {
    pub id: u32,
    pub center_r: f64,
    pub center_a: f64,
    /// Extent along range, meters.
    pub length: f64,
    /// Angular extent, degrees.
    pub width_deg: f64,
    /// Radial velocity of the scatterers, m/s.
    pub velocity: f64,
    pub z_height: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub schema: String,
    pub frame_id: u64,
    pub seed: u64,
    pub difficulty: Difficulty,
    pub calibration: Calibration,
    pub objects: Vec<ObjectGT>,
    pub points: Vec<RadarPoint>,
    /// One per object, in object order.
    pub gt_boxes: Vec<BBox2D>,
    /// Emulated detector output; missed objects are omitted.
    pub detector_boxes: Vec<BBox2D>,
}

impl Frame {
    pub fn object(&self, id: u32) -> Option<&ObjectGT> {
        self.objects.iter().find(|o| o.id == id)
    }
}

/// Angular width in degrees of a `width_m` wide object at range `r`.
pub fn angular_width(width_m: f64, r: f64) -> f64 {
    2.0 * (0.5 * width_m / r).atan().to_degrees()
}

/// Tight pixel box around the projected object extent, padded by `pad`.
fn object_box(o: &ObjectGT, cfg: &SimConfig, k: &CameraIntrinsics<f64>, e: &CameraExtrinsics<f64>) -> Result<BBox2D> {
    let mut b = BBox2D::new(f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    const AZ_SAMPLES: usize = 5;
    for r in [o.center_r - o.length / 2.0, o.center_r + o.length / 2.0] {
        for s in 0..AZ_SAMPLES {
            let a = o.center_a + o.width_deg * (s as f64 / (AZ_SAMPLES - 1) as f64 - 0.5);
            for z in [o.z_height - cfg.object_half_height, o.z_height + cfg.object_half_height] {
                let p = RadarPoint::from_measurement(r, a, 0.0, z, k, e)?;
                b.u_min = b.u_min.min(p.u);
                b.u_max = b.u_max.max(p.u);
                b.v_min = b.v_min.min(p.v);
                b.v_max = b.v_max.max(p.v);
            }
        }
    }
    b.u_min -= cfg.box_pad;
    b.v_min -= cfg.box_pad;
    b.u_max += cfg.box_pad;
    b.v_max += cfg.box_pad;
    Ok(b.with_object(o.id))
}

fn inside_image(b: &BBox2D, c: &Calibration) -> bool {
    b.u_min >= 0.0 && b.v_min >= 0.0 && b.u_max <= c.image_width && b.v_max <= c.image_height
}

/// Generates one frame. Identical `(cfg, seed)` give bit-identical frames.
pub fn generate_frame(cfg: &SimConfig, seed: u64) -> Result<Frame> {
    cfg.validate()?;
    let k = cfg.calibration.intrinsics()?;
    let e = cfg.calibration.extrinsics()?;

    let difficulty = if StreamRng::new(seed, stream::DIFFICULTY).bernoulli(cfg.hard_fraction) {
        Difficulty::Hard
    } else {
        Difficulty::Easy
    };
    let f = match difficulty {
        Difficulty::Easy => 1.0,
        Difficulty::Hard => cfg.hard_factor,
    };
    let (sr, sa, sd) = (cfg.sigma_r * f, cfg.sigma_a * f, cfg.sigma_d * f);

    let mut rng = StreamRng::new(seed, stream::SCENE);
    let n_obj = rng.int_range(cfg.min_objects, cfg.max_objects);
    let mut objects = Vec::with_capacity(n_obj);
    let mut points = Vec::new();
    let mut gt_boxes = Vec::with_capacity(n_obj);

    for id in 0..n_obj as u32 {
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let center_r = rng.uniform_range(cfg.range_min, cfg.range_max);
            let center_a = rng.uniform_range(cfg.az_min, cfg.az_max);
            let velocity = rng.uniform_range(-cfg.velocity_max, cfg.velocity_max);
            let z_height = rng.uniform_range(cfg.z_min, cfg.z_max);
            let n_pts = rng.int_range(cfg.min_pts, cfg.max_pts);
            let obj = ObjectGT {
                id,
                center_r,
                center_a,
                length: cfg.object_length,
                width_deg: angular_width(cfg.object_width_m, center_r),
                velocity,
                z_height,
            };
            let mut scatter = Vec::with_capacity(n_pts);
            for _ in 0..n_pts {
                let r = center_r + rng.uniform_range(-0.5, 0.5) * obj.length + rng.normal(0.0, sr);
                let a = center_a + rng.uniform_range(-0.5, 0.5) * obj.width_deg + rng.normal(0.0, sa);
                let d = velocity + rng.normal(0.0, sd);
                scatter.push((r, a, d));
            }

            let (cx, cy) = crate::geometry::polar_to_cartesian(center_r, center_a);
            let too_close = objects.iter().any(|o: &ObjectGT| {
                let (ox, oy) = crate::geometry::polar_to_cartesian(o.center_r, o.center_a);
                (cx - ox).hypot(cy - oy) < cfg.min_separation
            });
            if too_close {
                continue;
            }
            let Ok(bbox) = object_box(&obj, cfg, &k, &e) else { continue };
            if !inside_image(&bbox, &cfg.calibration) {
                continue;
            }
            let mut pts = Vec::with_capacity(n_pts);
            for &(r, a, d) in &scatter {
                if let Ok(p) = RadarPoint::from_measurement(r.max(z_height.abs()), a, d, z_height, &k, &e) {
                    pts.push(p);
                }
            }
            if !pts.iter().any(|p| in_bbox(p.u, p.v, &bbox)) {
                continue;
            }
            objects.push(obj);
            gt_boxes.push(bbox);
            points.extend(pts);
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::config(
                "sim",
                format!("could not place object {id} inside the image after {MAX_ATTEMPTS} attempts (seed {seed})"),
            ));
        }
    }

    let mut clutter_rng = StreamRng::new(seed, stream::CLUTTER);
    let n_clutter = (cfg.n_clutter as f64 * f).round() as usize;
    for _ in 0..n_clutter {
        let r = clutter_rng.uniform_range(cfg.clutter_r_min, cfg.clutter_r_max);
        let a = clutter_rng.uniform_range(-cfg.clutter_az_half, cfg.clutter_az_half);
        let d = clutter_rng.normal(0.0, 5.0);
        let z = clutter_rng.uniform_range(0.0, 1.5).min(r);
        if let Ok(p) = RadarPoint::from_measurement(r, a, d, z, &k, &e) {
            points.push(p);
        }
    }

    let mut det_rng = StreamRng::new(seed, stream::DETECTOR);
    let detector_boxes = gt_boxes
        .iter()
        .filter_map(|b| jitter_bbox(b, &cfg.jitter, &mut det_rng, &cfg.calibration))
        .collect();

    Ok(Frame {
        schema: FRAME_SCHEMA.to_string(),
        frame_id: seed,
        seed,
        difficulty,
        calibration: cfg.calibration,
        objects,
        points,
        gt_boxes,
        detector_boxes,
    })
}

/// Frames for seeds `base_seed .. base_seed + count`.
pub fn generate_frames(cfg: &SimConfig, base_seed: u64, count: usize) -> Result<Vec<Frame>> {
    (0..count as u64).map(|i| generate_frame(cfg, base_seed + i)).collect()
}

/// Emulated imperfect 2D detection of `bbox`: `None` with probability
/// `p_miss`, otherwise each edge shifted by `N(0, sigma_px)` and clipped to
/// the image.
pub fn jitter_bbox(bbox: &BBox2D, noise: &JitterConfig, rng: &mut StreamRng, calib: &Calibration) -> Option<BBox2D> {
    if rng.bernoulli(noise.p_miss) {
        return None;
    }
    let clip = |v: f64, hi: f64| v.clamp(0.0, hi);
    let (w, h) = (calib.image_width, calib.image_height);
    let mut out = *bbox;
    out.u_min = clip(bbox.u_min + rng.normal(0.0, noise.sigma_px), w);
    out.v_min = clip(bbox.v_min + rng.normal(0.0, noise.sigma_px), h);
    out.u_max = clip(bbox.u_max + rng.normal(0.0, noise.sigma_px), w);
    out.v_max = clip(bbox.v_max + rng.normal(0.0, noise.sigma_px), h);
    if out.u_min > out.u_max {
        let m = 0.5 * (out.u_min + out.u_max);
        out.u_min = m;
        out.u_max = m;
    }
    if out.v_min > out.v_max {
        let m = 0.5 * (out.v_min + out.v_max);
        out.v_min = m;
        out.v_max = m;
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> SimConfig {
        SimConfig {
            min_objects: 1,
            max_objects: 1,
            sigma_r: 0.0,
            sigma_a: 0.0,
            sigma_d: 0.0,
            n_clutter: 0,
            hard_fraction: 0.0,
            ..SimConfig::default()
        }
    }

    #[test]
    fn noise_free_points_stay_in_box_and_extent() {
        let cfg = quiet();
        for seed in 0..50 {
            let f = generate_frame(&cfg, seed).unwrap();
            let o = &f.objects[0];
            assert!(!f.points.is_empty());
            for p in &f.points {
                assert!(in_bbox(p.u, p.v, &f.gt_boxes[0]), "seed {seed}: {p:?}");
                assert!((p.r - o.center_r).abs() <= o.length / 2.0 + 1e-12);
                assert!((p.a - o.center_a).abs() <= o.width_deg / 2.0 + 1e-12);
            }
        }
    }

    #[test]
    fn frames_are_deterministic() {
        let cfg = SimConfig::default();
        assert_eq!(generate_frame(&cfg, 42).unwrap(), generate_frame(&cfg, 42).unwrap());
        assert_ne!(generate_frame(&cfg, 42).unwrap(), generate_frame(&cfg, 43).unwrap());
    }

    #[test]
    fn every_object_has_a_point_in_its_box() {
        let cfg = SimConfig {
            hard_fraction: 0.5,
            ..SimConfig::default()
        };
        for seed in 0..200 {
            let f = generate_frame(&cfg, seed).unwrap();
            assert_eq!(f.objects.len(), f.gt_boxes.len());
            assert!(f.detector_boxes.len() <= f.objects.len());
            for b in &f.gt_boxes {
                assert!(f.points.iter().any(|p| in_bbox(p.u, p.v, b)));
            }
        }
    }

    #[test]
    fn point_fields_are_consistent() {
        let f = generate_frame(&SimConfig::default(), 5).unwrap();
        for p in &f.points {
            let r2 = p.x * p.x + p.y * p.y + p.z * p.z;
            assert!((r2.sqrt() - p.r).abs() <= 1e-6 * p.r);
            assert!((p.y.atan2(p.x).to_degrees() - p.a).abs() < 1e-9);
        }
    }

    #[test]
    fn unplaceable_objects_are_a_config_error() {
        let cfg = SimConfig {
            az_min: 55.0,
            az_max: 60.0,
            ..SimConfig::default()
        };
        assert!(matches!(generate_frame(&cfg, 1), Err(Error::Config { .. })));
    }

    #[test]
    fn hard_factor_scales_range_spread() {
        // Monte-Carlo over 1000 frames per difficulty; only scatter noise, no extent.
        let base = SimConfig {
            object_length: 1e-9,
            n_clutter: 0,
            ..SimConfig::default()
        };
        let spread = |hard: bool| {
            let cfg = SimConfig {
                hard_fraction: if hard { 1.0 } else { 0.0 },
                ..base.clone()
            };
            let mut acc = 0.0;
            let mut n = 0usize;
            for seed in 0..1000 {
                let f = generate_frame(&cfg, 10_000 + seed).unwrap();
                for o in &f.objects {
                    for p in &f.points {
                        if (p.a - o.center_a).abs() < o.width_deg && (p.r - o.center_r).abs() < 3.0 {
                            acc += (p.r - o.center_r).powi(2);
                            n += 1;
                        }
                    }
                }
            }
            (acc / n as f64).sqrt()
        };
        let ratio = spread(true) / spread(false);
        assert!((ratio - 3.0).abs() < 0.3, "ratio {ratio}");
    }

    #[test]
    fn jitter_examples() {
        let calib = Calibration::default();
        let b = BBox2D::new(400.0, 200.0, 500.0, 300.0).with_object(3);
        let mut rng = StreamRng::new(9, 0);
        let none = JitterConfig {
            sigma_px: 0.0,
            p_miss: 0.0,
        };
        assert_eq!(jitter_bbox(&b, &none, &mut rng, &calib), Some(b));
        let miss = JitterConfig {
            sigma_px: 2.0,
            p_miss: 1.0,
        };
        assert!((0..100).all(|_| jitter_bbox(&b, &miss, &mut rng, &calib).is_none()));

        let noisy = JitterConfig {
            sigma_px: 5.0,
            p_miss: 0.0,
        };
        let draws = 10_000;
        let mut total = 0.0;
        for _ in 0..draws {
            let j = jitter_bbox(&b, &noisy, &mut rng, &calib).unwrap();
            total += (j.u_min - b.u_min).abs() + (j.v_min - b.v_min).abs() + (j.u_max - b.u_max).abs() + (j.v_max - b.v_max).abs();
        }
        let mean = total / (4 * draws) as f64;
        let expected = 5.0 * (2.0 / std::f64::consts::PI).sqrt();
        assert!((mean - expected).abs() < 0.1, "{mean} vs {expected}");
    }

    #[test]
    fn calibration_matches_default_image_size() {
        let c = Calibration::default();
        assert_eq!((c.image_width, c.image_height), (960.0, 540.0));
        assert!(c.extrinsics().is_ok());
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let bad = SimConfig {
            max_objects: 7,
            ..SimConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = SimConfig {
            range_max: 150.0,
            ..SimConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
