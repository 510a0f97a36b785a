//! Continuous per-frame feature fields standing in for learned radar and
//! image backbones.
//!
//! The radar field is queried at a point's `(r, a)`, the image field at its
//! pixel `(u, v)`. Both are smooth, bounded to `[-3, 3]` and regenerated
//! from the frame seed, so they are never serialized.
//!
//! Radar channels, in order: 8 positional, 1 object bump, range offset
//! bin windows, 2 range phase, 1 range linear, azimuth offset bin windows (biased per
//! object), 1 azimuth linear, then texture. Image channels: 4 positional,
//! 1 box window, 8 appearance, azimuth offset bin windows, 2 azimuth phase,
//! 1 azimuth linear, then texture.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{cartesian_to_polar, unproject_pixel, CameraExtrinsics, CameraIntrinsics};
use crate::rng::{stream, StreamRng};
use crate::sim::{Difficulty, Frame, ObjectGT, SimConfig};

const RADAR_POS: usize = 8;
const IMAGE_POS: usize = 4;
const SIGNATURE: usize = 8;
const TEXTURE_TERMS: usize = 3;
const OUTPUT_BOUND: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    pub radar_channels: usize,
    pub image_channels: usize,
    /// Peak amplitude of the object-dependent channels.
    pub amplitude: f64,
    /// Spacing and count of the range offset bin windows (meters).
    pub r_spacing: f64,
    pub n_r_windows: usize,
    /// Spacing and count of the azimuth offset bin windows (degrees).
    pub a_spacing: f64,
    pub n_a_windows: usize,
    /// Edge softness of the bin windows as a fraction of the spacing.
    pub bin_softness: f64,
    /// Half-width of the uniform per-object azimuth bias in the radar field.
    pub radar_az_bias_deg: f64,
    /// Texture perturbation added to all structured channels; multiplied
    /// by the simulator's hard factor on hard frames.
    pub perturbation: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            radar_channels: 32,
            image_channels: 32,
            amplitude: 2.0,
            r_spacing: 0.5,
            n_r_windows: 11,
            a_spacing: 0.4,
            n_a_windows: 5,
            bin_softness: 0.05,
            radar_az_bias_deg: 0.4,
            perturbation: 0.05,
        }
    }
}

impl FeatureConfig {
    pub fn radar_structured(&self) -> usize {
        RADAR_POS + 1 + self.n_r_windows + 2 + 1 + self.n_a_windows + 1
    }

    pub fn image_structured(&self) -> usize {
        IMAGE_POS + 1 + SIGNATURE + self.n_a_windows + 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.radar_channels < self.radar_structured() {
            return Err(Error::config(
                "sim.features.radar_channels",
                format!("need at least {} channels", self.radar_structured()),
            ));
        }
        if self.image_channels < self.image_structured() {
            return Err(Error::config(
                "sim.features.image_channels",
                format!("need at least {} channels", self.image_structured()),
            ));
        }
        if !(self.r_spacing > 0.0 && self.a_spacing > 0.0) {
            return Err(Error::config("sim.features.r_spacing/a_spacing", "must be positive"));
        }
        if self.n_r_windows.is_multiple_of(2) || self.n_a_windows.is_multiple_of(2) {
            return Err(Error::config("sim.features.n_r_windows/n_a_windows", "must be odd"));
        }
        if !(self.amplitude > 0.0 && self.amplitude <= OUTPUT_BOUND) {
            return Err(Error::config("sim.features.amplitude", "must lie in (0, 3]"));
        }
        if !(self.bin_softness > 0.0) {
            return Err(Error::config("sim.features.bin_softness", "must be positive"));
        }
        if !(self.perturbation >= 0.0 && self.radar_az_bias_deg >= 0.0) {
            return Err(Error::config("sim.features", "perturbation and bias must be non-negative"));
        }
        Ok(())
    }
}

/// A deterministic continuous field over a 2-D location.
pub trait FeatureField {
    fn channels(&self) -> usize;

    /// Writes the field value at `(x, y)` into `out` (length `channels()`).
    fn eval_into(&self, x: f64, y: f64, out: &mut [f64]);

    fn eval(&self, x: f64, y: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.channels()];
        self.eval_into(x, y, &mut out);
        out
    }
}

/// Sum of a few random plane waves, bounded by 1 in absolute value.
#[derive(Clone, Debug)]
struct Texture {
    terms: Vec<[f64; 3]>,
}

impl Texture {
    fn new(rng: &mut StreamRng, fx: (f64, f64), fy: (f64, f64)) -> Self {
        let terms = (0..TEXTURE_TERMS)
            .map(|_| {
                let sx = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
                [
                    sx * rng.uniform_range(fx.0, fx.1),
                    rng.uniform_range(fy.0, fy.1),
                    rng.uniform_range(0.0, std::f64::consts::TAU),
                ]
            })
            .collect();
        Self { terms }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let s: f64 = self.terms.iter().map(|t| (t[0] * x + t[1] * y + t[2]).sin()).sum();
        s / TEXTURE_TERMS as f64
    }
}

/// Soft indicator of `x` lying within `spacing / 2` of `center`.
fn bin_window(x: f64, center: f64, spacing: f64, softness: f64) -> f64 {
    let tau = softness * spacing;
    let half = 0.5 * spacing;
    logistic((x - center + half) / tau) * logistic((center + half - x) / tau)
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Flat-topped bump around an object center, 1 at zero offset.
fn bump(dr: f64, da: f64) -> f64 {
    let (zr, za) = (dr / 3.5, da / 1.4);
    (-(zr * zr) * (zr * zr) - (za * za) * (za * za)).exp()
}

#[derive(Clone, Debug)]
struct RadarObject {
    center_r: f64,
    center_a: f64,
    az_bias: f64,
}

#[derive(Clone, Debug)]
pub struct RadarField {
    cfg: FeatureConfig,
    objects: Vec<RadarObject>,
    textures: Vec<Texture>,
    perturbation: f64,
}

impl FeatureField for RadarField {
    fn channels(&self) -> usize {
        self.cfg.radar_channels
    }

    fn eval_into(&self, r: f64, a: f64, out: &mut [f64]) {
        use std::f64::consts::PI;
        let c = &self.cfg;
        let amp = c.amplitude;
        out.fill(0.0);
        out[0] = r / 50.0 - 1.0;
        out[1] = a / 30.0;
        out[2] = (PI * r / 50.0).sin();
        out[3] = (PI * r / 50.0).cos();
        out[4] = (PI * a / 30.0).sin();
        out[5] = (PI * a / 30.0).cos();
        out[6] = (PI * r / 10.0).sin();
        out[7] = (PI * a / 6.0).sin();

        let half_r = (c.n_r_windows / 2) as f64;
        let half_a = (c.n_a_windows / 2) as f64;
        let span_r = (half_r + 0.5) * c.r_spacing;
        let span_a = (half_a + 0.5) * c.a_spacing;
        let win_r0 = RADAR_POS + 1;
        let phase_r = win_r0 + c.n_r_windows;
        let lin_r = phase_r + 2;
        let win_a0 = lin_r + 1;
        let lin_a = win_a0 + c.n_a_windows;
        for o in &self.objects {
            let dr = o.center_r - r;
            let da = o.center_a - a;
            let g = bump(dr, da);
            if g < 1e-12 {
                continue;
            }
            out[RADAR_POS] += amp * g;
            for k in 0..c.n_r_windows {
                let ck = (k as f64 - half_r) * c.r_spacing;
                out[win_r0 + k] += amp * g * bin_window(dr, ck, c.r_spacing, c.bin_softness);
            }
            let ph = std::f64::consts::TAU * dr / c.r_spacing;
            out[phase_r] += g * ph.sin();
            out[phase_r + 1] += g * ph.cos();
            out[lin_r] += g * dr / span_r;
            let da_b = da + o.az_bias;
            for k in 0..c.n_a_windows {
                let ck = (k as f64 - half_a) * c.a_spacing;
                out[win_a0 + k] += amp * g * bin_window(da_b, ck, c.a_spacing, c.bin_softness);
            }
            out[lin_a] += g * da_b / span_a;
        }
        finish(out, c.radar_structured(), &self.textures, self.perturbation, r, a);
    }
}

#[derive(Clone, Debug)]
struct ImageObject {
    center_a: f64,
    /// Depth of the object center along the camera axis.
    depth: f64,
    bbox: [f64; 4],
    signature: [f64; SIGNATURE],
}

#[derive(Clone, Debug)]
pub struct ImageField {
    cfg: FeatureConfig,
    width: f64,
    height: f64,
    intrinsics: CameraIntrinsics<f64>,
    extrinsics: CameraExtrinsics<f64>,
    objects: Vec<ImageObject>,
    textures: Vec<Texture>,
    perturbation: f64,
}

impl ImageField {
    /// Ego azimuth of pixel `(u, v)` assuming it lies at `depth`.
    fn bearing(&self, u: f64, v: f64, depth: f64) -> f64 {
        let p = unproject_pixel(u, v, depth, &self.intrinsics, &self.extrinsics);
        cartesian_to_polar(p[0], p[1]).1
    }
}

impl FeatureField for ImageField {
    fn channels(&self) -> usize {
        self.cfg.image_channels
    }

    fn eval_into(&self, u: f64, v: f64, out: &mut [f64]) {
        use std::f64::consts::PI;
        let c = &self.cfg;
        let amp = c.amplitude;
        out.fill(0.0);
        out[0] = 2.0 * u / self.width - 1.0;
        out[1] = 2.0 * v / self.height - 1.0;
        out[2] = (4.0 * PI * u / self.width).sin();
        out[3] = (4.0 * PI * v / self.height).sin();

        let half_a = (c.n_a_windows / 2) as f64;
        let span_a = (half_a + 0.5) * c.a_spacing;
        let sig0 = IMAGE_POS + 1;
        let win0 = sig0 + SIGNATURE;
        let phase = win0 + c.n_a_windows;
        let lin = phase + 2;
        for o in &self.objects {
            let [u0, v0, u1, v1] = o.bbox;
            const SOFT: f64 = 1.5;
            let w = logistic((u - u0) / SOFT) * logistic((u1 - u) / SOFT) * logistic((v - v0) / SOFT) * logistic((v1 - v) / SOFT);
            if w < 1e-12 {
                continue;
            }
            out[IMAGE_POS] += amp * w;
            for (k, s) in o.signature.iter().enumerate() {
                out[sig0 + k] += w * s;
            }
            let da = o.center_a - self.bearing(u, v, o.depth);
            for k in 0..c.n_a_windows {
                let ck = (k as f64 - half_a) * c.a_spacing;
                out[win0 + k] += amp * w * bin_window(da, ck, c.a_spacing, c.bin_softness);
            }
            let ph = std::f64::consts::TAU * da / c.a_spacing;
            out[phase] += w * ph.sin();
            out[phase + 1] += w * ph.cos();
            out[lin] += w * da / span_a;
        }
        finish(out, c.image_structured(), &self.textures, self.perturbation, u, v);
    }
}

/// Adds texture perturbation to structured channels, fills the texture
/// channels and clamps to the output bound.
fn finish(out: &mut [f64], structured: usize, textures: &[Texture], perturbation: f64, x: f64, y: f64) {
    for (k, o) in out.iter_mut().enumerate() {
        let t = textures[k].at(x, y);
        if k < structured {
            *o += perturbation * t;
        } else {
            *o = t;
        }
        *o = o.clamp(-OUTPUT_BOUND, OUTPUT_BOUND);
    }
}

#[derive(Clone, Debug)]
pub struct FrameFeatures {
    pub radar: RadarField,
    pub image: ImageField,
}

impl FrameFeatures {
    /// Radar and image feature rows for the given frame points.
    pub fn point_rows(&self, frame: &Frame, indices: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let (cr, ci) = (self.radar.channels(), self.image.channels());
        let mut radar = vec![0.0; indices.len() * cr];
        let mut image = vec![0.0; indices.len() * ci];
        for (row, &i) in indices.iter().enumerate() {
            let p = &frame.points[i];
            self.radar.eval_into(p.r, p.a, &mut radar[row * cr..(row + 1) * cr]);
            self.image.eval_into(p.u, p.v, &mut image[row * ci..(row + 1) * ci]);
        }
        (radar, image)
    }
}

fn object_depth(o: &ObjectGT, e: &CameraExtrinsics<f64>) -> f64 {
    let (x, y) = crate::geometry::polar_to_cartesian(o.center_r, o.center_a);
    e.apply([x, y, o.z_height])[2]
}

/// Builds both fields for `frame`. Deterministic in `(frame, sim)`.
pub fn synth_features(frame: &Frame, sim: &SimConfig) -> Result<FrameFeatures> {
    let cfg = &sim.features;
    cfg.validate()?;
    let k = frame.calibration.intrinsics()?;
    let e = frame.calibration.extrinsics()?;
    let mut rng = StreamRng::new(frame.seed, stream::FEATURES);
    let perturbation = match frame.difficulty {
        Difficulty::Easy => cfg.perturbation,
        Difficulty::Hard => cfg.perturbation * sim.hard_factor,
    };

    let radar_textures = (0..cfg.radar_channels)
        .map(|_| Texture::new(&mut rng, (0.05, 0.6), (0.1, 1.5)))
        .collect();
    let image_textures = (0..cfg.image_channels)
        .map(|_| Texture::new(&mut rng, (0.005, 0.08), (0.005, 0.08)))
        .collect();

    let mut radar_objects = Vec::with_capacity(frame.objects.len());
    let mut image_objects = Vec::with_capacity(frame.objects.len());
    for (o, b) in frame.objects.iter().zip(&frame.gt_boxes) {
        let az_bias = cfg.radar_az_bias_deg * rng.uniform_range(-1.0, 1.0);
        let mut signature = [0.0; SIGNATURE];
        for s in &mut signature {
            *s = rng.uniform_range(-1.0, 1.0);
        }
        radar_objects.push(RadarObject {
            center_r: o.center_r,
            center_a: o.center_a,
            az_bias,
        });
        image_objects.push(ImageObject {
            center_a: o.center_a,
            depth: object_depth(o, &e).max(crate::geometry::MIN_DEPTH * 2.0),
            bbox: [b.u_min, b.v_min, b.u_max, b.v_max],
            signature,
        });
    }

    Ok(FrameFeatures {
        radar: RadarField {
            cfg: cfg.clone(),
            objects: radar_objects,
            textures: radar_textures,
            perturbation,
        },
        image: ImageField {
            cfg: cfg.clone(),
            width: frame.calibration.image_width,
            height: frame.calibration.image_height,
            intrinsics: k,
            extrinsics: e,
            objects: image_objects,
            textures: image_textures,
            perturbation,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::generate_frame;

    fn frame(seed: u64) -> (Frame, FrameFeatures) {
        let cfg = SimConfig::default();
        let f = generate_frame(&cfg, seed).unwrap();
        let feats = synth_features(&f, &cfg).unwrap();
        (f, feats)
    }

    #[test]
    fn bump_peaks_at_object_center() {
        let mut sim = SimConfig::default();
        sim.features.perturbation = 0.0;
        let f = generate_frame(&sim, 3).unwrap();
        let feats = synth_features(&f, &sim).unwrap();
        let mut rng = StreamRng::new(77, 0);
        for o in &f.objects {
            let peak = feats.radar.eval(o.center_r, o.center_a)[RADAR_POS];
            for _ in 0..500 {
                let r = o.center_r + rng.uniform_range(-5.0, 5.0);
                let a = o.center_a + rng.uniform_range(-3.0, 3.0);
                assert!(feats.radar.eval(r, a)[RADAR_POS] <= peak + 1e-12);
            }
        }
    }

    #[test]
    fn fields_are_continuous() {
        let (_, feats) = frame(4);
        let mut rng = StreamRng::new(5, 0);
        for _ in 0..1000 {
            let (r, a) = (rng.uniform_range(5.0, 103.0), rng.uniform_range(-30.0, 30.0));
            let d = feats.radar.eval(r, a).iter().zip(feats.radar.eval(r + 1e-9, a + 1e-9)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(d < 1e-6);
            let (u, v) = (rng.uniform_range(0.0, 960.0), rng.uniform_range(0.0, 540.0));
            let d = feats.image.eval(u, v).iter().zip(feats.image.eval(u + 1e-9, v + 1e-9)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(d < 1e-6);
        }
    }

    #[test]
    fn outputs_are_bounded_over_random_queries() {
        // 10^5 queries spread over five frames.
        let mut rng = StreamRng::new(2024, 0);
        for seed in 0..5 {
            let (f, feats) = frame(seed);
            for i in 0..20_000 {
                // Half the queries near objects, where structured channels peak.
                let (r, a) = if i % 2 == 0 {
                    let o = &f.objects[i / 2 % f.objects.len()];
                    (o.center_r + rng.uniform_range(-4.0, 4.0), o.center_a + rng.uniform_range(-2.0, 2.0))
                } else {
                    (rng.uniform_range(0.0, 110.0), rng.uniform_range(-90.0, 90.0))
                };
                assert!(feats.radar.eval(r, a).iter().all(|x| x.abs() <= 3.0));
                let (u, v) = (rng.uniform_range(-50.0, 1010.0), rng.uniform_range(-50.0, 590.0));
                assert!(feats.image.eval(u, v).iter().all(|x| x.abs() <= 3.0));
            }
        }
    }

    #[test]
    fn features_are_deterministic_per_seed() {
        let (f, a) = frame(11);
        let (_, b) = frame(11);
        let idx: Vec<usize> = (0..f.points.len()).collect();
        assert_eq!(a.point_rows(&f, &idx), b.point_rows(&f, &idx));
        let (g, c) = frame(12);
        let idx2: Vec<usize> = (0..g.points.len()).collect();
        assert_ne!(a.point_rows(&f, &idx).0, c.point_rows(&g, &idx2).0);
    }

    #[test]
    fn image_window_is_inside_box_only() {
        let (f, feats) = frame(6);
        let b = &f.gt_boxes[0];
        let (cu, cv) = b.center();
        assert!(feats.image.eval(cu, cv)[IMAGE_POS] > 1.5);
        // Far corner of the image, no object nearby.
        let far = feats.image.eval(0.0, 539.0)[IMAGE_POS];
        assert!(far.abs() < 0.2, "{far}");
    }

    #[test]
    fn too_few_channels_rejected() {
        let cfg = FeatureConfig {
            radar_channels: 10,
            ..FeatureConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
