//! Object-centric local coordinates.
//!
//! The offset `Δ = center − point` is split per axis into a bin on an odd
//! lattice centered on the point plus a residual: `Δ = (bin − c)·width + res`
//! with `c = (n − 1)/2`. Range uses `n_r_bins`, azimuth `n_az_bins`.
//!
//! The global mode instead bins the absolute center on a fixed range–azimuth
//! grid, so the target does not depend on the point at all.

use serde::{Deserialize, Serialize};

use crate::association::CandidateSet;
use crate::error::{Error, Result};
use crate::geometry::RadarPoint;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecMode {
    #[default]
    Local,
    Global,
}

impl CodecMode {
    pub fn name(self) -> &'static str {
        match self {
            CodecMode::Local => "local",
            CodecMode::Global => "global",
        }
    }
}

/// Absolute range–azimuth grid: bin `k` is centered at `min + k·step`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlobalGridConfig {
    pub r_min: f64,
    pub r_max: f64,
    pub r_step: f64,
    pub a_min: f64,
    pub a_max: f64,
    pub a_step: f64,
}

impl Default for GlobalGridConfig {
    fn default() -> Self {
        Self {
            r_min: 0.0,
            r_max: 103.0,
            r_step: 0.8,
            a_min: -60.0,
            a_max: 60.0,
            a_step: 0.8,
        }
    }
}

impl GlobalGridConfig {
    pub fn n_r_bins(&self) -> usize {
        grid_len(self.r_min, self.r_max, self.r_step)
    }

    pub fn n_a_bins(&self) -> usize {
        grid_len(self.a_min, self.a_max, self.a_step)
    }
}

fn grid_len(min: f64, max: f64, step: f64) -> usize {
    ((max - min) / step + 1e-9).floor() as usize + 1
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    pub n_az_bins: usize,
    pub n_r_bins: usize,
    /// Degrees.
    pub az_bin_width: f64,
    /// Meters.
    pub r_bin_width: f64,
    pub mode: CodecMode,
    pub grid: GlobalGridConfig,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            n_az_bins: 5,
            n_r_bins: 11,
            az_bin_width: 0.4,
            r_bin_width: 0.5,
            mode: CodecMode::Local,
            grid: GlobalGridConfig::default(),
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_az_bins.is_multiple_of(2) || self.n_az_bins == 0 {
            return Err(Error::config("codec.n_az_bins", "must be odd"));
        }
        if self.n_r_bins.is_multiple_of(2) || self.n_r_bins == 0 {
            return Err(Error::config("codec.n_r_bins", "must be odd"));
        }
        if !(self.az_bin_width > 0.0) {
            return Err(Error::config("codec.az_bin_width", "must be positive"));
        }
        if !(self.r_bin_width > 0.0) {
            return Err(Error::config("codec.r_bin_width", "must be positive"));
        }
        let g = &self.grid;
        if !(g.r_step > 0.0 && g.a_step > 0.0) {
            return Err(Error::config("codec.grid", "steps must be positive"));
        }
        if !(g.r_max > g.r_min && g.a_max > g.a_min) {
            return Err(Error::config("codec.grid", "empty extent"));
        }
        Ok(())
    }

    /// Half-span of the range lattice in meters.
    pub fn span_r(&self) -> f64 {
        self.n_r_bins as f64 * self.r_bin_width / 2.0
    }

    /// Half-span of the azimuth lattice in degrees.
    pub fn span_a(&self) -> f64 {
        self.n_az_bins as f64 * self.az_bin_width / 2.0
    }

    /// Number of range classes the head predicts in the current mode.
    pub fn range_classes(&self) -> usize {
        match self.mode {
            CodecMode::Local => self.n_r_bins,
            CodecMode::Global => self.grid.n_r_bins(),
        }
    }

    /// Number of azimuth classes the head predicts in the current mode.
    pub fn az_classes(&self) -> usize {
        match self.mode {
            CodecMode::Local => self.n_az_bins,
            CodecMode::Global => self.grid.n_a_bins(),
        }
    }

    pub fn cls_width(&self) -> usize {
        self.range_classes() + self.az_classes()
    }
}

/// Per-point supervision target. In global mode the bins index the absolute
/// grid instead of the point-centered lattice.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalTarget<T> {
    pub az_bin: usize,
    pub r_bin: usize,
    /// `(range meters, azimuth degrees)`.
    pub residual: (T, T),
    /// `[range, azimuth]`.
    pub axis_mask: [bool; 2],
}

/// One axis of the local lattice: `(bin, residual)`.
fn encode_axis<T: Scalar>(delta: T, width: T, n: usize) -> (usize, T) {
    let half = ((n - 1) / 2) as i64;
    // f64::round rounds half away from zero
    let k = (delta / width).round().to_i64().unwrap_or(0).clamp(-half, half);
    let res = delta - T::lit(k as f64) * width;
    ((k + half) as usize, res)
}

/// Encodes the offset from `point` to `center` with all axes supervised.
pub fn encode<T: Scalar>(point: (T, T), center: (T, T), cfg: &CodecConfig) -> Result<LocalTarget<T>> {
    if cfg.mode != CodecMode::Local {
        return Err(Error::ModeMismatch {
            expected: "local",
            got: cfg.mode.name(),
        });
    }
    let (r_bin, res_r) = encode_axis(center.0 - point.0, T::lit(cfg.r_bin_width), cfg.n_r_bins);
    let (az_bin, res_a) = encode_axis(center.1 - point.1, T::lit(cfg.az_bin_width), cfg.n_az_bins);
    Ok(LocalTarget {
        az_bin,
        r_bin,
        residual: (res_r, res_a),
        axis_mask: [true, true],
    })
}

/// Unsupervised axes get the center bin and a zero residual.
pub fn apply_axis_mask<T: Scalar>(mut t: LocalTarget<T>, axis_mask: [bool; 2], cfg: &CodecConfig) -> LocalTarget<T> {
    if !axis_mask[0] {
        t.r_bin = match cfg.mode {
            CodecMode::Local => (cfg.n_r_bins - 1) / 2,
            CodecMode::Global => t.r_bin,
        };
        t.residual.0 = T::zero();
    }
    if !axis_mask[1] {
        t.az_bin = match cfg.mode {
            CodecMode::Local => (cfg.n_az_bins - 1) / 2,
            CodecMode::Global => t.az_bin,
        };
        t.residual.1 = T::zero();
    }
    t.axis_mask = axis_mask;
    t
}

/// Predicted center given the point, bins and residual (local mode).
pub fn decode<T: Scalar>(point: (T, T), az_bin: usize, r_bin: usize, residual: (T, T), cfg: &CodecConfig) -> Result<(T, T)> {
    if r_bin >= cfg.n_r_bins {
        return Err(Error::Index {
            op: "decode range bin",
            index: r_bin,
            bound: cfg.n_r_bins,
        });
    }
    if az_bin >= cfg.n_az_bins {
        return Err(Error::Index {
            op: "decode azimuth bin",
            index: az_bin,
            bound: cfg.n_az_bins,
        });
    }
    let kr = r_bin as f64 - ((cfg.n_r_bins - 1) / 2) as f64;
    let ka = az_bin as f64 - ((cfg.n_az_bins - 1) / 2) as f64;
    Ok((
        point.0 + T::lit(kr * cfg.r_bin_width) + residual.0,
        point.1 + T::lit(ka * cfg.az_bin_width) + residual.1,
    ))
}

fn encode_grid_axis<T: Scalar>(value: T, min: f64, max: f64, step: f64, axis: &'static str) -> Result<(usize, T)> {
    let v = value.as_f64();
    if !(min..=max).contains(&v) {
        return Err(Error::OutOfExtent {
            axis,
            value: v,
            min,
            max,
        });
    }
    let n = grid_len(min, max, step);
    let k = ((value - T::lit(min)) / T::lit(step)).round().to_usize().unwrap_or(0).min(n - 1);
    Ok((k, value - T::lit(min + k as f64 * step)))
}

/// Absolute-grid target for the global-coordinate mode.
pub fn encode_global<T: Scalar>(center: (T, T), grid: &GlobalGridConfig) -> Result<LocalTarget<T>> {
    let (r_bin, res_r) = encode_grid_axis(center.0, grid.r_min, grid.r_max, grid.r_step, "range")?;
    let (az_bin, res_a) = encode_grid_axis(center.1, grid.a_min, grid.a_max, grid.a_step, "azimuth")?;
    Ok(LocalTarget {
        az_bin,
        r_bin,
        residual: (res_r, res_a),
        axis_mask: [true, true],
    })
}

pub fn decode_global<T: Scalar>(az_bin: usize, r_bin: usize, residual: (T, T), grid: &GlobalGridConfig) -> Result<(T, T)> {
    if r_bin >= grid.n_r_bins() {
        return Err(Error::Index {
            op: "decode_global range bin",
            index: r_bin,
            bound: grid.n_r_bins(),
        });
    }
    if az_bin >= grid.n_a_bins() {
        return Err(Error::Index {
            op: "decode_global azimuth bin",
            index: az_bin,
            bound: grid.n_a_bins(),
        });
    }
    Ok((
        T::lit(grid.r_min + r_bin as f64 * grid.r_step) + residual.0,
        T::lit(grid.a_min + az_bin as f64 * grid.a_step) + residual.1,
    ))
}

/// Mode-dispatching target construction.
pub fn encode_target<T: Scalar>(point: (T, T), center: (T, T), cfg: &CodecConfig) -> Result<LocalTarget<T>> {
    match cfg.mode {
        CodecMode::Local => encode(point, center, cfg),
        CodecMode::Global => encode_global(center, &cfg.grid),
    }
}

/// Mode-dispatching decode.
pub fn decode_target<T: Scalar>(point: (T, T), az_bin: usize, r_bin: usize, residual: (T, T), cfg: &CodecConfig) -> Result<(T, T)> {
    match cfg.mode {
        CodecMode::Local => decode(point, az_bin, r_bin, residual, cfg),
        CodecMode::Global => decode_global(az_bin, r_bin, residual, &cfg.grid),
    }
}

/// Inference-time origin when no ground truth is available: the
/// minimum-range candidate is taken as the sensor-facing end of the object,
/// the center sits half a length prior behind it, at the median candidate
/// azimuth. Returns `(r, a)`.
pub fn heuristic_origin(cands: &CandidateSet, points: &[RadarPoint], obj_length_prior: f64) -> Result<(f64, f64)> {
    if cands.point_indices.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let facing = cands
        .point_indices
        .iter()
        .map(|&i| points[i].r)
        .fold(f64::INFINITY, f64::min);
    let mut az: Vec<f64> = cands.point_indices.iter().map(|&i| points[i].a).collect();
    az.sort_by(f64::total_cmp);
    let m = az.len() / 2;
    let median = if az.len() % 2 == 1 { az[m] } else { 0.5 * (az[m - 1] + az[m]) };
    Ok((facing + obj_length_prior / 2.0, median))
}
