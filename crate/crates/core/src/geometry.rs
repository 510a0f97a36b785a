//! Pinhole projection between the ego frame and image pixels, and
//! range/azimuth conversions.
//!
//! Ego frame: x forward (radar boresight), y left, z up. Azimuth is measured
//! counterclockwise from +x and carried in degrees; radians only appear
//! inside trig calls.

use serde::{Deserialize, Serialize};

use crate::association::BBox2D;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Depth below which a camera-frame point counts as behind the camera.
pub const MIN_DEPTH: f64 = 1e-6;

/// One radar scatterer: polar measurement, Doppler, image pixel and ego position.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadarPoint {
    /// Range in meters.
    pub r: f64,
    /// Azimuth in degrees.
    pub a: f64,
    /// Doppler in m/s.
    pub d: f64,
    pub u: f64,
    pub v: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl RadarPoint {
    /// Fills the ego position from slant range `r`, azimuth `a` and height
    /// `z`, then projects it into the image. Requires `|z| <= r`.
    pub fn from_measurement(
        r: f64,
        a: f64,
        d: f64,
        z: f64,
        k: &CameraIntrinsics<f64>,
        e: &CameraExtrinsics<f64>,
    ) -> Result<Self> {
        let ground = (r * r - z * z).max(0.0).sqrt();
        let (x, y) = polar_to_cartesian(ground, a);
        let (u, v) = project_point([x, y, z], k, e)?;
        Ok(Self { r, a, d, u, v, x, y, z })
    }
}

/// Sign applied to the principal-point offset in the projection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignConvention {
    /// `u = fx·x'/z' + px`
    #[default]
    StandardPlus,
    /// `u = fx·x'/z' − px`
    PaperMinus,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics<T> {
    pub fx: T,
    pub fy: T,
    pub px: T,
    pub py: T,
    pub sign_convention: SignConvention,
}

impl<T: Scalar> CameraIntrinsics<T> {
    pub fn new(fx: T, fy: T, px: T, py: T, sign_convention: SignConvention) -> Result<Self> {
        if !(fx > T::zero() && fy > T::zero()) {
            return Err(Error::config("calibration.fx/fy", "focal lengths must be positive"));
        }
        Ok(Self {
            fx,
            fy,
            px,
            py,
            sign_convention,
        })
    }

    fn offset_sign(&self) -> T {
        match self.sign_convention {
            SignConvention::StandardPlus => T::one(),
            SignConvention::PaperMinus => -T::one(),
        }
    }
}

/// Rigid transform from ego to camera coordinates: `x_cam = R·x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraExtrinsics<T> {
    pub rotation: [[T; 3]; 3],
    pub translation: [T; 3],
}

impl<T: Scalar> CameraExtrinsics<T> {
    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Self {
            rotation: [[o, z, z], [z, o, z], [z, z, o]],
            translation: [z; 3],
        }
    }

    /// Validates `RᵀR = I` and `det R = 1` within 1e-9.
    pub fn new(rotation: [[T; 3]; 3], translation: [T; 3]) -> Result<Self> {
        let tol = T::lit(1e-9);
        for i in 0..3 {
            for j in 0..3 {
                let dot: T = (0..3).map(|k| rotation[k][i] * rotation[k][j]).sum();
                let want = if i == j { T::one() } else { T::zero() };
                if (dot - want).abs() > tol {
                    return Err(Error::config("calibration.R", "rotation is not orthonormal"));
                }
            }
        }
        if (det3(&rotation) - T::one()).abs() > tol {
            return Err(Error::config("calibration.R", "rotation determinant is not +1"));
        }
        Ok(Self { rotation, translation })
    }

    pub fn apply(&self, p: [T; 3]) -> [T; 3] {
        let r = &self.rotation;
        let mut out = self.translation;
        for (i, o) in out.iter_mut().enumerate() {
            *o += r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2];
        }
        out
    }

    /// Inverse transform: `x = Rᵀ·(x_cam − t)`.
    pub fn invert(&self, c: [T; 3]) -> [T; 3] {
        let d = [
            c[0] - self.translation[0],
            c[1] - self.translation[1],
            c[2] - self.translation[2],
        ];
        let r = &self.rotation;
        [
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
        ]
    }
}

fn det3<T: Scalar>(m: &[[T; 3]; 3]) -> T {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Projects an ego-frame point to pixel coordinates.
pub fn project_point<T: Scalar>(xyz: [T; 3], k: &CameraIntrinsics<T>, e: &CameraExtrinsics<T>) -> Result<(T, T)> {
    let c = e.apply(xyz);
    if c[2] <= T::lit(MIN_DEPTH) {
        return Err(Error::BehindCamera(c[2].as_f64()));
    }
    let s = k.offset_sign();
    Ok((k.fx * c[0] / c[2] + s * k.px, k.fy * c[1] / c[2] + s * k.py))
}

/// Ego-frame point on the ray through pixel `(u, v)` at camera depth `depth`.
pub fn unproject_pixel<T: Scalar>(
    u: T,
    v: T,
    depth: T,
    k: &CameraIntrinsics<T>,
    e: &CameraExtrinsics<T>,
) -> [T; 3] {
    let s = k.offset_sign();
    let xc = (u - s * k.px) / k.fx * depth;
    let yc = (v - s * k.py) / k.fy * depth;
    e.invert([xc, yc, depth])
}

pub fn polar_to_cartesian<T: Scalar>(r: T, a_deg: T) -> (T, T) {
    let a = a_deg.to_radians();
    (r * a.cos(), r * a.sin())
}

/// Inverse of [`polar_to_cartesian`]; the origin maps to `(0, 0)`.
pub fn cartesian_to_polar<T: Scalar>(x: T, y: T) -> (T, T) {
    let r = x.hypot(y);
    if r == T::zero() {
        return (T::zero(), T::zero());
    }
    (r, y.atan2(x).to_degrees())
}

/// Inclusive containment test.
pub fn in_bbox(u: f64, v: f64, b: &BBox2D) -> bool {
    b.u_min <= u && u <= b.u_max && b.v_min <= v && v <= b.v_max
}
