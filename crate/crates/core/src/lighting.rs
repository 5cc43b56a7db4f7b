//! Incident lighting: a distant lat-long HDR environment stored as log
//! radiance, plus optional point lights.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::brdf::Rgb;
use crate::error::{Error, Result};
use crate::geom::{occluded, Direction, Scene, Vec3};
use crate::image::HdrImage;

/// Smallest radiance written back when importing an env map from PFM.
const MIN_IMPORT_RADIANCE: f64 = 1e-8;

/// Lat-long environment map. Row `i` spans polar angle `θ` measured from
/// `+y`, column `j` spans azimuth `φ = atan2(z, x)` in `[0, 2π)`. Texel
/// centers sit at `((i + ½)π/H, (j + ½)2π/W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvMap {
    height: usize,
    width: usize,
    exposure: f64,
    log_radiance: Vec<[f64; 3]>,
    decoded: Vec<Rgb>,
}

/// Bilinear footprint of one lookup: four texel indices and their weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvStencil {
    pub texels: [usize; 4],
    pub weights: [f64; 4],
}

impl EnvMap {
    pub fn constant(height: usize, width: usize, log_value: [f64; 3], exposure: f64) -> Result<Self> {
        Self::from_log_radiance(height, width, vec![log_value; height * width], exposure)
    }

    pub fn from_log_radiance(height: usize, width: usize, log_radiance: Vec<[f64; 3]>, exposure: f64) -> Result<Self> {
        if height < 2 || width < 2 {
            return Err(Error::InvalidInput(format!("env map must be at least 2x2, got {height}x{width}")));
        }
        if log_radiance.len() != height * width {
            return Err(Error::LengthMismatch { expected: height * width, got: log_radiance.len() });
        }
        if !(exposure > 0.0 && exposure.is_finite()) {
            return Err(Error::InvalidInput("env exposure must be positive".into()));
        }
        let mut env = EnvMap { height, width, exposure, log_radiance, decoded: Vec::new() };
        env.refresh();
        Ok(env)
    }

    /// Builds an env map whose texels decode to `radiance` (clamped to a tiny positive floor).
    pub fn from_radiance(img: &HdrImage, exposure: f64) -> Result<Self> {
        let logs = img
            .pixels
            .iter()
            .map(|p| p.to_array().map(|v| (v.max(MIN_IMPORT_RADIANCE) / exposure).ln()))
            .collect();
        Self::from_log_radiance(img.height, img.width, logs, exposure)
    }

    fn refresh(&mut self) {
        let e = self.exposure;
        self.decoded = self.log_radiance.iter().map(|l| Rgb::from_array(l.map(|v| e * v.exp()))).collect();
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn exposure(&self) -> f64 {
        self.exposure
    }

    pub fn texel_count(&self) -> usize {
        self.height * self.width
    }

    /// Decoded radiance of texel `index` (row-major).
    pub fn texel(&self, index: usize) -> Rgb {
        self.decoded[index]
    }

    pub fn texel_direction(&self, row: usize, col: usize) -> Direction {
        let theta = (row as f64 + 0.5) * PI / self.height as f64;
        let phi = (col as f64 + 0.5) * 2.0 * PI / self.width as f64;
        direction_from_angles(theta, phi)
    }

    pub fn stencil(&self, w: Direction) -> EnvStencil {
        let (theta, phi) = angles_of(w);
        let u = phi / (2.0 * PI) * self.width as f64 - 0.5;
        let v = theta / PI * self.height as f64 - 0.5;
        let c0 = u.floor();
        let r0 = v.floor();
        let fu = u - c0;
        let fv = v - r0;
        let w_ = self.width as i64;
        let wrap = |c: i64| c.rem_euclid(w_) as usize;
        let clamp = |r: i64| r.clamp(0, self.height as i64 - 1) as usize;
        let (c0, r0) = (c0 as i64, r0 as i64);
        let (ca, cb) = (wrap(c0), wrap(c0 + 1));
        let (ra, rb) = (clamp(r0), clamp(r0 + 1));
        EnvStencil {
            texels: [ra * self.width + ca, ra * self.width + cb, rb * self.width + ca, rb * self.width + cb],
            weights: [(1.0 - fu) * (1.0 - fv), fu * (1.0 - fv), (1.0 - fu) * fv, fu * fv],
        }
    }

    pub fn eval_stencil(&self, s: &EnvStencil) -> Rgb {
        let mut acc = Rgb::ZERO;
        for k in 0..4 {
            acc += self.decoded[s.texels[k]] * s.weights[k];
        }
        acc
    }

    /// Bilinearly interpolated decoded radiance along `w`.
    pub fn radiance(&self, w: Direction) -> Rgb {
        self.eval_stencil(&self.stencil(w))
    }

    pub fn param_count(&self) -> usize {
        3 * self.texel_count()
    }

    /// Log radiance flattened texel-major as `[r, g, b, r, g, b, ...]`.
    pub fn read_params(&self) -> Vec<f64> {
        self.log_radiance.iter().flatten().copied().collect()
    }

    pub fn write_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::LengthMismatch { expected: self.param_count(), got: params.len() });
        }
        for (texel, chunk) in self.log_radiance.iter_mut().zip(params.chunks_exact(3)) {
            *texel = [chunk[0], chunk[1], chunk[2]];
        }
        self.refresh();
        Ok(())
    }

    /// Decoded radiance as an image (row 0 = polar angle near `+y`).
    pub fn to_image(&self) -> HdrImage {
        HdrImage { width: self.width, height: self.height, pixels: self.decoded.clone() }
    }

    /// Backpropagates `adj` on a stencil lookup into log-radiance gradients
    /// laid out like [`EnvMap::read_params`].
    pub fn backprop_stencil(&self, s: &EnvStencil, adj: Rgb, grad: &mut [f64]) {
        for k in 0..4 {
            let t = s.texels[k];
            let d = self.decoded[t] * s.weights[k];
            grad[3 * t] += adj.r * d.r;
            grad[3 * t + 1] += adj.g * d.g;
            grad[3 * t + 2] += adj.b * d.b;
        }
    }
}

pub fn angles_of(w: Direction) -> (f64, f64) {
    let v = w.vec();
    let theta = v.y.clamp(-1.0, 1.0).acos();
    let mut phi = v.z.atan2(v.x);
    if phi < 0.0 {
        phi += 2.0 * PI;
    }
    if phi >= 2.0 * PI {
        phi -= 2.0 * PI;
    }
    (theta, phi)
}

pub fn direction_from_angles(theta: f64, phi: f64) -> Direction {
    let s = theta.sin();
    Vec3::new(s * phi.cos(), theta.cos(), s * phi.sin()).normalized().expect("unit direction")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointLight {
    pub position: Vec3,
    /// Radiant intensity per channel.
    pub intensity: Rgb,
}

/// Direction toward the light and its inverse-square irradiance at `x`
/// (zero when `shadows` is set and the segment is blocked).
pub fn point_light_incident(light: &PointLight, x: Vec3, scene: &Scene, shadows: bool) -> Result<(Direction, Rgb)> {
    let delta = light.position - x;
    let dist2 = delta.length_squared();
    if dist2 < 1e-18 {
        return Err(Error::CoincidentPoint);
    }
    let dir = delta.normalized().ok_or(Error::CoincidentPoint)?;
    if shadows && occluded(scene, x, light.position) {
        return Ok((dir, Rgb::ZERO));
    }
    Ok((dir, light.intensity * (1.0 / dist2)))
}
