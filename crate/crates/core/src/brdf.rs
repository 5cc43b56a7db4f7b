//! Simplified Disney BRDF: Lambertian diffuse lobe plus a microfacet specular
//! lobe with a spherical-Gaussian NDF, Schlick Fresnel and a GGX-style
//! geometry term.
//!
//! Besides the plain evaluators this module carries [`PointBrdf`], the
//! per-shading-point kernel used by both the renderer and the gradient code.
//! It caches the direction-independent factors and can backpropagate an
//! adjoint on `f_r` into `(albedo, metallic, roughness)`.

use std::f64::consts::{FRAC_1_PI, PI};
use std::ops::{Add, AddAssign, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{halfway, Direction};

/// Evaluation-time roughness floor; the NDF is singular at zero roughness.
pub const ROUGHNESS_MIN: f64 = 0.04;
/// Floor on the `4 cos_i cos_o` specular denominator.
pub const DENOM_MIN: f64 = 1e-4;
/// Dielectric base reflectance.
pub const F0_DIELECTRIC: f64 = 0.04;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Rgb {
    pub r: f64,
    pub g: f64,
    pub b: f64,
}

impl Rgb {
    pub const ZERO: Rgb = Rgb::splat(0.0);
    pub const ONE: Rgb = Rgb::splat(1.0);

    pub const fn new(r: f64, g: f64, b: f64) -> Self {
        Self { r, g, b }
    }

    pub const fn splat(v: f64) -> Self {
        Self { r: v, g: v, b: v }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.r, self.g, self.b]
    }

    pub fn map(self, f: impl Fn(f64) -> f64) -> Rgb {
        Rgb::new(f(self.r), f(self.g), f(self.b))
    }

    pub fn zip(self, o: Rgb, f: impl Fn(f64, f64) -> f64) -> Rgb {
        Rgb::new(f(self.r, o.r), f(self.g, o.g), f(self.b, o.b))
    }

    pub fn mean(self) -> f64 {
        (self.r + self.g + self.b) / 3.0
    }

    pub fn min_channel(self) -> f64 {
        self.r.min(self.g).min(self.b)
    }

    pub fn luminance(self) -> f64 {
        0.2126 * self.r + 0.7152 * self.g + 0.0722 * self.b
    }

    pub fn is_finite(self) -> bool {
        self.r.is_finite() && self.g.is_finite() && self.b.is_finite()
    }
}

impl Add for Rgb {
    type Output = Rgb;
    fn add(self, o: Rgb) -> Rgb {
        self.zip(o, |a, b| a + b)
    }
}

impl AddAssign for Rgb {
    fn add_assign(&mut self, o: Rgb) {
        *self = *self + o;
    }
}

impl Sub for Rgb {
    type Output = Rgb;
    fn sub(self, o: Rgb) -> Rgb {
        self.zip(o, |a, b| a - b)
    }
}

impl Mul for Rgb {
    type Output = Rgb;
    fn mul(self, o: Rgb) -> Rgb {
        self.zip(o, |a, b| a * b)
    }
}

impl Mul<f64> for Rgb {
    type Output = Rgb;
    fn mul(self, s: f64) -> Rgb {
        self.map(|a| a * s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BrdfParams {
    pub albedo: Rgb,
    pub metallic: f64,
    pub roughness: f64,
}

impl BrdfParams {
    pub fn is_valid(&self) -> bool {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        unit(self.albedo.r) && unit(self.albedo.g) && unit(self.albedo.b) && unit(self.metallic) && unit(self.roughness)
    }
}

/// Evaluation-time roughness: `max(r, ROUGHNESS_MIN)`.
pub fn effective_roughness(r: f64) -> f64 {
    r.max(ROUGHNESS_MIN)
}

pub fn eval_diffuse(p: &BrdfParams) -> Rgb {
    p.albedo * ((1.0 - p.metallic) * FRAC_1_PI)
}

fn ndf_unchecked(cos_h: f64, a: f64) -> f64 {
    (2.0 / a * (cos_h - 1.0)).exp() / (PI * a)
}

/// Accumulates `adj · ∂f_d/∂(b, m)` into `grad`.
pub fn backprop_diffuse(p: &BrdfParams, adj: Rgb, grad: &mut ParamsGrad) {
    grad.albedo += adj * ((1.0 - p.metallic) * FRAC_1_PI);
    let ab = adj * p.albedo;
    grad.metallic -= (ab.r + ab.g + ab.b) * FRAC_1_PI;
}

/// Spherical-Gaussian NDF `exp(2 (cos_h - 1) / r^4) / (π r^4)`.
pub fn eval_ndf(cos_h: f64, roughness_eff: f64) -> Result<f64> {
    if !(roughness_eff >= ROUGHNESS_MIN) {
        return Err(Error::Domain { what: "ndf roughness", value: roughness_eff, min: ROUGHNESS_MIN });
    }
    Ok(ndf_unchecked(cos_h, roughness_eff.powi(4)))
}

pub fn base_reflectance(p: &BrdfParams) -> Rgb {
    p.albedo * p.metallic + Rgb::splat(F0_DIELECTRIC * (1.0 - p.metallic))
}

/// Schlick Fresnel with `F0 = 0.04 (1 - m) + b m`.
pub fn eval_fresnel(cos_oh: f64, p: &BrdfParams) -> Rgb {
    let s = (1.0 - cos_oh.clamp(0.0, 1.0)).powi(5);
    base_reflectance(p).map(|f0| f0 + (1.0 - f0) * s)
}

/// Smith-Schlick masking `z · 2/((2 - k) z + k)` with `k = r²`, in (0, 1].
/// `2/((2 - k) z + k)` alone already carries the `1/z` of the lobe's
/// denominator, so the `z` factor keeps it from being divided twice.
fn g1(z: f64, k: f64) -> f64 {
    2.0 * z / ((2.0 - k) * z + k)
}

fn dg1_dk(z: f64, k: f64) -> f64 {
    let den = (2.0 - k) * z + k;
    -2.0 * z * (1.0 - z) / (den * den)
}

/// Separable geometry term `G1(cos_i) G1(cos_o)`.
pub fn eval_geometry(cos_i: f64, cos_o: f64, roughness_eff: f64) -> Result<f64> {
    if !(cos_i > 0.0) {
        return Err(Error::Domain { what: "geometry cos_i", value: cos_i, min: 0.0 });
    }
    if !(cos_o > 0.0) {
        return Err(Error::Domain { what: "geometry cos_o", value: cos_o, min: 0.0 });
    }
    let k = roughness_eff.max(ROUGHNESS_MIN).powi(2);
    Ok(g1(cos_i, k) * g1(cos_o, k))
}

/// Specular microfacet lobe `D F G / (4 cos_i cos_o)`; zero below the horizon.
pub fn eval_specular(w_o: Direction, w_i: Direction, n: Direction, p: &BrdfParams) -> Rgb {
    PointBrdf::new(p, w_o, n).eval(w_i).specular
}

pub fn eval_brdf(w_o: Direction, w_i: Direction, n: Direction, p: &BrdfParams) -> Rgb {
    PointBrdf::new(p, w_o, n).eval(w_i).total()
}

/// Direction-independent BRDF state at one shading point.
#[derive(Clone, Debug)]
pub struct PointBrdf {
    pub params: BrdfParams,
    pub w_o: Direction,
    pub n: Direction,
    pub cos_o: f64,
    pub diffuse: Rgb,
    f0: Rgb,
    r_eff: f64,
    r_clamped: bool,
    a: f64,
    k: f64,
    g1_o: f64,
    dg1_o_dk: f64,
}

/// One BRDF evaluation for an incident direction.
#[derive(Clone, Copy, Debug, Default)]
pub struct DirSample {
    pub cos_i: f64,
    pub specular: Rgb,
    /// Diffuse lobe, zeroed below the horizon like the specular one.
    pub diffuse: Rgb,
    /// NDF at the halfway vector (0 below the horizon).
    pub ndf: f64,
    above: bool,
    fresnel: Rgb,
    schlick: f64,
    /// `D G / denom`
    scale: f64,
    /// `d(D G)/d r_eff / denom`
    dscale_dr: f64,
}

impl DirSample {
    pub fn total(&self) -> Rgb {
        self.diffuse + self.specular
    }

    pub fn above_horizon(&self) -> bool {
        self.above
    }
}

/// Gradient of a scalar with respect to `(albedo, metallic, roughness)`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ParamsGrad {
    pub albedo: Rgb,
    pub metallic: f64,
    pub roughness: f64,
}

impl AddAssign for ParamsGrad {
    fn add_assign(&mut self, o: ParamsGrad) {
        self.albedo += o.albedo;
        self.metallic += o.metallic;
        self.roughness += o.roughness;
    }
}

impl PointBrdf {
    pub fn new(p: &BrdfParams, w_o: Direction, n: Direction) -> Self {
        let r_eff = effective_roughness(p.roughness);
        let k = r_eff * r_eff;
        let a = k * k;
        let cos_o = w_o.dot(n);
        let (g1_o, dg1_o_dk) = if cos_o > 0.0 {
            (g1(cos_o, k), dg1_dk(cos_o, k))
        } else {
            (0.0, 0.0)
        };
        PointBrdf {
            params: *p,
            w_o,
            n,
            cos_o,
            diffuse: eval_diffuse(p),
            f0: base_reflectance(p),
            r_eff,
            r_clamped: p.roughness < ROUGHNESS_MIN,
            a,
            k,
            g1_o,
            dg1_o_dk,
        }
    }

    /// NDF value at the halfway vector, or 0 when either direction is below the horizon.
    pub fn ndf(&self, w_i: Direction) -> f64 {
        let cos_i = w_i.dot(self.n);
        if !(cos_i > 0.0 && self.cos_o > 0.0) {
            return 0.0;
        }
        match halfway(self.w_o, w_i) {
            Ok(h) => ndf_unchecked(h.dot(self.n), self.a),
            Err(_) => 0.0,
        }
    }

    pub fn eval(&self, w_i: Direction) -> DirSample {
        let cos_i = w_i.dot(self.n);
        let Ok(h) = halfway(self.w_o, w_i) else {
            return DirSample { cos_i, ..DirSample::default() };
        };
        if !(cos_i > 0.0 && self.cos_o > 0.0) {
            return DirSample { cos_i, ..DirSample::default() };
        }
        let cos_h = h.dot(self.n);
        // (1 + ω_o·ω_i)/|ω_o + ω_i| equals ω_o·h and is exactly symmetric in floating point.
        let cos_oh = ((1.0 + self.w_o.dot(w_i)) / (self.w_o.vec() + w_i.vec()).length()).clamp(0.0, 1.0);
        let d = ndf_unchecked(cos_h, self.a);
        let schlick = (1.0 - cos_oh).powi(5);
        let fresnel = self.f0.map(|f0| f0 + (1.0 - f0) * schlick);
        let g1_i = g1(cos_i, self.k);
        let g = g1_i * self.g1_o;
        let denom = (4.0 * (cos_i * self.cos_o)).max(DENOM_MIN);
        let scale = d * g / denom;
        let dscale_dr = if self.r_clamped {
            0.0
        } else {
            let r = self.r_eff;
            let dd_da = d * (-1.0 / self.a - 2.0 * (cos_h - 1.0) / (self.a * self.a));
            let dd_dr = dd_da * 4.0 * r * r * r;
            let dg1_i_dk = dg1_dk(cos_i, self.k);
            let dg_dr = 2.0 * r * (dg1_i_dk * self.g1_o + g1_i * self.dg1_o_dk);
            (dd_dr * g + d * dg_dr) / denom
        };
        DirSample {
            cos_i,
            specular: fresnel * scale,
            diffuse: self.diffuse,
            ndf: d,
            above: true,
            fresnel,
            schlick,
            scale,
            dscale_dr,
        }
    }

    /// Accumulates `adj · ∂f_r/∂(b, m, r)` for one sample into `grad`.
    pub fn backprop(&self, s: &DirSample, adj: Rgb, grad: &mut ParamsGrad) {
        if !s.above {
            return;
        }
        self.backprop_diffuse(adj, grad);
        let m = self.params.metallic;
        let b = self.params.albedo;
        let k = s.scale * (1.0 - s.schlick);
        grad.albedo += adj * (k * m);
        let ab = adj * (b - Rgb::splat(F0_DIELECTRIC));
        grad.metallic += (ab.r + ab.g + ab.b) * k;
        let af = adj * s.fresnel;
        grad.roughness += (af.r + af.g + af.b) * s.dscale_dr;
    }

    /// Accumulates `adj · ∂f_d/∂(b, m)`.
    pub fn backprop_diffuse(&self, adj: Rgb, grad: &mut ParamsGrad) {
        backprop_diffuse(&self.params, adj, grad);
    }
}
