//! Explicit UV texture grids of BRDF parameters, stored as logits.

use crate::brdf::{BrdfParams, ParamsGrad, Rgb};
use crate::error::{Error, Result};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inputs are clamped to `[LOGIT_EPS, 1 - LOGIT_EPS]` so that exact 0 and 1
/// still give finite logits.
pub fn logit(p: f64) -> f64 {
    let p = p.clamp(LOGIT_EPS, 1.0 - LOGIT_EPS);
    (p / (1.0 - p)).ln()
}

pub const LOGIT_EPS: f64 = 1e-6;

/// One primitive's parameter textures. Texel `(row, col)` is centered at
/// `u = (col + ½)/width`, `v = (row + ½)/height`; lookups clamp at the border.
#[derive(Clone, Debug, PartialEq)]
pub struct MaterialGrid {
    pub height: usize,
    pub width: usize,
    pub albedo_logit: Vec<[f64; 3]>,
    pub metallic_logit: Vec<f64>,
    pub roughness_logit: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UvStencil {
    pub texels: [usize; 4],
    pub weights: [f64; 4],
}

/// A material lookup plus what is needed to backpropagate through it.
#[derive(Clone, Copy, Debug)]
pub struct MaterialSample {
    pub material_id: usize,
    pub stencil: UvStencil,
    pub params: BrdfParams,
}

impl MaterialGrid {
    pub fn constant(height: usize, width: usize, value: &BrdfParams) -> Self {
        let n = height * width;
        MaterialGrid {
            height,
            width,
            albedo_logit: vec![value.albedo.to_array().map(logit); n],
            metallic_logit: vec![logit(value.metallic); n],
            roughness_logit: vec![logit(value.roughness); n],
        }
    }

    /// All-zero logits, i.e. every parameter decodes to 0.5.
    pub fn neutral(height: usize, width: usize) -> Self {
        let n = height * width;
        MaterialGrid {
            height,
            width,
            albedo_logit: vec![[0.0; 3]; n],
            metallic_logit: vec![0.0; n],
            roughness_logit: vec![0.0; n],
        }
    }

    /// Builds a grid by evaluating `f` at each texel center.
    pub fn from_fn(height: usize, width: usize, f: impl Fn(f64, f64) -> BrdfParams) -> Self {
        let mut g = Self::neutral(height, width);
        for row in 0..height {
            for col in 0..width {
                let (u, v) = g.texel_center(row, col);
                let p = f(u, v);
                let i = row * width + col;
                g.albedo_logit[i] = p.albedo.to_array().map(logit);
                g.metallic_logit[i] = logit(p.metallic);
                g.roughness_logit[i] = logit(p.roughness);
            }
        }
        g
    }

    pub fn texel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn texel_center(&self, row: usize, col: usize) -> (f64, f64) {
        ((col as f64 + 0.5) / self.width as f64, (row as f64 + 0.5) / self.height as f64)
    }

    pub fn decoded_texel(&self, i: usize) -> BrdfParams {
        BrdfParams {
            albedo: Rgb::from_array(self.albedo_logit[i].map(sigmoid)),
            metallic: sigmoid(self.metallic_logit[i]),
            roughness: sigmoid(self.roughness_logit[i]),
        }
    }

    pub fn stencil(&self, uv: (f64, f64)) -> UvStencil {
        let x = uv.0.clamp(0.0, 1.0) * self.width as f64 - 0.5;
        let y = uv.1.clamp(0.0, 1.0) * self.height as f64 - 0.5;
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let cx = |c: f64| (c as i64).clamp(0, self.width as i64 - 1) as usize;
        let cy = |r: f64| (r as i64).clamp(0, self.height as i64 - 1) as usize;
        let (c0, c1, r0, r1) = (cx(x0), cx(x0 + 1.0), cy(y0), cy(y0 + 1.0));
        UvStencil {
            texels: [r0 * self.width + c0, r0 * self.width + c1, r1 * self.width + c0, r1 * self.width + c1],
            weights: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
        }
    }

    /// Interpolated logits at a stencil: `(albedo, metallic, roughness)`.
    pub fn logits_at(&self, s: &UvStencil) -> ([f64; 3], f64, f64) {
        let mut a = [0.0; 3];
        let (mut m, mut r) = (0.0, 0.0);
        for k in 0..4 {
            let (t, w) = (s.texels[k], s.weights[k]);
            for (c, ac) in a.iter_mut().enumerate() {
                *ac += w * self.albedo_logit[t][c];
            }
            m += w * self.metallic_logit[t];
            r += w * self.roughness_logit[t];
        }
        (a, m, r)
    }

    pub fn params_at(&self, s: &UvStencil) -> BrdfParams {
        let (a, m, r) = self.logits_at(s);
        BrdfParams { albedo: Rgb::from_array(a.map(sigmoid)), metallic: sigmoid(m), roughness: sigmoid(r) }
    }

    /// Pushes a gradient on decoded parameters back to texel logits.
    ///
    /// `grad` is laid out as `[albedo (3·T) | metallic (T) | roughness (T)]`.
    pub fn backprop(&self, s: &UvStencil, params: &BrdfParams, g: &ParamsGrad, grad: &mut [f64]) {
        let n = self.texel_count();
        let ds = |p: f64| p * (1.0 - p);
        let ga = g.albedo.zip(params.albedo, |g, p| g * ds(p)).to_array();
        let gm = g.metallic * ds(params.metallic);
        let gr = g.roughness * ds(params.roughness);
        for k in 0..4 {
            let (t, w) = (s.texels[k], s.weights[k]);
            if w == 0.0 {
                continue;
            }
            for c in 0..3 {
                grad[3 * t + c] += w * ga[c];
            }
            grad[3 * n + t] += w * gm;
            grad[4 * n + t] += w * gr;
        }
    }

    pub fn param_count(&self) -> usize {
        5 * self.texel_count()
    }

    /// `[albedo (3·T, texel-major) | metallic (T) | roughness (T)]`.
    pub fn read_params(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.albedo_logit.iter().flatten().copied().collect();
        v.extend_from_slice(&self.metallic_logit);
        v.extend_from_slice(&self.roughness_logit);
        v
    }

    pub fn write_params(&mut self, p: &[f64]) -> Result<()> {
        let n = self.texel_count();
        if p.len() != 5 * n {
            return Err(Error::LengthMismatch { expected: 5 * n, got: p.len() });
        }
        for (t, c) in self.albedo_logit.iter_mut().zip(p[..3 * n].chunks_exact(3)) {
            *t = [c[0], c[1], c[2]];
        }
        self.metallic_logit.copy_from_slice(&p[3 * n..4 * n]);
        self.roughness_logit.copy_from_slice(&p[4 * n..]);
        Ok(())
    }
}

/// Material grids indexed by material id.
#[derive(Clone, Debug, PartialEq)]
pub struct MaterialField {
    pub grids: Vec<MaterialGrid>,
}

impl MaterialField {
    pub fn sample(&self, material_id: usize, uv: (f64, f64)) -> MaterialSample {
        let grid = &self.grids[material_id];
        let stencil = grid.stencil(uv);
        MaterialSample { material_id, stencil, params: grid.params_at(&stencil) }
    }
}
