//! Material-phase losses: RGB rendering loss, the energy-conservation hinge,
//! the NDF-weighted diffuse penalty, bilateral smoothness and their weighted sum.
//!
//! These are the reference (forward-only) definitions. The fused
//! forward/backward pass in [`crate::grad`] must agree with them.

use serde::{Deserialize, Serialize};

use crate::brdf::Rgb;
use crate::config::{LossConfig, SpecScope};
use crate::geom::SurfaceHit;
use crate::material::MaterialField;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_pbr: f64,
    pub lambda_smth: f64,
    pub lambda_cons: f64,
    pub lambda_spec: f64,
    pub t_spec: f64,
    pub spec_scope: SpecScope,
}

impl LossWeights {
    /// Default weights for the synthetic scenes.
    pub const DEFAULT: LossWeights = LossWeights {
        lambda_pbr: 1.0,
        lambda_smth: 0.0005,
        lambda_cons: 0.01,
        lambda_spec: 0.5,
        t_spec: 1.0,
        spec_scope: SpecScope::Point,
    };

    pub fn zero() -> Self {
        LossWeights { lambda_pbr: 0.0, lambda_smth: 0.0, lambda_cons: 0.0, lambda_spec: 0.0, ..Self::DEFAULT }
    }
}

impl From<&LossConfig> for LossWeights {
    fn from(c: &LossConfig) -> Self {
        LossWeights {
            lambda_pbr: c.lambda_pbr,
            lambda_smth: c.lambda_smth,
            lambda_cons: c.lambda_cons,
            lambda_spec: c.lambda_spec,
            t_spec: c.t_spec,
            spec_scope: c.spec_scope,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DirRecord {
    pub cos_i: f64,
    pub f_r: Rgb,
    pub f_d: Rgb,
    pub ndf: f64,
}

#[derive(Clone, Debug, Default)]
pub struct ShadingSample {
    pub records: Vec<DirRecord>,
    pub quad_weight: f64,
    pub rendered: Rgb,
    pub reference: Rgb,
}

impl ShadingSample {
    /// `(2π/N) Σ f_r cos_i` per channel.
    pub fn reflected_energy(&self) -> Rgb {
        let mut acc = Rgb::ZERO;
        for r in &self.records {
            acc += r.f_r * r.cos_i;
        }
        acc * self.quad_weight
    }
}

/// Channel-mean squared error.
pub fn loss_pbr(rendered: Rgb, reference: Rgb) -> f64 {
    let d = rendered - reference;
    (d * d).mean()
}

/// Per-channel hinge `max(E_c - 1, 0)` on the quadrature energy, averaged over channels.
pub fn loss_cons(sample: &ShadingSample) -> f64 {
    sample.reflected_energy().map(|e| (e - 1.0).max(0.0)).mean()
}

/// Softmax weights of `ndf / t_spec`, one vector per sample. Weights are
/// normalized per sample (`Point`) or over the whole batch (`Batch`).
pub fn spec_weights(batch: &[ShadingSample], t_spec: f64, scope: SpecScope) -> Vec<Vec<f64>> {
    let logits = |s: &ShadingSample| s.records.iter().map(|r| r.ndf / t_spec).collect::<Vec<_>>();
    match scope {
        SpecScope::Point => batch
            .iter()
            .map(|s| {
                let l = logits(s);
                let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = l.iter().map(|v| (v - max).exp()).collect();
                let z: f64 = e.iter().sum();
                e.into_iter().map(|v| v / z).collect()
            })
            .collect(),
        SpecScope::Batch => {
            let all: Vec<Vec<f64>> = batch.iter().map(logits).collect();
            let max = all.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = all.iter().flatten().map(|v| (v - max).exp()).sum();
            all.into_iter().map(|l| l.into_iter().map(|v| (v - max).exp() / z).collect()).collect()
        }
    }
}

/// NDF-weighted diffuse penalty `(1/N) Σ softmax(D/T) · mean_c(f_d)`.
///
/// `Point` averages the per-sample values over the batch; `Batch` uses one
/// softmax over all pairs, so its weights already sum to one.
pub fn loss_spec(batch: &[ShadingSample], t_spec: f64, scope: SpecScope) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let weights = spec_weights(batch, t_spec, scope);
    let sum: f64 = batch
        .iter()
        .zip(&weights)
        .map(|(s, w)| {
            let n = s.records.len() as f64;
            s.records.iter().zip(w).map(|(r, w)| w * r.f_d.mean()).sum::<f64>() / n
        })
        .sum();
    match scope {
        SpecScope::Point => sum / batch.len() as f64,
        SpecScope::Batch => sum,
    }
}

/// Two horizontally or vertically adjacent pixels on the same primitive.
#[derive(Clone, Copy, Debug)]
pub struct SmoothPair {
    pub a: SurfaceHit,
    pub b: SurfaceHit,
    pub material_id: usize,
    /// Reference-image luminance difference between the two pixels.
    pub image_grad: f64,
}

pub fn smooth_pair_term(dr: f64, dm: f64, image_grad: f64) -> f64 {
    (dr.abs() + dm.abs()) * (-image_grad.abs()).exp()
}

/// Mean of `(|Δr| + |Δm|) exp(-|ΔI|)` over pairs.
pub fn loss_smooth(fields: &MaterialField, pairs: &[SmoothPair]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs
        .iter()
        .map(|p| {
            let a = fields.sample(p.material_id, p.a.uv).params;
            let b = fields.sample(p.material_id, p.b.uv).params;
            smooth_pair_term(a.roughness - b.roughness, a.metallic - b.metallic, p.image_grad)
        })
        .sum::<f64>()
        / pairs.len() as f64
}

/// Total loss and its weighted-term breakdown, as logged per iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub pbr: f64,
    pub smth: f64,
    pub cons: f64,
    pub spec: f64,
    /// Background rays supervising the environment directly.
    pub bg: f64,
}

/// `λ_pbr mean(L_pbr) + λ_smth smooth + λ_cons mean(L_cons) + λ_spec L_spec`.
/// Breakdown entries are the unweighted terms.
pub fn total_material_loss(batch: &[ShadingSample], smooth: f64, w: &LossWeights) -> LossBreakdown {
    assert!(!batch.is_empty(), "loss batch must be nonempty");
    let n = batch.len() as f64;
    let pbr = batch.iter().map(|s| loss_pbr(s.rendered, s.reference)).sum::<f64>() / n;
    let cons = batch.iter().map(loss_cons).sum::<f64>() / n;
    let spec = loss_spec(batch, w.t_spec, w.spec_scope);
    LossBreakdown {
        total: w.lambda_pbr * pbr + w.lambda_smth * smooth + w.lambda_cons * cons + w.lambda_spec * spec,
        pbr,
        smth: smooth,
        cons,
        spec,
        bg: 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Vec3;
    use crate::material::MaterialGrid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn sample_with(n: usize, f_r: impl Fn(usize) -> Rgb, f_d: Rgb, mut ndf: impl FnMut(usize) -> f64) -> ShadingSample {
        // Midpoint rule in z: cos_i = (k + 0.5)/n.
        ShadingSample {
            records: (0..n)
                .map(|k| DirRecord { cos_i: (k as f64 + 0.5) / n as f64, f_r: f_r(k), f_d, ndf: ndf(k) })
                .collect(),
            quad_weight: 2.0 * PI / n as f64,
            rendered: Rgb::ZERO,
            reference: Rgb::ZERO,
        }
    }

    #[test]
    fn pbr_values() {
        assert_eq!(loss_pbr(Rgb::new(0.3, 0.2, 0.1), Rgb::new(0.3, 0.2, 0.1)), 0.0);
        assert_eq!(loss_pbr(Rgb::ONE, Rgb::ZERO), 1.0);
        assert!((loss_pbr(Rgb::new(0.5, 0.0, 0.0), Rgb::ZERO) - 0.25 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn cons_values() {
        let absorber = sample_with(64, |_| Rgb::ZERO, Rgb::ZERO, |_| 1.0);
        assert_eq!(loss_cons(&absorber), 0.0);
        let white = sample_with(256, |_| Rgb::splat(1.0 / PI), Rgb::splat(1.0 / PI), |_| 1.0);
        assert!((white.reflected_energy().r - 1.0).abs() < 0.01);
        assert!(loss_cons(&white) < 0.01);
    }

    #[test]
    fn spec_point_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fd = Rgb::new(0.2, 0.1, 0.05);
        let s = sample_with(128, |_| Rgb::ZERO, fd, |_| rng.gen_range(0.0..50.0));
        let v = loss_spec(std::slice::from_ref(&s), 1.0, SpecScope::Point);
        assert!((v - fd.mean() / 128.0).abs() < 1e-15);
        let metal = sample_with(16, |_| Rgb::ZERO, Rgb::ZERO, |k| k as f64);
        assert_eq!(loss_spec(&[metal], 1.0, SpecScope::Point), 0.0);
    }

    #[test]
    fn spec_batch_prefers_high_ndf_point() {
        let a = sample_with(8, |_| Rgb::ZERO, Rgb::splat(0.1), |k| 2.0 + 0.1 * k as f64);
        let b = sample_with(8, |_| Rgb::ZERO, Rgb::splat(0.1), |k| 0.1 * k as f64);
        let w = spec_weights(&[a.clone(), b.clone()], 1.0, SpecScope::Batch);
        let wa: f64 = w[0].iter().sum();
        let wb: f64 = w[1].iter().sum();
        assert!((wa + wb - 1.0).abs() < 1e-12);
        // Brute force: each a-logit exceeds the matching b-logit by 2, so wa = e²/(1+e²).
        let e2 = 2f64.exp();
        assert!((wa - e2 / (1.0 + e2)).abs() < 1e-12);
        assert!(wa > 0.5);
    }

    #[test]
    fn smooth_values() {
        assert_eq!(smooth_pair_term(0.0, 0.0, 0.3), 0.0);
        assert!((smooth_pair_term(0.1, 0.0, 0.0) - 0.1).abs() < 1e-15);
        assert!(smooth_pair_term(0.1, 0.0, 20.0) < 1e-8);
        let field = MaterialField { grids: vec![MaterialGrid::neutral(4, 4)] };
        let hit = |u: f64| SurfaceHit { point: Vec3::ZERO, normal: Vec3::Y.normalized().unwrap(), uv: (u, 0.5), primitive_id: 0, t_hit: 1.0 };
        let pairs = [SmoothPair { a: hit(0.1), b: hit(0.9), material_id: 0, image_grad: 0.0 }];
        assert_eq!(loss_smooth(&field, &pairs), 0.0);
    }

    #[test]
    fn total_weighting() {
        let mut s = sample_with(32, |_| Rgb::splat(0.2), Rgb::splat(0.1), |k| k as f64);
        s.rendered = Rgb::splat(0.4);
        s.reference = Rgb::splat(0.4);
        let zero = total_material_loss(std::slice::from_ref(&s), 0.7, &LossWeights::zero());
        assert_eq!(zero.total, 0.0);
        let pbr_only = LossWeights { lambda_pbr: 1.0, ..LossWeights::zero() };
        assert_eq!(total_material_loss(std::slice::from_ref(&s), 0.7, &pbr_only).total, 0.0);
        let w = LossWeights::DEFAULT;
        assert_eq!((w.lambda_pbr, w.lambda_smth, w.lambda_cons, w.lambda_spec, w.t_spec), (1.0, 0.0005, 0.01, 0.5, 1.0));
        let b = total_material_loss(std::slice::from_ref(&s), 0.7, &w);
        let expect = 0.0005 * 0.7 + 0.01 * b.cons + 0.5 * b.spec;
        assert!((b.total - expect).abs() < 1e-15);
    }
}
