//! Material-recovery metrics and the four-way loss ablation
//! (neither term, energy hinge only, specular penalty only, both).

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::SpecScope;
use crate::dataset::{render_view, GroundTruth};
use crate::error::{Error, Result};
use crate::fit::{build_problem, fit, FitOptions, LogRecord};
use crate::grad::FitProblem;
use crate::image::HdrImage;
use crate::losses::{LossBreakdown, LossWeights};
use crate::material::MaterialField;

/// Reported in place of an infinite PSNR (identical inputs).
pub const PSNR_CAP: f64 = 99.0;

fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP)
}

/// `10·log10(peak²/MSE)` over all pixels and channels, capped at [`PSNR_CAP`].
pub fn image_psnr(a: &HdrImage, b: &HdrImage, peak: f64) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::InvalidInput(format!("image sizes differ: {}x{} vs {}x{}", a.width, a.height, b.width, b.height)));
    }
    if !(peak > 0.0) {
        return Err(Error::InvalidInput("PSNR peak must be positive".into()));
    }
    let sq: f64 = a.pixels.iter().zip(&b.pixels).map(|(x, y)| ((*x - *y) * (*x - *y)).to_array().iter().sum::<f64>()).sum();
    Ok(psnr_from_mse(sq / (3 * a.pixels.len()) as f64, peak))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamMetric {
    pub rmse: f64,
    pub psnr: f64,
}

impl ParamMetric {
    fn from_sums(sq: f64, n: usize) -> Self {
        let mse = sq / n as f64;
        ParamMetric { rmse: mse.sqrt(), psnr: psnr_from_mse(mse, 1.0) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaterialMetrics {
    pub albedo: ParamMetric,
    pub metallic: ParamMetric,
    pub roughness: ParamMetric,
    pub texels: usize,
}

/// Per-grid masks of texels that carry weight in at least one training lookup.
pub fn visibility_mask(problem: &FitProblem, field: &MaterialField) -> Vec<Vec<bool>> {
    let mut mask: Vec<Vec<bool>> = field.grids.iter().map(|g| vec![false; g.texel_count()]).collect();
    for ray in &problem.rays {
        for (t, w) in ray.stencil.texels.iter().zip(ray.stencil.weights) {
            if w > 0.0 {
                mask[ray.material_id][*t] = true;
            }
        }
    }
    mask
}

/// RMSE and PSNR of decoded parameters over masked texels of all grids.
pub fn material_metrics(recovered: &MaterialField, truth: &MaterialField, mask: &[Vec<bool>]) -> Result<MaterialMetrics> {
    if recovered.grids.len() != truth.grids.len() || mask.len() != truth.grids.len() {
        return Err(Error::LengthMismatch { expected: truth.grids.len(), got: recovered.grids.len().min(mask.len()) });
    }
    let (mut sa, mut sm, mut sr, mut n) = (0.0, 0.0, 0.0, 0);
    for ((rg, tg), mg) in recovered.grids.iter().zip(&truth.grids).zip(mask) {
        if (rg.height, rg.width) != (tg.height, tg.width) || mg.len() != tg.texel_count() {
            return Err(Error::InvalidInput("material grid resolutions differ".into()));
        }
        for t in (0..tg.texel_count()).filter(|&t| mg[t]) {
            let (a, b) = (rg.decoded_texel(t), tg.decoded_texel(t));
            let d = a.albedo - b.albedo;
            sa += (d * d).to_array().iter().sum::<f64>();
            sm += (a.metallic - b.metallic).powi(2);
            sr += (a.roughness - b.roughness).powi(2);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(MaterialMetrics {
        albedo: ParamMetric::from_sums(sa, 3 * n),
        metallic: ParamMetric::from_sums(sm, n),
        roughness: ParamMetric::from_sums(sr, n),
        texels: n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub id: usize,
    pub lambda_cons: f64,
    pub lambda_spec: f64,
    /// Mean PSNR over validation views (peak 1, linear radiance).
    pub rgb_psnr: f64,
    pub materials: MaterialMetrics,
    pub final_loss: LossBreakdown,
    pub curve: Vec<LogRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub spec_scope: SpecScope,
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, id: usize) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.id == id)
    }

    /// Fixed-width summary table.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>2}  {:>6}  {:>6}  {:>8}  {:>9} {:>7}  {:>9} {:>7}  {:>9} {:>7}",
            "ID", "L_cons", "L_spec", "RGB PSNR", "Rough PSNR", "RMSE", "Metal PSNR", "RMSE", "Albedo PSNR", "RMSE"
        );
        for r in &self.rows {
            let mark = |on: bool| if on { "yes" } else { "no" };
            let m = &r.materials;
            let _ = writeln!(
                s,
                "{:>2}  {:>6}  {:>6}  {:>8.2}  {:>10.2} {:>7.4}  {:>10.2} {:>7.4}  {:>11.2} {:>7.4}",
                r.id,
                mark(r.lambda_cons > 0.0),
                mark(r.lambda_spec > 0.0),
                r.rgb_psnr,
                m.roughness.psnr,
                m.roughness.rmse,
                m.metallic.psnr,
                m.metallic.rmse,
                m.albedo.psnr,
                m.albedo.rmse
            );
        }
        s
    }
}

/// The four configurations: `(id, λ_cons, λ_spec)` with the other weights from `base`.
pub fn ablation_weights(base: &LossWeights, cons: f64, spec: f64) -> [(usize, LossWeights); 4] {
    [
        (1, LossWeights { lambda_cons: 0.0, lambda_spec: 0.0, ..*base }),
        (2, LossWeights { lambda_cons: cons, lambda_spec: 0.0, ..*base }),
        (3, LossWeights { lambda_cons: 0.0, lambda_spec: spec, ..*base }),
        (4, LossWeights { lambda_cons: cons, lambda_spec: spec, ..*base }),
    ]
}

/// Mean validation-view PSNR of a fitted model, rendered with the fitting quadrature.
pub fn validation_psnr(gt: &GroundTruth, materials: &MaterialField, env: &crate::lighting::EnvMap) -> Result<f64> {
    let s = &gt.config.sampling;
    let mut acc = 0.0;
    for (cam, truth) in gt.val_cameras().iter().zip(&gt.val) {
        let img = render_view(&gt.config, &gt.scene, materials, env, &gt.point_lights, cam, s.n_fit, s.rotation_fit);
        acc += image_psnr(&img, truth, 1.0)?;
    }
    Ok(acc / gt.val.len().max(1) as f64)
}

/// Runs the four fits with identical data and seed. Writes each fit's
/// artifacts to `out_dir/idN/` plus `report.json` and `table.txt`.
pub fn run_ablation(gt: &GroundTruth, base: &LossWeights, out_dir: Option<&Path>, opts: FitOptions) -> Result<AblationReport> {
    let cfg_loss = &gt.config.loss;
    let problem = build_problem(gt)?;
    let mask = visibility_mask(&problem, &gt.materials);
    let mut rows = Vec::new();
    for (id, w) in ablation_weights(base, cfg_loss.lambda_cons, cfg_loss.lambda_spec) {
        let dir = out_dir.map(|d| d.join(format!("id{id}")));
        let res = fit(gt, &w, dir.as_deref(), opts)?;
        let materials = res.params.materials()?;
        let env = res.params.env()?.expect("fit params carry an env segment");
        rows.push(AblationRow {
            id,
            lambda_cons: w.lambda_cons,
            lambda_spec: w.lambda_spec,
            rgb_psnr: validation_psnr(gt, &materials, &env)?,
            materials: material_metrics(&materials, &gt.materials, &mask)?,
            final_loss: res.final_loss,
            curve: res.log,
        });
    }
    let report = AblationReport { spec_scope: base.spec_scope, seed: gt.config.seed, rows };
    if let Some(dir) = out_dir {
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        crate::image::write_file(&dir.join("report.json"), json.as_bytes())?;
        crate::image::write_file(&dir.join("table.txt"), report.table().as_bytes())?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brdf::{BrdfParams, Rgb};
    use crate::material::MaterialGrid;

    #[test]
    fn psnr_values() {
        let a = HdrImage::from_pixels(2, 1, vec![Rgb::splat(0.5), Rgb::splat(0.2)]).unwrap();
        assert_eq!(image_psnr(&a, &a, 1.0).unwrap(), PSNR_CAP);
        let b = HdrImage::from_pixels(2, 1, vec![Rgb::splat(0.6), Rgb::splat(0.1)]).unwrap();
        assert!((image_psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        let scale = |img: &HdrImage| HdrImage::from_pixels(2, 1, img.pixels.iter().map(|p| *p * 2.0).collect()).unwrap();
        assert!((image_psnr(&scale(&a), &scale(&b), 2.0).unwrap() - 20.0).abs() < 1e-9);
        assert!(image_psnr(&a, &HdrImage::new(1, 1), 1.0).is_err());
    }

    fn field(albedo: f64) -> MaterialField {
        MaterialField { grids: vec![MaterialGrid::constant(2, 2, &BrdfParams { albedo: Rgb::splat(albedo), metallic: 0.3, roughness: 0.6 })] }
    }

    #[test]
    fn material_metric_values() {
        let truth = field(0.5);
        let all = vec![vec![true; 4]];
        let same = material_metrics(&truth, &truth, &all).unwrap();
        assert_eq!((same.albedo.rmse, same.albedo.psnr), (0.0, PSNR_CAP));
        let off = material_metrics(&field(0.6), &truth, &all).unwrap();
        assert!((off.albedo.rmse - 0.1).abs() < 1e-9);
        assert!((off.albedo.psnr - 20.0).abs() < 1e-6);
        assert_eq!(off.metallic.rmse, 0.0);
    }

    #[test]
    fn masked_texels_are_ignored() {
        let truth = field(0.5);
        let mut rec = truth.clone();
        rec.grids[0].albedo_logit[3] = [4.0; 3];
        rec.grids[0].roughness_logit[3] = -4.0;
        let mask = vec![vec![true, true, true, false]];
        assert_eq!(material_metrics(&rec, &truth, &mask).unwrap(), material_metrics(&truth, &truth, &mask).unwrap());
        assert!(matches!(material_metrics(&rec, &truth, &[vec![false; 4]]), Err(Error::EmptyMask)));
    }

    #[test]
    fn ablation_rows_follow_the_toggle_pattern() {
        let rows = ablation_weights(&LossWeights::DEFAULT, 0.01, 0.5);
        let pattern: Vec<_> = rows.iter().map(|(id, w)| (*id, w.lambda_cons, w.lambda_spec)).collect();
        assert_eq!(pattern, vec![(1, 0.0, 0.0), (2, 0.01, 0.0), (3, 0.0, 0.5), (4, 0.01, 0.5)]);
        assert!(rows.iter().all(|(_, w)| w.lambda_pbr == 1.0 && w.lambda_smth == 0.0005));
    }
}
