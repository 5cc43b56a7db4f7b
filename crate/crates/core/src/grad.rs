//! Fused loss evaluation and reverse-mode gradient over a ray batch.
//!
//! Gradients are hand-derived adjoints of the forward pass in
//! [`crate::render::shade`] and the losses in [`crate::losses`]. The NDF
//! softmax weights of the specular loss are treated as constants.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::brdf::{backprop_diffuse, BrdfParams, DirSample, ParamsGrad, PointBrdf, Rgb};
use crate::config::SpecScope;
use crate::error::{Error, Result};
use crate::geom::{build_frame, fibonacci_local, Camera, Direction, DirectionSet, Scene, SurfaceHit, Vec3};
use crate::image::HdrImage;
use crate::lighting::{point_light_incident, EnvMap, EnvStencil, PointLight};
use crate::losses::{loss_pbr, smooth_pair_term, LossBreakdown, LossWeights};
use crate::material::{MaterialField, MaterialSample, UvStencil};
use crate::params::{ParamLayout, ParamVector};
use crate::render::primary_hits;

/// Rays per parallel work unit. Fixed so the reduction order never depends
/// on the worker count.
const CHUNK: usize = 64;

/// Adjacent pixel on the same primitive, used by the smoothness loss.
#[derive(Clone, Debug)]
pub struct Neighbor {
    pub hit: SurfaceHit,
    pub stencil: UvStencil,
    /// Reference luminance difference to this neighbor.
    pub image_grad: f64,
}

/// A training pixel whose primary ray hits geometry.
#[derive(Clone, Debug)]
pub struct HitRay {
    pub hit: SurfaceHit,
    pub w_o: Direction,
    pub material_id: usize,
    pub stencil: UvStencil,
    /// Direction and irradiance of every unblocked point light.
    pub point_incident: Vec<(Direction, Rgb)>,
    pub reference: Rgb,
    /// Right and lower neighbors.
    pub neighbors: Vec<Neighbor>,
}

/// A training pixel that sees the environment directly.
#[derive(Clone, Copy, Debug)]
pub struct BackgroundRay {
    pub dir: Direction,
    pub reference: Rgb,
}

/// Precomputed per-pixel data for fitting to a set of images.
#[derive(Clone, Debug)]
pub struct FitProblem {
    pub rays: Vec<HitRay>,
    pub background: Vec<BackgroundRay>,
    /// Shared local incident-direction set.
    pub local_dirs: Vec<Vec3>,
    /// Lighting used when the parameter vector has no env segment.
    pub fixed_env: Option<EnvMap>,
}

/// Indices into [`FitProblem::rays`] and [`FitProblem::background`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RayBatch {
    pub hits: Vec<usize>,
    pub background: Vec<usize>,
}

impl FitProblem {
    /// Builds the problem from training images and the poses they were rendered from.
    ///
    /// `materials` fixes the texture resolutions the UV stencils refer to.
    #[allow(clippy::too_many_arguments)]
    pub fn from_images(
        scene: &Scene,
        cameras: &[Camera],
        images: &[HdrImage],
        materials: &MaterialField,
        lights: &[PointLight],
        shadows: bool,
        n_dirs: usize,
        rotation: f64,
    ) -> Result<Self> {
        if cameras.len() != images.len() {
            return Err(Error::LengthMismatch { expected: cameras.len(), got: images.len() });
        }
        let mut rays = Vec::new();
        let mut background = Vec::new();
        for (cam, img) in cameras.iter().zip(images) {
            if img.width != cam.width || img.height != cam.height {
                return Err(Error::InvalidInput(format!(
                    "image is {}x{} but camera expects {}x{}",
                    img.width, img.height, cam.width, cam.height
                )));
            }
            let hits = primary_hits(scene, cam);
            let at = |x: usize, y: usize| &hits[y * cam.width + x];
            for y in 0..cam.height {
                for x in 0..cam.width {
                    let (dir, hit) = at(x, y);
                    let reference = img.get(x, y);
                    let Some(hit) = hit else {
                        background.push(BackgroundRay { dir: *dir, reference });
                        continue;
                    };
                    let material_id = scene.primitives[hit.primitive_id].material_id;
                    let grid = &materials.grids[material_id];
                    let mut neighbors = Vec::new();
                    for (nx, ny) in [(x + 1, y), (x, y + 1)] {
                        if nx >= cam.width || ny >= cam.height {
                            continue;
                        }
                        if let (_, Some(nh)) = at(nx, ny) {
                            if nh.primitive_id == hit.primitive_id {
                                neighbors.push(Neighbor {
                                    hit: *nh,
                                    stencil: grid.stencil(nh.uv),
                                    image_grad: reference.luminance() - img.get(nx, ny).luminance(),
                                });
                            }
                        }
                    }
                    let point_incident = lights
                        .iter()
                        .filter_map(|l| point_light_incident(l, hit.point, scene, shadows).ok())
                        .collect();
                    rays.push(HitRay {
                        hit: *hit,
                        w_o: -*dir,
                        material_id,
                        stencil: grid.stencil(hit.uv),
                        point_incident,
                        reference,
                        neighbors,
                    });
                }
            }
        }
        Ok(FitProblem { rays, background, local_dirs: fibonacci_local(n_dirs, rotation), fixed_env: None })
    }

    /// Uniform random subset of hit rays and of background rays (clamped to what exists).
    pub fn sample_batch(&self, rng: &mut impl Rng, n_hits: usize, n_background: usize) -> RayBatch {
        let mut hits = sample(rng, self.rays.len(), n_hits.min(self.rays.len())).into_vec();
        let mut background = sample(rng, self.background.len(), n_background.min(self.background.len())).into_vec();
        hits.sort_unstable();
        background.sort_unstable();
        RayBatch { hits, background }
    }

    pub fn full_batch(&self) -> RayBatch {
        RayBatch { hits: (0..self.rays.len()).collect(), background: (0..self.background.len()).collect() }
    }
}

/// How per-chunk gradient buffers are merged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Reduction {
    /// Chunk buffers summed in chunk order: bitwise identical for any worker count.
    #[default]
    Ordered,
    /// Work-stealing tree reduction.
    Unordered,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct EvalOptions<'a> {
    pub reduction: Reduction,
    /// Per-ray specular softmax mass to use instead of recomputing it.
    /// Finite-difference checks pass the base point's mass so that perturbed
    /// evaluations see the same detached weights.
    pub frozen_spec_mass: Option<&'a [f64]>,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: LossBreakdown,
    pub grad: Vec<f64>,
    /// Total specular softmax weight received by each batch ray.
    pub spec_mass: Vec<f64>,
}

struct RayOut {
    sample: MaterialSample,
    g: ParamsGrad,
    pbr: f64,
    cons: f64,
    /// Log-sum-exp of the ray's NDF logits.
    lse: f64,
    /// Sum of the ray's own softmax weights (1 up to roundoff).
    point_mass: f64,
    fd_mean: f64,
}

struct ChunkOut {
    rays: Vec<RayOut>,
    env_grad: Vec<f64>,
}

impl ChunkOut {
    fn merge(mut self, other: ChunkOut) -> ChunkOut {
        self.rays.extend(other.rays);
        for (a, b) in self.env_grad.iter_mut().zip(other.env_grad) {
            *a += b;
        }
        self
    }
}

struct Ctx<'a> {
    materials: &'a MaterialField,
    env: &'a EnvMap,
    local: &'a [Vec3],
    w: &'a LossWeights,
    n_hits: f64,
    want_env_grad: bool,
}

/// Forward and backward pass of the rendering, energy and specular-logit
/// terms for one ray. Environment gradients go to `env_grad`.
fn process_ray(ctx: &Ctx<'_>, ray: &HitRay, scratch: &mut Vec<(DirSample, EnvStencil, Rgb)>, env_grad: &mut [f64]) -> RayOut {
    let grid = &ctx.materials.grids[ray.material_id];
    let params = grid.params_at(&ray.stencil);
    let pb = PointBrdf::new(&params, ray.w_o, ray.hit.normal);
    let dirs = DirectionSet::from_local(ctx.local, &build_frame(ray.hit.normal));
    let qw = dirs.quad_weight;
    let inv_t = 1.0 / ctx.w.t_spec;

    scratch.clear();
    let mut rendered = Rgb::ZERO;
    let mut energy = Rgb::ZERO;
    let mut max_logit = f64::NEG_INFINITY;
    for &w_i in &dirs.dirs {
        let s = pb.eval(w_i);
        let st = ctx.env.stencil(w_i);
        let l = ctx.env.eval_stencil(&st);
        let c = s.cos_i.max(0.0);
        rendered += s.total() * l * c;
        energy += s.total() * c;
        max_logit = max_logit.max(s.ndf * inv_t);
        scratch.push((s, st, l));
    }
    rendered = rendered * qw;
    energy = energy * qw;
    for &(w_l, e) in &ray.point_incident {
        let s = pb.eval(w_l);
        if s.cos_i > 0.0 {
            rendered += s.total() * e * s.cos_i;
        }
    }

    let mut z = 0.0;
    for (s, _, _) in scratch.iter() {
        z += (s.ndf * inv_t - max_logit).exp();
    }
    let mut point_mass = 0.0;
    for (s, _, _) in scratch.iter() {
        point_mass += (s.ndf * inv_t - max_logit).exp() / z;
    }

    let pbr = loss_pbr(rendered, ray.reference);
    let cons = energy.map(|e| (e - 1.0).max(0.0)).mean();

    let mut g = ParamsGrad::default();
    let adj_r = (rendered - ray.reference) * (2.0 / 3.0 * ctx.w.lambda_pbr / ctx.n_hits);
    let adj_e = energy.map(|e| if e > 1.0 { ctx.w.lambda_cons / (3.0 * ctx.n_hits) } else { 0.0 });
    if adj_r != Rgb::ZERO || adj_e != Rgb::ZERO {
        for (s, st, l) in scratch.iter() {
            if !s.above_horizon() {
                continue;
            }
            let k = qw * s.cos_i;
            pb.backprop(s, (adj_r * *l + adj_e) * k, &mut g);
            if ctx.want_env_grad {
                ctx.env.backprop_stencil(st, adj_r * s.total() * k, env_grad);
            }
        }
        for &(w_l, e) in &ray.point_incident {
            let s = pb.eval(w_l);
            if s.cos_i > 0.0 {
                pb.backprop(&s, adj_r * e * s.cos_i, &mut g);
            }
        }
    }

    RayOut {
        sample: MaterialSample { material_id: ray.material_id, stencil: ray.stencil, params },
        g,
        pbr,
        cons,
        lse: max_logit + z.ln(),
        point_mass,
        fd_mean: pb.diffuse.mean(),
    }
}

/// Loss breakdown and its gradient with respect to every entry of `params`.
///
/// Material segments always receive gradients; the env segment does if the
/// layout has one, otherwise `problem.fixed_env` supplies the lighting.
pub fn eval_loss_and_grad(
    problem: &FitProblem,
    params: &ParamVector,
    batch: &RayBatch,
    w: &LossWeights,
    opts: EvalOptions<'_>,
) -> Result<Evaluation> {
    if batch.hits.is_empty() {
        return Err(Error::InvalidInput("loss batch has no surface rays".into()));
    }
    if let Some(m) = opts.frozen_spec_mass {
        if m.len() != batch.hits.len() {
            return Err(Error::LengthMismatch { expected: batch.hits.len(), got: m.len() });
        }
    }
    let layout = &params.layout;
    let materials = params.materials()?;
    let fitted_env = params.env()?;
    let env = match (&fitted_env, &problem.fixed_env) {
        (Some(e), _) | (None, Some(e)) => e,
        (None, None) => return Err(Error::InvalidInput("no env segment and no fixed env".into())),
    };
    let env_seg = layout.env_segment().cloned();
    let env_len = env_seg.as_ref().map_or(0, |s| s.len);
    let n_hits = batch.hits.len() as f64;
    let ctx = Ctx { materials: &materials, env, local: &problem.local_dirs, w, n_hits, want_env_grad: env_len > 0 };

    let run_chunk = |idx: &[usize]| {
        let mut scratch = Vec::with_capacity(problem.local_dirs.len());
        let mut env_grad = vec![0.0; env_len];
        let rays = idx.iter().map(|&i| process_ray(&ctx, &problem.rays[i], &mut scratch, &mut env_grad)).collect();
        ChunkOut { rays, env_grad }
    };
    let empty = || ChunkOut { rays: Vec::new(), env_grad: vec![0.0; env_len] };
    let merged = match opts.reduction {
        Reduction::Ordered => {
            let chunks: Vec<ChunkOut> = batch.hits.par_chunks(CHUNK).map(run_chunk).collect();
            chunks.into_iter().fold(empty(), ChunkOut::merge)
        }
        Reduction::Unordered => batch.hits.par_chunks(CHUNK).map(run_chunk).reduce(empty, ChunkOut::merge),
    };

    let mut grad = vec![0.0; layout.total_len()];
    if let Some(seg) = &env_seg {
        grad[seg.offset..seg.offset + seg.len].copy_from_slice(&merged.env_grad);
    }
    let outs = merged.rays;

    // Specular softmax mass per ray.
    let spec_mass: Vec<f64> = match (opts.frozen_spec_mass, w.spec_scope) {
        (Some(m), _) => m.to_vec(),
        (None, SpecScope::Point) => outs.iter().map(|o| o.point_mass).collect(),
        (None, SpecScope::Batch) => {
            let max = outs.iter().map(|o| o.lse).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = outs.iter().map(|o| (o.lse - max).exp()).sum();
            outs.iter().map(|o| (o.lse - max).exp() / z).collect()
        }
    };
    let n_dirs = problem.local_dirs.len() as f64;
    let spec_scale = match w.spec_scope {
        SpecScope::Point => 1.0 / n_hits,
        SpecScope::Batch => 1.0,
    };

    let mut pbr = 0.0;
    let mut cons = 0.0;
    let mut spec = 0.0;
    let mut ray_grads: Vec<ParamsGrad> = Vec::with_capacity(outs.len());
    for (o, &mass) in outs.iter().zip(&spec_mass) {
        pbr += o.pbr;
        cons += o.cons;
        spec += mass * o.fd_mean / n_dirs;
        let mut g = o.g;
        if w.lambda_spec != 0.0 {
            let adj = w.lambda_spec * spec_scale * mass / (3.0 * n_dirs);
            backprop_diffuse(&o.sample.params, Rgb::splat(adj), &mut g);
        }
        ray_grads.push(g);
    }
    pbr /= n_hits;
    cons /= n_hits;
    spec *= spec_scale;

    // Smoothness over each batch ray's right and lower neighbors.
    let n_pairs: usize = batch.hits.iter().map(|&i| problem.rays[i].neighbors.len()).sum();
    let mut smth = 0.0;
    for ((&i, o), g) in batch.hits.iter().zip(&outs).zip(ray_grads.iter_mut()) {
        let grid = &materials.grids[o.sample.material_id];
        let off = layout.material_offset(o.sample.material_id);
        for nb in &problem.rays[i].neighbors {
            let q: BrdfParams = grid.params_at(&nb.stencil);
            let (dr, dm) = (o.sample.params.roughness - q.roughness, o.sample.params.metallic - q.metallic);
            smth += smooth_pair_term(dr, dm, nb.image_grad);
            if w.lambda_smth != 0.0 {
                let k = w.lambda_smth / n_pairs as f64 * (-nb.image_grad.abs()).exp();
                let (sr, sm) = (k * sign(dr), k * sign(dm));
                g.roughness += sr;
                g.metallic += sm;
                let gq = ParamsGrad { albedo: Rgb::ZERO, metallic: -sm, roughness: -sr };
                grid.backprop(&nb.stencil, &q, &gq, &mut grad[off..off + grid.param_count()]);
            }
        }
    }
    if n_pairs > 0 {
        smth /= n_pairs as f64;
    }

    for (o, g) in outs.iter().zip(&ray_grads) {
        let grid = &materials.grids[o.sample.material_id];
        let off = layout.material_offset(o.sample.material_id);
        grid.backprop(&o.sample.stencil, &o.sample.params, g, &mut grad[off..off + grid.param_count()]);
    }

    // Background rays supervise the environment directly.
    let mut bg = 0.0;
    if !batch.background.is_empty() {
        let n_bg = batch.background.len() as f64;
        for &j in &batch.background {
            let ray = &problem.background[j];
            let st = env.stencil(ray.dir);
            let l = env.eval_stencil(&st);
            bg += loss_pbr(l, ray.reference);
            if let Some(seg) = &env_seg {
                let adj = (l - ray.reference) * (2.0 / 3.0 * w.lambda_pbr / n_bg);
                env.backprop_stencil(&st, adj, &mut grad[seg.offset..seg.offset + seg.len]);
            }
        }
        bg /= n_bg;
    }

    let total = w.lambda_pbr * (pbr + bg) + w.lambda_smth * smth + w.lambda_cons * cons + w.lambda_spec * spec;
    let loss = LossBreakdown { total, pbr, smth, cons, spec, bg };
    check_finite(layout, &loss, &grad)?;
    Ok(Evaluation { loss, grad, spec_mass })
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_finite(layout: &ParamLayout, loss: &LossBreakdown, grad: &[f64]) -> Result<()> {
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        let segment = layout.segment_of(i).map_or_else(|| "?".to_string(), |s| s.name.clone());
        return Err(Error::NonFinite { what: "gradient", segment });
    }
    if !loss.total.is_finite() {
        return Err(Error::NonFinite { what: "loss", segment: "(all)".to_string() });
    }
    Ok(())
}

/// One central-difference probe.
#[derive(Clone, Debug)]
pub struct FdProbe {
    pub index: usize,
    pub segment: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// `|a − n| / max(|a|, |n|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Central differences of `f` at `x` along each coordinate in `indices`,
/// compared against `analytic`. Returns the per-probe results.
pub fn finite_diff_probes(
    f: impl Fn(&[f64]) -> Result<f64>,
    x: &[f64],
    analytic: &[f64],
    eps: f64,
    indices: &[usize],
) -> Result<Vec<(usize, f64, f64, f64)>> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidInput(format!("finite-difference step {eps} outside [1e-7, 1e-3]")));
    }
    let mut out = Vec::with_capacity(indices.len());
    let mut probe = x.to_vec();
    for &i in indices {
        probe[i] = x[i] + eps;
        let hi = f(&probe)?;
        probe[i] = x[i] - eps;
        let lo = f(&probe)?;
        probe[i] = x[i];
        let numeric = (hi - lo) / (2.0 * eps);
        out.push((i, analytic[i], numeric, relative_error(analytic[i], numeric)));
    }
    Ok(out)
}

/// Compares [`eval_loss_and_grad`] against central differences on
/// `n_probes` coordinates. The first probes visit every segment once; the
/// rest are uniform. Specular softmax weights are held at their base values.
#[allow(clippy::too_many_arguments)]
pub fn finite_diff_check(
    problem: &FitProblem,
    params: &ParamVector,
    batch: &RayBatch,
    w: &LossWeights,
    eps: f64,
    n_probes: usize,
    seed: u64,
) -> Result<Vec<FdProbe>> {
    if n_probes == 0 {
        return Err(Error::InvalidInput("need at least one probe".into()));
    }
    let base = eval_loss_and_grad(problem, params, batch, w, EvalOptions::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = &params.layout;
    let mut indices: Vec<usize> = layout
        .segments
        .iter()
        .filter(|s| s.len > 0)
        .map(|s| s.offset + rng.gen_range(0..s.len))
        .take(n_probes)
        .collect();
    while indices.len() < n_probes {
        indices.push(rng.gen_range(0..layout.total_len()));
    }
    let opts = EvalOptions { reduction: Reduction::Ordered, frozen_spec_mass: Some(&base.spec_mass) };
    let f = |x: &[f64]| {
        let p = ParamVector { values: x.to_vec(), ..params.clone() };
        eval_loss_and_grad(problem, &p, batch, w, opts).map(|e| e.loss.total)
    };
    let raw = finite_diff_probes(f, &params.values, &base.grad, eps, &indices)?;
    Ok(raw
        .into_iter()
        .map(|(index, analytic, numeric, rel_err)| FdProbe {
            index,
            segment: layout.segment_of(index).map_or_else(String::new, |s| s.name.clone()),
            analytic,
            numeric,
            rel_err,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{Primitive, Shape};
    use crate::losses::{loss_smooth, total_material_loss, ShadingSample, SmoothPair};
    use crate::material::MaterialGrid;
    use crate::render::{shading_sample, Lights};

    fn sphere_scene() -> Scene {
        Scene { primitives: vec![Primitive { shape: Shape::Sphere { center: Vec3::ZERO, radius: 1.0 }, material_id: 0 }] }
    }

    fn random_field(rng: &mut ChaCha8Rng, h: usize, w: usize) -> MaterialField {
        let mut g = MaterialGrid::neutral(h, w);
        for v in g.albedo_logit.iter_mut().flatten() {
            *v = rng.gen_range(-2.0..2.0);
        }
        for v in g.metallic_logit.iter_mut().chain(g.roughness_logit.iter_mut()) {
            *v = rng.gen_range(-2.0..2.0);
        }
        MaterialField { grids: vec![g] }
    }

    fn random_env(rng: &mut ChaCha8Rng, h: usize, w: usize) -> EnvMap {
        let logs = (0..h * w).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
        EnvMap::from_log_radiance(h, w, logs, 1.0).unwrap()
    }

    /// Small random problem: 3×3 image of a sphere with random references.
    fn small_problem(rng: &mut ChaCha8Rng, field: &MaterialField, n_dirs: usize) -> FitProblem {
        let cam = Camera {
            position: Vec3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), 4.0),
            look_at: Vec3::ZERO,
            up: Vec3::Y,
            vertical_fov: 0.62,
            width: 3,
            height: 3,
        };
        let pixels = (0..9).map(|_| Rgb::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0))).collect();
        let img = HdrImage::from_pixels(3, 3, pixels).unwrap();
        let light = PointLight { position: Vec3::new(1.0, 2.0, 3.0), intensity: Rgb::splat(2.0) };
        FitProblem::from_images(&sphere_scene(), &[cam], &[img], field, &[light], false, n_dirs, 0.3).unwrap()
    }

    #[test]
    fn loss_matches_reference_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let field = random_field(&mut rng, 2, 2);
        let env = random_env(&mut rng, 4, 4);
        let problem = small_problem(&mut rng, &field, 16);
        let params = ParamVector::from_model(&field, Some(&env));
        let batch = RayBatch { hits: (0..problem.rays.len()).collect(), background: vec![] };
        assert!(batch.hits.len() >= 3);
        let scene = sphere_scene();
        let light = PointLight { position: Vec3::new(1.0, 2.0, 3.0), intensity: Rgb::splat(2.0) };
        for scope in [SpecScope::Point, SpecScope::Batch] {
            let w = LossWeights { spec_scope: scope, lambda_smth: 0.3, ..LossWeights::DEFAULT };
            let ev = eval_loss_and_grad(&problem, &params, &batch, &w, EvalOptions::default()).unwrap();
            let samples: Vec<ShadingSample> = problem
                .rays
                .iter()
                .map(|r| {
                    let p = field.sample(r.material_id, r.hit.uv).params;
                    let dirs = DirectionSet::from_local(&problem.local_dirs, &build_frame(r.hit.normal));
                    let lights = Lights { env: &env, points: std::slice::from_ref(&light), occluders: Some(&scene) };
                    shading_sample(&r.hit, r.w_o, &p, lights, &dirs, r.reference)
                })
                .collect();
            let pairs: Vec<SmoothPair> = problem
                .rays
                .iter()
                .flat_map(|r| r.neighbors.iter().map(|nb| SmoothPair { a: r.hit, b: nb.hit, material_id: 0, image_grad: nb.image_grad }))
                .collect();
            assert!(!pairs.is_empty());
            let smooth = loss_smooth(&field, &pairs);
            assert!((ev.loss.smth - smooth).abs() < 1e-14);
            let reference = total_material_loss(&samples, smooth, &w);
            let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-300);
            assert!(rel(ev.loss.pbr, reference.pbr) < 1e-12, "{} {}", ev.loss.pbr, reference.pbr);
            assert!(rel(ev.loss.cons + 1e-300, reference.cons + 1e-300) < 1e-12);
            assert!(rel(ev.loss.spec, reference.spec) < 1e-12);
            assert!(rel(ev.loss.total, reference.total) < 1e-12);
        }
    }

    fn term_weights() -> Vec<(&'static str, LossWeights)> {
        let z = LossWeights::zero();
        vec![
            ("pbr", LossWeights { lambda_pbr: 1.0, ..z }),
            ("smth", LossWeights { lambda_smth: 1.0, ..z }),
            ("cons", LossWeights { lambda_cons: 1.0, ..z }),
            ("spec-point", LossWeights { lambda_spec: 1.0, ..z }),
            ("spec-batch", LossWeights { lambda_spec: 1.0, spec_scope: SpecScope::Batch, ..z }),
            ("all", LossWeights { lambda_smth: 0.1, lambda_cons: 0.5, ..LossWeights::DEFAULT }),
        ]
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut worst: f64 = 0.0;
        let mut segments = std::collections::BTreeSet::new();
        for trial in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
            let field = random_field(&mut rng, 2, 2);
            let env = random_env(&mut rng, 4, 4);
            let problem = small_problem(&mut rng, &field, 16);
            let params = ParamVector::from_model(&field, Some(&env));
            let batch = problem.sample_batch(&mut rng, 3, 2);
            let (name, w) = term_weights()[trial as usize % 6];
            let probes = finite_diff_check(&problem, &params, &batch, &w, 1e-6, 8, trial).unwrap();
            for p in probes {
                assert!(p.rel_err < 1e-4, "{name} trial {trial}: {p:?}");
                worst = worst.max(p.rel_err);
                segments.insert(p.segment);
            }
        }
        assert_eq!(segments.len(), 4, "{segments:?}");
        eprintln!("max relative error {worst:e}");
    }

    #[test]
    fn cons_hinge_gradient_is_exercised() {
        // A near-white dielectric: the diffuse lobe alone is close to 1, and the
        // dielectric specular lobe pushes the quadrature sum over it.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut field = random_field(&mut rng, 2, 2);
        field.grids[0].metallic_logit = vec![-6.0; 4];
        field.grids[0].albedo_logit = vec![[6.0; 3]; 4];
        field.grids[0].roughness_logit = vec![0.0; 4];
        let env = random_env(&mut rng, 4, 4);
        let problem = small_problem(&mut rng, &field, 16);
        let params = ParamVector::from_model(&field, Some(&env));
        let batch = problem.full_batch();
        let w = LossWeights { lambda_cons: 1.0, ..LossWeights::zero() };
        let ev = eval_loss_and_grad(&problem, &params, &batch, &w, EvalOptions::default()).unwrap();
        assert!(ev.loss.cons > 0.0);
        let probes = finite_diff_check(&problem, &params, &batch, &w, 1e-6, 20, 1).unwrap();
        assert!(probes.iter().all(|p| p.rel_err < 1e-4), "{probes:?}");
        assert!(probes.iter().any(|p| p.analytic.abs() > 1e-6));
    }

    #[test]
    fn detach_rule_zeroes_roughness_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let field = random_field(&mut rng, 3, 3);
        let env = random_env(&mut rng, 4, 4);
        let problem = small_problem(&mut rng, &field, 32);
        let params = ParamVector::from_model(&field, Some(&env));
        for scope in [SpecScope::Point, SpecScope::Batch] {
            let w = LossWeights { lambda_spec: 0.5, spec_scope: scope, ..LossWeights::zero() };
            let ev = eval_loss_and_grad(&problem, &params, &problem.full_batch(), &w, EvalOptions::default()).unwrap();
            let seg = params.layout.segment("material.0.roughness").unwrap();
            assert!(ev.grad[seg.offset..seg.offset + seg.len].iter().all(|&g| g == 0.0));
            let env_seg = params.layout.env_segment().unwrap();
            assert!(ev.grad[env_seg.offset..].iter().all(|&g| g == 0.0));
            let albedo = params.layout.segment("material.0.albedo").unwrap();
            assert!(ev.grad[albedo.offset..albedo.offset + albedo.len].iter().any(|&g| g != 0.0));
        }
    }

    #[test]
    fn frozen_env_has_no_segment() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let field = random_field(&mut rng, 2, 2);
        let env = random_env(&mut rng, 4, 4);
        let mut problem = small_problem(&mut rng, &field, 16);
        let params = ParamVector::from_model(&field, None);
        assert!(eval_loss_and_grad(&problem, &params, &problem.full_batch(), &LossWeights::DEFAULT, EvalOptions::default()).is_err());
        problem.fixed_env = Some(env.clone());
        let frozen = eval_loss_and_grad(&problem, &params, &problem.full_batch(), &LossWeights::DEFAULT, EvalOptions::default()).unwrap();
        assert_eq!(frozen.grad.len(), 20);
        let full = ParamVector::from_model(&field, Some(&env));
        let both = eval_loss_and_grad(&problem, &full, &problem.full_batch(), &LossWeights::DEFAULT, EvalOptions::default()).unwrap();
        assert_eq!(frozen.loss, both.loss);
        assert_eq!(frozen.grad[..], both.grad[..20]);
    }

    #[test]
    fn single_lambertian_pixel_closed_form() {
        // Constant unit env, diffuse-dominated pixel, L_pbr only:
        // ∂/∂ℓ_c of (R_c − ref_c)²/3 is (2/3)(R_c − ref_c)·∂R_c/∂b_c·b_c(1 − b_c).
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let field = MaterialField { grids: vec![MaterialGrid::constant(2, 2, &BrdfParams { albedo: Rgb::new(0.3, 0.5, 0.7), metallic: 0.0001, roughness: 0.9 })] };
        let env = EnvMap::constant(4, 4, [0.0; 3], 1.0).unwrap();
        let mut problem = small_problem(&mut rng, &field, 64);
        problem.rays.truncate(1);
        problem.rays[0].point_incident.clear();
        problem.rays[0].neighbors.clear();
        let params = ParamVector::from_model(&field, Some(&env));
        let w = LossWeights { lambda_pbr: 1.0, ..LossWeights::zero() };
        let batch = RayBatch { hits: vec![0], background: vec![] };
        let ev = eval_loss_and_grad(&problem, &params, &batch, &w, EvalOptions::default()).unwrap();
        let ray = &problem.rays[0];
        let p = field.sample(0, ray.hit.uv).params;
        let dirs = DirectionSet::from_local(&problem.local_dirs, &build_frame(ray.hit.normal));
        // ∂R/∂b = (2π/N) Σ (1 − m)/π cos + Fresnel part m(1 − schlick)·D G/denom cos.
        let pb = PointBrdf::new(&p, ray.w_o, ray.hit.normal);
        let mut rendered = Rgb::ZERO;
        let mut dr_db = 0.0;
        for &d in &dirs.dirs {
            let s = pb.eval(d);
            rendered += s.total() * s.cos_i;
            let h = crate::geom::halfway(ray.w_o, d).unwrap();
            let schlick = (1.0 - ray.w_o.dot(h)).powi(5);
            let spec_unit = crate::brdf::eval_specular(ray.w_o, d, ray.hit.normal, &BrdfParams { albedo: Rgb::ONE, metallic: 1.0, roughness: p.roughness });
            dr_db += ((1.0 - p.metallic) / std::f64::consts::PI + p.metallic * (1.0 - schlick) * spec_unit.r) * s.cos_i;
        }
        rendered = rendered * dirs.quad_weight;
        dr_db *= dirs.quad_weight;
        let off = params.layout.segment("material.0.albedo").unwrap().offset;
        let analytic: f64 = (0..4).map(|t| ev.grad[off + 3 * t + 1]).sum();
        let b = p.albedo.g;
        let expect = 2.0 / 3.0 * (rendered.g - ray.reference.g) * dr_db * b * (1.0 - b);
        assert!(((analytic - expect) / expect).abs() < 1e-10, "{analytic} {expect}");
    }

    #[test]
    fn ordered_reduction_ignores_worker_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let field = random_field(&mut rng, 2, 2);
        let env = random_env(&mut rng, 4, 4);
        let cams: Vec<Camera> = (0..3)
            .map(|k| Camera { position: Vec3::new(k as f64, 1.0, 4.0), look_at: Vec3::ZERO, up: Vec3::Y, vertical_fov: 0.7, width: 12, height: 12 })
            .collect();
        let imgs: Vec<HdrImage> = (0..3).map(|_| HdrImage::from_pixels(12, 12, (0..144).map(|_| Rgb::splat(rng.gen())).collect()).unwrap()).collect();
        let problem = FitProblem::from_images(&sphere_scene(), &cams, &imgs, &field, &[], false, 16, 0.0).unwrap();
        assert!(problem.rays.len() > 2 * CHUNK);
        let params = ParamVector::from_model(&field, Some(&env));
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| eval_loss_and_grad(&problem, &params, &problem.full_batch(), &LossWeights::DEFAULT, EvalOptions::default()).unwrap())
        };
        let (a, b) = (run(1), run(3));
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.grad, b.grad);
    }

    #[test]
    fn fd_harness_contracts() {
        let f = |x: &[f64]| Ok(x.iter().map(|v| v * v).sum::<f64>());
        let x = [0.3, -1.7, 2.5, 0.05];
        let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        for (_, _, _, rel) in finite_diff_probes(f, &x, &g, 1e-3, &[0, 1, 2, 3]).unwrap() {
            assert!(rel < 1e-9);
        }
        let flat = |x: &[f64]| Ok(x[0].max(0.0));
        let probe = finite_diff_probes(flat, &[-1.0], &[0.0], 1e-4, &[0]).unwrap();
        assert_eq!(probe[0].3, 0.0);
        assert!(finite_diff_probes(f, &x, &g, 1e-2, &[0]).is_err());
    }

    #[test]
    fn roughness_clamp_region_is_flat() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut field = random_field(&mut rng, 2, 2);
        field.grids[0].roughness_logit = vec![-6.0; 4];
        let env = random_env(&mut rng, 4, 4);
        let problem = small_problem(&mut rng, &field, 16);
        let params = ParamVector::from_model(&field, Some(&env));
        let w = LossWeights { lambda_pbr: 1.0, ..LossWeights::zero() };
        let seg = params.layout.segment("material.0.roughness").unwrap().clone();
        let ev = eval_loss_and_grad(&problem, &params, &problem.full_batch(), &w, EvalOptions::default()).unwrap();
        assert!(ev.grad[seg.offset..seg.offset + seg.len].iter().all(|&g| g == 0.0));
        let f = |x: &[f64]| {
            let p = ParamVector { values: x.to_vec(), ..params.clone() };
            eval_loss_and_grad(&problem, &p, &problem.full_batch(), &w, EvalOptions::default()).map(|e| e.loss.total)
        };
        let probes = finite_diff_probes(f, &params.values, &ev.grad, 1e-4, &[seg.offset]).unwrap();
        assert_eq!(probes[0].2, 0.0);
        assert_eq!(probes[0].3, 0.0);
    }
}
