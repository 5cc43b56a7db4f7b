//! Discretized rendering equation over a fixed incident-direction set, and
//! whole-image rendering.

use rayon::prelude::*;

use crate::brdf::{BrdfParams, PointBrdf, Rgb};
use crate::geom::{build_frame, camera_rays, fibonacci_local, intersect, Camera, Direction, DirectionSet, Scene, SurfaceHit, Vec3};
use crate::image::HdrImage;
use crate::lighting::{point_light_incident, EnvMap, PointLight};
use crate::losses::{DirRecord, ShadingSample};
use crate::material::MaterialField;

/// Everything that lights a surface point.
#[derive(Clone, Copy)]
pub struct Lights<'a> {
    pub env: &'a EnvMap,
    pub points: &'a [PointLight],
    /// Scene used for point-light shadow rays; `None` disables shadows.
    pub occluders: Option<&'a Scene>,
}

/// Outgoing radiance at `hit` toward `w_o`:
/// `(2π/N) Σ f_r L_i cos_i` over `dirs`, plus the point-light terms.
pub fn shade(hit: &SurfaceHit, w_o: Direction, p: &BrdfParams, lights: Lights<'_>, dirs: &DirectionSet) -> Rgb {
    let pb = PointBrdf::new(p, w_o, hit.normal);
    let mut acc = Rgb::ZERO;
    for &w_i in &dirs.dirs {
        let s = pb.eval(w_i);
        acc += s.total() * lights.env.radiance(w_i) * s.cos_i.max(0.0);
    }
    acc = acc * dirs.quad_weight;
    acc + point_light_term(&pb, hit.point, lights)
}

fn point_light_term(pb: &PointBrdf, x: Vec3, lights: Lights<'_>) -> Rgb {
    let mut acc = Rgb::ZERO;
    for light in lights.points {
        let Ok((w_l, e)) = point_light_incident(light, x, lights.occluders.unwrap_or(&EMPTY_SCENE), lights.occluders.is_some()) else {
            continue;
        };
        let s = pb.eval(w_l);
        if s.cos_i > 0.0 {
            acc += s.total() * e * s.cos_i;
        }
    }
    acc
}

static EMPTY_SCENE: Scene = Scene { primitives: Vec::new() };

/// Per-direction records and the rendered value at one shading point.
pub fn shading_sample(
    hit: &SurfaceHit,
    w_o: Direction,
    p: &BrdfParams,
    lights: Lights<'_>,
    dirs: &DirectionSet,
    reference: Rgb,
) -> ShadingSample {
    let pb = PointBrdf::new(p, w_o, hit.normal);
    let records = dirs
        .dirs
        .iter()
        .map(|&w_i| {
            let s = pb.eval(w_i);
            DirRecord { cos_i: s.cos_i, f_r: s.total(), f_d: pb.diffuse, ndf: s.ndf }
        })
        .collect();
    ShadingSample {
        records,
        quad_weight: dirs.quad_weight,
        rendered: shade(hit, w_o, p, lights, dirs),
        reference,
    }
}

/// Per-pixel primary hit for a camera (row-major).
pub fn primary_hits(scene: &Scene, camera: &Camera) -> Vec<(Direction, Option<SurfaceHit>)> {
    camera_rays(camera).into_iter().map(|r| (r.dir, intersect(scene, &r))).collect()
}

pub struct RenderSetup<'a> {
    pub scene: &'a Scene,
    pub materials: &'a MaterialField,
    pub lights: Lights<'a>,
    pub n_samples: usize,
    pub rotation: f64,
}

/// Renders one image; misses show the environment. Output is independent
/// of the worker count.
pub fn render(setup: &RenderSetup<'_>, camera: &Camera) -> HdrImage {
    let local = fibonacci_local(setup.n_samples, setup.rotation);
    let rays = camera_rays(camera);
    let pixels: Vec<Rgb> = rays
        .par_iter()
        .map(|ray| match intersect(setup.scene, ray) {
            None => setup.lights.env.radiance(ray.dir),
            Some(hit) => {
                let mat_id = setup.scene.primitives[hit.primitive_id].material_id;
                let p = setup.materials.sample(mat_id, hit.uv).params;
                let dirs = DirectionSet::from_local(&local, &build_frame(hit.normal));
                shade(&hit, -ray.dir, &p, setup.lights, &dirs)
            }
        })
        .collect();
    HdrImage { width: camera.width, height: camera.height, pixels }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{fibonacci_hemisphere, Primitive, Shape};
    use crate::material::MaterialGrid;

    fn lambert(b: f64) -> BrdfParams {
        // Large roughness keeps the dielectric lobe small and smooth.
        BrdfParams { albedo: Rgb::splat(b), metallic: 0.0, roughness: 1.0 }
    }

    fn up_hit() -> SurfaceHit {
        SurfaceHit { point: Vec3::ZERO, normal: Vec3::Y.normalized().unwrap(), uv: (0.5, 0.5), primitive_id: 0, t_hit: 1.0 }
    }

    #[test]
    fn lambertian_under_unit_env() {
        let env = EnvMap::constant(8, 16, [0.0; 3], 1.0).unwrap();
        let hit = up_hit();
        let dirs = fibonacci_hemisphere(256, &build_frame(hit.normal), 0.0);
        let p = BrdfParams { albedo: Rgb::splat(0.6), metallic: 0.0, roughness: 1.0 };
        let lights = Lights { env: &env, points: &[], occluders: None };
        let w_o = Vec3::new(0.2, 1.0, 0.1).normalized().unwrap();
        let diffuse_only = {
            let mut acc = 0.0;
            for d in &dirs.dirs {
                acc += 0.6 / std::f64::consts::PI * d.dot(hit.normal);
            }
            acc * dirs.quad_weight
        };
        assert!((diffuse_only - 0.6).abs() < 0.006);
        let lo = shade(&hit, w_o, &p, lights, &dirs);
        // Diffuse part is b; the dielectric lobe adds a few percent.
        assert!(lo.r > 0.6 && lo.r < 0.7, "{lo:?}");
    }

    #[test]
    fn point_light_overhead() {
        let env = EnvMap::constant(4, 8, [-800.0; 3], 1.0).unwrap();
        let hit = up_hit();
        let light = PointLight { position: Vec3::new(0.0, 1.0, 0.0), intensity: Rgb::splat(std::f64::consts::PI) };
        let dirs = fibonacci_hemisphere(16, &build_frame(hit.normal), 0.0);
        let lights = Lights { env: &env, points: std::slice::from_ref(&light), occluders: None };
        let p = BrdfParams { albedo: Rgb::splat(0.6), metallic: 0.0, roughness: 1.0 };
        let w_o = Vec3::new(0.6, 0.8, 0.0).normalized().unwrap();
        let lo = shade(&hit, w_o, &p, lights, &dirs);
        let spec = crate::brdf::eval_specular(w_o, hit.normal, hit.normal, &p).r * std::f64::consts::PI;
        assert!((lo.r - (0.6 + spec)).abs() < 1e-12);
    }

    #[test]
    fn black_dielectric_only_specular() {
        let env = EnvMap::constant(4, 8, [-800.0; 3], 1.0).unwrap();
        let hit = up_hit();
        let dirs = fibonacci_hemisphere(64, &build_frame(hit.normal), 0.0);
        let lights = Lights { env: &env, points: &[], occluders: None };
        let lo = shade(&hit, hit.normal, &lambert(0.0), lights, &dirs);
        assert!(lo.min_channel() >= 0.0 && lo.r < 1e-100);
    }

    #[test]
    fn linear_in_env_scale() {
        let logs: Vec<[f64; 3]> = (0..32).map(|i| [(i as f64 * 0.3).sin(), 0.2, -0.4]).collect();
        let env = EnvMap::from_log_radiance(4, 8, logs.clone(), 1.0).unwrap();
        let s = 3.7f64;
        let scaled = EnvMap::from_log_radiance(4, 8, logs, s).unwrap();
        let hit = up_hit();
        let dirs = fibonacci_hemisphere(128, &build_frame(hit.normal), 0.4);
        let p = BrdfParams { albedo: Rgb::new(0.3, 0.5, 0.7), metallic: 0.4, roughness: 0.35 };
        let w_o = Vec3::new(-0.3, 1.0, 0.2).normalized().unwrap();
        let a = shade(&hit, w_o, &p, Lights { env: &env, points: &[], occluders: None }, &dirs);
        let b = shade(&hit, w_o, &p, Lights { env: &scaled, points: &[], occluders: None }, &dirs);
        for (x, y) in a.to_array().into_iter().zip(b.to_array()) {
            assert!((x * s - y).abs() < 1e-12 * y.abs().max(1.0));
        }
    }

    fn sphere_scene() -> Scene {
        Scene { primitives: vec![Primitive { shape: Shape::Sphere { center: Vec3::ZERO, radius: 1.0 }, material_id: 0 }] }
    }

    #[test]
    fn render_miss_path_and_determinism() {
        let scene = sphere_scene();
        let logs: Vec<[f64; 3]> = (0..32).map(|i| [i as f64 * 0.05, 0.1, 0.0]).collect();
        let env = EnvMap::from_log_radiance(4, 8, logs, 1.0).unwrap();
        let materials = MaterialField { grids: vec![MaterialGrid::neutral(4, 4)] };
        let setup = RenderSetup { scene: &scene, materials: &materials, lights: Lights { env: &env, points: &[], occluders: None }, n_samples: 32, rotation: 0.0 };
        let away = Camera { position: Vec3::new(0.0, 0.0, 4.0), look_at: Vec3::new(0.0, 0.0, 8.0), up: Vec3::Y, vertical_fov: 0.8, width: 5, height: 4 };
        let img = render(&setup, &away);
        for (px, ray) in img.pixels.iter().zip(camera_rays(&away)) {
            assert_eq!(*px, env.radiance(ray.dir));
        }
        let toward = Camera { look_at: Vec3::ZERO, ..away };
        assert_eq!(render(&setup, &toward), render(&setup, &toward));
    }

    #[test]
    fn sphere_pixel_under_constant_env() {
        let scene = sphere_scene();
        let env = EnvMap::constant(8, 16, [0.0; 3], 1.0).unwrap();
        let materials = MaterialField { grids: vec![MaterialGrid::constant(4, 4, &BrdfParams { albedo: Rgb::splat(0.6), metallic: 1e-9, roughness: 0.999 })] };
        let setup = RenderSetup { scene: &scene, materials: &materials, lights: Lights { env: &env, points: &[], occluders: None }, n_samples: 256, rotation: 0.0 };
        let cam = Camera { position: Vec3::new(0.0, 0.0, 4.0), look_at: Vec3::ZERO, up: Vec3::Y, vertical_fov: 0.5, width: 1, height: 1 };
        let img = render(&setup, &cam);
        let spec = {
            let hit = intersect(&scene, &camera_rays(&cam)[0]).unwrap();
            let p = materials.sample(0, hit.uv).params;
            let pb = PointBrdf::new(&p, -camera_rays(&cam)[0].dir, hit.normal);
            let dirs = DirectionSet::from_local(&fibonacci_local(256, 0.0), &build_frame(hit.normal));
            dirs.dirs.iter().map(|&d| { let s = pb.eval(d); s.specular.r * s.cos_i }).sum::<f64>() * dirs.quad_weight
        };
        assert!(((img.pixels[0].r - spec) - 0.6).abs() < 0.006, "{:?}", img.pixels[0]);
    }
}
