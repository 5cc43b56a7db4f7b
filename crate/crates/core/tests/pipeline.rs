use pbrfit_core::ablation::{ablation_weights, run_ablation};
use pbrfit_core::brdf::{BrdfParams, Rgb};
use pbrfit_core::config::ExperimentConfig;
use pbrfit_core::dataset::{generate_ground_truth, read_bundle, write_bundle};
use pbrfit_core::fit::{build_problem, fit, initial_params, FitOptions};
use pbrfit_core::geom::{Camera, Primitive, Scene, Shape, Vec3};
use pbrfit_core::grad::{eval_loss_and_grad, EvalOptions, Reduction};
use pbrfit_core::lighting::EnvMap;
use pbrfit_core::losses::LossWeights;
use pbrfit_core::material::{MaterialField, MaterialGrid};
use pbrfit_core::params::ParamVector;
use pbrfit_core::render::{render, Lights, RenderSetup};

fn tiny_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.cameras.width = 16;
    c.cameras.height = 16;
    c.cameras.n_train = 3;
    c.cameras.n_val = 1;
    c.sampling.n_gt = 64;
    c.sampling.n_fit = 32;
    c.lighting.gt_env_resolution = [16, 32];
    c.lighting.fit_env_resolution = [4, 8];
    c.scene.materials[0].resolution = [4, 8];
    c.scene.materials[1].resolution = [4, 4];
    c.optimizer.iterations_light = 10;
    c.optimizer.iterations_joint = 60;
    c.optimizer.batch_size = 128;
    c.optimizer.bg_batch_size = 32;
    c.optimizer.log_every = 1;
    c.optimizer.lr = 0.02;
    c
}

fn options() -> FitOptions {
    FitOptions { reduction: Reduction::Ordered, verbose: false }
}

#[test]
fn bundle_round_trip() {
    let gt = generate_ground_truth(&tiny_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_bundle(&gt, dir.path()).unwrap();
    let back = read_bundle(dir.path()).unwrap();
    assert_eq!(back.config, gt.config);
    assert_eq!(back.materials, gt.materials);
    assert_eq!((back.train.len(), back.val.len()), (3, 1));
    // PFM stores f32.
    let quantize = |c: Rgb| c.to_array().map(|v| v as f32);
    for (a, b) in back.train.iter().chain(&back.val).zip(gt.train.iter().chain(&gt.val)) {
        assert!(a.pixels.iter().zip(&b.pixels).all(|(x, y)| quantize(*x) == quantize(*y)));
    }
    for i in 0..gt.env.texel_count() {
        assert_eq!(quantize(back.env.texel(i)), quantize(gt.env.texel(i)));
    }
}

#[test]
fn render_is_independent_of_thread_count() {
    let gt = generate_ground_truth(&tiny_config()).unwrap();
    let c = &gt.config;
    let setup = RenderSetup {
        scene: &gt.scene,
        materials: &gt.materials,
        lights: Lights { env: &gt.env, points: &gt.point_lights, occluders: Some(&gt.scene) },
        n_samples: 48,
        rotation: 0.4,
    };
    let cam = &gt.cameras[1];
    let pool = |n| rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
    let one = pool(1).install(|| render(&setup, cam));
    let four = pool(4).install(|| render(&setup, cam));
    assert_eq!(one, four);
    assert_eq!(render(&setup, cam), one);
    assert_eq!(c.cameras.width * c.cameras.height, one.pixels.len());
}

#[test]
fn one_pixel_lambertian_sphere() {
    let scene = Scene { primitives: vec![Primitive { shape: Shape::Sphere { center: Vec3::ZERO, radius: 1.0 }, material_id: 0 }] };
    let env = EnvMap::constant(8, 16, [0.0; 3], 1.0).unwrap();
    let cam = Camera { position: Vec3::new(0.0, 0.0, 3.0), look_at: Vec3::ZERO, up: Vec3::Y, vertical_fov: 0.2, width: 1, height: 1 };
    let pixel = |b: f64| {
        let p = BrdfParams { albedo: Rgb::splat(b), metallic: 0.0, roughness: 1.0 };
        let field = MaterialField { grids: vec![MaterialGrid::constant(2, 2, &p)] };
        let setup = RenderSetup {
            scene: &scene,
            materials: &field,
            lights: Lights { env: &env, points: &[], occluders: None },
            n_samples: 256,
            rotation: 0.0,
        };
        render(&setup, &cam).get(0, 0)
    };
    // The albedo-independent dielectric lobe cancels in the difference.
    let base = pixel(0.0);
    for b in [0.2, 0.7] {
        let albedo_part = pixel(b) - base;
        for c in albedo_part.to_array() {
            assert!((c - b).abs() < 0.01 * b, "{c} vs {b}");
        }
    }
}

#[test]
fn fit_decreases_photometric_loss_and_freezes_materials_first() {
    let mut cfg = tiny_config();
    cfg.loss.lambda_cons = 0.0;
    cfg.loss.lambda_spec = 0.0;
    let gt = generate_ground_truth(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let res = fit(&gt, &LossWeights::from(&cfg.loss), Some(dir.path()), options()).unwrap();
    assert_eq!(res.log.len(), 70);

    // Compare on one fixed batch, since the logged losses are per-batch.
    let problem = build_problem(&gt).unwrap();
    let start = initial_params(&cfg, &problem).unwrap();
    let all = problem.full_batch();
    let pbr_only = LossWeights { lambda_pbr: 1.0, ..LossWeights::zero() };
    let eval = |p: &ParamVector| eval_loss_and_grad(&problem, p, &all, &pbr_only, EvalOptions::default()).unwrap().loss.total;
    let light = ParamVector::load(&dir.path().join("params_light.bin")).unwrap();
    let end = ParamVector::load(&dir.path().join("params.bin")).unwrap();
    assert_eq!(end, res.params);
    let (l0, l1, l2) = (eval(&start), eval(&light), eval(&end));
    assert!(l1 < l0 && l2 < l1, "{l0} {l1} {l2}");

    let env_offset = start.layout.env_segment().unwrap().offset;
    assert_eq!(light.values[..env_offset], start.values[..env_offset]);
    assert_ne!(end.values[..env_offset], start.values[..env_offset]);
}

#[test]
fn ablation_is_reproducible() {
    let mut cfg = tiny_config();
    cfg.optimizer.iterations_joint = 20;
    let gt = generate_ground_truth(&cfg).unwrap();
    let base = LossWeights::from(&cfg.loss);
    let a = run_ablation(&gt, &base, None, options()).unwrap();
    let b = run_ablation(&gt, &base, None, options()).unwrap();
    assert_eq!(a, b);
    let ids: Vec<usize> = a.rows.iter().map(|r| r.id).collect();
    assert_eq!(ids, [1, 2, 3, 4]);
    for ((id, w), row) in ablation_weights(&base, cfg.loss.lambda_cons, cfg.loss.lambda_spec).iter().zip(&a.rows) {
        assert_eq!(*id, row.id);
        assert_eq!((w.lambda_cons, w.lambda_spec), (row.lambda_cons, row.lambda_spec));
        assert!(row.rgb_psnr.is_finite() && row.materials.albedo.rmse >= 0.0);
    }
    let table = a.table();
    assert_eq!(table.lines().count(), 5, "{table}");
}
