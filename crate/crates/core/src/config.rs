//! Experiment configuration: scene, camera rig, sampling, lighting, loss
//! weights and optimizer settings, serialized as JSON.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::brdf::{BrdfParams, Rgb};
use crate::error::{Error, Result};
use crate::geom::{Camera, Primitive, Scene, Shape, Vec3, GOLDEN_RATIO_CONJUGATE};
use crate::lighting::{direction_from_angles, EnvMap, PointLight};
use crate::material::{MaterialField, MaterialGrid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scene: SceneConfig,
    pub cameras: CameraRigConfig,
    pub sampling: SamplingConfig,
    pub lighting: LightingConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub primitives: Vec<PrimitiveConfig>,
    /// Indexed by `material_id`.
    pub materials: Vec<MaterialConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PrimitiveConfig {
    Sphere { center: [f64; 3], radius: f64, material_id: usize },
    Plane { point: [f64; 3], normal: [f64; 3], extent: f64, material_id: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct MaterialConfig {
    /// Texture resolution `[height, width]` of both the truth and the fitted grid.
    pub resolution: [usize; 2],
    pub truth: MaterialPattern,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct MaterialValue {
    pub albedo: [f64; 3],
    pub metallic: f64,
    pub roughness: f64,
}

impl MaterialValue {
    pub fn params(&self) -> BrdfParams {
        BrdfParams { albedo: Rgb::from_array(self.albedo), metallic: self.metallic, roughness: self.roughness }
    }
}

/// Procedural ground-truth material over UV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MaterialPattern {
    Constant { value: MaterialValue },
    Checker { cells: [usize; 2], a: MaterialValue, b: MaterialValue },
    /// `below` for `u < u_threshold`, `above` otherwise.
    SplitU { u_threshold: f64, below: Box<MaterialPattern>, above: Box<MaterialPattern> },
}

impl MaterialPattern {
    pub fn eval(&self, u: f64, v: f64) -> BrdfParams {
        match self {
            MaterialPattern::Constant { value } => value.params(),
            MaterialPattern::Checker { cells, a, b } => {
                let cu = (u * cells[0] as f64).floor() as i64;
                let cv = (v * cells[1] as f64).floor() as i64;
                if (cu + cv).rem_euclid(2) == 0 { a.params() } else { b.params() }
            }
            MaterialPattern::SplitU { u_threshold, below, above } => {
                if u < *u_threshold { below.eval(u, v) } else { above.eval(u, v) }
            }
        }
    }

    fn values(&self) -> Vec<MaterialValue> {
        match self {
            MaterialPattern::Constant { value } => vec![*value],
            MaterialPattern::Checker { a, b, .. } => vec![*a, *b],
            MaterialPattern::SplitU { below, above, .. } => {
                let mut v = below.values();
                v.extend(above.values());
                v
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct CameraRigConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub radius: f64,
    pub look_at: [f64; 3],
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
    pub min_elevation_deg: f64,
    pub max_elevation_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    /// Incident directions per shading point while fitting.
    pub n_fit: usize,
    /// Incident directions per shading point for ground truth.
    pub n_gt: usize,
    pub rotation_fit: f64,
    pub rotation_gt: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct EnvBlob {
    pub theta_deg: f64,
    pub phi_deg: f64,
    /// Spherical-Gaussian sharpness.
    pub sharpness: f64,
    pub radiance: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct LightingConfig {
    /// Ground-truth env resolution `[height, width]`.
    pub gt_env_resolution: [usize; 2],
    /// Fitted env resolution `[height, width]`.
    pub fit_env_resolution: [usize; 2],
    /// Sky radiance toward `+y` and toward `-y`; blended by polar angle.
    pub sky_zenith: [f64; 3],
    pub sky_nadir: [f64; 3],
    pub blobs: Vec<EnvBlob>,
    pub point_lights: Vec<PointLightConfig>,
    pub shadows: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct PointLightConfig {
    pub position: [f64; 3],
    pub intensity: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum SpecScope {
    /// Softmax over each point's own incident directions.
    Point,
    /// Softmax jointly over every (point, direction) pair in the batch.
    Batch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_pbr: f64,
    pub lambda_smth: f64,
    pub lambda_cons: f64,
    pub lambda_spec: f64,
    pub t_spec: f64,
    pub spec_scope: SpecScope,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    /// Light-only iterations (materials frozen at their neutral start).
    pub iterations_light: usize,
    /// Joint material + light iterations.
    pub iterations_joint: usize,
    pub batch_size: usize,
    /// Background rays per iteration supervising the env map directly.
    pub bg_batch_size: usize,
    pub log_every: usize,
    /// Start the env from the mean background radiance instead of unit radiance.
    pub env_init_from_background: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let metal = MaterialValue { albedo: [0.95, 0.7, 0.35], metallic: 0.9, roughness: 0.15 };
        let glossy_red = MaterialValue { albedo: [0.7, 0.15, 0.1], metallic: 0.05, roughness: 0.35 };
        let light_tile = MaterialValue { albedo: [0.75, 0.75, 0.7], metallic: 0.05, roughness: 0.8 };
        let dark_tile = MaterialValue { albedo: [0.15, 0.25, 0.45], metallic: 0.05, roughness: 0.8 };
        ExperimentConfig {
            scene: SceneConfig {
                primitives: vec![
                    PrimitiveConfig::Sphere { center: [0.0, 0.0, 0.0], radius: 1.0, material_id: 0 },
                    PrimitiveConfig::Plane { point: [0.0, -1.0, 0.0], normal: [0.0, 1.0, 0.0], extent: 4.0, material_id: 1 },
                ],
                materials: vec![
                    MaterialConfig {
                        resolution: [4, 8],
                        truth: MaterialPattern::SplitU {
                            u_threshold: 0.5,
                            below: Box::new(MaterialPattern::Constant { value: metal }),
                            above: Box::new(MaterialPattern::Constant { value: glossy_red }),
                        },
                    },
                    MaterialConfig {
                        resolution: [4, 4],
                        truth: MaterialPattern::Checker { cells: [4, 4], a: light_tile, b: dark_tile },
                    },
                ],
            },
            cameras: CameraRigConfig {
                n_train: 12,
                n_val: 3,
                radius: 4.5,
                look_at: [0.0, -0.3, 0.0],
                fov_deg: 45.0,
                width: 64,
                height: 64,
                min_elevation_deg: 10.0,
                max_elevation_deg: 55.0,
            },
            sampling: SamplingConfig { n_fit: 256, n_gt: 1024, rotation_fit: 0.0, rotation_gt: 1.2345 },
            lighting: LightingConfig {
                gt_env_resolution: [64, 128],
                fit_env_resolution: [16, 32],
                sky_zenith: [0.35, 0.45, 0.6],
                sky_nadir: [0.12, 0.1, 0.08],
                blobs: vec![
                    EnvBlob { theta_deg: 35.0, phi_deg: 40.0, sharpness: 40.0, radiance: [12.0, 10.0, 8.0] },
                    EnvBlob { theta_deg: 60.0, phi_deg: 200.0, sharpness: 25.0, radiance: [3.0, 4.0, 6.0] },
                    EnvBlob { theta_deg: 80.0, phi_deg: 290.0, sharpness: 60.0, radiance: [8.0, 3.0, 2.0] },
                ],
                point_lights: vec![PointLightConfig { position: [2.5, 3.0, 2.0], intensity: [6.0, 6.0, 6.0] }],
                shadows: true,
            },
            loss: LossConfig {
                lambda_pbr: 1.0,
                lambda_smth: 0.0005,
                lambda_cons: 0.01,
                lambda_spec: 0.5,
                t_spec: 1.0,
                spec_scope: SpecScope::Point,
            },
            optimizer: OptimizerConfig {
                lr: 0.002,
                decay_factor: 5.0,
                decay_every: 2000,
                iterations_light: 500,
                iterations_joint: 3500,
                batch_size: 1024,
                bg_batch_size: 256,
                log_every: 10,
                env_init_from_background: true,
            },
            seed: 7,
            output_dir: PathBuf::from("out"),
        }
    }
}

fn cfg_err(pointer: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config { pointer: pointer.into(), message: message.into() }
}

/// Converts a serde_path_to_error path (`a.b[0].c`) into a JSON pointer (`/a/b/0/c`).
fn path_to_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        match seg {
            Segment::Seq { index } => out.push_str(&format!("/{index}")),
            Segment::Map { key } => out.push_str(&format!("/{}", key.replace('~', "~0").replace('/', "~1"))),
            Segment::Enum { variant } => out.push_str(&format!("/{variant}")),
            Segment::Unknown => out.push_str("/?"),
        }
    }
    out
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let mut pointer = path_to_pointer(e.path());
            let message = e.inner().to_string();
            // Missing fields are reported at the parent; name the field itself.
            if let Some(rest) = message.strip_prefix("missing field `") {
                if let Some(field) = rest.split('`').next() {
                    pointer.push('/');
                    pointer.push_str(field);
                }
            }
            if pointer.is_empty() {
                pointer.push('/');
            }
            cfg_err(pointer, message)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn json_schema() -> String {
        serde_json::to_string_pretty(&schemars::schema_for!(ExperimentConfig)).expect("schema serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.scene;
        if s.primitives.is_empty() {
            return Err(cfg_err("/scene/primitives", "at least one primitive required"));
        }
        for (i, p) in s.primitives.iter().enumerate() {
            let id = match p {
                PrimitiveConfig::Sphere { radius, material_id, .. } => {
                    if !(*radius > 0.0) {
                        return Err(cfg_err(format!("/scene/primitives/{i}/radius"), "radius must be positive"));
                    }
                    *material_id
                }
                PrimitiveConfig::Plane { normal, extent, material_id, .. } => {
                    if Vec3::new(normal[0], normal[1], normal[2]).length() < 1e-9 {
                        return Err(cfg_err(format!("/scene/primitives/{i}/normal"), "normal must be nonzero"));
                    }
                    if !(*extent > 0.0) {
                        return Err(cfg_err(format!("/scene/primitives/{i}/extent"), "extent must be positive"));
                    }
                    *material_id
                }
            };
            if id >= s.materials.len() {
                return Err(cfg_err(format!("/scene/primitives/{i}/material_id"), format!("material {id} is not defined")));
            }
        }
        for (i, m) in s.materials.iter().enumerate() {
            if m.resolution[0] < 1 || m.resolution[1] < 1 {
                return Err(cfg_err(format!("/scene/materials/{i}/resolution"), "resolution must be positive"));
            }
            for v in m.truth.values() {
                let ok = |x: f64| x > 0.0 && x < 1.0;
                if !(v.albedo.iter().all(|&a| ok(a)) && ok(v.metallic) && ok(v.roughness)) {
                    return Err(cfg_err(format!("/scene/materials/{i}/truth"), "material values must lie strictly inside (0, 1)"));
                }
            }
        }
        let c = &self.cameras;
        if c.n_train < 1 {
            return Err(cfg_err("/cameras/n_train", "need at least one training view"));
        }
        if c.width < 1 || c.height < 1 {
            return Err(cfg_err("/cameras/width", "resolution must be positive"));
        }
        if !(c.fov_deg > 0.0 && c.fov_deg < 180.0) {
            return Err(cfg_err("/cameras/fov_deg", "fov must lie in (0, 180)"));
        }
        if !(c.radius > 0.0) {
            return Err(cfg_err("/cameras/radius", "radius must be positive"));
        }
        if c.min_elevation_deg.abs() >= 89.0 || c.max_elevation_deg.abs() >= 89.0 {
            return Err(cfg_err("/cameras/max_elevation_deg", "elevations must stay within (-89, 89) degrees"));
        }
        if self.sampling.n_fit < 1 {
            return Err(cfg_err("/sampling/n_fit", "must be at least 1"));
        }
        if self.sampling.n_gt < 1 {
            return Err(cfg_err("/sampling/n_gt", "must be at least 1"));
        }
        let l = &self.lighting;
        if l.gt_env_resolution.iter().any(|&r| r < 2) {
            return Err(cfg_err("/lighting/gt_env_resolution", "env resolution must be at least 2x2"));
        }
        if l.fit_env_resolution.iter().any(|&r| r < 2) {
            return Err(cfg_err("/lighting/fit_env_resolution", "env resolution must be at least 2x2"));
        }
        if l.sky_zenith.iter().chain(&l.sky_nadir).any(|&v| !(v > 0.0)) {
            return Err(cfg_err("/lighting/sky_zenith", "sky radiance must be positive"));
        }
        for (i, p) in l.point_lights.iter().enumerate() {
            if p.intensity.iter().any(|&v| !(v >= 0.0)) {
                return Err(cfg_err(format!("/lighting/point_lights/{i}/intensity"), "intensity must be nonnegative"));
            }
        }
        let w = &self.loss;
        for (name, v) in [
            ("lambda_pbr", w.lambda_pbr),
            ("lambda_smth", w.lambda_smth),
            ("lambda_cons", w.lambda_cons),
            ("lambda_spec", w.lambda_spec),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(cfg_err(format!("/loss/{name}"), "weights must be finite and nonnegative"));
            }
        }
        if !(w.t_spec > 0.0 && w.t_spec.is_finite()) {
            return Err(cfg_err("/loss/t_spec", "temperature must be positive"));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) {
            return Err(cfg_err("/optimizer/lr", "learning rate must be positive"));
        }
        if !(o.decay_factor > 1.0) {
            return Err(cfg_err("/optimizer/decay_factor", "decay factor must exceed 1"));
        }
        if o.decay_every < 1 {
            return Err(cfg_err("/optimizer/decay_every", "must be at least 1"));
        }
        if o.batch_size < 1 {
            return Err(cfg_err("/optimizer/batch_size", "must be at least 1"));
        }
        if o.log_every < 1 {
            return Err(cfg_err("/optimizer/log_every", "must be at least 1"));
        }
        Ok(())
    }

    pub fn scene(&self) -> Scene {
        let v = |a: [f64; 3]| Vec3::new(a[0], a[1], a[2]);
        Scene {
            primitives: self
                .scene
                .primitives
                .iter()
                .map(|p| match *p {
                    PrimitiveConfig::Sphere { center, radius, material_id } => {
                        Primitive { shape: Shape::Sphere { center: v(center), radius }, material_id }
                    }
                    PrimitiveConfig::Plane { point, normal, extent, material_id } => {
                        let n = v(normal);
                        Primitive { shape: Shape::Plane { point: v(point), normal: n / n.length(), extent }, material_id }
                    }
                })
                .collect(),
        }
    }

    pub fn truth_materials(&self) -> MaterialField {
        MaterialField {
            grids: self
                .scene
                .materials
                .iter()
                .map(|m| MaterialGrid::from_fn(m.resolution[0], m.resolution[1], |u, v| m.truth.eval(u, v)))
                .collect(),
        }
    }

    /// Fitting starts from all-zero logits (every parameter at 0.5).
    pub fn initial_materials(&self) -> MaterialField {
        MaterialField {
            grids: self.scene.materials.iter().map(|m| MaterialGrid::neutral(m.resolution[0], m.resolution[1])).collect(),
        }
    }

    pub fn truth_env_radiance(&self, w: crate::geom::Direction) -> Rgb {
        let l = &self.lighting;
        let t = 0.5 * (1.0 + w.vec().y);
        let mut c = Rgb::from_array(l.sky_nadir) * (1.0 - t) + Rgb::from_array(l.sky_zenith) * t;
        for b in &l.blobs {
            let mu = direction_from_angles(b.theta_deg.to_radians(), b.phi_deg.to_radians());
            c += Rgb::from_array(b.radiance) * (b.sharpness * (w.dot(mu) - 1.0)).exp();
        }
        c
    }

    pub fn truth_env(&self) -> EnvMap {
        let [h, w] = self.lighting.gt_env_resolution;
        let probe = EnvMap::constant(h, w, [0.0; 3], 1.0).expect("valid env size");
        let logs = (0..h)
            .flat_map(|r| (0..w).map(move |c| (r, c)))
            .map(|(r, c)| self.truth_env_radiance(probe.texel_direction(r, c)).to_array().map(f64::ln))
            .collect();
        EnvMap::from_log_radiance(h, w, logs, 1.0).expect("valid env")
    }

    pub fn point_lights(&self) -> Vec<PointLight> {
        self.lighting
            .point_lights
            .iter()
            .map(|p| PointLight {
                position: Vec3::new(p.position[0], p.position[1], p.position[2]),
                intensity: Rgb::from_array(p.intensity),
            })
            .collect()
    }

    /// Training poses followed by validation poses, spiralling around `look_at`.
    pub fn cameras(&self) -> Vec<Camera> {
        let c = &self.cameras;
        let total = c.n_train + c.n_val;
        let target = Vec3::new(c.look_at[0], c.look_at[1], c.look_at[2]);
        (0..total)
            .map(|k| {
                // Validation views are offset by half a golden step so they never coincide with training views.
                let (idx, offset, count) = if k < c.n_train { (k, 0.0, c.n_train) } else { (k - c.n_train, 0.5, c.n_val) };
                let frac = if count > 1 { idx as f64 / (count - 1) as f64 } else { 0.5 };
                let elev = (c.min_elevation_deg + (c.max_elevation_deg - c.min_elevation_deg) * frac).to_radians();
                let azim = 2.0 * PI * ((idx as f64 + offset) * GOLDEN_RATIO_CONJUGATE).fract();
                let dir = Vec3::new(elev.cos() * azim.cos(), elev.sin(), elev.cos() * azim.sin());
                Camera {
                    position: target + dir * c.radius,
                    look_at: target,
                    up: Vec3::Y,
                    vertical_fov: c.fov_deg.to_radians(),
                    width: c.width,
                    height: c.height,
                }
            })
            .collect()
    }
}
