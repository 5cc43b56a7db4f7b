//! Ground-truth bundle: rendered training/validation views, true materials,
//! true environment and the scene description.
//!
//! On disk:
//!
//! ```text
//! scene.json            full experiment config
//! train/NNN.pfm|png     training views
//! val/NNN.pfm|png       validation views
//! gt_materials.bin      true material logits (parameter snapshot, no env segment)
//! gt_env.pfm|png        true environment radiance
//! ```

use std::path::Path;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::geom::{Camera, Scene};
use crate::image::HdrImage;
use crate::lighting::{EnvMap, PointLight};
use crate::material::MaterialField;
use crate::params::ParamVector;
use crate::render::{render, Lights, RenderSetup};

#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub config: ExperimentConfig,
    pub scene: Scene,
    /// Training poses first, then validation poses.
    pub cameras: Vec<Camera>,
    pub train: Vec<HdrImage>,
    pub val: Vec<HdrImage>,
    pub materials: MaterialField,
    pub env: EnvMap,
    pub point_lights: Vec<PointLight>,
}

impl GroundTruth {
    pub fn train_cameras(&self) -> &[Camera] {
        &self.cameras[..self.train.len()]
    }

    pub fn val_cameras(&self) -> &[Camera] {
        &self.cameras[self.train.len()..]
    }
}

/// Renders one view of the scene described by `config` with the given
/// materials and lighting.
pub fn render_view(
    config: &ExperimentConfig,
    scene: &Scene,
    materials: &MaterialField,
    env: &EnvMap,
    point_lights: &[PointLight],
    camera: &Camera,
    n_samples: usize,
    rotation: f64,
) -> HdrImage {
    let setup = RenderSetup {
        scene,
        materials,
        lights: Lights { env, points: point_lights, occluders: config.lighting.shadows.then_some(scene) },
        n_samples,
        rotation,
    };
    render(&setup, camera)
}

/// Renders every pose with the ground-truth sample count and rotation.
pub fn generate_ground_truth(config: &ExperimentConfig) -> Result<GroundTruth> {
    config.validate()?;
    let scene = config.scene();
    let cameras = config.cameras();
    let materials = config.truth_materials();
    let env = config.truth_env();
    let point_lights = config.point_lights();
    let s = &config.sampling;
    let mut images: Vec<HdrImage> = cameras
        .iter()
        .map(|cam| render_view(config, &scene, &materials, &env, &point_lights, cam, s.n_gt, s.rotation_gt))
        .collect();
    let val = images.split_off(config.cameras.n_train);
    Ok(GroundTruth { config: config.clone(), scene, cameras, train: images, val, materials, env, point_lights })
}

fn view_name(i: usize) -> String {
    format!("{i:03}")
}

fn write_views(dir: &Path, images: &[HdrImage]) -> Result<()> {
    for (i, img) in images.iter().enumerate() {
        img.write_pfm(&dir.join(format!("{}.pfm", view_name(i))))?;
        img.write_png(&dir.join(format!("{}.png", view_name(i))))?;
    }
    Ok(())
}

pub fn write_bundle(gt: &GroundTruth, dir: &Path) -> Result<()> {
    write_views(&dir.join("train"), &gt.train)?;
    write_views(&dir.join("val"), &gt.val)?;
    ParamVector::from_model(&gt.materials, None).save(&dir.join("gt_materials.bin"))?;
    let env_img = gt.env.to_image();
    env_img.write_pfm(&dir.join("gt_env.pfm"))?;
    env_img.write_png(&dir.join("gt_env.png"))?;
    crate::image::write_file(&dir.join("scene.json"), gt.config.to_json_pretty().as_bytes())
}

pub fn read_bundle(dir: &Path) -> Result<GroundTruth> {
    let config = ExperimentConfig::load(&dir.join("scene.json"))?;
    let read_views = |sub: &str, n: usize| -> Result<Vec<HdrImage>> {
        (0..n).map(|i| HdrImage::read_pfm(&dir.join(sub).join(format!("{}.pfm", view_name(i))))).collect()
    };
    let train = read_views("train", config.cameras.n_train)?;
    let val = read_views("val", config.cameras.n_val)?;
    let materials = ParamVector::load(&dir.join("gt_materials.bin"))?.materials()?;
    let env = EnvMap::from_radiance(&HdrImage::read_pfm(&dir.join("gt_env.pfm"))?, 1.0)?;
    if materials.grids.len() != config.scene.materials.len() {
        return Err(Error::Format { format: "bundle", message: "material count differs from scene.json".into() });
    }
    Ok(GroundTruth {
        scene: config.scene(),
        cameras: config.cameras(),
        point_lights: config.point_lights(),
        config,
        train,
        val,
        materials,
        env,
    })
}
