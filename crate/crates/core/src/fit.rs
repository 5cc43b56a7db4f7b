//! Two-phase fitting of material textures and the environment map to the
//! training views: lighting alone first, then everything jointly.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{AdamState, LrSchedule};
use crate::config::ExperimentConfig;
use crate::dataset::GroundTruth;
use crate::error::{Error, Result};
use crate::grad::{eval_loss_and_grad, EvalOptions, FitProblem, RayBatch, Reduction};
use crate::lighting::EnvMap;
use crate::losses::{LossBreakdown, LossWeights};
use crate::params::ParamVector;

/// One line of the loss log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub params: ParamVector,
    pub log: Vec<LogRecord>,
    pub final_loss: LossBreakdown,
    pub wall_time_s: f64,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct FitOptions {
    pub reduction: Reduction,
    /// Print progress to stderr at every logged iteration.
    pub verbose: bool,
}

/// Builds the fitting problem for the training views of `gt`.
pub fn build_problem(gt: &GroundTruth) -> Result<FitProblem> {
    let c = &gt.config;
    FitProblem::from_images(
        &gt.scene,
        gt.train_cameras(),
        &gt.train,
        &c.initial_materials(),
        &gt.point_lights,
        c.lighting.shadows,
        c.sampling.n_fit,
        c.sampling.rotation_fit,
    )
}

/// Starting environment: uniform, at the mean background radiance if
/// requested and available, unit radiance otherwise.
pub fn initial_env(config: &ExperimentConfig, problem: &FitProblem) -> Result<EnvMap> {
    let [h, w] = config.lighting.fit_env_resolution;
    let mut log = [0.0; 3];
    if config.optimizer.env_init_from_background && !problem.background.is_empty() {
        let n = problem.background.len() as f64;
        for (c, slot) in log.iter_mut().enumerate() {
            let mean = problem.background.iter().map(|b| b.reference.to_array()[c]).sum::<f64>() / n;
            *slot = mean.max(1e-6).ln();
        }
    }
    EnvMap::constant(h, w, log, 1.0)
}

/// Initial parameter vector: neutral materials and the initial env.
pub fn initial_params(config: &ExperimentConfig, problem: &FitProblem) -> Result<ParamVector> {
    Ok(ParamVector::from_model(&config.initial_materials(), Some(&initial_env(config, problem)?)))
}

/// The batch drawn at every iteration, in order, for a given seed.
pub struct BatchStream {
    rng: ChaCha8Rng,
    n_hits: usize,
    n_background: usize,
}

impl BatchStream {
    pub fn new(seed: u64, n_hits: usize, n_background: usize) -> Self {
        BatchStream { rng: ChaCha8Rng::seed_from_u64(seed), n_hits, n_background }
    }

    pub fn next_batch(&mut self, problem: &FitProblem) -> RayBatch {
        problem.sample_batch(&mut self.rng, self.n_hits, self.n_background)
    }
}

/// Runs both phases. When `out_dir` is given, writes `loss.jsonl`,
/// `params_light.bin` after the lighting phase and `params.bin` at the end.
pub fn fit(gt: &GroundTruth, weights: &LossWeights, out_dir: Option<&Path>, opts: FitOptions) -> Result<FitResult> {
    let start = Instant::now();
    let config = &gt.config;
    let o = &config.optimizer;
    let problem = build_problem(gt)?;
    if problem.rays.is_empty() {
        return Err(Error::InvalidInput("no training pixel hits the scene".into()));
    }
    let mut params = initial_params(config, &problem)?;
    let schedule = LrSchedule::new(o.lr, o.decay_factor, o.decay_every)?;
    let mut adam = AdamState::new(params.values.len());
    let env_seg = params.layout.env_segment().cloned().expect("fit params carry an env segment");
    let env_only: Vec<bool> = (0..params.values.len()).map(|i| i >= env_seg.offset).collect();
    let mut batches = BatchStream::new(config.seed, o.batch_size, o.bg_batch_size);

    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("loss.jsonl");
            Some((std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };

    let eval_opts = EvalOptions { reduction: opts.reduction, frozen_spec_mass: None };
    let total_iters = o.iterations_light + o.iterations_joint;
    let mut log = Vec::new();
    let mut last = LossBreakdown::default();
    for iter in 0..total_iters {
        if iter == o.iterations_light {
            if let Some(dir) = out_dir {
                params.save(&dir.join("params_light.bin"))?;
            }
        }
        let batch = batches.next_batch(&problem);
        let ev = eval_loss_and_grad(&problem, &params, &batch, weights, eval_opts)?;
        last = ev.loss;
        if iter % o.log_every == 0 || iter + 1 == total_iters {
            let rec = LogRecord { iter, loss: ev.loss };
            if let Some((f, path)) = &mut log_file {
                let line = serde_json::to_string(&rec).expect("log record serializes");
                writeln!(f, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
            }
            if opts.verbose {
                eprintln!(
                    "iter {iter:5} total {:.6} pbr {:.6} cons {:.6} spec {:.3e} bg {:.6}",
                    rec.loss.total, rec.loss.pbr, rec.loss.cons, rec.loss.spec, rec.loss.bg
                );
            }
            log.push(rec);
        }
        let mask = (iter < o.iterations_light).then_some(env_only.as_slice());
        adam.step(&mut params.values, &ev.grad, &schedule, mask)?;
    }
    if let Some(dir) = out_dir {
        params.save(&dir.join("params.bin"))?;
        if let Some(env) = params.env()? {
            env.to_image().write_pfm(&dir.join("env.pfm"))?;
        }
    }
    Ok(FitResult { params, log, final_loss: last, wall_time_s: start.elapsed().as_secs_f64() })
}
