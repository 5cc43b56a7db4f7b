use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pbrfit_core::ablation::{image_psnr, material_metrics, run_ablation};
use pbrfit_core::config::{ExperimentConfig, SpecScope};
use pbrfit_core::dataset::{generate_ground_truth, read_bundle, render_view, write_bundle, GroundTruth};
use pbrfit_core::fit::{fit, FitOptions};
use pbrfit_core::grad::Reduction;
use pbrfit_core::image::HdrImage;
use pbrfit_core::lighting::EnvMap;
use pbrfit_core::losses::LossWeights;
use pbrfit_core::params::ParamVector;
use pbrfit_core::Error;

#[derive(Parser)]
#[command(name = "pbrfit", version, about = "Fit Disney-BRDF textures and an environment map to synthetic HDR views")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    #[value(alias = "per-point")]
    Point,
    #[value(alias = "per-batch")]
    Batch,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON). Defaults to the built-in scene, or the bundle's scene.json.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: logical cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Merge parallel partial sums in a fixed order.
    #[arg(long)]
    bit_reproducible: bool,
    /// Softmax scope of the specular loss.
    #[arg(long, visible_alias = "mode", value_enum)]
    spec_scope: Option<ScopeArg>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the effective config as JSON and exit.
    #[arg(long)]
    print_config: bool,
    /// Print per-iteration progress.
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Render the ground-truth bundle.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Render one pose from a parameter snapshot to PFM and PNG.
    Render {
        #[command(flatten)]
        common: Common,
        /// Parameter snapshot (materials, optionally env).
        #[arg(long)]
        params: PathBuf,
        /// Environment PFM, used when the snapshot has no env segment
        /// (default: the config's true environment).
        #[arg(long)]
        env: Option<PathBuf>,
        /// Pose index: training poses first, then validation poses.
        #[arg(long)]
        pose: usize,
        /// Incident directions per point (default: the fitting count).
        #[arg(long)]
        samples: Option<usize>,
        /// Quadrature rotation (default: the fitting rotation).
        #[arg(long)]
        rotation: Option<f64>,
    },
    /// Fit materials and lighting to the training views.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Ground-truth bundle from `gen`; rendered in memory when omitted.
        #[arg(long)]
        bundle: Option<PathBuf>,
    },
    /// Run the four-way loss ablation.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bundle: Option<PathBuf>,
    },
    /// Compare two PFM images (PSNR) or two parameter snapshots (material RMSE/PSNR).
    Metrics {
        a: PathBuf,
        b: PathBuf,
        /// PSNR peak for images.
        #[arg(long, default_value_t = 1.0)]
        peak: f64,
    },
    /// Print the config JSON schema.
    Schema,
    /// Print the default config.
    InitConfig,
}

struct CliError {
    code: u8,
    message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config { .. } | Error::InvalidInput(_) | Error::LengthMismatch { .. } | Error::EmptyMask => 2,
            Error::NonFinite { .. } => 3,
            Error::Io { .. } | Error::Format { .. } => 4,
            _ => 1,
        };
        CliError { code, message: e.to_string() }
    }
}

fn usage(message: impl Into<String>) -> CliError {
    CliError { code: 2, message: message.into() }
}

type CliResult<T> = Result<T, CliError>;

fn load_config(common: &Common, bundle: Option<&Path>) -> CliResult<ExperimentConfig> {
    let mut cfg = match (&common.config, bundle) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(dir)) => ExperimentConfig::load(&dir.join("scene.json"))?,
        (None, None) => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(scope) = common.spec_scope {
        cfg.loss.spec_scope = match scope {
            ScopeArg::Point => SpecScope::Point,
            ScopeArg::Batch => SpecScope::Batch,
        };
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn fit_options(common: &Common) -> FitOptions {
    FitOptions {
        reduction: if common.bit_reproducible { Reduction::Ordered } else { Reduction::Unordered },
        verbose: common.verbose,
    }
}

/// Ground truth from a bundle (with the effective config swapped in) or rendered in memory.
fn ground_truth(cfg: &ExperimentConfig, bundle: Option<&Path>) -> CliResult<GroundTruth> {
    match bundle {
        Some(dir) => {
            let mut gt = read_bundle(dir)?;
            if gt.config.scene != cfg.scene || gt.config.cameras != cfg.cameras {
                return Err(usage("config scene or cameras differ from the bundle's scene.json"));
            }
            gt.config = cfg.clone();
            gt.point_lights = cfg.point_lights();
            Ok(gt)
        }
        None => Ok(generate_ground_truth(cfg)?),
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let common = match &cli.command {
        Command::Gen { common } | Command::Render { common, .. } | Command::Fit { common, .. } | Command::Ablate { common, .. } => {
            Some(common.clone())
        }
        _ => None,
    };
    if let Some(threads) = common.as_ref().and_then(|c| c.threads) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| usage(format!("cannot configure {threads} threads: {e}")))?;
    }
    let bundle = match &cli.command {
        Command::Fit { bundle, .. } | Command::Ablate { bundle, .. } => bundle.clone(),
        _ => None,
    };
    let cfg = match &common {
        Some(c) => {
            let cfg = load_config(c, bundle.as_deref())?;
            if c.print_config {
                println!("{}", cfg.to_json_pretty());
                return Ok(());
            }
            Some(cfg)
        }
        None => None,
    };

    match cli.command {
        Command::Gen { .. } => {
            let cfg = cfg.expect("config loaded");
            let gt = generate_ground_truth(&cfg)?;
            write_bundle(&gt, &cfg.output_dir)?;
            eprintln!("wrote ground truth to {}", cfg.output_dir.display());
        }
        Command::Render { params, env, pose, samples, rotation, .. } => {
            let cfg = cfg.expect("config loaded");
            let cameras = cfg.cameras();
            let camera = cameras.get(pose).ok_or_else(|| usage(format!("pose {pose} out of range (0..{})", cameras.len())))?;
            let snapshot = ParamVector::load(&params)?;
            let materials = snapshot.materials()?;
            if materials.grids.len() != cfg.scene.materials.len() {
                return Err(usage("parameter snapshot does not match the scene's materials"));
            }
            let env = match (snapshot.env()?, env) {
                (Some(e), _) => e,
                (None, Some(path)) => EnvMap::from_radiance(&HdrImage::read_pfm(&path)?, 1.0)?,
                (None, None) => cfg.truth_env(),
            };
            let s = &cfg.sampling;
            let img = render_view(
                &cfg,
                &cfg.scene(),
                &materials,
                &env,
                &cfg.point_lights(),
                camera,
                samples.unwrap_or(s.n_fit),
                rotation.unwrap_or(s.rotation_fit),
            );
            let stem = cfg.output_dir.join(format!("render_{pose:03}"));
            img.write_pfm(&stem.with_extension("pfm"))?;
            img.write_png(&stem.with_extension("png"))?;
            eprintln!("wrote {}", stem.with_extension("pfm").display());
        }
        Command::Fit { .. } => {
            let cfg = cfg.expect("config loaded");
            let c = common.expect("common flags");
            let gt = ground_truth(&cfg, bundle.as_deref())?;
            let res = fit(&gt, &LossWeights::from(&cfg.loss), Some(&cfg.output_dir), fit_options(&c))?;
            eprintln!(
                "fit done in {:.1}s, final total {:.6} (pbr {:.6}); wrote {}",
                res.wall_time_s,
                res.final_loss.total,
                res.final_loss.pbr,
                cfg.output_dir.display()
            );
        }
        Command::Ablate { .. } => {
            let cfg = cfg.expect("config loaded");
            let c = common.expect("common flags");
            let gt = ground_truth(&cfg, bundle.as_deref())?;
            let report = run_ablation(&gt, &LossWeights::from(&cfg.loss), Some(&cfg.output_dir), fit_options(&c))?;
            print!("{}", report.table());
        }
        Command::Metrics { a, b, peak } => {
            let is_bin = |p: &Path| p.extension().is_some_and(|e| e == "bin");
            let out = if is_bin(&a) && is_bin(&b) {
                let (ma, mb) = (ParamVector::load(&a)?.materials()?, ParamVector::load(&b)?.materials()?);
                let mask: Vec<Vec<bool>> = mb.grids.iter().map(|g| vec![true; g.texel_count()]).collect();
                serde_json::to_value(material_metrics(&ma, &mb, &mask)?).expect("metrics serialize")
            } else {
                let psnr = image_psnr(&HdrImage::read_pfm(&a)?, &HdrImage::read_pfm(&b)?, peak)?;
                serde_json::json!({ "psnr": psnr })
            };
            println!("{out}");
        }
        Command::Schema => println!("{}", ExperimentConfig::json_schema()),
        Command::InitConfig => println!("{}", ExperimentConfig::default().to_json_pretty()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
