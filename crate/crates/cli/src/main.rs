use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use psimap::raster::{Binning, Blending, Targets};
use serde_json::json;

use psimap_cli::commands;
use psimap_cli::config::RunConfig;

#[derive(Parser)]
#[command(name = "psimap", version, about = "Surfel mapping with panoptic queries and a tile rasterizer")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a plane-aware Gaussian mixture to a PLY point cloud.
    FitSogmm {
        #[arg(long)]
        ply: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        planarity_threshold: Option<f64>,
        #[arg(long)]
        min_points: Option<usize>,
        #[arg(long)]
        max_depth: Option<usize>,
        #[arg(long)]
        em_iters: Option<usize>,
    },
    /// Write a synthetic box scene with noisy pseudo-labels.
    Synth {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        views: Option<usize>,
        #[arg(long)]
        cloud_points: Option<usize>,
        #[arg(long)]
        mask_dropout: Option<f64>,
        #[arg(long)]
        boundary_flip: Option<f64>,
    },
    /// Train a map on a dataset directory.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Use this mixture instead of fitting one to the dataset cloud.
        #[arg(long)]
        sogmm: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        queries_per_instance: Option<f64>,
        #[arg(long)]
        samples_per_component: Option<usize>,
    },
    /// Render a checkpoint from one camera.
    Render {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        camera: CameraArgs,
        #[command(flatten)]
        raster: RasterArgs,
        /// Comma-separated subset of color,depth,normal,semantic,instance.
        #[arg(long, value_delimiter = ',')]
        targets: Option<Vec<TargetArg>>,
        #[arg(long)]
        png: bool,
    },
    /// Time the binning/blending ablation grid.
    Bench {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        camera: CameraArgs,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Panoptic and geometric metrics on held-out views.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        tau: Option<f64>,
    },
}

#[derive(Args)]
struct CameraArgs {
    /// Camera JSON file.
    #[arg(long)]
    camera: Option<PathBuf>,
    /// Use the camera of this dataset view (needs --dataset).
    #[arg(long)]
    view: Option<usize>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', num_args = 3)]
    eye: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', num_args = 3)]
    target: Option<Vec<f64>>,
    #[arg(long)]
    focal: Option<f64>,
    #[arg(long)]
    width: Option<u32>,
    #[arg(long)]
    height: Option<u32>,
}

#[derive(Args)]
struct RasterArgs {
    #[arg(long, value_enum)]
    binning: Option<BinningArg>,
    #[arg(long, value_enum)]
    blending: Option<BlendingArg>,
    #[arg(long)]
    top_k: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BinningArg {
    Circle,
    Aabb,
}

#[derive(Clone, Copy, ValueEnum)]
enum BlendingArg {
    Full,
    Topk,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum TargetArg {
    Color,
    Depth,
    Normal,
    Semantic,
    Instance,
}

fn to3(v: &[f64]) -> [f64; 3] {
    [v[0], v[1], v[2]]
}

impl CameraArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.inputs.camera, self.camera.clone().map(Some));
        set(&mut cfg.inputs.view, self.view.map(Some));
        set(&mut cfg.inputs.dataset, self.dataset.clone().map(Some));
        let c = &mut cfg.camera;
        set(&mut c.eye, self.eye.as_deref().map(to3));
        set(&mut c.target, self.target.as_deref().map(to3));
        set(&mut c.focal, self.focal);
        set(&mut c.width, self.width);
        set(&mut c.height, self.height);
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Defaults, then the config file, then flags.
fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    set(&mut cfg.seed, cli.seed);
    cfg.propagate_seed();
    let out = |cfg: &mut RunConfig, o: &Option<PathBuf>| set(&mut cfg.out_dir, o.clone());
    match &cli.command {
        Command::FitSogmm {
            ply,
            out: o,
            planarity_threshold,
            min_points,
            max_depth,
            em_iters,
        } => {
            cfg.command = "fit-sogmm".into();
            out(&mut cfg, o);
            set(&mut cfg.inputs.ply, ply.clone().map(Some));
            let s = &mut cfg.sogmm;
            set(&mut s.planarity_threshold, *planarity_threshold);
            set(&mut s.min_points, *min_points);
            set(&mut s.max_depth, *max_depth);
            set(&mut s.em_iters, *em_iters);
        }
        Command::Synth {
            out: o,
            views,
            cloud_points,
            mask_dropout,
            boundary_flip,
        } => {
            cfg.command = "synth".into();
            out(&mut cfg, o);
            let s = &mut cfg.synth;
            set(&mut s.trajectory.views, *views);
            set(&mut s.cloud_points, *cloud_points);
            set(&mut s.noise.dropout, *mask_dropout);
            set(&mut s.noise.boundary_flip, *boundary_flip);
        }
        Command::Train {
            dataset,
            out: o,
            sogmm,
            steps,
            queries_per_instance,
            samples_per_component,
        } => {
            cfg.command = "train".into();
            out(&mut cfg, o);
            set(&mut cfg.inputs.dataset, dataset.clone().map(Some));
            set(&mut cfg.inputs.sogmm, sogmm.clone().map(Some));
            set(&mut cfg.train.steps, *steps);
            set(&mut cfg.init.queries_per_instance, *queries_per_instance);
            set(&mut cfg.init.samples_per_component, *samples_per_component);
            cfg.train.validate()?;
        }
        Command::Render {
            checkpoint,
            out: o,
            camera,
            raster,
            targets,
            png,
        } => {
            cfg.command = "render".into();
            out(&mut cfg, o);
            set(&mut cfg.inputs.checkpoint, checkpoint.clone().map(Some));
            camera.apply(&mut cfg);
            let r = &mut cfg.render.raster;
            set(
                &mut r.binning,
                raster.binning.map(|b| match b {
                    BinningArg::Circle => Binning::Circle,
                    BinningArg::Aabb => Binning::Aabb,
                }),
            );
            let k = raster.top_k.or(match r.blending {
                Blending::TopK(k) => Some(k),
                Blending::Full => None,
            });
            match raster.blending {
                Some(BlendingArg::Full) => r.blending = Blending::Full,
                Some(BlendingArg::Topk) => r.blending = Blending::TopK(k.unwrap_or(16)),
                None => {
                    if let (Blending::TopK(_), Some(k)) = (r.blending, raster.top_k) {
                        r.blending = Blending::TopK(k);
                    }
                }
            }
            if let Some(t) = targets {
                r.targets = Targets {
                    color: t.contains(&TargetArg::Color),
                    depth: t.contains(&TargetArg::Depth),
                    normal: t.contains(&TargetArg::Normal),
                    semantic: t.contains(&TargetArg::Semantic),
                    instance: t.contains(&TargetArg::Instance),
                };
            }
            cfg.render.png |= *png;
        }
        Command::Bench {
            checkpoint,
            out: o,
            camera,
            reps,
            warmup,
            top_k,
        } => {
            cfg.command = "bench".into();
            out(&mut cfg, o);
            set(&mut cfg.inputs.checkpoint, checkpoint.clone().map(Some));
            camera.apply(&mut cfg);
            set(&mut cfg.bench.repetitions, *reps);
            set(&mut cfg.bench.warmup, *warmup);
            set(&mut cfg.bench.top_k, *top_k);
        }
        Command::Eval {
            checkpoint,
            dataset,
            out: o,
            tau,
        } => {
            cfg.command = "eval".into();
            out(&mut cfg, o);
            set(&mut cfg.inputs.checkpoint, checkpoint.clone().map(Some));
            set(&mut cfg.inputs.dataset, dataset.clone().map(Some));
            set(&mut cfg.eval.tau, *tau);
        }
    }
    Ok(cfg)
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("PSIMAP_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("PSIMAP_THREADS must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    init_threads()?;
    let cfg = resolve(&cli)?;
    match cli.command {
        Command::FitSogmm { .. } => commands::fit_sogmm_cmd(&cfg),
        Command::Synth { .. } => commands::synth_cmd(&cfg),
        Command::Train { .. } => commands::train_cmd(&cfg),
        Command::Render { .. } => commands::render_cmd(&cfg),
        Command::Bench { .. } => commands::bench_cmd(&cfg),
        Command::Eval { .. } => commands::eval_cmd(&cfg),
    }
}

/// One JSON object on one line.
fn error_line(err: &anyhow::Error) -> String {
    let core = err.chain().find_map(|e| e.downcast_ref::<psimap::Error>());
    let kind = match core {
        Some(psimap::Error::InvalidInput(_)) => "invalid_input",
        Some(psimap::Error::InvalidState(_)) => "invalid_state",
        Some(psimap::Error::Parse { .. }) => "parse",
        Some(psimap::Error::NonFiniteGradient(_)) => "non_finite_gradient",
        Some(psimap::Error::Format(_)) => "format",
        Some(psimap::Error::Io(_)) => "io",
        Some(psimap::Error::Json(_)) => "json",
        None if err.chain().any(|e| e.is::<toml::de::Error>()) => "config",
        None if err.chain().any(|e| e.is::<std::io::Error>()) => "io",
        None => "error",
    };
    let message = format!("{err:#}").replace(['\n', '\r'], " ");
    let mut v = json!({ "error": kind, "message": message });
    if let Some(psimap::Error::Parse { offset, .. }) = core {
        v["offset"] = json!(offset);
    }
    v.to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.to_string();
            let first = message.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", json!({ "error": "usage", "message": first }));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(summary) => {
            let text = serde_json::to_string_pretty(&summary).unwrap_or_default();
            // a closed stdout is not a failure of the command
            let _ = writeln!(std::io::stdout().lock(), "{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
