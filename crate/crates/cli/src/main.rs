use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use great_core::dataset::synth::{fixture_path, generate_synthetic, SynthConfig};
use great_core::dataset::{load_manifest, PartitionName};
use great_core::metrics::format_table;
use great_core::mhacot::PromptTemplates;
use great_core::mllm::BackendConfig;
use great_core::pipeline::{evaluate, infer, reason, train, InferRequest, TrainConfig};
use great_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "great", version, about = "Open-vocabulary 3D affordance grounding")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with canned reasoning answers.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        instances: Option<usize>,
        #[arg(long)]
        images_per_cell: Option<usize>,
        #[arg(long)]
        image_size: Option<u32>,
    },
    /// Run the reasoning chain for every manifest image and cache the transcripts.
    Reason {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        /// Backend configuration file (JSON).
        #[arg(long, conflicts_with = "fixture", required_unless_present = "fixture")]
        backend: Option<PathBuf>,
        /// Shorthand for a fixture backend reading this answers file.
        #[arg(long)]
        fixture: Option<PathBuf>,
        /// Four prompt templates as a JSON array; `{object}` is substituted.
        #[arg(long)]
        prompts: Option<PathBuf>,
    },
    /// Train a model from cached transcripts.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Evaluate a checkpoint on a partition's test side.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// seen, unseen_object or unseen_affordance; defaults to the training partition.
        #[arg(long)]
        partition: Option<PartitionName>,
        /// Write the report as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        workers: usize,
    },
    /// Predict the heatmap of one point cloud and image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        object: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        heatmap: Option<PathBuf>,
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long)]
        backend: Option<PathBuf>,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn load_backend(path: &Path) -> Result<BackendConfig> {
    let mut cfg: BackendConfig = read_json(path)?;
    if let (Some(f), Some(base)) = (&cfg.fixture_path, path.parent()) {
        if f.is_relative() {
            cfg.fixture_path = Some(base.join(f));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Synth {
            out,
            seed,
            instances,
            images_per_cell,
            image_size,
        } => {
            let mut cfg = SynthConfig::default();
            if let Some(n) = instances {
                cfg.instances_per_template = n;
            }
            if let Some(n) = images_per_cell {
                cfg.images_per_cell = n;
            }
            if let Some(s) = image_size {
                cfg.image_size = s;
            }
            let m = generate_synthetic(&cfg, &out, seed)?;
            println!(
                "wrote {} point clouds and {} images to {}",
                m.points.len(),
                m.images.len(),
                out.display()
            );
            println!("manifest: {}", out.join("manifest.json").display());
            println!("fixtures: {}", fixture_path(&out).display());
        }
        Command::Reason {
            manifest,
            cache,
            backend,
            fixture,
            prompts,
        } => {
            let backend = match (backend, fixture) {
                (Some(p), _) => load_backend(&p)?,
                (None, Some(f)) => BackendConfig::fixture(f),
                (None, None) => unreachable!("clap requires one"),
            };
            let templates = match prompts {
                Some(p) => read_json(&p)?,
                None => PromptTemplates::default(),
            };
            let m = load_manifest(&manifest)?;
            let s = reason(&m, &backend, &templates, &cache)?;
            println!(
                "images: {}  cached: {}  generated: {}  failed: {}",
                s.total,
                s.cached,
                s.generated,
                s.failures.len()
            );
            for f in &s.failures {
                eprintln!("failed {}: {}", f.image_id, f.error);
            }
            if let Some(f) = s.failures.first() {
                return Ok(f.exit_code);
            }
        }
        Command::Train {
            config,
            epochs,
            seed,
            workers,
        } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(w) = workers {
                cfg.workers = w;
            }
            let out = train(&cfg)?;
            println!("final loss: {}", out.epoch_losses.last().copied().unwrap_or(f64::NAN));
            println!("checkpoint: {}", out.checkpoint.display());
            println!("loss curve: {}", out.loss_curve.display());
        }
        Command::Eval {
            checkpoint,
            partition,
            out,
            workers,
        } => {
            let report = evaluate(&checkpoint, partition, workers)?;
            if let Some(p) = out {
                std::fs::write(&p, report.to_json()?).map_err(|e| Error::io(&p, e))?;
            }
            print!("{}", format_table(std::slice::from_ref(&report)));
        }
        Command::Infer {
            checkpoint,
            points,
            image,
            object,
            out,
            heatmap,
            cache,
            backend,
        } => {
            let backend = backend.as_deref().map(load_backend).transpose()?;
            let phi = infer(&InferRequest {
                checkpoint,
                points,
                image,
                object,
                out: out.clone(),
                heatmap_png: heatmap,
                cache_dir: cache,
                backend,
            })?;
            let max = phi.iter().copied().fold(0.0, f64::max);
            println!("wrote {} ({} points, max {max:.3})", out.display(), phi.len());
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
