use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pampose::checkpoint::Checkpoint;
use pampose::data::{read_cloud, read_pose, write_cloud, write_pose};
use pampose::harness::{
    classify_experiment, eval_scene, evaluate, eval_scenes, iterative_refine, objects_for, run_ablation, train_repeats,
    training_scene, write_run_outputs, AblationSpec, RunConfig, TrainedModel, REPORT_CSV, REPORT_JSON, SCHEMA,
};
use pampose::geometry::PointCloud;
use pampose::{Error, Result};

const EXIT_VALIDATION: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;

#[derive(Parser)]
#[command(name = "pampose", version, about = "Point-attention pose estimation on synthetic point clouds")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat TOML config file (see `pampose schema`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory; overrides `output.dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train pose network and refiner, evaluate, write report and checkpoint.
    Train {
        /// Train seeds seed..seed+N-1 and keep the best run.
        #[arg(long, default_value_t = 1)]
        repeats: usize,
    },
    /// Evaluate a checkpoint on the held-out scene stream.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Estimate and refine the pose of one observed cloud.
    Refine {
        #[arg(long)]
        checkpoint: PathBuf,
        /// PLY cloud with per-point colour.
        #[arg(long)]
        cloud: PathBuf,
        /// Object index in the checkpoint's model list.
        #[arg(long, default_value_t = 0)]
        object: usize,
        /// Initial pose file; defaults to the network's own estimate.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Refinement iterations; defaults to `refine.iters`.
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Run an ablation sweep.
    Ablate {
        #[arg(long, value_enum, default_value_t = Sweep::Components)]
        sweep: Sweep,
        /// Reduction ratios for `--sweep ratios`.
        #[arg(long, value_delimiter = ',', default_value = "4,8,16,32,64")]
        ratios: Vec<usize>,
    },
    /// Shape classification with and without attention.
    Classify,
    /// Write object models and seeded scenes as PLY plus pose files.
    GenData {
        #[arg(long, default_value_t = 9)]
        scenes: usize,
        #[arg(long, value_enum, default_value_t = Split::Eval)]
        split: Split,
    },
    /// Print the configuration schema with default values.
    Schema,
}

#[derive(Clone, Copy, ValueEnum)]
enum Sweep {
    Components,
    Ratios,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Eval,
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => RunConfig::from_toml_str(&fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    apply(&mut config, common)?;
    Ok(config)
}

fn apply(config: &mut RunConfig, common: &Common) -> Result<()> {
    for o in &common.overrides {
        config.set_str(o)?;
    }
    if let Some(out) = &common.out {
        config.output_dir = out.clone();
    }
    config.validate()
}

/// Checkpoint with `--set` overrides applied to its stored configuration.
fn load_model(path: &Path, common: &Common) -> Result<TrainedModel> {
    let mut ck = Checkpoint::load(path)?;
    let mut config: RunConfig = serde_json::from_value(ck.config.clone())
        .map_err(|e| Error::Checkpoint(format!("unreadable configuration: {e}")))?;
    apply(&mut config, common)?;
    ck.config = serde_json::to_value(&config)?;
    TrainedModel::from_checkpoint(&ck)
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), text)?;
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<ExitCode> {
    let common = &cli.common;
    match &cli.command {
        Command::Schema => {
            let defaults = RunConfig::default().to_pairs();
            for (key, kind, doc) in SCHEMA {
                let value = defaults.iter().find(|(k, _)| k == key).map(|(_, v)| v.to_string()).unwrap_or_default();
                println!("{key:<26} {kind:<6} {value:<12} {doc}");
            }
        }
        Command::Train { repeats } => {
            let config = load_config(common)?;
            let (outcome, aucs) = train_repeats(&config, *repeats)?;
            let dir = &config.output_dir;
            let ck = write_run_outputs(dir, &outcome)?;
            write(dir, "config.toml", &outcome.model.config.to_toml())?;
            if *repeats > 1 {
                log::info!("repeat AUCs: {aucs:?}");
            }
            let (u, r) = (&outcome.report.unrefined.mean, &outcome.report.refined.mean);
            println!(
                "mean error {:.4} m ({:.1}% of diameter), refined {:.4} m; AUC {:.3} -> {:.3}; checkpoint {}",
                u.mean_error,
                100.0 * u.relative_error,
                r.mean_error,
                u.auc,
                r.auc,
                ck.display()
            );
        }
        Command::Eval { checkpoint } => {
            let model = load_model(checkpoint, common)?;
            let scenes = eval_scenes(&model.config, &model.objects)?;
            let report = evaluate(&model, &scenes)?;
            let dir = &model.config.output_dir;
            write(dir, REPORT_JSON, &report.to_json()?)?;
            write(dir, REPORT_CSV, &report.to_csv())?;
            print!("{}", report.to_csv());
        }
        Command::Refine {
            checkpoint,
            cloud,
            object,
            init,
            iters,
        } => {
            let model = load_model(checkpoint, common)?;
            if *object >= model.objects.len() {
                return Err(Error::Config(format!(
                    "object {object} out of range: checkpoint has {} objects",
                    model.objects.len()
                ))
                .into());
            }
            let observed = read_cloud(cloud)?;
            let initial = match init {
                Some(p) => read_pose(p)?,
                None => model.estimate(&observed, *object)?,
            };
            let k = iters.unwrap_or(model.config.refine_iters);
            let refined = iterative_refine(&initial, &observed, &model.refiner_for(*object), k)?;
            fs::create_dir_all(&model.config.output_dir)?;
            let path = model.config.output_dir.join("pose.txt");
            write_pose(&path, &refined)?;
            println!("{}", fs::read_to_string(&path)?.trim_end());
        }
        Command::Ablate { sweep, ratios } => {
            let config = load_config(common)?;
            let spec = match sweep {
                Sweep::Components => AblationSpec::components(config.clone()),
                Sweep::Ratios => AblationSpec::reduction_ratios(config.clone(), ratios),
            };
            let table = run_ablation(&spec)?;
            write(&config.output_dir, "ablation.json", &table.to_json()?)?;
            write(&config.output_dir, "ablation.csv", &table.to_csv())?;
            print!("{}", table.to_csv());
            if table.failures > 0 {
                log::error!("{} arm(s) failed", table.failures);
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Classify => {
            let config = load_config(common)?;
            let report = classify_experiment(&config)?;
            write(&config.output_dir, "classify.json", &report.to_json()?)?;
            write(&config.output_dir, "classify.csv", &report.to_csv())?;
            print!("{}", report.to_csv());
        }
        Command::GenData { scenes, split } => {
            let config = load_config(common)?;
            let dir = &config.output_dir;
            fs::create_dir_all(dir)?;
            let objects = objects_for(&config)?;
            for o in &objects {
                let cloud = PointCloud {
                    points: o.points.clone(),
                    features: o.appearance.clone(),
                };
                write_cloud(&dir.join(format!("object_{}.ply", o.id)), &cloud)?;
            }
            for i in 0..*scenes {
                let scene = match split {
                    Split::Eval => eval_scene(&config, &objects, i)?,
                    Split::Train => training_scene(&config, &objects, 0, i)?,
                };
                write_cloud(&dir.join(format!("scene_{i:04}.ply")), &scene.sample.observed)?;
                write_pose(&dir.join(format!("scene_{i:04}_gt.txt")), &scene.sample.gt)?;
            }
            println!("wrote {} objects and {scenes} scenes to {}", objects.len(), dir.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Divergence { .. }) => EXIT_DIVERGENCE,
        Some(
            Error::Config(_)
            | Error::Parse { .. }
            | Error::MissingInput(_)
            | Error::Checkpoint(_)
            | Error::Contract(_)
            | Error::DegenerateScene { .. },
        ) => EXIT_VALIDATION,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(exit_code(&e))
        }
    }
}
