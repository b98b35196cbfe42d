//! `gbmdebug`: data generation, confounder experiments, reports and the API server.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage or config errors.

use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use gbmdebug::experiment::{run_experiment, Condition, ExperimentConfig};
use gbmdebug::persist::{load_checkpoint, write_atomic};
use gbmdebug::pnm::encode_ppm;
use gbmdebug::render::concept_panel;
use gbmdebug::report::write_report;
use gbmdebug::shapes::{generate, DataConfig, Dataset};
use gbmdebug_service::{serve, ServiceConfig};

#[derive(Parser, Debug)]
#[command(name = "gbmdebug", version, about = "Debug prototype-concept models with human feedback")]
struct Cli {
    /// JSON file with `data` and `experiment` sections; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a confounded shapes dataset.
    GenData {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        classes: Option<usize>,
        /// Training images per class.
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        confounded_class: Option<usize>,
    },
    /// Train, give scripted-oracle feedback, refine, and write the run directory.
    Experiment {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// One of none, attr, aggr.
        #[arg(long)]
        condition: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize run directories as Markdown.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "report.md")]
        out: PathBuf,
    },
    /// Write one panel per concept of a checkpoint.
    RenderPrototypes {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pixel magnification of each tile.
        #[arg(long, default_value_t = 4)]
        scale: usize,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "gbmdebug-data")]
        root: PathBuf,
        #[arg(long, default_value_t = IpAddr::V4(Ipv4Addr::LOCALHOST))]
        host: IpAddr,
    },
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    data: DataConfig,
    experiment: ExperimentConfig,
}

/// Bad input from the user rather than a failure while working.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read(path).map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
    Ok(serde_json::from_slice(&text).map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())))?)
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.join("manifest.json").is_file() {
        return Err(UsageError(format!("{} is not a dataset directory (no manifest.json)", dir.display())).into());
    }
    Dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn gen_data(data: DataConfig, out: &Path) -> Result<()> {
    data.validate()?;
    let dataset = generate(&data)?;
    dataset.save(out).with_context(|| format!("writing {}", out.display()))?;
    println!(
        "wrote {} train / {} validation / {} test images to {} (hash {})",
        dataset.train.len(),
        dataset.validation.len(),
        dataset.test.len(),
        out.display(),
        dataset.hash()
    );
    Ok(())
}

fn experiment(mut config: ExperimentConfig, data: &Path, seed: u64, condition: &str, out: &Path) -> Result<()> {
    let condition: Condition = condition.parse()?;
    let dataset = Arc::new(load_dataset(data)?);
    config.model.num_classes = dataset.config().classes;
    let run = run_experiment(&dataset, &config, condition, seed, &mut |r| {
        tracing::info!(
            round = r.round,
            epoch = r.epoch,
            phase = ?r.phase,
            loss = r.train_loss,
            train_acc = r.train_accuracy,
            test_acc = r.test_accuracy,
            reliance = r.confound_reliance,
        );
    })?;
    run.write(out, &dataset).with_context(|| format!("writing {}", out.display()))?;
    let s = &run.summary;
    println!(
        "{condition} seed {seed}: marked {:?}, reliance {:.3} -> {:.3}, test accuracy {:.3} -> {:.3}, best IoU {:.3}",
        s.marked_concepts,
        s.initial.confound_reliance,
        s.last.confound_reliance,
        s.initial.test_accuracy,
        s.last.test_accuracy,
        s.best_confounded_iou()
    );
    Ok(())
}

fn render_prototypes(checkpoint: &Path, data: &Path, out: &Path, scale: usize) -> Result<()> {
    if scale == 0 {
        return Err(UsageError("--scale must be at least 1".into()).into());
    }
    let model = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let dataset = load_dataset(data)?;
    std::fs::create_dir_all(out)?;
    for j in 0..model.k() {
        let panel = concept_panel(&model, j, &dataset.train)?.compose(scale)?;
        write_atomic(&out.join(format!("concept{j}.ppm")), &encode_ppm(&panel))?;
    }
    println!("wrote {} panels to {}", model.k(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let file = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::GenData {
            seed,
            out,
            classes,
            per_class,
            confounded_class,
        } => {
            let mut data = file.data;
            data.seed = seed.unwrap_or(data.seed);
            data.classes = classes.unwrap_or(data.classes);
            data.train_per_class = per_class.unwrap_or(data.train_per_class);
            data.confounded_class = confounded_class.unwrap_or(data.confounded_class);
            gen_data(data, &out)
        }
        Command::Experiment {
            data,
            seed,
            condition,
            out,
        } => experiment(file.experiment, &data, seed, &condition, &out),
        Command::Report { runs, out } => {
            let loaded = write_report(&runs, &out)?;
            println!("wrote {} ({} runs)", out.display(), loaded.len());
            Ok(())
        }
        Command::RenderPrototypes {
            checkpoint,
            data,
            out,
            scale,
        } => render_prototypes(&checkpoint, &data, &out, scale),
        Command::Serve { port, root, host } => {
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(serve(ServiceConfig {
                data_root: root,
                addr: SocketAddr::new(host, port),
            }))?;
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.is::<UsageError>() {
        return 2;
    }
    match err.downcast_ref::<gbmdebug::Error>() {
        Some(
            gbmdebug::Error::Config(_)
            | gbmdebug::Error::MissingSummaries(_)
            | gbmdebug::Error::Dimension(_)
            | gbmdebug::Error::InvalidIndex { .. },
        ) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_max_level(tracing::Level::INFO)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
