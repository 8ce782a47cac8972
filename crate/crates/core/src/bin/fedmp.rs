use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use fedmp::data::write_fmeb;
use fedmp::experiment::{
    load_data, read_training, run_ablation, run_experiment, run_inference, run_sweep, run_training,
    write_training, DataSource, ExperimentConfig, Stage, StageError, SweepAxis,
};
use fedmp::Error;

#[derive(Parser)]
#[command(name = "fedmp", version, about = "Federated adaptation with test-time prototyping over embedding files")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment configuration; unset fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    no_adaptive_agg: bool,
    #[arg(long)]
    no_prototyping: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic images.fmeb and prompts.fmeb into a directory.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Federated training for one seed; writes manifest.json and per-client FMEB files.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate stored client updates for the unseen classes and classify the test stream.
    Infer {
        #[command(flatten)]
        common: Common,
        /// Directory written by `train`.
        #[arg(long)]
        from: PathBuf,
        /// Report path, `-` for standard output.
        #[arg(long, default_value = "-")]
        out: String,
    },
    /// Train and infer end to end over all repeats.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "-")]
        out: String,
    },
    /// One experiment per value along an axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated values; for `alpha`, the `lo,hi` search range.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        #[arg(long, default_value = "-")]
        out: String,
    },
    /// Full method and the three ablation variants.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "-")]
        out: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Shots,
    Clients,
    EpsilonFraction,
    Alpha,
}

type CliResult<T> = Result<T, StageError>;

fn fail(stage: Stage, source: Error) -> StageError {
    StageError { stage, source }
}

fn load_config(common: &Common) -> CliResult<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| fail(Stage::Config, e))?,
        None => ExperimentConfig::default(),
    };
    apply_overrides(&mut cfg, common);
    Ok(cfg)
}

fn apply_overrides(cfg: &mut ExperimentConfig, common: &Common) {
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(r) = common.repeats {
        cfg.repeats = r;
    }
    cfg.ablation.no_adaptive_aggregation |= common.no_adaptive_agg;
    cfg.ablation.no_prototyping |= common.no_prototyping;
}

fn emit<T: Serialize>(value: &T, out: &str) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| fail(Stage::Output, e.into()))?;
    if out == "-" {
        println!("{text}");
        Ok(())
    } else {
        std::fs::write(out, text + "\n").map_err(|e| fail(Stage::Output, Error::Io { path: out.into(), source: e }))?;
        eprintln!("report written to {out}");
        Ok(())
    }
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| fail(Stage::Output, Error::Io { path: dir.into(), source: e }))
}

fn sweep_axis(axis: Axis, values: &[f64]) -> CliResult<SweepAxis> {
    let counts = |name: &str| -> CliResult<Vec<usize>> {
        values
            .iter()
            .map(|v| {
                if *v >= 0.0 && v.fract() == 0.0 {
                    Ok(*v as usize)
                } else {
                    Err(fail(Stage::Config, Error::Config(format!("{name} values must be whole numbers, got {v}"))))
                }
            })
            .collect()
    };
    if values.is_empty() {
        return Err(fail(Stage::Config, Error::Config("--values is required".into())));
    }
    Ok(match axis {
        Axis::Shots => SweepAxis::Shots(counts("shots")?),
        Axis::Clients => SweepAxis::Clients(counts("clients")?),
        Axis::EpsilonFraction => SweepAxis::EpsilonFraction(values.to_vec()),
        Axis::Alpha => match values {
            [lo, hi] => SweepAxis::Alpha { lo: *lo, hi: *hi },
            _ => return Err(fail(Stage::Config, Error::Config("alpha sweep takes --values lo,hi".into()))),
        },
    })
}

fn execute(cli: Cli) -> CliResult<()> {
    let started = Instant::now();
    match cli.command {
        Command::Gen { common, out } => {
            let cfg = load_config(&common)?;
            if !matches!(cfg.data, DataSource::Synthetic(_)) {
                return Err(fail(Stage::Config, Error::Config("gen needs a synthetic data source".into())));
            }
            let data = load_data(&cfg.data, cfg.seed).map_err(|e| fail(Stage::Data, e))?;
            ensure_dir(&out)?;
            let prompts = fedmp::data::EmbeddingDataset::from_prompts(data.images.class_names.clone(), &data.prompts)
                .map_err(|e| fail(Stage::Data, e))?;
            write_fmeb(&data.images, out.join("images.fmeb")).map_err(|e| fail(Stage::Output, e))?;
            write_fmeb(&prompts, out.join("prompts.fmeb")).map_err(|e| fail(Stage::Output, e))?;
            eprintln!(
                "wrote {} image records and {} prompts (dim {}) to {}",
                data.images.records.len(),
                prompts.records.len(),
                data.images.dim,
                out.display()
            );
        }
        Command::Train { common, out } => {
            let cfg = load_config(&common)?;
            eprintln!("training with seed {}", cfg.seed);
            let (cfg, fed) = run_training(&cfg)?;
            write_training(&out, &cfg, &fed).map_err(|e| fail(Stage::Output, e))?;
            eprintln!("wrote {} client updates to {}", fed.updates.len(), out.display());
        }
        Command::Infer { common, from, out } => {
            let (manifest, updates) = read_training(&from).map_err(|e| fail(Stage::Data, e))?;
            let mut cfg = match &common.config {
                Some(path) => ExperimentConfig::load(path).map_err(|e| fail(Stage::Config, e))?,
                None => manifest.config.clone(),
            };
            apply_overrides(&mut cfg, &common);
            eprintln!("inference over {} client updates", updates.len());
            emit(&run_inference(&cfg, &manifest, updates)?, &out)?;
        }
        Command::Run { common, out } => {
            let cfg = load_config(&common)?;
            eprintln!("running {} repeats from seed {}", cfg.repeats, cfg.seed);
            let report = run_experiment(&cfg)?;
            let acc = report.summary["accuracy"];
            eprintln!("accuracy {:.4} ± {:.4}", acc.mean, acc.std);
            emit(&report, &out)?;
        }
        Command::Sweep { common, axis, values, out } => {
            let cfg = load_config(&common)?;
            let axis = sweep_axis(axis, &values)?;
            eprintln!("sweeping {axis:?}");
            let report = run_sweep(&cfg, &axis)?;
            for p in &report.points {
                eprintln!("  {:>6} accuracy {:.4}", p.value, p.report.mean_accuracy());
            }
            if let Some(a) = report.best_alpha {
                eprintln!("best alpha {a}");
            }
            emit(&report, &out)?;
        }
        Command::Ablate { common, out } => {
            let cfg = load_config(&common)?;
            let variants = run_ablation(&cfg)?;
            for (name, r) in &variants {
                eprintln!("  {name:<40} accuracy {:.4}", r.mean_accuracy());
            }
            let map: serde_json::Map<String, serde_json::Value> = variants
                .into_iter()
                .map(|(n, r)| serde_json::to_value(r).map(|v| (n, v)))
                .collect::<Result<_, _>>()
                .map_err(|e| fail(Stage::Output, e.into()))?;
            emit(&map, &out)?;
        }
    }
    eprintln!("done in {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e.source);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
