use std::fs::{self, File};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use densemtl_core::data::{save_dataset, synthetic_scene};
use densemtl_core::harness::{
    ablate, deterministic_requested, evaluate, gridsearch, load_runs, report, train, AblationAxis, DatasetSpec,
    ExperimentConfig, RunReport, WeightGrid,
};
use densemtl_core::metrics::{metric_rows, read_metric_csv, write_metric_csv};
use densemtl_core::model::Model;
use log::info;

#[derive(Parser)]
#[command(name = "densemtl", version, about = "Dense multi-task training at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on an on-disk dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Metric CSV of the single-task baselines; enables the delta.
        #[arg(long)]
        stl_baseline: Option<PathBuf>,
        /// Where to write the run report; printed to stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the metrics as a CSV usable by `--stl-baseline`.
        #[arg(long)]
        metrics_csv: Option<PathBuf>,
    },
    /// Train the MTL baseline for every weight vector of a grid.
    Gridsearch {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        stl_baseline: Option<PathBuf>,
        #[arg(long, default_value = "runs/gridsearch")]
        out: PathBuf,
    },
    /// Train every variant along one ablation axis.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// One of scales, fusion, attention, no_self_attention.
        #[arg(long)]
        axis: AblationAxis,
        #[arg(long)]
        stl_baseline: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Collect run reports below a directory into tables and plots.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic dataset to disk.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = 20.0)]
        d_far: f64,
    },
}

fn read_baselines(path: Option<&Path>) -> Result<Option<densemtl_core::metrics::TaskMetrics>> {
    path.map(|p| {
        let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
        read_metric_csv(f).with_context(|| format!("reading {}", p.display()))
    })
    .transpose()
}

fn summarize(rows: &[RunReport]) {
    for r in rows {
        let delta = r.delta.as_ref().map(|d| format!("{:+.2}", d.delta)).unwrap_or_else(|| "-".into());
        let metrics: Vec<String> = r.metrics.iter().map(|(t, v)| format!("{}={v:.4}", t.name())).collect();
        println!("{:24} delta {delta:>8}  {}", r.label, metrics.join(" "));
    }
}

fn run(cli: Cli) -> Result<()> {
    if deterministic_requested() {
        info!("deterministic kernels requested; all kernels are single-threaded and deterministic");
    }
    match cli.command {
        Command::Train { config, seed, out } => {
            let mut cfg = ExperimentConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let outcome = train(&cfg, Some(&out))?;
            summarize(std::slice::from_ref(&outcome.report));
            println!("wrote {}", out.display());
        }
        Command::Eval { ckpt, data, stl_baseline, out, metrics_csv } => {
            let model = Model::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let samples = DatasetSpec::Disk { root: data }.load(model.config())?;
            let baselines = read_baselines(stl_baseline.as_deref())?;
            let mut rep = evaluate(&model, &samples, baselines.as_ref())?;
            rep.label = ckpt.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or(rep.label);
            if let Some(p) = metrics_csv {
                write_metric_csv(File::create(&p)?, &metric_rows(&rep.metrics))?;
            }
            match out {
                Some(p) => {
                    rep.save(&p)?;
                    summarize(std::slice::from_ref(&rep));
                }
                None => println!("{}", serde_json::to_string_pretty(&rep)?),
            }
        }
        Command::Gridsearch { config, grid, stl_baseline, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let grid = WeightGrid::load(&grid)?;
            let baselines = read_baselines(stl_baseline.as_deref())?;
            let rows = gridsearch(&cfg, &grid, baselines.as_ref(), Some(&out.join("train")))?;
            report(&rows, &out)?;
            summarize(&rows);
            println!("best weights {:?}", rows[0].weights);
        }
        Command::Ablate { config, axis, stl_baseline, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = out.unwrap_or_else(|| PathBuf::from(format!("runs/ablate-{axis}")));
            let baselines = read_baselines(stl_baseline.as_deref())?;
            let rows = ablate(&cfg, axis, baselines.as_ref(), Some(&out.join("train")))?;
            report(&rows, &out)?;
            summarize(&rows);
        }
        Command::Report { runs, out } => {
            let rows = load_runs(&runs)?;
            if rows.is_empty() {
                bail!("no run reports found below {}", runs.display());
            }
            for p in report(&rows, &out)? {
                println!("{}", p.display());
            }
        }
        Command::Synth { out, count, size, seed, classes, d_far } => {
            let samples = (0..count as u64)
                .map(|i| synthetic_scene(seed.wrapping_add(i), size, classes, d_far))
                .collect::<densemtl_core::Result<Vec<_>>>()?;
            fs::create_dir_all(&out)?;
            save_dataset(&out, &samples, d_far)?;
            println!("wrote {count} scenes to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    run(Cli::parse())
}
