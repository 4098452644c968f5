use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{DeltaReport, TaskMetrics};
use crate::model::Architecture;
use crate::task::Task;

/// Outcome of one training or evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub label: String,
    pub architecture: Architecture,
    pub tasks: Vec<Task>,
    /// Loss weights in `tasks` order; empty for evaluation-only reports.
    pub weights: Vec<f64>,
    pub parameters: usize,
    pub exchange_parameters: usize,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub iterations: usize,
    pub deterministic: bool,
    /// Total objective per iteration.
    pub losses: Vec<f64>,
    /// Final-output supervised loss per task and iteration.
    pub task_losses: BTreeMap<Task, Vec<f64>>,
    /// Discriminator loss per iteration; empty without adaptation.
    pub disc_losses: Vec<f64>,
    pub metrics: TaskMetrics,
    pub delta: Option<DeltaReport>,
    pub wall_time_s: f64,
}

impl RunReport {
    /// True when the stored delta agrees with its stored entries and with
    /// the stored metrics.
    pub fn delta_consistent(&self) -> Result<bool> {
        let Some(d) = &self.delta else { return Ok(true) };
        let same_metrics = d.entries.iter().all(|e| self.metrics.get(&e.task) == Some(&e.model));
        Ok(same_metrics && (DeltaReport::recompute(&d.entries)? - d.delta).abs() <= 1e-12 * d.delta.abs().max(1.0))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Every `*.json` run report below `dir`, in path order. Other JSON files
/// are skipped with a warning.
pub fn load_runs(dir: &Path) -> Result<Vec<RunReport>> {
    let mut files = Vec::new();
    collect_json(dir, &mut files)?;
    files.sort();
    let mut runs = Vec::new();
    for f in files {
        match RunReport::load(&f) {
            Ok(r) => runs.push(r),
            Err(e) => warn!("skipping {}: {e}", f.display()),
        }
    }
    Ok(runs)
}

fn collect_json(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_json(&path, out)?;
        } else if path.extension().is_some_and(|e| e == "json") {
            out.push(path);
        }
    }
    Ok(())
}

/// Column name of a task metric, e.g. `seg_miou`.
pub fn metric_column(t: Task) -> String {
    format!("{}_{}", t.name(), t.metric())
}

/// One row per run: label, architecture, parameter counts, weights, one
/// column per task metric (blank where a run lacks the task) and delta.
pub fn write_table(runs: &[RunReport], path: &Path) -> Result<()> {
    let tasks: Vec<Task> = Task::ALL.into_iter().filter(|t| runs.iter().any(|r| r.metrics.contains_key(t))).collect();
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = ["label", "architecture", "parameters", "exchange_parameters", "weights"].map(String::from).into();
    header.extend(tasks.iter().map(|&t| metric_column(t)));
    header.push("delta".into());
    w.write_record(&header)?;
    for r in runs {
        let mut row = vec![
            r.label.clone(),
            r.architecture.name().to_string(),
            r.parameters.to_string(),
            r.exchange_parameters.to_string(),
            r.weights.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" "),
        ];
        row.extend(tasks.iter().map(|t| r.metrics.get(t).map(|v| format!("{v:.6}")).unwrap_or_default()));
        row.push(r.delta.as_ref().map(|d| format!("{:.4}", d.delta)).unwrap_or_default());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Long-format loss history: `label,iteration,total,<task>...`.
pub fn write_losses(runs: &[RunReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = ["label", "iteration", "total"].map(String::from).into();
    header.extend(Task::ALL.iter().map(|t| t.name().to_string()));
    header.push("discriminator".into());
    w.write_record(&header)?;
    for r in runs {
        for (i, l) in r.losses.iter().enumerate() {
            let mut row = vec![r.label.clone(), i.to_string(), l.to_string()];
            row.extend(Task::ALL.iter().map(|t| r.task_losses.get(t).and_then(|v| v.get(i)).map(|v| v.to_string()).unwrap_or_default()));
            row.push(r.disc_losses.get(i).map(|v| v.to_string()).unwrap_or_default());
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

const COLORS: [RGBColor; 8] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
    RGBColor(227, 119, 194),
    RGBColor(127, 127, 127),
];

fn plot_err<E: std::error::Error + Send + Sync>(e: DrawingAreaErrorKind<E>) -> Error {
    Error::Serialization(format!("plot: {e}"))
}

// Plots carry no text so that no font backend is needed; series colours
// follow the row order of table.csv.

/// log10 of the total loss per iteration, one line per run.
pub fn plot_losses(runs: &[RunReport], path: &Path) -> Result<()> {
    let root = BitMapBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let curves: Vec<Vec<(f64, f64)>> = runs
        .iter()
        .map(|r| r.losses.iter().enumerate().filter(|(_, l)| **l > 0.0).map(|(i, l)| (i as f64, l.log10())).collect())
        .collect();
    let pts = curves.iter().flatten();
    let xmax = pts.clone().map(|p| p.0).fold(1.0, f64::max);
    let (ymin, ymax) = pts.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1), b.max(p.1)));
    let (ymin, ymax) = if ymin.is_finite() { (ymin - 0.1, ymax + 0.1) } else { (0.0, 1.0) };
    let mut chart = ChartBuilder::on(&root).margin(20).build_cartesian_2d(0.0..xmax, ymin..ymax).map_err(plot_err)?;
    for (k, c) in curves.into_iter().enumerate() {
        chart.draw_series(LineSeries::new(c, COLORS[k % COLORS.len()].stroke_width(2))).map_err(plot_err)?;
    }
    root.present().map_err(plot_err)?;
    Ok(())
}

/// One panel per task metric; one bar per run, scaled to the panel maximum.
pub fn plot_metric_bars(runs: &[RunReport], path: &Path) -> Result<()> {
    let tasks: Vec<Task> = Task::ALL.into_iter().filter(|t| runs.iter().any(|r| r.metrics.contains_key(t))).collect();
    let root = BitMapBackend::new(path, (300 * tasks.len().max(1) as u32, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let panels = root.split_evenly((1, tasks.len().max(1)));
    for (panel, t) in panels.iter().zip(&tasks) {
        let vals: Vec<f64> = runs.iter().map(|r| r.metrics.get(t).copied().unwrap_or(0.0)).collect();
        let top = vals.iter().copied().fold(0.0, f64::max).max(1e-12) * 1.05;
        let mut chart =
            ChartBuilder::on(panel).margin(15).build_cartesian_2d(0.0..runs.len().max(1) as f64, 0.0..top).map_err(plot_err)?;
        chart
            .draw_series(vals.iter().enumerate().map(|(k, &v)| {
                Rectangle::new([(k as f64 + 0.1, 0.0), (k as f64 + 0.9, v)], COLORS[k % COLORS.len()].filled())
            }))
            .map_err(plot_err)?;
        panel.draw(&PathElement::new(vec![(0, 0), (0, 399)], BLACK)).map_err(plot_err)?;
    }
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Writes `table.csv`, `losses.csv`, `loss_curves.png`, `metrics.png` and one
/// JSON file per run under `out_dir`. Returns the paths written.
pub fn report(runs: &[RunReport], out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let table = out_dir.join("table.csv");
    write_table(runs, &table)?;
    written.push(table);
    let losses = out_dir.join("losses.csv");
    write_losses(runs, &losses)?;
    written.push(losses);
    if !runs.is_empty() {
        let curves = out_dir.join("loss_curves.png");
        plot_losses(runs, &curves)?;
        written.push(curves);
        let bars = out_dir.join("metrics.png");
        plot_metric_bars(runs, &bars)?;
        written.push(bars);
    }
    let runs_dir = out_dir.join("runs");
    fs::create_dir_all(&runs_dir)?;
    for (k, r) in runs.iter().enumerate() {
        let p = runs_dir.join(format!("{k:03}-{}.json", sanitize(&r.label)));
        r.save(&p)?;
        written.push(p);
    }
    Ok(written)
}

fn sanitize(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}
