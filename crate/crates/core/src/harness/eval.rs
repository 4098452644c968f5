use std::time::Instant;

use log::warn;

use crate::data::{Batch, Sample};
use crate::error::{Error, Result};
use crate::losses::IGNORE_LABEL;
use crate::metrics::{angular_errors, edge_counts, f1_from_counts, Confusion, DeltaReport, TaskMetrics};
use crate::model::Model;
use crate::task::Task;
use crate::tensor::Tensor;

use super::config::sha256_hex;
use super::report::RunReport;

/// Per-pixel argmax over the channel axis of `[B, K, H, W]` logits.
pub fn argmax_channels(logits: &Tensor) -> Result<Vec<u8>> {
    let (b, k, h, w) = logits.dims4()?;
    if k > 256 {
        return Err(Error::shape("argmax", format!("{k} classes do not fit u8 labels")));
    }
    let p = h * w;
    let d = logits.data();
    let mut out = Vec::with_capacity(b * p);
    for n in 0..b {
        for i in 0..p {
            let mut best = 0;
            for c in 1..k {
                if d[(n * k + c) * p + i] > d[(n * k + best) * p + i] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}

/// Batch size of every metric pass, so that reported metrics do not depend
/// on the training batch size through summation order.
pub const EVAL_BATCH: usize = 8;

/// Final-output metrics over `samples`, in evaluation mode, `batch` images
/// at a time: mIoU (fraction), depth RMSE, mean angular error in degrees,
/// edge F1 at threshold 0.5.
pub fn compute_metrics(model: &Model, samples: &[Sample], batch: usize) -> Result<TaskMetrics> {
    if samples.is_empty() {
        return Err(Error::value("evaluate", "empty dataset"));
    }
    let tasks = model.tasks().to_vec();
    let mut conf = Confusion::new(model.config().num_classes, IGNORE_LABEL);
    let (mut se, mut px) = (0.0, 0usize);
    let (mut ang, mut npx) = (0.0, 0usize);
    let mut edges = (0, 0, 0);
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let b = Batch::from_samples(&refs)?;
        let out = model.predict(&b.images)?;
        for t in &tasks {
            let pred = &out.finals[t];
            match t {
                Task::Seg => conf.add(&argmax_channels(pred)?, &b.seg)?,
                Task::Depth => {
                    se += pred.data().iter().zip(b.depth.data()).map(|(p, g)| (p - g).powi(2)).sum::<f64>();
                    px += pred.numel();
                }
                Task::Normals => {
                    let e = angular_errors(pred, &b.normals)?;
                    ang += e.iter().sum::<f64>();
                    npx += e.len();
                }
                Task::Edges => {
                    let c = edge_counts(pred.data(), b.edges.data())?;
                    edges = (edges.0 + c.0, edges.1 + c.1, edges.2 + c.2);
                }
            }
        }
    }
    Ok(tasks
        .iter()
        .map(|&t| {
            let v = match t {
                Task::Seg => conf.miou(),
                Task::Depth => (se / px as f64).sqrt(),
                Task::Normals => ang / npx as f64,
                Task::Edges => f1_from_counts(edges),
            };
            (t, v)
        })
        .collect())
}

/// Delta against `baselines`, restricted to the tasks of `metrics`. `None`
/// without baselines; also `None`, with a warning, when a baseline is zero.
pub fn delta_against(metrics: &TaskMetrics, baselines: Option<&TaskMetrics>) -> Result<Option<DeltaReport>> {
    let Some(b) = baselines else { return Ok(None) };
    if metrics.keys().any(|t| b.get(t) == Some(&0.0)) {
        warn!("a baseline metric is zero; delta left undefined");
        return Ok(None);
    }
    DeltaReport::compute(metrics, b).map(Some)
}

/// Scores a trained model on `samples`.
pub fn evaluate(model: &Model, samples: &[Sample], baselines: Option<&TaskMetrics>) -> Result<RunReport> {
    let start = Instant::now();
    let metrics = compute_metrics(model, samples, EVAL_BATCH)?;
    let delta = delta_against(&metrics, baselines)?;
    let cfg = serde_json::to_string(model.config())?;
    Ok(RunReport {
        label: model.config().architecture.name().into(),
        architecture: model.config().architecture,
        tasks: model.tasks().to_vec(),
        weights: Vec::new(),
        parameters: model.parameter_count(),
        exchange_parameters: model.exchange_parameter_count(),
        config_hash: sha256_hex(cfg.as_bytes()),
        seed: None,
        iterations: 0,
        deterministic: super::deterministic_requested(),
        losses: Vec::new(),
        task_losses: Default::default(),
        disc_losses: Vec::new(),
        metrics,
        delta,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}
