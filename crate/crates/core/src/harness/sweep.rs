use std::cmp::Ordering;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::info;

use crate::attention::{AttentionKind, FusionKind};
use crate::error::{Error, Result};
use crate::metrics::TaskMetrics;
use crate::model::{Architecture, ModelConfig};

use super::config::{ExperimentConfig, WeightGrid};
use super::report::RunReport;
use super::train::train_with_baselines;

/// Trains one single-task network per task of `cfg` with otherwise
/// identical settings and returns each network's metric.
pub fn stl_baselines(cfg: &ExperimentConfig) -> Result<TaskMetrics> {
    let mut out = TaskMetrics::new();
    for &t in &cfg.model.tasks {
        let mut c = cfg.clone();
        c.name = format!("stl-{}", t.name());
        c.model.architecture = Architecture::Stl;
        c.model.tasks = vec![t];
        c.model.decoder = None;
        c.weights = Some(vec![1.0]);
        let run = train_with_baselines(&c, None, None)?;
        out.insert(t, run.report.metrics[&t]);
    }
    Ok(out)
}

fn sub_dir(out: Option<&Path>, name: &str) -> Option<std::path::PathBuf> {
    out.map(|d| d.join(name))
}

/// Descending delta, ties and missing deltas broken by label so that the
/// order does not depend on the input order.
fn by_delta(a: &RunReport, b: &RunReport) -> Ordering {
    let d = |r: &RunReport| r.delta.as_ref().map(|d| d.delta);
    match (d(a), d(b)) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => Ordering::Equal,
    }
    .then_with(|| a.label.cmp(&b.label))
}

fn weight_label(w: &[f64]) -> String {
    format!("w=[{}]", w.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","))
}

/// Trains the MTL baseline once per weight vector of `grid` and returns the
/// runs sorted by delta, best first. STL baselines are trained when not
/// given. Every run starts from the same seed, so the table does not depend
/// on the order of the grid.
pub fn gridsearch(
    cfg: &ExperimentConfig,
    grid: &WeightGrid,
    baselines: Option<&TaskMetrics>,
    out_dir: Option<&Path>,
) -> Result<Vec<RunReport>> {
    if grid.weights.is_empty() {
        return Err(Error::Config("empty weight grid".into()));
    }
    let mut base = cfg.clone();
    base.model.architecture = Architecture::Mtl;
    base.model.decoder = None;
    base.validate()?;
    let owned;
    let baselines = match baselines {
        Some(b) => b,
        None => {
            owned = stl_baselines(&base)?;
            &owned
        }
    };
    let mut rows = Vec::with_capacity(grid.weights.len());
    for w in &grid.weights {
        let mut c = base.clone();
        c.weights = Some(w.clone());
        c.name = weight_label(w);
        info!("grid point {}", c.name);
        let dir = sub_dir(out_dir, &c.name);
        rows.push(train_with_baselines(&c, dir.as_deref(), Some(baselines))?.report);
    }
    rows.sort_by(by_delta);
    Ok(rows)
}

/// Ablation axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    /// Exchange-block positions.
    Scales,
    Fusion,
    Attention,
    NoSelfAttention,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 4] = [AblationAxis::Scales, AblationAxis::Fusion, AblationAxis::Attention, AblationAxis::NoSelfAttention];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Scales => "scales",
            AblationAxis::Fusion => "fusion",
            AblationAxis::Attention => "attention",
            AblationAxis::NoSelfAttention => "no_self_attention",
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            Error::Config(format!("unknown ablation axis `{s}`; expected one of scales, fusion, attention, no_self_attention"))
        })
    }
}

/// Block positions compared along the scales axis, coarsest first.
pub const SCALE_VARIANTS: [&[usize]; 7] = [&[4], &[3], &[2], &[1], &[3, 1], &[3, 2, 1], &[4, 3, 2, 1]];

/// Labelled model variants along `axis`, derived from `model` with the
/// architecture set to ours.
pub fn ablation_variants(model: &ModelConfig, axis: AblationAxis) -> Result<Vec<(String, ModelConfig)>> {
    let mut base = model.clone();
    base.architecture = Architecture::Ours;
    base.decoder = None;
    let with = |f: &dyn Fn(&mut ModelConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    let rows: Vec<(String, ModelConfig)> = match axis {
        AblationAxis::Scales => {
            if base.encoder.stages() < 4 {
                return Err(Error::Config(format!("the scales axis needs 4 encoder stages, got {}", base.encoder.stages())));
            }
            SCALE_VARIANTS
                .iter()
                .map(|s| {
                    let label = s.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("+");
                    (format!("scales={label}"), with(&|c| c.scales = s.iter().copied().collect()))
                })
                .collect()
        }
        AblationAxis::Fusion => [FusionKind::Concat, FusionKind::Prod, FusionKind::Add]
            .into_iter()
            .map(|f| (format!("fusion={}", f.name()), with(&|c| c.fusion = f)))
            .collect(),
        AblationAxis::Attention => [AttentionKind::Spatial, AttentionKind::Channel, AttentionKind::Both]
            .into_iter()
            .map(|a| (format!("attention={}", a.name()), with(&|c| c.xtam.attention = a)))
            .collect(),
        AblationAxis::NoSelfAttention => [true, false]
            .into_iter()
            .map(|on| (format!("self_attention={on}"), with(&|c| c.xtam.self_attention = on)))
            .collect(),
    };
    for (_, c) in &rows {
        c.validate()?;
    }
    Ok(rows)
}

/// Trains every variant of `axis` and returns the rows in table order.
pub fn ablate(
    cfg: &ExperimentConfig,
    axis: AblationAxis,
    baselines: Option<&TaskMetrics>,
    out_dir: Option<&Path>,
) -> Result<Vec<RunReport>> {
    let variants = ablation_variants(&cfg.model, axis)?;
    let owned;
    let baselines = match baselines {
        Some(b) => b,
        None => {
            owned = stl_baselines(cfg)?;
            &owned
        }
    };
    let mut rows = Vec::with_capacity(variants.len());
    for (label, model) in variants {
        let mut c = cfg.clone();
        c.model = model;
        c.name = label;
        info!("ablation row {}", c.name);
        let dir = sub_dir(out_dir, &c.name);
        rows.push(train_with_baselines(&c, dir.as_deref(), Some(baselines))?.report);
    }
    Ok(rows)
}
