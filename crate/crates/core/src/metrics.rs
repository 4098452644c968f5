//! Single-task evaluation metrics and the multi-task delta metric.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::{Direction, Task};
use crate::tensor::Tensor;

/// Threshold on edge probabilities for F1.
pub const EDGE_THRESHOLD: f64 = 0.5;

/// Accumulates a confusion matrix across images.
#[derive(Clone, Debug)]
pub struct Confusion {
    k: usize,
    ignore: u8,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(num_classes: usize, ignore: u8) -> Self {
        Self { k: num_classes, ignore, counts: vec![0; num_classes * num_classes] }
    }

    pub fn add(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape("confusion", format!("{} predictions for {} labels", pred.len(), gt.len())));
        }
        for (&p, &t) in pred.iter().zip(gt) {
            if t == self.ignore {
                continue;
            }
            let (p, t) = (p as usize, t as usize);
            if p >= self.k || t >= self.k {
                return Err(Error::value("confusion", format!("class {} outside [0, {})", p.max(t), self.k)));
            }
            self.counts[t * self.k + p] += 1;
        }
        Ok(())
    }

    /// Mean IoU over classes that occur in the ground truth; a class that is
    /// only predicted still costs IoU through the false positives it takes
    /// from real classes. 1.0 when no labelled pixel was seen.
    pub fn miou(&self) -> f64 {
        let k = self.k;
        let mut sum = 0.0;
        let mut n = 0;
        for c in 0..k {
            let tp = self.counts[c * k + c];
            let gt_c: u64 = (0..k).map(|p| self.counts[c * k + p]).sum();
            let pred_c: u64 = (0..k).map(|t| self.counts[t * k + c]).sum();
            if gt_c > 0 {
                sum += tp as f64 / (gt_c + pred_c - tp) as f64;
                n += 1;
            }
        }
        if n == 0 {
            1.0
        } else {
            sum / n as f64
        }
    }
}

pub fn miou(pred: &[u8], gt: &[u8], num_classes: usize, ignore: u8) -> Result<f64> {
    let mut c = Confusion::new(num_classes, ignore);
    c.add(pred, gt)?;
    Ok(c.miou())
}

/// Root mean squared error.
pub fn rmse(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::shape("rmse", format!("{} vs {}", pred.len(), gt.len())));
    }
    let se: f64 = pred.iter().zip(gt).map(|(p, t)| (p - t).powi(2)).sum();
    Ok((se / pred.len() as f64).sqrt())
}

/// Per-pixel angles in degrees between `[B, 3, H, W]` normal maps.
pub fn angular_errors(pred: &Tensor, gt: &Tensor) -> Result<Vec<f64>> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape("angular_error", format!("{:?} vs {:?}", pred.shape(), gt.shape())));
    }
    let (b, c, h, w) = pred.dims4()?;
    if c != 3 {
        return Err(Error::shape("angular_error", format!("{c} channels")));
    }
    let p = h * w;
    let mut out = Vec::with_capacity(b * p);
    for n in 0..b {
        for i in 0..p {
            let v = |t: &Tensor, ch: usize| t.data()[(n * 3 + ch) * p + i];
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for ch in 0..3 {
                dot += v(pred, ch) * v(gt, ch);
                na += v(pred, ch).powi(2);
                nb += v(gt, ch).powi(2);
            }
            let cos = if na == 0.0 || nb == 0.0 { 0.0 } else { dot / (na.sqrt() * nb.sqrt()) };
            out.push(cos.clamp(-1.0, 1.0).acos().to_degrees());
        }
    }
    Ok(out)
}

pub fn mean_angular_error(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let e = angular_errors(pred, gt)?;
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

/// Counts of `(true positive, false positive, false negative)` edges.
pub fn edge_counts(prob: &[f64], gt: &[f64]) -> Result<(u64, u64, u64)> {
    if prob.len() != gt.len() {
        return Err(Error::shape("f1", format!("{} vs {}", prob.len(), gt.len())));
    }
    let mut c = (0, 0, 0);
    for (&p, &t) in prob.iter().zip(gt) {
        match (p >= EDGE_THRESHOLD, t > 0.5) {
            (true, true) => c.0 += 1,
            (true, false) => c.1 += 1,
            (false, true) => c.2 += 1,
            (false, false) => {}
        }
    }
    Ok(c)
}

/// F1 from edge counts; 1.0 when there are neither predicted nor true edges.
pub fn f1_from_counts((tp, fp, fneg): (u64, u64, u64)) -> f64 {
    if tp + fp + fneg == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
    }
}

pub fn f1(prob: &[f64], gt: &[f64]) -> Result<f64> {
    Ok(f1_from_counts(edge_counts(prob, gt)?))
}

/// `(1/n) sum_i (-1)^{g_i} (m_i - b_i) / b_i * 100`.
pub fn delta_metric(m: &[f64], b: &[f64], g: &[Direction]) -> Result<f64> {
    if m.len() != b.len() || m.len() != g.len() || m.is_empty() {
        return Err(Error::shape("delta_metric", format!("{} metrics, {} baselines, {} directions", m.len(), b.len(), g.len())));
    }
    let mut sum = 0.0;
    for ((mi, bi), gi) in m.iter().zip(b).zip(g) {
        if *bi == 0.0 {
            return Err(Error::value("delta_metric", "zero baseline"));
        }
        sum += gi.sign() * (mi - bi) / bi;
    }
    Ok(sum / m.len() as f64 * 100.0)
}

/// One metric per task.
pub type TaskMetrics = BTreeMap<Task, f64>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaEntry {
    pub task: Task,
    pub metric: String,
    pub model: f64,
    pub baseline: f64,
    pub direction: Direction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub entries: Vec<DeltaEntry>,
    /// Percent.
    pub delta: f64,
}

impl DeltaReport {
    /// Delta over every task of `model`; each must have a baseline.
    pub fn compute(model: &TaskMetrics, baseline: &TaskMetrics) -> Result<Self> {
        let mut entries = Vec::with_capacity(model.len());
        for (&task, &m) in model {
            let b = *baseline.get(&task).ok_or_else(|| Error::Config(format!("no baseline for task `{task}`")))?;
            entries.push(DeltaEntry { task, metric: task.metric().into(), model: m, baseline: b, direction: task.direction() });
        }
        let delta = Self::recompute(&entries)?;
        Ok(Self { entries, delta })
    }

    pub fn recompute(entries: &[DeltaEntry]) -> Result<f64> {
        let m: Vec<f64> = entries.iter().map(|e| e.model).collect();
        let b: Vec<f64> = entries.iter().map(|e| e.baseline).collect();
        let g: Vec<Direction> = entries.iter().map(|e| e.direction).collect();
        delta_metric(&m, &b, &g)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub task: Task,
    pub metric: String,
    pub value: f64,
    pub direction: Direction,
}

pub fn metric_rows(metrics: &TaskMetrics) -> Vec<MetricRow> {
    metrics
        .iter()
        .map(|(&task, &value)| MetricRow { task, metric: task.metric().into(), value, direction: task.direction() })
        .collect()
}

/// Writes `task,metric,value,direction` rows with a header.
pub fn write_metric_csv<W: Write>(out: W, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metric_csv<R: std::io::Read>(input: R) -> Result<TaskMetrics> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = TaskMetrics::new();
    for row in r.deserialize() {
        let row: MetricRow = row?;
        out.insert(row.task, row.value);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let seg = [0u8, 1, 2, 1];
        assert_eq!(miou(&seg, &seg, 3, 255).unwrap(), 1.0);
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        let n = Tensor::new(vec![1, 3, 1, 2], vec![0.0, 0.6, 0.0, 0.0, -1.0, -0.8]).unwrap();
        assert!(mean_angular_error(&n, &n).unwrap() < 1e-6);
        assert_eq!(f1(&[0.9, 0.1], &[1.0, 0.0]).unwrap(), 1.0);
    }

    #[test]
    fn two_class_one_wrong_pixel() {
        // gt: 0 0 1 1, pred: 0 1 1 1 -> class 0 IoU 1/2, class 1 IoU 2/3
        let v = miou(&[0, 1, 1, 1], &[0, 0, 1, 1], 2, 255).unwrap();
        assert!((v - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn only_ground_truth_classes_are_averaged() {
        let v = miou(&[0, 0, 255], &[0, 0, 255], 5, 255).unwrap();
        assert_eq!(v, 1.0);
        // class 2 is predicted but absent from gt: it is skipped, yet its
        // false positive halves the IoU of class 0
        let v = miou(&[0, 2], &[0, 0], 3, 255).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
        assert_eq!(miou(&[255], &[255], 2, 255).unwrap(), 1.0);
    }

    #[test]
    fn uniform_rotation_gives_its_angle() {
        let t = 10f64.to_radians();
        let gt = Tensor::new(vec![1, 3, 1, 2], vec![0.0, 0.0, 0.0, 0.0, -1.0, -1.0]).unwrap();
        let pred = Tensor::new(vec![1, 3, 1, 2], vec![t.sin(), 0.0, 0.0, t.sin(), -t.cos(), -t.cos()]).unwrap();
        assert!((mean_angular_error(&pred, &gt).unwrap() - 10.0).abs() < 1e-9);
    }

    #[test]
    fn delta_examples() {
        let g = [Direction::Higher, Direction::Lower];
        assert_eq!(delta_metric(&[1.0, 2.0], &[1.0, 2.0], &g).unwrap(), 0.0);
        let d = delta_metric(&[69.83, 5.166], &[67.43, 5.379], &g).unwrap();
        assert!((d - 3.76).abs() < 0.005, "{d}");
        assert!(delta_metric(&[1.0], &[0.0], &[Direction::Higher]).is_err());
    }

    #[test]
    fn report_requires_every_baseline() {
        let m: TaskMetrics = [(Task::Seg, 0.5), (Task::Depth, 1.0)].into();
        let b: TaskMetrics = [(Task::Seg, 0.5)].into();
        assert!(DeltaReport::compute(&m, &b).is_err());
        let r = DeltaReport::compute(&m, &m).unwrap();
        assert_eq!(r.delta, 0.0);
    }

    #[test]
    fn csv_roundtrip() {
        let m: TaskMetrics = [(Task::Seg, 0.75), (Task::Normals, 12.5)].into();
        let mut buf = Vec::new();
        write_metric_csv(&mut buf, &metric_rows(&m)).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("task,metric,value,direction\nseg,miou,0.75,higher\n"), "{text}");
        assert_eq!(read_metric_csv(buf.as_slice()).unwrap(), m);
    }
}
