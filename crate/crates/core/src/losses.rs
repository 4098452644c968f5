//! Supervision losses on the autograd tape and the multi-scale objective.

use log::warn;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Label value excluded from segmentation losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

/// Probability clamp inside the edge cross-entropy.
pub const EDGE_EPS: f64 = 1e-7;

/// Segmentation cross-entropy averaged over non-ignored pixels. The flag is
/// set (and the loss is 0) when every pixel is ignored.
pub fn seg_loss(g: &mut Graph, logits: Var, labels: &[u8], ignore: u8) -> Result<(Var, bool)> {
    let (loss, all_ignored) = g.softmax_cross_entropy(logits, labels, ignore)?;
    if all_ignored {
        warn!("segmentation loss: every pixel carries the ignore label");
    }
    Ok((loss, all_ignored))
}

/// Reverse-Huber penalty of a residual tensor; see [`Graph::berhu`].
pub fn berhu(g: &mut Graph, residual: Var, threshold: Option<f64>) -> Result<Var> {
    g.berhu(residual, threshold)
}

/// berHu on inverse-normalised depth, `d_far / pred - d_far / gt`.
pub fn depth_loss(g: &mut Graph, pred: Var, gt: &Tensor, d_far: f64) -> Result<Var> {
    if g.shape(pred) != gt.shape() {
        return Err(Error::shape("depth_loss", format!("{:?} vs {:?}", g.shape(pred), gt.shape())));
    }
    if !(d_far > 0.0) {
        return Err(Error::value("depth_loss", format!("d_far = {d_far}")));
    }
    if g.value(pred).data().iter().chain(gt.data()).any(|&v| !(v > 0.0)) {
        return Err(Error::value("depth_loss", "depth must be strictly positive"));
    }
    let inv_pred = g.recip(pred);
    let inv_pred = g.scale(inv_pred, d_far);
    let inv_gt = g.constant(gt.map(|v| d_far / v));
    let r = g.sub(inv_pred, inv_gt)?;
    g.berhu(r, None)
}

/// Mean of `1 - cos` between predicted and target normals.
pub fn normal_loss(g: &mut Graph, pred: Var, gt: &Tensor) -> Result<Var> {
    g.cosine_loss(pred, gt)
}

/// Per-pixel weights for the edge cross-entropy: positives are scaled by
/// `n_neg / n_pos`, negatives by 1.
pub fn edge_weights(gt: &Tensor) -> Tensor {
    let pos = gt.data().iter().filter(|&&v| v > 0.5).count();
    let neg = gt.numel() - pos;
    let w_pos = if pos == 0 { 1.0 } else { neg as f64 / pos as f64 };
    gt.map(|v| if v > 0.5 { w_pos } else { 1.0 })
}

/// Class-balanced binary cross-entropy on edge probabilities.
pub fn edge_loss(g: &mut Graph, prob: Var, gt: &Tensor) -> Result<Var> {
    let w = edge_weights(gt);
    g.bce(prob, gt, &w, EDGE_EPS)
}

/// `(1/|S|) sum_s sum_t w_t L_t^s + sum_t w_t L_t^final` on plain numbers.
/// `intermediate[k][t]` is the loss of task `t` at the `k`-th scale.
pub fn total_loss(intermediate: &[Vec<f64>], final_losses: &[f64], weights: &[f64]) -> Result<f64> {
    check_counts(intermediate.iter().map(Vec::len), final_losses.len(), weights.len())?;
    let weighted = |ls: &[f64]| ls.iter().zip(weights).map(|(l, w)| l * w).sum::<f64>();
    let inter = if intermediate.is_empty() {
        0.0
    } else {
        intermediate.iter().map(|ls| weighted(ls)).sum::<f64>() / intermediate.len() as f64
    };
    Ok(inter + weighted(final_losses))
}

/// Tape version of [`total_loss`].
pub fn total_loss_var(g: &mut Graph, intermediate: &[Vec<Var>], final_losses: &[Var], weights: &[f64]) -> Result<Var> {
    check_counts(intermediate.iter().map(Vec::len), final_losses.len(), weights.len())?;
    let weighted_sum = |g: &mut Graph, ls: &[Var], factor: f64| -> Result<Option<Var>> {
        let mut acc: Option<Var> = None;
        for (l, w) in ls.iter().zip(weights) {
            let term = g.scale(*l, w * factor);
            acc = Some(match acc {
                Some(a) => g.add(a, term)?,
                None => term,
            });
        }
        Ok(acc)
    };
    let mut total = weighted_sum(g, final_losses, 1.0)?;
    let factor = 1.0 / intermediate.len().max(1) as f64;
    for ls in intermediate {
        if let Some(s) = weighted_sum(g, ls, factor)? {
            total = Some(match total {
                Some(t) => g.add(t, s)?,
                None => s,
            });
        }
    }
    total.ok_or_else(|| Error::value("total_loss", "no task losses"))
}

fn check_counts(mut inter: impl Iterator<Item = usize>, finals: usize, weights: usize) -> Result<()> {
    if finals != weights {
        return Err(Error::shape("total_loss", format!("{finals} final losses for {weights} weights")));
    }
    if let Some(n) = inter.find(|&n| n != weights) {
        return Err(Error::shape("total_loss", format!("an intermediate scale has {n} losses for {weights} tasks")));
    }
    Ok(())
}
