//! Central finite-difference verification of tape gradients.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamKind, ParamStore};

/// Worst-case agreement for one checked tensor.
#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    /// `|analytic - numeric| / max(|analytic|, |numeric|)`, in L2 norm.
    pub rel_error: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error() < tol
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Norms below this are treated as an exact zero gradient on both sides.
/// Central differences at `h = 1e-5` carry rounding noise of roughly
/// `1e-16 * |f| / h` per entry, so a true zero (a bias that a following
/// normalisation or softmax cancels) reads back as ~1e-9.
const ZERO_NORM: f64 = 1e-7;

/// Compares the tape gradient of the scalar built by `f` against central
/// differences with step `h`, for every trainable entry of `store` (or only
/// `ids` when given). Inputs to be checked go into the store as well.
pub fn check<F>(store: &mut ParamStore, ids: Option<&[ParamId]>, h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let targets: Vec<ParamId> = match ids {
        Some(ids) => ids.to_vec(),
        None => store.iter().filter(|(_, e)| e.kind == ParamKind::Trainable).map(|(id, _)| id).collect(),
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(true);
        let out = f(&mut g, store)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new(true);
    let loss = f(&mut g, store)?;
    if g.value(loss).numel() != 1 {
        return Err(Error::shape("gradcheck", "objective must be scalar"));
    }
    let grads = g.backward(loss)?;

    let mut tensors = Vec::with_capacity(targets.len());
    for id in targets {
        let n = store.get(id).numel();
        let analytic = grads.param(id).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let mut numeric = vec![0.0; n];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + h;
            let plus = eval(store)?;
            store.get_mut(id).data_mut()[k] = orig - h;
            let minus = eval(store)?;
            store.get_mut(id).data_mut()[k] = orig;
            *slot = (plus - minus) / (2.0 * h);
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
        let (an, nn) = (norm(&analytic), norm(&numeric));
        let scale = an.max(nn);
        let rel_error = if scale < ZERO_NORM { 0.0 } else { norm(&diff) / scale };
        tensors.push(TensorCheck { name: store.entry(id).name.clone(), rel_error, analytic_norm: an, numeric_norm: nn });
    }
    Ok(GradCheckReport { tensors })
}
