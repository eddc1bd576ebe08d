//! Central finite-difference verification of analytic gradients.

use rand::Rng;

use crate::graph::{Graph, NodeId};
use crate::param::{ParamId, ParamStore};
use crate::rng::stream;
use crate::{Real, Result};

#[derive(Debug, thiserror::Error)]
pub enum GradCheckError {
    #[error("loss is not finite at the unperturbed point")]
    NonFiniteBase,
    #[error("loss became non-finite when perturbing {param}[{index}]")]
    NonFinite { param: String, index: usize },
    #[error(transparent)]
    Build(#[from] crate::Error),
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over checked coordinates of `|analytic − numeric| / max(1, |analytic|)`.
    pub max_rel_error: Real,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// A model whose trainable parameters live in one store.
pub trait Parametrized {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
}

impl Parametrized for ParamStore {
    fn params(&self) -> &ParamStore {
        self
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        self
    }
}

/// Compares reverse-mode gradients of `loss_fn` with central differences.
///
/// `loss_fn` must build a deterministic scalar loss over `model` (dropout
/// disabled). Up to `per_param` coordinates of every trainable parameter in
/// `model.params()` are checked; smaller parameters are checked
/// exhaustively.
pub fn grad_check<M, F>(
    model: &mut M,
    loss_fn: F,
    eps: Real,
    per_param: usize,
    seed: u64,
) -> std::result::Result<GradCheckReport, GradCheckError>
where
    M: Parametrized,
    F: for<'a> Fn(&mut Graph<'a>, &'a M) -> Result<NodeId>,
{
    let grads = {
        let mut g = Graph::new();
        let loss = loss_fn(&mut g, model)?;
        if !g.scalar(loss).is_finite() {
            return Err(GradCheckError::NonFiniteBase);
        }
        g.backward(loss)
    };
    let eval = |model: &M| -> Result<Real> {
        let mut g = Graph::new();
        let loss = loss_fn(&mut g, model)?;
        Ok(g.scalar(loss))
    };

    let mut rng = stream(seed, "gradcheck");
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    let store = model.params();
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.get(id).trainable).collect();
    for id in ids {
        let n = model.params().value(id).len();
        let coords: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            (0..per_param).map(|_| rng.random_range(0..n)).collect()
        };
        let name = model.params().get(id).name.clone();
        for idx in coords {
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[idx]);
            let orig = model.params().value(id).data()[idx];
            model.params_mut().get_mut(id).value.data_mut()[idx] = orig + eps;
            let plus = eval(model)?;
            model.params_mut().get_mut(id).value.data_mut()[idx] = orig - eps;
            let minus = eval(model)?;
            model.params_mut().get_mut(id).value.data_mut()[idx] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(GradCheckError::NonFinite {
                    param: name,
                    index: idx,
                });
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (analytic - numeric).abs() / analytic.abs().max(1.0);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = name.clone();
                report.worst_index = idx;
            }
        }
    }
    Ok(report)
}
