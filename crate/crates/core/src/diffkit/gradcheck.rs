//! Central finite-difference gradient verification.
//!
//! The checker only ever calls the forward closure; it never reads the tape's
//! backward pass except to obtain the analytic gradient being checked.

use std::collections::HashMap;

use super::matrix::Tensor2;
use super::params::{ParamId, ParamStore};
use super::tape::{Graph, Var};

/// Denominator floor for the relative error, so entries whose true gradient is
/// ~0 are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Worst relative error over every checked entry.
    pub max_rel_error: f64,
    /// `(input index, flat entry index)` of the worst entry.
    pub worst: (usize, usize),
    pub entries_checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the tape gradient of a scalar-valued `f` against central
/// differences with step `eps`, for every entry of every input.
pub fn check<F>(inputs: &[Tensor2], eps: f64, f: F) -> GradCheck
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);
    let analytic: Vec<Tensor2> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.wrt(*v).cloned().unwrap_or_else(|| Tensor2::zeros(t.rows(), t.cols())))
        .collect();

    let eval = |perturbed: &[Tensor2]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.scalar(out)
    };

    let mut result = GradCheck { max_rel_error: 0.0, worst: (0, 0), entries_checked: 0 };
    let mut work: Vec<Tensor2> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for idx in 0..input.data().len() {
            let orig = input.data()[idx];
            work[k].data_mut()[idx] = orig + eps;
            let plus = eval(&work);
            work[k].data_mut()[idx] = orig - eps;
            let minus = eval(&work);
            work[k].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic[k].data()[idx], numeric);
            result.entries_checked += 1;
            if err > result.max_rel_error {
                result.max_rel_error = err;
                result.worst = (k, idx);
            }
        }
    }
    result
}

/// Like [`check`], but perturbs every slot of `store` instead of free inputs.
pub fn check_store<F>(store: &ParamStore, eps: f64, f: F) -> GradCheck
where
    F: Fn(&mut Graph, &ParamStore) -> Var,
{
    let mut g = Graph::new();
    let out = f(&mut g, store);
    let grads = g.backward(out);
    let analytic: HashMap<ParamId, Tensor2> = g.param_grads(&grads, store).into_iter().collect();

    let mut work = store.clone();
    let eval = |work: &ParamStore| -> f64 {
        let mut g = Graph::new();
        let out = f(&mut g, work);
        g.scalar(out)
    };
    let mut result = GradCheck { max_rel_error: 0.0, worst: (0, 0), entries_checked: 0 };
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let zeros = Tensor2::zeros(store.value(id).rows(), store.value(id).cols());
        let a = analytic.get(&id).unwrap_or(&zeros);
        for idx in 0..store.value(id).data().len() {
            let orig = store.value(id).data()[idx];
            work.value_mut(id).data_mut()[idx] = orig + eps;
            let plus = eval(&work);
            work.value_mut(id).data_mut()[idx] = orig - eps;
            let minus = eval(&work);
            work.value_mut(id).data_mut()[idx] = orig;
            let err = relative_error(a.data()[idx], (plus - minus) / (2.0 * eps));
            result.entries_checked += 1;
            if err > result.max_rel_error {
                result.max_rel_error = err;
                result.worst = (id.index(), idx);
            }
        }
    }
    result
}

