//! Central finite-difference gradient checking.

use super::{Graph, Var};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Outcome of comparing analytic gradients against finite differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max_i |a_i - n_i| / max(|a_i|, |n_i|, 1e-6)` over all inputs.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input, flat index)` of the worst element.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Central differences of a scalar function of several tensors.
pub fn numeric_gradient(
    inputs: &[Tensor<f64>],
    eps: f64,
    mut f: impl FnMut(&[Tensor<f64>]) -> f64,
) -> Vec<Tensor<f64>> {
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = vec![0.0; inputs[i].len()];
        for (j, g) in grad.iter_mut().enumerate() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = f(&work);
            work[i].data_mut()[j] = orig - eps;
            let minus = f(&work);
            work[i].data_mut()[j] = orig;
            *g = (plus - minus) / (2.0 * eps);
        }
        out.push(Tensor::from_vec(inputs[i].shape(), grad));
    }
    out
}

/// Differentiates `f` with the tape and with central differences.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], eps: f64, f: F) -> GradCheckReport
where
    F: for<'g> Fn(&'g Graph<'g, f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
{
    let analytic: Vec<Tensor<f64>> = {
        let g = Graph::standalone();
        let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&g, &vars);
        let grads = g.backward(out);
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    };
    let numeric = numeric_gradient(inputs, eps, |xs| {
        let g = Graph::standalone();
        let vars: Vec<_> = xs.iter().map(|t| g.constant(t.clone())).collect();
        f(&g, &vars).item()
    });
    compare(&analytic, &numeric)
}

/// Like [`check_gradients`] for functions that also read parameters from
/// `params`; every parameter element is checked along with the inputs.
pub fn check_gradients_in<F>(params: &ParamStore<f64>, inputs: &[Tensor<f64>], eps: f64, f: F) -> GradCheckReport
where
    F: for<'g> Fn(&'g Graph<'g, f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
{
    let ids: Vec<ParamId> = params.ids().collect();
    let mut analytic: Vec<Tensor<f64>> = {
        let g = Graph::new(params);
        let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&g, &vars);
        let grads = g.backward(out);
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    };
    let param_grads: Vec<Tensor<f64>> = {
        let g = Graph::new(params);
        let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let grads = g.backward(f(&g, &vars));
        ids.iter()
            .map(|&id| grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(params.value(id).shape())))
            .collect()
    };
    analytic.extend(param_grads);

    let mut numeric = numeric_gradient(inputs, eps, |xs| {
        let g = Graph::inference(params);
        let vars: Vec<_> = xs.iter().map(|t| g.constant(t.clone())).collect();
        f(&g, &vars).item()
    });
    let mut work = params.clone();
    for &id in &ids {
        let mut grad = vec![0.0; params.value(id).len()];
        for (j, gj) in grad.iter_mut().enumerate() {
            let orig = params.value(id).data()[j];
            let eval = |delta: f64, work: &mut ParamStore<f64>| {
                work.value_mut(id).data_mut()[j] = orig + delta;
                let g = Graph::inference(work);
                let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
                f(&g, &vars).item()
            };
            let plus = eval(eps, &mut work);
            let minus = eval(-eps, &mut work);
            work.value_mut(id).data_mut()[j] = orig;
            *gj = (plus - minus) / (2.0 * eps);
        }
        numeric.push(Tensor::from_vec(params.value(id).shape(), grad));
    }
    compare(&analytic, &numeric)
}

fn compare(analytic: &[Tensor<f64>], numeric: &[Tensor<f64>]) -> GradCheckReport {
    let mut report = GradCheckReport { max_rel_error: 0.0, max_abs_error: 0.0, worst: (0, 0), checked: 0 };
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        for (j, (&x, &y)) in a.data().iter().zip(n.data()).enumerate() {
            let abs = (x - y).abs();
            let rel = abs / x.abs().max(y.abs()).max(1e-6);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
                report.worst = (i, j);
            }
        }
    }
    report
}
