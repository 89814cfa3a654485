//! Central finite-difference gradient verification.
//!
//! The checker only uses forward evaluation: it rebuilds the computation at
//! perturbed inputs and compares the analytic gradients against
//! `(f(x+h) - f(x-h)) / 2h`. It is therefore independent of the backward
//! implementations it validates.

use crate::error::Result;

use super::{Graph, Scalar, Tensor, Var};

/// Outcome of a gradient check: the worst relative error seen and where.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: usize,
    pub worst_index: usize,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Numeric gradient of `f` (a scalar-valued forward build) w.r.t. each input
/// tensor, via central differences at step `h`.
pub fn numeric_gradient<S, F>(f: &F, inputs: &[Tensor<S>], h: f64) -> Result<Vec<Tensor<S>>>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, &[Var]) -> Result<Var>,
{
    let mut grads = Vec::with_capacity(inputs.len());
    for pi in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[pi].shape());
        for j in 0..inputs[pi].numel() {
            let f_plus = eval_at(f, inputs, pi, j, h)?;
            let f_minus = eval_at(f, inputs, pi, j, -h)?;
            grad.data_mut()[j] = S::of((f_plus - f_minus) / (2.0 * h));
        }
        grads.push(grad);
    }
    Ok(grads)
}

fn eval_at<S, F>(f: &F, inputs: &[Tensor<S>], pi: usize, j: usize, delta: f64) -> Result<f64>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, &[Var]) -> Result<Var>,
{
    let mut graph = Graph::new();
    let mut vars = Vec::with_capacity(inputs.len());
    for (i, t) in inputs.iter().enumerate() {
        let mut t = t.clone();
        if i == pi {
            let v = t.data()[j];
            t.data_mut()[j] = v + S::of(delta);
        }
        vars.push(graph.input(t, false)?);
    }
    let out = f(&mut graph, &vars)?;
    Ok(graph.value(out).scalar_value()?.as_f64())
}

/// Compare analytic gradients of the scalar produced by `f` against central
/// finite differences. Relative error uses `|a - n| / max(1, |a|, |n|)` so
/// near-zero gradients are compared absolutely.
pub fn check_gradients<S, F>(
    f: &F,
    inputs: &[Tensor<S>],
    h: f64,
) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, &[Var]) -> Result<Var>,
{
    // Analytic pass.
    let mut graph = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| graph.input(t.clone(), true))
        .collect::<Result<_>>()?;
    let loss = f(&mut graph, &vars)?;
    let grads = graph.backward(loss)?;

    let numeric = numeric_gradient(f, inputs, h)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: 0,
        worst_index: 0,
        checked: 0,
    };
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.grad(*var);
        for j in 0..analytic.numel() {
            let a = analytic.data()[j].as_f64();
            let n = numeric[pi].data()[j].as_f64();
            let denom = 1.0_f64.max(a.abs()).max(n.abs());
            let rel = (a - n).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = pi;
                report.worst_index = j;
            }
        }
    }
    Ok(report)
}
