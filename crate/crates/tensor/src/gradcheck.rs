//! Central finite-difference gradient oracle.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub passed: bool,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub checked: usize,
}

/// Relative error of one component.
///
/// The denominator is floored at a small fraction of the largest gradient
/// magnitude so that components that are numerically zero compare by
/// absolute error.
fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn summarise(analytic: &[f64], numeric: &[f64], tol: f64, indices: &[usize]) -> GradCheckReport {
    let gmax = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-2 * gmax).max(1e-8);
    let mut report = GradCheckReport {
        passed: true,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: 0,
        checked: analytic.len(),
    };
    for (k, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let r = rel_error(a, n, floor);
        report.max_abs_error = report.max_abs_error.max((a - n).abs());
        if r > report.max_rel_error {
            report.max_rel_error = r;
            report.worst_index = indices[k];
        }
    }
    report.passed = report.max_rel_error < tol;
    report
}

/// Compares the analytic gradient of scalar `f` at `x` with central differences.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.variable(x.clone());
    let loss = f(&mut g, xv)?;
    g.backward(loss)?;
    let analytic = g.grad(xv).expect("leaf grad").data().to_vec();

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t);
        let out = f(&mut g, v)?;
        Ok(g.value(out).item())
    };
    let mut numeric = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * h));
    }
    let idx: Vec<usize> = (0..x.numel()).collect();
    Ok(summarise(&analytic, &numeric, tol, &idx))
}

/// Same check against one model parameter, probing at most `max_probes`
/// evenly spaced elements.
pub fn param_diff_check<F>(
    store: &ParamStore,
    id: ParamId,
    f: F,
    h: f64,
    tol: f64,
    max_probes: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.backward(loss)?;
    let full = g
        .param_grad(id)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(store.value(id).shape()));

    let n = store.value(id).numel();
    let step = n.div_ceil(max_probes.max(1)).max(1);
    let indices: Vec<usize> = (0..n).step_by(step).collect();
    let mut probe = store.clone();
    let base = store.value(id).clone();
    let mut eval = |i: usize, delta: f64| -> Result<f64> {
        let mut t = base.clone();
        t.data_mut()[i] += delta;
        *probe.value_mut(id) = t;
        let mut g = Graph::new();
        let out = f(&mut g, &probe)?;
        Ok(g.value(out).item())
    };
    let mut numeric = Vec::with_capacity(indices.len());
    for &i in &indices {
        numeric.push((eval(i, h)? - eval(i, -h)?) / (2.0 * h));
    }
    let analytic: Vec<f64> = indices.iter().map(|&i| full.data()[i]).collect();
    Ok(summarise(&analytic, &numeric, tol, &indices))
}
