//! Central finite-difference gradient checking.
//!
//! Derivatives are estimated with the five-point central stencil
//! `(8[f(x+h) - f(x-h)] - [f(x+2h) - f(x-2h)]) / 12h`, whose truncation error
//! is O(h^4); this keeps the estimate accurate at the larger end of the
//! allowed step range where roundoff is smallest.

use crate::error::{Error, Result};
use crate::numcore::{Graph, ParamStore, Tensor, Var};

/// Outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`.
    pub max_rel_error: f64,
    /// `(tensor index, element index)` attaining the maximum.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    /// Number of scalar entries compared.
    pub checked: usize,
}

impl GradCheckReport {
    fn new() -> Self {
        GradCheckReport {
            max_rel_error: 0.0,
            worst: (0, 0),
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
        }
    }

    fn record(&mut self, t: usize, e: usize, analytic: f64, numeric: f64) {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12);
        self.checked += 1;
        if rel > self.max_rel_error || self.checked == 1 {
            self.max_rel_error = rel;
            self.worst = (t, e);
            self.analytic = analytic;
            self.numeric = numeric;
        }
    }
}

fn check_step(step: f64) -> Result<()> {
    if !(1e-6..=1e-4).contains(&step) {
        return Err(Error::Param(format!(
            "finite-difference step {step} outside [1e-6, 1e-4]"
        )));
    }
    Ok(())
}

fn stencil(at: &mut impl FnMut(f64) -> Result<f64>, h: f64) -> Result<f64> {
    let d1 = at(h)? - at(-h)?;
    let d2 = at(2.0 * h)? - at(-2.0 * h)?;
    Ok((8.0 * d1 - d2) / (12.0 * h))
}

fn scalar_of(v: &Var<f64>) -> Result<f64> {
    if v.value().len() != 1 {
        return Err(Error::Contract(format!(
            "loss must be scalar, got {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0])
}

/// Checks the reverse-mode gradient of `f` with respect to each tensor in
/// `inputs` against central differences with the given `step`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    check_step(step)?;
    let g = Graph::new();
    let vars: Vec<Var<f64>> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = f(&g, &vars)?;
    scalar_of(&loss)?;
    let grads = g.backward(&loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|v| grads.get_or_zero(v)).collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::inference();
        let vars: Vec<Var<f64>> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        scalar_of(&f(&g, &vars)?)
    };
    let mut work = inputs.to_vec();
    let mut report = GradCheckReport::new();
    for t in 0..inputs.len() {
        for e in 0..inputs[t].len() {
            let orig = inputs[t].data()[e];
            let mut at = |offset: f64| -> Result<f64> {
                work[t].data_mut()[e] = orig + offset;
                let v = eval(&work);
                work[t].data_mut()[e] = orig;
                v
            };
            let numeric = stencil(&mut at, step)?;
            report.record(t, e, analytic[t].data()[e], numeric);
        }
    }
    Ok(report)
}

/// Like [`grad_check`], but over every trainable tensor of a parameter store.
pub fn grad_check_params<F>(f: F, store: &ParamStore<f64>, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, &ParamStore<f64>) -> Result<Var<f64>>,
{
    check_step(step)?;
    let g = Graph::new();
    let loss = f(&g, store)?;
    scalar_of(&loss)?;
    let grads = g.backward(&loss)?;

    let mut work = store.clone();
    let mut report = GradCheckReport::new();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).len();
        let analytic = grads
            .param(id)
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        for e in 0..n {
            let orig = store.get(id).data()[e];
            let mut at = |offset: f64| -> Result<f64> {
                work.get_mut(id).data_mut()[e] = orig + offset;
                let v = f(&Graph::inference(), &work).and_then(|v| scalar_of(&v));
                work.get_mut(id).data_mut()[e] = orig;
                v
            };
            let numeric = stencil(&mut at, step)?;
            report.record(id.index(), e, analytic[e], numeric);
        }
    }
    Ok(report)
}
