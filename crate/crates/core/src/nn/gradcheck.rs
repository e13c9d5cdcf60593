//! Central finite-difference checks of analytic gradients.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::params::Params;

pub const DEFAULT_EPS: f64 = 1e-5;

/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// `(f(x + eps) − f(x − eps)) / (2·eps)` for every coordinate of `x`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + eps;
            let hi = f(&p);
            p[i] = x[i] - eps;
            let lo = f(&p);
            p[i] = x[i];
            (hi - lo) / (2.0 * eps)
        })
        .collect()
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub per_param: BTreeMap<String, f64>,
}

impl GradCheckReport {
    fn record(&mut self, name: &str, err: f64) {
        let e = self.per_param.entry(name.to_string()).or_insert(0.0);
        *e = e.max(err);
        self.max_rel_err = self.max_rel_err.max(err);
    }

    pub fn worst(&self) -> Option<(&str, f64)> {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, v)| (k.as_str(), *v))
    }
}

/// Adds `delta` to flat element `index` of `m` without touching other tensors.
fn nudge<M: Params>(m: &mut M, index: usize, delta: f64) {
    let mut off = 0;
    m.visit_mut("", &mut |_, mut a| {
        let n = a.len();
        if index >= off && index < off + n {
            let v = a.iter_mut().nth(index - off).expect("in range");
            *v += delta;
        }
        off += n;
    });
}

/// Compares analytic gradients of a scalar loss against central differences,
/// over every parameter of `module` and every element of every input.
///
/// `loss` is evaluated on perturbed copies; `analytic_params` and
/// `analytic_inputs` hold the gradients the implementation produced at the
/// unperturbed point.
pub fn grad_check<M, F>(
    module: &M,
    inputs: &[(&str, ArrayD<f64>)],
    eps: f64,
    loss: F,
    analytic_params: &M,
    analytic_inputs: &[ArrayD<f64>],
) -> Result<GradCheckReport>
where
    M: Params + Clone,
    F: Fn(&M, &[ArrayD<f64>]) -> Result<f64>,
{
    let mut report = GradCheckReport::default();
    let inputs_owned: Vec<ArrayD<f64>> = inputs.iter().map(|(_, a)| a.clone()).collect();
    let eval = |m: &M, xs: &[ArrayD<f64>]| -> Result<f64> {
        let l = loss(m, xs)?;
        if !l.is_finite() {
            return Err(Error::NonFinite {
                context: "grad_check loss".into(),
            });
        }
        Ok(l)
    };
    eval(module, &inputs_owned)?;

    let layout = analytic_params.layout("");
    let analytic = analytic_params.to_flat();
    let mut work = module.clone();
    for (name, range) in &layout {
        for i in range.clone() {
            nudge(&mut work, i, eps);
            let hi = eval(&work, &inputs_owned)?;
            nudge(&mut work, i, -2.0 * eps);
            let lo = eval(&work, &inputs_owned)?;
            nudge(&mut work, i, eps);
            report.record(name, rel_err(analytic[i], (hi - lo) / (2.0 * eps)));
        }
    }

    let mut xs = inputs_owned.clone();
    for (k, (name, x0)) in inputs.iter().enumerate() {
        let grad = &analytic_inputs[k];
        for (j, (&g, &v)) in grad.iter().zip(x0.iter()).enumerate() {
            let slot = |xs: &mut Vec<ArrayD<f64>>, val: f64| {
                *xs[k].iter_mut().nth(j).expect("in range") = val;
            };
            slot(&mut xs, v + eps);
            let hi = eval(module, &xs)?;
            slot(&mut xs, v - eps);
            let lo = eval(module, &xs)?;
            slot(&mut xs, v);
            report.record(&format!("input.{name}"), rel_err(g, (hi - lo) / (2.0 * eps)));
        }
    }
    Ok(report)
}
