//! Central finite-difference verification of recorded gradients.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest `|analytic − numeric| / max(1, |analytic|, |numeric|)` seen.
    pub max_rel_error: f64,
    /// `(input, element)` where the largest error occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn evaluate<T, F>(inputs: &[Tensor<T>], f: &F) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.value(out).item()
}

/// Compares the reverse-mode gradient of the scalar `f(inputs)` against
/// central differences with step `h`, over every element of every input.
pub fn check_gradients<T, F>(inputs: &[Tensor<T>], h: T, f: F) -> Result<GradCheck>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::Contract("gradient check needs a scalar function".into()));
    }
    let analytic: Vec<Vec<T>> = if g.requires_grad(out) {
        g.backward(out)?;
        vars.iter().map(|&v| g.value(v).grad().expect("leaf grad").to_vec()).collect()
    } else {
        inputs.iter().map(|t| vec![T::zero(); t.len()]).collect()
    };

    let mut report = GradCheck { max_rel_error: 0.0, worst: (0, 0), checked: 0 };
    let mut probe = inputs.to_vec();
    for (i, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + h;
            let plus = evaluate(&probe, &f)?;
            probe[i].data_mut()[j] = orig - h;
            let minus = evaluate(&probe, &f)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (h + h);
            let err = relative_error(a.as_f64(), numeric.as_f64());
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, j);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
