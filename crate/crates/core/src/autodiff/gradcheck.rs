//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates the forward pass, so it stays
//! independent of the backward rules it is checking.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a gradient check, one entry per input.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
    /// Norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖, floor)` per input.
    pub rel_errors: Vec<f64>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().cloned().fold(0.0, f64::max)
    }
}

/// Smallest norm used in the relative-error denominator.
pub const NORM_FLOOR: f64 = 1e-8;

/// Compares the tape's gradients of `f` at `inputs` with central differences
/// of step `h`. `f` must return a scalar.
pub fn check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::Usage("gradient check needs a scalar output".into()));
        }
        Ok(v.item())
    };

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for k in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[k].shape().to_vec());
        for i in 0..inputs[k].len() {
            let x0 = inputs[k].data()[i];
            work[k].data_mut()[i] = x0 + h;
            let fp = eval(&work)?;
            work[k].data_mut()[i] = x0 - h;
            let fm = eval(&work)?;
            work[k].data_mut()[i] = x0;
            g.data_mut()[i] = (fp - fm) / (2.0 * h);
        }
        numeric.push(g);
    }

    let rel_errors = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| rel_error(a.data(), n.data()))
        .collect();
    Ok(GradCheck {
        analytic,
        numeric,
        rel_errors,
    })
}

pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(NORM_FLOOR)
}
