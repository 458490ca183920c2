//! Central finite-difference gradient checking.

use super::{Tape, Tensor, Var};
use crate::Result;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Norm-wise relative error per input: `|a - n| / max(|a|, |n|, floor)`.
    pub rel_errors: Vec<f64>,
    /// Smallest relu input on the unperturbed tape.
    pub relu_margin: f64,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }

    /// True when no relu input lies within `margin` of its kink.
    pub fn smooth(&self, margin: f64) -> bool {
        self.relu_margin > margin
    }
}

/// Denominator floor for the relative error, so that all-zero gradients
/// compare by absolute error instead of dividing by zero.
pub const REL_FLOOR: f64 = 1e-3;

/// Compares reverse-mode gradients of `f` against central differences with step `h`.
///
/// `f` receives the inputs as gradient-tracked leaves and must return a
/// single-valued var.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;
    let relu_margin = tape.relu_margin();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.leaf(x.clone())).collect();
        let r = f(&mut t, &vs)?;
        Ok(t.value(r).item())
    };

    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(&tape, *v);
        let mut numeric = vec![0.0; inputs[k].numel()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            *slot = (plus - minus) / (2.0 * h);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let na = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        rel_errors.push(diff / na.max(nn).max(REL_FLOOR));
    }
    Ok(GradCheck {
        rel_errors,
        relu_margin,
    })
}
