//! Central finite-difference gradient checking.

use crate::{Tape, Tensor, Var};

/// Outcome of comparing analytic and numeric gradients for one input.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Tensor,
    pub numeric: Tensor,
}

impl GradCheck {
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)` in the 2-norm.
    pub fn relative_error(&self) -> f64 {
        let diff: f64 = self
            .analytic
            .data()
            .iter()
            .zip(self.numeric.data())
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let na = self.analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = self.numeric.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        diff / na.max(nn).max(1e-12)
    }
}

/// Checks `d f / d inputs[i]` for every input.
///
/// `f` must build a scalar on the given tape from tracked leaves holding the
/// inputs, and must be deterministic.
pub fn check_gradients<F>(inputs: &[Tensor], step: f64, f: F) -> Vec<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let leaves: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &leaves);
    let grads = tape.backward(out);
    let analytic: Vec<Tensor> = leaves.iter().map(|&v| grads.get_or_zeros(v)).collect();

    let eval = |xs: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).item()
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    analytic
        .into_iter()
        .enumerate()
        .map(|(i, analytic)| {
            let mut numeric = Tensor::zeros(inputs[i].shape().to_vec());
            for e in 0..inputs[i].numel() {
                let orig = work[i].data()[e];
                work[i].data_mut()[e] = orig + step;
                let plus = eval(&work);
                work[i].data_mut()[e] = orig - step;
                let minus = eval(&work);
                work[i].data_mut()[e] = orig;
                numeric.data_mut()[e] = (plus - minus) / (2.0 * step);
            }
            GradCheck { analytic, numeric }
        })
        .collect()
}
