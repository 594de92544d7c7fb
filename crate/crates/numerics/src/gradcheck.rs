//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward pass, so it is an
//! independent check on [`Tape::backward`].

use crate::{Tape, Tensor, Var};

/// Components whose magnitudes are both below this are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, RELATIVE_FLOOR)`.
    pub max_rel_error: f64,
    /// (input index, element index) of the worst component.
    pub worst: (usize, usize),
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

/// Compares tape gradients of the scalar `f(inputs)` against central
/// differences with step `eps`.
pub fn check_gradients<F>(inputs: &[Tensor], eps: f64, f: F) -> GradCheck
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.var(x.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.var(x.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out);
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| grads.get(v).unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = eval(&work);
            work[i].data_mut()[j] = orig - eps;
            let minus = eval(&work);
            work[i].data_mut()[j] = orig;
            g.data_mut()[j] = (plus - minus) / (2.0 * eps);
        }
        numeric.push(g);
    }

    let mut max_rel_error = 0.0;
    let mut worst = (0, 0);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for (j, (&x, &y)) in a.data().iter().zip(n.data()).enumerate() {
            let err = (x - y).abs() / x.abs().max(y.abs()).max(RELATIVE_FLOOR);
            if err > max_rel_error {
                max_rel_error = err;
                worst = (i, j);
            }
        }
    }
    GradCheck {
        max_rel_error,
        worst,
        analytic,
        numeric,
    }
}
