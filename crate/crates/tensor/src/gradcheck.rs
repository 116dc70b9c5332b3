//! Central finite-difference gradient checking.

use crate::{no_grad, DType, Result, Storage, Tensor, TensorError};

/// Outcome of a gradient check: one norm-based relative error per input.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub rel_errors: Vec<f64>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error() < tol
    }
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Compares the gradient of the scalar `f(inputs)` from `backward` with
/// central differences of step `h`. Inputs must be f64 parameters; their
/// gradients are reset before and after the check.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheck>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    for x in inputs {
        if x.dtype() != DType::F64 || !x.requires_grad() || !x.is_leaf() {
            return Err(TensorError::contract(
                "gradcheck",
                "inputs must be f64 leaf parameters",
            ));
        }
        x.zero_grad();
    }
    f(inputs)?.backward()?;
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|x| x.grad_f64().unwrap_or_else(|| vec![0.0; x.numel()]))
        .collect();
    let mut rel_errors = Vec::with_capacity(inputs.len());
    for (x, a) in inputs.iter().zip(&analytic) {
        let mut numeric = vec![0.0; x.numel()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = x.storage().get_f64(i);
            let eval = |v: f64| -> Result<f64> {
                set(x, i, v);
                no_grad(|| f(inputs)).map(|y| y.item())
            };
            let plus = eval(orig + h)?;
            let minus = eval(orig - h)?;
            set(x, i, orig);
            *slot = (plus - minus) / (2.0 * h);
        }
        rel_errors.push(relative_error(a, &numeric));
    }
    for x in inputs {
        x.zero_grad();
    }
    Ok(GradCheck { rel_errors })
}

fn set(x: &Tensor, i: usize, v: f64) {
    x.update(|s| {
        if let Storage::F64(buf) = s {
            buf[i] = v;
        }
    });
}
