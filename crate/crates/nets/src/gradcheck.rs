//! Central-difference gradient checking for f64 graphs.

use candle_core::{DType, Tensor, Var};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Name and flat index of the worst entry.
    pub worst: (String, usize),
}

/// Denominator floor so entries with vanishing gradients compare absolutely.
pub const REL_FLOOR: f64 = 1e-6;

fn value(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Compares the backward pass of `loss` against central differences of step
/// `h` on up to `per_tensor` evenly spaced entries of every variable. The
/// relative error per entry is `|a - n| / (max(|a|, |n|) + REL_FLOOR)`.
pub fn check_gradients<F>(vars: &[(String, Var)], loss: F, per_tensor: usize, h: f64) -> Result<GradCheck>
where
    F: Fn() -> Result<Tensor>,
{
    if vars.iter().any(|(_, v)| v.dtype() != DType::F64) {
        return Err(Error::param("vars", "gradient checks need f64 variables"));
    }
    let grads = loss()?.backward()?;
    let mut out = GradCheck {
        checked: 0,
        max_rel_error: 0.0,
        worst: (String::new(), 0),
    };
    for (name, var) in vars {
        let analytic = match grads.get(var) {
            Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
            None => vec![0.0; var.elem_count()],
        };
        let shape = var.shape().clone();
        let base = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
        let n = base.len();
        let k = per_tensor.min(n).max(1);
        for j in 0..k {
            let i = j * n / k;
            let mut probe = base.clone();
            probe[i] = base[i] + h;
            var.set(&Tensor::from_vec(probe.clone(), &shape, var.device())?)?;
            let up = value(&loss()?)?;
            probe[i] = base[i] - h;
            var.set(&Tensor::from_vec(probe, &shape, var.device())?)?;
            let down = value(&loss()?)?;
            var.set(&Tensor::from_vec(base.clone(), &shape, var.device())?)?;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i];
            let rel = (a - numeric).abs() / (a.abs().max(numeric.abs()) + REL_FLOOR);
            out.checked += 1;
            if rel > out.max_rel_error {
                out.max_rel_error = rel;
                out.worst = (name.clone(), i);
            }
        }
    }
    Ok(out)
}
