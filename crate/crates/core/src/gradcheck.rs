//! Central finite differences for checking analytic gradients.

use candle_core::{Tensor, Var};

use crate::error::{LabError, Result};
use crate::ops;

/// Central-difference gradient of a scalar function at `x`, computed in the
/// dtype of `x` (use f64 for meaningful precision).
pub fn numeric_gradient(
    x: &Tensor,
    step: f64,
    f: impl Fn(&Tensor) -> Result<f64>,
) -> Result<Vec<f64>> {
    let base = ops::to_f64_vec(x)?;
    let shape = x.shape().clone();
    let dtype = x.dtype();
    let eval = |v: &[f64]| -> Result<f64> {
        let t = Tensor::from_vec(v.to_vec(), shape.clone(), x.device())?.to_dtype(dtype)?;
        f(&t)
    };
    let mut out = Vec::with_capacity(base.len());
    let mut v = base.clone();
    for i in 0..base.len() {
        v[i] = base[i] + step;
        let plus = eval(&v)?;
        v[i] = base[i] - step;
        let minus = eval(&v)?;
        v[i] = base[i];
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

/// Gradient of `f` at `x` by backpropagation.
pub fn analytic_gradient(x: &Tensor, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Vec<f64>> {
    let var = Var::from_tensor(x)?;
    let y = f(var.as_tensor())?;
    let grads = y.backward()?;
    match grads.get(var.as_tensor()) {
        Some(g) => ops::to_f64_vec(g),
        None => Ok(vec![0.0; x.elem_count()]),
    }
}

/// `||a - b|| / max(||b||, floor)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(LabError::Shape(format!("{} vs {} entries", a.len(), b.len())));
    }
    let num = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
    Ok(num / den)
}

/// Analytic vs numeric relative error for `f` at `x`.
pub fn check(x: &Tensor, step: f64, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<f64> {
    let analytic = analytic_gradient(x, &f)?;
    let numeric = numeric_gradient(x, step, |t| ops::scalar(&f(t)?))?;
    relative_error(&analytic, &numeric)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn quadratic() {
        let x = Tensor::new(&[1.0f64, -2.0, 0.5], &Device::Cpu).unwrap();
        let err = check(&x, 1e-5, |t| Ok((t.sqr()?.sum_all()? * 1.5)?)).unwrap();
        assert!(err < 1e-8);
        let g = analytic_gradient(&x, |t| Ok(t.sqr()?.sum_all()?)).unwrap();
        assert_eq!(g, vec![2.0, -4.0, 1.0]);
    }
}
