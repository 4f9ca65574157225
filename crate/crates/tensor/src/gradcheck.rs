//! Central finite differences, the reference every analytic gradient is
//! checked against.

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

/// Estimates `∂f/∂x_i ≈ (f(x + h·e_i) − f(x − h·e_i)) / 2h` for every
/// coordinate of `point`.
pub fn finite_diff_grad<T, F>(mut f: F, point: &Tensor<T>, h: T) -> Result<Tensor<T>>
where
    T: Real,
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    if !(h > T::zero()) {
        return Err(TensorError::contract("finite difference step must be positive"));
    }
    let mut probe = point.data().to_vec();
    let mut out = Vec::with_capacity(probe.len());
    let two_h = h + h;
    for i in 0..probe.len() {
        let x0 = probe[i];
        probe[i] = x0 + h;
        let plus = f(&Tensor::new(point.shape(), probe.clone())?)?;
        probe[i] = x0 - h;
        let minus = f(&Tensor::new(point.shape(), probe.clone())?)?;
        probe[i] = x0;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(TensorError::NumericFault { op: "finite_diff_grad" });
        }
        out.push((plus - minus) / two_h);
    }
    Tensor::new(point.shape(), out)
}

/// Largest `|a − b| / max(|a|, |b|, floor)` over paired entries.
pub fn max_relative_error<T: Real>(a: &[T], b: &[T], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let (x, y) = (x.as_f64(), y.as_f64());
            (x - y).abs() / x.abs().max(y.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let p = Tensor::new(&[1], vec![3.0f64]).unwrap();
        let g = finite_diff_grad(|x| Ok(x.data()[0] * x.data()[0]), &p, 1e-4).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn sum_is_all_ones() {
        let p = Tensor::new(&[2, 3], vec![0.1, -4.0, 2.5, 7.0, 0.0, -0.3f64]).unwrap();
        let g = finite_diff_grad(|x| Ok(x.data().iter().sum()), &p, 1e-3).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn rejects_bad_step_and_non_finite_values() {
        let p = Tensor::new(&[1], vec![1.0f64]).unwrap();
        assert!(finite_diff_grad(|_| Ok(0.0), &p, 0.0).is_err());
        let r = finite_diff_grad(|x| Ok((x.data()[0] - 1.0).ln()), &p, 1e-3);
        assert!(matches!(r, Err(TensorError::NumericFault { .. })));
    }
}
