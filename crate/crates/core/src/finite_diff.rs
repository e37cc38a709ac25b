//! Central finite differences, used as an independent check on the tape.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate of `x`.
pub fn finite_diff_gradient<T, F>(mut f: F, x: &Tensor<T>, h: T) -> Result<Tensor<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    if !(h > T::zero()) {
        return Err(Error::InvalidArgument(format!("step size must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite function value while differencing coordinate {i}"
            )));
        }
        grad.push((up - down) / (h + h));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::<f64>::vector(vec![1.0, 2.0]);
        let g = finite_diff_gradient(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-6);
        assert!((g.data()[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function() {
        let x = Tensor::vector(vec![0.3, -7.0, 2.0]);
        let g = finite_diff_gradient(|_| Ok(4.2), &x, 1e-5).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn sine() {
        let x = Tensor::vector(vec![0.0, std::f64::consts::FRAC_PI_2]);
        let g = finite_diff_gradient(|t| Ok(t.data().iter().map(|v| v.sin()).sum()), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 1.0).abs() < 1e-9);
        assert!(g.data()[1].abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_inputs() {
        let x = Tensor::<f64>::vector(vec![1.0]);
        assert!(finite_diff_gradient(|_| Ok(0.0), &x, 0.0).is_err());
        let err = finite_diff_gradient(|t| Ok((t.data()[0] - 1.0).ln()), &x, 1e-5);
        assert!(matches!(err, Err(Error::Numerical(_))));
    }
}
