//! Central finite differences, the oracle the autodiff engine is checked against.

pub mod suite;

use crate::error::Result;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared absolutely rather than relatively.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every element of `x`.
pub fn finite_difference_grad<E>(
    mut f: impl FnMut(&Tensor<f64>) -> Result<f64, E>,
    x: &Tensor<f64>,
    step: f64,
) -> Result<Tensor<f64>, E> {
    assert!(step > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// `|a - b| / max(|a|, |b|, RELATIVE_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR)
}

/// Largest elementwise [`relative_error`] between two equally sized slices.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::from_f64(vec![2, 2], &[0.3, -1.0, 4.0, 2.5]).unwrap();
        let g = finite_difference_grad(|t| Ok::<_, Error>(t.data().iter().sum()), &x, DEFAULT_STEP).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::from_f64(vec![1], &[3.0]).unwrap();
        let g = finite_difference_grad(|t| Ok::<_, Error>(t.data()[0] * t.data()[0]), &x, DEFAULT_STEP).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-15);
    }
}
