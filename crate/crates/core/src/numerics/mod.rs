//! Dense matrices, the seeded generator and the finite-difference oracle.

mod matrix;
mod rng;

pub use matrix::Matrix;
pub use rng::{derive_seed, streams, SeededRng};

use crate::error::{Error, Result};

/// `rows × cols` matrix of i.i.d. `Normal(0, sigma²)` draws, filled in
/// row-major order.
pub fn gaussian_init(rows: usize, cols: usize, sigma: f64, rng: &mut SeededRng) -> Result<Matrix> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Parameter(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::Shape(format!("matrix dims must be >= 1, got {rows}x{cols}")));
    }
    if sigma == 0.0 {
        return Ok(Matrix::zeros(rows, cols));
    }
    let data = (0..rows * cols).map(|_| sigma * rng.next_gaussian()).collect();
    Matrix::new(rows, cols, data)
}

/// Central-difference gradient of `f` at `x`:
/// `(f(x + eps·e_ij) − f(x − eps·e_ij)) / (2·eps)` for every entry.
pub fn finite_diff_grad<F>(mut f: F, x: &Matrix, eps: f64) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> Result<f64>,
{
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::Parameter(format!("eps must be positive, got {eps}")));
    }
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let orig = x.data()[idx];
        probe.data_mut()[idx] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[idx] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[idx] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!("objective not finite at flat index {idx}")));
        }
        grad.data_mut()[idx] = (up - down) / (2.0 * eps);
    }
    Ok(grad)
}

/// `‖a − b‖_F / max(‖a‖_F, ‖b‖_F)`, or 0 when both are zero.
pub fn relative_error(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.dims(), b.dims());
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a.frobenius_norm().max(b.frobenius_norm());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_zero_sigma_is_zero() {
        let mut rng = SeededRng::new(1);
        let m = gaussian_init(3, 4, 0.0, &mut rng).unwrap();
        assert!(m.data().iter().all(|v| v.to_bits() == 0));
    }

    #[test]
    fn gaussian_negative_sigma_rejected() {
        let mut rng = SeededRng::new(1);
        assert!(matches!(gaussian_init(2, 2, -0.1, &mut rng), Err(Error::Parameter(_))));
    }

    #[test]
    fn gaussian_is_reproducible() {
        let a = gaussian_init(5, 7, 0.3, &mut SeededRng::new(99)).unwrap();
        let b = gaussian_init(5, 7, 0.3, &mut SeededRng::new(99)).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn gaussian_moments() {
        let m = gaussian_init(1000, 1000, 0.02, &mut SeededRng::new(2024)).unwrap();
        let n = m.len() as f64;
        let mean = m.sum() / n;
        let var = m.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() <= 0.001, "mean {mean}");
        assert!((var.sqrt() - 0.02).abs() <= 0.002, "std {}", var.sqrt());
    }

    #[test]
    fn fd_of_sum_is_ones() {
        let x = Matrix::from_rows(&[[1.0, -2.0], [0.5, 3.0]]);
        let g = finite_diff_grad(|m| Ok(m.sum()), &x, 1e-4).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn fd_of_square() {
        let x = Matrix::from_rows(&[[3.0]]);
        let g = finite_diff_grad(|m| Ok(m.get(0, 0) * m.get(0, 0)), &x, 1e-5).unwrap();
        assert!((g.get(0, 0) - 6.0).abs() < 1e-8);
    }

    #[test]
    fn fd_rejects_bad_eps_and_nan() {
        let x = Matrix::from_rows(&[[1.0]]);
        assert!(matches!(finite_diff_grad(|m| Ok(m.sum()), &x, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(finite_diff_grad(|_| Ok(f64::NAN), &x, 1e-3), Err(Error::Numeric(_))));
    }
}
