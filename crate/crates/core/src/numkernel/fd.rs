//! Central finite differences, used as an independent gradient oracle.

use super::matrix::Matrix;

/// Central-difference gradient of `f` with respect to every entry of `params`.
pub fn fd_gradient<F>(f: F, params: &[Matrix<f64>], step: f64) -> Vec<Matrix<f64>>
where
    F: Fn(&[Matrix<f64>]) -> f64,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let (rows, cols) = params[p].shape();
        let mut grad = Matrix::zeros(rows, cols);
        for i in 0..params[p].len() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + step;
            let plus = f(&work);
            work[p].data_mut()[i] = orig - step;
            let minus = f(&work);
            work[p].data_mut()[i] = orig;
            grad.data_mut()[i] = (plus - minus) / (2.0 * step);
        }
        out.push(grad);
    }
    out
}

/// `max|a - b| / max(max|a|, max|b|)`, or the absolute difference when both
/// gradients are below `1e-8`.
pub fn relative_error(analytic: &Matrix<f64>, numeric: &Matrix<f64>) -> f64 {
    let diff = analytic.max_abs_diff(numeric).expect("gradient shapes match");
    let scale = analytic.max_abs().max(numeric.max_abs());
    if scale < 1e-8 {
        diff
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let p = vec![Matrix::from_rows(&[&[3.0]])];
        let g = fd_gradient(|ps| ps[0].get(0, 0).powi(2), &p, 1e-5);
        assert!((g[0].get(0, 0) - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function() {
        let p = vec![Matrix::from_rows(&[&[1.0, -2.0]])];
        let g = fd_gradient(|_| 4.25, &p, 1e-5);
        assert_eq!(g[0], Matrix::zeros(1, 2));
    }

    #[test]
    fn quadratic_form() {
        let q = Matrix::<f64>::from_rows(&[&[2.0, 1.0, 0.0], &[-1.0, 3.0, 0.5], &[0.25, 0.0, 1.0]]);
        let p = vec![Matrix::from_rows(&[&[0.3], &[-1.2], &[2.0]])];
        let g = fd_gradient(
            |ps| ps[0].transpose().matmul(&q).unwrap().matmul(&ps[0]).unwrap().get(0, 0),
            &p,
            1e-5,
        );
        let expected = q.add(&q.transpose()).unwrap().matmul(&p[0]).unwrap();
        assert!(g[0].max_abs_diff(&expected).unwrap() < 1e-6);
    }
}
