use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::matrix::{Matrix, Scalar};

/// A seeded, counter-based random stream.
///
/// Backed by ChaCha8, whose output depends only on `(seed, stream)`, so draws
/// are identical across platforms and independent streams can be carved out of
/// one master seed.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, stream, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// A child stream keyed by `label`, independent of this stream's position.
    pub fn derive(&self, label: u64) -> RngStream {
        RngStream::new(
            self.seed,
            self.stream
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(label.wrapping_add(1)),
        )
    }

    pub fn uniform(&mut self, low: f64, high: f64) -> f64 {
        if low == high {
            return low;
        }
        self.inner.random_range(low..high)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn uniform_matrix<T: Scalar>(&mut self, rows: usize, cols: usize, bound: f64) -> Matrix<T> {
        Matrix::from_fn(rows, cols, |_, _| T::lit(self.uniform(-bound, bound)))
    }

    pub fn normal_matrix<T: Scalar>(&mut self, rows: usize, cols: usize, std: f64) -> Matrix<T> {
        Matrix::from_fn(rows, cols, |_, _| T::lit(std * self.normal()))
    }
}

/// Uniform Kaiming initialization for a projection with `cols` inputs.
///
/// Entries are drawn from `[-b, b]` with `b = sqrt(6 / cols)`.
pub fn kaiming_uniform_init<T: Scalar>(rows: usize, cols: usize, rng: &mut RngStream) -> Matrix<T> {
    assert!(rows >= 1 && cols >= 1, "kaiming init needs a non-empty shape");
    let bound = (6.0 / cols as f64).sqrt();
    rng.uniform_matrix(rows, cols, bound)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let a: Matrix<f64> = kaiming_uniform_init(2, 3, &mut RngStream::new(42, 0));
        let b: Matrix<f64> = kaiming_uniform_init(2, 3, &mut RngStream::new(42, 0));
        assert!(a.bitwise_eq(&b));
        let c: Matrix<f64> = kaiming_uniform_init(2, 3, &mut RngStream::new(42, 1));
        assert!(!a.bitwise_eq(&c));
    }

    #[test]
    fn kaiming_bound() {
        let mut rng = RngStream::new(7, 3);
        let m: Matrix<f64> = kaiming_uniform_init(16, 24, &mut rng);
        let b = (6.0f64 / 24.0).sqrt();
        assert!(m.data().iter().all(|v| v.abs() <= b));
    }

    #[test]
    fn kaiming_mean_is_zero() {
        // Uniform on [-b, b] has variance b^2 / 3; the sample mean over n draws
        // has standard error b / sqrt(3n).
        let cols = 6;
        let n = 100_000;
        let m: Matrix<f64> = kaiming_uniform_init(n / cols, cols, &mut RngStream::new(11, 0));
        let b = (6.0f64 / cols as f64).sqrt();
        let se = b / (3.0 * n as f64).sqrt();
        let mean = m.sum() / m.len() as f64;
        assert!(mean.abs() < 3.0 * se, "mean {mean} vs 3se {}", 3.0 * se);
        let var = m.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m.len() as f64;
        assert!((var - b * b / 3.0).abs() < 0.02 * b * b);
    }

    #[test]
    fn derived_streams_differ() {
        let root = RngStream::new(1, 0);
        let mut a = root.derive(0);
        let mut b = root.derive(1);
        assert_ne!(a.normal(), b.normal());
        let mut a2 = root.derive(0);
        let mut a3 = root.derive(0);
        assert_eq!(a2.normal(), a3.normal());
    }
}
