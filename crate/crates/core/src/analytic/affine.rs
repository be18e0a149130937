use nalgebra::DMatrix;
use rand::Rng;

use super::gmm::Gaussian;
use crate::error::{Error, Result};
use crate::numerics::{rng::normal, Array};
use crate::processes::ForwardProcess;

pub const DEFAULT_SIGMA_INIT: f64 = 2.5;

/// `x = A z + b` with `z ~ N(0, sigma_init^2 I_k)`; its law is
/// `N(b, sigma_init^2 A A^T)` exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineGenerator {
    a: Array,
    b: Vec<f64>,
    sigma_init: f64,
}

impl AffineGenerator {
    /// `a` is `d x k`.
    pub fn new(a: Array, b: Vec<f64>, sigma_init: f64) -> Result<Self> {
        if a.rows() != b.len() {
            return Err(Error::Shape {
                op: "affine_generator",
                left: a.shape().to_vec(),
                right: vec![b.len()],
            });
        }
        if !(sigma_init > 0.0) {
            return Err(Error::invalid(format!("sigma_init must be positive, got {sigma_init}")));
        }
        Ok(Self { a, b, sigma_init })
    }

    pub fn identity(d: usize, sigma_init: f64) -> Result<Self> {
        let mut a = Array::zeros(d, d);
        for i in 0..d {
            a.set(i, i, 1.0);
        }
        Self::new(a, vec![0.0; d], sigma_init)
    }

    /// Scalar generator `x = a z + b`.
    pub fn scalar(a: f64, b: f64, sigma_init: f64) -> Result<Self> {
        Self::new(Array::matrix(1, 1, vec![a])?, vec![b], sigma_init)
    }

    pub fn dim(&self) -> usize {
        self.a.rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.a.cols()
    }

    pub fn a(&self) -> &Array {
        &self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn sigma_init(&self) -> f64 {
        self.sigma_init
    }

    /// Parameters flattened as `A` (row-major) followed by `b`.
    pub fn flat(&self) -> Vec<f64> {
        self.a.data().iter().chain(&self.b).cloned().collect()
    }

    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        let na = self.a.len();
        if flat.len() != na + self.b.len() {
            return Err(Error::Shape {
                op: "affine_with_flat",
                left: vec![na + self.b.len()],
                right: vec![flat.len()],
            });
        }
        Self::new(
            Array::matrix(self.dim(), self.latent_dim(), flat[..na].to_vec())?,
            flat[na..].to_vec(),
            self.sigma_init,
        )
    }

    /// Rows of `z` (`n x k`) mapped to rows `A z + b` (`n x d`).
    pub fn generate(&self, z: &Array) -> Result<Array> {
        let mut x = z.matmul(&self.a.transpose())?;
        for r in 0..x.rows() {
            for (v, b) in x.row_slice_mut(r).iter_mut().zip(&self.b) {
                *v += b;
            }
        }
        Ok(x)
    }

    pub fn sample_latent<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Array {
        normal(rng, n, self.latent_dim(), self.sigma_init)
    }

    pub fn pushforward_cov(&self) -> DMatrix<f64> {
        let a = DMatrix::from_row_slice(self.dim(), self.latent_dim(), self.a.data());
        &a * a.transpose() * (self.sigma_init * self.sigma_init)
    }

    /// Exact output law; fails if `A A^T` is singular.
    pub fn pushforward(&self) -> Result<Gaussian> {
        Gaussian::new(self.b.clone(), self.pushforward_cov())
    }

    /// `N(alpha b, alpha^2 sigma^2 A A^T + beta^2 I)`: always non-degenerate
    /// for `t > 0`.
    pub fn diffused_pushforward(&self, process: &ForwardProcess, t: f64) -> Result<Gaussian> {
        process.check_time(t)?;
        let (al, be) = (process.alpha(t), process.beta(t));
        let d = self.dim();
        let cov = self.pushforward_cov() * (al * al) + DMatrix::identity(d, d) * (be * be);
        Gaussian::new(self.b.iter().map(|v| al * v).collect(), cov)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_returns_latent() {
        let g = AffineGenerator::identity(2, DEFAULT_SIGMA_INIT).unwrap();
        let z = Array::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
        assert_eq!(g.generate(&z).unwrap(), z);
    }

    #[test]
    fn pushforward_covariance_by_sampling() {
        let a = Array::from_rows(&[vec![1.0, 0.5], vec![-0.3, 0.8]]).unwrap();
        let g = AffineGenerator::new(a, vec![1.0, -1.0], DEFAULT_SIGMA_INIT).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let x = g.generate(&g.sample_latent(n, &mut rng)).unwrap();
        let m = x.mean_rows();
        let cov = g.pushforward_cov();
        for i in 0..2 {
            for j in 0..2 {
                let prods: Vec<f64> = x.to_rows().iter().map(|r| (r[i] - m[i]) * (r[j] - m[j])).collect();
                let c = prods.iter().sum::<f64>() / (n - 1) as f64;
                let var = prods.iter().map(|p| (p - c).powi(2)).sum::<f64>() / (n - 1) as f64;
                let se = (var / n as f64).sqrt();
                assert!((c - cov[(i, j)]).abs() < 3.0 * se, "cov[{i},{j}] {c} vs {}", cov[(i, j)]);
            }
        }
    }

    #[test]
    fn flat_roundtrip() {
        let g = AffineGenerator::new(Array::from_rows(&[vec![1.0, 2.0]]).unwrap(), vec![3.0], 1.0).unwrap();
        assert_eq!(g.flat(), vec![1.0, 2.0, 3.0]);
        assert_eq!(g.with_flat(&g.flat()).unwrap(), g);
    }
}
