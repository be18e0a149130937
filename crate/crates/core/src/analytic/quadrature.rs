use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::processes::ForwardProcess;

/// Time nodes with trapezoid weights, so `sum_j weights[j] * f(times[j])`
/// approximates the integral of `f` over `[times[0], times[n-1]]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    times: Vec<f64>,
    weights: Vec<f64>,
}

pub const DEFAULT_GRID_POINTS: usize = 64;

impl TimeGrid {
    /// Geometric spacing between `lo` and `hi`.
    pub fn geometric(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if !(lo > 0.0 && hi > lo) || n < 2 {
            return Err(Error::invalid(format!(
                "geometric grid needs 0 < lo < hi and n >= 2, got [{lo}, {hi}] n={n}"
            )));
        }
        let r = (hi / lo).ln() / (n - 1) as f64;
        let mut times: Vec<f64> = (0..n).map(|i| lo * (r * i as f64).exp()).collect();
        times[n - 1] = hi;
        Self::from_times(times)
    }

    /// 64 geometric points across the process's sigma range.
    pub fn for_process(process: &ForwardProcess) -> Self {
        Self::geometric(process.sigma_min, process.sigma_max, DEFAULT_GRID_POINTS)
            .expect("process range validated at construction")
    }

    /// A single node with unit weight: the "integral" is the value at `t`.
    pub fn single(t: f64) -> Self {
        Self {
            times: vec![t],
            weights: vec![1.0],
        }
    }

    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 || times.windows(2).any(|w| w[1] <= w[0]) || times[0] <= 0.0 {
            return Err(Error::invalid("time grid must be positive and strictly increasing"));
        }
        let n = times.len();
        let mut weights = vec![0.0; n];
        for i in 0..n - 1 {
            let h = 0.5 * (times[i + 1] - times[i]);
            weights[i] += h;
            weights[i + 1] += h;
        }
        Ok(Self { times, weights })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn integrate(&self, values: &[f64]) -> f64 {
        self.weights.iter().zip(values).map(|(w, v)| w * v).sum()
    }
}

/// Gauss–Hermite rule for expectations under `N(0, 1)`:
/// `E[f(Z)] ~ sum_i w_i f(x_i)`, exact for polynomials of degree `2n-1`.
///
/// Golub–Welsch on the Jacobi matrix of the probabilists' Hermite
/// polynomials (off-diagonal `sqrt(k)`).
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "need at least one node");
    let mut j = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let v = (k as f64).sqrt();
        j[(k - 1, k)] = v;
        j[(k, k - 1)] = v;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Tensor-product Gauss–Hermite nodes in `dim` dimensions: every node is
/// a `dim`-vector of standard-normal abscissae with its product weight.
pub fn gauss_hermite_grid(dim: usize, n: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let (x, w) = gauss_hermite(n);
    let mut nodes = vec![Vec::new()];
    let mut weights = vec![1.0];
    for _ in 0..dim {
        let mut nn = Vec::with_capacity(nodes.len() * n);
        let mut nw = Vec::with_capacity(nodes.len() * n);
        for (p, pw) in nodes.iter().zip(&weights) {
            for (xi, wi) in x.iter().zip(&w) {
                let mut q = p.clone();
                q.push(*xi);
                nn.push(q);
                nw.push(pw * wi);
            }
        }
        nodes = nn;
        weights = nw;
    }
    (nodes, weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hermite_moments() {
        let (x, w) = gauss_hermite(5);
        let m = |p: i32| x.iter().zip(&w).map(|(x, w)| w * x.powi(p)).sum::<f64>();
        assert!((m(0) - 1.0).abs() < 1e-13);
        assert!(m(1).abs() < 1e-13);
        assert!((m(2) - 1.0).abs() < 1e-13);
        assert!((m(4) - 3.0).abs() < 1e-12);
        assert!((m(8) - 105.0).abs() < 1e-9);
    }

    #[test]
    fn hermite_grid_product() {
        let (nodes, w) = gauss_hermite_grid(2, 3);
        assert_eq!(nodes.len(), 9);
        let e: f64 = nodes.iter().zip(&w).map(|(n, w)| w * n[0] * n[0] * n[1] * n[1]).sum();
        assert!((e - 1.0).abs() < 1e-13);
    }

    #[test]
    fn trapezoid_is_exact_for_linear() {
        let g = TimeGrid::geometric(0.01, 10.0, 64).unwrap();
        let v: Vec<f64> = g.times().iter().map(|t| 2.0 * t + 1.0).collect();
        let exact = (100.0 - 1e-4) + (10.0 - 0.01);
        assert!((g.integrate(&v) - exact).abs() < 1e-10);
        assert_eq!(g.times()[63], 10.0);
    }
}
