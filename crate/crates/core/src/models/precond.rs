use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Array;
use crate::processes::ForwardProcess;

/// EDM preconditioning coefficients at noise level `sigma`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdmCoeffs {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

impl EdmCoeffs {
    pub fn new(sigma: f64, sigma_data: f64) -> Self {
        let s2 = sigma * sigma;
        let d2 = sigma_data * sigma_data;
        let r = (s2 + d2).sqrt();
        Self {
            c_skip: d2 / (s2 + d2),
            c_out: sigma * sigma_data / r,
            c_in: 1.0 / r,
            c_noise: sigma.ln() / 4.0,
        }
    }
}

/// Noise level of `x_t / alpha(t)`: `beta(t) / alpha(t)` (`t` under EDM).
pub fn effective_sigma(process: &ForwardProcess, t: f64) -> f64 {
    process.beta(t) / process.alpha(t)
}

fn per_row(
    x: &Array,
    other: &Array,
    times: &[f64],
    op: &'static str,
    f: impl Fn(f64, f64, f64) -> f64,
) -> Result<Array> {
    if x.dims() != other.dims() || times.len() != x.rows() {
        return Err(Error::Shape {
            op,
            left: x.shape().to_vec(),
            right: other.shape().to_vec(),
        });
    }
    let mut out = Array::zeros(x.rows(), x.cols());
    for (r, &t) in times.iter().enumerate() {
        for ((o, &a), &b) in out.row_slice_mut(r).iter_mut().zip(x.row_slice(r)).zip(other.row_slice(r)) {
            *o = f(t, a, b);
        }
    }
    Ok(out)
}

/// `s = (alpha d - x) / beta^2`; under EDM `(d - x) / t^2`.
pub fn score_from_denoiser(process: &ForwardProcess, x_t: &Array, d: &Array, times: &[f64]) -> Result<Array> {
    for &t in times {
        process.check_time(t)?;
    }
    per_row(x_t, d, times, "score_from_denoiser", |t, x, d| {
        let b = process.beta(t);
        (process.alpha(t) * d - x) / (b * b)
    })
}

/// `d = (x + beta^2 s) / alpha`; under EDM `x + t^2 s`.
pub fn denoiser_from_score(process: &ForwardProcess, x_t: &Array, s: &Array, times: &[f64]) -> Result<Array> {
    per_row(x_t, s, times, "denoiser_from_score", |t, x, s| {
        let b = process.beta(t);
        (x + b * b * s) / process.alpha(t)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coefficients_at_sigma_data() {
        let c = EdmCoeffs::new(0.5, 0.5);
        assert!((c.c_skip - 0.5).abs() < 1e-15);
        assert!((c.c_out - 0.5f64.sqrt() * 0.5).abs() < 1e-15);
    }

    #[test]
    fn identity_denoiser_gives_zero_score() {
        let p = ForwardProcess::edm();
        let x = Array::from_rows(&[vec![0.3, -1.0], vec![2.0, 5.0]]).unwrap();
        let s = score_from_denoiser(&p, &x, &x, &[0.5, 3.0]).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conversion_roundtrips() {
        let p = ForwardProcess::edm();
        let x = Array::from_rows(&[vec![0.75, -1.5], vec![2.0, 4.25]]).unwrap();
        let d = Array::from_rows(&[vec![0.5, 0.25], vec![-1.0, 3.0]]).unwrap();
        let times = [0.5, 2.0];
        let s = score_from_denoiser(&p, &x, &d, &times).unwrap();
        assert_eq!(denoiser_from_score(&p, &x, &s, &times).unwrap(), d);
    }
}
