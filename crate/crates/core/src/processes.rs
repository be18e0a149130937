//! Linear forward diffusions `x_t = alpha(t) x_0 + beta(t) eps`, time
//! sampling and loss weightings.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Array, Var};

/// Noise range of a 1000-step VP schedule (beta 1e-4 .. 2e-2) viewed in
/// the variance-exploding parameterization.
pub const VP_SIGMA_RANGE: (f64, f64) = (0.01, 156.6155);

/// Default EDM range.
pub const EDM_SIGMA_RANGE: (f64, f64) = (0.002, 80.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProcessKind {
    /// `dx = t dW`: `alpha = 1`, `beta = t`.
    Edm,
    /// A VP model rescaled to the EDM view: same dynamics as `Edm` but
    /// sampled times are truncated to `VP_SIGMA_RANGE`.
    VpEdm,
    /// The unrescaled VP form indexed by sigma:
    /// `alpha = 1/sqrt(1+t^2)`, `beta = t/sqrt(1+t^2)`.
    VpScaled,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardProcess {
    pub kind: ProcessKind,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl ForwardProcess {
    pub fn edm() -> Self {
        Self {
            kind: ProcessKind::Edm,
            sigma_min: EDM_SIGMA_RANGE.0,
            sigma_max: EDM_SIGMA_RANGE.1,
        }
    }

    pub fn vp_edm() -> Self {
        Self {
            kind: ProcessKind::VpEdm,
            sigma_min: VP_SIGMA_RANGE.0,
            sigma_max: VP_SIGMA_RANGE.1,
        }
    }

    pub fn vp_scaled() -> Self {
        Self {
            kind: ProcessKind::VpScaled,
            sigma_min: VP_SIGMA_RANGE.0,
            sigma_max: VP_SIGMA_RANGE.1,
        }
    }

    pub fn with_range(mut self, sigma_min: f64, sigma_max: f64) -> Result<Self> {
        if !(sigma_min > 0.0 && sigma_max > sigma_min) {
            return Err(Error::invalid(format!(
                "bad sigma range [{sigma_min}, {sigma_max}]"
            )));
        }
        self.sigma_min = sigma_min;
        self.sigma_max = sigma_max;
        Ok(self)
    }

    /// Horizon `T`.
    pub fn horizon(&self) -> f64 {
        self.sigma_max
    }

    pub fn alpha(&self, t: f64) -> f64 {
        match self.kind {
            ProcessKind::Edm | ProcessKind::VpEdm => 1.0,
            ProcessKind::VpScaled => 1.0 / (1.0 + t * t).sqrt(),
        }
    }

    pub fn beta(&self, t: f64) -> f64 {
        match self.kind {
            ProcessKind::Edm | ProcessKind::VpEdm => t,
            ProcessKind::VpScaled => t / (1.0 + t * t).sqrt(),
        }
    }

    /// `beta^2 / alpha`, the factor mapping a score residual to a
    /// denoiser (clean-data) residual.
    pub fn denoiser_scale(&self, t: f64) -> f64 {
        let b = self.beta(t);
        b * b / self.alpha(t)
    }

    pub fn is_edm_like(&self) -> bool {
        matches!(self.kind, ProcessKind::Edm | ProcessKind::VpEdm)
    }

    pub fn check_time(&self, t: f64) -> Result<()> {
        if t > 0.0 && t <= self.horizon() {
            Ok(())
        } else {
            Err(Error::Time {
                t,
                horizon: self.horizon(),
            })
        }
    }

    /// Truncation applied to sampled times: the VP-derived view clamps to
    /// its full sigma range, the other kinds only cap at the horizon.
    pub fn clamp_time(&self, t: f64) -> f64 {
        match self.kind {
            ProcessKind::VpEdm => t.clamp(self.sigma_min, self.sigma_max),
            _ => t.min(self.horizon()),
        }
    }

    /// `alpha(t) x0 + beta(t) eps` for a single time.
    pub fn diffuse(&self, x0: &Array, t: f64, eps: &Array) -> Result<Array> {
        self.check_time(t)?;
        if x0.dims() != eps.dims() {
            return Err(Error::Shape {
                op: "diffuse",
                left: x0.shape().to_vec(),
                right: eps.shape().to_vec(),
            });
        }
        let (a, b) = (self.alpha(t), self.beta(t));
        let data = x0.data().iter().zip(eps.data()).map(|(x, e)| a * x + b * e).collect();
        Array::new(x0.shape().to_vec(), data)
    }

    /// Differentiable diffusion with one time per row. Gradient reaches
    /// `x0` only.
    pub fn diffuse_var<'t>(&self, x0: &Var<'t>, times: &[f64], eps: &Array) -> Result<Var<'t>> {
        let rows = x0.value().rows();
        if times.len() != rows || x0.value().dims() != eps.dims() {
            return Err(Error::Shape {
                op: "diffuse",
                left: x0.shape().to_vec(),
                right: eps.shape().to_vec(),
            });
        }
        for &t in times {
            self.check_time(t)?;
        }
        let alpha = Array::column(&times.iter().map(|&t| self.alpha(t)).collect::<Vec<_>>());
        let mut noise = eps.clone();
        for (r, &t) in times.iter().enumerate() {
            let b = self.beta(t);
            noise.row_slice_mut(r).iter_mut().for_each(|v| *v *= b);
        }
        x0.mul(&Var::constant(alpha))?.add(&Var::constant(noise))
    }

    /// `-(x_t - alpha x0) / beta^2`, one time per row. Always detached.
    pub fn transition_score(&self, x_t: &Array, x0: &Array, times: &[f64]) -> Result<Array> {
        if x_t.dims() != x0.dims() || times.len() != x_t.rows() {
            return Err(Error::Shape {
                op: "transition_score",
                left: x_t.shape().to_vec(),
                right: x0.shape().to_vec(),
            });
        }
        let mut out = Array::zeros(x_t.rows(), x_t.cols());
        for (r, &t) in times.iter().enumerate() {
            self.check_time(t)?;
            let (a, b) = (self.alpha(t), self.beta(t));
            let b2 = b * b;
            for ((o, &xt), &x) in out
                .row_slice_mut(r)
                .iter_mut()
                .zip(x_t.row_slice(r))
                .zip(x0.row_slice(r))
            {
                *o = -(xt - a * x) / b2;
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TimeDistribution {
    /// `t = exp(s)`, `s ~ N(p_mean, p_std^2)`.
    LogNormal { p_mean: f64, p_std: f64 },
    /// Uniform on `(0, horizon]`.
    Uniform { horizon: f64 },
}

impl Default for TimeDistribution {
    fn default() -> Self {
        TimeDistribution::LogNormal {
            p_mean: -2.0,
            p_std: 2.0,
        }
    }
}

impl TimeDistribution {
    /// Raw draw, no truncation.
    pub fn sample_raw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            TimeDistribution::LogNormal { p_mean, p_std } => {
                let n: f64 = rng.sample(StandardNormal);
                Self::lognormal_at(p_mean, p_std, n)
            }
            TimeDistribution::Uniform { horizon } => {
                let u: f64 = rng.random();
                horizon * (1.0 - u)
            }
        }
    }

    pub fn lognormal_at(p_mean: f64, p_std: f64, n: f64) -> f64 {
        (p_mean + p_std * n).exp()
    }

    /// Draw truncated for `process`.
    pub fn sample<R: Rng + ?Sized>(&self, process: &ForwardProcess, rng: &mut R) -> f64 {
        process.clamp_time(self.sample_raw(rng))
    }

    pub fn sample_n<R: Rng + ?Sized>(&self, process: &ForwardProcess, n: usize, rng: &mut R) -> Vec<f64> {
        (0..n).map(|_| self.sample(process, rng)).collect()
    }
}

/// Space in which score residuals are measured.
///
/// `Denoiser` multiplies every score difference by `beta^2/alpha`, turning
/// it into a difference of clean-data predictions (`t^2` under EDM).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossSpace {
    Score,
    #[default]
    Denoiser,
}

impl LossSpace {
    pub fn scale(&self, process: &ForwardProcess, t: f64) -> f64 {
        match self {
            LossSpace::Score => 1.0,
            LossSpace::Denoiser => process.denoiser_scale(t),
        }
    }
}

/// Per-time loss weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum WeightingFunction {
    /// `(t^2 + sd^2) / (t sd)^2`
    EdmLambda { sigma_data: f64 },
    Constant,
    /// `1 / ||d_assistant - d_reference||`, per sample, detached.
    AdaptiveGen,
}

/// Floor on the denoiser gap used by [`WeightingFunction::AdaptiveGen`].
pub const ADAPTIVE_GAP_FLOOR: f64 = 1e-8;

impl WeightingFunction {
    /// `gap` is the per-sample denoiser difference, required by
    /// `AdaptiveGen` and ignored otherwise.
    pub fn weight(&self, t: f64, gap: Option<&[f64]>) -> Result<f64> {
        if !(t > 0.0) {
            return Err(Error::Time { t, horizon: f64::INFINITY });
        }
        match *self {
            WeightingFunction::EdmLambda { sigma_data } => {
                let sd2 = sigma_data * sigma_data;
                Ok((t * t + sd2) / (t * t * sd2))
            }
            WeightingFunction::Constant => Ok(1.0),
            WeightingFunction::AdaptiveGen => {
                let gap = gap.ok_or_else(|| {
                    Error::invalid("adaptive weighting needs both denoiser outputs")
                })?;
                let norm = gap.iter().map(|v| v * v).sum::<f64>().sqrt();
                Ok(1.0 / norm.max(ADAPTIVE_GAP_FLOOR))
            }
        }
    }

    pub fn needs_gap(&self) -> bool {
        matches!(self, WeightingFunction::AdaptiveGen)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::standard_normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn edm_diffuse_example() {
        let p = ForwardProcess::edm();
        let x = p.diffuse(&Array::scalar(1.0), 2.0, &Array::scalar(0.5)).unwrap();
        assert_eq!(x.item(), 2.0);
    }

    #[test]
    fn small_time_recovers_data() {
        for p in [ForwardProcess::edm(), ForwardProcess::vp_scaled()] {
            let x0 = Array::row(&[0.3, -1.2]);
            let x = p.diffuse(&x0, 1e-12, &Array::row(&[5.0, 5.0])).unwrap();
            for (a, b) in x.data().iter().zip(x0.data()) {
                assert!((a - b).abs() < 1e-10);
            }
            assert_eq!(p.alpha(0.0), 1.0);
            assert_eq!(p.beta(0.0), 0.0);
        }
    }

    #[test]
    fn time_outside_horizon_rejected() {
        let p = ForwardProcess::edm();
        assert!(p.diffuse(&Array::scalar(0.0), 0.0, &Array::scalar(0.0)).is_err());
        assert!(p.diffuse(&Array::scalar(0.0), 81.0, &Array::scalar(0.0)).is_err());
        let xs = Array::scalar(1.0);
        assert!(matches!(
            p.transition_score(&xs, &xs, &[0.0]),
            Err(Error::Time { .. })
        ));
    }

    #[test]
    fn transition_score_examples() {
        let p = ForwardProcess::edm();
        let s = p
            .transition_score(&Array::scalar(1.0), &Array::scalar(0.0), &[2.0])
            .unwrap();
        assert_eq!(s.item(), -0.25);
        let vp = ForwardProcess::vp_scaled();
        let x0 = Array::row(&[1.0, 2.0]);
        let mean = x0.map(|v| v * vp.alpha(0.7));
        assert!(vp.transition_score(&mean, &x0, &[0.7]).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn transition_score_is_scaled_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for p in [ForwardProcess::edm(), ForwardProcess::vp_scaled()] {
            let x0 = standard_normal(&mut rng, 5, 2);
            let eps = standard_normal(&mut rng, 5, 2);
            let times = [0.05, 0.3, 1.0, 4.0, 20.0];
            let xt = p.diffuse_var(&Var::constant(x0.clone()), &times, &eps).unwrap();
            let s = p.transition_score(xt.value(), &x0, &times).unwrap();
            for (r, &t) in times.iter().enumerate() {
                for c in 0..2 {
                    let expect = -eps.get(r, c) / p.beta(t);
                    assert!((s.get(r, c) - expect).abs() <= 1e-9 * expect.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn transition_score_matches_log_density_gradient() {
        let p = ForwardProcess::vp_scaled();
        let (x0, t) = (0.8, 1.3);
        let (a, b) = (p.alpha(t), p.beta(t));
        let logq = |x: f64| -0.5 * (x - a * x0).powi(2) / (b * b);
        let x = 0.1;
        let h = 1e-5;
        let fd = (logq(x + h) - logq(x - h)) / (2.0 * h);
        let s = p
            .transition_score(&Array::scalar(x), &Array::scalar(x0), &[t])
            .unwrap()
            .item();
        assert!(((s - fd) / s).abs() < 1e-6);
    }

    #[test]
    fn lognormal_median_and_clamp() {
        assert!((TimeDistribution::lognormal_at(-2.0, 2.0, 0.0) - 0.1353).abs() < 1e-4);
        let vp = ForwardProcess::vp_edm();
        assert_eq!(vp.clamp_time(1e-4), 0.01);
        assert_eq!(vp.clamp_time(1e4), 156.6155);
        assert_eq!(ForwardProcess::edm().clamp_time(1e-4), 1e-4);
    }

    #[test]
    fn weights() {
        let w = WeightingFunction::EdmLambda { sigma_data: 0.5 };
        assert!((w.weight(1.0, None).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(WeightingFunction::Constant.weight(7.0, None).unwrap(), 1.0);
        let a = WeightingFunction::AdaptiveGen;
        assert!((a.weight(1.0, Some(&[3.0, 4.0])).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(a.weight(1.0, Some(&[0.0, 0.0])).unwrap(), 1e8);
        assert!(a.weight(1.0, None).is_err());
    }
}
