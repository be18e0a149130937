//! Gradient-identity checks on affine generators with analytic scores.
//!
//! Worked 1-D example of the frozen-sampling convention used by the
//! regularizer check. Take `x0 = a z + b`, `q = N(0, 1)`, EDM, score space,
//! SquaredL2 and a single time `t`. With `v = a^2 s^2 + t^2` the generator
//! marginal is `N(b, v)` and the score gap is
//! `y(x) = -(x - b)/v + x/(1 + t^2)`. The oracle keeps the samples
//! `x_t = a0 z + b0 + t eps` fixed at the centre `theta0 = (a0, b0)` and only
//! moves the score:
//!
//! ```text
//! D(theta) = E_{x ~ p_{theta0,t}} [ y_theta(x)^2 ],   dD/db = E[2 y / v] = 2 E[y] / v
//! ```
//!
//! Differentiating through the samples instead would add the pathwise
//! term `E[2 y y']`, which is a different quantity. The loss side
//! differentiates `-2 y(x_t)(s_p(x_t) + eps/t)` through `x_t` with the
//! score parameters frozen; its expectation matches `dD/db` by the
//! score-projection identity.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::fields::VectorField;
use super::report::CheckReport;
use crate::analytic::{
    divergence_exact, divergence_frozen, gauss_hermite_grid, AffineGenerator, DivergenceSetup,
    FrozenSamples, GaussianMixture, TimeGrid,
};
use crate::error::{Error, Result};
use crate::losses::{cfg_reward_loss, di_star_reg_loss, dipp_kl_loss, GeneratorBatch, LossContext, NoiseDraw};
use crate::models::{AnalyticScore, Generator, PushforwardScore, ScoreSource};
use crate::numerics::{rng::standard_normal, Array, Tape, Var};
use crate::processes::{ForwardProcess, LossSpace, WeightingFunction};

/// `max_i |a_i - b_i| / max_j |b_j|`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let den = b.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        num / den
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).fold(0.0, f64::max)
}

/// Central differences of `f` at `x0`.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> Result<f64>, x0: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut g = Vec::with_capacity(x0.len());
    let mut x = x0.to_vec();
    for i in 0..x0.len() {
        x[i] = x0[i] + h;
        let fp = f(&x)?;
        x[i] = x0[i] - h;
        let fm = f(&x)?;
        x[i] = x0[i];
        g.push((fp - fm) / (2.0 * h));
    }
    Ok(g)
}

/// FD gradient at `h`, plus the relative change when the step is halved.
fn validated_fd(f: &mut dyn FnMut(&[f64]) -> Result<f64>, x0: &[f64], h: f64) -> Result<(Vec<f64>, f64)> {
    if !(h > 0.0) {
        return Err(Error::invalid(format!("fd_step must be positive, got {h}")));
    }
    let g1 = central_difference(f, x0, h)?;
    let g2 = central_difference(f, x0, h / 2.0)?;
    let scale = max_abs(&g2);
    let change = if scale < 1e-12 { 0.0 } else { relative_error(&g1, &g2) };
    Ok((g2, change))
}

/// Largest tolerated relative change of the FD gradient under step halving.
pub const FD_STABILITY: f64 = 0.1;

/// Latent and noise draws from a fresh generator seeded with `seed`; the
/// returned word position lets callers assert that paired evaluations
/// consumed identical streams.
fn crn_draw(seed: u64, n: usize, p: &AffineGenerator) -> (Array, Array, u128) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = p.sample_latent(n, &mut rng);
    let eps = standard_normal(&mut rng, n, p.dim());
    (z, eps, rng.get_word_pos())
}

/// Gauss–Hermite nodes over `(z, eps)` with `z` scaled by `sigma_init`.
fn gh_draw(p: &AffineGenerator, points: usize) -> (Array, Array, Vec<f64>) {
    let (k, d) = (p.latent_dim(), p.dim());
    let (nodes, w) = gauss_hermite_grid(k + d, points);
    let n = nodes.len();
    let mut z = Array::zeros(n, k);
    let mut eps = Array::zeros(n, d);
    for (i, node) in nodes.iter().enumerate() {
        for c in 0..k {
            z.set(i, c, node[c] * p.sigma_init());
        }
        for c in 0..d {
            eps.set(i, c, node[k + c]);
        }
    }
    (z, eps, w)
}

trait BatchLoss {
    fn eval<'t>(&self, b: &GeneratorBatch<'t>) -> Result<Var<'t>>;
}

struct RegLoss<'a> {
    assistant: &'a dyn ScoreSource,
    reference: &'a dyn ScoreSource,
    distance: crate::losses::DistanceFunction,
    ctx: LossContext,
}

impl BatchLoss for RegLoss<'_> {
    fn eval<'t>(&self, b: &GeneratorBatch<'t>) -> Result<Var<'t>> {
        di_star_reg_loss(b, self.assistant, self.reference, &self.distance, &self.ctx)
    }
}

struct KlLoss<'a> {
    assistant: &'a dyn ScoreSource,
    reference: &'a dyn ScoreSource,
    ctx: LossContext,
}

impl BatchLoss for KlLoss<'_> {
    fn eval<'t>(&self, b: &GeneratorBatch<'t>) -> Result<Var<'t>> {
        dipp_kl_loss(b, self.assistant, self.reference, &self.ctx)
    }
}

struct CfgLoss<'a> {
    reference: &'a dyn ScoreSource,
    omega: f64,
    ctx: LossContext,
}

impl BatchLoss for CfgLoss<'_> {
    fn eval<'t>(&self, b: &GeneratorBatch<'t>) -> Result<Var<'t>> {
        cfg_reward_loss(b, self.reference, self.omega, &self.ctx)
    }
}

/// Backward-pass gradient w.r.t. the flattened affine parameters of
/// `sum_j grid_w_j sum_i row_w_i L(z_i, eps_i, t_j)`, one tape per node.
#[allow(clippy::too_many_arguments)]
fn affine_loss_gradient(
    p: &AffineGenerator,
    grid: &TimeGrid,
    z: &Array,
    eps: &Array,
    row_w: &[f64],
    cond: Option<usize>,
    process: &ForwardProcess,
    loss: &dyn BatchLoss,
) -> Result<Vec<f64>> {
    let (gen, store) = Generator::from_affine(p, "gen", cond.map_or(0, |c| c + 1))?;
    let mut total = vec![0.0; p.flat().len()];
    let n = z.rows();
    for (&t, &wq) in grid.times().iter().zip(grid.weights()) {
        let tape = Tape::new();
        let params = store.bind(&tape);
        let conds = vec![cond; n];
        let x0 = gen.forward(z, &conds, &params)?;
        let noise = NoiseDraw {
            times: vec![t; n],
            eps: eps.clone(),
        };
        let batch = GeneratorBatch::new(x0, noise, conds, process)?
            .with_weights(row_w.iter().map(|w| w * wq).collect())?;
        let l = loss.eval(&batch)?;
        let grads = tape.backward(&l)?;
        let flat: Vec<f64> = store
            .collect_grads(&grads, &params)
            .iter()
            .flat_map(|g| g.data().to_vec())
            .collect();
        for (a, b) in total.iter_mut().zip(flat) {
            *a += b;
        }
    }
    Ok(total)
}

// ---------------------------------------------------------------------
// score projection

/// Monte Carlo estimate of `E[u(x_t)^T (s_{p,t}(x_t) - grad log q_t(x_t | x0))]`
/// with `x0 ~ p`. `score_shift` moves the mean of the law whose score is
/// used (0 for the real identity).
fn projection_estimate(
    p: &AffineGenerator,
    process: &ForwardProcess,
    t: f64,
    u: &VectorField,
    n: usize,
    seed: u64,
    score_shift: f64,
) -> Result<(f64, f64)> {
    if n < 2 {
        return Err(Error::invalid("projection check needs n >= 2"));
    }
    let scorer = AffineGenerator::new(
        p.a().clone(),
        p.b().iter().map(|b| b + score_shift).collect(),
        p.sigma_init(),
    )?;
    let g = scorer.diffused_pushforward(process, t)?;
    let (a, b) = (process.alpha(t), process.beta(t));
    let d = p.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sum, mut sum2) = (0.0, 0.0);
    let chunk = 100_000;
    let mut done = 0;
    let mut uv = vec![0.0; d];
    let mut xt = vec![0.0; d];
    while done < n {
        let m = chunk.min(n - done);
        let z = p.sample_latent(m, &mut rng);
        let eps = standard_normal(&mut rng, m, d);
        let x0 = p.generate(&z)?;
        for i in 0..m {
            for c in 0..d {
                xt[c] = a * x0.get(i, c) + b * eps.get(i, c);
            }
            let s = g.score(&xt);
            u.eval(&xt, &mut uv)?;
            let v: f64 = (0..d).map(|c| uv[c] * (s[c] + eps.get(i, c) / b)).sum();
            sum += v;
            sum2 += v * v;
        }
        done += m;
    }
    let mean = sum / n as f64;
    let var = (sum2 - n as f64 * mean * mean) / (n - 1) as f64;
    Ok((mean, (var.max(0.0) / n as f64).sqrt()))
}

/// Score-projection identity: passes if the estimate is within `4 SE` of 0.
pub fn check_score_projection(
    name: &str,
    p: &AffineGenerator,
    process: &ForwardProcess,
    t: f64,
    u: &VectorField,
    n: usize,
    seed: u64,
) -> Result<CheckReport> {
    process.check_time(t)?;
    let (m, se) = projection_estimate(p, process, t, u, n, seed, 0.0)?;
    Ok(CheckReport::new(name, m, 0.0, 4.0 * se)
        .with_se(se)
        .with_run(n, seed)
        .detail("t", t))
}

/// Control: the score of a law shifted by `shift` must violate the
/// identity by more than `10 SE`.
#[allow(clippy::too_many_arguments)]
pub fn score_projection_control(
    name: &str,
    p: &AffineGenerator,
    process: &ForwardProcess,
    t: f64,
    u: &VectorField,
    n: usize,
    seed: u64,
    shift: f64,
) -> Result<CheckReport> {
    process.check_time(t)?;
    let (m, se) = projection_estimate(p, process, t, u, n, seed, shift)?;
    Ok(CheckReport::new(name, m, 0.0, 10.0 * se)
        .with_se(se)
        .with_run(n, seed)
        .detail("t", t)
        .detail("shift", shift)
        .control())
}

// ---------------------------------------------------------------------
// Theorem 1: regularizer gradient vs divergence gradient

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradientPath {
    /// Closed-form divergence; Gauss–Hermite expectation on the loss side.
    Exact,
    /// Monte Carlo on both sides with common random numbers.
    MonteCarlo,
}

/// Which generator loss is differentiated against the divergence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RegularizerUnderTest {
    #[default]
    DiStar,
    /// The integral-KL surrogate: a different objective, so comparing it
    /// with the score-divergence gradient is a negative control.
    KlSurrogate,
}

#[derive(Clone, Debug)]
pub struct Theorem1Case {
    pub name: String,
    pub loss: RegularizerUnderTest,
    pub p: AffineGenerator,
    pub q: GaussianMixture,
    pub setup: DivergenceSetup,
    pub path: GradientPath,
    /// Monte Carlo sample count (ignored on the exact path).
    pub n: usize,
    pub fd_step: f64,
    pub seed: u64,
    pub tolerance: f64,
}

pub const DEFAULT_FD_STEP: f64 = 1e-3;
/// Nodes per dimension of the exact path's quadrature; the integrand is a
/// low-degree polynomial in `(z, eps)` so 5 is already exact.
pub const GH_POINTS: usize = 5;

/// Both gradients of one case.
pub struct GradientPair {
    pub loss: Vec<f64>,
    pub oracle: Vec<f64>,
    /// Relative change of the oracle FD gradient under step halving.
    pub fd_change: f64,
    pub samples: usize,
}

impl Theorem1Case {
    pub fn gradients(&self) -> Result<GradientPair> {
        let setup = &self.setup;
        let ctx = LossContext {
            process: setup.process,
            space: setup.space,
            weighting: setup.weighting,
        };
        let assistant = PushforwardScore::new(self.p.clone(), setup.process);
        let reference = AnalyticScore::new(self.q.clone(), setup.process)?;
        let reg = RegLoss {
            assistant: &assistant,
            reference: &reference,
            distance: setup.distance,
            ctx,
        };
        let kl = KlLoss {
            assistant: &assistant,
            reference: &reference,
            ctx,
        };
        let loss: &dyn BatchLoss = match self.loss {
            RegularizerUnderTest::DiStar => &reg,
            RegularizerUnderTest::KlSurrogate => &kl,
        };
        let theta0 = self.p.flat();
        match self.path {
            GradientPath::Exact => {
                let (z, eps, w) = gh_draw(&self.p, GH_POINTS);
                let g = affine_loss_gradient(&self.p, &setup.grid, &z, &eps, &w, None, &setup.process, loss)?;
                let mut f = |th: &[f64]| -> Result<f64> {
                    divergence_exact(&self.p, &self.p.with_flat(th)?, &self.q, setup)?
                        .ok_or_else(|| Error::invalid("exact path needs SquaredL2 and a single-Gaussian q"))
                };
                let (fd, change) = validated_fd(&mut f, &theta0, self.fd_step)?;
                Ok(GradientPair {
                    loss: g,
                    oracle: fd,
                    fd_change: change,
                    samples: z.rows(),
                })
            }
            GradientPath::MonteCarlo => {
                let (z, eps, _) = crn_draw(self.seed, self.n, &self.p);
                let w = vec![1.0 / self.n as f64; self.n];
                let g = affine_loss_gradient(&self.p, &setup.grid, &z, &eps, &w, None, &setup.process, loss)?;
                let frozen = FrozenSamples::from_noise(&self.p, setup, z, eps)?;
                let mut f = |th: &[f64]| -> Result<f64> {
                    Ok(divergence_frozen(&frozen, &self.p.with_flat(th)?, &self.q, setup)?.value)
                };
                let (fd, change) = validated_fd(&mut f, &theta0, self.fd_step)?;
                Ok(GradientPair {
                    loss: g,
                    oracle: fd,
                    fd_change: change,
                    samples: self.n,
                })
            }
        }
    }

    /// Relative gradient error against the tolerance.
    pub fn run(&self) -> Result<CheckReport> {
        let g = self.gradients()?;
        let rel = relative_error(&g.loss, &g.oracle);
        let r = CheckReport::new(&self.name, rel, 0.0, self.tolerance)
            .with_run(g.samples, self.seed)
            .detail("loss_grad_max", max_abs(&g.loss))
            .detail("fd_grad_max", max_abs(&g.oracle))
            .detail("fd_step", self.fd_step)
            .detail("fd_step_change", g.fd_change);
        Ok(if g.fd_change > FD_STABILITY {
            r.fail_with("fd_step_unstable", 1.0)
        } else {
            r
        })
    }

    /// At `p == q` both gradients vanish: reports the larger magnitude
    /// against an absolute tolerance.
    pub fn run_stationary(&self) -> Result<CheckReport> {
        let g = self.gradients()?;
        let m = max_abs(&g.loss).max(max_abs(&g.oracle));
        Ok(CheckReport::new(&self.name, m, 0.0, self.tolerance)
            .with_run(g.samples, self.seed)
            .detail("loss_grad_max", max_abs(&g.loss))
            .detail("fd_grad_max", max_abs(&g.oracle)))
    }
}

// ---------------------------------------------------------------------
// Theorem 2: guidance-reward gradient vs implicit reward gradient

#[derive(Clone, Debug)]
pub struct Theorem2Case {
    pub name: String,
    pub gen: AffineGenerator,
    /// Labeled mixture; the conditional is the sub-mixture of `class`.
    pub reference: GaussianMixture,
    pub class: usize,
    pub process: ForwardProcess,
    pub grid: TimeGrid,
    pub weighting: WeightingFunction,
    pub space: LossSpace,
    pub omega: f64,
    pub n: usize,
    pub fd_step: f64,
    pub seed: u64,
    pub tolerance: f64,
    /// Negate the loss gradient: the `+w (s(c) - s(∅))ᵀ x_t` sign
    /// convention, kept as a negative control.
    pub flip_sign: bool,
}

impl Theorem2Case {
    fn ctx(&self) -> LossContext {
        LossContext {
            process: self.process,
            space: self.space,
            weighting: self.weighting,
        }
    }

    /// Monte Carlo implicit reward
    /// `R(theta) = sum_j grid_w_j w(t_j) k(t_j) omega mean_i log(p_t(x_t|c)/p_t(x_t))`
    /// with `x_t` built from fresh draws of the case seed (so every
    /// evaluation sees identical noise).
    pub fn implicit_reward(&self, gen: &AffineGenerator) -> Result<(f64, u128)> {
        if self.weighting.needs_gap() {
            return Err(Error::invalid("implicit-reward oracle needs a sample-independent weighting"));
        }
        let (z, eps, pos) = crn_draw(self.seed, self.n, gen);
        let x0 = gen.generate(&z)?;
        let scores = AnalyticScore::new(self.reference.clone(), self.process)?;
        let mut total = 0.0;
        for (&t, &wq) in self.grid.times().iter().zip(self.grid.weights()) {
            let cond = scores.marginal(t, Some(self.class))?;
            let full = scores.marginal(t, None)?;
            let xt = self.process.diffuse(&x0, t, &eps)?;
            let mean = (0..xt.rows())
                .map(|i| cond.log_density(xt.row_slice(i)) - full.log_density(xt.row_slice(i)))
                .sum::<f64>()
                / xt.rows() as f64;
            let k = self.space.scale(&self.process, t);
            total += wq * self.weighting.weight(t, None)? * k * self.omega * mean;
        }
        Ok((total, pos))
    }

    pub fn gradients(&self) -> Result<GradientPair> {
        let (z, eps, _) = crn_draw(self.seed, self.n, &self.gen);
        let reference = AnalyticScore::new(self.reference.clone(), self.process)?;
        let loss = CfgLoss {
            reference: &reference,
            omega: self.omega,
            ctx: self.ctx(),
        };
        let w = vec![1.0 / self.n as f64; self.n];
        let mut g = affine_loss_gradient(&self.gen, &self.grid, &z, &eps, &w, Some(self.class), &self.process, &loss)?;
        if self.flip_sign {
            g.iter_mut().for_each(|v| *v = -*v);
        }
        let mut last_pos: Option<u128> = None;
        let mut f = |th: &[f64]| -> Result<f64> {
            let (r, pos) = self.implicit_reward(&self.gen.with_flat(th)?)?;
            if *last_pos.get_or_insert(pos) != pos {
                return Err(Error::invalid("paired evaluations consumed different noise streams"));
            }
            Ok(-r)
        };
        let (fd, change) = validated_fd(&mut f, &self.gen.flat(), self.fd_step)?;
        Ok(GradientPair {
            loss: g,
            oracle: fd,
            fd_change: change,
            samples: self.n,
        })
    }

    pub fn run(&self) -> Result<CheckReport> {
        let g = self.gradients()?;
        let rel = relative_error(&g.loss, &g.oracle);
        let r = CheckReport::new(&self.name, rel, 0.0, self.tolerance)
            .with_run(g.samples, self.seed)
            .detail("loss_grad_max", max_abs(&g.loss))
            .detail("fd_grad_max", max_abs(&g.oracle))
            .detail("fd_step", self.fd_step)
            .detail("fd_step_change", g.fd_change);
        Ok(if g.fd_change > FD_STABILITY {
            r.fail_with("fd_step_unstable", 1.0)
        } else {
            r
        })
    }

    /// Moving the generator mean a fraction `step` toward the class
    /// conditional mean must raise the implicit reward. Reports the
    /// reward gain, required to be positive.
    pub fn run_sign_test(&self, step: f64) -> Result<CheckReport> {
        let target = self.reference.conditional(self.class)?.mean();
        let moved = AffineGenerator::new(
            self.gen.a().clone(),
            self.gen.b().iter().zip(&target).map(|(b, m)| b + step * (m - b)).collect(),
            self.gen.sigma_init(),
        )?;
        let (r0, _) = self.implicit_reward(&self.gen)?;
        let (r1, _) = self.implicit_reward(&moved)?;
        let gain = r1 - r0;
        // pass iff gain > 0: |gain - oracle| <= tol with oracle = tol = +inf
        // would be opaque, so encode as estimate = min(gain, 0)
        let mut rep = CheckReport::new(format!("{}-sign", self.name), gain.min(0.0), 0.0, 0.0)
            .with_run(self.n, self.seed)
            .detail("reward_before", r0)
            .detail("reward_after", r1)
            .detail("gain", gain);
        rep.pass = gain > 0.0;
        Ok(rep)
    }
}
