use rand::Rng;
use serde::Serialize;

use super::{DistanceFunction, RewardFunction};
use crate::error::{Error, Result};
use crate::models::{ScoreModel, ScoreSource};
use crate::numerics::{rng::standard_normal, Array, Var};
use crate::processes::{ForwardProcess, LossSpace, TimeDistribution, WeightingFunction};

/// Shared settings of the generator-side objectives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossContext {
    pub process: ForwardProcess,
    pub space: LossSpace,
    /// `w(t)`.
    pub weighting: WeightingFunction,
}

/// Times and diffusion noise for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub times: Vec<f64>,
    pub eps: Array,
}

impl NoiseDraw {
    /// One time per row from `dist` (truncated for `process`), unit
    /// normal noise from a separate stream.
    pub fn sample<R1: Rng + ?Sized, R2: Rng + ?Sized>(
        n: usize,
        dim: usize,
        dist: &TimeDistribution,
        process: &ForwardProcess,
        time_rng: &mut R1,
        noise_rng: &mut R2,
    ) -> Self {
        Self {
            times: dist.sample_n(process, n, time_rng),
            eps: standard_normal(noise_rng, n, dim),
        }
    }
}

/// Generator samples diffused to per-row times. `x_t` carries the
/// generator's gradient through `x0`; noise and times are constants.
#[derive(Clone, Debug)]
pub struct GeneratorBatch<'t> {
    pub x0: Var<'t>,
    pub x_t: Var<'t>,
    pub times: Vec<f64>,
    pub eps: Array,
    pub cond: Vec<Option<usize>>,
    /// Per-row multipliers; `1/n` each gives a batch mean.
    pub weights: Vec<f64>,
}

impl<'t> GeneratorBatch<'t> {
    pub fn new(
        x0: Var<'t>,
        noise: NoiseDraw,
        cond: Vec<Option<usize>>,
        process: &ForwardProcess,
    ) -> Result<Self> {
        let n = x0.value().rows();
        if cond.len() != n || noise.times.len() != n {
            return Err(Error::Shape {
                op: "generator_batch",
                left: x0.shape().to_vec(),
                right: vec![noise.times.len(), cond.len()],
            });
        }
        if n == 0 {
            return Err(Error::invalid("empty batch"));
        }
        let x_t = process.diffuse_var(&x0, &noise.times, &noise.eps)?;
        Ok(Self {
            x0,
            x_t,
            times: noise.times,
            eps: noise.eps,
            cond,
            weights: vec![1.0 / n as f64; n],
        })
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.len() {
            return Err(Error::invalid("one weight per row required"));
        }
        self.weights = weights;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// `-(x_t - alpha x0) / beta^2` at the batch's values; equals
    /// `-eps / beta` and is always detached.
    pub fn transition_score(&self, process: &ForwardProcess) -> Result<Array> {
        process.transition_score(self.x_t.value(), self.x0.value(), &self.times)
    }
}

fn kappa_column(ctx: &LossContext, times: &[f64]) -> Var<'static> {
    Var::constant(Array::column(
        &times.iter().map(|&t| ctx.space.scale(&ctx.process, t)).collect::<Vec<_>>(),
    ))
}

/// `weights_i * w(t_i, gap_i)` as a constant column.
fn weight_column(
    wf: &WeightingFunction,
    times: &[f64],
    weights: &[f64],
    gap: &Array,
) -> Result<Var<'static>> {
    let col = times
        .iter()
        .zip(weights)
        .enumerate()
        .map(|(i, (&t, &m))| Ok(m * wf.weight(t, Some(gap.row_slice(i)))?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Var::constant(Array::column(&col)))
}

/// Fails with the term's name if its value is not finite.
pub fn ensure_finite(term: &str, v: &Var<'_>) -> Result<()> {
    if v.value().is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("loss term `{term}`")))
    }
}

/// `sum_i weights_i lambda(t_i) ||k(t_i) (s_i - s_trans,i)||^2` for an
/// already evaluated score. `x0` is data (constant).
pub fn dsm_from_score<'t>(
    score: &Var<'t>,
    x_t: &Array,
    x0: &Array,
    times: &[f64],
    process: &ForwardProcess,
    lambda: &WeightingFunction,
    space: LossSpace,
) -> Result<Var<'t>> {
    let n = times.len();
    let ts = process.transition_score(x_t, x0, times)?;
    let ctx = LossContext {
        process: *process,
        space,
        weighting: *lambda,
    };
    let resid = score.sub(&Var::constant(ts))?.mul(&kappa_column(&ctx, times))?;
    let w = weight_column(lambda, times, &vec![1.0 / n as f64; n], resid.value())?;
    resid.square()?.sum_rows()?.mul(&w)?.sum()
}

/// Weighted denoising score matching for a score network on clean data
/// `x0` with explicit times and noise. Differentiable in `params` only.
#[allow(clippy::too_many_arguments)]
pub fn dsm_loss<'t>(
    model: &ScoreModel,
    params: &[Var<'t>],
    x0: &Array,
    cond: &[Option<usize>],
    noise: &NoiseDraw,
    lambda: &WeightingFunction,
    space: LossSpace,
) -> Result<Var<'t>> {
    if x0.rows() == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let process = model.process();
    let x_t = process.diffuse_var(&Var::constant(x0.clone()), &noise.times, &noise.eps)?;
    let s = model.score(&x_t, &noise.times, cond, params)?;
    let loss = dsm_from_score(&s, x_t.value(), x0, &noise.times, process, lambda, space)?;
    ensure_finite("dsm", &loss)?;
    Ok(loss)
}

/// Tractable score-divergence regularizer
///
/// ```text
/// L = -sum_i weights_i w(t_i) d'(y_i)^T k (s_a(x_t) - s_trans),   y = k (s_a - s_ref)
/// ```
///
/// Both score fields are evaluated with frozen parameters; the generator
/// gradient reaches `x_t` through `d'(y(x_t))` and `s_a(x_t)` (the
/// transition score is constant). With the assistant equal to the true
/// generator score this has the same parameter gradient as the divergence
/// evaluated under a frozen sampling law.
pub fn di_star_reg_loss<'t>(
    batch: &GeneratorBatch<'t>,
    assistant: &dyn ScoreSource,
    reference: &dyn ScoreSource,
    distance: &DistanceFunction,
    ctx: &LossContext,
) -> Result<Var<'t>> {
    let s_a = assistant.score(&batch.x_t, &batch.times, &batch.cond)?;
    let s_r = reference.score(&batch.x_t, &batch.times, &batch.cond)?;
    let kappa = kappa_column(ctx, &batch.times);
    let y = s_a.sub(&s_r)?.mul(&kappa)?;
    let u = distance.grad_var(&y)?;
    let ts = Var::constant(batch.transition_score(&ctx.process)?);
    let resid = s_a.sub(&ts)?.mul(&kappa)?;
    let w = weight_column(&ctx.weighting, &batch.times, &batch.weights, y.value())?;
    let loss = u.row_dot(&resid)?.mul(&w)?.sum()?.neg()?;
    ensure_finite("reg", &loss)?;
    Ok(loss)
}

/// Integral-KL surrogate: `sum_i weights_i w(t_i) k sg[s_a - s_ref]^T x_t`.
pub fn dipp_kl_loss<'t>(
    batch: &GeneratorBatch<'t>,
    assistant: &dyn ScoreSource,
    reference: &dyn ScoreSource,
    ctx: &LossContext,
) -> Result<Var<'t>> {
    let x = batch.x_t.value();
    let s_a = assistant.score_values(x, &batch.times, &batch.cond)?;
    let s_r = reference.score_values(x, &batch.times, &batch.cond)?;
    let gap = Var::constant(s_a)
        .sub(&Var::constant(s_r))?
        .mul(&kappa_column(ctx, &batch.times))?;
    let w = weight_column(&ctx.weighting, &batch.times, &batch.weights, gap.value())?;
    let loss = gap.row_dot(&batch.x_t)?.mul(&w)?.sum()?;
    ensure_finite("reg", &loss)?;
    Ok(loss)
}

/// Implicit classifier-free-guidance reward loss
///
/// ```text
/// L = -sum_i weights_i w(t_i) k omega (s_ref(sg x_t | c) - s_ref(sg x_t | ∅))^T x_t
/// ```
///
/// whose gradient is that of `-w k omega log(p(x_t|c) / p(x_t))`. Rows
/// with a null condition contribute zero.
pub fn cfg_reward_loss<'t>(
    batch: &GeneratorBatch<'t>,
    reference: &dyn ScoreSource,
    omega: f64,
    ctx: &LossContext,
) -> Result<Var<'t>> {
    let x = batch.x_t.value();
    let null = vec![None; batch.len()];
    let s_c = reference.score_values(x, &batch.times, &batch.cond)?;
    let s_0 = reference.score_values(x, &batch.times, &null)?;
    let gap = Var::constant(s_c)
        .sub(&Var::constant(s_0))?
        .mul(&kappa_column(ctx, &batch.times))?
        .scale(omega)?;
    let w = weight_column(&ctx.weighting, &batch.times, &batch.weights, gap.value())?;
    let loss = gap.row_dot(&batch.x_t)?.mul(&w)?.sum()?.neg()?;
    ensure_finite("cfg", &loss)?;
    Ok(loss)
}

/// `-mean_i r(x0_i, c_i)`, differentiable through the generator output.
pub fn explicit_reward_loss<'t>(x0: &Var<'t>, cond: &[Option<usize>], reward: &RewardFunction) -> Result<Var<'t>> {
    let loss = reward.value_var(x0, cond)?.mean()?.neg()?;
    ensure_finite("reward", &loss)?;
    Ok(loss)
}

/// Scaled loss terms of one generator step; `total = reg + reward + cfg`.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub reg: f64,
    pub reward: f64,
    pub cfg: f64,
    pub total: f64,
    /// Per-term gradient norms when requested.
    pub grad_norms: Option<TermGradNorms>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TermGradNorms {
    pub reg: f64,
    pub reward: f64,
    pub cfg: f64,
}
