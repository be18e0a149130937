//! Score fields evaluated with frozen parameters.
//!
//! Every [`ScoreSource`] treats its own parameters as constants, but the
//! result stays differentiable in `x_t` when `x_t` is attached. That is
//! exactly the stop-gradient pattern of the generator losses: the
//! assistant and reference never receive gradient, while the generator
//! does through the sample location.

use super::ScoreModel;
use crate::analytic::{AffineGenerator, Gaussian, GaussianMixture};
use crate::error::{Error, Result};
use crate::numerics::{Array, ParamStore, Var};
use crate::processes::ForwardProcess;

pub trait ScoreSource {
    fn dim(&self) -> usize;

    /// `s(x_t, t, c)` row by row.
    fn score<'t>(&self, x_t: &Var<'t>, times: &[f64], cond: &[Option<usize>]) -> Result<Var<'t>>;

    /// Detached convenience wrapper.
    fn score_values(&self, x_t: &Array, times: &[f64], cond: &[Option<usize>]) -> Result<Array> {
        Ok(self.score(&Var::constant(x_t.clone()), times, cond)?.value().clone())
    }
}

fn check_rows(x_t: &Var<'_>, times: &[f64], cond: &[Option<usize>], dim: usize) -> Result<()> {
    let (rows, cols) = x_t.value().dims();
    if cols != dim || times.len() != rows || cond.len() != rows {
        return Err(Error::Shape {
            op: "score_source",
            left: x_t.shape().to_vec(),
            right: vec![times.len(), cond.len()],
        });
    }
    Ok(())
}

/// Exact scores of a diffused Gaussian mixture; class `c` selects the
/// components labeled `c`, `None` the whole mixture.
#[derive(Clone, Debug)]
pub struct AnalyticScore {
    process: ForwardProcess,
    full: GaussianMixture,
    by_class: Vec<GaussianMixture>,
}

impl AnalyticScore {
    pub fn new(gmm: GaussianMixture, process: ForwardProcess) -> Result<Self> {
        let by_class = (0..gmm.num_classes())
            .map(|c| gmm.conditional(c))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            process,
            full: gmm,
            by_class,
        })
    }

    pub fn mixture(&self) -> &GaussianMixture {
        &self.full
    }

    pub fn process(&self) -> &ForwardProcess {
        &self.process
    }

    pub fn num_classes(&self) -> usize {
        self.by_class.len()
    }

    /// Data-level (t = 0) law for a condition.
    pub fn law(&self, c: Option<usize>) -> Result<&GaussianMixture> {
        match c {
            None => Ok(&self.full),
            Some(k) => self.by_class.get(k).ok_or(Error::UnknownClass {
                class: k,
                classes: self.by_class.len(),
            }),
        }
    }

    /// Diffused law at time `t` for a condition.
    pub fn marginal(&self, t: f64, c: Option<usize>) -> Result<GaussianMixture> {
        self.law(c)?.diffused(&self.process, t)
    }
}

impl ScoreSource for AnalyticScore {
    fn dim(&self) -> usize {
        self.full.dim()
    }

    fn score<'t>(&self, x_t: &Var<'t>, times: &[f64], cond: &[Option<usize>]) -> Result<Var<'t>> {
        check_rows(x_t, times, cond, self.dim())?;
        // rows usually come in runs sharing (t, c); diffuse once per run
        let mut cache: Option<(u64, Option<usize>, GaussianMixture)> = None;
        x_t.map_rows(self.dim(), |i, x, out, jac| {
            let key = (times[i].to_bits(), cond[i]);
            if cache.as_ref().is_none_or(|(t, c, _)| (*t, *c) != key) {
                cache = Some((key.0, key.1, self.marginal(times[i], cond[i])?));
            }
            let m = &cache.as_ref().expect("filled above").2;
            m.score_jacobian(x, out, jac);
            Ok(())
        })
    }
}

/// Exact score of an affine generator's diffused output law (ignores the
/// condition).
#[derive(Clone, Debug)]
pub struct PushforwardScore {
    gen: AffineGenerator,
    process: ForwardProcess,
}

impl PushforwardScore {
    pub fn new(gen: AffineGenerator, process: ForwardProcess) -> Self {
        Self { gen, process }
    }

    pub fn generator(&self) -> &AffineGenerator {
        &self.gen
    }
}

impl ScoreSource for PushforwardScore {
    fn dim(&self) -> usize {
        self.gen.dim()
    }

    fn score<'t>(&self, x_t: &Var<'t>, times: &[f64], cond: &[Option<usize>]) -> Result<Var<'t>> {
        check_rows(x_t, times, cond, self.dim())?;
        let d = self.dim();
        let mut cache: Option<(u64, Gaussian)> = None;
        x_t.map_rows(d, |i, x, out, jac| {
            let key = times[i].to_bits();
            if cache.as_ref().is_none_or(|(t, _)| *t != key) {
                cache = Some((key, self.gen.diffused_pushforward(&self.process, times[i])?));
            }
            let g = &cache.as_ref().expect("filled above").1;
            out.copy_from_slice(&g.score(x));
            if let Some(jac) = jac {
                let p = g.precision();
                for r in 0..d {
                    for c in 0..d {
                        jac[r * d + c] = -p[(r, c)];
                    }
                }
            }
            Ok(())
        })
    }
}

/// A trained network with its parameters held fixed.
#[derive(Clone, Copy, Debug)]
pub struct NetworkScore<'a> {
    pub model: &'a ScoreModel,
    pub params: &'a ParamStore,
}

impl ScoreSource for NetworkScore<'_> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn score<'t>(&self, x_t: &Var<'t>, times: &[f64], cond: &[Option<usize>]) -> Result<Var<'t>> {
        self.model.score(x_t, times, cond, &self.params.frozen())
    }
}

/// `s(∅) + omega (s(c) - s(∅))`. Rows without a condition get `s(∅)`.
pub struct GuidedScore<'a> {
    pub inner: &'a dyn ScoreSource,
    pub omega: f64,
}

impl ScoreSource for GuidedScore<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn score<'t>(&self, x_t: &Var<'t>, times: &[f64], cond: &[Option<usize>]) -> Result<Var<'t>> {
        let cond_part = self.inner.score(x_t, times, cond)?;
        if self.omega == 1.0 {
            return Ok(cond_part);
        }
        let null = vec![None; cond.len()];
        let uncond = self.inner.score(x_t, times, &null)?;
        if self.omega == 0.0 {
            return Ok(uncond);
        }
        uncond.add(&cond_part.sub(&uncond)?.scale(self.omega)?)
    }
}

/// Classifier-free guided score at detached `x_t`:
/// `s(∅) + omega (s(c) - s(∅))`. `omega = 1` returns `s(c)` and
/// `omega = 0` returns `s(∅)` exactly.
pub fn cfg_score(
    source: &dyn ScoreSource,
    x_t: &Array,
    times: &[f64],
    cond: &[Option<usize>],
    omega: f64,
) -> Result<Array> {
    if !(omega >= 0.0) {
        return Err(Error::invalid(format!("guidance scale must be >= 0, got {omega}")));
    }
    let g = GuidedScore { inner: source, omega };
    g.score_values(x_t, times, cond)
}
