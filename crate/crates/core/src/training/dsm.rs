//! Denoising score matching, shared by the assistant updates, reference
//! pretraining and the recovery check.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{DsmSettings, ScoreModelSpec};
use crate::analytic::GaussianMixture;
use crate::error::{Error, Result};
use crate::losses::{dsm_loss, NoiseDraw};
use crate::models::ScoreModel;
use crate::numerics::checkpoint::{check_header, write_atomic, ARTIFACT_VERSION, FORMAT_VERSION};
use crate::numerics::{
    grad_norm, AdamSnapshot, AdamState, EmaState, Array, NamedArray, ParamStore, RngSnapshot, RngStreams, Stream, Tape,
};

/// One Adam step of DSM on clean data `x0`. Returns `(loss, grad norm)`.
#[allow(clippy::too_many_arguments)]
pub fn dsm_step(
    model: &ScoreModel,
    params: &mut ParamStore,
    adam: &mut AdamState,
    x0: &Array,
    cond: &[Option<usize>],
    noise: &NoiseDraw,
    settings: &DsmSettings,
) -> Result<(f64, f64)> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let loss = dsm_loss(model, &bound, x0, cond, noise, &settings.lambda, settings.space)?;
    let grads = tape.backward(&loss)?;
    let g = params.collect_grads(&grads, &bound);
    let norm = grad_norm(&g);
    adam.step(params, &g)?;
    Ok((loss.value().item(), norm))
}

/// Labeled draws from a mixture: the condition of each row is the class of
/// its component (replaced by null with probability `dropout`), or null
/// for an unlabeled mixture.
pub fn sample_labeled<R: Rng + ?Sized>(
    gmm: &GaussianMixture,
    n: usize,
    dropout: f64,
    rng: &mut R,
) -> (Array, Vec<Option<usize>>) {
    let (x, comp) = gmm.sample(n, rng);
    let cond = match gmm.classes() {
        None => vec![None; n],
        Some(labels) => comp
            .iter()
            .map(|&k| {
                let drop = dropout > 0.0 && rng.random::<f64>() < dropout;
                (!drop).then_some(labels[k])
            })
            .collect(),
    };
    (x, cond)
}

/// A score network trained by DSM on samples of a known mixture.
#[derive(Clone, Debug)]
pub struct ScoreTrainer {
    pub spec: ScoreModelSpec,
    pub model: ScoreModel,
    pub params: ParamStore,
    pub adam: AdamState,
    /// Weight average; what [`ScoreTrainer::weights`] returns.
    pub ema: EmaState,
    pub settings: DsmSettings,
    pub rng: RngStreams,
    pub step: u64,
}

impl ScoreTrainer {
    pub fn new(spec: ScoreModelSpec, settings: DsmSettings, seed: u64) -> Result<Self> {
        settings.validate()?;
        let model = spec.build()?;
        let mut rng = RngStreams::new(seed);
        let params = model.init("score", rng.get(Stream::Init));
        let adam = AdamState::new(&params, settings.lr, settings.adam_beta1, settings.adam_beta2)?;
        let ema = EmaState::new(&params, settings.ema_decay)?;
        Ok(Self {
            spec,
            model,
            params,
            adam,
            ema,
            settings,
            rng,
            step: 0,
        })
    }

    /// One step on a fresh batch from `data`.
    pub fn step(&mut self, data: &GaussianMixture) -> Result<(f64, f64)> {
        if data.dim() != self.spec.dim {
            return Err(Error::invalid("data dimension differs from the model"));
        }
        let s = &self.settings;
        let (x0, cond) = sample_labeled(data, s.batch_size, s.cond_dropout, self.rng.get(Stream::Class));
        let times = s.time_dist.sample_n(&self.spec.process, s.batch_size, self.rng.get(Stream::Time));
        let eps = crate::numerics::rng::standard_normal(self.rng.get(Stream::AssistantNoise), s.batch_size, self.spec.dim);
        let noise = NoiseDraw { times, eps };
        let out = dsm_step(&self.model, &mut self.params, &mut self.adam, &x0, &cond, &noise, s)
            .map_err(|e| Error::Step {
                iteration: self.step,
                source: Box::new(e),
            })?;
        self.step += 1;
        let n = self.step as f64;
        self.ema.update_with(&self.params, s.ema_decay.min((1.0 + n) / (10.0 + n)))?;
        Ok(out)
    }

    /// Runs `steps` steps, calling `on_step(step, loss, grad_norm)` after each.
    pub fn train(
        &mut self,
        data: &GaussianMixture,
        steps: u64,
        on_step: &mut dyn FnMut(u64, f64, f64) -> Result<()>,
    ) -> Result<()> {
        for _ in 0..steps {
            let (l, g) = self.step(data)?;
            on_step(self.step, l, g)?;
        }
        Ok(())
    }

    /// The averaged weights, used for evaluation and as a reference.
    pub fn weights(&self) -> &ParamStore {
        self.ema.shadow()
    }

    pub fn checkpoint(&self, config_hash: &str) -> ScoreCheckpoint {
        ScoreCheckpoint {
            format: SCORE_FORMAT.into(),
            version: FORMAT_VERSION,
            artifact_version: ARTIFACT_VERSION.into(),
            config_hash: config_hash.into(),
            seed: self.rng.seed(),
            step: self.step,
            model: self.spec.clone(),
            params: self.params.to_named(),
            ema: self.ema.shadow().to_named(),
            adam: self.adam.snapshot(self.params.names()),
            rng: self.rng.snapshot(),
        }
    }

    /// Continues from a checkpoint written by [`ScoreTrainer::checkpoint`].
    pub fn resume(ck: &ScoreCheckpoint, settings: DsmSettings) -> Result<Self> {
        settings.validate()?;
        let model = ck.model.build()?;
        Ok(Self {
            spec: ck.model.clone(),
            model,
            params: ParamStore::from_named(&ck.params)?,
            ema: EmaState::from_shadow(ParamStore::from_named(&ck.ema)?, settings.ema_decay)?,
            adam: AdamState::restore(&ck.adam)?,
            settings,
            rng: RngStreams::restore(&ck.rng)?,
            step: ck.step,
        })
    }
}

pub const SCORE_FORMAT: &str = "scorealign-score";

/// Score network, optimizer and stream state; doubles as the reference
/// file for alignment runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreCheckpoint {
    pub format: String,
    pub version: u32,
    pub artifact_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub step: u64,
    pub model: ScoreModelSpec,
    pub params: Vec<NamedArray>,
    pub ema: Vec<NamedArray>,
    pub adam: AdamSnapshot,
    pub rng: RngSnapshot,
}

impl ScoreCheckpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(s)?;
        check_header(&ck.format, ck.version, SCORE_FORMAT)?;
        Ok(ck)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// The averaged weights.
    pub fn store(&self) -> Result<ParamStore> {
        ParamStore::from_named(&self.ema)
    }
}
