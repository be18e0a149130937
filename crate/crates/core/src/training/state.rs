use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{AlignmentConfig, GeneratorSpec, ReferenceSpec, ScoreModelSpec};
use super::dsm::ScoreTrainer;
use crate::error::{Error, Result};
use crate::models::{Generator, ScoreModel};
use crate::numerics::checkpoint::{check_header, write_atomic, ARTIFACT_VERSION, FORMAT_VERSION};
use crate::numerics::{AdamSnapshot, AdamState, EmaState, NamedArray, ParamStore, RngSnapshot, RngStreams, Stream};

/// Offset separating the assistant pretraining streams from the run's own.
const PRETRAIN_SEED_OFFSET: u64 = 0x5EED_0A55;

/// Everything that evolves during an alignment run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub generator: Generator,
    pub gen_params: ParamStore,
    pub gen_adam: AdamState,
    pub ema: EmaState,
    pub assistant: ScoreModel,
    pub assistant_spec: ScoreModelSpec,
    pub assistant_params: ParamStore,
    pub assistant_adam: AdamState,
    /// Completed generator steps.
    pub iteration: u64,
    pub rng: RngStreams,
}

/// Architecture of the assistant implied by a config.
pub fn assistant_spec(config: &AlignmentConfig) -> ScoreModelSpec {
    match &config.reference {
        ReferenceSpec::Trained { spec, .. } => spec.clone(),
        ReferenceSpec::Analytic(g) => {
            let mut s = ScoreModelSpec::edm(
                g.dim(),
                g.num_classes(),
                config.assistant.hidden.clone(),
                config.assistant.sigma_data,
                config.process,
            );
            s.embed_dim = config.assistant.embed_dim;
            s
        }
    }
}

impl TrainState {
    /// Fresh generator; assistant warm-started from the reference (a copy
    /// of a trained reference, or DSM pretraining on samples of an
    /// analytic one).
    pub fn init(config: &AlignmentConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = RngStreams::new(config.seed);
        let generator = config.generator.build()?;
        let mut gen_params = generator.init("gen", rng.get(Stream::Init));
        if let Some(w) = &config.warm_start {
            gen_params
                .load_from(w)
                .map_err(|e| Error::config("generator.warm_start", e.to_string()))?;
        }
        let spec = assistant_spec(config);
        let (assistant, assistant_params) = match &config.reference {
            ReferenceSpec::Trained { params, .. } => (spec.build()?, params.clone()),
            ReferenceSpec::Analytic(g) => {
                let mut t = ScoreTrainer::new(
                    spec.clone(),
                    config.dsm.clone(),
                    config.seed.wrapping_add(PRETRAIN_SEED_OFFSET),
                )?;
                for _ in 0..config.assistant.pretrain_steps {
                    t.step(g)?;
                }
                (t.model, t.ema.shadow().clone())
            }
        };
        Self::assemble(config, generator, gen_params, assistant, spec, assistant_params, rng)
    }

    fn assemble(
        config: &AlignmentConfig,
        generator: Generator,
        gen_params: ParamStore,
        assistant: ScoreModel,
        assistant_spec: ScoreModelSpec,
        assistant_params: ParamStore,
        rng: RngStreams,
    ) -> Result<Self> {
        Ok(Self {
            gen_adam: AdamState::new(&gen_params, config.lr_gen, config.adam_beta1, config.adam_beta2)?,
            ema: EmaState::new(&gen_params, config.ema_decay)?,
            assistant_adam: AdamState::new(
                &assistant_params,
                config.dsm.lr,
                config.dsm.adam_beta1,
                config.dsm.adam_beta2,
            )?,
            generator,
            gen_params,
            assistant,
            assistant_spec,
            assistant_params,
            iteration: 0,
            rng,
        })
    }

    pub fn checkpoint(&self, config: &AlignmentConfig, config_hash: &str) -> TrainCheckpoint {
        TrainCheckpoint {
            format: TRAIN_FORMAT.into(),
            version: FORMAT_VERSION,
            artifact_version: ARTIFACT_VERSION.into(),
            config_hash: config_hash.into(),
            seed: config.seed,
            iteration: self.iteration,
            generator_spec: config.generator.clone(),
            generator: self.gen_params.to_named(),
            generator_adam: self.gen_adam.snapshot(self.gen_params.names()),
            ema_decay: self.ema.decay(),
            ema: self.ema.shadow().to_named(),
            assistant_spec: self.assistant_spec.clone(),
            assistant: self.assistant_params.to_named(),
            assistant_adam: self.assistant_adam.snapshot(self.assistant_params.names()),
            rng: self.rng.snapshot(),
        }
    }

    /// Restores a state saved under a compatible config.
    pub fn from_checkpoint(ck: &TrainCheckpoint, config: &AlignmentConfig) -> Result<Self> {
        if ck.generator_spec != config.generator {
            return Err(Error::Checkpoint("generator architecture differs from the config".into()));
        }
        let spec = assistant_spec(config);
        if ck.assistant_spec != spec {
            return Err(Error::Checkpoint("assistant architecture differs from the config".into()));
        }
        let generator = config.generator.build()?;
        let gen_params = ParamStore::from_named(&ck.generator)?;
        let assistant = spec.build()?;
        let assistant_params = ParamStore::from_named(&ck.assistant)?;
        // shapes must match what the architectures would create
        let mut probe = RngStreams::new(0);
        generator.init("gen", probe.get(Stream::Init)).load_from(&gen_params)?;
        assistant.init("score", probe.get(Stream::Init)).load_from(&assistant_params)?;
        Ok(Self {
            generator,
            gen_adam: AdamState::restore(&ck.generator_adam)?,
            ema: EmaState::from_shadow(ParamStore::from_named(&ck.ema)?, ck.ema_decay)?,
            gen_params,
            assistant,
            assistant_spec: spec,
            assistant_params,
            assistant_adam: AdamState::restore(&ck.assistant_adam)?,
            iteration: ck.iteration,
            rng: RngStreams::restore(&ck.rng)?,
        })
    }
}

pub const TRAIN_FORMAT: &str = "scorealign-train";
pub const GENERATOR_FORMAT: &str = "scorealign-generator";

/// Full resumable state of an alignment run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainCheckpoint {
    pub format: String,
    pub version: u32,
    pub artifact_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub iteration: u64,
    pub generator_spec: GeneratorSpec,
    pub generator: Vec<NamedArray>,
    pub generator_adam: AdamSnapshot,
    pub ema_decay: f64,
    pub ema: Vec<NamedArray>,
    pub assistant_spec: ScoreModelSpec,
    pub assistant: Vec<NamedArray>,
    pub assistant_adam: AdamSnapshot,
    pub rng: RngSnapshot,
}

/// Generator weights with their architecture, enough to sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorCheckpoint {
    pub format: String,
    pub version: u32,
    pub artifact_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub iteration: u64,
    pub ema: bool,
    pub model: GeneratorSpec,
    pub params: Vec<NamedArray>,
}

impl GeneratorCheckpoint {
    pub fn new(spec: &GeneratorSpec, params: &ParamStore, ema: bool, iteration: u64, config_hash: &str, seed: u64) -> Self {
        Self {
            format: GENERATOR_FORMAT.into(),
            version: FORMAT_VERSION,
            artifact_version: ARTIFACT_VERSION.into(),
            config_hash: config_hash.into(),
            seed,
            iteration,
            ema,
            model: spec.clone(),
            params: params.to_named(),
        }
    }

    /// Rebuilt generator and its parameters.
    pub fn generator(&self) -> Result<(Generator, ParamStore)> {
        let g = self.model.build()?;
        let params = ParamStore::from_named(&self.params)?;
        if params.len() != g.num_tensors() {
            return Err(Error::Checkpoint(format!(
                "generator checkpoint has {} tensors, architecture expects {}",
                params.len(),
                g.num_tensors()
            )));
        }
        Ok((g, params))
    }
}

macro_rules! json_file {
    ($t:ty, $fmt:expr) => {
        impl $t {
            pub fn to_json(&self) -> Result<String> {
                Ok(serde_json::to_string_pretty(self)?)
            }

            pub fn from_json(s: &str) -> Result<Self> {
                let ck: Self = serde_json::from_str(s)?;
                check_header(&ck.format, ck.version, $fmt)?;
                Ok(ck)
            }

            pub fn save(&self, path: &Path) -> Result<()> {
                write_atomic(path, self.to_json()?.as_bytes())
            }

            pub fn load(path: &Path) -> Result<Self> {
                Self::from_json(&std::fs::read_to_string(path)?)
            }
        }
    };
}

json_file!(TrainCheckpoint, TRAIN_FORMAT);
json_file!(GeneratorCheckpoint, GENERATOR_FORMAT);
