use serde::{Deserialize, Serialize};

use crate::analytic::{GaussianMixture, DEFAULT_SIGMA_INIT};
use crate::error::{Error, Result};
use crate::losses::{DistanceFunction, RewardFunction};
use crate::models::{Generator, Parameterization, ScoreModel};
use crate::numerics::ParamStore;
use crate::processes::{ForwardProcess, LossSpace, TimeDistribution, WeightingFunction};

/// Named `(alpha_rew, alpha_cfg)` pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// `(10, 4.5)`, the best setting reported for the DiT-style model.
    DitStyle,
    /// `(1000, 1.5)`, the best setting reported for the SD1.5-style model.
    Sd15Style,
}

impl Preset {
    pub const NAMES: [&'static str; 2] = ["dit-style", "sd15-style"];

    pub fn scales(self) -> (f64, f64) {
        match self {
            Preset::DitStyle => (10.0, 4.5),
            Preset::Sd15Style => (1000.0, 1.5),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::DitStyle => "dit-style",
            Preset::Sd15Style => "sd15-style",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dit-style" => Ok(Preset::DitStyle),
            "sd15-style" => Ok(Preset::Sd15Style),
            other => Err(Error::config(
                "preset",
                format!("unknown preset `{other}` (expected one of {:?})", Preset::NAMES),
            )),
        }
    }
}

/// Which score regularizer drives the generator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    /// Score-divergence regularizer.
    #[default]
    DiStar,
    /// Integral-KL surrogate.
    DippKl,
}

impl Baseline {
    pub fn name(self) -> &'static str {
        match self {
            Baseline::DiStar => "di-star",
            Baseline::DippKl => "dipp-kl",
        }
    }
}

impl std::str::FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "di-star" => Ok(Baseline::DiStar),
            "dipp-kl" => Ok(Baseline::DippKl),
            other => Err(Error::config(
                "alignment.baseline",
                format!("unknown baseline `{other}` (expected di-star or dipp-kl)"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GeneratorBackbone {
    Mlp { hidden: Vec<usize>, sigma_data: f64 },
    Affine { latent_dim: usize },
}

/// Architecture of a one-step generator; stored in checkpoints so a
/// generator can be rebuilt without the run config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub dim: usize,
    pub num_classes: usize,
    pub embed_dim: usize,
    pub sigma_init: f64,
    pub backbone: GeneratorBackbone,
}

impl GeneratorSpec {
    pub fn latent_dim(&self) -> usize {
        match &self.backbone {
            GeneratorBackbone::Mlp { .. } => self.dim,
            GeneratorBackbone::Affine { latent_dim } => *latent_dim,
        }
    }

    pub fn mlp(dim: usize, num_classes: usize, hidden: Vec<usize>) -> Self {
        Self {
            dim,
            num_classes,
            embed_dim: 4,
            sigma_init: DEFAULT_SIGMA_INIT,
            backbone: GeneratorBackbone::Mlp { hidden, sigma_data: 0.5 },
        }
    }

    pub fn build(&self) -> Result<Generator> {
        match &self.backbone {
            GeneratorBackbone::Mlp { hidden, sigma_data } => Generator::mlp(
                self.dim,
                hidden,
                self.num_classes,
                self.embed_dim,
                self.sigma_init,
                *sigma_data,
            ),
            GeneratorBackbone::Affine { latent_dim } => {
                Generator::affine(self.dim, *latent_dim, self.sigma_init, self.num_classes)
            }
        }
    }
}

/// Architecture of a score network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreModelSpec {
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
    pub embed_dim: usize,
    pub parameterization: Parameterization,
    pub process: ForwardProcess,
}

impl ScoreModelSpec {
    pub fn edm(dim: usize, num_classes: usize, hidden: Vec<usize>, sigma_data: f64, process: ForwardProcess) -> Self {
        Self {
            dim,
            hidden,
            num_classes,
            embed_dim: 4,
            parameterization: Parameterization::EdmDenoiser { sigma_data },
            process,
        }
    }

    pub fn build(&self) -> Result<ScoreModel> {
        ScoreModel::new(
            self.dim,
            &self.hidden,
            self.num_classes,
            self.embed_dim,
            self.parameterization,
            self.process,
        )
    }
}

/// Settings of a denoising-score-matching phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DsmSettings {
    pub batch_size: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub time_dist: TimeDistribution,
    /// `lambda(t)`.
    pub lambda: WeightingFunction,
    pub space: LossSpace,
    /// Probability of replacing a label by the null class (teaches the
    /// unconditional score to a conditional model).
    pub cond_dropout: f64,
    /// Decay of the weight average kept by standalone training (warmed up
    /// as `min(decay, (1+n)/(10+n))`); 0 keeps the raw weights.
    pub ema_decay: f64,
}

impl Default for DsmSettings {
    fn default() -> Self {
        Self {
            batch_size: 256,
            lr: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            time_dist: TimeDistribution::default(),
            lambda: WeightingFunction::EdmLambda { sigma_data: 0.5 },
            space: LossSpace::Denoiser,
            cond_dropout: 0.1,
            ema_decay: 0.999,
        }
    }
}

impl DsmSettings {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("lr", "must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::config("cond_dropout", "must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::config("ema_decay", "must lie in [0, 1)"));
        }
        if self.lambda.needs_gap() {
            return Err(Error::config("lambda", "adaptive weighting is only defined for the generator loss"));
        }
        Ok(())
    }
}

/// The frozen reference score.
#[derive(Clone, Debug)]
pub enum ReferenceSpec {
    /// Closed-form scores of a (labeled) mixture.
    Analytic(GaussianMixture),
    /// A DSM-trained network. `data` is the mixture it was trained on, used
    /// only for evaluation metrics when present.
    Trained {
        spec: ScoreModelSpec,
        params: ParamStore,
        data: Option<GaussianMixture>,
    },
}

impl ReferenceSpec {
    pub fn dim(&self) -> usize {
        match self {
            ReferenceSpec::Analytic(g) => g.dim(),
            ReferenceSpec::Trained { spec, .. } => spec.dim,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ReferenceSpec::Analytic(g) => g.num_classes(),
            ReferenceSpec::Trained { spec, .. } => spec.num_classes,
        }
    }

    /// The data mixture behind the reference, if known.
    pub fn mixture(&self) -> Option<&GaussianMixture> {
        match self {
            ReferenceSpec::Analytic(g) => Some(g),
            ReferenceSpec::Trained { data, .. } => data.as_ref(),
        }
    }
}

/// Assistant (online score model) settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssistantSpec {
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub sigma_data: f64,
    /// DSM steps on reference samples before alignment starts (analytic
    /// reference only; a trained reference is copied instead).
    pub pretrain_steps: u64,
}

impl Default for AssistantSpec {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            embed_dim: 4,
            sigma_data: 0.5,
            pretrain_steps: 500,
        }
    }
}

/// Periodic evaluation of the EMA generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    /// Evaluate every `every` generator steps (0 disables periodic
    /// evaluation; the last iteration is always evaluated).
    pub every: u64,
    pub samples: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self { every: 500, samples: 2000 }
    }
}

/// Every hyperparameter of the alternating alignment loop.
#[derive(Clone, Debug)]
pub struct AlignmentConfig {
    pub alpha_rew: f64,
    pub alpha_cfg: f64,
    /// Guidance scale inside the implicit reward.
    pub cfg_omega: f64,
    /// Guidance applied to the reference score in the regularizer
    /// (1 = plain conditional score).
    pub guidance: f64,
    pub k_ta: usize,
    pub distance: DistanceFunction,
    pub baseline: Baseline,
    pub lr_gen: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub ema_decay: f64,
    pub process: ForwardProcess,
    /// `w(t)` of the generator losses.
    pub weighting: WeightingFunction,
    /// Residual space of the generator losses.
    pub space: LossSpace,
    pub batch_size: usize,
    pub iterations: u64,
    pub seed: u64,
    /// Assistant DSM settings (`lambda`, time distribution, learning rate);
    /// the time distribution is shared with the generator step.
    pub dsm: DsmSettings,
    pub generator: GeneratorSpec,
    /// Generator weights to start from instead of a random init (e.g. a
    /// distillation-only run).
    pub warm_start: Option<ParamStore>,
    pub assistant: AssistantSpec,
    pub reference: ReferenceSpec,
    pub reward: Option<RewardFunction>,
    pub eval: EvalSpec,
}

impl AlignmentConfig {
    /// Defaults around an analytic reference: pure distillation, EDM,
    /// pseudo-Huber distance, `w = 1`, Adam `(0, 0.999)`, EMA 0.95.
    pub fn new(reference: GaussianMixture) -> Self {
        Self::with_reference(ReferenceSpec::Analytic(reference))
    }

    /// Same defaults around any reference.
    pub fn with_reference(reference: ReferenceSpec) -> Self {
        let dim = reference.dim();
        let k = reference.num_classes();
        let dsm = DsmSettings {
            adam_beta1: 0.0,
            cond_dropout: 0.0,
            ..DsmSettings::default()
        };
        Self {
            alpha_rew: 0.0,
            alpha_cfg: 0.0,
            cfg_omega: 1.0,
            guidance: 1.0,
            k_ta: 1,
            distance: DistanceFunction::PseudoHuber {
                c: DistanceFunction::DEFAULT_HUBER_C,
            },
            baseline: Baseline::DiStar,
            lr_gen: 1e-3,
            adam_beta1: 0.0,
            adam_beta2: 0.999,
            ema_decay: 0.95,
            process: ForwardProcess::edm(),
            weighting: WeightingFunction::Constant,
            space: LossSpace::Denoiser,
            batch_size: 256,
            iterations: 1000,
            seed: 0,
            dsm,
            generator: GeneratorSpec::mlp(dim, k, vec![64, 64]),
            warm_start: None,
            assistant: AssistantSpec::default(),
            reference,
            reward: None,
            eval: EvalSpec::default(),
        }
    }

    pub fn apply_preset(&mut self, preset: Preset) {
        (self.alpha_rew, self.alpha_cfg) = preset.scales();
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = |key: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(key, format!("must be a finite value >= 0, got {v}")))
            }
        };
        nonneg("alignment.alpha_rew", self.alpha_rew)?;
        nonneg("alignment.alpha_cfg", self.alpha_cfg)?;
        nonneg("alignment.cfg_omega", self.cfg_omega)?;
        nonneg("alignment.guidance", self.guidance)?;
        if self.k_ta == 0 {
            return Err(Error::config("alignment.k_ta", "must be at least 1"));
        }
        if !(self.lr_gen > 0.0) {
            return Err(Error::config("generator.lr", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::config("generator.ema_decay", "must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("training.batch_size", "must be at least 1"));
        }
        self.dsm.validate()?;
        let dim = self.reference.dim();
        if self.generator.dim != dim {
            return Err(Error::config("generator", "dimension differs from the reference"));
        }
        if self.generator.num_classes != self.reference.num_classes() {
            return Err(Error::config("generator", "class count differs from the reference"));
        }
        if self.alpha_rew > 0.0 && self.reward.is_none() {
            return Err(Error::config("reward.kind", "alpha_rew > 0 needs a reward"));
        }
        if self.alpha_cfg > 0.0 && self.reference.num_classes() == 0 {
            return Err(Error::config("alignment.alpha_cfg", "the guidance reward needs a class-labeled reference"));
        }
        if let ReferenceSpec::Trained { spec, .. } = &self.reference {
            if spec.process != self.process {
                return Err(Error::config("reference.checkpoint", "reference was trained under a different process"));
            }
        }
        Ok(())
    }
}
