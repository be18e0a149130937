//! Flat run configuration: `section.key = value` lines (valid TOML; the
//! `[section]` table form is accepted too). Every key has a default, unknown
//! keys are rejected, and the resolved configuration is echoed in the same
//! format so it re-parses to an identical [`RunConfig`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use scorealign::analytic::GaussianMixture;
use scorealign::losses::{DistanceFunction, RewardFunction};
use scorealign::numerics::checkpoint::content_hash;
use scorealign::processes::{ForwardProcess, LossSpace, TimeDistribution, WeightingFunction};
use scorealign::training::{
    AlignmentConfig, AssistantSpec, Baseline, DsmSettings, EvalSpec, GeneratorBackbone, GeneratorCheckpoint,
    GeneratorSpec, Preset, ReferenceSpec, ScoreCheckpoint, ScoreModelSpec,
};
use scorealign::{Error, Result};
use toml::Value;

/// Environment variable that roots relative output directories.
pub const OUT_ROOT_ENV: &str = "SCOREALIGN_OUT_ROOT";

/// `(key, default as a TOML literal, description)`.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("run.seed", "0", "master seed; every random stream derives from it"),
    ("run.out", "\"runs/default\"", "output directory (relative paths land under $SCOREALIGN_OUT_ROOT when set)"),
    ("run.checkpoint_every", "1000", "full-state checkpoint cadence in generator steps (0 = final only)"),
    ("run.sample_every", "0", "sample dump cadence in generator steps (0 = final only)"),
    ("run.sample_count", "1000", "samples per dump"),
    ("run.term_grad_norms", "false", "log per-term generator gradient norms (three extra passes per step)"),
    ("run.resume", "\"\"", "training checkpoint to continue from (align: checkpoints/*.json)"),
    ("reference.gmm", "\"\"", "mixture file (TOML) of the analytic reference / training data"),
    ("reference.checkpoint", "\"\"", "score checkpoint written by train-score; replaces the analytic reference"),
    ("process.kind", "\"edm\"", "edm | vp-edm | vp-scaled"),
    ("process.sigma_min", "0.0", "override of the noise range lower end (0 = process default)"),
    ("process.sigma_max", "0.0", "override of the noise range upper end (0 = process default)"),
    ("time.kind", "\"lognormal\"", "lognormal | uniform"),
    ("time.p_mean", "-2.0", "log-normal location of the sampled noise level"),
    ("time.p_std", "2.0", "log-normal scale of the sampled noise level"),
    ("alignment.preset", "\"\"", "dit-style (alpha_rew=10, alpha_cfg=4.5) | sd15-style (1000, 1.5); overrides the alphas"),
    ("alignment.alpha_rew", "0.0", "explicit reward scale"),
    ("alignment.alpha_cfg", "0.0", "guidance (implicit) reward scale"),
    ("alignment.cfg_omega", "1.0", "guidance scale inside the implicit reward"),
    ("alignment.guidance", "1.0", "guidance scale applied to the reference score in the regularizer"),
    ("alignment.k_ta", "1", "assistant DSM steps per generator step"),
    ("alignment.baseline", "\"di-star\"", "di-star | dipp-kl"),
    ("alignment.distance", "\"pseudo-huber\"", "pseudo-huber | squared-l2"),
    ("alignment.huber_c", "0.1", "pseudo-Huber constant c"),
    ("alignment.weighting", "\"constant\"", "generator loss weighting w(t): constant | edm-lambda | adaptive"),
    ("alignment.space", "\"denoiser\"", "residual space of the generator losses: denoiser | score"),
    ("alignment.batch_size", "256", "generator and assistant batch size"),
    ("alignment.iterations", "1000", "generator steps"),
    ("reward.kind", "\"none\"", "none | mode-affinity | neg-squared-distance | class-logit"),
    ("reward.targets", "[]", "one target point per class, or a single shared target"),
    ("reward.bandwidth", "1.0", "mode-affinity bandwidth"),
    ("generator.backbone", "\"mlp\"", "mlp | affine"),
    ("generator.hidden", "[64, 64]", "hidden widths of the MLP generator"),
    ("generator.embed_dim", "4", "class embedding width"),
    ("generator.sigma_init", "2.5", "latent scale (and preconditioning noise level)"),
    ("generator.sigma_data", "0.5", "data scale of the generator preconditioning"),
    ("generator.latent_dim", "0", "affine backbone latent width (0 = data dimension)"),
    ("generator.lr", "0.001", "Adam learning rate"),
    ("generator.adam_beta1", "0.0", "Adam beta1"),
    ("generator.adam_beta2", "0.999", "Adam beta2"),
    ("generator.ema_decay", "0.95", "EMA decay of the evaluated generator"),
    ("generator.warm_start", "\"\"", "generator checkpoint to initialize from"),
    ("assistant.hidden", "[64, 64]", "hidden widths of the assistant score network (analytic reference only)"),
    ("assistant.embed_dim", "4", "class embedding width"),
    ("assistant.sigma_data", "0.5", "EDM sigma_data"),
    ("assistant.pretrain_steps", "500", "DSM warm-up steps on reference samples (analytic reference only)"),
    ("assistant.lr", "0.001", "Adam learning rate"),
    ("assistant.adam_beta1", "0.0", "Adam beta1"),
    ("assistant.adam_beta2", "0.999", "Adam beta2"),
    ("assistant.lambda", "\"edm-lambda\"", "DSM weighting lambda(t): edm-lambda | constant"),
    ("assistant.space", "\"denoiser\"", "DSM residual space: denoiser | score"),
    ("eval.every", "500", "energy-distance evaluation cadence (0 = final only)"),
    ("eval.samples", "2000", "samples per evaluation"),
    ("score.hidden", "[64, 64, 64]", "hidden widths of the trained score network"),
    ("score.embed_dim", "4", "class embedding width"),
    ("score.sigma_data", "0.5", "EDM sigma_data"),
    ("score.steps", "2000", "DSM steps"),
    ("score.batch_size", "1024", "DSM batch size"),
    ("score.lr", "0.01", "Adam learning rate"),
    ("score.adam_beta1", "0.9", "Adam beta1"),
    ("score.adam_beta2", "0.999", "Adam beta2"),
    ("score.ema_decay", "0.999", "weight average kept as the reference weights"),
    ("score.cond_dropout", "0.1", "probability of training a labeled sample as unconditional"),
    ("score.lambda", "\"edm-lambda\"", "DSM weighting lambda(t): edm-lambda | constant"),
    ("score.space", "\"denoiser\"", "DSM residual space: denoiser | score"),
    ("score.checkpoint_every", "500", "checkpoint cadence in DSM steps (0 = final only)"),
    ("score.resume", "\"\"", "score checkpoint to continue from"),
    ("verify.recovery", "true", "include the DSM recovery check (trains a network, ~1 min)"),
    ("sample.checkpoint", "\"\"", "generator checkpoint to sample from"),
    ("sample.n", "1000", "samples per file"),
    ("sample.class", "-1", "class to condition on (-1: every class, one file each; a single unconditional file for unlabeled generators)"),
];

/// Keys that say where files go or where a run continues from; excluded
/// from the config hash so that a relocated or resumed run keeps the
/// provenance of the unbroken one.
const UNHASHED: &[&str] = &["run.out", "run.resume", "score.resume"];

fn default_value(literal: &str) -> Value {
    let doc: toml::Table = format!("v = {literal}").parse().expect("defaults are valid TOML");
    doc["v"].clone()
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Integer(_) => "integer",
        Value::Float(_) => "float",
        Value::Boolean(_) => "boolean",
        Value::Array(_) => "array",
        Value::Table(_) => "table",
        Value::Datetime(_) => "datetime",
    }
}

/// Fully resolved key/value map.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, Value>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, d, _)| (*k, default_value(d))).collect(),
        }
    }
}

impl RunConfig {
    /// Parses config text. Relative paths in path-valued keys are resolved
    /// against `base` (the config file's directory).
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<config>", e.message().to_string()))?;
        let mut cfg = Self::default();
        for (section, v) in table {
            let Value::Table(inner) = v else {
                return Err(Error::config(&section, "expected `section.key = value`"));
            };
            for (k, v) in inner {
                cfg.set(&format!("{section}.{k}"), v)?;
            }
        }
        if let Some(base) = base {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config("--config", format!("{}: {e}", path.display())))?;
        Self::parse(&text, path.parent())
    }

    fn slot(&self, key: &str) -> Result<&'static str> {
        KEYS.iter()
            .map(|(k, _, _)| *k)
            .find(|k| *k == key)
            .ok_or_else(|| Error::config(key, "unknown key"))
    }

    /// Sets one key, checking its type against the default's.
    pub fn set(&mut self, key: &str, v: Value) -> Result<()> {
        let slot = self.slot(key)?;
        let current = &self.values[slot];
        let v = match (current, v) {
            (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
            (_, v) => v,
        };
        if std::mem::discriminant(current) != std::mem::discriminant(&v) {
            return Err(Error::config(
                key,
                format!("expected {}, got {}", type_name(current), type_name(&v)),
            ));
        }
        self.values.insert(slot, v);
        Ok(())
    }

    /// Sets a key from `key=value` command-line text; bare words are
    /// taken as strings.
    pub fn set_str(&mut self, key: &str, text: &str) -> Result<()> {
        let v = match format!("v = {text}").parse::<toml::Table>() {
            Ok(t) => t["v"].clone(),
            Err(_) => Value::String(text.to_string()),
        };
        self.set(key, v)
    }

    fn resolve_paths(&mut self, base: &Path) {
        for key in [
            "reference.gmm",
            "reference.checkpoint",
            "generator.warm_start",
            "run.resume",
            "score.resume",
            "sample.checkpoint",
        ] {
            let p = self.str(key).to_string();
            if !p.is_empty() && Path::new(&p).is_relative() {
                let abs = base.join(&p);
                self.values.insert(self.slot(key).expect("known"), Value::String(abs.display().to_string()));
            }
        }
    }

    pub fn get(&self, key: &str) -> &Value {
        self.values.get(key).unwrap_or_else(|| panic!("unregistered key {key}"))
    }

    pub fn str(&self, key: &str) -> &str {
        self.get(key).as_str().expect("typed on set")
    }

    pub fn f64(&self, key: &str) -> f64 {
        self.get(key).as_float().expect("typed on set")
    }

    pub fn bool(&self, key: &str) -> bool {
        self.get(key).as_bool().expect("typed on set")
    }

    pub fn i64(&self, key: &str) -> i64 {
        self.get(key).as_integer().expect("typed on set")
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        u64::try_from(self.i64(key)).map_err(|_| Error::config(key, "must be >= 0"))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        usize::try_from(self.i64(key)).map_err(|_| Error::config(key, "must be >= 0"))
    }

    fn widths(&self, key: &str) -> Result<Vec<usize>> {
        let arr = self.get(key).as_array().expect("typed on set");
        let w = arr
            .iter()
            .map(|v| v.as_integer().and_then(|i| usize::try_from(i).ok()).filter(|&i| i > 0))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::config(key, "expected an array of positive integers"))?;
        if w.is_empty() {
            return Err(Error::config(key, "needs at least one hidden layer"));
        }
        Ok(w)
    }

    fn points(&self, key: &str) -> Result<Vec<Vec<f64>>> {
        let arr = self.get(key).as_array().expect("typed on set");
        arr.iter()
            .map(|row| {
                row.as_array()?
                    .iter()
                    .map(|v| v.as_float().or_else(|| v.as_integer().map(|i| i as f64)))
                    .collect::<Option<Vec<f64>>>()
            })
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::config(key, "expected an array of number arrays"))
    }

    /// A path-valued key, `None` when empty.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let s = self.str(key);
        (!s.is_empty()).then(|| PathBuf::from(s))
    }

    /// The configuration as `section.key = value` lines in registry order.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (k, _, _) in KEYS {
            out.push_str(&format!("{k} = {}\n", self.values[k]));
        }
        out
    }

    /// The echo without the location keys (`run.out`, `run.resume`,
    /// `score.resume`): what determines a run's results.
    pub fn portable_echo(&self) -> String {
        self.echo()
            .lines()
            .filter(|l| !UNHASHED.iter().any(|k| l.starts_with(&format!("{k} "))))
            .map(|l| format!("{l}\n"))
            .collect()
    }

    /// SHA-256 of [`RunConfig::portable_echo`].
    pub fn hash(&self) -> String {
        content_hash(self.portable_echo().as_bytes())
    }

    /// Output directory: `run.out`, placed under `$SCOREALIGN_OUT_ROOT`
    /// when relative and the variable is set.
    pub fn out_dir(&self) -> PathBuf {
        let out = PathBuf::from(self.str("run.out"));
        match std::env::var_os(OUT_ROOT_ENV) {
            Some(root) if out.is_relative() => PathBuf::from(root).join(out),
            _ => out,
        }
    }

    pub fn seed(&self) -> Result<u64> {
        self.u64("run.seed")
    }

    // ---- typed views -------------------------------------------------

    pub fn process(&self) -> Result<ForwardProcess> {
        let p = match self.str("process.kind") {
            "edm" => ForwardProcess::edm(),
            "vp-edm" => ForwardProcess::vp_edm(),
            "vp-scaled" => ForwardProcess::vp_scaled(),
            other => return Err(Error::config("process.kind", format!("unknown process `{other}`"))),
        };
        let (lo, hi) = (self.f64("process.sigma_min"), self.f64("process.sigma_max"));
        if lo == 0.0 && hi == 0.0 {
            return Ok(p);
        }
        let lo = if lo == 0.0 { p.sigma_min } else { lo };
        let hi = if hi == 0.0 { p.sigma_max } else { hi };
        p.with_range(lo, hi).map_err(|e| Error::config("process.sigma_min", e.to_string()))
    }

    pub fn time_distribution(&self) -> Result<TimeDistribution> {
        match self.str("time.kind") {
            "lognormal" => {
                let p_std = self.f64("time.p_std");
                if !(p_std > 0.0) {
                    return Err(Error::config("time.p_std", "must be > 0"));
                }
                Ok(TimeDistribution::LogNormal {
                    p_mean: self.f64("time.p_mean"),
                    p_std,
                })
            }
            "uniform" => Ok(TimeDistribution::Uniform {
                horizon: self.process()?.horizon(),
            }),
            other => Err(Error::config("time.kind", format!("unknown time distribution `{other}`"))),
        }
    }

    fn space(&self, key: &str) -> Result<LossSpace> {
        match self.str(key) {
            "denoiser" => Ok(LossSpace::Denoiser),
            "score" => Ok(LossSpace::Score),
            other => Err(Error::config(key, format!("unknown space `{other}`"))),
        }
    }

    fn weighting(&self, key: &str, sigma_data: f64) -> Result<WeightingFunction> {
        match self.str(key) {
            "constant" => Ok(WeightingFunction::Constant),
            "edm-lambda" => Ok(WeightingFunction::EdmLambda { sigma_data }),
            "adaptive" => Ok(WeightingFunction::AdaptiveGen),
            other => Err(Error::config(key, format!("unknown weighting `{other}`"))),
        }
    }

    pub fn preset(&self) -> Result<Option<Preset>> {
        match self.str("alignment.preset") {
            "" => Ok(None),
            s => s
                .parse()
                .map(Some)
                .map_err(|e: Error| Error::config("alignment.preset", e.to_string())),
        }
    }

    pub fn baseline(&self) -> Result<Baseline> {
        self.str("alignment.baseline")
            .parse()
            .map_err(|e: Error| Error::config("alignment.baseline", e.to_string()))
    }

    /// The data mixture (`reference.gmm`), if set.
    pub fn mixture(&self) -> Result<Option<GaussianMixture>> {
        match self.path("reference.gmm") {
            None => Ok(None),
            Some(p) => GaussianMixture::load(&p)
                .map(Some)
                .map_err(|e| Error::config("reference.gmm", e.to_string())),
        }
    }

    pub fn require_mixture(&self) -> Result<GaussianMixture> {
        self.mixture()?
            .ok_or_else(|| Error::config("reference.gmm", "required: path to the data mixture file"))
    }

    pub fn reward(&self, reference: Option<&GaussianMixture>) -> Result<Option<RewardFunction>> {
        let wrap = |e: Error| Error::config("reward.targets", e.to_string());
        match self.str("reward.kind") {
            "none" => Ok(None),
            "mode-affinity" => {
                let bw = self.f64("reward.bandwidth");
                RewardFunction::mode_affinity(self.points("reward.targets")?, bw)
                    .map(Some)
                    .map_err(|e| Error::config("reward.bandwidth", e.to_string()))
            }
            "neg-squared-distance" => RewardFunction::neg_squared_distance(self.points("reward.targets")?)
                .map(Some)
                .map_err(wrap),
            "class-logit" => {
                let g = reference.ok_or_else(|| Error::config("reward.kind", "class-logit needs reference.gmm"))?;
                RewardFunction::class_logit(g.clone())
                    .map(Some)
                    .map_err(|e| Error::config("reward.kind", e.to_string()))
            }
            other => Err(Error::config("reward.kind", format!("unknown reward `{other}`"))),
        }
    }

    fn adam_betas(&self, section: &str) -> Result<(f64, f64)> {
        let b1 = self.f64(&format!("{section}.adam_beta1"));
        let b2 = self.f64(&format!("{section}.adam_beta2"));
        if !(0.0..1.0).contains(&b1) {
            return Err(Error::config(format!("{section}.adam_beta1"), "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&b2) {
            return Err(Error::config(format!("{section}.adam_beta2"), "must lie in [0, 1)"));
        }
        Ok((b1, b2))
    }

    /// DSM settings of the `score` section (reference training).
    pub fn score_settings(&self) -> Result<DsmSettings> {
        let (b1, b2) = self.adam_betas("score")?;
        let sd = self.f64("score.sigma_data");
        let s = DsmSettings {
            batch_size: self.usize("score.batch_size")?,
            lr: self.f64("score.lr"),
            adam_beta1: b1,
            adam_beta2: b2,
            time_dist: self.time_distribution()?,
            lambda: self.weighting("score.lambda", sd)?,
            space: self.space("score.space")?,
            cond_dropout: self.f64("score.cond_dropout"),
            ema_decay: self.f64("score.ema_decay"),
        };
        s.validate().map_err(|e| prefix_key(e, "score"))?;
        Ok(s)
    }

    pub fn score_spec(&self, data: &GaussianMixture) -> Result<ScoreModelSpec> {
        let mut spec = ScoreModelSpec::edm(
            data.dim(),
            data.num_classes(),
            self.widths("score.hidden")?,
            self.f64("score.sigma_data"),
            self.process()?,
        );
        spec.embed_dim = self.usize("score.embed_dim")?;
        Ok(spec)
    }

    fn reference(&self) -> Result<ReferenceSpec> {
        let gmm = self.mixture()?;
        match self.path("reference.checkpoint") {
            Some(p) => {
                let ck = ScoreCheckpoint::load(&p).map_err(|e| Error::config("reference.checkpoint", e.to_string()))?;
                Ok(ReferenceSpec::Trained {
                    spec: ck.model.clone(),
                    params: ck.store()?,
                    data: gmm,
                })
            }
            None => gmm
                .map(ReferenceSpec::Analytic)
                .ok_or_else(|| Error::config("reference.gmm", "required: path to a mixture file (or set reference.checkpoint)")),
        }
    }

    /// Everything the alignment loop needs; loads referenced files.
    pub fn alignment(&self) -> Result<AlignmentConfig> {
        let reference = self.reference()?;
        let mut c = AlignmentConfig::with_reference(reference);
        let dim = c.reference.dim();
        let k = c.reference.num_classes();
        c.alpha_rew = self.f64("alignment.alpha_rew");
        c.alpha_cfg = self.f64("alignment.alpha_cfg");
        if let Some(p) = self.preset()? {
            c.apply_preset(p);
        }
        c.cfg_omega = self.f64("alignment.cfg_omega");
        c.guidance = self.f64("alignment.guidance");
        c.k_ta = self.usize("alignment.k_ta")?;
        c.baseline = self.baseline()?;
        c.distance = match self.str("alignment.distance") {
            "pseudo-huber" => DistanceFunction::pseudo_huber(self.f64("alignment.huber_c"))
                .map_err(|e| Error::config("alignment.huber_c", e.to_string()))?,
            "squared-l2" => DistanceFunction::SquaredL2,
            other => return Err(Error::config("alignment.distance", format!("unknown distance `{other}`"))),
        };
        c.process = self.process()?;
        c.weighting = self.weighting("alignment.weighting", self.f64("generator.sigma_data"))?;
        c.space = self.space("alignment.space")?;
        c.batch_size = self.usize("alignment.batch_size")?;
        c.iterations = self.u64("alignment.iterations")?;
        c.seed = self.seed()?;
        c.lr_gen = self.f64("generator.lr");
        (c.adam_beta1, c.adam_beta2) = self.adam_betas("generator")?;
        c.ema_decay = self.f64("generator.ema_decay");
        let (b1, b2) = self.adam_betas("assistant")?;
        let asd = self.f64("assistant.sigma_data");
        c.dsm = DsmSettings {
            batch_size: c.batch_size,
            lr: self.f64("assistant.lr"),
            adam_beta1: b1,
            adam_beta2: b2,
            time_dist: self.time_distribution()?,
            lambda: self.weighting("assistant.lambda", asd)?,
            space: self.space("assistant.space")?,
            cond_dropout: 0.0,
            ema_decay: 0.0,
        };
        c.assistant = AssistantSpec {
            hidden: self.widths("assistant.hidden")?,
            embed_dim: self.usize("assistant.embed_dim")?,
            sigma_data: asd,
            pretrain_steps: self.u64("assistant.pretrain_steps")?,
        };
        c.generator = GeneratorSpec {
            dim,
            num_classes: k,
            embed_dim: self.usize("generator.embed_dim")?,
            sigma_init: self.f64("generator.sigma_init"),
            backbone: match self.str("generator.backbone") {
                "mlp" => GeneratorBackbone::Mlp {
                    hidden: self.widths("generator.hidden")?,
                    sigma_data: self.f64("generator.sigma_data"),
                },
                "affine" => GeneratorBackbone::Affine {
                    latent_dim: match self.usize("generator.latent_dim")? {
                        0 => dim,
                        l => l,
                    },
                },
                other => return Err(Error::config("generator.backbone", format!("unknown backbone `{other}`"))),
            },
        };
        if let Some(p) = self.path("generator.warm_start") {
            let ck = GeneratorCheckpoint::load(&p).map_err(|e| Error::config("generator.warm_start", e.to_string()))?;
            if ck.model != c.generator {
                return Err(Error::config("generator.warm_start", "checkpoint architecture differs from the config"));
            }
            c.warm_start = Some(ck.generator()?.1);
        }
        c.reward = self.reward(c.reference.mixture())?;
        c.eval = EvalSpec {
            every: self.u64("eval.every")?,
            samples: self.usize("eval.samples")?,
        };
        c.validate()?;
        Ok(c)
    }
}

fn prefix_key(e: Error, section: &str) -> Error {
    match e {
        Error::Config { key, msg } => Error::config(format!("{section}.{key}"), msg),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_have_docs() {
        let c = RunConfig::default();
        for (k, _, doc) in KEYS {
            assert!(!doc.is_empty(), "{k}");
            let _ = c.get(k);
        }
        assert_eq!(c.u64("alignment.iterations").unwrap(), 1000);
    }

    #[test]
    fn echo_roundtrips() {
        let mut c = RunConfig::parse("alignment.alpha_rew = 3\n[generator]\nhidden = [8, 8]\n", None).unwrap();
        c.set_str("reward.targets", "[[1.0, 2.0]]").unwrap();
        let back = RunConfig::parse(&c.echo(), None).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.echo(), c.echo());
        assert_eq!(back.f64("alignment.alpha_rew"), 3.0);
    }

    #[test]
    fn unknown_and_mistyped_keys_are_named() {
        let e = RunConfig::parse("alignment.alpha_rwe = 1.0", None).unwrap_err();
        assert!(e.to_string().contains("alignment.alpha_rwe"), "{e}");
        let e = RunConfig::parse("alignment.k_ta = \"two\"", None).unwrap_err();
        assert!(e.to_string().contains("alignment.k_ta"), "{e}");
        let e = RunConfig::parse("seed = 1", None).unwrap_err();
        assert!(e.to_string().contains("seed"), "{e}");
    }

    #[test]
    fn hash_ignores_output_location() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.set_str("run.out", "elsewhere").unwrap();
        assert_eq!(a.hash(), b.hash());
        b.set_str("run.seed", "1").unwrap();
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn missing_mixture_names_the_key() {
        let e = RunConfig::default().alignment().unwrap_err();
        assert!(matches!(&e, Error::Config { key, .. } if key == "reference.gmm"), "{e}");
    }

    #[test]
    fn presets_resolve() {
        let mut c = RunConfig::default();
        c.set_str("alignment.preset", "sd15-style").unwrap();
        assert_eq!(c.preset().unwrap(), Some(Preset::Sd15Style));
        c.set_str("alignment.preset", "xl").unwrap();
        assert!(c.preset().is_err());
    }
}
