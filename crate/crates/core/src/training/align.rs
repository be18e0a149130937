//! The alternating loop: `K_TA` assistant DSM steps on fresh generator
//! samples, then one generator step on
//! `alpha_rew L_rew + alpha_cfg L_cfg + L_reg`.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::Serialize;

use super::config::{AlignmentConfig, Baseline, ReferenceSpec};
use super::dsm::dsm_step;
use super::metrics::{
    energy_distance, mean_reward, target_components, target_mode_fraction, write_metrics, MetricsRow, Provenance,
};
use super::state::{GeneratorCheckpoint, TrainState};
use crate::analytic::GaussianMixture;
use crate::error::{Error, Result};
use crate::losses::{
    cfg_reward_loss, di_star_reg_loss, dipp_kl_loss, explicit_reward_loss, GeneratorBatch, LossBreakdown, LossContext,
    NoiseDraw, TermGradNorms,
};
use crate::models::{AnalyticScore, GuidedScore, NetworkScore, ScoreModel, ScoreSource};
use crate::numerics::checkpoint::{write_atomic, ARTIFACT_VERSION, FORMAT_VERSION};
use crate::numerics::{grad_norm, rng::standard_normal, Array, ParamStore, RngStreams, Stream, Tape, Var};

/// The frozen reference as a score field.
pub enum Reference {
    Analytic(AnalyticScore),
    Network { model: ScoreModel, params: ParamStore },
}

impl Reference {
    pub fn new(config: &AlignmentConfig) -> Result<Self> {
        Ok(match &config.reference {
            ReferenceSpec::Analytic(g) => Reference::Analytic(AnalyticScore::new(g.clone(), config.process)?),
            ReferenceSpec::Trained { spec, params, .. } => Reference::Network {
                model: spec.build()?,
                params: params.clone(),
            },
        })
    }

    pub fn source(&self) -> Box<dyn ScoreSource + '_> {
        match self {
            Reference::Analytic(a) => Box::new(a.clone()),
            Reference::Network { model, params } => Box::new(NetworkScore { model, params }),
        }
    }
}

/// Class probabilities for conditional sampling: the reference mixture's
/// class masses when known, uniform otherwise; empty when unconditional.
pub fn class_probs(config: &AlignmentConfig) -> Vec<f64> {
    let k = config.reference.num_classes();
    if k == 0 {
        return Vec::new();
    }
    match config.reference.mixture().and_then(|g| g.classes().map(|c| (g, c))) {
        Some((g, labels)) => {
            let mut p = vec![0.0; k];
            for (l, w) in labels.iter().zip(g.weights()) {
                p[*l] += w;
            }
            p
        }
        None => vec![1.0 / k as f64; k],
    }
}

pub fn sample_classes<R: Rng + ?Sized>(probs: &[f64], n: usize, rng: &mut R) -> Vec<Option<usize>> {
    if probs.is_empty() {
        return vec![None; n];
    }
    (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (k, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return Some(k);
                }
            }
            Some(probs.len() - 1)
        })
        .collect()
}

/// `K_TA` DSM steps of the assistant on detached generator samples.
/// Returns the mean loss and the last gradient norm. The generator is
/// only read.
pub fn update_assistant(state: &mut TrainState, config: &AlignmentConfig) -> Result<(f64, f64)> {
    let probs = class_probs(config);
    let b = config.batch_size;
    let (mut total, mut norm) = (0.0, 0.0);
    for _ in 0..config.k_ta {
        let unit = state.generator.unit_latent(b, state.rng.get(Stream::AssistantNoise));
        let z = state.generator.latent_from_unit(&unit);
        let cond = sample_classes(&probs, b, state.rng.get(Stream::Class));
        let x0 = state.generator.generate(&z, &cond, &state.gen_params)?;
        let times = config.dsm.time_dist.sample_n(&config.process, b, state.rng.get(Stream::Time));
        let eps = standard_normal(state.rng.get(Stream::AssistantNoise), b, state.generator.dim());
        let noise = NoiseDraw { times, eps };
        let (l, g) = dsm_step(
            &state.assistant,
            &mut state.assistant_params,
            &mut state.assistant_adam,
            &x0,
            &cond,
            &noise,
            &config.dsm,
        )?;
        if !l.is_finite() {
            return Err(Error::NonFinite("assistant dsm loss".into()));
        }
        total += l;
        norm = g;
    }
    Ok((total / config.k_ta as f64, norm))
}

struct Terms<'t> {
    reg: Var<'t>,
    reward: Option<Var<'t>>,
    cfg: Option<Var<'t>>,
}

#[allow(clippy::too_many_arguments)]
fn generator_terms<'t>(
    state: &TrainState,
    config: &AlignmentConfig,
    reference: &dyn ScoreSource,
    params: &[Var<'t>],
    z: &Array,
    cond: &[Option<usize>],
    noise: &NoiseDraw,
) -> Result<Terms<'t>> {
    let x0 = state.generator.forward(z, cond, params)?;
    let batch = GeneratorBatch::new(x0, noise.clone(), cond.to_vec(), &config.process)?;
    let ctx = LossContext {
        process: config.process,
        space: config.space,
        weighting: config.weighting,
    };
    let assistant = NetworkScore {
        model: &state.assistant,
        params: &state.assistant_params,
    };
    let guided = GuidedScore {
        inner: reference,
        omega: config.guidance,
    };
    let reg = match config.baseline {
        Baseline::DiStar => di_star_reg_loss(&batch, &assistant, &guided, &config.distance, &ctx)?,
        Baseline::DippKl => dipp_kl_loss(&batch, &assistant, &guided, &ctx)?,
    };
    let reward = match (&config.reward, config.alpha_rew > 0.0) {
        (Some(r), true) => Some(explicit_reward_loss(&batch.x0, cond, r)?.scale(config.alpha_rew)?),
        _ => None,
    };
    let cfg = if config.alpha_cfg > 0.0 {
        Some(cfg_reward_loss(&batch, reference, config.cfg_omega, &ctx)?.scale(config.alpha_cfg)?)
    } else {
        None
    };
    Ok(Terms { reg, reward, cfg })
}

/// One Adam step of the generator followed by the EMA update. Terms with
/// a zero scale are not built and report exactly 0. Returns the
/// breakdown, the total gradient norm and the (detached) batch samples.
pub fn update_generator(
    state: &mut TrainState,
    config: &AlignmentConfig,
    reference: &dyn ScoreSource,
    term_grad_norms: bool,
) -> Result<(LossBreakdown, f64, Array, Vec<Option<usize>>)> {
    let probs = class_probs(config);
    let b = config.batch_size;
    let unit = state.generator.unit_latent(b, state.rng.get(Stream::GeneratorNoise));
    let z = state.generator.latent_from_unit(&unit);
    let cond = sample_classes(&probs, b, state.rng.get(Stream::Class));
    let times = config.dsm.time_dist.sample_n(&config.process, b, state.rng.get(Stream::Time));
    let eps = standard_normal(state.rng.get(Stream::GeneratorNoise), b, state.generator.dim());
    let noise = NoiseDraw { times, eps };

    let tape = Tape::new();
    let bound = state.gen_params.bind(&tape);
    let terms = generator_terms(state, config, reference, &bound, &z, &cond, &noise)?;
    let value = |v: &Option<Var<'_>>| v.as_ref().map_or(0.0, |v| v.value().item());
    let mut breakdown = LossBreakdown {
        reg: terms.reg.value().item(),
        reward: value(&terms.reward),
        cfg: value(&terms.cfg),
        ..Default::default()
    };
    let mut total = terms.reg.clone();
    for t in [&terms.reward, &terms.cfg].into_iter().flatten() {
        total = total.add(t)?;
    }
    breakdown.total = total.value().item();
    for (name, v) in [
        ("loss_reg", breakdown.reg),
        ("loss_reward", breakdown.reward),
        ("loss_cfg", breakdown.cfg),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
    }
    let x0 = state.generator.generate(&z, &cond, &state.gen_params)?;

    if term_grad_norms {
        fn pick_reg<'t>(t: &Terms<'t>) -> Option<Var<'t>> {
            Some(t.reg.clone())
        }
        fn pick_reward<'t>(t: &Terms<'t>) -> Option<Var<'t>> {
            t.reward.clone()
        }
        fn pick_cfg<'t>(t: &Terms<'t>) -> Option<Var<'t>> {
            t.cfg.clone()
        }
        let norm_of = |pick: for<'t> fn(&Terms<'t>) -> Option<Var<'t>>| -> Result<f64> {
            let tape = Tape::new();
            let bound = state.gen_params.bind(&tape);
            let terms = generator_terms(state, config, reference, &bound, &z, &cond, &noise)?;
            match pick(&terms) {
                Some(v) => Ok(grad_norm(&state.gen_params.collect_grads(&tape.backward(&v)?, &bound))),
                None => Ok(0.0),
            }
        };
        breakdown.grad_norms = Some(TermGradNorms {
            reg: norm_of(pick_reg)?,
            reward: norm_of(pick_reward)?,
            cfg: norm_of(pick_cfg)?,
        });
    }

    let grads = tape.backward(&total)?;
    let g = state.gen_params.collect_grads(&grads, &bound);
    let norm = grad_norm(&g);
    state.gen_adam.step(&mut state.gen_params, &g)?;
    state.ema.update(&state.gen_params)?;
    Ok((breakdown, norm, x0, cond))
}

/// Quality measurements of a generator on a fixed evaluation draw.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Evaluation {
    pub samples: usize,
    pub energy_distance: Option<f64>,
    pub target_mode_fraction: Option<f64>,
    pub reward_mean: Option<f64>,
    /// `E[log p_t(x_t | c) - log p_t(x_t)]` over [`LOG_RATIO_TIMES`].
    pub log_ratio: Option<f64>,
}

/// Times at which the guidance log-ratio is averaged.
pub const LOG_RATIO_TIMES: [f64; 4] = [0.1, 0.5, 1.0, 2.0];

/// Latents, classes and diffusion noise for evaluation; depend only on
/// the seed, so runs sharing a seed are compared on identical draws.
pub fn eval_draw(config: &AlignmentConfig, n: usize) -> (Array, Vec<Option<usize>>, Array) {
    let mut rng = RngStreams::new(config.seed);
    let r = rng.get(Stream::Eval);
    let unit = standard_normal(r, n, config.generator.latent_dim());
    let cond = sample_classes(&class_probs(config), n, r);
    let eps = standard_normal(r, n, config.generator.dim);
    (unit, cond, eps)
}

/// Reference samples for the energy distance.
pub fn reference_samples(gmm: &GaussianMixture, seed: u64, n: usize) -> Array {
    let mut rng = RngStreams::new(seed ^ 0x9E37_79B9_7F4A_7C15);
    gmm.sample(n, rng.get(Stream::Eval)).0
}

/// Evaluates generator parameters `params` (raw or EMA) on `n` samples.
pub fn evaluate(state: &TrainState, config: &AlignmentConfig, params: &ParamStore, n: usize) -> Result<Evaluation> {
    let (unit, cond, eps) = eval_draw(config, n);
    let z = state.generator.latent_from_unit(&unit);
    let x = state.generator.generate(&z, &cond, params)?;
    evaluate_samples(config, &x, &cond, &eps)
}

pub fn evaluate_samples(config: &AlignmentConfig, x: &Array, cond: &[Option<usize>], eps: &Array) -> Result<Evaluation> {
    let n = x.rows();
    let mut ev = Evaluation {
        samples: n,
        ..Default::default()
    };
    if let Some(r) = &config.reward {
        ev.reward_mean = Some(mean_reward(r, x, cond)?);
    }
    let Some(gmm) = config.reference.mixture() else {
        return Ok(ev);
    };
    if n >= 2 {
        ev.energy_distance = Some(energy_distance(x, &reference_samples(gmm, config.seed, n))?);
    }
    if let Some(t) = config.reward.as_ref().and_then(|r| target_components(gmm, r)) {
        ev.target_mode_fraction = Some(target_mode_fraction(gmm, &t, x, cond));
    }
    if gmm.num_classes() > 0 && cond.iter().all(Option::is_some) {
        let scores = AnalyticScore::new(gmm.clone(), config.process)?;
        let mut total = 0.0;
        for &t in &LOG_RATIO_TIMES {
            let xt = config.process.diffuse(x, t, eps)?;
            let full = scores.marginal(t, None)?;
            let per_class: Vec<GaussianMixture> = (0..gmm.num_classes())
                .map(|c| scores.marginal(t, Some(c)))
                .collect::<Result<_>>()?;
            for (i, c) in cond.iter().enumerate() {
                let row = xt.row_slice(i);
                total += per_class[c.expect("checked")].log_density(row) - full.log_density(row);
            }
        }
        ev.log_ratio = Some(total / (n * LOG_RATIO_TIMES.len()) as f64);
    }
    Ok(ev)
}

/// Where and how often a run persists artifacts.
#[derive(Clone, Debug)]
pub struct RunOutputs {
    pub dir: Option<PathBuf>,
    /// Full-state checkpoint cadence (0 = final only).
    pub checkpoint_every: u64,
    /// Sample dump cadence (0 = final only).
    pub sample_every: u64,
    pub sample_count: usize,
    pub provenance: Provenance,
    /// Also compute per-term gradient norms each step (three extra passes).
    pub term_grad_norms: bool,
}

impl RunOutputs {
    /// In-memory run: no files.
    pub fn none(seed: u64) -> Self {
        Self {
            dir: None,
            checkpoint_every: 0,
            sample_every: 0,
            sample_count: 0,
            provenance: Provenance::new("none", seed),
            term_grad_norms: false,
        }
    }
}

pub struct RunResult {
    pub state: TrainState,
    pub metrics: Vec<MetricsRow>,
    /// Final evaluation of the EMA generator.
    pub evaluation: Evaluation,
}

/// Samples with their conditions, as written to disk.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct SampleFile {
    pub format: String,
    pub version: u32,
    pub artifact_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub iteration: Option<u64>,
    pub classes: Vec<Option<usize>>,
    pub samples: Vec<Vec<f64>>,
    /// Resolved configuration that produced the file, when available.
    pub config: Option<String>,
}

pub const SAMPLES_FORMAT: &str = "scorealign-samples";

impl SampleFile {
    pub fn new(prov: &Provenance, iteration: Option<u64>, x: &Array, cond: &[Option<usize>]) -> Self {
        Self {
            format: SAMPLES_FORMAT.into(),
            version: FORMAT_VERSION,
            artifact_version: ARTIFACT_VERSION.into(),
            config_hash: prov.config_hash.clone(),
            seed: prov.seed,
            iteration,
            classes: cond.to_vec(),
            samples: x.to_rows(),
            config: None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        crate::numerics::checkpoint::check_header(&f.format, f.version, SAMPLES_FORMAT)?;
        Ok(f)
    }
}

/// Appends rows to `metrics.csv`, dropping rows past `keep_through` from
/// an existing file (a resumed run rewrites what follows its checkpoint).
struct MetricsFile {
    file: File,
}

impl MetricsFile {
    fn open(path: &Path, prov: &Provenance, keep_through: u64) -> Result<Self> {
        let mut kept = Vec::new();
        if keep_through > 0 && path.exists() {
            for line in BufReader::new(File::open(path)?).lines() {
                let line = line?;
                if line.starts_with('#') || line.starts_with("iter") {
                    continue;
                }
                let it: u64 = line
                    .split(',')
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::invalid(format!("malformed metrics line `{line}`")))?;
                if it <= keep_through {
                    kept.push(line);
                }
            }
        }
        let mut buf = Vec::new();
        write_metrics(&mut buf, prov, &[])?;
        for l in kept {
            writeln!(buf, "{l}")?;
        }
        write_atomic(path, &buf)?;
        let file = OpenOptions::new().append(true).open(path)?;
        Ok(Self { file })
    }

    fn push(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.file, "{}", row.to_csv())?;
        Ok(())
    }
}

fn due(every: u64, it: u64, last: u64) -> bool {
    it == last || (every > 0 && it.is_multiple_of(every))
}

/// Runs from `state.iteration` up to `config.iterations`.
pub fn run(config: &AlignmentConfig, mut state: TrainState, outputs: &RunOutputs) -> Result<RunResult> {
    config.validate()?;
    let reference = Reference::new(config)?;
    let source = reference.source();
    let targets = match (&config.reward, config.reference.mixture()) {
        (Some(r), Some(g)) => target_components(g, r),
        _ => None,
    };
    let prov = &outputs.provenance;
    let mut metrics_file = match &outputs.dir {
        Some(dir) => {
            std::fs::create_dir_all(dir.join("checkpoints"))?;
            std::fs::create_dir_all(dir.join("samples"))?;
            Some(MetricsFile::open(&dir.join("metrics.csv"), prov, state.iteration)?)
        }
        None => None,
    };
    let mut rows = Vec::new();
    let last = config.iterations;
    while state.iteration < last {
        let it = state.iteration + 1;
        let before = outputs.dir.as_ref().map(|_| state.clone());
        let step = (|| -> Result<MetricsRow> {
            let (dsm, gn_a) = update_assistant(&mut state, config)?;
            let (lb, gn_g, x0, cond) = update_generator(&mut state, config, source.as_ref(), outputs.term_grad_norms)?;
            let mut row = MetricsRow {
                iter: it,
                loss_dsm: dsm,
                loss_reg: lb.reg,
                loss_reward: lb.reward,
                loss_cfg: lb.cfg,
                grad_norm_gen: gn_g,
                grad_norm_assistant: gn_a,
                ..Default::default()
            };
            if let Some(r) = &config.reward {
                row.reward_mean = Some(mean_reward(r, &x0, &cond)?);
            }
            if let (Some(t), Some(g)) = (&targets, config.reference.mixture()) {
                row.target_mode_fraction = Some(target_mode_fraction(g, t, &x0, &cond));
            }
            Ok(row)
        })();
        let mut row = match step {
            Ok(r) => r,
            Err(e) => {
                if let (Some(dir), Some(s)) = (&outputs.dir, before) {
                    // best effort: the original error matters more
                    let _ = s.checkpoint(config, &prov.config_hash).save(&dir.join("checkpoints/abort.json"));
                }
                return Err(Error::Step {
                    iteration: it,
                    source: Box::new(e),
                });
            }
        };
        state.iteration = it;
        if due(config.eval.every, it, last) && config.eval.samples >= 2 {
            row.energy_distance = evaluate(&state, config, state.ema.shadow(), config.eval.samples)?.energy_distance;
        }
        if let Some(f) = metrics_file.as_mut() {
            f.push(&row)?;
        }
        rows.push(row);
        if let Some(dir) = &outputs.dir {
            if due(outputs.checkpoint_every, it, last) {
                let ck = state.checkpoint(config, &prov.config_hash);
                ck.save(&dir.join(format!("checkpoints/iter_{it:07}.json")))?;
                ck.save(&dir.join("checkpoints/latest.json"))?;
            }
            if due(outputs.sample_every, it, last) && outputs.sample_count > 0 {
                let (unit, cond, _) = eval_draw(config, outputs.sample_count);
                let z = state.generator.latent_from_unit(&unit);
                let x = state.generator.generate(&z, &cond, state.ema.shadow())?;
                SampleFile::new(prov, Some(it), &x, &cond).save(&dir.join(format!("samples/iter_{it:07}.json")))?;
            }
        }
    }
    let evaluation = if config.eval.samples >= 2 {
        evaluate(&state, config, state.ema.shadow(), config.eval.samples)?
    } else {
        Evaluation::default()
    };
    if let Some(dir) = &outputs.dir {
        let spec = &config.generator;
        GeneratorCheckpoint::new(spec, &state.gen_params, false, state.iteration, &prov.config_hash, config.seed)
            .save(&dir.join("generator.json"))?;
        GeneratorCheckpoint::new(spec, state.ema.shadow(), true, state.iteration, &prov.config_hash, config.seed)
            .save(&dir.join("generator_ema.json"))?;
        state.checkpoint(config, &prov.config_hash).save(&dir.join("checkpoints/final.json"))?;
        write_atomic(&dir.join("evaluation.json"), serde_json::to_string_pretty(&evaluation)?.as_bytes())?;
    }
    Ok(RunResult {
        state,
        metrics: rows,
        evaluation,
    })
}
