//! The four subcommands, as library functions so tests can drive them
//! without spawning processes.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use log::info;
use scorealign::numerics::checkpoint::write_atomic;
use scorealign::numerics::{Array, RngStreams, Stream};
use scorealign::training::{
    run, write_dsm_metrics, GeneratorCheckpoint, Provenance, RunOutputs, SampleFile, ScoreCheckpoint, ScoreTrainer,
    TrainCheckpoint, TrainState, METRICS_COLUMNS,
};
use scorealign::verify::{run_battery, BatteryOptions, CheckReport};
use scorealign::{Error, Result};

use crate::config::RunConfig;

fn provenance(cfg: &RunConfig) -> Result<Provenance> {
    Ok(Provenance::new(cfg.hash(), cfg.seed()?))
}

/// Writes the resolved configuration, headed by its provenance comment.
fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let text = format!("{}\n{}", provenance(cfg)?.comment(), cfg.echo());
    write_atomic(&dir.join("config.toml"), text.as_bytes())
}

fn load_at<T>(key: &str, path: &Path, load: impl Fn(&Path) -> Result<T>) -> Result<T> {
    load(path).map_err(|e| Error::config(key, format!("{}: {e}", path.display())))
}

/// Rows `(step, loss, grad norm)` of an existing DSM metrics file up to
/// and including `through`.
fn read_dsm_rows(path: &Path, through: u64) -> Result<Vec<(u64, f64, f64)>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut rows = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.starts_with('#') || line.starts_with("iter") {
            continue;
        }
        let bad = || Error::invalid(format!("malformed metrics line `{line}`"));
        let mut cells = line.split(',');
        let mut next = || cells.next().ok_or_else(bad);
        let step: u64 = next()?.parse().map_err(|_| bad())?;
        let loss: f64 = next()?.parse().map_err(|_| bad())?;
        let gn: f64 = next()?.parse().map_err(|_| bad())?;
        if step <= through {
            rows.push((step, loss, gn));
        }
    }
    Ok(rows)
}

/// DSM-trains a reference score network on `reference.gmm`.
///
/// Writes `score.json` (load it as `reference.checkpoint`), periodic
/// `checkpoints/step_*.json`, `metrics.csv` and `config.toml`. Returns the
/// final checkpoint path.
pub fn train_score(cfg: &RunConfig) -> Result<PathBuf> {
    let data = cfg.require_mixture()?;
    let settings = cfg.score_settings()?;
    let spec = cfg.score_spec(&data)?;
    let prov = provenance(cfg)?;
    let dir = cfg.out_dir();
    std::fs::create_dir_all(dir.join("checkpoints"))?;
    echo_config(cfg, &dir)?;
    let metrics_path = dir.join("metrics.csv");
    let (mut trainer, mut rows) = match cfg.path("score.resume") {
        Some(p) => {
            let ck = load_at("score.resume", &p, ScoreCheckpoint::load)?;
            if ck.config_hash != prov.config_hash {
                return Err(Error::config("score.resume", "checkpoint was written under a different configuration"));
            }
            if ck.model != spec {
                return Err(Error::config("score.resume", "checkpoint architecture differs from the config"));
            }
            let rows = read_dsm_rows(&metrics_path, ck.step)?;
            (ScoreTrainer::resume(&ck, settings)?, rows)
        }
        None => (ScoreTrainer::new(spec, settings, prov.seed)?, Vec::new()),
    };
    let steps = cfg.u64("score.steps")?;
    let every = cfg.u64("score.checkpoint_every")?;
    let save_metrics = |rows: &[(u64, f64, f64)]| -> Result<()> {
        let mut buf = Vec::new();
        write_dsm_metrics(&mut buf, &prov, rows)?;
        write_atomic(&metrics_path, &buf)
    };
    while trainer.step < steps {
        let (loss, gn) = trainer.step(&data)?;
        rows.push((trainer.step, loss, gn));
        if every > 0 && trainer.step % every == 0 {
            let ck = trainer.checkpoint(&prov.config_hash);
            ck.save(&dir.join(format!("checkpoints/step_{:07}.json", trainer.step)))?;
            ck.save(&dir.join("checkpoints/latest.json"))?;
            save_metrics(&rows)?;
            info!("score step {}: dsm loss {loss:.5}", trainer.step);
        }
    }
    save_metrics(&rows)?;
    let out = dir.join("score.json");
    trainer.checkpoint(&prov.config_hash).save(&out)?;
    info!("wrote {}", out.display());
    Ok(out)
}

/// Summary of an `align` run.
#[derive(Clone, Debug)]
pub struct AlignSummary {
    pub dir: PathBuf,
    pub iterations: u64,
    pub energy_distance: Option<f64>,
    pub reward_mean: Option<f64>,
    pub target_mode_fraction: Option<f64>,
}

/// Runs the alignment loop; see [`scorealign::training::run`] for the
/// files it writes. With `export_curves`, also writes
/// `curves/reward_mean.csv` and `curves/energy_distance.csv`.
pub fn align(cfg: &RunConfig, export_curves: bool) -> Result<AlignSummary> {
    let config = cfg.alignment()?;
    let prov = provenance(cfg)?;
    let dir = cfg.out_dir();
    let state = match cfg.path("run.resume") {
        Some(p) => {
            let ck = load_at("run.resume", &p, TrainCheckpoint::load)?;
            if ck.config_hash != prov.config_hash {
                return Err(Error::config("run.resume", "checkpoint was written under a different configuration"));
            }
            TrainState::from_checkpoint(&ck, &config)?
        }
        None => TrainState::init(&config)?,
    };
    echo_config(cfg, &dir)?;
    let outputs = RunOutputs {
        dir: Some(dir.clone()),
        checkpoint_every: cfg.u64("run.checkpoint_every")?,
        sample_every: cfg.u64("run.sample_every")?,
        sample_count: cfg.usize("run.sample_count")?,
        provenance: prov.clone(),
        term_grad_norms: cfg.bool("run.term_grad_norms"),
    };
    info!(
        "aligning: alpha_rew={} alpha_cfg={} baseline={} from iteration {}",
        config.alpha_rew,
        config.alpha_cfg,
        config.baseline.name(),
        state.iteration
    );
    let result = run(&config, state, &outputs)?;
    if export_curves {
        write_curves(&dir, &prov)?;
    }
    let ev = &result.evaluation;
    Ok(AlignSummary {
        dir,
        iterations: result.state.iteration,
        energy_distance: ev.energy_distance,
        reward_mean: ev.reward_mean,
        target_mode_fraction: ev.target_mode_fraction,
    })
}

/// Splits `metrics.csv` into one two-column file per exported curve,
/// skipping iterations where the value was not measured.
pub fn write_curves(dir: &Path, prov: &Provenance) -> Result<()> {
    let text = std::fs::read_to_string(dir.join("metrics.csv"))?;
    std::fs::create_dir_all(dir.join("curves"))?;
    for name in ["reward_mean", "energy_distance"] {
        let col = METRICS_COLUMNS.iter().position(|c| *c == name).expect("documented column");
        let mut out = format!("{}\niter,{name}\n", prov.comment());
        for line in text.lines().filter(|l| !l.starts_with('#') && !l.starts_with("iter")) {
            let cells: Vec<&str> = line.split(',').collect();
            if let Some(v) = cells.get(col).filter(|v| !v.is_empty()) {
                out.push_str(&format!("{},{v}\n", cells[0]));
            }
        }
        write_atomic(&dir.join(format!("curves/{name}.csv")), out.as_bytes())?;
    }
    Ok(())
}

/// Runs the check battery, streaming JSON lines to `verify.jsonl` in the
/// output directory (after a provenance line) and to `echo`. Returns
/// whether every check behaved as designed.
pub fn verify(cfg: &RunConfig, negative_controls: bool, echo: &mut dyn Write) -> Result<bool> {
    let prov = provenance(cfg)?;
    let dir = cfg.out_dir();
    echo_config(cfg, &dir)?;
    let opts = BatteryOptions {
        seed: prov.seed,
        negative_controls,
        recovery: cfg.bool("verify.recovery"),
    };
    let mut file = File::create(dir.join("verify.jsonl"))?;
    writeln!(file, "{}", serde_json::to_string(&prov)?)?;
    let mut io_err = None;
    let mut sink = |r: &CheckReport| {
        let res = CheckReport::write_jsonl(std::slice::from_ref(r), &mut file)
            .and_then(|_| CheckReport::write_jsonl(std::slice::from_ref(r), &mut *echo));
        if let Err(e) = res {
            io_err.get_or_insert(e);
        }
    };
    let reports = run_battery(&opts, &mut sink)?;
    if let Some(e) = io_err {
        return Err(e);
    }
    let bad: Vec<&str> = reports.iter().filter(|r| !r.as_designed()).map(|r| r.name.as_str()).collect();
    if !bad.is_empty() {
        log::warn!("not as designed: {}", bad.join(", "));
    }
    Ok(bad.is_empty())
}

/// Draws `sample.n` samples from the generator in `sample.checkpoint`.
///
/// `sample.class = -1` sweeps every class (one `samples_class{k}.json`
/// each), or writes `samples.json` for an unconditional generator. Every
/// class uses the same latents, so files differ only by the condition.
pub fn sample(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let path = cfg
        .path("sample.checkpoint")
        .ok_or_else(|| Error::config("sample.checkpoint", "required: generator checkpoint to sample from"))?;
    let ck = load_at("sample.checkpoint", &path, GeneratorCheckpoint::load)?;
    let (generator, params) = ck.generator().map_err(|e| Error::config("sample.checkpoint", e.to_string()))?;
    let n = cfg.usize("sample.n")?;
    let k = generator.num_classes();
    let classes: Vec<Option<usize>> = match cfg.i64("sample.class") {
        -1 if k == 0 => vec![None],
        -1 => (0..k).map(Some).collect(),
        c if c >= 0 && (c as usize) < k => vec![Some(c as usize)],
        c => {
            return Err(Error::config(
                "sample.class",
                format!("class {c} out of range for a generator with {k} classes"),
            ))
        }
    };
    let prov = provenance(cfg)?;
    let dir = cfg.out_dir();
    echo_config(cfg, &dir)?;
    let mut rng = RngStreams::new(prov.seed);
    let z = generator.latent_from_unit(&generator.unit_latent(n, rng.get(Stream::Eval)));
    let mut written = Vec::new();
    for c in classes {
        let cond = vec![c; n];
        let x = if n == 0 {
            Array::zeros(0, ck.model.dim)
        } else {
            generator.generate(&z, &cond, &params)?
        };
        let mut file = SampleFile::new(&prov, Some(ck.iteration), &x, &cond);
        file.config = Some(cfg.portable_echo());
        let out = match c {
            Some(c) => dir.join(format!("samples_class{c}.json")),
            None => dir.join("samples.json"),
        };
        file.save(&out)?;
        info!("wrote {} samples to {}", n, out.display());
        written.push(out);
    }
    Ok(written)
}
