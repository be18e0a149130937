use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use scorealign_cli::{commands, exit, exit_code, RunConfig};

#[derive(Parser)]
#[command(name = "scorealign", version, about = "Reward-aligned score-divergence distillation on toy mixtures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (`section.key = value` lines).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides run.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides run.out.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Overrides any key, e.g. `--set alignment.iterations=200`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// DSM-train a reference score network on reference.gmm.
    TrainScore {
        #[command(flatten)]
        common: Common,
    },
    /// Distill (and align) a one-step generator.
    Align {
        #[command(flatten)]
        common: Common,
        /// dit-style or sd15-style; sets the two reward scales.
        #[arg(long, value_name = "NAME")]
        preset: Option<String>,
        /// di-star or dipp-kl.
        #[arg(long)]
        baseline: Option<String>,
        /// Also write per-run reward and energy-distance curves.
        #[arg(long)]
        export_curves: bool,
    },
    /// Run the analytic check battery; exits 3 when a check misbehaves.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Run the negative controls (they pass by failing).
        #[arg(long)]
        negative_controls: bool,
    },
    /// Draw samples from a generator checkpoint.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Overrides sample.checkpoint.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Overrides sample.n.
        #[arg(long)]
        n: Option<u64>,
        /// Overrides sample.class (-1 sweeps every class).
        #[arg(long, allow_negative_numbers = true)]
        class: Option<i64>,
    },
}

fn absolute(p: &PathBuf) -> Result<String> {
    Ok(std::path::absolute(p)
        .with_context(|| format!("resolving {}", p.display()))?
        .display()
        .to_string())
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| scorealign::Error::config(kv.as_str(), "expected KEY=VALUE"))?;
        cfg.set_str(k.trim(), v.trim())?;
    }
    if let Some(s) = common.seed {
        cfg.set("run.seed", toml::Value::Integer(i64::try_from(s).context("--seed")?))?;
    }
    if let Some(o) = &common.out {
        cfg.set("run.out", toml::Value::String(o.display().to_string()))?;
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::TrainScore { common } => {
            let cfg = resolve(&common)?;
            let path = commands::train_score(&cfg)?;
            println!("{}", path.display());
        }
        Command::Align {
            common,
            preset,
            baseline,
            export_curves,
        } => {
            let mut cfg = resolve(&common)?;
            if let Some(p) = preset {
                cfg.set("alignment.preset", toml::Value::String(p))?;
            }
            if let Some(b) = baseline {
                cfg.set("alignment.baseline", toml::Value::String(b))?;
            }
            let s = commands::align(&cfg, export_curves)?;
            let show = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
            println!(
                "{}: {} iterations, energy distance {}, reward {}, target-mode fraction {}",
                s.dir.display(),
                s.iterations,
                show(s.energy_distance),
                show(s.reward_mean),
                show(s.target_mode_fraction)
            );
        }
        Command::Verify {
            common,
            negative_controls,
        } => {
            let cfg = resolve(&common)?;
            let ok = commands::verify(&cfg, negative_controls, &mut std::io::stdout().lock())?;
            if !ok {
                return Ok(exit::VERIFY);
            }
        }
        Command::Sample {
            common,
            checkpoint,
            n,
            class,
        } => {
            let mut cfg = resolve(&common)?;
            if let Some(p) = checkpoint {
                cfg.set("sample.checkpoint", toml::Value::String(absolute(&p)?))?;
            }
            if let Some(n) = n {
                cfg.set("sample.n", toml::Value::Integer(i64::try_from(n).context("--n")?))?;
            }
            if let Some(c) = class {
                cfg.set("sample.class", toml::Value::Integer(c))?;
            }
            for p in commands::sample(&cfg)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(exit::OK)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
