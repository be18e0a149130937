use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use scorealign::training::METRICS_COLUMNS;
use scorealign_cli::{RunConfig, KEYS};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_scorealign"));
    c.env_remove(scorealign_cli::OUT_ROOT_ENV).env("RUST_LOG", "warn");
    c
}

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn gmm(name: &str) -> String {
    repo().join("configs/data").join(name).display().to_string()
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    eprintln!("stdout: {}", String::from_utf8_lossy(&out.stdout));
    eprintln!("stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

/// Data rows of a metrics file, parsed by an ordinary CSV reader.
fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .unwrap();
    let header = rdr.headers().unwrap().iter().map(String::from).collect();
    let rows = rdr
        .records()
        .map(|r| r.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

fn small_score(out: &Path, steps: u64) -> String {
    format!(
        "run.out = \"{}\"\nreference.gmm = \"{}\"\nscore.hidden = [16]\nscore.batch_size = 64\n\
         score.steps = {steps}\nscore.checkpoint_every = 5\n",
        out.display(),
        gmm("two_mode.toml")
    )
}

fn small_align(out: &Path) -> String {
    format!(
        "run.out = \"{}\"\nrun.checkpoint_every = 10\nrun.sample_every = 10\nrun.sample_count = 16\n\
         reference.gmm = \"{}\"\nalignment.iterations = 20\nalignment.batch_size = 32\n\
         reward.kind = \"mode-affinity\"\nreward.targets = [[2.0, 2.0], [2.0, -2.0]]\n\
         generator.hidden = [16]\nassistant.hidden = [16]\nassistant.pretrain_steps = 5\n\
         eval.every = 10\neval.samples = 64\n",
        out.display(),
        gmm("four_mode.toml")
    )
}

#[test]
fn train_score_without_mixture_names_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(bin().args(["train-score", "--out"]).arg(tmp.path()));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("reference.gmm"));
}

#[test]
fn unknown_key_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "alignment.alpha_rwe = 1.0\n");
    let out = run(bin().args(["align", "--config"]).arg(&cfg));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("alignment.alpha_rwe"));
}

#[test]
fn train_score_writes_checkpoint_and_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("score");
    let cfg = write_config(tmp.path(), "c.toml", &small_score(&dir, 10));
    let out = run(bin().args(["train-score", "--config"]).arg(&cfg));
    assert!(out.status.success());
    assert!(dir.join("score.json").exists());
    let (header, rows) = csv_rows(&dir.join("metrics.csv"));
    assert_eq!(header, ["iter", "loss_dsm", "grad_norm"]);
    assert_eq!(rows.len(), 10);
    let head = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert!(head.starts_with("# config_hash="));
}

#[test]
fn train_score_resume_matches_unbroken_run() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let ca = write_config(tmp.path(), "a.toml", &small_score(&a, 10));
    let cb = write_config(tmp.path(), "b.toml", &small_score(&b, 10));
    assert!(run(bin().args(["train-score", "--config"]).arg(&ca)).status.success());
    assert!(run(bin().args(["train-score", "--config"]).arg(&cb)).status.success());
    let mid = b.join("checkpoints/step_0000005.json");
    let resume = format!("score.resume={}", mid.display());
    let out = run(bin().args(["train-score", "--set", &resume, "--config"]).arg(&cb));
    assert!(out.status.success());
    for f in ["score.json", "metrics.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn align_outputs_follow_the_schema_and_resume_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let ca = write_config(tmp.path(), "a.toml", &small_align(&a));
    let cb = write_config(tmp.path(), "b.toml", &small_align(&b));
    let out = run(bin().args(["align", "--preset", "dit-style", "--export-curves", "--config"]).arg(&ca));
    assert!(out.status.success());

    let (header, rows) = csv_rows(&a.join("metrics.csv"));
    assert_eq!(header, METRICS_COLUMNS);
    assert_eq!(rows.len(), 20);
    for f in [
        "generator.json",
        "generator_ema.json",
        "evaluation.json",
        "checkpoints/final.json",
        "checkpoints/iter_0000010.json",
        "samples/iter_0000020.json",
    ] {
        assert!(a.join(f).exists(), "{f}");
    }
    let (h, r) = csv_rows(&a.join("curves/reward_mean.csv"));
    assert_eq!(h, ["iter", "reward_mean"]);
    assert_eq!(r.len(), 20);
    let (h, r) = csv_rows(&a.join("curves/energy_distance.csv"));
    assert_eq!(h, ["iter", "energy_distance"]);
    assert_eq!(r.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(), ["10", "20"]);

    // the echo re-parses to the resolved config, presets included
    let echoed = RunConfig::load(&a.join("config.toml")).unwrap();
    let mut resolved = RunConfig::load(&ca).unwrap();
    resolved.set_str("alignment.preset", "dit-style").unwrap();
    assert_eq!(echoed, resolved);

    // seed-identical run, then a resume from its midpoint, reproduce the bytes
    assert!(run(bin().args(["align", "--preset", "dit-style", "--config"]).arg(&cb)).status.success());
    let files = ["metrics.csv", "generator.json", "generator_ema.json", "checkpoints/final.json"];
    for f in files {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let resume = format!("run.resume={}", b.join("checkpoints/iter_0000010.json").display());
    let out = run(bin().args(["align", "--preset", "dit-style", "--set", &resume, "--config"]).arg(&cb));
    assert!(out.status.success());
    for f in files {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} after resume");
    }

    // a checkpoint from a different configuration is refused
    let out = run(bin().args(["align", "--seed", "9", "--set", &resume, "--config"]).arg(&cb));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("run.resume"));
}

#[test]
fn presets_and_baseline_resolve() {
    let text = format!(
        "reference.gmm = \"{}\"\nreward.kind = \"neg-squared-distance\"\nreward.targets = [[2.0, 2.0]]\n",
        gmm("four_mode.toml")
    );
    let mut cfg = RunConfig::parse(&text, None).unwrap();
    cfg.set_str("alignment.preset", "dit-style").unwrap();
    let dit = cfg.alignment().unwrap();
    assert_eq!((dit.alpha_rew, dit.alpha_cfg), (10.0, 4.5));
    cfg.set_str("alignment.preset", "sd15-style").unwrap();
    let sd = cfg.alignment().unwrap();
    assert_eq!((sd.alpha_rew, sd.alpha_cfg), (1000.0, 1.5));

    // the baseline flag changes nothing else
    cfg.set_str("alignment.baseline", "dipp-kl").unwrap();
    let mut kl = cfg.alignment().unwrap();
    assert_eq!(kl.baseline, scorealign::training::Baseline::DippKl);
    kl.baseline = sd.baseline;
    assert_eq!(format!("{kl:?}"), format!("{sd:?}"));
    assert!(cfg.set_str("alignment.baseline", "dippkl").is_ok());
    assert!(cfg.alignment().is_err());
}

#[test]
fn verify_exit_codes_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(bin()
        .args(["verify", "--set", "verify.recovery=false", "--out"])
        .arg(tmp.path().join("checks")));
    assert_eq!(out.status.code(), Some(0));
    let text = std::fs::read_to_string(tmp.path().join("checks/verify.jsonl")).unwrap();
    let mut lines = text.lines();
    let prov: serde_json::Value = serde_json::from_str(lines.next().unwrap()).unwrap();
    assert!(prov["config_hash"].is_string());
    let reports: Vec<serde_json::Value> = lines.map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(reports.len() >= 10);
    assert!(reports.iter().all(|r| r["pass"] == true && r["negative_control"] == false));

    let out = run(bin()
        .args(["verify", "--negative-controls", "--set", "verify.recovery=false", "--out"])
        .arg(tmp.path().join("controls")));
    assert_eq!(out.status.code(), Some(0));
    let text = std::fs::read_to_string(tmp.path().join("controls/verify.jsonl")).unwrap();
    let controls: Vec<serde_json::Value> = text.lines().skip(1).map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(!controls.is_empty());
    assert!(controls.iter().all(|r| r["pass"] == false && r["negative_control"] == true));
}

#[test]
fn sample_files_are_deterministic_and_sweep_classes() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let ca = write_config(tmp.path(), "a.toml", &small_align(&a));
    let mut cfg = std::fs::read_to_string(&ca).unwrap();
    cfg.push_str("alignment.iterations = 2\n");
    let cfg = cfg.replace("alignment.iterations = 20\n", "");
    std::fs::write(&ca, cfg).unwrap();
    assert!(run(bin().args(["align", "--config"]).arg(&ca)).status.success());
    let ck = a.join("generator_ema.json");

    let sample = |out: &Path, extra: &[&str]| {
        run(bin()
            .args(["sample", "--checkpoint"])
            .arg(&ck)
            .arg("--out")
            .arg(out)
            .args(extra))
    };
    let s1 = tmp.path().join("s1");
    let s2 = tmp.path().join("s2");
    assert!(sample(&s1, &["--n", "50", "--seed", "3"]).status.success());
    assert!(sample(&s2, &["--n", "50", "--seed", "3"]).status.success());
    for c in 0..2 {
        let f = format!("samples_class{c}.json");
        let bytes = std::fs::read(s1.join(&f)).unwrap();
        assert_eq!(bytes, std::fs::read(s2.join(&f)).unwrap());
        let v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(v["samples"].as_array().unwrap().len(), 50);
        assert!(v["classes"].as_array().unwrap().iter().all(|k| k == c));
        assert!(v["config_hash"].is_string() && v["config"].is_string());
    }

    let s3 = tmp.path().join("s3");
    assert!(sample(&s3, &["--n", "0", "--class", "1"]).status.success());
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(s3.join("samples_class1.json")).unwrap()).unwrap();
    assert_eq!(v["samples"], serde_json::json!([]));
    assert!(!s3.join("samples_class0.json").exists());

    let out = run(bin().args(["sample", "--class", "5", "--checkpoint"]).arg(&ck).arg("--out").arg(&s3));
    assert_eq!(out.status.code(), Some(2));
    let bad = write_config(tmp.path(), "bad.json", "{}");
    let out = run(bin().args(["sample", "--checkpoint"]).arg(&bad).arg("--out").arg(&s3));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sample.checkpoint"));
}

#[test]
fn out_root_env_prefixes_relative_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cmd = bin();
    cmd.env(scorealign_cli::OUT_ROOT_ENV, tmp.path())
        .args(["train-score", "--out", "rel", "--set", "score.steps=2", "--set", "score.hidden=[8]"])
        .arg("--set")
        .arg(format!("reference.gmm={}", gmm("two_mode.toml")));
    assert!(run(&mut cmd).status.success());
    assert!(tmp.path().join("rel/score.json").exists());
}

#[test]
fn shipped_configs_resolve() {
    for entry in std::fs::read_dir(repo().join("configs")).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "toml") {
            let cfg = RunConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            if cfg.path("reference.gmm").is_some() {
                cfg.alignment().unwrap_or_else(|e| panic!("{}: {e}", p.display()));
                cfg.score_settings().unwrap();
            }
        }
    }
}

#[test]
fn config_doc_covers_every_key() {
    let doc = std::fs::read_to_string(repo().join("docs/config.md")).unwrap();
    for (k, d, _) in KEYS {
        assert!(doc.contains(&format!("| `{k}` | `{d}` |")), "docs/config.md lacks {k}");
    }
}
