use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Outcome of one executable check.
///
/// `pass` holds iff `|estimate - oracle| <= tolerance`. Monte Carlo checks
/// against zero express their `k * SE` bound through `tolerance` and
/// record the standard error separately.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub estimate: f64,
    pub oracle: f64,
    pub tolerance: f64,
    pub std_error: Option<f64>,
    pub pass: bool,
    pub samples: usize,
    pub seed: u64,
    /// A control is built to fail; it "succeeds" when `pass` is false.
    pub negative_control: bool,
    /// Extra diagnostics (per-time errors, FD stability, ...).
    #[serde(default)]
    pub details: BTreeMap<String, f64>,
}

impl CheckReport {
    pub fn new(name: impl Into<String>, estimate: f64, oracle: f64, tolerance: f64) -> Self {
        let pass = (estimate - oracle).abs() <= tolerance;
        Self {
            name: name.into(),
            estimate,
            oracle,
            tolerance,
            std_error: None,
            pass,
            samples: 0,
            seed: 0,
            negative_control: false,
            details: BTreeMap::new(),
        }
    }

    pub fn with_se(mut self, se: f64) -> Self {
        self.std_error = Some(se);
        self
    }

    pub fn with_run(mut self, samples: usize, seed: u64) -> Self {
        self.samples = samples;
        self.seed = seed;
        self
    }

    pub fn detail(mut self, key: &str, v: f64) -> Self {
        self.details.insert(key.to_string(), v);
        self
    }

    /// Marks the report as a negative control.
    pub fn control(mut self) -> Self {
        self.negative_control = true;
        self
    }

    /// Forces failure (e.g. an unstable finite-difference step) and
    /// records why.
    pub fn fail_with(mut self, key: &str, v: f64) -> Self {
        self.pass = false;
        self.details.insert(key.to_string(), v);
        self
    }

    /// Whether the check behaved as designed: normal checks pass, controls
    /// fail.
    pub fn as_designed(&self) -> bool {
        self.pass != self.negative_control
    }

    pub fn write_jsonl<W: Write>(reports: &[CheckReport], mut w: W) -> Result<()> {
        for r in reports {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}
