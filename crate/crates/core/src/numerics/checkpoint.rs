//! Portable JSON container for named parameter tensors.
//!
//! ```json
//! {
//!   "format": "scorealign-params",
//!   "version": 1,
//!   "artifact_version": "0.1.0",
//!   "config_hash": "…",
//!   "seed": 7,
//!   "params": [ { "name": "…", "shape": [2, 3], "values": [ … ] } ]
//! }
//! ```
//!
//! Keys are always written in the order above and floats round-trip
//! bit-exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use sha2::{Digest, Sha256};

use super::params::{hex, NamedArray, ParamStore};
use crate::error::{Error, Result};

/// Hex SHA-256 of `bytes`; used for config hashes.
pub fn content_hash(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub const PARAMS_FORMAT: &str = "scorealign-params";
pub const FORMAT_VERSION: u32 = 1;
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCheckpoint {
    pub format: String,
    pub version: u32,
    pub artifact_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub params: Vec<NamedArray>,
}

impl ParamCheckpoint {
    pub fn new(params: &ParamStore, config_hash: &str, seed: u64) -> Self {
        Self {
            format: PARAMS_FORMAT.to_string(),
            version: FORMAT_VERSION,
            artifact_version: ARTIFACT_VERSION.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            params: params.to_named(),
        }
    }

    pub fn store(&self) -> Result<ParamStore> {
        ParamStore::from_named(&self.params)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(s)?;
        check_header(&ck.format, ck.version, PARAMS_FORMAT)?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

pub(crate) fn check_header(format: &str, version: u32, expected: &str) -> Result<()> {
    if format != expected {
        return Err(Error::Checkpoint(format!(
            "expected format `{expected}`, found `{format}`"
        )));
    }
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (this build reads {FORMAT_VERSION})"
        )));
    }
    Ok(())
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::array::Array;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut s = ParamStore::new();
        s.push("a", Array::row(&[0.1, 1.0 / 3.0, -2.5e-300, f64::MAX]));
        s.push("b", Array::matrix(2, 1, vec![std::f64::consts::PI, -0.0]).unwrap());
        let ck = ParamCheckpoint::new(&s, "abc", 9);
        let back = ParamCheckpoint::from_json(&ck.to_json().unwrap()).unwrap();
        let s2 = back.store().unwrap();
        assert_eq!(s.fingerprint(), s2.fingerprint());
    }

    #[test]
    fn key_order_is_fixed() {
        let ck = ParamCheckpoint::new(&ParamStore::new(), "h", 1);
        let json = ck.to_json().unwrap();
        let pos = |k: &str| json.find(&format!("\"{k}\"")).unwrap();
        assert!(pos("format") < pos("version"));
        assert!(pos("version") < pos("artifact_version"));
        assert!(pos("config_hash") < pos("seed"));
        assert!(pos("seed") < pos("params"));
    }

    #[test]
    fn rejects_foreign_format() {
        let mut ck = ParamCheckpoint::new(&ParamStore::new(), "h", 1);
        ck.format = "other".into();
        assert!(ParamCheckpoint::from_json(&ck.to_json().unwrap()).is_err());
        ck.format = PARAMS_FORMAT.into();
        ck.version = 99;
        assert!(ParamCheckpoint::from_json(&ck.to_json().unwrap()).is_err());
    }
}
