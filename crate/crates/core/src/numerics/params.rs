use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::array::Array;
use super::tape::{Gradients, Tape, Var};
use crate::error::{Error, Result};

/// One named parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Ordered collection of named parameters.
///
/// Order is fixed at construction and is the order used by optimizers,
/// checkpoints and `bind`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    arrays: Vec<Array>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Array) {
        self.names.push(name.into());
        self.arrays.push(value);
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn arrays(&self) -> &[Array] {
        &self.arrays
    }

    pub fn arrays_mut(&mut self) -> &mut [Array] {
        &mut self.arrays
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.arrays[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.arrays.iter().map(Array::len).sum()
    }

    /// Attached leaves, one per parameter.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.arrays.iter().map(|a| tape.leaf(a.clone())).collect()
    }

    /// Frozen copies: usable in a graph, never receive gradient.
    pub fn frozen<'t>(&self) -> Vec<Var<'t>> {
        self.arrays.iter().map(|a| Var::constant(a.clone())).collect()
    }

    pub fn collect_grads(&self, grads: &Gradients, bound: &[Var<'_>]) -> Vec<Array> {
        bound.iter().map(|v| grads.wrt(v)).collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.arrays.iter().flat_map(|a| a.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::invalid(format!(
                "expected {} values, got {}",
                self.num_scalars(),
                flat.len()
            )));
        }
        let mut off = 0;
        for a in &mut self.arrays {
            let n = a.len();
            a.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (n, a) in self.names.iter().zip(&self.arrays) {
            h.update(n.as_bytes());
            for s in a.shape() {
                h.update((*s as u64).to_le_bytes());
            }
            for v in a.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    pub fn to_named(&self) -> Vec<NamedArray> {
        self.names
            .iter()
            .zip(&self.arrays)
            .map(|(n, a)| NamedArray {
                name: n.clone(),
                shape: a.shape().to_vec(),
                values: a.data().to_vec(),
            })
            .collect()
    }

    pub fn from_named(entries: &[NamedArray]) -> Result<Self> {
        let mut s = Self::new();
        for e in entries {
            s.push(e.name.clone(), Array::new(e.shape.clone(), e.values.clone())?);
        }
        Ok(s)
    }

    /// Overwrites values from `other`, which must have identical layout.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Checkpoint(format!(
                "parameter names differ: {:?} vs {:?}",
                self.names, other.names
            )));
        }
        for (a, b) in self.arrays.iter().zip(&other.arrays) {
            if a.shape() != b.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        self.arrays = other.arrays.clone();
        Ok(())
    }

    /// Euclidean distance between two stores of identical layout.
    pub fn distance(&self, other: &ParamStore) -> f64 {
        self.arrays
            .iter()
            .zip(&other.arrays)
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)))
            .sum::<f64>()
            .sqrt()
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn grad_norm(grads: &[Array]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}
