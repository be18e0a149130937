use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed test fields `u: R^d -> R^d` for the score-projection identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum VectorField {
    Constant { value: Vec<f64> },
    /// `M x + c`, `M` row-major `d x d`.
    Linear { matrix: Vec<f64>, offset: Vec<f64> },
    /// `tanh(scale * x + shift)` elementwise.
    Tanh { scale: f64, shift: f64 },
}

impl VectorField {
    pub fn identity(d: usize) -> Self {
        let mut m = vec![0.0; d * d];
        for i in 0..d {
            m[i * d + i] = 1.0;
        }
        VectorField::Linear {
            matrix: m,
            offset: vec![0.0; d],
        }
    }

    pub fn eval(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let d = x.len();
        match self {
            VectorField::Constant { value } => {
                if value.len() != d {
                    return Err(Error::invalid("constant field has wrong dimension"));
                }
                out.copy_from_slice(value);
            }
            VectorField::Linear { matrix, offset } => {
                if matrix.len() != d * d || offset.len() != d {
                    return Err(Error::invalid("linear field has wrong dimension"));
                }
                for i in 0..d {
                    out[i] = offset[i] + (0..d).map(|j| matrix[i * d + j] * x[j]).sum::<f64>();
                }
            }
            VectorField::Tanh { scale, shift } => {
                for (o, v) in out.iter_mut().zip(x) {
                    *o = (scale * v + shift).tanh();
                }
            }
        }
        Ok(())
    }
}
