use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Array, Var};

/// Distance `d(y)` applied to a score difference, one sample per row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DistanceFunction {
    /// `||y||^2`
    SquaredL2,
    /// `sqrt(||y||^2 + c^2) - c`
    PseudoHuber { c: f64 },
}

impl DistanceFunction {
    pub const DEFAULT_HUBER_C: f64 = 0.1;

    pub fn pseudo_huber(c: f64) -> Result<Self> {
        if !(c > 0.0) {
            return Err(Error::invalid(format!("pseudo-huber c must be > 0, got {c}")));
        }
        Ok(DistanceFunction::PseudoHuber { c })
    }

    pub fn value(&self, y: &[f64]) -> f64 {
        let n2: f64 = y.iter().map(|v| v * v).sum();
        match *self {
            DistanceFunction::SquaredL2 => n2,
            // Written to avoid cancellation for small ||y||.
            DistanceFunction::PseudoHuber { c } => n2 / ((n2 + c * c).sqrt() + c),
        }
    }

    /// `d'(y)`.
    pub fn grad(&self, y: &[f64]) -> Vec<f64> {
        match *self {
            DistanceFunction::SquaredL2 => y.iter().map(|v| 2.0 * v).collect(),
            DistanceFunction::PseudoHuber { c } => {
                let n2: f64 = y.iter().map(|v| v * v).sum();
                let s = (n2 + c * c).sqrt();
                y.iter().map(|v| v / s).collect()
            }
        }
    }

    /// Row-wise `d'(y)` on a tape, differentiable in `y`.
    pub fn grad_var<'t>(&self, y: &Var<'t>) -> Result<Var<'t>> {
        match *self {
            DistanceFunction::SquaredL2 => y.scale(2.0),
            DistanceFunction::PseudoHuber { c } => {
                let c2 = Var::constant(Array::scalar(c * c));
                let denom = y.square()?.sum_rows()?.add(&c2)?.sqrt()?;
                y.div(&denom)
            }
        }
    }

    /// Row-wise `d(y)` as an `n x 1` column on a tape.
    pub fn value_var<'t>(&self, y: &Var<'t>) -> Result<Var<'t>> {
        let n2 = y.square()?.sum_rows()?;
        match *self {
            DistanceFunction::SquaredL2 => Ok(n2),
            DistanceFunction::PseudoHuber { c } => {
                let c2 = Var::constant(Array::scalar(c * c));
                let cc = Var::constant(Array::scalar(c));
                n2.add(&c2)?.sqrt()?.sub(&cc)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;
    use proptest::prelude::*;

    #[test]
    fn zero_is_zero() {
        for d in [DistanceFunction::SquaredL2, DistanceFunction::PseudoHuber { c: 0.1 }] {
            assert_eq!(d.value(&[0.0, 0.0]), 0.0);
            assert_eq!(d.grad(&[0.0, 0.0]), vec![0.0, 0.0]);
        }
    }

    #[test]
    fn huber_unit_vector_limit() {
        let g = DistanceFunction::PseudoHuber { c: 1e-12 }.grad(&[3.0, 4.0]);
        assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] - 0.8).abs() < 1e-12);
        assert!(DistanceFunction::pseudo_huber(0.0).is_err());
    }

    #[test]
    fn grads_match_finite_differences() {
        let y = [0.7, -1.3];
        for d in [DistanceFunction::SquaredL2, DistanceFunction::PseudoHuber { c: 0.1 }] {
            let g = d.grad(&y);
            for i in 0..2 {
                let h = 1e-6;
                let mut p = y;
                let mut m = y;
                p[i] += h;
                m[i] -= h;
                let fd = (d.value(&p) - d.value(&m)) / (2.0 * h);
                assert!(((g[i] - fd) / g[i]).abs() < 1e-6, "{d:?} {i}");
            }
        }
    }

    #[test]
    fn tape_forms_agree() {
        let tape = Tape::new();
        let y = tape.leaf(Array::from_rows(&[vec![0.3, -0.2], vec![2.0, 1.0]]).unwrap());
        let d = DistanceFunction::PseudoHuber { c: 0.5 };
        let g = d.grad_var(&y).unwrap();
        let v = d.value_var(&y).unwrap();
        for r in 0..2 {
            let row = y.value().row_slice(r);
            let expect = d.grad(row);
            for c in 0..2 {
                assert!((g.value().get(r, c) - expect[c]).abs() < 1e-15);
            }
            assert!((v.value().get(r, 0) - d.value(row)).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn huber_grad_norm_below_one(a in -1e3f64..1e3, b in -1e3f64..1e3, c in 1e-3f64..10.0) {
            let g = DistanceFunction::PseudoHuber { c }.grad(&[a, b]);
            prop_assert!((g[0] * g[0] + g[1] * g[1]).sqrt() < 1.0);
            let v = DistanceFunction::PseudoHuber { c }.value(&[a, b]);
            prop_assert!(v >= 0.0);
        }

        #[test]
        fn huber_tends_to_scaled_l2(a in -10f64..10.0, b in -10f64..10.0) {
            prop_assume!(a * a + b * b <= 100.0);
            let c = 1e6;
            let g = DistanceFunction::PseudoHuber { c }.grad(&[a, b]);
            for (gi, yi) in g.iter().zip([a, b]) {
                let scaled = c * gi;
                prop_assert!((scaled - yi).abs() <= 1e-3 * yi.abs().max(1e-9));
            }
        }
    }
}
