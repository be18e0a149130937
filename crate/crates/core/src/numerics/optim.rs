use serde::{Deserialize, Serialize};

use super::array::Array;
use super::params::{NamedArray, ParamStore};
use crate::error::{Error, Result};

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Array>,
    v: Vec<Array>,
}

impl AdamState {
    pub const DEFAULT_EPS: f64 = 1e-8;

    pub fn new(params: &ParamStore, lr: f64, beta1: f64, beta2: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::invalid(format!("learning rate must be > 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(Error::invalid(format!(
                "adam betas must lie in [0, 1), got ({beta1}, {beta2})"
            )));
        }
        let zeros: Vec<Array> = params.arrays().iter().map(Array::zeros_like).collect();
        Ok(Self {
            lr,
            beta1,
            beta2,
            eps: Self::DEFAULT_EPS,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. Rejects non-finite gradients before touching anything.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Array]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::invalid(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for ((name, p), g) in params.names().iter().zip(params.arrays()).zip(grads) {
            if p.dims() != g.dims() {
                return Err(Error::Shape {
                    op: "adam",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (k, p) in params.arrays_mut().iter_mut().enumerate() {
            let g = grads[k].data();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                let denom = vh.sqrt() + self.eps;
                if denom > 0.0 {
                    *w -= self.lr * mh / denom;
                }
            }
        }
        Ok(())
    }

    pub fn snapshot(&self, names: &[String]) -> AdamSnapshot {
        let pack = |xs: &[Array]| {
            names
                .iter()
                .zip(xs)
                .map(|(n, a)| NamedArray {
                    name: n.clone(),
                    shape: a.shape().to_vec(),
                    values: a.data().to_vec(),
                })
                .collect()
        };
        AdamSnapshot {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            step: self.step,
            m: pack(&self.m),
            v: pack(&self.v),
        }
    }

    pub fn restore(snap: &AdamSnapshot) -> Result<Self> {
        let unpack = |xs: &[NamedArray]| -> Result<Vec<Array>> {
            xs.iter()
                .map(|e| Array::new(e.shape.clone(), e.values.clone()))
                .collect()
        };
        Ok(Self {
            lr: snap.lr,
            beta1: snap.beta1,
            beta2: snap.beta2,
            eps: snap.eps,
            step: snap.step,
            m: unpack(&snap.m)?,
            v: unpack(&snap.v)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamSnapshot {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<NamedArray>,
    pub v: Vec<NamedArray>,
}

/// Exponential moving average of a parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    decay: f64,
    shadow: ParamStore,
}

impl EmaState {
    pub fn new(params: &ParamStore, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::invalid(format!("ema decay must lie in [0, 1), got {decay}")));
        }
        Ok(Self {
            decay,
            shadow: params.clone(),
        })
    }

    pub fn from_shadow(shadow: ParamStore, decay: f64) -> Result<Self> {
        let mut s = Self::new(&shadow, decay)?;
        s.shadow = shadow;
        Ok(s)
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn shadow(&self) -> &ParamStore {
        &self.shadow
    }

    /// `shadow <- decay * shadow + (1 - decay) * params`
    pub fn update(&mut self, params: &ParamStore) -> Result<()> {
        self.update_with(params, self.decay)
    }

    /// [`EmaState::update`] with a one-off decay (e.g. during warmup).
    pub fn update_with(&mut self, params: &ParamStore, d: f64) -> Result<()> {
        if params.len() != self.shadow.len() {
            return Err(Error::invalid("ema: parameter count changed"));
        }
        for (s, p) in self.shadow.arrays_mut().iter_mut().zip(params.arrays()) {
            if s.dims() != p.dims() {
                return Err(Error::Shape {
                    op: "ema",
                    left: s.shape().to_vec(),
                    right: p.shape().to_vec(),
                });
            }
            for (sv, &pv) in s.data_mut().iter_mut().zip(p.data()) {
                *sv = d * *sv + (1.0 - d) * pv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.push("w", Array::scalar(v));
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = store(1.5);
        let mut adam = AdamState::new(&p, 0.1, 0.0, 0.999).unwrap();
        adam.step(&mut p, &[Array::scalar(0.0)]).unwrap();
        assert_eq!(p.arrays()[0].item(), 1.5);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn degenerate_adam_is_sign_descent() {
        let mut p = ParamStore::new();
        p.push("w", Array::row(&[0.0, 0.0, 0.0]));
        let mut adam = AdamState::new(&p, 0.25, 0.0, 0.0).unwrap();
        adam.eps = 0.0;
        adam.step(&mut p, &[Array::row(&[3.0, -0.01, 7.0])]).unwrap();
        assert_eq!(p.arrays()[0].data(), &[-0.25, 0.25, -0.25]);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut p = store(0.0);
        let mut adam = AdamState::new(&p, 0.1, 0.0, 0.999).unwrap();
        for _ in 0..100 {
            let w = p.arrays()[0].item();
            adam.step(&mut p, &[Array::scalar(2.0 * (w - 3.0))]).unwrap();
        }
        assert!((p.arrays()[0].item() - 3.0).abs() < 0.05);
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut p = store(1.0);
        let mut adam = AdamState::new(&p, 0.1, 0.9, 0.999).unwrap();
        let err = adam.step(&mut p, &[Array::scalar(f64::NAN)]).unwrap_err();
        assert!(err.to_string().contains('w'));
        assert_eq!(adam.step_count(), 0);
        assert_eq!(p.arrays()[0].item(), 1.0);
    }

    #[test]
    fn ema_formula() {
        let mut ema = EmaState::new(&store(1.0), 0.95).unwrap();
        ema.update(&store(0.0)).unwrap();
        assert!((ema.shadow().arrays()[0].item() - 0.95).abs() < 1e-15);

        let mut ema = EmaState::new(&store(1.0), 0.0).unwrap();
        ema.update(&store(-4.0)).unwrap();
        assert_eq!(ema.shadow().arrays()[0].item(), -4.0);
    }

    #[test]
    fn ema_geometric_decay() {
        let decay = 0.9;
        let target = 2.0;
        let mut ema = EmaState::new(&store(-1.0), decay).unwrap();
        for k in 1..=25 {
            ema.update(&store(target)).unwrap();
            let gap = ema.shadow().arrays()[0].item() - target;
            let expected = -3.0 * decay.powi(k);
            assert!((gap - expected).abs() < 1e-12, "k={k}");
        }
        assert!(EmaState::new(&store(0.0), 1.0).is_err());
    }
}
