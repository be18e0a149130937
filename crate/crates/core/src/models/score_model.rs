use rand::Rng;
use serde::{Deserialize, Serialize};

use super::precond::{effective_sigma, EdmCoeffs};
use super::{class_rows, embedding_init};
use crate::error::{Error, Result};
use crate::numerics::{Array, Mlp, ParamStore, Var};
use crate::processes::ForwardProcess;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Parameterization {
    /// The network output is the score; input `[x, ln t, emb]`.
    DirectScore,
    /// EDM-preconditioned denoiser
    /// `D = c_skip x + c_out F(c_in x, ln(sigma)/4, emb)` on `x / alpha`,
    /// converted with `s = (alpha D - x) / beta^2`.
    EdmDenoiser { sigma_data: f64 },
}

/// Time- and class-conditioned score network. Parameters live in a
/// [`ParamStore`]: the MLP tensors, then `{prefix}.embed` (`(K+1) x e`,
/// row `K` is the null class) when the model is conditional.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreModel {
    mlp: Mlp,
    dim: usize,
    num_classes: usize,
    embed_dim: usize,
    param: Parameterization,
    process: ForwardProcess,
}

impl ScoreModel {
    pub fn new(
        dim: usize,
        hidden: &[usize],
        num_classes: usize,
        embed_dim: usize,
        param: Parameterization,
        process: ForwardProcess,
    ) -> Result<Self> {
        if let Parameterization::EdmDenoiser { sigma_data } = param {
            if !(sigma_data > 0.0) {
                return Err(Error::invalid(format!("sigma_data must be positive, got {sigma_data}")));
            }
        }
        let embed_dim = if num_classes == 0 { 0 } else { embed_dim.max(1) };
        let mut widths = vec![dim + 1 + embed_dim];
        widths.extend_from_slice(hidden);
        widths.push(dim);
        Ok(Self {
            mlp: Mlp::new(widths)?,
            dim,
            num_classes,
            embed_dim,
            param,
            process,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn parameterization(&self) -> Parameterization {
        self.param
    }

    pub fn process(&self) -> &ForwardProcess {
        &self.process
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn num_tensors(&self) -> usize {
        self.mlp.num_tensors() + usize::from(self.num_classes > 0)
    }

    pub fn init<R: Rng + ?Sized>(&self, prefix: &str, rng: &mut R) -> ParamStore {
        let mut store = ParamStore::new();
        self.mlp.init(prefix, 1.0, rng, &mut store);
        if self.num_classes > 0 {
            store.push(format!("{prefix}.embed"), embedding_init(self.num_classes, self.embed_dim, rng));
        }
        store
    }

    fn inputs<'t>(
        &self,
        x: &Var<'t>,
        tfeat: Vec<f64>,
        cond: &[Option<usize>],
        params: &[Var<'t>],
    ) -> Result<Var<'t>> {
        let tcol = Var::constant(Array::column(&tfeat));
        if self.num_classes == 0 {
            class_rows(cond, 0)?;
            return Var::concat_cols(&[x, &tcol]);
        }
        let idx = class_rows(cond, self.num_classes)?;
        let emb = params[self.mlp.num_tensors()].gather_rows(&idx)?;
        Var::concat_cols(&[x, &tcol, &emb])
    }

    fn check(&self, x_t: &Var<'_>, times: &[f64], cond: &[Option<usize>], params: &[Var<'_>]) -> Result<()> {
        let (rows, cols) = x_t.value().dims();
        if cols != self.dim || times.len() != rows || cond.len() != rows {
            return Err(Error::Shape {
                op: "score_model",
                left: x_t.shape().to_vec(),
                right: vec![times.len(), cond.len()],
            });
        }
        if params.len() != self.num_tensors() {
            return Err(Error::invalid(format!(
                "score model expects {} tensors, got {}",
                self.num_tensors(),
                params.len()
            )));
        }
        for &t in times {
            self.process.check_time(t)?;
        }
        Ok(())
    }

    /// Score `s(x_t, t, c)`, one time and condition per row.
    pub fn score<'t>(
        &self,
        x_t: &Var<'t>,
        times: &[f64],
        cond: &[Option<usize>],
        params: &[Var<'t>],
    ) -> Result<Var<'t>> {
        self.check(x_t, times, cond, params)?;
        let mlp_params = &params[..self.mlp.num_tensors()];
        match self.param {
            Parameterization::DirectScore => {
                let inp = self.inputs(x_t, times.iter().map(|t| t.ln()).collect(), cond, params)?;
                self.mlp.forward(&inp, mlp_params)
            }
            Parameterization::EdmDenoiser { .. } => {
                let d = self.denoise_unchecked(x_t, times, cond, params)?;
                let col = |f: &dyn Fn(f64) -> f64| Var::constant(Array::column(&times.iter().map(|&t| f(t)).collect::<Vec<_>>()));
                let p = &self.process;
                let a_over_b2 = col(&|t| p.alpha(t) / p.beta(t).powi(2));
                let inv_b2 = col(&|t| 1.0 / p.beta(t).powi(2));
                d.mul(&a_over_b2)?.sub(&x_t.mul(&inv_b2)?)
            }
        }
    }

    /// Denoiser (clean-data prediction) `d(x_t, t, c)`.
    pub fn denoise<'t>(
        &self,
        x_t: &Var<'t>,
        times: &[f64],
        cond: &[Option<usize>],
        params: &[Var<'t>],
    ) -> Result<Var<'t>> {
        self.check(x_t, times, cond, params)?;
        match self.param {
            Parameterization::EdmDenoiser { .. } => self.denoise_unchecked(x_t, times, cond, params),
            Parameterization::DirectScore => {
                let s = self.score(x_t, times, cond, params)?;
                let p = &self.process;
                let b2 = Var::constant(Array::column(&times.iter().map(|&t| p.beta(t).powi(2)).collect::<Vec<_>>()));
                let inv_a = Var::constant(Array::column(&times.iter().map(|&t| 1.0 / p.alpha(t)).collect::<Vec<_>>()));
                x_t.add(&s.mul(&b2)?)?.mul(&inv_a)
            }
        }
    }

    fn denoise_unchecked<'t>(
        &self,
        x_t: &Var<'t>,
        times: &[f64],
        cond: &[Option<usize>],
        params: &[Var<'t>],
    ) -> Result<Var<'t>> {
        let Parameterization::EdmDenoiser { sigma_data } = self.param else {
            unreachable!("only called for the denoiser parameterization")
        };
        let coeffs: Vec<EdmCoeffs> = times
            .iter()
            .map(|&t| EdmCoeffs::new(effective_sigma(&self.process, t), sigma_data))
            .collect();
        let col = |f: &dyn Fn(usize) -> f64| Var::constant(Array::column(&(0..times.len()).map(f).collect::<Vec<_>>()));
        let xs = x_t.mul(&col(&|i| 1.0 / self.process.alpha(times[i])))?;
        let inp = self.inputs(
            &xs.mul(&col(&|i| coeffs[i].c_in))?,
            coeffs.iter().map(|c| c.c_noise).collect(),
            cond,
            params,
        )?;
        let f = self.mlp.forward(&inp, &params[..self.mlp.num_tensors()])?;
        xs.mul(&col(&|i| coeffs[i].c_skip))?.add(&f.mul(&col(&|i| coeffs[i].c_out))?)
    }
}
