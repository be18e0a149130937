use rand::Rng;

use super::precond::EdmCoeffs;
use super::{class_rows, embedding_init};
use crate::analytic::AffineGenerator;
use crate::error::{Error, Result};
use crate::numerics::{rng::normal, rng::standard_normal, Array, Mlp, ParamStore, Var};

#[derive(Clone, Debug, PartialEq)]
pub enum Backbone {
    /// `x = c_skip z + c_out F(c_in z, emb)` with EDM coefficients at
    /// `sigma = sigma_init`: a denoiser evaluated once at the initial noise
    /// level.
    Mlp { mlp: Mlp, sigma_data: f64 },
    /// `x = A z + b`; class labels are accepted and ignored.
    Affine,
}

/// One-step generator `x0 = g(z | c)` with `z ~ N(0, sigma_init^2 I)`.
///
/// Parameter layout: MLP tensors then `{prefix}.embed` for the MLP
/// backbone; `{prefix}.A` (`d x k`) and `{prefix}.b` (`1 x d`) for the
/// affine one.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    dim: usize,
    latent_dim: usize,
    sigma_init: f64,
    num_classes: usize,
    embed_dim: usize,
    backbone: Backbone,
}

impl Generator {
    pub fn mlp(
        dim: usize,
        hidden: &[usize],
        num_classes: usize,
        embed_dim: usize,
        sigma_init: f64,
        sigma_data: f64,
    ) -> Result<Self> {
        check_sigma(sigma_init)?;
        if !(sigma_data > 0.0) {
            return Err(Error::invalid(format!("sigma_data must be positive, got {sigma_data}")));
        }
        let embed_dim = if num_classes == 0 { 0 } else { embed_dim.max(1) };
        let mut widths = vec![dim + embed_dim];
        widths.extend_from_slice(hidden);
        widths.push(dim);
        Ok(Self {
            dim,
            latent_dim: dim,
            sigma_init,
            num_classes,
            embed_dim,
            backbone: Backbone::Mlp {
                mlp: Mlp::new(widths)?,
                sigma_data,
            },
        })
    }

    pub fn affine(dim: usize, latent_dim: usize, sigma_init: f64, num_classes: usize) -> Result<Self> {
        check_sigma(sigma_init)?;
        if dim == 0 || latent_dim == 0 {
            return Err(Error::invalid("affine generator needs positive dimensions"));
        }
        Ok(Self {
            dim,
            latent_dim,
            sigma_init,
            num_classes,
            embed_dim: 0,
            backbone: Backbone::Affine,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn sigma_init(&self) -> f64 {
        self.sigma_init
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn num_tensors(&self) -> usize {
        match &self.backbone {
            Backbone::Mlp { mlp, .. } => mlp.num_tensors() + usize::from(self.num_classes > 0),
            Backbone::Affine => 2,
        }
    }

    /// Fresh parameters. The affine backbone starts at `A = I / sigma_init`
    /// (unit-variance output) padded or truncated to `d x k`, `b = 0`.
    pub fn init<R: Rng + ?Sized>(&self, prefix: &str, rng: &mut R) -> ParamStore {
        let mut store = ParamStore::new();
        match &self.backbone {
            Backbone::Mlp { mlp, .. } => {
                mlp.init(prefix, 1.0, rng, &mut store);
                if self.num_classes > 0 {
                    store.push(format!("{prefix}.embed"), embedding_init(self.num_classes, self.embed_dim, rng));
                }
            }
            Backbone::Affine => {
                let mut a = Array::zeros(self.dim, self.latent_dim);
                for i in 0..self.dim.min(self.latent_dim) {
                    a.set(i, i, 1.0 / self.sigma_init);
                }
                store.push(format!("{prefix}.A"), a);
                store.push(format!("{prefix}.b"), Array::zeros(1, self.dim));
            }
        }
        store
    }

    pub fn sample_latent<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Array {
        normal(rng, n, self.latent_dim, self.sigma_init)
    }

    /// Same draw as [`Generator::sample_latent`] from unit normals.
    pub fn latent_from_unit(&self, unit: &Array) -> Array {
        unit.map(|v| v * self.sigma_init)
    }

    pub fn unit_latent<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Array {
        standard_normal(rng, n, self.latent_dim)
    }

    /// `g(z | c)`, differentiable in the bound parameters.
    pub fn forward<'t>(&self, z: &Array, cond: &[Option<usize>], params: &[Var<'t>]) -> Result<Var<'t>> {
        if z.cols() != self.latent_dim || cond.len() != z.rows() {
            return Err(Error::Shape {
                op: "generator",
                left: z.shape().to_vec(),
                right: vec![cond.len(), self.latent_dim],
            });
        }
        if params.len() != self.num_tensors() {
            return Err(Error::invalid(format!(
                "generator expects {} tensors, got {}",
                self.num_tensors(),
                params.len()
            )));
        }
        let idx = class_rows(cond, self.num_classes)?;
        match &self.backbone {
            Backbone::Affine => {
                let zc = Var::constant(z.clone());
                zc.matmul(&params[0].transpose()?)?.add(&params[1])
            }
            Backbone::Mlp { mlp, sigma_data } => {
                let c = EdmCoeffs::new(self.sigma_init, *sigma_data);
                let zc = Var::constant(z.clone());
                let zin = Var::constant(z.map(|v| v * c.c_in));
                let inp = if self.num_classes > 0 {
                    let emb = params[mlp.num_tensors()].gather_rows(&idx)?;
                    Var::concat_cols(&[&zin, &emb])?
                } else {
                    zin
                };
                let f = mlp.forward(&inp, &params[..mlp.num_tensors()])?;
                zc.scale(c.c_skip)?.add(&f.scale(c.c_out)?)
            }
        }
    }

    /// Detached samples with the given parameters.
    pub fn generate(&self, z: &Array, cond: &[Option<usize>], params: &ParamStore) -> Result<Array> {
        Ok(self.forward(z, cond, &params.frozen())?.value().clone())
    }

    /// Analytic view of an affine generator's parameters.
    pub fn to_affine(&self, params: &ParamStore) -> Result<AffineGenerator> {
        if self.backbone != Backbone::Affine {
            return Err(Error::invalid("generator backbone is not affine"));
        }
        let a = params.arrays()[0].clone();
        let b = params.arrays()[1].data().to_vec();
        AffineGenerator::new(a, b, self.sigma_init)
    }

    /// Affine generator and parameters reproducing `gen` exactly, accepting
    /// class labels below `num_classes`.
    pub fn from_affine(gen: &AffineGenerator, prefix: &str, num_classes: usize) -> Result<(Self, ParamStore)> {
        let g = Self::affine(gen.dim(), gen.latent_dim(), gen.sigma_init(), num_classes)?;
        let mut store = ParamStore::new();
        store.push(format!("{prefix}.A"), gen.a().clone());
        store.push(format!("{prefix}.b"), Array::row(gen.b()));
        Ok((g, store))
    }
}

fn check_sigma(sigma_init: f64) -> Result<()> {
    if sigma_init > 0.0 && sigma_init.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("sigma_init must be positive, got {sigma_init}")))
    }
}
