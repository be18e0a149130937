use crate::analytic::GaussianMixture;
use crate::error::{Error, Result};
use crate::numerics::Var;

/// Smooth toy rewards `r(x, c)` standing in for a learned preference model.
#[derive(Clone, Debug)]
pub enum RewardFunction {
    /// `exp(-||x - mu_c||^2 / (2 h^2))`, bounded in `(0, 1]`.
    ModeAffinity { targets: Vec<Vec<f64>>, bandwidth: f64 },
    /// `-||x - mu_c||^2`.
    NegSquaredDistance { targets: Vec<Vec<f64>> },
    /// `log p(c | x)` under a labeled mixture; zero for the null condition.
    ClassLogit { mixture: Box<GaussianMixture> },
}

impl RewardFunction {
    pub fn mode_affinity(targets: Vec<Vec<f64>>, bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0) {
            return Err(Error::invalid(format!("reward bandwidth must be > 0, got {bandwidth}")));
        }
        check_targets(&targets)?;
        Ok(RewardFunction::ModeAffinity { targets, bandwidth })
    }

    pub fn neg_squared_distance(targets: Vec<Vec<f64>>) -> Result<Self> {
        check_targets(&targets)?;
        Ok(RewardFunction::NegSquaredDistance { targets })
    }

    pub fn class_logit(mixture: GaussianMixture) -> Result<Self> {
        if mixture.num_classes() == 0 {
            return Err(Error::invalid("class-logit reward needs a labeled mixture"));
        }
        Ok(RewardFunction::ClassLogit {
            mixture: Box::new(mixture),
        })
    }

    /// One target per class, or a single target shared by all conditions.
    fn target(targets: &[Vec<f64>], c: Option<usize>) -> Result<&[f64]> {
        match (targets.len(), c) {
            (1, _) | (_, None) => Ok(&targets[0]),
            (n, Some(k)) if k < n => Ok(&targets[k]),
            (n, Some(k)) => Err(Error::UnknownClass { class: k, classes: n }),
        }
    }

    /// Value and gradient in `x`.
    pub fn eval(&self, x: &[f64], c: Option<usize>, grad: &mut [f64]) -> Result<f64> {
        match self {
            RewardFunction::ModeAffinity { targets, bandwidth } => {
                let mu = Self::target(targets, c)?;
                check_dim(x, mu)?;
                let h2 = bandwidth * bandwidth;
                let d2: f64 = x.iter().zip(mu).map(|(a, m)| (a - m).powi(2)).sum();
                let r = (-0.5 * d2 / h2).exp();
                for ((g, a), m) in grad.iter_mut().zip(x).zip(mu) {
                    *g = -r * (a - m) / h2;
                }
                Ok(r)
            }
            RewardFunction::NegSquaredDistance { targets } => {
                let mu = Self::target(targets, c)?;
                check_dim(x, mu)?;
                let mut r = 0.0;
                for ((g, a), m) in grad.iter_mut().zip(x).zip(mu) {
                    r -= (a - m).powi(2);
                    *g = -2.0 * (a - m);
                }
                Ok(r)
            }
            RewardFunction::ClassLogit { mixture } => match c {
                None => {
                    grad.iter_mut().for_each(|g| *g = 0.0);
                    Ok(0.0)
                }
                Some(k) => {
                    let cond = mixture.conditional(k)?;
                    let prior: f64 = mixture
                        .classes()
                        .expect("labeled")
                        .iter()
                        .zip(mixture.weights())
                        .filter(|(l, _)| **l == k)
                        .map(|(_, w)| w)
                        .sum();
                    let sc = cond.score(x);
                    let s = mixture.score(x);
                    for ((g, a), b) in grad.iter_mut().zip(&sc).zip(&s) {
                        *g = a - b;
                    }
                    Ok(cond.log_density(x) + prior.ln() - mixture.log_density(x))
                }
            },
        }
    }

    pub fn value(&self, x: &[f64], c: Option<usize>) -> Result<f64> {
        let mut g = vec![0.0; x.len()];
        self.eval(x, c, &mut g)
    }

    /// Row-wise rewards (`n x 1`), differentiable in `x`.
    pub fn value_var<'t>(&self, x: &Var<'t>, cond: &[Option<usize>]) -> Result<Var<'t>> {
        if cond.len() != x.value().rows() {
            return Err(Error::Shape {
                op: "reward",
                left: x.shape().to_vec(),
                right: vec![cond.len()],
            });
        }
        x.map_rows(1, |i, row, out, jac| {
            let mut g = vec![0.0; row.len()];
            out[0] = self.eval(row, cond[i], &mut g)?;
            if let Some(j) = jac {
                j.copy_from_slice(&g);
            }
            Ok(())
        })
    }
}

fn check_targets(targets: &[Vec<f64>]) -> Result<()> {
    if targets.is_empty() || targets.iter().any(|t| t.is_empty() || t.len() != targets[0].len()) {
        return Err(Error::invalid("reward needs at least one target of consistent dimension"));
    }
    Ok(())
}

fn check_dim(x: &[f64], mu: &[f64]) -> Result<()> {
    if x.len() != mu.len() {
        return Err(Error::Shape {
            op: "reward",
            left: vec![x.len()],
            right: vec![mu.len()],
        });
    }
    Ok(())
}
