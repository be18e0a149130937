use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Array;
use crate::processes::ForwardProcess;

/// A single multivariate normal with cached Cholesky factor and precision.
#[derive(Clone, Debug)]
pub struct Gaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: DMatrix<f64>,
    precision: DMatrix<f64>,
    /// Row-major copy of `precision` for allocation-free evaluation.
    prec: Vec<f64>,
    log_norm: f64,
}

impl Gaussian {
    pub fn new(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 || cov.nrows() != d || cov.ncols() != d {
            return Err(Error::Shape {
                op: "gaussian",
                left: vec![d],
                right: vec![cov.nrows(), cov.ncols()],
            });
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gaussian parameters".into()));
        }
        let scale = cov.amax().max(1e-300);
        if (&cov - cov.transpose()).amax() > 1e-12 * scale {
            return Err(Error::NotSpd("covariance is not symmetric".into()));
        }
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotSpd(format!("Cholesky failed for {cov:?}")))?;
        let l = chol.l();
        let log_det = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let precision = chol.inverse();
        let prec = (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| precision[(i, j)]).collect();
        Ok(Self {
            prec,
            mean: DVector::from_vec(mean),
            log_norm: -0.5 * (d as f64 * (2.0 * PI).ln() + log_det),
            cov,
            chol: l,
            precision,
        })
    }

    /// `N(mean, var * I)`.
    pub fn isotropic(mean: Vec<f64>, var: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(mean, DMatrix::identity(d, d) * var)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        let m = self.mean.as_slice();
        let mut q = 0.0;
        for i in 0..d {
            let ri = x[i] - m[i];
            let row = &self.prec[i * d..(i + 1) * d];
            q += ri * row.iter().zip(x).zip(m).map(|((p, xj), mj)| p * (xj - mj)).sum::<f64>();
        }
        self.log_norm - 0.5 * q
    }

    /// `-Sigma^{-1} (x - mu)`.
    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.score_into(x, &mut out);
        out
    }

    pub fn score_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        let m = self.mean.as_slice();
        for (i, o) in out.iter_mut().enumerate().take(d) {
            let row = &self.prec[i * d..(i + 1) * d];
            *o = -row.iter().zip(x).zip(m).map(|((p, xj), mj)| p * (xj - mj)).sum::<f64>();
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let n = DVector::from_iterator(self.dim(), (0..self.dim()).map(|_| rng.sample(StandardNormal)));
        (&self.chol * n + &self.mean).data.into()
    }

    /// Marginal at time `t` of the forward process started from this law.
    pub fn diffused(&self, process: &ForwardProcess, t: f64) -> Result<Self> {
        process.check_time(t)?;
        let (a, b) = (process.alpha(t), process.beta(t));
        self.transformed(a, b * b)
    }

    /// Law of `a X + sqrt(v) E` with `E ~ N(0, I)` independent.
    pub fn transformed(&self, a: f64, v: f64) -> Result<Self> {
        let d = self.dim();
        let cov = &self.cov * (a * a) + DMatrix::identity(d, d) * v;
        Self::new(self.mean.iter().map(|m| a * m).collect(), cov)
    }
}

/// `-Sigma^{-1} (x - mu)`.
pub fn gaussian_score(mean: &[f64], cov: &DMatrix<f64>, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != mean.len() {
        return Err(Error::Shape {
            op: "gaussian_score",
            left: vec![mean.len()],
            right: vec![x.len()],
        });
    }
    Ok(Gaussian::new(mean.to_vec(), cov.clone())?.score(x))
}

/// Finite Gaussian mixture, optionally with one class label per component.
#[derive(Clone, Debug)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    components: Vec<Gaussian>,
    classes: Option<Vec<usize>>,
}

const WEIGHT_SUM_TOL: f64 = 1e-9;

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, components: Vec<Gaussian>, classes: Option<Vec<usize>>) -> Result<Self> {
        if components.is_empty() || weights.len() != components.len() {
            return Err(Error::invalid(format!(
                "mixture needs matching non-empty weights and components ({} vs {})",
                weights.len(),
                components.len()
            )));
        }
        if weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::invalid("mixture weights must be positive"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::invalid(format!("mixture weights sum to {total}, not 1")));
        }
        let d = components[0].dim();
        if components.iter().any(|c| c.dim() != d) {
            return Err(Error::invalid("mixture components differ in dimension"));
        }
        if let Some(c) = &classes {
            if c.len() != components.len() {
                return Err(Error::invalid("one class label per component required"));
            }
        }
        Ok(Self {
            log_weights: weights.iter().map(|w| w.ln()).collect(),
            weights,
            components,
            classes,
        })
    }

    pub fn single(g: Gaussian) -> Self {
        Self::new(vec![1.0], vec![g], None).expect("one component")
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[Gaussian] {
        &self.components
    }

    pub fn classes(&self) -> Option<&[usize]> {
        self.classes.as_deref()
    }

    /// Number of distinct classes (`max label + 1`), 0 when unlabeled.
    pub fn num_classes(&self) -> usize {
        self.classes
            .as_ref()
            .map(|c| c.iter().max().map_or(0, |m| m + 1))
            .unwrap_or(0)
    }

    fn log_joint(&self, x: &[f64], out: &mut [f64]) {
        for ((o, lw), c) in out.iter_mut().zip(&self.log_weights).zip(&self.components) {
            *o = lw + c.log_density(x);
        }
    }

    /// Posterior component probabilities, log-sum-exp stabilized. Returns
    /// the log-density as well.
    fn posterior(&self, x: &[f64], r: &mut [f64]) -> f64 {
        self.log_joint(x, r);
        let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in r.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in r.iter_mut() {
            *v /= s;
        }
        m + s.ln()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let mut r = vec![0.0; self.len()];
        self.posterior(x, &mut r)
    }

    pub fn responsibilities(&self, x: &[f64]) -> Vec<f64> {
        let mut r = vec![0.0; self.len()];
        self.posterior(x, &mut r);
        r
    }

    /// Index of the most responsible component.
    pub fn assign(&self, x: &[f64]) -> usize {
        let r = self.responsibilities(x);
        (0..r.len()).max_by(|&a, &b| r[a].total_cmp(&r[b])).unwrap_or(0)
    }

    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        let mut s = vec![0.0; self.dim()];
        self.score_jacobian(x, &mut s, None);
        s
    }

    /// Writes the score into `out` and, if requested, its row-major `d x d`
    /// Jacobian: `sum_k r_k (-P_k) + sum_k r_k s_k s_k^T - s s^T`.
    pub fn score_jacobian(&self, x: &[f64], out: &mut [f64], jac: Option<&mut [f64]>) {
        let d = self.dim();
        if self.len() == 1 {
            let c = &self.components[0];
            c.score_into(x, out);
            if let Some(jac) = jac {
                for (j, p) in jac.iter_mut().zip(&c.prec) {
                    *j = -p;
                }
            }
            return;
        }
        let mut r = vec![0.0; self.len() * (d + 1)];
        let (r, scores) = r.split_at_mut(self.len());
        self.posterior(x, r);
        for (c, sk) in self.components.iter().zip(scores.chunks_mut(d)) {
            c.score_into(x, sk);
        }
        out.iter_mut().for_each(|v| *v = 0.0);
        for (rk, sk) in r.iter().zip(scores.chunks(d)) {
            for (o, s) in out.iter_mut().zip(sk) {
                *o += rk * s;
            }
        }
        if let Some(jac) = jac {
            jac.iter_mut().for_each(|v| *v = 0.0);
            for ((rk, sk), c) in r.iter().zip(scores.chunks(d)).zip(&self.components) {
                for i in 0..d {
                    for j in 0..d {
                        jac[i * d + j] += rk * (sk[i] * sk[j] - c.prec[i * d + j]);
                    }
                }
            }
            for i in 0..d {
                for j in 0..d {
                    jac[i * d + j] -= out[i] * out[j];
                }
            }
        }
    }

    /// Component `k` maps to `N(alpha mu_k, alpha^2 Sigma_k + beta^2 I)`.
    pub fn diffused(&self, process: &ForwardProcess, t: f64) -> Result<Self> {
        process.check_time(t)?;
        let (a, b) = (process.alpha(t), process.beta(t));
        self.transformed(a, b * b)
    }

    /// Law of `a X + sqrt(v) E`.
    pub fn transformed(&self, a: f64, v: f64) -> Result<Self> {
        let comps = self
            .components
            .iter()
            .map(|c| c.transformed(a, v))
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.weights.clone(), comps, self.classes.clone())
    }

    /// Sub-mixture of the components labeled `class`, renormalized.
    pub fn conditional(&self, class: usize) -> Result<Self> {
        let labels = self.classes.as_ref().ok_or(Error::UnknownClass { class, classes: 0 })?;
        let idx: Vec<usize> = (0..self.len()).filter(|&k| labels[k] == class).collect();
        if idx.is_empty() {
            return Err(Error::UnknownClass {
                class,
                classes: self.num_classes(),
            });
        }
        let total: f64 = idx.iter().map(|&k| self.weights[k]).sum();
        let mut weights: Vec<f64> = idx.iter().map(|&k| self.weights[k] / total).collect();
        // absorb rounding so the sum check holds exactly
        let s: f64 = weights.iter().sum();
        weights[0] += 1.0 - s;
        Self::new(
            weights,
            idx.iter().map(|&k| self.components[k].clone()).collect(),
            Some(vec![class; idx.len()]),
        )
    }

    /// `n` draws (rows) and the component index of each.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> (Array, Vec<usize>) {
        let d = self.dim();
        let mut data = Vec::with_capacity(n * d);
        let mut which = Vec::with_capacity(n);
        for _ in 0..n {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut k = self.len() - 1;
            for (i, w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    k = i;
                    break;
                }
            }
            data.extend(self.components[k].sample(rng));
            which.push(k);
        }
        (Array::matrix(n, d, data).expect("sized"), which)
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for (w, c) in self.weights.iter().zip(&self.components) {
            for (o, v) in m.iter_mut().zip(c.mean()) {
                *o += w * v;
            }
        }
        m
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let d = self.dim();
        let m = DVector::from_vec(self.mean());
        let mut s = DMatrix::zeros(d, d);
        for (w, c) in self.weights.iter().zip(&self.components) {
            let dm = DVector::from_column_slice(c.mean()) - &m;
            s += (c.cov() + &dm * dm.transpose()) * *w;
        }
        s
    }

    pub fn to_spec(&self) -> GmmSpec {
        GmmSpec {
            dim: self.dim(),
            component: self
                .components
                .iter()
                .enumerate()
                .map(|(k, c)| ComponentSpec {
                    weight: self.weights[k],
                    mean: c.mean().to_vec(),
                    cov: (0..self.dim())
                        .map(|i| c.cov().row(i).iter().cloned().collect())
                        .collect(),
                    class: self.classes.as_ref().map(|l| l[k]),
                })
                .collect(),
        }
    }

    pub fn from_spec(spec: &GmmSpec) -> Result<Self> {
        let d = spec.dim;
        let mut weights = Vec::new();
        let mut comps = Vec::new();
        let mut labels = Vec::new();
        for (k, c) in spec.component.iter().enumerate() {
            if c.mean.len() != d || c.cov.len() != d || c.cov.iter().any(|r| r.len() != d) {
                return Err(Error::invalid(format!("component {k}: expected dimension {d}")));
            }
            let cov = DMatrix::from_fn(d, d, |i, j| c.cov[i][j]);
            comps.push(
                Gaussian::new(c.mean.clone(), cov)
                    .map_err(|e| Error::invalid(format!("component {k}: {e}")))?,
            );
            weights.push(c.weight);
            labels.push(c.class);
        }
        let classes = if labels.iter().all(Option::is_some) && !labels.is_empty() {
            Some(labels.into_iter().map(Option::unwrap).collect())
        } else if labels.iter().all(Option::is_none) {
            None
        } else {
            return Err(Error::invalid("either all components carry a class or none does"));
        };
        Self::new(weights, comps, classes)
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let spec: GmmSpec = toml::from_str(s).map_err(|e| Error::invalid(format!("mixture file: {e}")))?;
        Self::from_spec(&spec)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&self.to_spec()).expect("plain data serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        Self::from_toml_str(&s).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
    }
}

/// On-disk mixture description:
///
/// ```toml
/// dim = 2
///
/// [[component]]
/// weight = 0.5
/// mean = [-2.0, 0.0]
/// cov = [[0.25, 0.0], [0.0, 0.25]]
/// class = 0          # optional; all or none
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmSpec {
    pub dim: usize,
    pub component: Vec<ComponentSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_modes() -> GaussianMixture {
        GaussianMixture::new(
            vec![0.3, 0.7],
            vec![
                Gaussian::new(vec![-1.0, 0.5], DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3])).unwrap(),
                Gaussian::new(vec![2.0, -1.0], DMatrix::from_row_slice(2, 2, &[1.0, -0.2, -0.2, 0.8])).unwrap(),
            ],
            Some(vec![0, 1]),
        )
        .unwrap()
    }

    fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        let h = 1e-5;
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += h;
                m[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn rel(a: &[f64], b: &[f64]) -> f64 {
        let num = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        num / b.iter().map(|v| v.abs()).fold(1e-300, f64::max)
    }

    #[test]
    fn gaussian_score_examples() {
        let i2 = DMatrix::identity(2, 2);
        assert_eq!(gaussian_score(&[0.0, 0.0], &i2, &[2.0, 0.0]).unwrap(), vec![-2.0, 0.0]);
        assert_eq!(gaussian_score(&[1.0, 3.0], &i2, &[1.0, 3.0]).unwrap(), vec![0.0, 0.0]);
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(gaussian_score(&[0.0, 0.0], &singular, &[1.0, 0.0]), Err(Error::NotSpd(_))));
    }

    #[test]
    fn scores_match_log_density_derivatives() {
        let g = &two_modes().components()[1].clone();
        let x = [0.3, 0.9];
        assert!(rel(&g.score(&x), &fd_grad(|v| g.log_density(v), &x)) < 1e-6);
        let m = two_modes();
        for x in [[0.3, 0.9], [-1.2, 2.0], [4.0, -3.0]] {
            assert!(rel(&m.score(&x), &fd_grad(|v| m.log_density(v), &x)) < 1e-6);
        }
    }

    #[test]
    fn jacobian_matches_score_derivative() {
        let m = two_modes();
        let x = [0.4, -0.2];
        let mut s = [0.0; 2];
        let mut j = [0.0; 4];
        m.score_jacobian(&x, &mut s, Some(&mut j));
        for i in 0..2 {
            let fd = fd_grad(|v| m.score(v)[i], &x);
            assert!(rel(&j[2 * i..2 * i + 2], &fd) < 1e-6);
        }
    }

    #[test]
    fn single_component_and_symmetry() {
        let g = Gaussian::new(vec![0.5, -1.0], DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0])).unwrap();
        let m = GaussianMixture::single(g.clone());
        assert_eq!(m.score(&[1.0, 1.0]), g.score(&[1.0, 1.0]));
        let sym = GaussianMixture::new(
            vec![0.5, 0.5],
            vec![
                Gaussian::isotropic(vec![-2.0, 0.0], 0.3).unwrap(),
                Gaussian::isotropic(vec![2.0, 0.0], 0.3).unwrap(),
            ],
            None,
        )
        .unwrap();
        let s = sym.score(&[0.0, 0.0]);
        assert!(s[0].abs() < 1e-15 && s[1].abs() < 1e-15);
    }

    #[test]
    fn far_tail_is_stable() {
        let m = two_modes();
        let s = m.score(&[1e3, -1e3]);
        assert!(s.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn diffused_edm_unit_gaussian() {
        let m = GaussianMixture::single(Gaussian::isotropic(vec![0.0, 0.0], 1.0).unwrap());
        let d = m.diffused(&ForwardProcess::edm(), 2.0).unwrap();
        assert_eq!(d.components()[0].cov(), &(DMatrix::identity(2, 2) * 5.0));
        let tiny = m.diffused(&ForwardProcess::edm(), 1e-9).unwrap();
        assert!((tiny.components()[0].cov() - DMatrix::<f64>::identity(2, 2)).amax() < 1e-15);
    }

    #[test]
    fn edm_semigroup_exact() {
        let m = two_modes();
        let p = ForwardProcess::edm();
        let twice = m.diffused(&p, 3.0).unwrap().diffused(&p, 4.0).unwrap();
        let once = m.diffused(&p, 5.0).unwrap();
        for (a, b) in twice.components().iter().zip(once.components()) {
            assert_eq!(a.mean(), b.mean());
            assert_eq!(a.cov(), b.cov());
        }
        assert_eq!(twice.weights(), once.weights());
    }

    #[test]
    fn diffused_moments_match_sampling() {
        let m = two_modes();
        let p = ForwardProcess::edm();
        let t = 0.7;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let (x0, _) = m.sample(n, &mut rng);
        let eps = crate::numerics::rng::standard_normal(&mut rng, n, 2);
        let xt = p.diffuse(&x0, t, &eps).unwrap();
        let target = m.diffused(&p, t).unwrap();
        let (mu, cov) = (target.mean(), target.covariance());
        let emp = xt.mean_rows();
        for i in 0..2 {
            let se = (cov[(i, i)] / n as f64).sqrt();
            assert!((emp[i] - mu[i]).abs() < 3.0 * se, "mean {i}");
        }
        // variance: SE of a sample variance ~ sqrt(2/n) var for near-normal data
        for i in 0..2 {
            let v: f64 = xt.to_rows().iter().map(|r| (r[i] - emp[i]).powi(2)).sum::<f64>() / (n - 1) as f64;
            let m4: f64 = xt.to_rows().iter().map(|r| (r[i] - emp[i]).powi(4)).sum::<f64>() / n as f64;
            let se = ((m4 - v * v) / n as f64).sqrt();
            assert!((v - cov[(i, i)]).abs() < 3.0 * se, "var {i}: {v} vs {}", cov[(i, i)]);
        }
    }

    #[test]
    fn conditional_and_errors() {
        let m = two_modes();
        let c = m.conditional(1).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.weights(), &[1.0]);
        assert!(matches!(m.conditional(5), Err(Error::UnknownClass { class: 5, .. })));
        assert_eq!(m.num_classes(), 2);
    }

    #[test]
    fn validation() {
        let g = Gaussian::isotropic(vec![0.0], 1.0).unwrap();
        assert!(GaussianMixture::new(vec![0.5], vec![g.clone()], None).is_err());
        assert!(GaussianMixture::new(vec![1.5, -0.5], vec![g.clone(), g.clone()], None).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(Gaussian::new(vec![0.0, 0.0], asym).is_err());
    }

    #[test]
    fn spec_file_roundtrip() {
        let m = two_modes();
        let text = m.to_toml_string();
        let back = GaussianMixture::from_toml_str(&text).unwrap();
        assert_eq!(back.to_spec(), m.to_spec());
        let bad = "dim = 1\n[[component]]\nweight = 1.0\nmean = [0.0]\ncov = [[1.0]]\ncolour = 3\n";
        assert!(GaussianMixture::from_toml_str(bad).is_err());
    }
}
