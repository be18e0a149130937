use std::io::Write;

use serde::Serialize;

use crate::analytic::GaussianMixture;
use crate::error::{Error, Result};
use crate::losses::RewardFunction;
use crate::numerics::Array;

/// Two-sample energy distance
///
/// ```text
/// ED = 2 E||X - Y|| - E||X - X'|| - E||Y - Y'||
/// ```
///
/// with the within-sample terms as U-statistics (distinct pairs only), so
/// the estimate is unbiased and can be slightly negative for equal laws.
pub fn energy_distance(x: &Array, y: &Array) -> Result<f64> {
    if x.cols() != y.cols() {
        return Err(Error::Shape {
            op: "energy_distance",
            left: x.shape().to_vec(),
            right: y.shape().to_vec(),
        });
    }
    if x.rows() < 2 || y.rows() < 2 {
        return Err(Error::invalid("energy distance needs at least two samples per side"));
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
    let within = |s: &Array| {
        let n = s.rows();
        let mut acc = 0.0;
        for i in 0..n {
            let a = s.row_slice(i);
            for j in i + 1..n {
                acc += dist(a, s.row_slice(j));
            }
        }
        2.0 * acc / (n * (n - 1)) as f64
    };
    let mut cross = 0.0;
    for i in 0..x.rows() {
        let a = x.row_slice(i);
        for j in 0..y.rows() {
            cross += dist(a, y.row_slice(j));
        }
    }
    cross /= (x.rows() * y.rows()) as f64;
    Ok(2.0 * cross - within(x) - within(y))
}

/// Reference component closest to each reward target (one per target).
pub fn target_components(gmm: &GaussianMixture, reward: &RewardFunction) -> Option<Vec<usize>> {
    let targets = match reward {
        RewardFunction::ModeAffinity { targets, .. } | RewardFunction::NegSquaredDistance { targets } => targets,
        RewardFunction::ClassLogit { .. } => return None,
    };
    Some(
        targets
            .iter()
            .map(|t| {
                let d2 = |k: usize| {
                    gmm.components()[k]
                        .mean()
                        .iter()
                        .zip(t)
                        .map(|(m, v)| (m - v).powi(2))
                        .sum::<f64>()
                };
                (0..gmm.len())
                    .min_by(|&a, &b| d2(a).total_cmp(&d2(b)))
                    .expect("non-empty mixture")
            })
            .collect(),
    )
}

/// Fraction of samples whose most responsible reference component is the
/// target component of their condition (the first target for null rows
/// or when a single target is shared).
pub fn target_mode_fraction(gmm: &GaussianMixture, targets: &[usize], x: &Array, cond: &[Option<usize>]) -> f64 {
    if x.rows() == 0 || targets.is_empty() {
        return 0.0;
    }
    let hits = (0..x.rows())
        .filter(|&i| {
            let want = match cond[i] {
                Some(c) if c < targets.len() => targets[c],
                _ => targets[0],
            };
            gmm.assign(x.row_slice(i)) == want
        })
        .count();
    hits as f64 / x.rows() as f64
}

pub fn mean_reward(reward: &RewardFunction, x: &Array, cond: &[Option<usize>]) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..x.rows() {
        total += reward.value(x.row_slice(i), cond[i])?;
    }
    Ok(total / x.rows().max(1) as f64)
}

/// One row of the metrics table. Optional fields are written as empty
/// cells when not measured at that iteration.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricsRow {
    pub iter: u64,
    pub loss_dsm: f64,
    pub loss_reg: f64,
    pub loss_reward: f64,
    pub loss_cfg: f64,
    pub reward_mean: Option<f64>,
    pub target_mode_fraction: Option<f64>,
    pub energy_distance: Option<f64>,
    pub grad_norm_gen: f64,
    pub grad_norm_assistant: f64,
}

pub const METRICS_COLUMNS: [&str; 10] = [
    "iter",
    "loss_dsm",
    "loss_reg",
    "loss_reward",
    "loss_cfg",
    "reward_mean",
    "target_mode_fraction",
    "energy_distance",
    "grad_norm_gen",
    "grad_norm_assistant",
];

/// Provenance written as a leading `#` comment in every CSV and embedded
/// in every JSON artifact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub artifact_version: String,
}

impl Provenance {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        Self {
            config_hash: config_hash.into(),
            seed,
            artifact_version: crate::numerics::checkpoint::ARTIFACT_VERSION.into(),
        }
    }

    pub fn comment(&self) -> String {
        format!(
            "# config_hash={} seed={} artifact_version={}",
            self.config_hash, self.seed, self.artifact_version
        )
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.iter,
            self.loss_dsm,
            self.loss_reg,
            self.loss_reward,
            self.loss_cfg,
            cell(self.reward_mean),
            cell(self.target_mode_fraction),
            cell(self.energy_distance),
            self.grad_norm_gen,
            self.grad_norm_assistant
        )
    }
}

/// Writes the provenance comment, the header and then one line per row.
pub fn write_metrics<W: Write>(w: &mut W, prov: &Provenance, rows: &[MetricsRow]) -> Result<()> {
    writeln!(w, "{}", prov.comment())?;
    writeln!(w, "{}", METRICS_COLUMNS.join(","))?;
    for r in rows {
        writeln!(w, "{}", r.to_csv())?;
    }
    Ok(())
}

/// DSM-only table used by reference pretraining.
pub fn write_dsm_metrics<W: Write>(w: &mut W, prov: &Provenance, rows: &[(u64, f64, f64)]) -> Result<()> {
    writeln!(w, "{}", prov.comment())?;
    writeln!(w, "iter,loss_dsm,grad_norm")?;
    for (i, l, g) in rows {
        writeln!(w, "{i},{l},{g}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::Gaussian;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn energy_distance_of_point_masses() {
        // X = 0, Y = 1 (two copies each): ED = 2*1 - 0 - 0
        let x = Array::matrix(2, 1, vec![0.0, 0.0]).unwrap();
        let y = Array::matrix(2, 1, vec![1.0, 1.0]).unwrap();
        assert!((energy_distance(&x, &y).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn energy_distance_separates_shifted_laws() {
        let g = GaussianMixture::single(Gaussian::isotropic(vec![0.0, 0.0], 1.0).unwrap());
        let h = GaussianMixture::single(Gaussian::isotropic(vec![1.0, 0.0], 1.0).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (a, _) = g.sample(1500, &mut rng);
        let (b, _) = g.sample(1500, &mut rng);
        let (c, _) = h.sample(1500, &mut rng);
        let same = energy_distance(&a, &b).unwrap();
        let diff = energy_distance(&a, &c).unwrap();
        assert!(same.abs() < 0.01, "{same}");
        assert!(diff > 0.1, "{diff}");
    }

    #[test]
    fn csv_row_has_documented_columns() {
        let row = MetricsRow {
            iter: 3,
            reward_mean: Some(0.5),
            ..Default::default()
        };
        assert_eq!(row.to_csv().split(',').count(), METRICS_COLUMNS.len());
        assert_eq!(row.to_csv(), "3,0,0,0,0,0.5,,,0,0");
    }
}
