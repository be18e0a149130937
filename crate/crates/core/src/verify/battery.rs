//! The default check battery, as run by `scorealign verify`.

use nalgebra::DMatrix;

use super::recovery::{check_dsm_recovery, dsm_recovery_control, RecoveryConfig};
use super::theorems::{
    check_score_projection, score_projection_control, GradientPath, RegularizerUnderTest, Theorem1Case,
    Theorem2Case, DEFAULT_FD_STEP,
};
use super::{CheckReport, VectorField};
use crate::analytic::{AffineGenerator, DivergenceSetup, Gaussian, GaussianMixture, TimeGrid};
use crate::error::Result;
use crate::losses::DistanceFunction;
use crate::numerics::Array;
use crate::processes::{ForwardProcess, LossSpace, WeightingFunction};

pub const PROJECTION_SAMPLES: usize = 1_000_000;
pub const GRADIENT_SAMPLES: usize = 100_000;
pub const EXACT_TOLERANCE: f64 = 1e-4;
pub const MC_TOLERANCE: f64 = 2e-2;

#[derive(Clone, Debug)]
pub struct BatteryOptions {
    pub seed: u64,
    /// Run the negative controls instead of the checks.
    pub negative_controls: bool,
    /// Include the DSM recovery check (the only one that trains).
    pub recovery: bool,
}

impl Default for BatteryOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            negative_controls: false,
            recovery: true,
        }
    }
}

fn p1() -> AffineGenerator {
    AffineGenerator::scalar(0.4, 1.0, 2.5).expect("valid")
}

fn p1b() -> AffineGenerator {
    AffineGenerator::scalar(0.24, 0.7, 2.5).expect("valid")
}

fn p2() -> AffineGenerator {
    let a = Array::from_rows(&[vec![0.3, 0.1], vec![-0.05, 0.25]]).expect("valid");
    AffineGenerator::new(a, vec![-0.2, 0.4], 2.5).expect("valid")
}

fn q1() -> GaussianMixture {
    GaussianMixture::single(Gaussian::isotropic(vec![0.0], 1.0).expect("valid"))
}

fn q2() -> GaussianMixture {
    let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.6]);
    GaussianMixture::single(Gaussian::new(vec![0.5, -0.3], cov).expect("valid"))
}

/// Two classes on the line at `-2` and `+2`.
pub fn two_class_line() -> GaussianMixture {
    GaussianMixture::new(
        vec![0.5, 0.5],
        vec![
            Gaussian::isotropic(vec![-2.0], 0.5).expect("valid"),
            Gaussian::isotropic(vec![2.0], 0.5).expect("valid"),
        ],
        Some(vec![0, 1]),
    )
    .expect("valid")
}

/// Two equal modes at `(±2, 0)` with variance 0.25.
pub fn two_mode_plane() -> GaussianMixture {
    GaussianMixture::new(
        vec![0.5, 0.5],
        vec![
            Gaussian::isotropic(vec![-2.0, 0.0], 0.25).expect("valid"),
            Gaussian::isotropic(vec![2.0, 0.0], 0.25).expect("valid"),
        ],
        None,
    )
    .expect("valid")
}

/// The three score-projection cases: `(name, generator, field)`.
pub fn projection_cases() -> Vec<(&'static str, AffineGenerator, VectorField)> {
    vec![
        ("projection-1d-constant", p1(), VectorField::Constant { value: vec![1.0] }),
        ("projection-2d-identity", p2(), VectorField::identity(2)),
        ("projection-2d-tanh", p2(), VectorField::Tanh { scale: 0.7, shift: 0.2 }),
    ]
}

/// Gradient-equivalence cases for the regularizer.
pub fn theorem1_cases(seed: u64) -> Vec<Theorem1Case> {
    let mut out = Vec::new();
    let case = |name: String, p: AffineGenerator, q: GaussianMixture, space, distance, path| {
        let mut setup = DivergenceSetup::new(ForwardProcess::edm());
        setup.space = space;
        setup.distance = distance;
        let tolerance = match path {
            GradientPath::Exact => EXACT_TOLERANCE,
            GradientPath::MonteCarlo => MC_TOLERANCE,
        };
        Theorem1Case {
            name,
            loss: RegularizerUnderTest::DiStar,
            p,
            q,
            setup,
            path,
            n: GRADIENT_SAMPLES,
            fd_step: DEFAULT_FD_STEP,
            seed: seed + 7,
            tolerance,
        }
    };
    let huber = DistanceFunction::PseudoHuber { c: 0.1 };
    for (space, tag) in [(LossSpace::Denoiser, "denoiser"), (LossSpace::Score, "score")] {
        let l2 = DistanceFunction::SquaredL2;
        out.push(case(format!("theorem1-exact-1d-{tag}"), p1(), q1(), space, l2, GradientPath::Exact));
        out.push(case(format!("theorem1-exact-1d-b-{tag}"), p1b(), q1(), space, l2, GradientPath::Exact));
        out.push(case(format!("theorem1-exact-2d-{tag}"), p2(), q2(), space, l2, GradientPath::Exact));
        out.push(case(format!("theorem1-mc-1d-{tag}"), p1(), q1(), space, l2, GradientPath::MonteCarlo));
        out.push(case(format!("theorem1-mc-2d-{tag}"), p2(), q2(), space, l2, GradientPath::MonteCarlo));
        out.push(case(format!("theorem1-mc-2d-huber-{tag}"), p2(), q2(), space, huber, GradientPath::MonteCarlo));
    }
    out
}

pub fn theorem2_case(seed: u64) -> Theorem2Case {
    let process = ForwardProcess::edm();
    Theorem2Case {
        name: "theorem2-1d".into(),
        gen: AffineGenerator::scalar(0.4, 0.3, 2.5).expect("valid"),
        reference: two_class_line(),
        class: 1,
        process,
        grid: TimeGrid::for_process(&process),
        weighting: WeightingFunction::Constant,
        space: LossSpace::Denoiser,
        omega: 1.0,
        n: GRADIENT_SAMPLES,
        fd_step: DEFAULT_FD_STEP,
        seed: seed + 11,
        tolerance: MC_TOLERANCE,
        flip_sign: false,
    }
}

pub fn recovery_config(seed: u64) -> RecoveryConfig {
    RecoveryConfig {
        seed,
        ..RecoveryConfig::new(two_mode_plane())
    }
}

/// Runs the battery (or its controls), handing each report to `sink` as
/// soon as it is available.
pub fn run_battery(opts: &BatteryOptions, sink: &mut dyn FnMut(&CheckReport)) -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    let mut emit = |r: CheckReport| {
        sink(&r);
        out.push(r);
    };
    let process = ForwardProcess::edm();
    let seed = opts.seed;
    if opts.negative_controls {
        for (name, p, u) in projection_cases() {
            let name = format!("{name}-shifted");
            emit(score_projection_control(&name, &p, &process, 0.5, &u, PROJECTION_SAMPLES, seed + 3, 1.0)?);
        }
        let mut kl = theorem1_cases(seed).swap_remove(0);
        kl.name = "theorem1-exact-1d-kl-surrogate".into();
        kl.loss = RegularizerUnderTest::KlSurrogate;
        emit(kl.run()?.control());
        let mut flipped = theorem2_case(seed);
        flipped.name = "theorem2-1d-flipped-sign".into();
        flipped.flip_sign = true;
        emit(flipped.run()?.control());
        if opts.recovery {
            emit(dsm_recovery_control(&recovery_config(seed))?);
        }
        return Ok(out);
    }
    for (name, p, u) in projection_cases() {
        emit(check_score_projection(name, &p, &process, 0.5, &u, PROJECTION_SAMPLES, seed + 3)?);
    }
    for case in theorem1_cases(seed) {
        emit(case.run()?);
    }
    let mut stationary = theorem1_cases(seed).swap_remove(0);
    stationary.name = "theorem1-stationary".into();
    stationary.p = AffineGenerator::scalar(0.4, 0.0, 2.5)?;
    stationary.tolerance = 1e-5;
    emit(stationary.run_stationary()?);
    let t2 = theorem2_case(seed);
    emit(t2.run()?);
    emit(t2.run_sign_test(0.25)?);
    if opts.recovery {
        emit(check_dsm_recovery(&recovery_config(seed))?);
    }
    Ok(out)
}
