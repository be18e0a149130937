use approx::assert_relative_eq;
use scorealign::analytic::{AffineGenerator, Gaussian, GaussianMixture};
use scorealign::losses::{
    cfg_reward_loss, di_star_reg_loss, dipp_kl_loss, DistanceFunction, GeneratorBatch, LossContext, NoiseDraw,
};
use scorealign::models::{AnalyticScore, Generator, NetworkScore, PushforwardScore};
use scorealign::numerics::rng::standard_normal;
use scorealign::numerics::{ParamStore, RngStreams, Stream, Tape};
use scorealign::processes::{ForwardProcess, LossSpace, WeightingFunction};
use scorealign::training::{GeneratorSpec, ScoreModelSpec};
use scorealign::verify::relative_error;

fn four_mode() -> GaussianMixture {
    let comps = [(-2.0, 2.0), (2.0, 2.0), (-2.0, -2.0), (2.0, -2.0)]
        .iter()
        .map(|&(x, y)| Gaussian::isotropic(vec![x, y], 0.25).unwrap())
        .collect();
    GaussianMixture::new(vec![0.25; 4], comps, Some(vec![0, 0, 1, 1])).unwrap()
}

struct Fixture {
    gen: Generator,
    params: ParamStore,
    z: scorealign::numerics::Array,
    cond: Vec<Option<usize>>,
    noise: NoiseDraw,
}

fn fixture(n: usize, classes: usize, seed: u64) -> Fixture {
    let mut rng = RngStreams::new(seed);
    let gen = GeneratorSpec::mlp(2, classes, vec![16]).build().unwrap();
    let params = gen.init("gen", rng.get(Stream::Init));
    let z = gen.sample_latent(n, rng.get(Stream::GeneratorNoise));
    let cond = (0..n).map(|i| (classes > 0).then_some(i % classes.max(1))).collect();
    let noise = NoiseDraw {
        times: (0..n).map(|i| 0.05 + 0.3 * (i % 10) as f64).collect(),
        eps: standard_normal(rng.get(Stream::AssistantNoise), n, 2),
    };
    Fixture {
        gen,
        params,
        z,
        cond,
        noise,
    }
}

fn ctx(space: LossSpace) -> LossContext {
    LossContext {
        process: ForwardProcess::edm(),
        space,
        weighting: WeightingFunction::Constant,
    }
}

#[test]
fn matched_scores_are_a_fixed_point() {
    let f = fixture(32, 2, 1);
    let reference = AnalyticScore::new(four_mode(), ForwardProcess::edm()).unwrap();
    for distance in [DistanceFunction::SquaredL2, DistanceFunction::PseudoHuber { c: 0.1 }] {
        for kl in [false, true] {
            let tape = Tape::new();
            let bound = f.params.bind(&tape);
            let x0 = f.gen.forward(&f.z, &f.cond, &bound).unwrap();
            let batch = GeneratorBatch::new(x0, f.noise.clone(), f.cond.clone(), &ForwardProcess::edm()).unwrap();
            let loss = if kl {
                dipp_kl_loss(&batch, &reference, &reference, &ctx(LossSpace::Denoiser)).unwrap()
            } else {
                di_star_reg_loss(&batch, &reference, &reference, &distance, &ctx(LossSpace::Denoiser)).unwrap()
            };
            assert_eq!(loss.value().item(), 0.0);
            let g = tape.backward(&loss).unwrap();
            for a in f.params.collect_grads(&g, &bound) {
                assert!(a.data().iter().all(|v| *v == 0.0));
            }
        }
    }
}

#[test]
fn huber_tends_to_scaled_l2() {
    let c = 1e6;
    let h = DistanceFunction::pseudo_huber(c).unwrap();
    for y in [vec![10.0, 0.0], vec![-3.0, 4.0], vec![1e-3, -2.5]] {
        let g: Vec<f64> = h.grad(&y).iter().map(|v| c * v).collect();
        assert!(relative_error(&g, &y) <= 1e-3);
        assert_relative_eq!(h.value(&y) * 2.0 * c, DistanceFunction::SquaredL2.value(&y), max_relative = 1e-3);
    }
}

#[test]
fn score_fields_get_no_gradient() {
    // bind assistant and reference weights on the generator's tape: the
    // losses must only ever read them as constants
    let f = fixture(16, 2, 2);
    let process = ForwardProcess::edm();
    let spec = ScoreModelSpec::edm(2, 2, vec![8], 0.5, process);
    let model = spec.build().unwrap();
    let mut rng = RngStreams::new(9);
    let pa = model.init("assistant", rng.get(Stream::Init));
    let pr = model.init("reference", rng.get(Stream::Init));
    let assistant = NetworkScore { model: &model, params: &pa };
    let reference = NetworkScore { model: &model, params: &pr };
    let tape = Tape::new();
    let bound = f.params.bind(&tape);
    let ba = pa.bind(&tape);
    let br = pr.bind(&tape);
    let x0 = f.gen.forward(&f.z, &f.cond, &bound).unwrap();
    let batch = GeneratorBatch::new(x0, f.noise.clone(), f.cond.clone(), &process).unwrap();
    let c = ctx(LossSpace::Denoiser);
    let loss = di_star_reg_loss(&batch, &assistant, &reference, &DistanceFunction::PseudoHuber { c: 0.1 }, &c)
        .unwrap()
        .add(&cfg_reward_loss(&batch, &reference, 2.0, &c).unwrap())
        .unwrap()
        .add(&dipp_kl_loss(&batch, &assistant, &reference, &c).unwrap())
        .unwrap();
    let g = tape.backward(&loss).unwrap();
    for v in ba.iter().chain(&br) {
        assert!(g.get(v).is_none_or(|a| a.data().iter().all(|x| *x == 0.0)));
    }
    assert!(f.params.collect_grads(&g, &bound).iter().any(|a| a.max_abs() > 0.0));
}

#[test]
fn guidance_reward_gradient_is_the_log_ratio_gradient() {
    // frozen noise: the surrogate's parameter gradient equals the finite
    // difference of -omega * mean log p_t(x_t | c) / p_t(x_t)
    let omega = 2.5;
    let f = fixture(24, 2, 3);
    let process = ForwardProcess::edm();
    let reference = AnalyticScore::new(four_mode(), process).unwrap();
    let c = ctx(LossSpace::Score);
    let tape = Tape::new();
    let bound = f.params.bind(&tape);
    let batch = GeneratorBatch::new(
        f.gen.forward(&f.z, &f.cond, &bound).unwrap(),
        f.noise.clone(),
        f.cond.clone(),
        &process,
    )
    .unwrap();
    let loss = cfg_reward_loss(&batch, &reference, omega, &c).unwrap();
    let g = tape.backward(&loss).unwrap();
    let ad: Vec<f64> = f.params.collect_grads(&g, &bound).iter().flat_map(|a| a.data().to_vec()).collect();

    let objective = |p: &ParamStore| -> f64 {
        let x0 = f.gen.generate(&f.z, &f.cond, p).unwrap();
        let mut total = 0.0;
        for (i, &t) in f.noise.times.iter().enumerate() {
            let xt: Vec<f64> = x0
                .row_slice(i)
                .iter()
                .zip(f.noise.eps.row_slice(i))
                .map(|(x, e)| process.alpha(t) * x + process.beta(t) * e)
                .collect();
            let lc = reference.marginal(t, f.cond[i]).unwrap().log_density(&xt);
            let l0 = reference.marginal(t, None).unwrap().log_density(&xt);
            total -= omega * (lc - l0);
        }
        total / f.noise.times.len() as f64
    };
    let theta = f.params.flatten();
    let mut probe = f.params.clone();
    let fd: Vec<f64> = (0..theta.len())
        .map(|i| {
            let h = 1e-6;
            let mut th = theta.clone();
            th[i] += h;
            probe.set_flat(&th).unwrap();
            let up = objective(&probe);
            th[i] -= 2.0 * h;
            probe.set_flat(&th).unwrap();
            (up - objective(&probe)) / (2.0 * h)
        })
        .collect();
    assert!(relative_error(&ad, &fd) <= 1e-4, "rel err {}", relative_error(&ad, &fd));
}

fn kl_1d(p: &Gaussian, q: &Gaussian) -> f64 {
    let (m1, v1) = (p.mean()[0], p.cov()[(0, 0)]);
    let (m2, v2) = (q.mean()[0], q.cov()[(0, 0)]);
    0.5 * ((v2 / v1).ln() + (v1 + (m1 - m2).powi(2)) / v2 - 1.0)
}

#[test]
fn integral_kl_surrogate_descends_the_kl() {
    // with the exact generator score as assistant, the surrogate gradient
    // is a Monte Carlo estimate of grad KL(p_t || q_t) at a single time
    let process = ForwardProcess::edm();
    let t = 0.7;
    let q = Gaussian::isotropic(vec![1.0], 0.5).unwrap();
    let reference = AnalyticScore::new(GaussianMixture::single(q.clone()), process).unwrap();
    let affine = AffineGenerator::scalar(0.6, -0.4, 1.0).unwrap();
    let (gen, params) = Generator::from_affine(&affine, "g", 0).unwrap();
    let assistant = PushforwardScore::new(affine.clone(), process);
    let n = 200_000;
    let mut rng = RngStreams::new(4);
    let z = gen.sample_latent(n, rng.get(Stream::GeneratorNoise));
    let noise = NoiseDraw {
        times: vec![t; n],
        eps: standard_normal(rng.get(Stream::AssistantNoise), n, 1),
    };
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let batch = GeneratorBatch::new(gen.forward(&z, &vec![None; n], &bound).unwrap(), noise, vec![None; n], &process)
        .unwrap();
    let loss = dipp_kl_loss(&batch, &assistant, &reference, &ctx(LossSpace::Score)).unwrap();
    let g = tape.backward(&loss).unwrap();
    let mc: Vec<f64> = params.collect_grads(&g, &bound).iter().flat_map(|a| a.data().to_vec()).collect();

    let qt = q.diffused(&process, t).unwrap();
    let kl = |p: &ParamStore| kl_1d(&gen.to_affine(p).unwrap().diffused_pushforward(&process, t).unwrap(), &qt);
    let theta = params.flatten();
    let mut probe = params.clone();
    let exact: Vec<f64> = (0..theta.len())
        .map(|i| {
            let mut th = theta.clone();
            th[i] += 1e-6;
            probe.set_flat(&th).unwrap();
            let up = kl(&probe);
            th[i] -= 2e-6;
            probe.set_flat(&th).unwrap();
            (up - kl(&probe)) / 2e-6
        })
        .collect();
    for (a, b) in mc.iter().zip(&exact) {
        assert_eq!(a.signum(), b.signum(), "mc {mc:?} exact {exact:?}");
    }
    assert!(relative_error(&mc, &exact) < 0.05, "mc {mc:?} exact {exact:?}");
}
