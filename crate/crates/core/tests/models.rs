use approx::assert_relative_eq;
use scorealign::analytic::{AffineGenerator, Gaussian, GaussianMixture};
use scorealign::models::{
    cfg_score, denoiser_from_score, score_from_denoiser, AnalyticScore, Generator, PushforwardScore, ScoreSource,
};
use scorealign::numerics::rng::standard_normal;
use scorealign::numerics::{Array, RngStreams, Stream, Var};
use scorealign::processes::ForwardProcess;

fn labeled_pair() -> GaussianMixture {
    GaussianMixture::new(
        vec![0.3, 0.7],
        vec![
            Gaussian::isotropic(vec![-1.5, 0.5], 0.4).unwrap(),
            Gaussian::isotropic(vec![2.0, -1.0], 0.2).unwrap(),
        ],
        Some(vec![0, 1]),
    )
    .unwrap()
}

#[test]
fn affine_backbone_is_exactly_az_plus_b() {
    let a = Array::matrix(2, 2, vec![0.8, -0.3, 0.1, 1.2]).unwrap();
    let gen = AffineGenerator::new(a.clone(), vec![0.5, -2.0], 1.5).unwrap();
    let (net, params) = Generator::from_affine(&gen, "g", 0).unwrap();
    let mut rng = RngStreams::new(3);
    let z = net.sample_latent(16, rng.get(Stream::GeneratorNoise));
    let x = net.generate(&z, &vec![None; 16], &params).unwrap();
    for r in 0..16 {
        for i in 0..2 {
            let expect = (0..2).map(|j| a.get(i, j) * z.get(r, j)).sum::<f64>() + gen.b()[i];
            assert_eq!(x.get(r, i), expect);
        }
    }
    assert_eq!(net.to_affine(&params).unwrap().flat(), gen.flat());
}

#[test]
fn tweedie_denoiser_gives_the_diffused_gaussian_score() {
    // data N(0, sd^2 I): the posterior mean is sd^2 x / (sd^2 + t^2)
    let sd2: f64 = 0.25;
    let process = ForwardProcess::edm();
    let truth = AnalyticScore::new(
        GaussianMixture::single(Gaussian::isotropic(vec![0.0, 0.0], sd2).unwrap()),
        process,
    )
    .unwrap();
    let mut rng = RngStreams::new(1);
    let x = standard_normal(rng.get(Stream::Eval), 12, 2);
    let times: Vec<f64> = (0..12).map(|i| 0.01 * 1.9f64.powi(i)).collect();
    let mut d = x.clone();
    for (r, &t) in times.iter().enumerate() {
        for v in d.row_slice_mut(r) {
            *v *= sd2 / (sd2 + t * t);
        }
    }
    let s = score_from_denoiser(&process, &x, &d, &times).unwrap();
    let exact = truth.score_values(&x, &times, &vec![None; 12]).unwrap();
    for (a, b) in s.data().iter().zip(exact.data()) {
        assert_relative_eq!(a, b, max_relative = 1e-10);
    }
    let back = denoiser_from_score(&process, &x, &s, &times).unwrap();
    for (a, b) in back.data().iter().zip(d.data()) {
        assert_relative_eq!(a, b, epsilon = 1e-12);
    }
}

#[test]
fn guidance_scale_endpoints_are_exact() {
    let src = AnalyticScore::new(labeled_pair(), ForwardProcess::edm()).unwrap();
    let mut rng = RngStreams::new(2);
    let x = standard_normal(rng.get(Stream::Eval), 6, 2);
    let times = vec![0.2, 0.5, 1.0, 2.0, 4.0, 9.0];
    let cond = vec![Some(0), Some(1), Some(0), Some(1), None, Some(1)];
    let s_c = src.score_values(&x, &times, &cond).unwrap();
    let s_0 = src.score_values(&x, &times, &vec![None; 6]).unwrap();
    assert_eq!(cfg_score(&src, &x, &times, &cond, 1.0).unwrap(), s_c);
    assert_eq!(cfg_score(&src, &x, &times, &cond, 0.0).unwrap(), s_0);
    // linear in omega, unconditional rows untouched
    let g = cfg_score(&src, &x, &times, &cond, 3.0).unwrap();
    for (i, ((g, c), u)) in g.data().iter().zip(s_c.data()).zip(s_0.data()).enumerate() {
        assert_relative_eq!(*g, u + 3.0 * (c - u), epsilon = 1e-12);
        if i / 2 == 4 {
            assert_eq!(g, u);
        }
    }
    assert!(cfg_score(&src, &x, &times, &cond, -0.5).is_err());
}

#[test]
fn pushforward_score_matches_the_diffused_law() {
    let process = ForwardProcess::edm();
    let gen = AffineGenerator::new(Array::matrix(2, 2, vec![1.1, 0.0, 0.4, 0.6]).unwrap(), vec![1.0, -0.5], 1.0)
        .unwrap();
    let src = PushforwardScore::new(gen.clone(), process);
    let x = Array::matrix(3, 2, vec![0.3, 0.1, -2.0, 1.0, 4.0, -3.0]).unwrap();
    let times = vec![0.1, 1.0, 5.0];
    let s = src.score(&Var::constant(x.clone()), &times, &[None; 3]).unwrap();
    for (r, &t) in times.iter().enumerate() {
        let law = gen.diffused_pushforward(&process, t).unwrap();
        let expect = law.score(x.row_slice(r));
        for (a, b) in s.value().row_slice(r).iter().zip(&expect) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
    }
}
