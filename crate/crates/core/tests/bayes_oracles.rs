//! Monte Carlo and closed-form oracles for the Bayesian layers.

use admri::bayes::{
    elbo_loss, inverse_softplus, kl_gaussian_closed, kl_monte_carlo, lrt_conv, lrt_conv_moments, lrt_dense,
    lrt_dense_moments, sample_weights, sample_weights_with, GaussianPosterior, Noise, PriorConfig,
};
use admri::data::one_hot;
use admri::models::{Model, ModelSpec, RunOptions};
use admri::tensor::{ops, Padding};
use admri::{Graph, SeededRng, Tensor};

const TRIALS: usize = 100_000;

fn rand(shape: &[usize], lo: f64, hi: f64, rng: &mut SeededRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_range(lo, hi)).collect()).unwrap()
}

fn posterior(shape: &[usize], mu: (f64, f64), sigma: (f64, f64), rng: &mut SeededRng) -> GaussianPosterior {
    let m = rand(shape, mu.0, mu.1, rng);
    let s = rand(shape, sigma.0, sigma.1, rng);
    GaussianPosterior::new(m, s.map(inverse_softplus)).unwrap()
}

/// Running per-element mean and variance of `n` draws of `f`.
fn moments(n: usize, len: usize, mut f: impl FnMut() -> Tensor) -> (Vec<f64>, Vec<f64>) {
    let mut sum = vec![0.0; len];
    let mut sq = vec![0.0; len];
    for _ in 0..n {
        let t = f();
        for ((s, q), v) in sum.iter_mut().zip(sq.iter_mut()).zip(t.data()) {
            *s += v;
            *q += v * v;
        }
    }
    let nf = n as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
    let var = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q - nf * m * m) / (nf - 1.0))
        .collect();
    (mean, var)
}

fn assert_close(what: &str, mean: &[f64], var: &[f64], gamma: &Tensor, delta: &Tensor) {
    for i in 0..mean.len() {
        let (g, d) = (gamma.data()[i], delta.data()[i]);
        let em = (mean[i] - g).abs() / g.abs();
        let ev = (var[i] - d).abs() / d;
        assert!(em <= 0.01, "{what}[{i}]: mean {} vs {g} ({:.3}%)", mean[i], em * 100.0);
        assert!(ev <= 0.02, "{what}[{i}]: var {} vs {d} ({:.3}%)", var[i], ev * 100.0);
    }
}

#[test]
fn dense_local_reparameterization_matches_weight_sampling() {
    let mut rng = SeededRng::new(1);
    let a = rand(&[2, 5], 0.2, 1.0, &mut rng);
    let post = posterior(&[5, 3], (0.2, 1.0), (0.05, 0.4), &mut rng);
    let (gamma, delta) = lrt_dense_moments(&a, &post).unwrap();
    let mut mc = rng.fork("weights");
    let (m, v) = moments(TRIALS, 6, || {
        let w = sample_weights(&post, &mut mc);
        ops::matmul_affine(&a, &transpose(&w), &Tensor::zeros([3])).unwrap()
    });
    assert_close("weight-sampling", &m, &v, &gamma, &delta);
    let mut lrt = rng.fork("lrt");
    let (m, v) = moments(TRIALS, 6, || lrt_dense(&a, &post, &mut lrt).unwrap());
    assert_close("lrt", &m, &v, &gamma, &delta);
}

fn transpose(w: &Tensor) -> Tensor {
    let (r, c) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = w.data()[i * c + j];
        }
    }
    Tensor::new([c, r], out).unwrap()
}

#[test]
fn conv_local_reparameterization_matches_weight_sampling() {
    let mut rng = SeededRng::new(2);
    let a = rand(&[1, 4, 4, 2], 0.2, 1.0, &mut rng);
    let post = posterior(&[3, 3, 2, 2], (0.1, 0.6), (0.05, 0.3), &mut rng);
    for padding in [Padding::Valid, Padding::Same] {
        let (gamma, delta) = lrt_conv_moments(&a, &post, 1, padding).unwrap();
        let n = gamma.numel();
        let mut mc = rng.fork("weights");
        let (m, v) = moments(TRIALS, n, || {
            let k = sample_weights(&post, &mut mc);
            ops::conv2d(&a, &k, 1, padding).unwrap()
        });
        assert_close("conv weight-sampling", &m, &v, &gamma, &delta);
        let mut lrt = rng.fork("lrt");
        let (m, v) = moments(TRIALS, n, || lrt_conv(&a, &post, 1, padding, &mut lrt).unwrap());
        assert_close("conv lrt", &m, &v, &gamma, &delta);
    }
}

#[test]
fn lrt_degenerate_cases() {
    let post = GaussianPosterior::with_sigma(Tensor::new([1, 1], vec![3.0]).unwrap(), 0.5).unwrap();
    let (g, d) = lrt_dense_moments(&Tensor::new([1, 1], vec![2.0]).unwrap(), &post).unwrap();
    assert!((g.data()[0] - 6.0).abs() < 1e-12);
    assert!((d.data()[0] - 1.0).abs() < 1e-12);

    let kpost = GaussianPosterior::new(
        post.mu.reshape([1, 1, 1, 1]).unwrap(),
        post.rho.reshape([1, 1, 1, 1]).unwrap(),
    )
    .unwrap();
    let (gc, dc) = lrt_conv_moments(
        &Tensor::new([1, 1, 1, 1], vec![2.0]).unwrap(),
        &kpost,
        1,
        Padding::Valid,
    )
    .unwrap();
    assert_eq!((gc.data()[0], dc.data()[0]), (g.data()[0], d.data()[0]));

    let mut rng = SeededRng::new(3);
    let mu = rand(&[4, 3], -1.0, 1.0, &mut rng);
    let post = GaussianPosterior::new(mu.clone(), Tensor::full([4, 3], -750.0)).unwrap();
    let a = rand(&[2, 4], -1.0, 1.0, &mut rng);
    let out = lrt_dense(&a, &post, &mut rng).unwrap();
    assert_eq!(
        out,
        ops::matmul_affine(&a, &transpose(&mu), &Tensor::zeros([3])).unwrap()
    );
}

#[test]
fn sampled_weight_spread() {
    let post = GaussianPosterior::with_sigma(Tensor::zeros([1]), 0.7).unwrap();
    assert_eq!(sample_weights_with(&post, &[0.0]).data(), &[0.0]);
    let unit = GaussianPosterior::with_sigma(Tensor::zeros([1]), 1.0).unwrap();
    assert!((sample_weights_with(&unit, &[2.0]).data()[0] - 2.0).abs() < 1e-15);
    let mut rng = SeededRng::new(4);
    let (_, v) = moments(TRIALS, 1, || sample_weights(&post, &mut rng));
    assert!((v[0].sqrt() / 0.7 - 1.0).abs() <= 0.01);
}

#[test]
fn kl_known_points() {
    let same = GaussianPosterior::with_sigma(Tensor::zeros([1]), 1.0).unwrap();
    assert!(kl_gaussian_closed(&same).abs() <= 1e-12);
    let shifted = GaussianPosterior::with_sigma(Tensor::ones([1]), 1.0).unwrap();
    assert!((kl_gaussian_closed(&shifted) - 0.5).abs() <= 1e-12);
    let mut rng = SeededRng::new(5);
    let est = kl_monte_carlo(&same, &PriorConfig::StandardNormal, 1000, &mut rng).unwrap();
    assert!(est.mean.abs() <= 3.0 * est.std_error + 1e-12);
}

#[test]
fn kl_closed_form_matches_monte_carlo() {
    let mut rng = SeededRng::new(6);
    for i in 0..20 {
        let post = posterior(&[16], (-1.0, 1.0), (0.2, 1.5), &mut rng);
        let closed = kl_gaussian_closed(&post);
        let mc = kl_monte_carlo(&post, &PriorConfig::StandardNormal, TRIALS, &mut rng).unwrap();
        let rel = (mc.mean - closed).abs() / closed;
        assert!(
            rel <= 0.01,
            "posterior {i}: closed {closed} mc {} ({:.3}%)",
            mc.mean,
            rel * 100.0
        );
    }
}

#[test]
fn kl_standard_error_shrinks_as_inverse_sqrt_n() {
    let post = GaussianPosterior::with_sigma(Tensor::vector(vec![0.5]), 0.6).unwrap();
    let mut rng = SeededRng::new(7);
    let mut pts = Vec::new();
    for (n, repeats) in [(100usize, 200usize), (10_000, 100), (1_000_000, 30)] {
        let est: Vec<f64> = (0..repeats)
            .map(|_| {
                kl_monte_carlo(&post, &PriorConfig::StandardNormal, n, &mut rng)
                    .unwrap()
                    .mean
            })
            .collect();
        let m = est.iter().sum::<f64>() / repeats as f64;
        let sd = (est.iter().map(|e| (e - m).powi(2)).sum::<f64>() / (repeats - 1) as f64).sqrt();
        pts.push(((n as f64).ln(), sd.ln()));
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / 3.0;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / 3.0;
    let slope =
        pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    assert!((slope + 0.5).abs() < 0.05, "slope {slope}");
}

/// KL against a scale-mixture prior by Simpson quadrature over ±12 sigma.
fn kl_quadrature(mu: f64, sigma: f64, prior: &PriorConfig) -> f64 {
    let n = 20_000;
    let (lo, hi) = (mu - 12.0 * sigma, mu + 12.0 * sigma);
    let h = (hi - lo) / n as f64;
    let f = |w: f64| {
        let z = (w - mu) / sigma;
        let log_q = -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        log_q.exp() * (log_q - prior.log_density(w).0)
    };
    let mut s = f(lo) + f(hi);
    for i in 1..n {
        s += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

#[test]
fn mixture_prior_monte_carlo_matches_quadrature() {
    let prior = PriorConfig::ScaleMixture {
        pi: 0.5,
        sigma1: 1.0,
        sigma2: (-6f64).exp(),
    };
    let mut rng = SeededRng::new(8);
    for (mu, sigma) in [(0.3, 0.2), (-0.8, 0.5), (0.05, 0.05)] {
        let post = GaussianPosterior::with_sigma(Tensor::vector(vec![mu]), sigma).unwrap();
        let exact = kl_quadrature(mu, sigma, &prior);
        let mc = kl_monte_carlo(&post, &prior, TRIALS, &mut rng).unwrap();
        assert!(
            (mc.mean - exact).abs() <= 4.0 * mc.std_error,
            "mu {mu} sigma {sigma}: mc {} ± {} vs {exact}",
            mc.mean,
            mc.std_error
        );
    }
}

#[test]
fn elbo_hand_values() {
    let uniform = Tensor::full([8, 4], 0.25);
    let t = one_hot(&[0, 1, 2, 3, 0, 1, 2, 3], 4).unwrap();
    let e = elbo_loss(&uniform, &t, 3.0, 0.0).unwrap();
    assert!((e.nll - 8.0 * 4f64.ln()).abs() < 1e-12);
    assert_eq!(e.total, e.nll);
    let e = elbo_loss(&t, &t, 3.0, 0.5).unwrap();
    assert_eq!(e.nll, 0.0);
    assert_eq!(e.total, 1.5);
}

#[test]
fn collapsed_posterior_equals_deterministic_twin() {
    let mut model = Model::new(ModelSpec::bayescnn([64, 64, 1], 4), 9).unwrap();
    model.collapse_variance();
    let twin = model.mean_network().unwrap();
    let mut rng = SeededRng::new(10);
    let x = rand(&[100, 64, 64, 1], 0.0, 1.0, &mut rng);
    let logits = |m: &Model, noise: Noise, rng: &mut SeededRng| {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let opts = RunOptions {
            noise,
            ..RunOptions::eval()
        };
        let f = m.forward(&mut g, xv, opts, rng).unwrap();
        g.value(f.logits).clone()
    };
    let reference = logits(&twin, Noise::Sample, &mut rng);
    let sampled = logits(&model, Noise::Sample, &mut rng);
    let max_diff = reference
        .data()
        .iter()
        .zip(sampled.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(max_diff <= 1e-12, "max |diff| {max_diff:e}");
}
