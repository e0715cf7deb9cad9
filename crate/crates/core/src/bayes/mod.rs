//! Bayes-by-Backprop: factorized Gaussian posteriors over weights, the local
//! reparameterization trick, KL complexity terms and the ELBO.
//!
//! Each weight has a posterior `N(mu, sigma^2)` with `sigma = softplus(rho)`,
//! which keeps the spread positive without constraints on `rho`.

mod layers;

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::nn::softplus_scalar;
use crate::rng::SeededRng;
use crate::tensor::LogDensity;
use crate::tensor::{kernels, ops, Padding, Tensor};

pub use layers::{kl_var, lrt_conv_var, lrt_dense_var, BayesVars, Noise};

/// Initial `rho`; `softplus(-3) ~= 0.0486`.
pub const RHO_INIT: f64 = -3.0;

/// Probability floor inside logarithms of the likelihood.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior {
    pub mu: Tensor,
    pub rho: Tensor,
}

impl GaussianPosterior {
    pub fn new(mu: Tensor, rho: Tensor) -> Result<Self> {
        if mu.shape() != rho.shape() {
            return Err(shape_err!(
                "posterior mu {:?} and rho {:?} differ in shape",
                mu.shape(),
                rho.shape()
            ));
        }
        Ok(Self { mu, rho })
    }

    /// `mu ~ U(±1/sqrt(fan_in))`, `rho = rho_init`.
    pub fn init(shape: &[usize], fan_in: usize, rho_init: f64, rng: &mut SeededRng) -> Self {
        let limit = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let mu = (0..n).map(|_| rng.uniform_range(-limit, limit)).collect();
        Self {
            mu: Tensor::new(shape.to_vec(), mu).expect("shape from caller"),
            rho: Tensor::full(shape.to_vec(), rho_init),
        }
    }

    /// Posterior with the given spread everywhere: `rho = softplus^-1(sigma)`.
    pub fn with_sigma(mu: Tensor, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(invalid!("sigma must be positive"));
        }
        let rho = Tensor::full(mu.shape().to_vec(), inverse_softplus(sigma));
        Self::new(mu, rho)
    }

    pub fn shape(&self) -> &[usize] {
        self.mu.shape()
    }

    pub fn sigma(&self) -> Tensor {
        self.rho.map(|r| softplus_scalar(r, 1.0))
    }

    /// Relative variance `sigma^2 / mu^2`; infinite where `mu == 0`.
    pub fn alpha(&self) -> Tensor {
        let s = self.sigma();
        let data = s
            .data()
            .iter()
            .zip(self.mu.data())
            .map(|(s, m)| if *m == 0.0 { f64::INFINITY } else { s * s / (m * m) })
            .collect();
        Tensor::new(self.shape().to_vec(), data).expect("same shape")
    }
}

/// `ln(exp(y) - 1)`, the inverse of `softplus` for `y > 0`.
pub fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorConfig {
    #[default]
    StandardNormal,
    /// `pi N(0, sigma1^2) + (1 - pi) N(0, sigma2^2)`.
    ScaleMixture { pi: f64, sigma1: f64, sigma2: f64 },
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if let PriorConfig::ScaleMixture { pi, sigma1, sigma2 } = *self {
            if !(0.0..=1.0).contains(&pi) || !(sigma1 > 0.0) || !(sigma2 > 0.0) {
                return Err(invalid!("scale mixture needs pi in [0,1] and positive sigmas"));
            }
        }
        Ok(())
    }

    /// `(ln p(w), d ln p(w) / dw)`.
    pub fn log_density(&self, w: f64) -> (f64, f64) {
        match *self {
            PriorConfig::StandardNormal => (-0.5 * (2.0 * PI).ln() - 0.5 * w * w, -w),
            PriorConfig::ScaleMixture { pi, sigma1, sigma2 } => {
                let comp = |s: f64| -0.5 * (2.0 * PI).ln() - s.ln() - 0.5 * (w / s).powi(2);
                let l1 = pi.ln() + comp(sigma1);
                let l2 = (1.0 - pi).ln() + comp(sigma2);
                let m = l1.max(l2);
                let lse = m + ((l1 - m).exp() + (l2 - m).exp()).ln();
                let (r1, r2) = ((l1 - lse).exp(), (l2 - lse).exp());
                (lse, -w * (r1 / (sigma1 * sigma1) + r2 / (sigma2 * sigma2)))
            }
        }
    }

    pub(crate) fn log_density_fn(&self) -> LogDensity {
        let prior = *self;
        Arc::new(move |w| prior.log_density(w))
    }
}

/// `w = mu + sigma * eps`, `eps ~ N(0, 1)`.
pub fn sample_weights(post: &GaussianPosterior, rng: &mut SeededRng) -> Tensor {
    let eps = rng.normals(post.mu.numel());
    sample_weights_with(post, &eps)
}

pub fn sample_weights_with(post: &GaussianPosterior, eps: &[f64]) -> Tensor {
    let data = post
        .mu
        .data()
        .iter()
        .zip(post.rho.data())
        .zip(eps)
        .map(|((m, r), e)| m + softplus_scalar(*r, 1.0) * e)
        .collect();
    Tensor::new(post.shape().to_vec(), data).expect("same shape")
}

/// Activation mean and variance of a Bayesian dense layer:
/// `gamma = a mu`, `delta = a^2 sigma^2`, for `a: [M,N]`, weights `[N,K]`.
///
/// ```
/// use admri::bayes::{lrt_dense_moments, GaussianPosterior};
/// use admri::Tensor;
/// let post = GaussianPosterior::with_sigma(Tensor::new([1, 1], vec![3.0]).unwrap(), 0.5).unwrap();
/// let a = Tensor::new([1, 1], vec![2.0]).unwrap();
/// let (gamma, delta) = lrt_dense_moments(&a, &post).unwrap();
/// assert!((gamma.data()[0] - 6.0).abs() < 1e-12);
/// assert!((delta.data()[0] - 1.0).abs() < 1e-12);
/// ```
pub fn lrt_dense_moments(a: &Tensor, post: &GaussianPosterior) -> Result<(Tensor, Tensor)> {
    let (ws, as_) = (post.shape(), a.shape());
    if as_.len() != 2 || ws.len() != 2 || as_[1] != ws[0] {
        return Err(shape_err!("input {as_:?} does not fit weights {ws:?}"));
    }
    let (m, n, k) = (as_[0], as_[1], ws[1]);
    let a2: Vec<f64> = a.data().iter().map(|v| v * v).collect();
    let s2: Vec<f64> = post.sigma().data().iter().map(|s| s * s).collect();
    let gamma = kernels::matmul(a.data(), post.mu.data(), m, n, k);
    let delta = kernels::matmul(&a2, &s2, m, n, k);
    Ok((Tensor::new([m, k], gamma)?, Tensor::new([m, k], delta)?))
}

/// One local-reparameterization draw: `gamma + sqrt(delta) * eps` with a
/// fresh `eps` per activation.
pub fn lrt_dense(a: &Tensor, post: &GaussianPosterior, rng: &mut SeededRng) -> Result<Tensor> {
    let (gamma, delta) = lrt_dense_moments(a, post)?;
    Ok(reparameterize(&gamma, &delta, rng))
}

/// Mean path `a * mu` and variance path `a^2 * sigma^2` of a Bayesian
/// convolution (kernels `[k,k,C,F]`).
pub fn lrt_conv_moments(
    a: &Tensor,
    post: &GaussianPosterior,
    stride: usize,
    padding: Padding,
) -> Result<(Tensor, Tensor)> {
    let s2 = post.sigma().map(|s| s * s);
    let mean = ops::conv2d(a, &post.mu, stride, padding)?;
    let var = ops::conv2d(&a.map(|v| v * v), &s2, stride, padding)?;
    Ok((mean, var))
}

pub fn lrt_conv(
    a: &Tensor,
    post: &GaussianPosterior,
    stride: usize,
    padding: Padding,
    rng: &mut SeededRng,
) -> Result<Tensor> {
    let (mean, var) = lrt_conv_moments(a, post, stride, padding)?;
    Ok(reparameterize(&mean, &var, rng))
}

fn reparameterize(mean: &Tensor, var: &Tensor, rng: &mut SeededRng) -> Tensor {
    let eps = rng.normals(mean.numel());
    let data = mean
        .data()
        .iter()
        .zip(var.data())
        .zip(&eps)
        .map(|((m, v), e)| m + v.sqrt() * e)
        .collect();
    Tensor::new(mean.shape().to_vec(), data).expect("same shape")
}

/// `KL(q || N(0,1)) = sum ln(1/sigma) + (sigma^2 + mu^2)/2 - 1/2`.
///
/// ```
/// use admri::bayes::{kl_gaussian_closed, GaussianPosterior};
/// use admri::Tensor;
/// let post = GaussianPosterior::with_sigma(Tensor::vector(vec![1.0]), 1.0).unwrap();
/// assert!((kl_gaussian_closed(&post) - 0.5).abs() < 1e-12);
/// ```
pub fn kl_gaussian_closed(post: &GaussianPosterior) -> f64 {
    post.mu
        .data()
        .iter()
        .zip(post.rho.data())
        .map(|(&m, &r)| {
            let s = softplus_scalar(r, 1.0);
            -s.ln() + 0.5 * (s * s + m * m) - 0.5
        })
        .sum()
}

/// KL term for any prior: closed form for the standard normal, otherwise a
/// Monte Carlo estimate with `n_samples` draws.
pub fn kl_divergence(
    post: &GaussianPosterior,
    prior: &PriorConfig,
    n_samples: usize,
    rng: &mut SeededRng,
) -> Result<f64> {
    match prior {
        PriorConfig::StandardNormal => Ok(kl_gaussian_closed(post)),
        _ => Ok(kl_monte_carlo(post, prior, n_samples, rng)?.mean),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KlEstimate {
    pub mean: f64,
    /// Standard error of `mean` (sample standard deviation / sqrt(n)).
    pub std_error: f64,
}

/// `(1/n) sum_i [ln q(w_i) - ln p(w_i)]` with `w_i ~ q`.
pub fn kl_monte_carlo(
    post: &GaussianPosterior,
    prior: &PriorConfig,
    n_samples: usize,
    rng: &mut SeededRng,
) -> Result<KlEstimate> {
    if n_samples == 0 {
        return Err(invalid!("kl_monte_carlo needs at least one sample"));
    }
    prior.validate()?;
    let half_ln_2pi = 0.5 * (2.0 * PI).ln();
    let sigma = post.sigma();
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n_samples {
        let mut draw = 0.0;
        for (&m, &s) in post.mu.data().iter().zip(sigma.data()) {
            let e = rng.normal();
            let log_q = -half_ln_2pi - s.ln() - 0.5 * e * e;
            draw += log_q - prior.log_density(m + s * e).0;
        }
        sum += draw;
        sum_sq += draw * draw;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let var = if n_samples > 1 {
        ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(KlEstimate {
        mean,
        std_error: (var / n).sqrt(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboBreakdown {
    pub nll: f64,
    pub kl: f64,
    pub kl_weight: f64,
    pub total: f64,
    /// Rows whose target probability was below the floor and got clamped.
    pub clamped: usize,
}

/// Negative ELBO: `nll + kl_weight * kl`, with `nll = -sum ln p(target)`.
///
/// ```
/// use admri::bayes::elbo_loss;
/// use admri::data::one_hot;
/// use admri::Tensor;
/// let probs = Tensor::full([8, 4], 0.25);
/// let targets = one_hot(&[0, 1, 2, 3, 0, 1, 2, 3], 4).unwrap();
/// let elbo = elbo_loss(&probs, &targets, 3.0, 0.0).unwrap();
/// assert!((elbo.nll - 8.0 * 4f64.ln()).abs() < 1e-12);
/// assert_eq!(elbo.total, elbo.nll);
/// ```
pub fn elbo_loss(predictions: &Tensor, targets: &Tensor, kl_total: f64, kl_weight: f64) -> Result<ElboBreakdown> {
    if predictions.shape() != targets.shape() || predictions.rank() != 2 {
        return Err(shape_err!(
            "predictions {:?} and targets {:?} must be matching [N, classes]",
            predictions.shape(),
            targets.shape()
        ));
    }
    let mut nll = 0.0;
    let mut clamped = 0;
    for (p, t) in predictions.rows().zip(targets.rows()) {
        for (&pv, &tv) in p.iter().zip(t) {
            if tv != 0.0 {
                if pv < PROB_FLOOR {
                    clamped += 1;
                }
                nll -= tv * pv.max(PROB_FLOOR).ln();
            }
        }
    }
    if clamped > 0 {
        log::warn!("{clamped} target probabilities clamped to {PROB_FLOOR:e}");
    }
    Ok(ElboBreakdown {
        nll,
        kl: kl_total,
        kl_weight,
        total: nll + kl_weight * kl_total,
        clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampling_known_draws() {
        let post = GaussianPosterior::with_sigma(Tensor::vector(vec![0.7, -1.0]), 0.3).unwrap();
        assert_eq!(sample_weights_with(&post, &[0.0, 0.0]).data(), post.mu.data());
        let unit = GaussianPosterior::with_sigma(Tensor::vector(vec![0.0]), 1.0).unwrap();
        let w = sample_weights_with(&unit, &[2.0]);
        assert!((w.data()[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn inverse_softplus_round_trips() {
        for y in [1e-6, 0.0486, 1.0, 7.5, 40.0] {
            assert!((softplus_scalar(inverse_softplus(y), 1.0) - y).abs() <= 1e-12 * y.max(1.0));
        }
    }

    #[test]
    fn kl_known_points() {
        let same = GaussianPosterior::with_sigma(Tensor::vector(vec![0.0]), 1.0).unwrap();
        assert!(kl_gaussian_closed(&same).abs() < 1e-12);
    }

    #[test]
    fn alpha_is_relative_variance() {
        let post = GaussianPosterior::with_sigma(Tensor::vector(vec![2.0, 0.0]), 0.5).unwrap();
        let a = post.alpha();
        assert!((a.data()[0] - 0.0625).abs() < 1e-12);
        assert!(a.data()[1].is_infinite());
    }

    #[test]
    fn mixture_density_reduces_to_normal() {
        let mix = PriorConfig::ScaleMixture {
            pi: 0.5,
            sigma1: 1.0,
            sigma2: 1.0,
        };
        for w in [-2.0, 0.0, 0.3, 5.0] {
            let (a, da) = mix.log_density(w);
            let (b, db) = PriorConfig::StandardNormal.log_density(w);
            assert!((a - b).abs() < 1e-12 && (da - db).abs() < 1e-12);
        }
    }

    #[test]
    fn mixture_gradient_matches_finite_difference() {
        let mix = PriorConfig::ScaleMixture {
            pi: 0.25,
            sigma1: 1.0,
            sigma2: 0.1,
        };
        for w in [-0.7, 0.05, 0.4, 2.0] {
            let h = 1e-6;
            let fd = (mix.log_density(w + h).0 - mix.log_density(w - h).0) / (2.0 * h);
            assert!((mix.log_density(w).1 - fd).abs() < 1e-6);
        }
    }

    #[test]
    fn elbo_perfect_predictions_and_clamp() {
        let targets = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let e = elbo_loss(&targets, &targets, 2.0, 0.5).unwrap();
        assert_eq!(e.nll, 0.0);
        assert_eq!(e.total - e.kl_weight * e.kl - e.nll, 0.0);
        let wrong = Tensor::new([2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let e = elbo_loss(&wrong, &targets, 0.0, 0.0).unwrap();
        assert_eq!(e.clamped, 2);
        assert!((e.nll + 2.0 * PROB_FLOOR.ln()).abs() < 1e-9);
    }
}
