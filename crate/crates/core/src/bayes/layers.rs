//! Bayesian layers on the autodiff graph.

use crate::error::Result;
use crate::rng::SeededRng;
use crate::tensor::{Graph, Padding, Var};

use super::PriorConfig;

/// How stochastic layers draw their activation noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Noise {
    /// Fresh `eps ~ N(0,1)` per activation.
    Sample,
    /// `eps = 0`: the layer uses its posterior means only.
    Mean,
}

/// Graph handles for one Bayesian layer's weight and bias posteriors.
#[derive(Clone, Copy, Debug)]
pub struct BayesVars {
    pub w_mu: Var,
    pub w_rho: Var,
    pub b_mu: Var,
    pub b_rho: Var,
}

fn sq_sigma(g: &mut Graph, rho: Var) -> Var {
    let s = g.softplus(rho, 1.0);
    g.square(s)
}

/// Adds `eps * sqrt(var)` to `mean`.
fn perturb(g: &mut Graph, mean: Var, var: Var, rng: &mut SeededRng) -> Result<Var> {
    let sd = g.sqrt(var);
    let eps = rng.normals(g.value(sd).numel());
    let noise = g.mul_const(sd, eps)?;
    g.add(mean, noise)
}

/// Local-reparameterization dense layer for `a: [M,N]` and weights `[N,K]`.
pub fn lrt_dense_var(g: &mut Graph, a: Var, p: &BayesVars, noise: Noise, rng: &mut SeededRng) -> Result<Var> {
    let mw = g.matmul(a, p.w_mu)?;
    let mean = g.add_bias(mw, p.b_mu)?;
    if noise == Noise::Mean {
        return Ok(mean);
    }
    let a2 = g.square(a);
    let s2w = sq_sigma(g, p.w_rho);
    let s2b = sq_sigma(g, p.b_rho);
    let vw = g.matmul(a2, s2w)?;
    let var = g.add_bias(vw, s2b)?;
    perturb(g, mean, var, rng)
}

/// Local-reparameterization convolution: the mean path convolves `a` with
/// `mu`, the variance path convolves `a^2` with `sigma^2`.
pub fn lrt_conv_var(
    g: &mut Graph,
    a: Var,
    p: &BayesVars,
    stride: usize,
    padding: Padding,
    noise: Noise,
    rng: &mut SeededRng,
) -> Result<Var> {
    let mc = g.conv2d(a, p.w_mu, stride, padding)?;
    let mean = g.add_bias(mc, p.b_mu)?;
    if noise == Noise::Mean {
        return Ok(mean);
    }
    let a2 = g.square(a);
    let s2w = sq_sigma(g, p.w_rho);
    let s2b = sq_sigma(g, p.b_rho);
    let vc = g.conv2d(a2, s2w, stride, padding)?;
    let var = g.add_bias(vc, s2b)?;
    perturb(g, mean, var, rng)
}

/// KL of a posterior block against `prior`: closed form for the standard
/// normal, a single-draw estimate otherwise.
pub fn kl_var(g: &mut Graph, mu: Var, rho: Var, prior: &PriorConfig, rng: &mut SeededRng) -> Result<Var> {
    match prior {
        PriorConfig::StandardNormal => g.kl_gaussian(mu, rho, 0.0, 1.0),
        _ => {
            let eps = rng.normals(g.value(mu).numel());
            g.kl_sampled(mu, rho, eps, prior.log_density_fn())
        }
    }
}
