use std::fmt;
use std::sync::Arc;

use super::kernels::{self, ConvGeom, Padding, PoolGeom, PoolMode};
use super::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::nn::softplus_scalar;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// `w -> (log p(w), d log p(w) / dw)` for a factorized prior.
pub type LogDensity = Arc<dyn Fn(f64) -> (f64, f64) + Send + Sync>;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    MulConst(Var, Vec<f64>),
    Scale(Var, f64),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        k: Var,
        geom: ConvGeom,
    },
    Pool {
        x: Var,
        geom: PoolGeom,
        mode: PoolMode,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Softplus(Var, f64),
    Sqrt(Var),
    Square(Var),
    Log(Var, f64),
    Softmax(Var),
    Reshape(Var),
    ConcatLast(Var, Var),
    Upsample(Var, usize),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        probs: Var,
        targets: Vec<f64>,
        floor: f64,
        scale: f64,
    },
    KlGaussian {
        mu: Var,
        rho: Var,
        prior_mean: f64,
        prior_std: f64,
    },
    KlSampled {
        mu: Var,
        rho: Var,
        eps: Vec<f64>,
        log_prior: LogDensity,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics computed by a training-mode batchnorm node.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (divide-by-count) variance.
    pub var: Vec<f64>,
}

/// Computation record for reverse-mode differentiation.
///
/// Nodes are appended in creation order, which is a topological order, so
/// backward is a single reverse sweep. A graph is single-use: a second call
/// to [`Graph::backward`] returns [`Error::BackwardTwice`]; build a fresh
/// graph for every step.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .field("backward_done", &self.backward_done)
            .finish()
    }
}

/// Gradients produced by [`Graph::backward`], addressable by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `d loss / d var`, or `None` if `var` does not influence the loss or
    /// does not require gradients.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.shape().iter().product::<usize>(), value.numel());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Register an input; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    /// Register a trainable parameter (a leaf that always requires grad).
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(true), Op::Leaf, true)
    }

    /// Register a constant (never receives a gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(v, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `x + b` with `b` broadcast over every axis but the last.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&1);
        if self.shape(b) != [c] {
            return Err(shape_err!(
                "bias of shape {:?} cannot broadcast over {:?}",
                self.shape(b),
                self.shape(x)
            ));
        }
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).clone().with_requires_grad(false);
        for row in out.data_mut().chunks_mut(c) {
            for (o, bb) in row.iter_mut().zip(&bias) {
                *o += bb;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddBias(x, b), rg))
    }

    /// Elementwise product with a constant array (dropout masks, selectors).
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        if c.len() != self.value(x).numel() {
            return Err(shape_err!(
                "mul_const: {} constants for tensor of shape {:?}",
                c.len(),
                self.shape(x)
            ));
        }
        let data = self.value(x).data().iter().zip(&c).map(|(a, b)| a * b).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::MulConst(x, c), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    /// `[m,k] x [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err!("matmul: incompatible shapes {sa:?} and {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::new([m, n], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    /// Convolution of `x: [N,H,W,C]` with `k: [k,k,C,F]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: Padding) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(k), stride, padding)?;
        let data = kernels::conv2d_forward(self.value(x).data(), self.value(k).data(), &geom);
        let t = Tensor::new(geom.out_shape(), data)?;
        let rg = self.rg(x) || self.rg(k);
        Ok(self.push(t, Op::Conv2d { x, k, geom }, rg))
    }

    /// Non-overlapping `p x p` pooling of `x: [N,H,W,C]`.
    pub fn pool2d(&mut self, x: Var, p: usize, mode: PoolMode) -> Result<Var> {
        let geom = PoolGeom::new(self.shape(x), p)?;
        let (data, argmax) = kernels::pool2d_forward(self.value(x).data(), &geom, mode);
        let t = Tensor::new([geom.n, geom.oh, geom.ow, geom.c], data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Pool { x, geom, mode, argmax }, rg))
    }

    /// Spatial mean: `[N,H,W,C] -> [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err!("global_avg_pool expects [N,H,W,C], got {s:?}"));
        }
        let (n, hw, c) = (s[0], s[1] * s[2], s[3]);
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for p in 0..hw {
                for ch in 0..c {
                    out[i * c + ch] += src[(i * hw + p) * c + ch];
                }
            }
        }
        let inv = 1.0 / hw as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let t = Tensor::new([n, c], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::GlobalAvgPool(x), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu(x, slope))
    }

    /// `(1/beta) ln(1 + exp(beta x))`, switching to the asymptotic form for
    /// `beta x > 30`.
    pub fn softplus(&mut self, x: Var, beta: f64) -> Var {
        self.unary(x, |v| softplus_scalar(v, beta), Op::Softplus(x, beta))
    }

    /// Square root. The derivative at exactly zero is taken to be zero.
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// `ln(max(x, floor))`.
    pub fn log(&mut self, x: Var, floor: f64) -> Var {
        self.unary(x, |v| v.max(floor).ln(), Op::Log(x, floor))
    }

    /// Max-shifted softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone().with_requires_grad(false);
        let c = *out.shape().last().unwrap_or(&1);
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.rg(x);
        self.push(out, Op::Softmax(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape.to_vec())?.with_requires_grad(false);
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Concatenate along the last axis; leading dims must agree.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(shape_err!("concat: shapes {sa:?} and {sb:?} do not line up"));
        }
        let (ca, cb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(da.len() + db.len());
        for (ra, rb) in da.chunks(ca).zip(db.chunks(cb)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = ca + cb;
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::ConcatLast(a, b), rg))
    }

    /// Nearest-neighbour upsampling of `[N,H,W,C]` by an integer factor.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || factor == 0 {
            return Err(shape_err!("upsample expects [N,H,W,C] and factor >= 1, got {s:?}"));
        }
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h * factor, w * factor);
        let src = self.value(x).data();
        let mut out = vec![0.0; n * oh * ow * c];
        for i in 0..n {
            for y in 0..oh {
                for xx in 0..ow {
                    let from = ((i * h + y / factor) * w + xx / factor) * c;
                    let to = ((i * oh + y) * ow + xx) * c;
                    out[to..to + c].copy_from_slice(&src[from..from + c]);
                }
            }
        }
        let t = Tensor::new([n, oh, ow, c], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Upsample(x, factor), rg))
    }

    /// Training-mode batch normalization over every axis but the last.
    ///
    /// Returns the output and the batch statistics used, so the caller can
    /// update running averages.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let c = self.check_channel_params(x, gamma, beta)?;
        let src = self.value(x).data();
        let m = src.len() / c;
        if m < 2 {
            return Err(Error::InvalidArgument(
                "batch norm in training mode needs at least 2 values per channel".into(),
            ));
        }
        let mut mean = vec![0.0; c];
        for row in src.chunks(c) {
            for (s, v) in mean.iter_mut().zip(row) {
                *s += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= m as f64);
        let mut var = vec![0.0; c];
        for row in src.chunks(c) {
            for ((s, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - mu) * (v - mu);
            }
        }
        var.iter_mut().for_each(|v| *v /= m as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        for (i, v) in src.iter().enumerate() {
            let ch = i % c;
            xhat[i] = (v - mean[ch]) * inv_std[ch];
            out[i] = g[ch] * xhat[i] + b[ch];
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok((v, BatchStats { mean, var }))
    }

    /// `gamma * (x - mean) / sqrt(var + eps) + beta` with fixed statistics
    /// (inference-mode batch normalization).
    pub fn channel_affine(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let c = self.check_channel_params(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(shape_err!("running statistics do not match {c} channels"));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let out = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let ch = i % c;
                g[ch] * (v - mean[ch]) * inv_std[ch] + b[ch]
            })
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            t,
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
            },
            rg,
        ))
    }

    fn check_channel_params(&self, x: Var, gamma: Var, beta: Var) -> Result<usize> {
        let c = *self.shape(x).last().unwrap_or(&1);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err!(
                "scale/shift shapes {:?}/{:?} do not match {c} channels",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        Ok(c)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// `-scale * sum(targets * ln(max(probs, floor)))`.
    pub fn cross_entropy(&mut self, probs: Var, targets: &Tensor, floor: f64, scale: f64) -> Result<Var> {
        if self.shape(probs) != targets.shape() {
            return Err(shape_err!(
                "cross entropy: predictions {:?} vs targets {:?}",
                self.shape(probs),
                targets.shape()
            ));
        }
        let s: f64 = self
            .value(probs)
            .data()
            .iter()
            .zip(targets.data())
            .filter(|(_, &t)| t != 0.0)
            .map(|(&p, &t)| t * p.max(floor).ln())
            .sum();
        let rg = self.rg(probs);
        Ok(self.push(
            Tensor::scalar(-scale * s),
            Op::CrossEntropy {
                probs,
                targets: targets.data().to_vec(),
                floor,
                scale,
            },
            rg,
        ))
    }

    /// Closed-form `KL(N(mu, softplus(rho)^2) || N(m0, s0^2))` summed over
    /// all weights.
    pub fn kl_gaussian(&mut self, mu: Var, rho: Var, prior_mean: f64, prior_std: f64) -> Result<Var> {
        self.same_shape(mu, rho, "kl_gaussian")?;
        let var0 = prior_std * prior_std;
        let kl: f64 = self
            .value(mu)
            .data()
            .iter()
            .zip(self.value(rho).data())
            .map(|(&m, &r)| {
                let s = softplus_scalar(r, 1.0);
                (prior_std / s).ln() + (s * s + (m - prior_mean).powi(2)) / (2.0 * var0) - 0.5
            })
            .sum();
        let rg = self.rg(mu) || self.rg(rho);
        Ok(self.push(
            Tensor::scalar(kl),
            Op::KlGaussian {
                mu,
                rho,
                prior_mean,
                prior_std,
            },
            rg,
        ))
    }

    /// Single-draw estimate `sum(log q(w) - log p(w))` at `w = mu + sigma * eps`
    /// with `sigma = softplus(rho)` and `eps` held fixed.
    pub fn kl_sampled(&mut self, mu: Var, rho: Var, eps: Vec<f64>, log_prior: LogDensity) -> Result<Var> {
        self.same_shape(mu, rho, "kl_sampled")?;
        if eps.len() != self.value(mu).numel() {
            return Err(shape_err!("kl_sampled: noise length mismatch"));
        }
        let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let v: f64 = self
            .value(mu)
            .data()
            .iter()
            .zip(self.value(rho).data())
            .zip(&eps)
            .map(|((&m, &r), &e)| {
                let s = softplus_scalar(r, 1.0);
                let log_q = -half_ln_2pi - s.ln() - 0.5 * e * e;
                log_q - log_prior(m + s * e).0
            })
            .sum();
        let rg = self.rg(mu) || self.rg(rho);
        Ok(self.push(
            Tensor::scalar(v),
            Op::KlSampled {
                mu,
                rho,
                eps,
                log_prior,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.requires_grad)
                    .map(|d| Tensor::new(node.value.shape().to_vec(), d).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(&contrib) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn elementwise(&self, grads: &mut [Option<Vec<f64>>], x: Var, g: &[f64], d: impl Fn(f64, f64) -> f64) {
        if !self.rg(x) {
            return;
        }
        let xs = self.value(x).data();
        let contrib = xs.iter().zip(g).map(|(&xv, &gv)| d(xv, gv)).collect();
        self.accumulate(grads, x, contrib);
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.iter().zip(av).map(|(x, y)| x * y).collect());
                }
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.to_vec());
                if self.rg(*b) {
                    let c = self.value(*b).numel();
                    let mut db = vec![0.0; c];
                    for row in g.chunks(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MulConst(x, c) => {
                self.accumulate(grads, *x, g.iter().zip(c).map(|(a, b)| a * b).collect());
            }
            Op::Scale(x, s) => {
                self.accumulate(grads, *x, g.iter().map(|v| v * s).collect());
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (da, db) = kernels::matmul_backward(
                    self.value(*a).data(),
                    self.value(*b).data(),
                    g,
                    (sa[0], sa[1], sb[1]),
                    self.rg(*a),
                    self.rg(*b),
                );
                if let Some(da) = da {
                    self.accumulate(grads, *a, da);
                }
                if let Some(db) = db {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Conv2d { x, k, geom } => {
                let (dx, dk) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*k).data(),
                    g,
                    geom,
                    self.rg(*x),
                    self.rg(*k),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dk) = dk {
                    self.accumulate(grads, *k, dk);
                }
            }
            Op::Pool { x, geom, mode, argmax } => {
                if self.rg(*x) {
                    let dx = kernels::pool2d_backward(g, geom, *mode, argmax);
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::GlobalAvgPool(x) => {
                if self.rg(*x) {
                    let s = self.shape(*x);
                    let (n, hw, c) = (s[0], s[1] * s[2], s[3]);
                    let inv = 1.0 / hw as f64;
                    let mut dx = vec![0.0; n * hw * c];
                    for i in 0..n {
                        for p in 0..hw {
                            for ch in 0..c {
                                dx[(i * hw + p) * c + ch] = g[i * c + ch] * inv;
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Relu(x) => self.elementwise(grads, *x, g, |v, gv| if v > 0.0 { gv } else { 0.0 }),
            Op::LeakyRelu(x, s) => self.elementwise(grads, *x, g, |v, gv| if v > 0.0 { gv } else { s * gv }),
            Op::Softplus(x, beta) => self.elementwise(grads, *x, g, |v, gv| gv * sigmoid(beta * v)),
            Op::Sqrt(x) => {
                let contrib = out
                    .iter()
                    .zip(g)
                    .map(|(&y, &gv)| if y > 0.0 { gv / (2.0 * y) } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, contrib);
            }
            Op::Square(x) => self.elementwise(grads, *x, g, |v, gv| 2.0 * v * gv),
            Op::Log(x, floor) => self.elementwise(grads, *x, g, |v, gv| if v > *floor { gv / v } else { 0.0 }),
            Op::Softmax(x) => {
                let c = *node.value.shape().last().unwrap_or(&1);
                let mut dx = vec![0.0; out.len()];
                for ((y, gr), d) in out.chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)) {
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[j] = y[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::ConcatLast(a, b) => {
                let (ca, cb) = (*self.shape(*a).last().unwrap(), *self.shape(*b).last().unwrap());
                let mut da = Vec::with_capacity(self.value(*a).numel());
                let mut db = Vec::with_capacity(self.value(*b).numel());
                for row in g.chunks(ca + cb) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Upsample(x, f) => {
                if self.rg(*x) {
                    let s = self.shape(*x);
                    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
                    let (oh, ow) = (h * f, w * f);
                    let mut dx = vec![0.0; n * h * w * c];
                    for i in 0..n {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let to = ((i * h + y / f) * w + xx / f) * c;
                                let from = ((i * oh + y) * ow + xx) * c;
                                for ch in 0..c {
                                    dx[to + ch] += g[from + ch];
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = inv_std.len();
                let m = (g.len() / c) as f64;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (j, (&gv, &xh)) in g.iter().zip(xhat).enumerate() {
                    sum_g[j % c] += gv;
                    sum_gx[j % c] += gv * xh;
                }
                if self.rg(*x) {
                    let gam = self.value(*gamma).data();
                    let dx = g
                        .iter()
                        .zip(xhat)
                        .enumerate()
                        .map(|(j, (&gv, &xh))| {
                            let ch = j % c;
                            gam[ch] * inv_std[ch] / m * (m * gv - sum_g[ch] - xh * sum_gx[ch])
                        })
                        .collect();
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *gamma, sum_gx);
                self.accumulate(grads, *beta, sum_g);
            }
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let c = inv_std.len();
                let xs = self.value(*x).data();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; xs.len()];
                for (j, (&gv, &xv)) in g.iter().zip(xs).enumerate() {
                    let ch = j % c;
                    dgamma[ch] += gv * (xv - mean[ch]) * inv_std[ch];
                    dbeta[ch] += gv;
                    dx[j] = gv * gam[ch] * inv_std[ch];
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::CrossEntropy {
                probs,
                targets,
                floor,
                scale,
            } => {
                let ps = self.value(*probs).data();
                let d = ps
                    .iter()
                    .zip(targets)
                    .map(|(&p, &t)| {
                        if t != 0.0 && p > *floor {
                            -g[0] * scale * t / p
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(grads, *probs, d);
            }
            Op::KlGaussian {
                mu,
                rho,
                prior_mean,
                prior_std,
            } => {
                let var0 = prior_std * prior_std;
                let (ms, rs) = (self.value(*mu).data(), self.value(*rho).data());
                if self.rg(*mu) {
                    let d = ms.iter().map(|m| g[0] * (m - prior_mean) / var0).collect();
                    self.accumulate(grads, *mu, d);
                }
                if self.rg(*rho) {
                    let d = rs
                        .iter()
                        .map(|&r| {
                            let s = softplus_scalar(r, 1.0);
                            g[0] * (-1.0 / s + s / var0) * sigmoid(r)
                        })
                        .collect();
                    self.accumulate(grads, *rho, d);
                }
            }
            Op::KlSampled {
                mu,
                rho,
                eps,
                log_prior,
            } => {
                let (ms, rs) = (self.value(*mu).data(), self.value(*rho).data());
                let mut dmu = vec![0.0; ms.len()];
                let mut drho = vec![0.0; ms.len()];
                for j in 0..ms.len() {
                    let s = softplus_scalar(rs[j], 1.0);
                    let (_, dlogp) = log_prior(ms[j] + s * eps[j]);
                    dmu[j] = -g[0] * dlogp;
                    drho[j] = g[0] * (-1.0 / s - dlogp * eps[j]) * sigmoid(rs[j]);
                }
                self.accumulate(grads, *mu, dmu);
                self.accumulate(grads, *rho, drho);
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
