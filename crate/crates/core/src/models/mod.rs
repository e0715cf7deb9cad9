//! Classifier architectures: ADD-Net, a Bayes-by-Backprop CNN (plus its
//! deterministic twin) and a U-Net adapted for classification.
//!
//! A [`Model`] is a [`ModelSpec`] plus named parameters. Forward passes are
//! built on a caller-owned [`Graph`], so the same code serves training,
//! inference and Grad-CAM.

mod checkpoint;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::bayes::{self, BayesVars, Noise, PriorConfig, RHO_INIT};
use crate::error::{invalid, shape_err, Result};
use crate::nn::{self, Mode, BN_EPS, BN_MOMENTUM};
use crate::rng::SeededRng;
use crate::tensor::{BatchStats, Graph, Padding, PoolMode, Tensor, Var};

pub use checkpoint::{CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// Conv -> batchnorm -> LeakyReLU -> average-pool blocks, two dense layers.
    AddNet,
    /// Local-reparameterization conv blocks with max pooling and a Bayesian
    /// dense head.
    BayesCnn,
    /// The deterministic layout of `BayesCnn` with point weights.
    Cnn,
    /// Encoder/decoder with skip concatenation, global pooling and a dense head.
    Unet,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::AddNet => "addnet",
            Architecture::BayesCnn => "bayescnn",
            Architecture::Cnn => "cnn",
            Architecture::Unet => "unet",
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Architecture {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "addnet" | "add-net" => Ok(Architecture::AddNet),
            "bayescnn" | "bayes-cnn" => Ok(Architecture::BayesCnn),
            "cnn" => Ok(Architecture::Cnn),
            "unet" | "unet_classifier" | "u-net" => Ok(Architecture::Unet),
            _ => Err(invalid!(
                "unknown architecture {s:?} (expected addnet, bayescnn, cnn or unet)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    /// `[H, W, C]`.
    pub input_shape: [usize; 3],
    pub n_classes: usize,
    /// Filters per conv block; for U-Net the encoder filters per depth
    /// level (the bottleneck doubles the last).
    pub filters: Vec<usize>,
    pub kernel_size: usize,
    pub padding: Padding,
    /// ADD-Net hidden dense width.
    pub dense_units: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
    /// U-Net skip concatenation; off for ablations.
    pub skip_connections: bool,
    pub rho_init: f64,
    pub prior: PriorConfig,
}

impl ModelSpec {
    fn base(architecture: Architecture, input_shape: [usize; 3], n_classes: usize) -> Self {
        Self {
            architecture,
            input_shape,
            n_classes,
            filters: vec![16, 32, 64, 128],
            kernel_size: 3,
            padding: Padding::Valid,
            dense_units: 128,
            dropout: 0.3,
            leaky_slope: nn::LEAKY_SLOPE,
            skip_connections: true,
            rho_init: RHO_INIT,
            prior: PriorConfig::StandardNormal,
        }
    }

    pub fn addnet(input_shape: [usize; 3], n_classes: usize) -> Self {
        Self::base(Architecture::AddNet, input_shape, n_classes)
    }

    pub fn bayescnn(input_shape: [usize; 3], n_classes: usize) -> Self {
        Self {
            filters: vec![16, 32, 64],
            dropout: 0.0,
            ..Self::base(Architecture::BayesCnn, input_shape, n_classes)
        }
    }

    pub fn cnn(input_shape: [usize; 3], n_classes: usize) -> Self {
        Self {
            architecture: Architecture::Cnn,
            ..Self::bayescnn(input_shape, n_classes)
        }
    }

    pub fn unet(input_shape: [usize; 3], n_classes: usize) -> Self {
        Self {
            filters: vec![16, 32, 64],
            padding: Padding::Same,
            ..Self::base(Architecture::Unet, input_shape, n_classes)
        }
    }

    pub fn for_architecture(arch: Architecture, input_shape: [usize; 3], n_classes: usize) -> Self {
        match arch {
            Architecture::AddNet => Self::addnet(input_shape, n_classes),
            Architecture::BayesCnn => Self::bayescnn(input_shape, n_classes),
            Architecture::Cnn => Self::cnn(input_shape, n_classes),
            Architecture::Unet => Self::unet(input_shape, n_classes),
        }
    }

    pub fn is_bayesian(&self) -> bool {
        self.architecture == Architecture::BayesCnn
    }

    fn conv_out(&self, d: usize) -> Option<usize> {
        match self.padding {
            Padding::Same => Some(d),
            Padding::Valid => d.checked_sub(self.kernel_size).map(|v| v + 1).filter(|&v| v > 0),
        }
    }

    /// Validate and return the flattened feature width feeding the head.
    fn head_inputs(&self) -> Result<usize> {
        let [h, w, c] = self.input_shape;
        if self.n_classes < 2 {
            return Err(invalid!("a classifier needs at least 2 classes"));
        }
        if h == 0 || w == 0 || c == 0 || self.kernel_size == 0 {
            return Err(invalid!("input dims and kernel size must be positive"));
        }
        if self.filters.is_empty() || self.filters.contains(&0) {
            return Err(invalid!("every block needs at least one filter"));
        }
        nn::check_rate(self.dropout)?;
        nn::check_slope(self.leaky_slope)?;
        self.prior.validate()?;
        if self.architecture == Architecture::Unet {
            let f = 1usize << self.filters.len();
            if h % f != 0 || w % f != 0 {
                return Err(shape_err!(
                    "U-Net of depth {} needs input dims divisible by {f}, got {h}x{w}",
                    self.filters.len()
                ));
            }
            if self.padding != Padding::Same {
                return Err(invalid!("U-Net requires same padding"));
            }
            return Ok(self.filters[0]);
        }
        let (mut h, mut w) = (h, w);
        for (i, _) in self.filters.iter().enumerate() {
            let too_small = || shape_err!("input {:?} too small for block {}", self.input_shape, i + 1);
            h = self.conv_out(h).ok_or_else(too_small)?;
            w = self.conv_out(w).ok_or_else(too_small)?;
            if h < 2 || w < 2 {
                return Err(too_small());
            }
            h /= 2;
            w /= 2;
        }
        Ok(h * w * self.filters.last().unwrap())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    /// Buffers (batchnorm running statistics) are not trainable.
    pub trainable: bool,
}

pub type ParamStore = IndexMap<String, Param>;

/// Options for a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunOptions {
    pub mode: Mode,
    pub noise: Noise,
    /// Bind parameters as gradient-requiring leaves.
    pub track_params: bool,
}

impl RunOptions {
    pub fn train() -> Self {
        Self {
            mode: Mode::Train,
            noise: Noise::Sample,
            track_params: true,
        }
    }

    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            noise: Noise::Sample,
            track_params: false,
        }
    }
}

/// Handles produced by [`Model::forward`].
#[derive(Debug)]
pub struct Forward {
    pub logits: Var,
    pub probs: Var,
    /// Total KL of all posteriors (Bayesian models only).
    pub kl: Option<Var>,
    /// Trainable parameters, by name.
    pub params: IndexMap<String, Var>,
    /// Post-activation outputs of every convolutional layer, by layer id.
    pub features: IndexMap<String, Var>,
    /// Batch statistics of training-mode batchnorm layers, by layer id.
    pub batch_stats: Vec<(String, BatchStats)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamStore,
}

struct Ctx<'a> {
    g: &'a mut Graph,
    opts: RunOptions,
    rng: &'a mut SeededRng,
    out: Forward,
    kl_terms: Vec<Var>,
}

impl Ctx<'_> {
    fn p(&mut self, model: &Model, name: &str) -> Var {
        if let Some(&v) = self.out.params.get(name) {
            return v;
        }
        let value = model.params[name].value.clone();
        let v = if self.opts.track_params {
            self.g.param(value)
        } else {
            self.g.constant(value)
        };
        self.out.params.insert(name.to_string(), v);
        v
    }

    fn bayes_vars(&mut self, model: &Model, layer: &str) -> BayesVars {
        BayesVars {
            w_mu: self.p(model, &format!("{layer}.w_mu")),
            w_rho: self.p(model, &format!("{layer}.w_rho")),
            b_mu: self.p(model, &format!("{layer}.b_mu")),
            b_rho: self.p(model, &format!("{layer}.b_rho")),
        }
    }

    fn conv(&mut self, model: &Model, layer: &str, x: Var) -> Result<Var> {
        let (w, b) = (
            self.p(model, &format!("{layer}.w")),
            self.p(model, &format!("{layer}.b")),
        );
        let y = self.g.conv2d(x, w, 1, model.spec.padding)?;
        self.g.add_bias(y, b)
    }

    fn dense(&mut self, model: &Model, layer: &str, x: Var) -> Result<Var> {
        let (w, b) = (
            self.p(model, &format!("{layer}.w")),
            self.p(model, &format!("{layer}.b")),
        );
        let y = self.g.matmul(x, w)?;
        self.g.add_bias(y, b)
    }

    fn bayes_conv(&mut self, model: &Model, layer: &str, x: Var) -> Result<Var> {
        let v = self.bayes_vars(model, layer);
        self.add_kl(model, &v)?;
        bayes::lrt_conv_var(self.g, x, &v, 1, model.spec.padding, self.opts.noise, self.rng)
    }

    fn bayes_dense(&mut self, model: &Model, layer: &str, x: Var) -> Result<Var> {
        let v = self.bayes_vars(model, layer);
        self.add_kl(model, &v)?;
        bayes::lrt_dense_var(self.g, x, &v, self.opts.noise, self.rng)
    }

    fn add_kl(&mut self, model: &Model, v: &BayesVars) -> Result<()> {
        let prior = model.spec.prior;
        let kw = bayes::kl_var(self.g, v.w_mu, v.w_rho, &prior, self.rng)?;
        let kb = bayes::kl_var(self.g, v.b_mu, v.b_rho, &prior, self.rng)?;
        self.kl_terms.push(kw);
        self.kl_terms.push(kb);
        Ok(())
    }

    fn batchnorm(&mut self, model: &Model, layer: &str, x: Var) -> Result<Var> {
        let gamma = self.p(model, &format!("{layer}.gamma"));
        let beta = self.p(model, &format!("{layer}.beta"));
        match self.opts.mode {
            Mode::Train => {
                let (y, stats) = self.g.batch_norm(x, gamma, beta, BN_EPS)?;
                self.out.batch_stats.push((layer.to_string(), stats));
                Ok(y)
            }
            Mode::Eval => {
                let mean = model.params[&format!("{layer}.running_mean")].value.data();
                let var = model.params[&format!("{layer}.running_var")].value.data();
                self.g.channel_affine(x, gamma, beta, mean, var, BN_EPS)
            }
        }
    }

    fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.g.shape(x).to_vec();
        self.g.reshape(x, &[s[0], s[1..].iter().product()])
    }
}

impl Model {
    /// Build and initialize a model; all initial values derive from `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        let head_in = spec.head_inputs()?;
        let mut rng = SeededRng::new(seed).fork("init");
        let mut params = ParamStore::new();
        let k = spec.kernel_size;
        let mut add = |name: String, value: Tensor, trainable: bool| {
            params.insert(name, Param { value, trainable });
        };
        let c_in = spec.input_shape[2];
        match spec.architecture {
            Architecture::AddNet => {
                let mut c = c_in;
                for (i, &f) in spec.filters.iter().enumerate() {
                    let (conv, bn) = (format!("conv{}", i + 1), format!("bn{}", i + 1));
                    add(
                        format!("{conv}.w"),
                        nn::he_uniform(&[k, k, c, f], k * k * c, &mut rng),
                        true,
                    );
                    add(format!("{conv}.b"), Tensor::zeros([f]), true);
                    add(format!("{bn}.gamma"), Tensor::ones([f]), true);
                    add(format!("{bn}.beta"), Tensor::zeros([f]), true);
                    add(format!("{bn}.running_mean"), Tensor::zeros([f]), false);
                    add(format!("{bn}.running_var"), Tensor::ones([f]), false);
                    c = f;
                }
                let u = spec.dense_units;
                add(
                    "dense1.w".into(),
                    nn::he_uniform(&[head_in, u], head_in, &mut rng),
                    true,
                );
                add("dense1.b".into(), Tensor::zeros([u]), true);
                add(
                    "dense2.w".into(),
                    nn::he_uniform(&[u, spec.n_classes], u, &mut rng),
                    true,
                );
                add("dense2.b".into(), Tensor::zeros([spec.n_classes]), true);
            }
            Architecture::BayesCnn => {
                let mut c = c_in;
                let mut bayes_layer = |name: String, w_shape: &[usize], fan_in: usize, rng: &mut SeededRng| {
                    let out = *w_shape.last().unwrap();
                    let w = bayes::GaussianPosterior::init(w_shape, fan_in, spec.rho_init, rng);
                    let b = bayes::GaussianPosterior::init(&[out], fan_in, spec.rho_init, rng);
                    add(format!("{name}.w_mu"), w.mu, true);
                    add(format!("{name}.w_rho"), w.rho, true);
                    add(format!("{name}.b_mu"), b.mu, true);
                    add(format!("{name}.b_rho"), b.rho, true);
                };
                for (i, &f) in spec.filters.iter().enumerate() {
                    bayes_layer(format!("conv{}", i + 1), &[k, k, c, f], k * k * c, &mut rng);
                    c = f;
                }
                bayes_layer("dense".into(), &[head_in, spec.n_classes], head_in, &mut rng);
            }
            Architecture::Cnn => {
                let mut c = c_in;
                for (i, &f) in spec.filters.iter().enumerate() {
                    let conv = format!("conv{}", i + 1);
                    add(
                        format!("{conv}.w"),
                        nn::he_uniform(&[k, k, c, f], k * k * c, &mut rng),
                        true,
                    );
                    add(format!("{conv}.b"), Tensor::zeros([f]), true);
                    c = f;
                }
                add(
                    "dense.w".into(),
                    nn::he_uniform(&[head_in, spec.n_classes], head_in, &mut rng),
                    true,
                );
                add("dense.b".into(), Tensor::zeros([spec.n_classes]), true);
            }
            Architecture::Unet => {
                let mut conv = |name: String, c: usize, f: usize, rng: &mut SeededRng| {
                    add(format!("{name}.w"), nn::he_uniform(&[k, k, c, f], k * k * c, rng), true);
                    add(format!("{name}.b"), Tensor::zeros([f]), true);
                };
                let mut c = c_in;
                for (i, &f) in spec.filters.iter().enumerate() {
                    conv(format!("enc{}", i + 1), c, f, &mut rng);
                    c = f;
                }
                let bottleneck = 2 * c;
                conv("bottleneck".into(), c, bottleneck, &mut rng);
                c = bottleneck;
                for (j, &f) in spec.filters.iter().rev().enumerate() {
                    let c_in = if spec.skip_connections { c + f } else { c };
                    conv(format!("dec{}", j + 1), c_in, f, &mut rng);
                    c = f;
                }
                add(
                    "dense.w".into(),
                    nn::he_uniform(&[c, spec.n_classes], c, &mut rng),
                    true,
                );
                add("dense.b".into(), Tensor::zeros([spec.n_classes]), true);
            }
        }
        Ok(Self { spec, params })
    }

    pub fn n_classes(&self) -> usize {
        self.spec.n_classes
    }

    pub fn is_bayesian(&self) -> bool {
        self.spec.is_bayesian()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Ids of the convolutional layers in forward order; Grad-CAM targets.
    pub fn conv_layers(&self) -> Vec<String> {
        let n = self.spec.filters.len();
        match self.spec.architecture {
            Architecture::Unet => (1..=n)
                .map(|i| format!("enc{i}"))
                .chain(std::iter::once("bottleneck".to_string()))
                .chain((1..=n).map(|i| format!("dec{i}")))
                .collect(),
            _ => (1..=n).map(|i| format!("conv{i}")).collect(),
        }
    }

    pub fn last_conv_layer(&self) -> String {
        self.conv_layers().pop().expect("at least one conv layer")
    }

    /// Forward pass for a batch `x: [N,H,W,C]`.
    pub fn forward(&self, g: &mut Graph, x: Var, opts: RunOptions, rng: &mut SeededRng) -> Result<Forward> {
        let want = self.spec.input_shape;
        let s = g.shape(x);
        if s.len() != 4 || s[1..] != want {
            return Err(shape_err!(
                "model expects [N,{},{},{}] input, got {s:?}",
                want[0],
                want[1],
                want[2]
            ));
        }
        let mut ctx = Ctx {
            g,
            opts,
            rng,
            out: Forward {
                logits: x,
                probs: x,
                kl: None,
                params: IndexMap::new(),
                features: IndexMap::new(),
                batch_stats: Vec::new(),
            },
            kl_terms: Vec::new(),
        };
        let logits = match self.spec.architecture {
            Architecture::AddNet => self.addnet(&mut ctx, x)?,
            Architecture::BayesCnn | Architecture::Cnn => self.cnn(&mut ctx, x)?,
            Architecture::Unet => self.unet(&mut ctx, x)?,
        };
        let probs = ctx.g.softmax(logits);
        let mut kl = None;
        for t in std::mem::take(&mut ctx.kl_terms) {
            kl = Some(match kl {
                None => t,
                Some(acc) => ctx.g.add(acc, t)?,
            });
        }
        let mut out = ctx.out;
        out.logits = logits;
        out.probs = probs;
        out.kl = kl;
        // only trainable parameters are exposed
        out.params.retain(|name, _| self.params[name].trainable);
        Ok(out)
    }

    fn addnet(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let spec = &self.spec;
        let mut h = x;
        for i in 1..=spec.filters.len() {
            h = ctx.conv(self, &format!("conv{i}"), h)?;
            h = ctx.batchnorm(self, &format!("bn{i}"), h)?;
            h = ctx.g.leaky_relu(h, spec.leaky_slope);
            ctx.out.features.insert(format!("conv{i}"), h);
            h = ctx.g.pool2d(h, 2, PoolMode::Avg)?;
        }
        h = nn::dropout_var(ctx.g, h, spec.dropout, ctx.opts.mode, ctx.rng)?;
        h = ctx.flatten(h)?;
        h = ctx.dense(self, "dense1", h)?;
        h = ctx.g.leaky_relu(h, spec.leaky_slope);
        h = nn::dropout_var(ctx.g, h, spec.dropout, ctx.opts.mode, ctx.rng)?;
        ctx.dense(self, "dense2", h)
    }

    fn cnn(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let bayesian = self.is_bayesian();
        let mut h = x;
        for i in 1..=self.spec.filters.len() {
            let name = format!("conv{i}");
            h = if bayesian {
                ctx.bayes_conv(self, &name, h)?
            } else {
                ctx.conv(self, &name, h)?
            };
            h = ctx.g.relu(h);
            ctx.out.features.insert(name, h);
            h = ctx.g.pool2d(h, 2, PoolMode::Max)?;
        }
        h = nn::dropout_var(ctx.g, h, self.spec.dropout, ctx.opts.mode, ctx.rng)?;
        h = ctx.flatten(h)?;
        if bayesian {
            ctx.bayes_dense(self, "dense", h)
        } else {
            ctx.dense(self, "dense", h)
        }
    }

    fn unet(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let n = self.spec.filters.len();
        let mut skips = Vec::with_capacity(n);
        let mut h = x;
        for i in 1..=n {
            let name = format!("enc{i}");
            h = ctx.conv(self, &name, h)?;
            h = ctx.g.relu(h);
            ctx.out.features.insert(name, h);
            skips.push(h);
            h = ctx.g.pool2d(h, 2, PoolMode::Max)?;
        }
        h = ctx.conv(self, "bottleneck", h)?;
        h = ctx.g.relu(h);
        ctx.out.features.insert("bottleneck".into(), h);
        for j in 1..=n {
            h = ctx.g.upsample(h, 2)?;
            let skip = skips.pop().expect("one skip per level");
            if self.spec.skip_connections {
                h = ctx.g.concat_last(h, skip)?;
            }
            let name = format!("dec{j}");
            h = ctx.conv(self, &name, h)?;
            h = ctx.g.relu(h);
            ctx.out.features.insert(name, h);
        }
        h = ctx.g.global_avg_pool(h)?;
        h = nn::dropout_var(ctx.g, h, self.spec.dropout, ctx.opts.mode, ctx.rng)?;
        ctx.dense(self, "dense", h)
    }

    /// Fold training-mode batch statistics into the running averages.
    pub fn apply_batch_stats(&mut self, stats: &[(String, BatchStats)]) {
        for (layer, s) in stats {
            let mut mean = self.params[&format!("{layer}.running_mean")].value.data().to_vec();
            let mut var = self.params[&format!("{layer}.running_var")].value.data().to_vec();
            nn::update_running(&mut mean, &mut var, &s.mean, &s.var, BN_MOMENTUM);
            self.params[&format!("{layer}.running_mean")]
                .value
                .data_mut()
                .copy_from_slice(&mean);
            self.params[&format!("{layer}.running_var")]
                .value
                .data_mut()
                .copy_from_slice(&var);
        }
    }

    /// Class probabilities for `images: [N,H,W,C]` in evaluation mode.
    ///
    /// Bayesian models average the softmax over `samples` stochastic passes
    /// (or use a single mean-weight pass when `noise` is [`Noise::Mean`]).
    pub fn predict_proba(
        &self,
        images: &Tensor,
        batch_size: usize,
        samples: usize,
        noise: Noise,
        seed: u64,
    ) -> Result<Tensor> {
        if batch_size == 0 || samples == 0 {
            return Err(invalid!("batch size and sample count must be positive"));
        }
        let n = images.shape().first().copied().unwrap_or(0);
        let passes = if self.is_bayesian() && noise == Noise::Sample {
            samples
        } else {
            1
        };
        let mut rng = SeededRng::new(seed).fork("predict");
        let mut out = Vec::with_capacity(n * self.n_classes());
        let opts = RunOptions {
            noise,
            ..RunOptions::eval()
        };
        for start in (0..n).step_by(batch_size) {
            let idx: Vec<usize> = (start..(start + batch_size).min(n)).collect();
            let xb = images.select_outer(&idx)?;
            let mut acc = vec![0.0; idx.len() * self.n_classes()];
            for _ in 0..passes {
                let mut g = Graph::new();
                let x = g.constant(xb.clone());
                let f = self.forward(&mut g, x, opts, &mut rng)?;
                for (a, p) in acc.iter_mut().zip(g.value(f.probs).data()) {
                    *a += p;
                }
            }
            out.extend(acc.into_iter().map(|v| v / passes as f64));
        }
        Tensor::new([n, self.n_classes()], out)
    }

    /// Deterministic CNN whose weights are this Bayesian model's means.
    pub fn mean_network(&self) -> Result<Model> {
        if !self.is_bayesian() {
            return Err(invalid!("mean_network needs a Bayesian model"));
        }
        let spec = ModelSpec {
            architecture: Architecture::Cnn,
            ..self.spec.clone()
        };
        let mut params = ParamStore::new();
        for (name, p) in &self.params {
            if let Some(base) = name.strip_suffix("_mu") {
                params.insert(base.to_string(), p.clone());
            }
        }
        Ok(Model { spec, params })
    }

    /// Set every posterior spread to exactly zero (`softplus(rho)` underflows).
    pub fn collapse_variance(&mut self) {
        for (name, p) in self.params.iter_mut() {
            if name.ends_with("_rho") {
                p.value = Tensor::full(p.value.shape().to_vec(), -750.0);
            }
        }
    }
}
