//! Finite-difference checks for every differentiable op, every layer and
//! tiny configurations of each architecture.

use admri::bayes::{kl_var, lrt_conv_var, lrt_dense_var, BayesVars, Noise, PriorConfig};
use admri::data::one_hot;
use admri::models::{Architecture, Model, ModelSpec, RunOptions};
use admri::nn::{dropout_var, Mode};
use admri::tensor::gradcheck::{check, relative_error, FLOOR, STEP};
use admri::tensor::{Padding, PoolMode};
use admri::{Graph, Result, SeededRng, Tensor, Var};

const TOL: f64 = 1e-5;

fn rand(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = SeededRng::new(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_range(lo, hi)).collect()).unwrap()
}

/// Contract `x` with fixed random weights so every element matters.
fn project(g: &mut Graph, x: Var) -> Result<Var> {
    let n = g.value(x).numel();
    let mut rng = SeededRng::new(99);
    let w = (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    let y = g.mul_const(x, w)?;
    Ok(g.sum(y))
}

fn assert_ok(name: &str, inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) {
    let r = check(inputs, f).unwrap();
    assert!(r.checked > 0);
    assert!(
        r.max_rel_error <= TOL,
        "{name}: max rel error {:e} at {:?}",
        r.max_rel_error,
        r.worst
    );
}

#[test]
fn elementwise_ops() {
    let a = rand(&[3, 4], -2.0, 2.0, 1);
    let b = rand(&[3, 4], -2.0, 2.0, 2);
    let pos = rand(&[3, 4], 0.2, 3.0, 3);
    assert_ok("add", &[a.clone(), b.clone()], |g, v| {
        let y = g.add(v[0], v[1])?;
        project(g, y)
    });
    assert_ok("sub", &[a.clone(), b.clone()], |g, v| {
        let y = g.sub(v[0], v[1])?;
        project(g, y)
    });
    assert_ok("mul", &[a.clone(), b.clone()], |g, v| {
        let y = g.mul(v[0], v[1])?;
        project(g, y)
    });
    assert_ok("scale", std::slice::from_ref(&a), |g, v| {
        let y = g.scale(v[0], -1.7);
        project(g, y)
    });
    assert_ok("softplus", std::slice::from_ref(&a), |g, v| {
        let y = g.softplus(v[0], 1.5);
        project(g, y)
    });
    assert_ok("square", std::slice::from_ref(&a), |g, v| {
        let y = g.square(v[0]);
        project(g, y)
    });
    assert_ok("sqrt", std::slice::from_ref(&pos), |g, v| {
        let y = g.sqrt(v[0]);
        project(g, y)
    });
    assert_ok("log", std::slice::from_ref(&pos), |g, v| {
        let y = g.log(v[0], 1e-12);
        project(g, y)
    });
    assert_ok("mean", std::slice::from_ref(&a), |g, v| {
        let y = g.square(v[0]);
        Ok(g.mean(y))
    });
}

#[test]
fn piecewise_activations_away_from_kinks() {
    // magnitudes in [0.1, 2] keep every entry far from the kink at 0
    let mut x = rand(&[4, 5], 0.1, 2.0, 4);
    let signs = rand(&[4, 5], -1.0, 1.0, 5);
    for (v, s) in x.data_mut().iter_mut().zip(signs.data()) {
        *v *= s.signum();
    }
    assert_ok("relu", &[x.clone()], |g, v| {
        let y = g.relu(v[0]);
        project(g, y)
    });
    assert_ok("leaky_relu", &[x.clone()], |g, v| {
        let y = g.leaky_relu(v[0], 0.01);
        project(g, y)
    });
}

#[test]
fn linear_algebra_and_shape_ops() {
    let a = rand(&[3, 4], -1.0, 1.0, 6);
    let w = rand(&[4, 5], -1.0, 1.0, 7);
    let b = rand(&[5], -1.0, 1.0, 8);
    assert_ok("matmul+bias", &[a.clone(), w, b], |g, v| {
        let y = g.matmul(v[0], v[1])?;
        let y = g.add_bias(y, v[2])?;
        project(g, y)
    });
    assert_ok("mul_const", std::slice::from_ref(&a), |g, v| {
        let y = g.mul_const(v[0], (0..12).map(|i| i as f64 - 5.0).collect())?;
        project(g, y)
    });
    assert_ok("reshape", std::slice::from_ref(&a), |g, v| {
        let y = g.reshape(v[0], &[2, 6])?;
        let y = g.square(y);
        project(g, y)
    });
    let p = rand(&[1, 3, 3, 2], -1.0, 1.0, 9);
    let q = rand(&[1, 3, 3, 3], -1.0, 1.0, 10);
    assert_ok("concat_last", &[p.clone(), q], |g, v| {
        let y = g.concat_last(v[0], v[1])?;
        let y = g.square(y);
        project(g, y)
    });
    assert_ok("upsample", &[p], |g, v| {
        let y = g.upsample(v[0], 2)?;
        let y = g.square(y);
        project(g, y)
    });
}

#[test]
fn convolutions() {
    let x = rand(&[2, 6, 5, 2], -1.0, 1.0, 11);
    let k = rand(&[3, 3, 2, 3], -1.0, 1.0, 12);
    for (stride, padding) in [
        (1, Padding::Valid),
        (1, Padding::Same),
        (2, Padding::Valid),
        (2, Padding::Same),
    ] {
        assert_ok(
            &format!("conv2d s{stride} {padding:?}"),
            &[x.clone(), k.clone()],
            |g, v| {
                let y = g.conv2d(v[0], v[1], stride, padding)?;
                project(g, y)
            },
        );
    }
}

#[test]
fn pooling() {
    // distinct values keep max-pool argmaxes stable under the probe step
    let mut x = Tensor::new([2, 4, 6, 2], (0..96).map(|i| ((i * 37) % 96) as f64 * 0.05).collect()).unwrap();
    let jitter = rand(&[2, 4, 6, 2], -0.01, 0.01, 13);
    for (v, j) in x.data_mut().iter_mut().zip(jitter.data()) {
        *v += j;
    }
    for mode in [PoolMode::Max, PoolMode::Avg] {
        assert_ok(&format!("pool {mode:?}"), &[x.clone()], |g, v| {
            let y = g.pool2d(v[0], 2, mode)?;
            project(g, y)
        });
    }
    assert_ok("global_avg_pool", &[x], |g, v| {
        let y = g.global_avg_pool(v[0])?;
        project(g, y)
    });
}

#[test]
fn softmax_and_cross_entropy() {
    let z = rand(&[3, 4], -2.0, 2.0, 14);
    assert_ok("softmax", std::slice::from_ref(&z), |g, v| {
        let y = g.softmax(v[0]);
        project(g, y)
    });
    let t = one_hot(&[0, 3, 1], 4).unwrap();
    assert_ok("softmax+cross_entropy", &[z], |g, v| {
        let p = g.softmax(v[0]);
        g.cross_entropy(p, &t, 1e-12, 1.0 / 3.0)
    });
}

#[test]
fn batchnorm_train_and_eval() {
    let x = rand(&[3, 2, 2, 3], -1.0, 2.0, 15);
    let gamma = rand(&[3], 0.5, 1.5, 16);
    let beta = rand(&[3], -0.5, 0.5, 17);
    assert_ok("batch_norm", &[x.clone(), gamma.clone(), beta.clone()], |g, v| {
        let (y, _) = g.batch_norm(v[0], v[1], v[2], 1e-5)?;
        project(g, y)
    });
    assert_ok("channel_affine", &[x, gamma, beta], |g, v| {
        let y = g.channel_affine(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[1.5, 0.7, 2.0], 1e-5)?;
        project(g, y)
    });
}

#[test]
fn dropout_with_frozen_mask() {
    let x = rand(&[4, 6], -1.0, 1.0, 18);
    assert_ok("dropout", &[x], |g, v| {
        let mut rng = SeededRng::new(3);
        let y = dropout_var(g, v[0], 0.3, Mode::Train, &mut rng)?;
        project(g, y)
    });
}

#[test]
fn kl_terms() {
    let mu = rand(&[7], -1.0, 1.0, 19);
    let rho = rand(&[7], -3.0, 0.5, 20);
    assert_ok("kl_gaussian", &[mu.clone(), rho.clone()], |g, v| {
        g.kl_gaussian(v[0], v[1], 0.0, 1.0)
    });
    let prior = PriorConfig::ScaleMixture {
        pi: 0.5,
        sigma1: 1.0,
        sigma2: 0.1,
    };
    assert_ok("kl_sampled", &[mu, rho], |g, v| {
        let mut rng = SeededRng::new(4);
        kl_var(g, v[0], v[1], &prior, &mut rng)
    });
}

#[test]
fn bayesian_layers_with_frozen_noise() {
    let a = rand(&[3, 4], -1.0, 1.0, 21);
    let w_mu = rand(&[4, 2], -0.5, 0.5, 22);
    let w_rho = rand(&[4, 2], -3.0, 0.0, 23);
    let b_mu = rand(&[2], -0.5, 0.5, 24);
    let b_rho = rand(&[2], -3.0, 0.0, 25);
    assert_ok("lrt_dense", &[a, w_mu, w_rho, b_mu, b_rho], |g, v| {
        let mut rng = SeededRng::new(5);
        let p = BayesVars {
            w_mu: v[1],
            w_rho: v[2],
            b_mu: v[3],
            b_rho: v[4],
        };
        let y = lrt_dense_var(g, v[0], &p, Noise::Sample, &mut rng)?;
        project(g, y)
    });
    let x = rand(&[2, 5, 5, 2], -1.0, 1.0, 26);
    let k_mu = rand(&[3, 3, 2, 2], -0.5, 0.5, 27);
    let k_rho = rand(&[3, 3, 2, 2], -3.0, 0.0, 28);
    let kb_mu = rand(&[2], -0.5, 0.5, 29);
    let kb_rho = rand(&[2], -3.0, 0.0, 30);
    for padding in [Padding::Valid, Padding::Same] {
        assert_ok(
            "lrt_conv",
            &[x.clone(), k_mu.clone(), k_rho.clone(), kb_mu.clone(), kb_rho.clone()],
            |g, v| {
                let mut rng = SeededRng::new(6);
                let p = BayesVars {
                    w_mu: v[1],
                    w_rho: v[2],
                    b_mu: v[3],
                    b_rho: v[4],
                };
                let y = lrt_conv_var(g, v[0], &p, 1, padding, Noise::Sample, &mut rng)?;
                project(g, y)
            },
        );
    }
}

/// Loss of a whole model; noise and dropout come from a fixed seed.
fn model_loss(
    model: &Model,
    x: &Tensor,
    targets: &Tensor,
    mode: Mode,
    track: bool,
) -> (Graph, Var, Vec<(String, Var)>) {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let opts = RunOptions {
        mode,
        noise: Noise::Sample,
        track_params: track,
    };
    let mut rng = SeededRng::new(11);
    let f = model.forward(&mut g, xv, opts, &mut rng).unwrap();
    let mut loss = g.cross_entropy(f.probs, targets, 1e-12, 1.0).unwrap();
    if let Some(kl) = f.kl {
        let kl = g.scale(kl, 0.01);
        loss = g.add(loss, kl).unwrap();
    }
    let params = f.params.into_iter().collect();
    (g, loss, params)
}

fn check_model(spec: ModelSpec, mode: Mode, seed: u64) {
    let model = Model::new(spec.clone(), seed).unwrap();
    let [h, w, c] = spec.input_shape;
    let x = rand(&[3, h, w, c], 0.0, 1.0, seed + 100);
    let targets = one_hot(&[0, 1, 2 % spec.n_classes], spec.n_classes).unwrap();
    let (mut g, loss, params) = model_loss(&model, &x, &targets, mode, true);
    let grads = g.backward(loss).unwrap();
    let eval = |m: &Model| {
        let (g, loss, _) = model_loss(m, &x, &targets, mode, false);
        g.value(loss).item().unwrap()
    };
    let mut worst = (0.0, String::new());
    let mut probe = model.clone();
    for (name, var) in &params {
        let analytic = grads.get(*var).unwrap().data().to_vec();
        for (j, &an) in analytic.iter().enumerate() {
            let orig = model.params[name].value.data()[j];
            probe.params[name].value.data_mut()[j] = orig + STEP;
            let plus = eval(&probe);
            probe.params[name].value.data_mut()[j] = orig - STEP;
            let minus = eval(&probe);
            probe.params[name].value.data_mut()[j] = orig;
            let err = relative_error(an, (plus - minus) / (2.0 * STEP), FLOOR);
            if err > worst.0 {
                worst = (err, format!("{name}[{j}]"));
            }
        }
    }
    assert!(
        worst.0 <= TOL,
        "{:?}: max rel error {:e} at {}",
        spec.architecture,
        worst.0,
        worst.1
    );
}

#[test]
fn tiny_addnet() {
    let mut spec = ModelSpec::addnet([16, 16, 1], 3);
    spec.filters = vec![2, 3, 3, 2];
    spec.padding = Padding::Same;
    spec.dense_units = 4;
    check_model(spec.clone(), Mode::Train, 1);
    check_model(spec, Mode::Eval, 2);
}

#[test]
fn tiny_bayescnn_and_twin() {
    let mut spec = ModelSpec::bayescnn([8, 8, 1], 3);
    spec.filters = vec![2, 3, 2];
    spec.padding = Padding::Same;
    check_model(spec.clone(), Mode::Train, 3);
    spec.architecture = Architecture::Cnn;
    check_model(spec, Mode::Train, 4);
}

#[test]
fn tiny_bayescnn_with_mixture_prior() {
    let mut spec = ModelSpec::bayescnn([8, 8, 1], 2);
    spec.filters = vec![2, 2, 2];
    spec.padding = Padding::Same;
    spec.prior = PriorConfig::ScaleMixture {
        pi: 0.25,
        sigma1: 1.0,
        sigma2: 0.05,
    };
    check_model(spec, Mode::Train, 5);
}

#[test]
fn tiny_unet() {
    let mut spec = ModelSpec::unet([8, 8, 1], 3);
    spec.filters = vec![2, 2, 3];
    spec.dropout = 0.0;
    check_model(spec, Mode::Train, 6);
}
