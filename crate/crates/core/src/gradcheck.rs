//! Central finite-difference checks of every analytic gradient.
//!
//! Each check builds a random instance, contracts the output with a random
//! probe vector to get a scalar, and compares the backward pass against
//! `(f(x+h) - f(x-h)) / 2h` on a sample of coordinates.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::losses::{bce_loss, nt_xent_loss, TemperatureState};
use crate::nn::layers::{
    avg_pool2, avg_pool2_backward, global_avg_pool, global_avg_pool_backward, relu, relu_backward,
};
use crate::nn::{BatchNorm, Conv2d, Dense, FusionMode, Mode, ModelConfig, ModelParams, ResidualBlock, Tensor, VisualConfig};
use crate::rng::{self, Stream};

pub const STEP: f64 = 1e-5;
/// Denominator floor so that gradients that are zero up to round-off do
/// not produce spurious relative errors.
pub const REL_FLOOR: f64 = 1e-4;
/// Coordinates sampled per tensor.
const COORDS_PER_TENSOR: usize = 12;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn central_difference(mut f: impl FnMut(f64) -> f64, x0: f64, h: f64) -> f64 {
    (f(x0 + h) - f(x0 - h)) / (2.0 * h)
}

/// Relative disagreement between central differences at `h` and `h/2`
/// above which the probe is taken to straddle a ReLU kink. On a smooth
/// function the two agree to `O(h^2)`.
const KINK_TOLERANCE: f64 = 1e-5;

/// Central difference, or `None` at a non-differentiable point.
fn fd_probe(mut f: impl FnMut(f64) -> f64, x0: f64, h: f64) -> Option<f64> {
    let full = (f(x0 + h) - f(x0 - h)) / (2.0 * h);
    let half = (f(x0 + h / 2.0) - f(x0 - h / 2.0)) / h;
    let scale = full.abs().max(half.abs()).max(1e-3);
    if (full - half).abs() > KINK_TOLERANCE * scale {
        None
    } else {
        Some(full)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub instances: usize,
    pub coordinates: usize,
    /// Coordinates skipped because the probe straddled a ReLU kink.
    pub kinks: usize,
    pub max_rel_err: f64,
}

#[derive(Default)]
struct Tally {
    coords: usize,
    kinks: usize,
    max_err: f64,
}

impl Tally {
    fn add(&mut self, analytic: f64, numeric: Option<f64>) {
        let Some(numeric) = numeric else {
            self.kinks += 1;
            return;
        };
        self.coords += 1;
        let e = relative_error(analytic, numeric);
        if e > self.max_err || e.is_nan() {
            self.max_err = if e.is_nan() { f64::INFINITY } else { e };
        }
    }
}

fn randn(shape: &[usize], rng: &mut Stream) -> Tensor {
    let n = shape.iter().product();
    Tensor {
        shape: shape.to_vec(),
        data: (0..n).map(|_| StandardNormal.sample(rng)).collect(),
    }
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
}

fn coords(len: usize, rng: &mut Stream) -> Vec<usize> {
    if len <= COORDS_PER_TENSOR {
        (0..len).collect()
    } else {
        sample(rng, len, COORDS_PER_TENSOR).into_vec()
    }
}

/// Checks `d probe(f(x)) / dx` for a tensor input.
fn check_input(
    tally: &mut Tally,
    x: &Tensor,
    analytic_dx: &Tensor,
    rng: &mut Stream,
    mut f: impl FnMut(&Tensor) -> f64,
) {
    for i in coords(x.len(), rng) {
        let mut xp = x.clone();
        let num = fd_probe(
            |v| {
                xp.data[i] = v;
                f(&xp)
            },
            x.data[i],
            STEP,
        );
        tally.add(analytic_dx.data[i], num);
    }
}

fn check_dense(rng: &mut Stream, tally: &mut Tally) -> Result<()> {
    let (b, i, o) = (rng.random_range(1..5), rng.random_range(1..6), rng.random_range(1..6));
    let layer = Dense {
        weight: randn(&[o, i], rng),
        bias: randn(&[o], rng),
    };
    let x = randn(&[b, i], rng);
    let probe = randn(&[b, o], rng);
    let mut grad = Dense::zeros(i, o);
    let dx = layer.backward(&x, &probe, &mut grad);
    check_input(tally, &x, &dx, rng, |xp| dot(&layer.forward(xp, "d").unwrap(), &probe));
    for (t, g) in [(0usize, &grad.weight), (1, &grad.bias)] {
        for k in coords(g.len(), rng) {
            let mut l = layer.clone();
            let x0 = l.params_mut()[t].data[k];
            let num = fd_probe(
                |v| {
                    l.params_mut()[t].data[k] = v;
                    dot(&l.forward(&x, "d").unwrap(), &probe)
                },
                x0,
                STEP,
            );
            tally.add(g.data[k], num);
        }
    }
    Ok(())
}

fn random_bn(c: usize, rng: &mut Stream) -> BatchNorm {
    let mut bn = BatchNorm::new(c, 0.1, 1e-5);
    bn.gamma = randn(&[c], rng);
    bn.beta = randn(&[c], rng);
    bn.running_mean = randn(&[c], rng);
    bn.running_var.data = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
    bn
}

fn check_batchnorm(rng: &mut Stream, tally: &mut Tally, spatial: bool, mode: Mode) -> Result<()> {
    let c = rng.random_range(1..4);
    let shape = if spatial {
        vec![rng.random_range(2..4), c, rng.random_range(1..4), rng.random_range(1..4)]
    } else {
        vec![rng.random_range(3..6), c]
    };
    let bn = random_bn(c, rng);
    let x = randn(&shape, rng);
    let probe = randn(&shape, rng);
    let (_, cache) = bn.forward(&x, mode, "bn")?;
    let mut grad = BatchNorm::new(c, 0.1, 1e-5);
    grad.gamma.fill(0.0);
    let dx = bn.backward(&cache, &probe, &mut grad);
    let f = |bn: &BatchNorm, x: &Tensor| dot(&bn.forward(x, mode, "bn").unwrap().0, &probe);
    check_input(tally, &x, &dx, rng, |xp| f(&bn, xp));
    for (t, g) in [(0usize, &grad.gamma), (1, &grad.beta)] {
        for k in coords(g.len(), rng) {
            let mut l = bn.clone();
            let x0 = l.params_mut()[t].data[k];
            let num = fd_probe(
                |v| {
                    l.params_mut()[t].data[k] = v;
                    f(&l, &x)
                },
                x0,
                STEP,
            );
            tally.add(g.data[k], num);
        }
    }
    Ok(())
}

fn check_conv(rng: &mut Stream, tally: &mut Tally) -> Result<()> {
    let (c_in, c_out) = (rng.random_range(1..3), rng.random_range(1..4));
    let k = [1, 3][rng.random_range(0..2)];
    let stride = rng.random_range(1..3);
    let padding = rng.random_range(0..2);
    let conv = Conv2d {
        weight: randn(&[c_out, c_in, k, k], rng),
        bias: randn(&[c_out], rng),
        stride,
        padding,
    };
    let (h, w) = (rng.random_range(3..7), rng.random_range(3..7));
    let x = randn(&[2, c_in, h, w], rng);
    let y = conv.forward(&x, "conv")?;
    let probe = randn(&y.shape, rng);
    let mut grad = conv.clone();
    grad.params_mut().into_iter().for_each(|t| t.fill(0.0));
    let dx = conv.backward(&x, &probe, &mut grad);
    check_input(tally, &x, &dx, rng, |xp| dot(&conv.forward(xp, "conv").unwrap(), &probe));
    for (t, g) in [(0usize, &grad.weight), (1, &grad.bias)] {
        for i in coords(g.len(), rng) {
            let mut l = conv.clone();
            let x0 = l.params_mut()[t].data[i];
            let num = fd_probe(
                |v| {
                    l.params_mut()[t].data[i] = v;
                    dot(&l.forward(&x, "conv").unwrap(), &probe)
                },
                x0,
                STEP,
            );
            tally.add(g.data[i], num);
        }
    }
    Ok(())
}

/// Inputs kept away from the ReLU kink so the finite difference never
/// straddles it.
fn away_from_zero(shape: &[usize], rng: &mut Stream) -> Tensor {
    let mut t = randn(shape, rng);
    for v in &mut t.data {
        if v.abs() < 1e-2 {
            *v = if *v < 0.0 { -0.5 } else { 0.5 };
        }
    }
    t
}

fn check_relu(rng: &mut Stream, tally: &mut Tally) -> Result<()> {
    let shape = [rng.random_range(1..4), rng.random_range(1..6)];
    let x = away_from_zero(&shape, rng);
    let probe = randn(&shape, rng);
    let dx = relu_backward(&relu(&x), &probe);
    check_input(tally, &x, &dx, rng, |xp| dot(&relu(xp), &probe));
    Ok(())
}

fn check_pools(rng: &mut Stream, tally: &mut Tally) -> Result<()> {
    let shape = [rng.random_range(1..3), rng.random_range(1..3), rng.random_range(2..6), rng.random_range(2..6)];
    let x = randn(&shape, rng);
    let y = avg_pool2(&x, "pool")?;
    let probe = randn(&y.shape, rng);
    let dx = avg_pool2_backward(&x.shape, &probe);
    check_input(tally, &x, &dx, rng, |xp| dot(&avg_pool2(xp, "pool").unwrap(), &probe));
    let probe = randn(&[shape[0], shape[1]], rng);
    let dx = global_avg_pool_backward(&x.shape, &probe);
    check_input(tally, &x, &dx, rng, |xp| dot(&global_avg_pool(xp, "gap").unwrap(), &probe));
    Ok(())
}

fn check_residual(rng: &mut Stream, tally: &mut Tally) -> Result<()> {
    let c_in = rng.random_range(1..3);
    let (c_out, stride) = if rng.random_bool(0.5) { (c_in, 1) } else { (c_in + 1, 2) };
    let mut block = ResidualBlock::new(c_in, c_out, stride, 0.1, 1e-5, rng);
    for t in block.params_mut() {
        for v in &mut t.data {
            *v += 0.1 * Distribution::<f64>::sample(&StandardNormal, rng);
        }
    }
    let x = randn(&[3, c_in, 4, 4], rng);
    let (y, cache) = block.forward(&x, Mode::Train, "res")?;
    let probe = randn(&y.shape, rng);
    let mut grad = block.clone();
    grad.params_mut().into_iter().for_each(|t| t.fill(0.0));
    let dx = block.backward(&cache, &probe, &mut grad);
    let f = |b: &ResidualBlock, x: &Tensor| dot(&b.forward(x, Mode::Train, "res").unwrap().0, &probe);
    check_input(tally, &x, &dx, rng, |xp| f(&block, xp));
    let grads: Vec<Tensor> = grad.params_mut().into_iter().map(|t| t.clone()).collect();
    for (t, g) in grads.iter().enumerate() {
        for i in coords(g.len(), rng) {
            let mut l = block.clone();
            let x0 = l.params_mut()[t].data[i];
            let num = fd_probe(
                |v| {
                    l.params_mut()[t].data[i] = v;
                    f(&l, &x)
                },
                x0,
                STEP,
            );
            tally.add(g.data[i], num);
        }
    }
    Ok(())
}

/// Configuration small enough for exhaustive-ish finite differences.
pub fn tiny_model_config(fusion: FusionMode) -> ModelConfig {
    ModelConfig {
        visual: VisualConfig {
            input_height: 8,
            input_width: 8,
            stem_channels: 2,
            stem_stride: 1,
            stem_pool: true,
            widths: vec![2, 3, 4],
        },
        ehr_input_dim: 6,
        ehr_hidden: 4,
        projection_hidden: 5,
        projection_dim: 3,
        fusion,
        ..ModelConfig::default()
    }
}

fn perturbed_model(cfg: ModelConfig, rng: &mut Stream) -> Result<ModelParams> {
    let mut m = ModelParams::new(cfg, rng)?;
    for t in m.params_mut() {
        for v in &mut t.data {
            *v += 0.1 * Distribution::<f64>::sample(&StandardNormal, rng);
        }
    }
    Ok(m)
}

fn check_params(
    tally: &mut Tally,
    model: &ModelParams,
    grads: &mut ModelParams,
    rng: &mut Stream,
    f: impl Fn(&ModelParams) -> f64,
) {
    let analytic: Vec<Tensor> = grads.params_mut().into_iter().map(|t| t.clone()).collect();
    for (t, g) in analytic.iter().enumerate() {
        for i in coords(g.len(), rng) {
            let mut m = model.clone();
            let x0 = m.params_mut()[t].data[i];
            let num = fd_probe(
                |v| {
                    m.params_mut()[t].data[i] = v;
                    f(&m)
                },
                x0,
                STEP,
            );
            tally.add(g.data[i], num);
        }
    }
}

fn check_visual_encoder(rng: &mut Stream, tally: &mut Tally) -> Result<()> {
    let model = perturbed_model(tiny_model_config(FusionMode::ImageOnly), rng)?;
    let x = randn(&[3, 8, 8], rng);
    let (z, cache) = model.encode_visual(&x, Mode::Train)?;
    let probe = randn(&z.shape, rng);
    let mut grads = model.zeros_like();
    model.backward_visual(&cache, &probe, &mut grads)?;
    check_params(tally, &model, &mut grads, rng, |m| {
        dot(&m.encode_visual(&x, Mode::Train).unwrap().0, &probe)
    });
    Ok(())
}

fn check_ehr_encoder(rng: &mut Stream, tally: &mut Tally) -> Result<()> {
    let model = perturbed_model(tiny_model_config(FusionMode::Multimodal), rng)?;
    let x = randn(&[4, 6], rng);
    let (z, cache) = model.encode_ehr(&x, Mode::Train)?;
    let probe = randn(&z.shape, rng);
    let mut grads = model.zeros_like();
    model.backward_ehr(&cache, &probe, &mut grads)?;
    check_params(tally, &model, &mut grads, rng, |m| {
        dot(&m.encode_ehr(&x, Mode::Train).unwrap().0, &probe)
    });
    Ok(())
}

fn check_projection(rng: &mut Stream, tally: &mut Tally) -> Result<()> {
    let model = perturbed_model(tiny_model_config(FusionMode::ImageOnly), rng)?;
    let z = randn(&[3, 4], rng);
    let (h, cache) = model.project(&z)?;
    let probe = randn(&h.shape, rng);
    let mut grads = model.zeros_like();
    let dz = model.backward_projection(&cache, &probe, &mut grads)?;
    check_params(tally, &model, &mut grads, rng, |m| dot(&m.project(&z).unwrap().0, &probe));
    check_input(tally, &z, &dz, rng, |zp| dot(&model.project(zp).unwrap().0, &probe));
    Ok(())
}

fn labels(b: usize, rng: &mut Stream) -> Vec<f64> {
    let mut y: Vec<f64> = (0..b).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
    y[0] = 1.0;
    y[b - 1] = 0.0;
    y
}

fn check_fused(rng: &mut Stream, tally: &mut Tally, fusion: FusionMode) -> Result<()> {
    let model = perturbed_model(tiny_model_config(fusion), rng)?;
    let x = randn(&[3, 8, 8], rng);
    let e = randn(&[3, 6], rng);
    let y = labels(3, rng);
    let loss = |m: &ModelParams| {
        let out = m.forward_fused(&x, Some(&e), Mode::Train).unwrap();
        bce_loss(&out.y_hat, &y).unwrap().0
    };
    let out = model.forward_fused(&x, Some(&e), Mode::Train)?;
    let (_, d) = bce_loss(&out.y_hat, &y)?;
    let mut grads = model.backward(out.cache, &d)?;
    check_params(tally, &model, &mut grads, rng, loss);
    Ok(())
}

fn check_bce(rng: &mut Stream, tally: &mut Tally) -> Result<()> {
    let n = 7;
    let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
    let y = labels(n, rng);
    let (_, g) = bce_loss(&p, &y)?;
    for i in 0..n {
        let mut q = p.clone();
        let num = fd_probe(
            |v| {
                q[i] = v;
                bce_loss(&q, &y).unwrap().0
            },
            p[i],
            STEP,
        );
        tally.add(g[i], num);
    }
    Ok(())
}

fn check_nt_xent(rng: &mut Stream, tally: &mut Tally) -> Result<()> {
    let k = rng.random_range(2..5);
    let d = rng.random_range(2..6);
    let z = randn(&[2 * k, d], rng);
    let temp = TemperatureState {
        tau: rng.random_range(0.2..1.0),
        ..TemperatureState::default()
    };
    let out = nt_xent_loss(&z, &temp)?;
    check_input(tally, &z, &out.d_z, rng, |zp| nt_xent_loss(zp, &temp).unwrap().loss);
    let num = fd_probe(
        |t| nt_xent_loss(&z, &TemperatureState { tau: t, ..temp }).unwrap().loss,
        temp.tau,
        STEP,
    );
    tally.add(out.d_tau, num);
    Ok(())
}

type Check = fn(&mut Stream, &mut Tally) -> Result<()>;

/// Runs every check `instances` times and reports the worst relative error.
pub fn run_suite(instances: usize, seed: u64) -> Result<Vec<GradCheckReport>> {
    let checks: Vec<(&str, Check)> = vec![
        ("dense", check_dense),
        ("batchnorm1d_train", |r, t| check_batchnorm(r, t, false, Mode::Train)),
        ("batchnorm1d_eval", |r, t| check_batchnorm(r, t, false, Mode::Eval)),
        ("batchnorm2d_train", |r, t| check_batchnorm(r, t, true, Mode::Train)),
        ("conv2d", check_conv),
        ("relu", check_relu),
        ("avg_pool_and_gap", check_pools),
        ("residual_block", check_residual),
        ("visual_encoder", check_visual_encoder),
        ("ehr_encoder", check_ehr_encoder),
        ("projection_head", check_projection),
        ("fused_model_bce", |r, t| check_fused(r, t, FusionMode::Multimodal)),
        ("image_only_model_bce", |r, t| check_fused(r, t, FusionMode::ImageOnly)),
        ("bce", check_bce),
        ("nt_xent", check_nt_xent),
    ];
    let mut reports = Vec::with_capacity(checks.len());
    for (idx, (name, check)) in checks.into_iter().enumerate() {
        let mut tally = Tally::default();
        for inst in 0..instances {
            let mut r = rng::stream(seed, name, (idx * 1_000_000 + inst) as u64);
            check(&mut r, &mut tally)?;
        }
        reports.push(GradCheckReport {
            name: name.to_string(),
            instances,
            coordinates: tally.coords,
            kinks: tally.kinks,
            max_rel_err: tally.max_err,
        });
    }
    Ok(reports)
}
