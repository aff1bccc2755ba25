//! Finite-difference verification of every layer's backward pass in 64-bit.
//!
//! Each check draws a random small shape, defines the scalar loss
//! `L = Σ u ⊙ f(inputs)` with a random `u` (or the BCE itself), and compares
//! each analytic partial derivative against the central difference
//! `(L(θ + ε) − L(θ − ε)) / 2ε`. Piecewise-linear layers get inputs that
//! stay more than ε away from their kinks.

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::Result;
use crate::network::{Activation, Layer, LayerSpec, Network, NetworkSpec, Trace};
use crate::nn::{self, BatchNormParams, ConvParams, DenseParams};
use crate::rng::{indexed_substream, Rng, Stream};
use crate::tensor::Tensor;

pub const EPSILON: f64 = 1e-3;
pub const DEFAULT_TRIALS: usize = 100;
pub const THRESHOLD: f64 = 1e-5;
pub const BATCHNORM_THRESHOLD: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub trials: usize,
    /// Central-difference step of the per-layer suite.
    pub epsilon: f64,
    /// Test hook: perturbs the analytic conv weight gradient so the suite
    /// must fail.
    pub corrupt_conv_backward: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seed: 0,
            trials: DEFAULT_TRIALS,
            epsilon: EPSILON,
            corrupt_conv_backward: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerCheck {
    pub layer: &'static str,
    pub max_rel_error: f64,
    pub threshold: f64,
    /// Partial derivatives compared.
    pub coordinates: usize,
    /// Whole-network coordinates skipped because a ReLU or pooling decision
    /// changed within ±ε.
    pub skipped: usize,
}

impl LayerCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.threshold
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub layers: Vec<LayerCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.layers.iter().all(LayerCheck::passed)
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floored(analytic, numeric, 1e-8)
}

fn relative_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Denominator floor of the whole-network check. Gradients that are
/// structurally zero (e.g. a shift cancelled by a later batchnorm) leave
/// only rounding noise of order 1e-12 in the difference quotient.
pub const NETWORK_FLOOR: f64 = 1e-6;
/// Step of the whole-network check; small enough that batchnorm curvature
/// stays below the tolerance.
pub const NETWORK_EPSILON: f64 = 1e-4;

#[derive(Default)]
struct Tally {
    epsilon: f64,
    max: f64,
    count: usize,
    skipped: usize,
}

impl Tally {
    fn new(epsilon: f64) -> Self {
        Tally {
            epsilon,
            ..Tally::default()
        }
    }

    fn add(&mut self, analytic: f64, numeric: f64) {
        self.max = self.max.max(relative_error(analytic, numeric));
        self.count += 1;
    }

    fn add_floored(&mut self, analytic: f64, numeric: f64, floor: f64) {
        self.max = self
            .max
            .max(relative_error_floored(analytic, numeric, floor));
        self.count += 1;
    }

    fn finish(self, layer: &'static str, threshold: f64) -> LayerCheck {
        LayerCheck {
            layer,
            max_rel_error: self.max,
            threshold,
            coordinates: self.count,
            skipped: self.skipped,
        }
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Compares `analytic` with central differences of `loss` over every element
/// of the tensor selected by `pick`.
fn check_tensor<S>(
    state: &mut S,
    pick: fn(&mut S) -> &mut Tensor<f64>,
    analytic: &Tensor<f64>,
    loss: &dyn Fn(&S) -> f64,
    tally: &mut Tally,
) {
    let eps = tally.epsilon;
    for i in 0..analytic.len() {
        let orig = pick(state).data()[i];
        pick(state).data_mut()[i] = orig + eps;
        let plus = loss(state);
        pick(state).data_mut()[i] = orig - eps;
        let minus = loss(state);
        pick(state).data_mut()[i] = orig;
        tally.add(analytic.data()[i], (plus - minus) / (2.0 * eps));
    }
}

fn trial_rng(seed: u64, layer: u64, trial: usize) -> Rng {
    // one substream per (layer, trial) so layers are independently reproducible
    indexed_substream(seed, Stream::Init, (layer << 32) | trial as u64)
}

struct ConvCase {
    x: Tensor<f64>,
    p: ConvParams<f64>,
    u: Tensor<f64>,
}

fn check_conv(opts: &GradcheckOptions) -> Result<LayerCheck> {
    let mut tally = Tally::new(opts.epsilon);
    for t in 0..opts.trials {
        let mut rng = trial_rng(opts.seed, 1, t);
        let k = rng.gen_range(1..=3);
        let dims: [usize; 3] = std::array::from_fn(|_| rng.gen_range(k..=k + 2));
        let (b, cin, cout) = (
            rng.gen_range(1..=2),
            rng.gen_range(1..=3),
            rng.gen_range(1..=3),
        );
        let x = uniform(&[b, dims[0], dims[1], dims[2], cin], -1.0, 1.0, &mut rng);
        let p = ConvParams {
            weights: uniform(&[k, k, k, cin, cout], -1.0, 1.0, &mut rng),
            bias: uniform(&[cout], -1.0, 1.0, &mut rng),
        };
        let out = dims.map(|s| s - k + 1);
        let u = uniform(&[b, out[0], out[1], out[2], cout], -1.0, 1.0, &mut rng);
        let mut g = nn::conv3d_backward(&x, &p, &u, true)?;
        if opts.corrupt_conv_backward {
            g.weights.data_mut()[0] += 0.1;
        }
        let loss = |c: &ConvCase| dot(&c.u, &nn::conv3d_forward(&c.x, &c.p).unwrap());
        let mut case = ConvCase { x, p, u };
        check_tensor(
            &mut case,
            |c| &mut c.x,
            g.input.as_ref().unwrap(),
            &loss,
            &mut tally,
        );
        check_tensor(
            &mut case,
            |c| &mut c.p.weights,
            &g.weights,
            &loss,
            &mut tally,
        );
        check_tensor(&mut case, |c| &mut c.p.bias, &g.bias, &loss, &mut tally);
    }
    Ok(tally.finish("conv3d", THRESHOLD))
}

struct InputCase {
    x: Tensor<f64>,
    u: Tensor<f64>,
}

/// Distinct values spaced 0.01 apart in random order, so no perturbation
/// of ±ε can change which element wins a pooling block.
fn separated(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - n as f64 * 0.005).collect();
    v.shuffle(rng);
    Tensor::from_vec(shape, v).unwrap()
}

fn check_pool(opts: &GradcheckOptions) -> Result<LayerCheck> {
    let mut tally = Tally::new(opts.epsilon);
    for t in 0..opts.trials {
        let mut rng = trial_rng(opts.seed, 2, t);
        let pool = rng.gen_range(1..=3);
        let blocks: [usize; 3] = std::array::from_fn(|_| rng.gen_range(1..=2));
        let (b, c) = (rng.gen_range(1..=2), rng.gen_range(1..=3));
        let shape = [b, blocks[0] * pool, blocks[1] * pool, blocks[2] * pool, c];
        let x = separated(&shape, &mut rng);
        let u = uniform(
            &[b, blocks[0], blocks[1], blocks[2], c],
            -1.0,
            1.0,
            &mut rng,
        );
        let fwd = nn::maxpool3d_forward(&x, pool)?;
        let g = nn::maxpool3d_backward(x.shape(), &fwd.argmax, &u)?;
        let loss = |c: &InputCase| dot(&c.u, &nn::maxpool3d_forward(&c.x, pool).unwrap().output);
        check_tensor(&mut InputCase { x, u }, |c| &mut c.x, &g, &loss, &mut tally);
    }
    Ok(tally.finish("maxpool3d", THRESHOLD))
}

fn check_relu(opts: &GradcheckOptions) -> Result<LayerCheck> {
    let mut tally = Tally::new(opts.epsilon);
    for t in 0..opts.trials {
        let mut rng = trial_rng(opts.seed, 3, t);
        let n = rng.gen_range(1..=64);
        let x: Vec<f64> = (0..n)
            .map(|_| {
                let m = rng.gen_range(1e-2..1.0);
                if rng.gen() {
                    m
                } else {
                    -m
                }
            })
            .collect();
        let x = Tensor::from_vec(&[n], x)?;
        let u = uniform(&[n], -1.0, 1.0, &mut rng);
        let g = nn::relu_backward(&nn::relu_forward(&x), &u)?;
        let loss = |c: &InputCase| dot(&c.u, &nn::relu_forward(&c.x));
        check_tensor(&mut InputCase { x, u }, |c| &mut c.x, &g, &loss, &mut tally);
    }
    Ok(tally.finish("relu", THRESHOLD))
}

struct DenseCase {
    x: Tensor<f64>,
    p: DenseParams<f64>,
    u: Tensor<f64>,
}

fn check_dense(opts: &GradcheckOptions) -> Result<LayerCheck> {
    let mut tally = Tally::new(opts.epsilon);
    for t in 0..opts.trials {
        let mut rng = trial_rng(opts.seed, 4, t);
        let (b, fin, fout) = (
            rng.gen_range(1..=3),
            rng.gen_range(1..=8),
            rng.gen_range(1..=8),
        );
        let x = uniform(&[b, fin], -1.0, 1.0, &mut rng);
        let p = DenseParams {
            weights: uniform(&[fin, fout], -1.0, 1.0, &mut rng),
            bias: uniform(&[fout], -1.0, 1.0, &mut rng),
        };
        let u = uniform(&[b, fout], -1.0, 1.0, &mut rng);
        let g = nn::dense_backward(&x, &p, &u)?;
        let loss = |c: &DenseCase| dot(&c.u, &nn::dense_forward(&c.x, &c.p).unwrap());
        let mut case = DenseCase { x, p, u };
        check_tensor(&mut case, |c| &mut c.x, &g.input, &loss, &mut tally);
        check_tensor(
            &mut case,
            |c| &mut c.p.weights,
            &g.weights,
            &loss,
            &mut tally,
        );
        check_tensor(&mut case, |c| &mut c.p.bias, &g.bias, &loss, &mut tally);
    }
    Ok(tally.finish("dense", THRESHOLD))
}

fn check_bce(opts: &GradcheckOptions) -> Result<LayerCheck> {
    let mut tally = Tally::new(opts.epsilon);
    for t in 0..opts.trials {
        let mut rng = trial_rng(opts.seed, 5, t);
        let n = rng.gen_range(1..=8);
        let z = uniform(&[n], -6.0, 6.0, &mut rng);
        let y = Tensor::from_vec(&[n], (0..n).map(|_| rng.gen_range(0..=1) as f64).collect())?;
        let (_, g) = nn::bce_with_logits(z.data(), y.data())?;
        let g = Tensor::from_vec(&[n], g)?;
        let loss = |c: &InputCase| nn::bce_with_logits(c.x.data(), c.u.data()).unwrap().0;
        check_tensor(
            &mut InputCase { x: z, u: y },
            |c| &mut c.x,
            &g,
            &loss,
            &mut tally,
        );
    }
    Ok(tally.finish("bce", THRESHOLD))
}

struct BnCase {
    x: Tensor<f64>,
    p: BatchNormParams<f64>,
    u: Tensor<f64>,
}

fn check_batchnorm(opts: &GradcheckOptions) -> Result<LayerCheck> {
    let mut tally = Tally::new(opts.epsilon);
    for t in 0..opts.trials {
        let mut rng = trial_rng(opts.seed, 6, t);
        let c = rng.gen_range(1..=3);
        let shape = [rng.gen_range(1..=2), rng.gen_range(2..=3), 2, 2, c];
        let x = uniform(&shape, -1.0, 1.0, &mut rng);
        let mut p = BatchNormParams::new(c);
        p.gamma = uniform(&[c], 0.5, 1.5, &mut rng);
        p.beta = uniform(&[c], -0.5, 0.5, &mut rng);
        let u = uniform(&shape, -1.0, 1.0, &mut rng);
        let (_, cache) = nn::batchnorm_forward_train(&x, &p)?;
        let g = nn::batchnorm_backward(&p, &cache, &u)?;
        let loss = |c: &BnCase| dot(&c.u, &nn::batchnorm_forward_train(&c.x, &c.p).unwrap().0);
        let mut case = BnCase { x, p, u };
        check_tensor(&mut case, |c| &mut c.x, &g.input, &loss, &mut tally);
        check_tensor(&mut case, |c| &mut c.p.gamma, &g.gamma, &loss, &mut tally);
        check_tensor(&mut case, |c| &mut c.p.beta, &g.beta, &loss, &mut tally);
    }
    Ok(tally.finish("batchnorm", BATCHNORM_THRESHOLD))
}

/// A small stack with every layer kind, for whole-network checks. Every
/// convolution keeps at least 2³ positions so batch statistics span 16
/// values per channel; with only two values the normalized output is
/// almost ±1 and too curved for central differences.
pub fn check_spec(batchnorm: bool) -> NetworkSpec {
    NetworkSpec {
        input_edge: 8,
        input_channels: 1,
        layers: vec![
            LayerSpec::Conv3d {
                in_ch: 1,
                out_ch: 3,
                kernel: 3,
            },
            LayerSpec::MaxPool3d { pool: 2 },
            LayerSpec::Conv3d {
                in_ch: 3,
                out_ch: 4,
                kernel: 2,
            },
            LayerSpec::Conv3d {
                in_ch: 4,
                out_ch: 4,
                kernel: 1,
            },
            LayerSpec::Flatten,
            LayerSpec::Dense {
                in_features: 32,
                out_features: 5,
                activation: Activation::Relu,
            },
            LayerSpec::Dense {
                in_features: 5,
                out_features: 1,
                activation: Activation::Linear,
            },
        ],
        batchnorm,
    }
}

/// ReLU on/off pattern and pooling winners of one training pass.
fn decisions(trace: &Trace<f64>) -> (Vec<bool>, Vec<usize>) {
    let mut signs = Vec::new();
    let mut winners = Vec::new();
    for a in &trace.activations[1..] {
        signs.extend(a.data().iter().map(|&v| v > 0.0));
    }
    for e in &trace.extras {
        if let crate::network::LayerExtra::Pool { argmax } = e {
            winners.extend_from_slice(argmax);
        }
    }
    (signs, winners)
}

/// End-to-end check of `Network::backward` on the mean BCE of a batch of 2,
/// with step [`NETWORK_EPSILON`] and denominator floor [`NETWORK_FLOOR`].
/// Coordinates whose ±ε perturbation flips a ReLU or changes a pooling
/// winner are skipped, since the loss is not differentiable there.
pub fn check_network(seed: u64, batchnorm: bool) -> Result<LayerCheck> {
    let (epsilon, batch) = (NETWORK_EPSILON, 2);
    let spec = check_spec(batchnorm);
    let mut net = Network::<f64>::build(&spec, seed)?;
    let mut rng = trial_rng(seed, 7, 0);
    // nonzero biases, and batchnorm scales well away from zero, so every
    // path carries gradient
    for layer in net.layers_mut() {
        match layer {
            Layer::Conv { params, bn } => {
                params.bias = uniform(params.bias.shape(), -0.2, 0.2, &mut rng);
                if let Some(bn) = bn {
                    bn.gamma = uniform(bn.gamma.shape(), 0.5, 1.5, &mut rng);
                    bn.beta = uniform(bn.beta.shape(), -0.5, 0.5, &mut rng);
                }
            }
            Layer::Dense { params, .. } => {
                params.bias = uniform(params.bias.shape(), -0.2, 0.2, &mut rng)
            }
            _ => {}
        }
    }
    let x = uniform(&[batch, 8, 8, 8, 1], 0.0, 1.0, &mut rng);
    let y: Vec<f64> = (0..batch).map(|i| ((i + 1) % 2) as f64).collect();
    let loss_and_decisions = |net: &Network<f64>| -> Result<(f64, (Vec<bool>, Vec<usize>))> {
        let (logits, trace) = net.forward_train(x.clone())?;
        Ok((nn::bce_with_logits(logits.data(), &y)?.0, decisions(&trace)))
    };
    let (logits, trace) = net.forward_train(x.clone())?;
    let (_, g) = nn::bce_with_logits(logits.data(), &y)?;
    let grads = net.backward(&trace, Tensor::from_vec(&[batch, 1], g)?)?;

    // conv biases followed by batchnorm cancel out of the loss: their exact
    // gradient is zero and a difference quotient would only measure rounding
    let mut cancelled = vec![false; grads.len()];
    let mut idx = 0;
    for layer in net.layers() {
        match layer {
            Layer::Conv { bn, .. } => {
                cancelled[idx + 1] = bn.is_some();
                idx += if bn.is_some() { 4 } else { 2 };
            }
            Layer::Dense { .. } => idx += 2,
            _ => {}
        }
    }

    let mut tally = Tally::default();
    for (pi, grad) in grads.iter().enumerate() {
        if cancelled[pi] {
            for &a in grad.data() {
                tally.max = tally
                    .max
                    .max(if a.abs() <= 1e-12 { 0.0 } else { f64::INFINITY });
                tally.count += 1;
            }
            continue;
        }
        for i in 0..grad.len() {
            let orig = net.params()[pi].data()[i];
            net.params_mut()[pi].data_mut()[i] = orig + epsilon;
            let (plus, dp) = loss_and_decisions(&net)?;
            net.params_mut()[pi].data_mut()[i] = orig - epsilon;
            let (minus, dm) = loss_and_decisions(&net)?;
            net.params_mut()[pi].data_mut()[i] = orig;
            if dp != dm {
                tally.skipped += 1;
                continue;
            }
            tally.add_floored(
                grad.data()[i],
                (plus - minus) / (2.0 * epsilon),
                NETWORK_FLOOR,
            );
        }
    }
    let threshold = if batchnorm {
        BATCHNORM_THRESHOLD
    } else {
        THRESHOLD
    };
    Ok(tally.finish(
        if batchnorm {
            "network+batchnorm"
        } else {
            "network"
        },
        threshold,
    ))
}

/// Runs every per-layer check.
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    Ok(GradcheckReport {
        layers: vec![
            check_conv(opts)?,
            check_pool(opts)?,
            check_relu(opts)?,
            check_dense(opts)?,
            check_bce(opts)?,
            check_batchnorm(opts)?,
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert!((relative_error(1e-12, 0.0) - 1e-4).abs() < 1e-12);
    }

    #[test]
    fn quick_suite_passes() {
        let report = run_gradcheck(&GradcheckOptions {
            trials: 5,
            ..Default::default()
        })
        .unwrap();
        for l in &report.layers {
            assert!(l.passed(), "{l:?}");
            assert!(l.coordinates > 0, "{l:?}");
        }
    }

    #[test]
    fn corrupted_conv_is_caught() {
        let report = run_gradcheck(&GradcheckOptions {
            trials: 2,
            corrupt_conv_backward: true,
            ..Default::default()
        })
        .unwrap();
        assert!(!report.layers[0].passed());
        assert!(report.layers[1..].iter().all(LayerCheck::passed));
        assert!(!report.passed());
    }
}
