//! Layer stacks and their forward/backward passes.
//!
//! Every convolution is followed by ReLU (with optional batch normalization in
//! between). The last layer emits one logit per sample; the probability is
//! its sigmoid.

use std::fmt;

use crate::error::{Error, Result};
use crate::nn::{self, BatchNormCache, BatchNormParams, ConvParams, DenseParams};
use crate::rng::{substream, Stream};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv3d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
    },
    MaxPool3d {
        pool: usize,
    },
    Flatten,
    Dense {
        in_features: usize,
        out_features: usize,
        activation: Activation,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input_edge: usize,
    pub input_channels: usize,
    pub layers: Vec<LayerSpec>,
    /// Inserts batch normalization between each convolution and its ReLU.
    pub batchnorm: bool,
}

/// Total trainable parameters of the canonical stack.
pub const CANONICAL_PARAM_COUNT: usize = 3_579_169;

impl NetworkSpec {
    /// The canonical classifier for 48³ single-channel cubes.
    pub fn canonical() -> Self {
        Self::canonical_scaled(1)
    }

    /// The canonical layer sequence with every width divided by `divisor`
    /// (4 gives the "small" variant).
    pub fn canonical_scaled(divisor: usize) -> Self {
        assert!(divisor >= 1 && 32 % divisor == 0, "divisor must divide 32");
        let w = |c: usize| c / divisor;
        let conv = |i: usize, o: usize| LayerSpec::Conv3d {
            in_ch: i,
            out_ch: o,
            kernel: 3,
        };
        let pool = LayerSpec::MaxPool3d { pool: 2 };
        NetworkSpec {
            input_edge: 48,
            input_channels: 1,
            layers: vec![
                conv(1, w(32)),
                conv(w(32), w(32)),
                pool.clone(),
                conv(w(32), w(64)),
                conv(w(64), w(64)),
                pool,
                conv(w(64), w(128)),
                conv(w(128), w(128)),
                conv(w(128), w(256)),
                conv(w(256), w(256)),
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    in_features: w(256),
                    out_features: w(256),
                    activation: Activation::Relu,
                },
                LayerSpec::Dense {
                    in_features: w(256),
                    out_features: 1,
                    activation: Activation::Linear,
                },
            ],
            batchnorm: false,
        }
    }

    /// Checks that the layers compose and describes each one.
    pub fn layer_table(&self) -> Result<Vec<LayerInfo>> {
        let bad =
            |i: usize, msg: String| Error::ShapeIncompatible(format!("layer {}: {msg}", i + 1));
        if self.input_edge == 0 || self.input_channels == 0 {
            return Err(Error::ShapeIncompatible("empty input".into()));
        }
        let mut shape = vec![self.input_edge; 3];
        shape.push(self.input_channels);
        let mut counters = [0usize; 4];
        let mut rows = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv3d {
                    in_ch,
                    out_ch,
                    kernel,
                } => {
                    if shape.len() != 4 || shape[3] != in_ch {
                        return Err(bad(
                            i,
                            format!("conv expects {in_ch} channels, input is {shape:?}"),
                        ));
                    }
                    if kernel == 0 || out_ch == 0 || shape[..3].iter().any(|&s| s < kernel) {
                        return Err(bad(i, format!("kernel {kernel} does not fit {shape:?}")));
                    }
                    shape = vec![
                        shape[0] - kernel + 1,
                        shape[1] - kernel + 1,
                        shape[2] - kernel + 1,
                        out_ch,
                    ];
                    counters[0] += 1;
                    rows.push(LayerInfo {
                        name: format!("conv3d{}", counters[0]),
                        kind: "Conv3D",
                        output_shape: shape.clone(),
                        params: nn::conv_param_count(kernel, in_ch, out_ch),
                    });
                    if self.batchnorm {
                        rows.push(LayerInfo {
                            name: format!("batchnorm{}", counters[0]),
                            kind: "BatchNormalization",
                            output_shape: shape.clone(),
                            params: 2 * out_ch,
                        });
                    }
                }
                LayerSpec::MaxPool3d { pool } => {
                    if shape.len() != 4 || pool == 0 || shape[..3].iter().any(|s| s % pool != 0) {
                        return Err(bad(i, format!("pool {pool} does not tile {shape:?}")));
                    }
                    shape = vec![shape[0] / pool, shape[1] / pool, shape[2] / pool, shape[3]];
                    counters[1] += 1;
                    rows.push(LayerInfo {
                        name: format!("max_pooling3d{}", counters[1]),
                        kind: "MaxPooling3D",
                        output_shape: shape.clone(),
                        params: 0,
                    });
                }
                LayerSpec::Flatten => {
                    if shape.len() != 4 {
                        return Err(bad(i, "flatten needs a volumetric input".into()));
                    }
                    shape = vec![shape.iter().product()];
                    counters[2] += 1;
                    rows.push(LayerInfo {
                        name: format!("flatten{}", counters[2]),
                        kind: "Flatten",
                        output_shape: shape.clone(),
                        params: 0,
                    });
                }
                LayerSpec::Dense {
                    in_features,
                    out_features,
                    ..
                } => {
                    if shape != [in_features] || out_features == 0 {
                        return Err(bad(
                            i,
                            format!("dense expects ({in_features}), input is {shape:?}"),
                        ));
                    }
                    shape = vec![out_features];
                    counters[3] += 1;
                    rows.push(LayerInfo {
                        name: format!("dense{}", counters[3]),
                        kind: "Dense",
                        output_shape: shape.clone(),
                        params: in_features * out_features + out_features,
                    });
                }
            }
        }
        if shape != [1] {
            return Err(Error::ShapeIncompatible(format!(
                "network must end in a single logit, ends in {shape:?}"
            )));
        }
        Ok(rows)
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self.layer_table()?.iter().map(|r| r.params).sum())
    }
}

/// One row of the layer table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerInfo {
    pub name: String,
    pub kind: &'static str,
    /// Without the batch axis.
    pub output_shape: Vec<usize>,
    pub params: usize,
}

impl fmt::Display for LayerInfo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dims: Vec<String> = self.output_shape.iter().map(|d| d.to_string()).collect();
        let label = format!("{} ({})", self.name, self.kind);
        let shape = format!("(None, {})", dims.join(", "));
        write!(f, "{label:<32}{shape:<28}{}", group_thousands(self.params))
    }
}

/// `3579169` → `3,579,169`.
pub fn group_thousands(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::with_capacity(s.len() + s.len() / 3);
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T = f32> {
    Conv {
        params: ConvParams<T>,
        bn: Option<BatchNormParams<T>>,
    },
    MaxPool {
        pool: usize,
    },
    Flatten,
    Dense {
        params: DenseParams<T>,
        activation: Activation,
    },
}

/// What the training forward pass keeps for the backward pass.
#[derive(Debug)]
pub struct Trace<T = f32> {
    /// `activations[i]` is the input of layer `i`; the last entry is the logits.
    pub activations: Vec<Tensor<T>>,
    pub extras: Vec<LayerExtra<T>>,
}

#[derive(Debug)]
pub enum LayerExtra<T = f32> {
    None,
    Pool { argmax: Vec<usize> },
    BatchNorm(BatchNormCache<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T = f32> {
    spec: NetworkSpec,
    layers: Vec<Layer<T>>,
}

impl<T: Real> Network<T> {
    /// Glorot-uniform weights, zero biases, all from the `Init` substream of `seed`.
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let mut net = Self::zeroed(spec)?;
        let mut rng = substream(seed, Stream::Init);
        for layer in &mut net.layers {
            match layer {
                Layer::Conv { params, .. } => {
                    let k3 = params.kernel().pow(3);
                    let (fi, fo) = (k3 * params.in_channels(), k3 * params.out_channels());
                    params.weights = nn::glorot_uniform(params.weights.shape(), fi, fo, &mut rng);
                }
                Layer::Dense { params, .. } => {
                    let (fi, fo) = (params.in_features(), params.out_features());
                    params.weights = nn::glorot_uniform(params.weights.shape(), fi, fo, &mut rng);
                }
                _ => {}
            }
        }
        Ok(net)
    }

    /// All parameters zero (batchnorm scale one).
    pub fn zeroed(spec: &NetworkSpec) -> Result<Self> {
        spec.layer_table()?;
        let layers = spec
            .layers
            .iter()
            .map(|l| match *l {
                LayerSpec::Conv3d {
                    in_ch,
                    out_ch,
                    kernel,
                } => Layer::Conv {
                    params: ConvParams::zeros(kernel, in_ch, out_ch),
                    bn: spec.batchnorm.then(|| BatchNormParams::new(out_ch)),
                },
                LayerSpec::MaxPool3d { pool } => Layer::MaxPool { pool },
                LayerSpec::Flatten => Layer::Flatten,
                LayerSpec::Dense {
                    in_features,
                    out_features,
                    activation,
                } => Layer::Dense {
                    params: DenseParams::zeros(in_features, out_features),
                    activation,
                },
            })
            .collect();
        Ok(Network {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn input_edge(&self) -> usize {
        self.spec.input_edge
    }

    /// Trainable tensors in a fixed order: per layer weights, bias, then
    /// batchnorm gamma and beta.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv { params, bn } => {
                    out.push(&params.weights);
                    out.push(&params.bias);
                    if let Some(bn) = bn {
                        out.push(&bn.gamma);
                        out.push(&bn.beta);
                    }
                }
                Layer::Dense { params, .. } => {
                    out.push(&params.weights);
                    out.push(&params.bias);
                }
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv { params, bn } => {
                    out.push(&mut params.weights);
                    out.push(&mut params.bias);
                    if let Some(bn) = bn {
                        out.push(&mut bn.gamma);
                        out.push(&mut bn.beta);
                    }
                }
                Layer::Dense { params, .. } => {
                    out.push(&mut params.weights);
                    out.push(&mut params.bias);
                }
                _ => {}
            }
        }
        out
    }

    /// Non-trainable state (batchnorm running moments).
    pub fn buffers(&self) -> Vec<&Tensor<T>> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Conv { bn: Some(bn), .. } => Some([&bn.running_mean, &bn.running_var]),
                _ => None,
            })
            .flatten()
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            if let Layer::Conv { bn: Some(bn), .. } = layer {
                out.push(&mut bn.running_mean);
                out.push(&mut bn.running_var);
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let e = self.spec.input_edge;
        match *x.shape() {
            [b, d, h, w, c]
                if b >= 1 && d == e && h == e && w == e && c == self.spec.input_channels =>
            {
                Ok(())
            }
            _ => Err(Error::ShapeMismatch(format!(
                "network expects (batch, {e}, {e}, {e}, {}), got {:?}",
                self.spec.input_channels,
                x.shape()
            ))),
        }
    }

    /// Inference-mode forward pass; returns logits of shape `(batch, 1)`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut a = x.clone();
        for layer in &self.layers {
            a = match layer {
                Layer::Conv { params, bn } => {
                    let mut z = nn::conv3d_forward(&a, params)?;
                    if let Some(bn) = bn {
                        z = nn::batchnorm_forward_eval(&z, bn)?;
                    }
                    nn::relu_forward(&z)
                }
                Layer::MaxPool { pool } => nn::maxpool3d_forward(&a, *pool)?.output,
                Layer::Flatten => nn::flatten(a)?,
                Layer::Dense { params, activation } => {
                    let z = nn::dense_forward(&a, params)?;
                    match activation {
                        Activation::Relu => nn::relu_forward(&z),
                        Activation::Linear => z,
                    }
                }
            };
        }
        Ok(a)
    }

    /// Sigmoid of the logits, one probability per sample.
    pub fn predict_proba(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        Ok(self
            .forward(x)?
            .data()
            .iter()
            .map(|&z| nn::sigmoid(z))
            .collect())
    }

    /// Training-mode forward pass (batch statistics for batchnorm). Pure: the
    /// running moments are folded in separately by [`Network::update_running_stats`].
    pub fn forward_train(&self, x: Tensor<T>) -> Result<(Tensor<T>, Trace<T>)> {
        self.check_input(&x)?;
        let mut activations = vec![x];
        let mut extras = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let a = activations.last().unwrap();
            let (next, extra) = match layer {
                Layer::Conv { params, bn } => {
                    let z = nn::conv3d_forward(a, params)?;
                    match bn {
                        Some(bn) => {
                            let (z, cache) = nn::batchnorm_forward_train(&z, bn)?;
                            (nn::relu_forward(&z), LayerExtra::BatchNorm(cache))
                        }
                        None => (nn::relu_forward(&z), LayerExtra::None),
                    }
                }
                Layer::MaxPool { pool } => {
                    let out = nn::maxpool3d_forward(a, *pool)?;
                    (out.output, LayerExtra::Pool { argmax: out.argmax })
                }
                Layer::Flatten => (nn::flatten(a.clone())?, LayerExtra::None),
                Layer::Dense { params, activation } => {
                    let z = nn::dense_forward(a, params)?;
                    let y = match activation {
                        Activation::Relu => nn::relu_forward(&z),
                        Activation::Linear => z,
                    };
                    (y, LayerExtra::None)
                }
            };
            activations.push(next);
            extras.push(extra);
        }
        let logits = activations.last().unwrap().clone();
        Ok((
            logits,
            Trace {
                activations,
                extras,
            },
        ))
    }

    /// Gradients of the loss w.r.t. every tensor of [`Network::params`],
    /// given its gradient w.r.t. the logits.
    pub fn backward(&self, trace: &Trace<T>, grad_logits: Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let n = self.layers.len();
        if trace.activations.len() != n + 1 || trace.extras.len() != n {
            return Err(Error::ShapeMismatch(
                "trace does not belong to this network".into(),
            ));
        }
        if grad_logits.shape() != trace.activations[n].shape() {
            return Err(Error::ShapeMismatch(format!(
                "logit gradient {:?} vs logits {:?}",
                grad_logits.shape(),
                trace.activations[n].shape()
            )));
        }
        // collected back to front, reversed at the end
        let mut grads_rev: Vec<Tensor<T>> = Vec::new();
        let mut g = grad_logits;
        for i in (0..n).rev() {
            let input = &trace.activations[i];
            let output = &trace.activations[i + 1];
            let need_input = i > 0;
            g = match (&self.layers[i], &trace.extras[i]) {
                (Layer::Conv { params, bn }, extra) => {
                    let mut gz = nn::relu_backward(output, &g)?;
                    let mut bn_grads = None;
                    if let (Some(bn), LayerExtra::BatchNorm(cache)) = (bn, extra) {
                        let bg = nn::batchnorm_backward(bn, cache, &gz)?;
                        gz = bg.input;
                        bn_grads = Some((bg.gamma, bg.beta));
                    }
                    let cg = nn::conv3d_backward(input, params, &gz, need_input)?;
                    if let Some((gamma, beta)) = bn_grads {
                        grads_rev.push(beta);
                        grads_rev.push(gamma);
                    }
                    grads_rev.push(cg.bias);
                    grads_rev.push(cg.weights);
                    cg.input.unwrap_or_else(|| Tensor::zeros(input.shape()))
                }
                (Layer::MaxPool { .. }, LayerExtra::Pool { argmax }) => {
                    nn::maxpool3d_backward(input.shape(), argmax, &g)?
                }
                (Layer::Flatten, _) => nn::unflatten(g, input.shape())?,
                (Layer::Dense { params, activation }, _) => {
                    let gz = match activation {
                        Activation::Relu => nn::relu_backward(output, &g)?,
                        Activation::Linear => g,
                    };
                    let dg = nn::dense_backward(input, params, &gz)?;
                    grads_rev.push(dg.bias);
                    grads_rev.push(dg.weights);
                    dg.input
                }
                _ => {
                    return Err(Error::ShapeMismatch(format!(
                        "trace entry {i} does not match its layer"
                    )))
                }
            };
        }
        grads_rev.reverse();
        Ok(grads_rev)
    }

    /// Folds the batch statistics of a training pass into the running moments.
    pub fn update_running_stats(&mut self, trace: &Trace<T>) {
        for (layer, extra) in self.layers.iter_mut().zip(&trace.extras) {
            if let (Layer::Conv { bn: Some(bn), .. }, LayerExtra::BatchNorm(cache)) = (layer, extra)
            {
                nn::update_running(bn, cache);
            }
        }
    }

    /// Same network in another precision.
    pub fn cast<U: Real>(&self) -> Network<U> {
        let mut out = Network::<U>::zeroed(&self.spec).expect("spec was validated");
        for (dst, src) in out.params_mut().into_iter().zip(self.params()) {
            *dst = src.cast();
        }
        for (dst, src) in out.buffers_mut().into_iter().zip(self.buffers()) {
            *dst = src.cast();
        }
        out
    }
}
