//! Sequential feed-forward networks: dense and 2-D convolution layers with
//! max pooling and flattening, forward evaluation and reverse-mode gradients
//! of the mean cross-entropy loss.

mod loss;
mod ops;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use loss::{cross_entropy_loss, PROBABILITY_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    /// Only allowed on the final dense layer; fused with the loss.
    Softmax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    weight: Tensor,
    bias: Tensor,
    activation: Activation,
}

impl Dense {
    /// `weight` is `[out, in]`, `bias` is `[out]`.
    pub fn new(weight: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        if weight.ndim() != 2 || bias.ndim() != 1 || weight.shape()[0] != bias.len() {
            return Err(Error::Config(format!(
                "dense layer needs weight [out, in] and bias [out], got {:?} and {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Self { weight, bias, activation })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn units(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: [usize; 2],
    padding: [usize; 2],
    activation: Activation,
}

impl Conv2d {
    /// `weight` is `[out_channels, in_channels, kh, kw]`, `bias` is `[out_channels]`.
    pub fn new(
        weight: Tensor,
        bias: Tensor,
        stride: [usize; 2],
        padding: [usize; 2],
        activation: Activation,
    ) -> Result<Self> {
        if weight.ndim() != 4 || bias.ndim() != 1 || weight.shape()[0] != bias.len() {
            return Err(Error::Config(format!(
                "conv layer needs weight [out, in, kh, kw] and bias [out], got {:?} and {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        if stride.contains(&0) {
            return Err(Error::Config("conv stride must be positive".into()));
        }
        Ok(Self { weight, bias, stride, padding, activation })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn stride(&self) -> [usize; 2] {
        self.stride
    }

    pub fn padding(&self) -> [usize; 2] {
        self.padding
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> [usize; 2] {
        [self.weight.shape()[2], self.weight.shape()[3]]
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        if input.ndim() != 4 {
            return Err(Error::shape(0, format!("conv input must be [B, C, H, W], got {:?}", input.shape())));
        }
        self.output_shape(&input.shape()[1..], 0)?;
        Ok(ops::conv2d_forward(input, &self.weight, &self.bias, self.stride, self.padding))
    }

    fn output_shape(&self, input: &[usize], layer: usize) -> Result<Vec<usize>> {
        let [c, h, w] = <[usize; 3]>::try_from(input)
            .map_err(|_| Error::shape(layer, format!("conv expects [C, H, W] input, got {input:?}")))?;
        if c != self.in_channels() {
            return Err(Error::shape(
                layer,
                format!("conv expects {} input channels, got {c}", self.in_channels()),
            ));
        }
        let [oh, ow] = ops::conv_output_dims([h, w], self.kernel(), self.stride, self.padding).ok_or_else(|| {
            Error::shape(layer, format!("kernel {:?} larger than padded input {h}x{w}", self.kernel()))
        })?;
        Ok(vec![self.out_channels(), oh, ow])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool {
    pub size: [usize; 2],
    pub stride: [usize; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    MaxPool(MaxPool),
    /// Channel-major flattening of `[C, H, W]` into `C*H*W` features.
    Flatten,
}

impl Layer {
    pub fn is_parameterized(&self) -> bool {
        matches!(self, Layer::Dense(_) | Layer::Conv2d(_))
    }

    /// Weight tensor of a dense or conv layer.
    pub fn weight(&self) -> Option<&Tensor> {
        match self {
            Layer::Dense(d) => Some(&d.weight),
            Layer::Conv2d(c) => Some(&c.weight),
            _ => None,
        }
    }

    pub fn bias(&self) -> Option<&Tensor> {
        match self {
            Layer::Dense(d) => Some(&d.bias),
            Layer::Conv2d(c) => Some(&c.bias),
            _ => None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight().map_or(0, Tensor::len) + self.bias().map_or(0, Tensor::len)
    }

    fn activation(&self) -> Option<Activation> {
        match self {
            Layer::Dense(d) => Some(d.activation),
            Layer::Conv2d(c) => Some(c.activation),
            _ => None,
        }
    }

    fn params_mut(&mut self) -> Option<(&mut Tensor, &mut Tensor)> {
        match self {
            Layer::Dense(d) => Some((&mut d.weight, &mut d.bias)),
            Layer::Conv2d(c) => Some((&mut c.weight, &mut c.bias)),
            _ => None,
        }
    }

    fn output_shape(&self, input: &[usize], layer: usize) -> Result<Vec<usize>> {
        match self {
            Layer::Dense(d) => {
                if input != [d.inputs()] {
                    return Err(Error::shape(
                        layer,
                        format!("dense layer expects [{}] input features, got {input:?}", d.inputs()),
                    ));
                }
                Ok(vec![d.units()])
            }
            Layer::Conv2d(c) => c.output_shape(input, layer),
            Layer::MaxPool(p) => {
                let [c, h, w] = <[usize; 3]>::try_from(input)
                    .map_err(|_| Error::shape(layer, format!("max-pool expects [C, H, W] input, got {input:?}")))?;
                if p.size.contains(&0) || p.stride.contains(&0) {
                    return Err(Error::shape(layer, "max-pool size and stride must be positive"));
                }
                if p.size[0] > h || p.size[1] > w {
                    return Err(Error::shape(layer, format!("pool window {:?} larger than input {h}x{w}", p.size)));
                }
                Ok(vec![c, (h - p.size[0]) / p.stride[0] + 1, (w - p.size[1]) / p.stride[1] + 1])
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

/// Serializable layer description, used for construction and checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Dense {
        units: usize,
        activation: Activation,
    },
    Conv2d {
        channels: usize,
        kernel: [usize; 2],
        #[serde(default = "unit_stride")]
        stride: [usize; 2],
        #[serde(default)]
        padding: [usize; 2],
        activation: Activation,
    },
    MaxPool {
        size: [usize; 2],
        /// Defaults to the window size.
        #[serde(default)]
        stride: Option<[usize; 2]>,
    },
    Flatten,
}

fn unit_stride() -> [usize; 2] {
    [1, 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    /// Dense stack `sizes[0] -> sizes[1] -> ... -> sizes[n]` with `hidden`
    /// activations and a softmax output.
    pub fn mlp(sizes: &[usize], hidden: Activation) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let last = sizes.len() - 2;
        let layers = sizes[1..]
            .iter()
            .enumerate()
            .map(|(i, &units)| LayerSpec::Dense {
                units,
                activation: if i == last { Activation::Softmax } else { hidden },
            })
            .collect();
        Self { input_shape: vec![sizes[0]], layers }
    }

    /// Builds a network with Glorot-uniform weights drawn from `seed` and
    /// zero biases.
    pub fn build(&self, seed: u64) -> Result<Network> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = self.input_shape.clone();
        let mut layers = Vec::with_capacity(self.layers.len());
        for (idx, spec) in self.layers.iter().enumerate() {
            let layer = match *spec {
                LayerSpec::Dense { units, activation } => {
                    let [fan_in] = <[usize; 1]>::try_from(shape.as_slice()).map_err(|_| {
                        Error::shape(idx, format!("dense layer needs flat input, got {shape:?}; add a flatten layer"))
                    })?;
                    let weight = glorot(&mut rng, &[units, fan_in], fan_in, units);
                    Layer::Dense(Dense::new(weight, Tensor::zeros(&[units]), activation)?)
                }
                LayerSpec::Conv2d { channels, kernel, stride, padding, activation } => {
                    let c_in = *shape
                        .first()
                        .ok_or_else(|| Error::shape(idx, "conv layer needs [C, H, W] input"))?;
                    let area = kernel[0] * kernel[1];
                    let weight = glorot(&mut rng, &[channels, c_in, kernel[0], kernel[1]], c_in * area, channels * area);
                    Layer::Conv2d(Conv2d::new(weight, Tensor::zeros(&[channels]), stride, padding, activation)?)
                }
                LayerSpec::MaxPool { size, stride } => Layer::MaxPool(MaxPool { size, stride: stride.unwrap_or(size) }),
                LayerSpec::Flatten => Layer::Flatten,
            };
            shape = layer.output_shape(&shape, idx)?;
            layers.push(layer);
        }
        Network::new(self.input_shape.clone(), layers)
    }
}

fn glorot(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
}

/// An ordered stack of layers applied to inputs of shape `input_shape`.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    /// Output shape (per sample) of every layer.
    shapes: Vec<Vec<usize>>,
}

impl Network {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("a network needs at least one layer".into()));
        }
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Config(format!("invalid input shape {input_shape:?}")));
        }
        let last = layers.len() - 1;
        let mut shapes = Vec::with_capacity(layers.len());
        let mut shape = input_shape.clone();
        for (idx, layer) in layers.iter().enumerate() {
            if layer.activation() == Some(Activation::Softmax) && (idx != last || !matches!(layer, Layer::Dense(_))) {
                return Err(Error::Config(format!(
                    "softmax is only allowed on the final dense layer (found on layer {idx})"
                )));
            }
            shape = layer.output_shape(&shape, idx)?;
            shapes.push(shape.clone());
        }
        Ok(Self { input_shape, layers, shapes })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, idx: usize) -> Option<&Layer> {
        self.layers.get(idx)
    }

    /// Per-sample output shape of layer `idx`.
    pub fn output_shape_of(&self, idx: usize) -> &[usize] {
        &self.shapes[idx]
    }

    pub fn output_dim(&self) -> usize {
        self.shapes.last().map_or(0, |s| s.iter().product())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Indices of dense and conv layers, in order.
    pub fn parameterized_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_parameterized())
            .map(|(i, _)| i)
            .collect()
    }

    /// Weight and bias tensors in layer order: `w0, b0, w1, b1, ...`.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .filter_map(|l| Some([l.weight()?, l.bias()?]))
            .flatten()
            .collect()
    }

    /// Mutable views in the same order as [`Network::params`]. Shapes are
    /// fixed; only values may change.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .filter_map(Layer::params_mut)
            .flat_map(|(w, b)| [w.data_mut(), b.data_mut()])
            .collect()
    }

    pub fn architecture(&self) -> Architecture {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Dense(d) => LayerSpec::Dense { units: d.units(), activation: d.activation },
                Layer::Conv2d(c) => LayerSpec::Conv2d {
                    channels: c.out_channels(),
                    kernel: c.kernel(),
                    stride: c.stride,
                    padding: c.padding,
                    activation: c.activation,
                },
                Layer::MaxPool(p) => LayerSpec::MaxPool { size: p.size, stride: Some(p.stride) },
                Layer::Flatten => LayerSpec::Flatten,
            })
            .collect();
        Architecture { input_shape: self.input_shape.clone(), layers }
    }

    /// Evaluates the network on a batch `[B, ...input_shape]`.
    pub fn forward(&self, batch: &Tensor) -> Result<(Tensor, ForwardTrace)> {
        if batch.ndim() != self.input_shape.len() + 1 || batch.shape()[1..] != self.input_shape[..] {
            return Err(Error::shape(
                0,
                format!("batch shape {:?} does not match input shape {:?}", batch.shape(), self.input_shape),
            ));
        }
        let n = batch.shape()[0];
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut pool_argmax = Vec::with_capacity(self.layers.len());
        activations.push(batch.clone());

        for (idx, layer) in self.layers.iter().enumerate() {
            let input = activations.last().expect("input activation");
            let mut argmax = None;
            let (pre, post) = match layer {
                Layer::Dense(d) => {
                    let pre = ops::dense_forward(input, &d.weight, &d.bias);
                    let post = ops::activate(&pre, d.activation);
                    (Some(pre), post)
                }
                Layer::Conv2d(c) => {
                    let pre = ops::conv2d_forward(input, &c.weight, &c.bias, c.stride, c.padding);
                    let post = ops::activate(&pre, c.activation);
                    (Some(pre), post)
                }
                Layer::MaxPool(p) => {
                    let (out, am) = ops::maxpool_forward(input, p.size, p.stride);
                    argmax = Some(am);
                    (None, out)
                }
                Layer::Flatten => {
                    let features = self.shapes[idx][0];
                    (None, input.clone().reshape(&[n, features])?)
                }
            };
            debug_assert_eq!(&post.shape()[1..], self.shapes[idx].as_slice());
            pre_activations.push(pre);
            pool_argmax.push(argmax);
            activations.push(post);
        }

        let outputs = activations.last().expect("output activation").clone();
        Ok((outputs, ForwardTrace { activations, pre_activations, pool_argmax }))
    }

    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        self.forward(batch).map(|(out, _)| out)
    }

    /// Gradient of the mean cross-entropy loss with respect to every weight
    /// and bias, given a trace from [`Network::forward`] on this network.
    /// The output layer must use softmax.
    pub fn backward(&self, trace: &ForwardTrace, labels: &[usize]) -> Result<ParamGradients> {
        let last = self.layers.len() - 1;
        if trace.pre_activations.len() != self.layers.len() || trace.activations.len() != self.layers.len() + 1 {
            return Err(Error::Internal(format!(
                "trace has {} layers, network has {}",
                trace.pre_activations.len(),
                self.layers.len()
            )));
        }
        if self.layers[last].activation() != Some(Activation::Softmax) {
            return Err(Error::Config("cross-entropy gradients require a softmax output layer".into()));
        }
        let probs = &trace.activations[last + 1];
        let n = probs.shape()[0];
        let classes = probs.row_len();
        if labels.len() != n {
            return Err(Error::Config(format!("{} labels for a batch of {n}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Config(format!("label {bad} out of range for {classes} classes")));
        }

        // Fused softmax + cross-entropy: dL/dz = (p - onehot) / B.
        let inv_n = 1.0 / n as f64;
        let mut delta = probs.scale(inv_n);
        for (row, &label) in delta.data_mut().chunks_exact_mut(classes).zip(labels) {
            row[label] -= inv_n;
        }

        let first_param = self.layers.iter().position(Layer::is_parameterized).unwrap_or(0);
        let mut grads: Vec<Option<LayerGrad>> = vec![None; self.layers.len()];
        let mut d_post: Option<Tensor> = None;

        for idx in (0..self.layers.len()).rev() {
            let input = &trace.activations[idx];
            let need_input_grad = idx > first_param;
            let layer = &self.layers[idx];
            let d_pre = match (layer.activation(), d_post.take()) {
                (Some(Activation::Softmax), _) => Some(std::mem::replace(&mut delta, Tensor::zeros(&[0]))),
                (Some(act), Some(dp)) => {
                    let pre = trace.pre_activations[idx]
                        .as_ref()
                        .ok_or_else(|| Error::Internal(format!("missing pre-activation for layer {idx}")))?;
                    Some(ops::activation_backward(pre, &trace.activations[idx + 1], dp, act))
                }
                (None, dp) => {
                    d_post = dp;
                    None
                }
                (Some(_), None) => return Err(Error::Internal(format!("missing upstream gradient at layer {idx}"))),
            };

            match layer {
                Layer::Dense(d) => {
                    let d_pre = d_pre.expect("dense gradient");
                    let (dw, db, dx) = ops::dense_backward(input, &d.weight, &d_pre, need_input_grad);
                    grads[idx] = Some(LayerGrad { weight: dw, bias: db });
                    d_post = dx;
                }
                Layer::Conv2d(c) => {
                    let d_pre = d_pre.expect("conv gradient");
                    let (dw, db, dx) = ops::conv2d_backward(input, &c.weight, &d_pre, c.stride, c.padding, need_input_grad);
                    grads[idx] = Some(LayerGrad { weight: dw, bias: db });
                    d_post = dx;
                }
                Layer::MaxPool(_) => {
                    if need_input_grad {
                        let argmax = trace.pool_argmax[idx]
                            .as_ref()
                            .ok_or_else(|| Error::Internal(format!("missing pool indices for layer {idx}")))?;
                        let dp = d_post.take().expect("pool upstream gradient");
                        d_post = Some(ops::maxpool_backward(input.shape(), argmax, &dp));
                    }
                }
                Layer::Flatten => {
                    if need_input_grad {
                        let dp = d_post.take().expect("flatten upstream gradient");
                        d_post = Some(dp.reshape(input.shape())?);
                    }
                }
            }
        }
        Ok(ParamGradients { layers: grads })
    }

    /// Forward, loss and backward on one batch.
    pub fn loss_and_gradients(&self, batch: &Tensor, labels: &[usize]) -> Result<(f64, ParamGradients)> {
        let (out, trace) = self.forward(batch)?;
        if labels.len() != out.shape()[0] {
            return Err(Error::Config(format!("{} labels for a batch of {}", labels.len(), out.shape()[0])));
        }
        let loss = cross_entropy_loss(&out, labels);
        let grads = self.backward(&trace, labels)?;
        Ok((loss, grads))
    }
}

/// Intermediate values recorded by [`Network::forward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `activations[0]` is the input batch, `activations[l + 1]` the output of layer `l`.
    activations: Vec<Tensor>,
    pre_activations: Vec<Option<Tensor>>,
    pool_argmax: Vec<Option<Vec<usize>>>,
}

impl ForwardTrace {
    pub fn activations(&self) -> &[Tensor] {
        &self.activations
    }

    pub fn pre_activation(&self, layer: usize) -> Option<&Tensor> {
        self.pre_activations.get(layer).and_then(Option::as_ref)
    }

    /// First layer whose output contains a non-finite value.
    pub fn first_non_finite_layer(&self) -> Option<usize> {
        self.activations[1..].iter().position(|a| !a.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Per-layer gradients; `None` for layers without parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients {
    pub layers: Vec<Option<LayerGrad>>,
}

impl ParamGradients {
    /// Gradient tensors in the same order as [`Network::params`].
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flatten().flat_map(|g| [&g.weight, &g.bias]).collect()
    }

    pub fn layer(&self, idx: usize) -> Option<&LayerGrad> {
        self.layers.get(idx).and_then(Option::as_ref)
    }

    pub fn layer_mut(&mut self, idx: usize) -> Option<&mut LayerGrad> {
        self.layers.get_mut(idx).and_then(Option::as_mut)
    }
}
