//! Network descriptions, the two task builders and differentiable forward
//! passes.

mod loss;

pub use loss::{bce_dice_loss, mse_loss, rate_regularization, rate_regularization_tape, LossKind, RateRegConfig};

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::neuron::{NeuronKind, NeuronParams};
use crate::scalar::Scalar;
use crate::tensor::{kernels, NodeId, Padding, Tape, Tensor};

/// Which of the two task networks a model implements.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    /// Bounding-box regression.
    Locnet,
    /// Convolutional autoencoder segmentation.
    Cae,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Locnet => "locnet",
            Task::Cae => "cae",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "locnet" => Ok(Task::Locnet),
            "cae" => Ok(Task::Cae),
            other => invalid(format!("unknown task `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Ann,
    Snn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    /// Feature convolution.
    Conv { out_channels: usize, kernel: usize, stride: usize, padding: Padding },
    /// Downsampling convolution standing in for a pooling layer.
    PoolConv { out_channels: usize, kernel: usize, stride: usize },
    /// Non-overlapping average pooling; no parameters.
    AvgPool { window: usize },
    /// Transposed convolution.
    Deconv { out_channels: usize, kernel: usize, stride: usize },
    /// Fully connected; flattens its input.
    Dense { units: usize },
}

impl LayerKind {
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let spatial = |input: &[usize]| match *input {
            [c, h, w] => Ok((c, h, w)),
            _ => invalid(format!("layer {self:?} needs a [C,H,W] input, got {input:?}")),
        };
        match *self {
            LayerKind::Conv { out_channels, kernel, stride, padding } => {
                let (_, h, w) = spatial(input)?;
                let (ho, wo) = match padding {
                    Padding::Same => (h.div_ceil(stride), w.div_ceil(stride)),
                    Padding::Valid => {
                        if kernel > h || kernel > w {
                            return invalid(format!("kernel {kernel} larger than input {h}x{w}"));
                        }
                        ((h - kernel) / stride + 1, (w - kernel) / stride + 1)
                    }
                };
                Ok(vec![out_channels, ho, wo])
            }
            LayerKind::PoolConv { out_channels, kernel, stride } => {
                let (_, h, w) = spatial(input)?;
                if kernel > h || kernel > w {
                    return invalid(format!("kernel {kernel} larger than input {h}x{w}"));
                }
                Ok(vec![out_channels, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
            }
            LayerKind::AvgPool { window } => {
                let (c, h, w) = spatial(input)?;
                if window == 0 || h % window != 0 || w % window != 0 {
                    return invalid(format!("{h}x{w} not divisible by pool window {window}"));
                }
                Ok(vec![c, h / window, w / window])
            }
            LayerKind::Deconv { out_channels, kernel, stride } => {
                let (_, h, w) = spatial(input)?;
                Ok(vec![out_channels, (h - 1) * stride + kernel, (w - 1) * stride + kernel])
            }
            LayerKind::Dense { units } => Ok(vec![units]),
        }
    }

    /// Weight and bias shapes, `None` for parameter-free layers.
    pub fn param_shapes(&self, input: &[usize]) -> Option<(Vec<usize>, Vec<usize>)> {
        let c_in = input.first().copied().unwrap_or(0);
        match *self {
            LayerKind::Conv { out_channels, kernel, .. } | LayerKind::PoolConv { out_channels, kernel, .. } => {
                Some((vec![out_channels, c_in, kernel, kernel], vec![out_channels]))
            }
            LayerKind::Deconv { out_channels, kernel, .. } => {
                Some((vec![c_in, out_channels, kernel, kernel], vec![out_channels]))
            }
            LayerKind::Dense { units } => Some((vec![units, input.iter().product()], vec![units])),
            LayerKind::AvgPool { .. } => None,
        }
    }

    fn fans(&self, input: &[usize]) -> (usize, usize) {
        match *self {
            LayerKind::Conv { out_channels, kernel, .. } | LayerKind::PoolConv { out_channels, kernel, .. } => {
                (input[0] * kernel * kernel, out_channels * kernel * kernel)
            }
            LayerKind::Deconv { out_channels, kernel, .. } => (input[0] * kernel * kernel, out_channels * kernel * kernel),
            LayerKind::Dense { units } => (input.iter().product(), units),
            LayerKind::AvgPool { .. } => (1, 1),
        }
    }

    pub fn is_conv_type(&self) -> bool {
        matches!(self, LayerKind::Conv { .. } | LayerKind::PoolConv { .. } | LayerKind::Deconv { .. })
    }
}

/// One layer: linear map, then neurons.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<S> {
    pub kind: LayerKind,
    pub neuron: NeuronKind,
    pub params: NeuronParams<S>,
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
    pub weight: Option<Tensor<S>>,
    pub bias: Option<Tensor<S>>,
}

impl<S: Scalar> Layer<S> {
    pub fn neurons(&self) -> usize {
        self.out_shape.iter().product()
    }

    /// Applies the linear part (with bias) to a batched signal `[B, ...in_shape]`.
    pub(crate) fn linear(&self, x: &[S], batch: usize) -> Result<Vec<S>> {
        let inp = &self.in_shape;
        let mut out = match (self.kind, &self.weight) {
            (LayerKind::AvgPool { window }, _) => {
                return Ok(kernels::pool_forward(x, (batch * inp[0], inp[1], inp[2]), window));
            }
            (LayerKind::Conv { stride, padding, .. }, Some(w)) => {
                let g = kernels::ConvGeom::new(batch, (inp[0], inp[1], inp[2]), (w.shape()[0], w.shape()[2], w.shape()[3]), stride, padding)?;
                kernels::conv_forward(x, w.data(), &g)
            }
            (LayerKind::PoolConv { stride, .. }, Some(w)) => {
                let g = kernels::ConvGeom::new(batch, (inp[0], inp[1], inp[2]), (w.shape()[0], w.shape()[2], w.shape()[3]), stride, Padding::Valid)?;
                kernels::conv_forward(x, w.data(), &g)
            }
            (LayerKind::Deconv { stride, .. }, Some(w)) => {
                let g = kernels::ConvGeom::for_transpose(batch, (inp[0], inp[1], inp[2]), (w.shape()[1], w.shape()[2], w.shape()[3]), stride)?;
                kernels::conv_backward_input(x, w.data(), &g)
            }
            (LayerKind::Dense { units }, Some(w)) => {
                let n: usize = inp.iter().product();
                kernels::dense_forward(x, w.data(), batch, n, units)
            }
            _ => return Err(Error::InvalidState(format!("layer {:?} has no weights", self.kind))),
        };
        if let Some(b) = &self.bias {
            let c = b.len();
            let inner = out.len() / (batch * c);
            for (i, chunk) in out.chunks_mut(inner).enumerate() {
                let bc = b.data()[i % c];
                chunk.iter_mut().for_each(|v| *v = *v + bc);
            }
        }
        Ok(out)
    }
}

fn apply_linear<S: Scalar>(
    tape: &mut Tape<S>,
    layer: &Layer<S>,
    x: NodeId,
    w: Option<NodeId>,
    b: Option<NodeId>,
) -> Result<NodeId> {
    let need = |p: Option<NodeId>| p.ok_or_else(|| Error::InvalidState(format!("layer {:?} has no weights", layer.kind)));
    let y = match layer.kind {
        LayerKind::Conv { stride, padding, .. } => tape.conv2d(x, need(w)?, stride, padding)?,
        LayerKind::PoolConv { stride, .. } => tape.conv2d(x, need(w)?, stride, Padding::Valid)?,
        LayerKind::Deconv { stride, .. } => tape.conv2d_transpose(x, need(w)?, stride)?,
        LayerKind::AvgPool { window } => return tape.avg_pool2d(x, window),
        LayerKind::Dense { .. } => {
            let shape = tape.value(x).shape().to_vec();
            let flat = if shape.len() > 2 {
                let rest: usize = shape[1..].iter().product();
                tape.reshape(x, &[shape[0], rest])?
            } else {
                x
            };
            tape.dense(flat, need(w)?)?
        }
    };
    match b {
        Some(b) => tape.add_bias(y, b, 1),
        None => Ok(y),
    }
}

/// Layer stack plus weights and conversion state.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<S> {
    pub task: Task,
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer<S>>,
    pub mode: Mode,
    /// Synaptic filter time constant attached at conversion.
    pub synapse: Option<S>,
    /// Set once hybrid fine-tuning has updated the weights.
    pub tuned: bool,
}

/// Per-layer values substituted for the activation during a hybrid pass.
#[derive(Clone, Debug)]
pub struct LayerOverride<S> {
    /// Measured activity, batched like the layer output.
    pub activity: Tensor<S>,
    /// Measured firing rate in Hz, same shape.
    pub hz: Tensor<S>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a, S> {
    /// Register weights as differentiable variables.
    pub trainable: bool,
    /// Record firing-rate nodes for neural layers.
    pub rates: bool,
    pub overrides: Option<&'a [Option<LayerOverride<S>>]>,
}

/// Node ids produced by [`Network::forward_tape`].
#[derive(Clone, Debug)]
pub struct TapeForward {
    pub output: NodeId,
    /// `(weight, bias)` per layer.
    pub params: Vec<Option<(NodeId, NodeId)>>,
    /// Firing rates (Hz) of neural layers, when requested.
    pub rates: Vec<Option<NodeId>>,
}

impl<S: Scalar> Network<S> {
    pub fn from_layers(
        task: Task,
        input_shape: Vec<usize>,
        specs: Vec<(LayerKind, NeuronKind, NeuronParams<S>)>,
        bias_init: impl Fn(NeuronKind) -> S,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut shape = input_shape.clone();
        let mut layers = Vec::with_capacity(specs.len());
        for (kind, neuron, params) in specs {
            params.validate()?;
            let out_shape = kind.output_shape(&shape)?;
            let (weight, bias) = match kind.param_shapes(&shape) {
                Some((ws, bs)) => {
                    let (fi, fo) = kind.fans(&shape);
                    let b0 = bias_init(neuron);
                    (Some(Tensor::glorot(&ws, fi, fo, rng)), Some(Tensor::full(&bs, b0)))
                }
                None => (None, None),
            };
            layers.push(Layer { kind, neuron, params, in_shape: shape, out_shape: out_shape.clone(), weight, bias });
            shape = out_shape;
        }
        let net = Self { task, input_shape, layers, mode: Mode::Ann, synapse: None, tuned: false };
        net.validate()?;
        Ok(net)
    }

    pub fn output_shape(&self) -> &[usize] {
        self.layers.last().map(|l| l.out_shape.as_slice()).unwrap_or(&self.input_shape)
    }

    /// Checks shape composition, weight shapes and mode/neuron consistency.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return invalid("network has no layers");
        }
        let mut shape = self.input_shape.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.in_shape != shape {
                return invalid(format!("layer {i}: input {:?} does not follow {shape:?}", layer.in_shape));
            }
            let out = layer.kind.output_shape(&shape)?;
            if out != layer.out_shape {
                return invalid(format!("layer {i}: output {:?} should be {out:?}", layer.out_shape));
            }
            match (layer.kind.param_shapes(&shape), &layer.weight, &layer.bias) {
                (Some((ws, bs)), Some(w), Some(b)) if w.shape() == ws && b.shape() == bs => {}
                (None, None, None) => {}
                _ => return invalid(format!("layer {i}: weights do not match {:?}", layer.kind)),
            }
            layer.params.validate()?;
            if matches!(layer.kind, LayerKind::AvgPool { .. }) && layer.neuron != NeuronKind::Linear {
                return invalid(format!("layer {i}: average pooling carries no neurons"));
            }
            match self.mode {
                Mode::Ann if layer.neuron.is_spiking() => {
                    return invalid(format!("layer {i}: spiking neurons in an ANN-mode network"));
                }
                Mode::Snn if i != last && layer.weight.is_some() && !layer.neuron.is_spiking() => {
                    return invalid(format!("layer {i}: SNN-mode hidden layer needs spiking neurons"));
                }
                Mode::Snn if layer.neuron.is_neural() && !layer.neuron.is_spiking() => {
                    return invalid(format!("layer {i}: rate neurons in an SNN-mode network"));
                }
                Mode::Snn if i == last && layer.neuron.is_spiking() => {
                    return invalid("SNN output layer must be a non-spiking readout");
                }
                _ => {}
            }
            shape = out;
        }
        Ok(())
    }

    /// Indices of layers that have neurons.
    pub fn neural_layers(&self) -> Vec<usize> {
        self.layers.iter().enumerate().filter(|(_, l)| l.neuron.is_neural()).map(|(i, _)| i).collect()
    }

    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.as_ref().map_or(0, Tensor::len) + l.bias.as_ref().map_or(0, Tensor::len)).sum()
    }

    /// Records a batched forward pass. Spiking layers use their smooth rate
    /// counterparts unless an override supplies measured activities.
    pub fn forward_tape(&self, tape: &mut Tape<S>, input: NodeId, opts: ForwardOptions<'_, S>) -> Result<TapeForward> {
        let mut x = input;
        let mut params = Vec::with_capacity(self.layers.len());
        let mut rates = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let (w, b) = match (&layer.weight, &layer.bias) {
                (Some(w), Some(b)) => {
                    let (w, b) = if opts.trainable {
                        (tape.var(w.clone()), tape.var(b.clone()))
                    } else {
                        (tape.constant(w.clone()), tape.constant(b.clone()))
                    };
                    params.push(Some((w, b)));
                    (Some(w), Some(b))
                }
                _ => {
                    params.push(None);
                    (None, None)
                }
            };
            let current = apply_linear(tape, layer, x, w, b)?;
            if !layer.neuron.is_neural() {
                rates.push(None);
                x = current;
                continue;
            }
            let smooth = layer.neuron.rate_counterpart();
            let hz_factor = smooth.hz_per_activity(&layer.params);
            let ov = opts.overrides.and_then(|o| o.get(i)).and_then(|o| o.as_ref());
            match ov {
                Some(ov) => {
                    let deriv = self.surrogate_derivative(layer, tape.value(current))?;
                    let hz_deriv = deriv.map(|d| d * hz_factor);
                    let act = tape.straight_through(current, ov.activity.clone(), deriv)?;
                    rates.push(if opts.rates {
                        Some(tape.straight_through(current, ov.hz.clone(), hz_deriv)?)
                    } else {
                        None
                    });
                    x = act;
                }
                None => {
                    let act = tape.activation(current, smooth, layer.params);
                    rates.push(if opts.rates { Some(tape.scale(act, hz_factor)) } else { None });
                    x = act;
                }
            }
        }
        Ok(TapeForward { output: x, params, rates })
    }

    fn surrogate_derivative(&self, layer: &Layer<S>, current: &Tensor<S>) -> Result<Tensor<S>> {
        let smooth = layer.neuron.rate_counterpart();
        let mut out = Vec::with_capacity(current.len());
        for &j in current.data() {
            out.push(smooth.activity_gradient(j, &layer.params)?);
        }
        Tensor::new(current.shape().to_vec(), out)
    }

    /// Rate-model forward pass of one sample or a batch.
    pub fn forward(&self, input: &Tensor<S>) -> Result<Tensor<S>> {
        let batched = input.rank() == self.input_shape.len() + 1;
        let x = if batched { input.clone() } else { input.batched() };
        if x.shape()[1..] != self.input_shape[..] {
            return invalid(format!("input {:?} does not match network input {:?}", input.shape(), self.input_shape));
        }
        let mut tape = Tape::new();
        let xi = tape.constant(x);
        let fwd = self.forward_tape(&mut tape, xi, ForwardOptions::default())?;
        let out = tape.value(fwd.output).clone();
        if batched {
            Ok(out)
        } else {
            out.index_outer(0)
        }
    }

    pub fn cast<T: Scalar>(&self) -> Network<T> {
        Network {
            task: self.task,
            input_shape: self.input_shape.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    kind: l.kind,
                    neuron: l.neuron,
                    params: l.params.cast(),
                    in_shape: l.in_shape.clone(),
                    out_shape: l.out_shape.clone(),
                    weight: l.weight.as_ref().map(Tensor::cast),
                    bias: l.bias.as_ref().map(Tensor::cast),
                })
                .collect(),
            mode: self.mode,
            synapse: self.synapse.map(|s| T::from_acc(s.to_acc())),
            tuned: self.tuned,
        }
    }
}

/// Width plan for the localization network.
#[derive(Clone, Debug, PartialEq)]
pub struct LocNetPlan {
    /// Channels of each conv + pool-conv stage.
    pub channels: Vec<usize>,
    /// Fully connected widths; the last must be 4.
    pub dense: Vec<usize>,
    /// Initial bias of soft-LIF layers.
    pub lif_bias: f64,
}

impl Default for LocNetPlan {
    fn default() -> Self {
        Self { channels: vec![16, 32, 64], dense: vec![256, 64, 16, 4], lif_bias: 1.0 }
    }
}

/// Conv + stride-2 pool-conv stages, then dense layers ending in 4 linear
/// box coordinates. Hidden layers are soft LIF.
pub fn build_locnet<S: Scalar>(
    input_shape: &[usize],
    plan: &LocNetPlan,
    params: NeuronParams<S>,
    rng: &mut impl Rng,
) -> Result<Network<S>> {
    let (c, h, w) = match *input_shape {
        [c, h, w] => (c, h, w),
        _ => return invalid(format!("locnet input must be [C,H,W], got {input_shape:?}")),
    };
    let factor = 1usize << plan.channels.len();
    if c == 0 || h % factor != 0 || w % factor != 0 || plan.channels.is_empty() {
        return invalid(format!("locnet input {h}x{w} must divide by {factor}"));
    }
    if plan.dense.last() != Some(&4) {
        return invalid("locnet must end in 4 box coordinates");
    }
    let mut specs = Vec::new();
    for &ch in &plan.channels {
        specs.push((LayerKind::Conv { out_channels: ch, kernel: 3, stride: 1, padding: Padding::Same }, NeuronKind::SoftLif, params));
        specs.push((LayerKind::PoolConv { out_channels: ch, kernel: 2, stride: 2 }, NeuronKind::SoftLif, params));
    }
    let last = plan.dense.len() - 1;
    for (i, &units) in plan.dense.iter().enumerate() {
        let neuron = if i == last { NeuronKind::Linear } else { NeuronKind::SoftLif };
        specs.push((LayerKind::Dense { units }, neuron, params));
    }
    let lif_bias = S::lit(plan.lif_bias);
    Network::from_layers(
        Task::Locnet,
        input_shape.to_vec(),
        specs,
        |n| if n == NeuronKind::SoftLif { lif_bias } else { S::zero() },
        rng,
    )
}

/// Width plan for the segmentation autoencoder.
#[derive(Clone, Debug, PartialEq)]
pub struct CaePlan {
    /// Encoder stage widths, mirrored by the decoder.
    pub channels: Vec<usize>,
}

impl Default for CaePlan {
    fn default() -> Self {
        Self { channels: vec![16, 32] }
    }
}

/// Encoder `(conv, conv, avg-pool)` stages and a bottleneck conv, decoder
/// `(deconv, conv)` stages and a linear 1-channel logit conv. No skip
/// connections. Hidden layers are rectified linear.
pub fn build_cae<S: Scalar>(input_shape: &[usize], plan: &CaePlan, params: NeuronParams<S>, rng: &mut impl Rng) -> Result<Network<S>> {
    let (c, h, w) = match *input_shape {
        [c, h, w] => (c, h, w),
        _ => return invalid(format!("cae input must be [C,H,W], got {input_shape:?}")),
    };
    let factor = 1usize << plan.channels.len();
    if c != 1 || h % factor != 0 || w % factor != 0 || plan.channels.is_empty() {
        return invalid(format!("cae input must be 1x H x W with H, W divisible by {factor}"));
    }
    let conv = |ch| LayerKind::Conv { out_channels: ch, kernel: 3, stride: 1, padding: Padding::Same };
    let relu = NeuronKind::Relu;
    let mut specs = Vec::new();
    for &ch in &plan.channels {
        specs.push((conv(ch), relu, params));
        specs.push((conv(ch), relu, params));
        specs.push((LayerKind::AvgPool { window: 2 }, NeuronKind::Linear, params));
    }
    let deepest = *plan.channels.last().unwrap_or(&1);
    specs.push((conv(deepest), relu, params));
    for (i, &ch) in plan.channels.iter().enumerate().rev() {
        let next = if i == 0 { ch } else { plan.channels[i - 1] };
        specs.push((LayerKind::Deconv { out_channels: ch, kernel: 2, stride: 2 }, relu, params));
        specs.push((conv(next), relu, params));
    }
    specs.push((conv(1), NeuronKind::Linear, params));
    Network::from_layers(Task::Cae, input_shape.to_vec(), specs, |_| S::zero(), rng)
}
