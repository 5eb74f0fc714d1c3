//! ANN training, conversion to a spiking network, and hybrid fine-tuning.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Sample;
use crate::error::{invalid, Error, Result};
use crate::graph::{ForwardOptions, LayerOverride, LossKind, Mode, Network, RateRegConfig, TapeForward};
use crate::neuron::NeuronKind;
use crate::scalar::Scalar;
use crate::sim::{run_snn_traced, Readout, SimConfig, HYBRID_STEPS};
use crate::tensor::{Adam, AdamState, Tape, Tensor};

/// Default synaptic time constant attached at conversion, seconds.
pub const DEFAULT_SYNAPSE: f64 = 0.005;
/// Minimum validation-loss improvement that resets early stopping.
pub const MIN_DELTA: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Zero freezes the weights, which turns a run into pure evaluation.
    pub learning_rate: f64,
    pub loss: LossKind,
    pub rate_reg: Option<RateRegConfig>,
    /// Post-training scale applied at conversion.
    pub post_scale: Option<f64>,
    pub hybrid: bool,
    /// Rollout length of hybrid forward passes.
    pub n_steps: usize,
    /// Step of hybrid rollouts, seconds.
    pub dt: f64,
    /// Hybrid readout; `None` averages the second half of the rollout.
    pub readout: Option<Readout>,
    /// Early-stopping patience in epochs; 0 disables it.
    pub patience: usize,
    pub batch_size: usize,
    /// Shuffling seed.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 0.01,
            loss: LossKind::Mse,
            rate_reg: None,
            post_scale: None,
            hybrid: false,
            n_steps: HYBRID_STEPS,
            dt: 1e-3,
            readout: None,
            patience: 3,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return invalid("epochs must be at least 1");
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return invalid(format!("learning rate must be finite and nonnegative, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return invalid("batch size must be at least 1");
        }
        if self.hybrid {
            self.sim::<f64>(None).validate()?;
        }
        if let Some(s) = self.post_scale {
            if !(s >= 1.0) || !s.is_finite() {
                return invalid(format!("post-training scale must be >= 1, got {s}"));
            }
        }
        if let Some(r) = &self.rate_reg {
            if r.weights.iter().any(|w| !(*w >= 0.0)) || !(r.target_hz >= 0.0) {
                return invalid("rate regularisation weights and target must be nonnegative");
            }
        }
        Ok(())
    }
}

/// Forward (spiking) and backward (smooth) neuron models of a hybrid layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HybridNeuronBinding {
    pub forward: NeuronKind,
    pub backward: NeuronKind,
}

impl HybridNeuronBinding {
    pub fn new(forward: NeuronKind, backward: NeuronKind) -> Result<Self> {
        match (forward, backward) {
            (NeuronKind::Lif, NeuronKind::SoftLif) | (NeuronKind::SpikingRelu, NeuronKind::Relu) => Ok(Self { forward, backward }),
            _ => invalid(format!("{forward:?} cannot be trained through {backward:?}")),
        }
    }

    pub fn for_spiking(forward: NeuronKind) -> Result<Self> {
        Self::new(forward, forward.rate_counterpart())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    /// Mean training objective (task loss plus regulariser) per epoch.
    pub train_loss: Vec<f64>,
    /// Task loss on the validation set per epoch, when one was given.
    pub val_loss: Vec<f64>,
    /// Epoch whose weights were kept, if early stopping triggered.
    pub stopped_at: Option<usize>,
}

/// First epoch `e` after which `patience` further epochs brought no
/// improvement larger than [`MIN_DELTA`]; the last epoch if that never
/// happens.
pub fn early_stop(history: &[f64], patience: usize) -> usize {
    early_stop_trigger(history, patience).unwrap_or(history.len().saturating_sub(1))
}

fn early_stop_trigger(history: &[f64], patience: usize) -> Option<usize> {
    if patience == 0 {
        return None;
    }
    (0..history.len()).find(|&e| {
        let next = &history[e + 1..];
        next.len() >= patience && next[..patience].iter().all(|&v| v >= history[e] - MIN_DELTA)
    })
}

type Optim<S> = Vec<Option<(AdamState<S>, AdamState<S>)>>;

fn optimiser<S: Scalar>(net: &Network<S>, lr: f64) -> Optim<S> {
    let hyper = Adam::new(S::lit(lr));
    net.layers
        .iter()
        .map(|l| match (&l.weight, &l.bias) {
            (Some(w), Some(b)) => Some((AdamState::new(w.shape(), hyper), AdamState::new(b.shape(), hyper))),
            _ => None,
        })
        .collect()
}

fn batches<'a, S>(data: &'a [Sample<S>], order: &'a [usize], size: usize) -> impl Iterator<Item = Vec<&'a Sample<S>>> + 'a {
    order.chunks(size).map(move |c| c.iter().map(|&i| &data[i]).collect())
}

fn stack_batch<S: Scalar>(batch: &[&Sample<S>]) -> Result<(Tensor<S>, Tensor<S>)> {
    let xs: Vec<&Tensor<S>> = batch.iter().map(|s| &s.input).collect();
    let ys: Vec<&Tensor<S>> = batch.iter().map(|s| &s.target).collect();
    Ok((Tensor::stack(&xs)?, Tensor::stack(&ys)?))
}

fn check_data<S: Scalar>(net: &Network<S>, data: &[Sample<S>]) -> Result<()> {
    if data.is_empty() {
        return invalid("training set is empty");
    }
    for s in data {
        if s.input.shape() != net.input_shape || s.target.shape() != net.output_shape() {
            return invalid(format!(
                "sample {:?} -> {:?} does not fit network {:?} -> {:?}",
                s.input.shape(),
                s.target.shape(),
                net.input_shape,
                net.output_shape()
            ));
        }
    }
    Ok(())
}

/// Records loss (+ regulariser) for one batch and returns `(objective, task loss)`.
fn objective<S: Scalar>(
    tape: &mut Tape<S>,
    fwd: &TapeForward,
    target: &Tensor<S>,
    cfg: &TrainConfig,
) -> Result<(crate::tensor::NodeId, crate::tensor::NodeId)> {
    let task = cfg.loss.record(tape, fwd.output, target)?;
    let total = match &cfg.rate_reg {
        Some(reg) => {
            let rates: Vec<_> = fwd.rates.iter().flatten().copied().collect();
            let r = crate::graph::rate_regularization_tape(tape, &rates, reg)?;
            tape.add(task, r)?
        }
        None => task,
    };
    Ok((total, task))
}

fn apply_update<S: Scalar>(net: &mut Network<S>, opt: &mut Optim<S>, tape: &Tape<S>, fwd: &TapeForward, loss: crate::tensor::NodeId) -> Result<()> {
    let mut grads = tape.backward(loss)?;
    for ((layer, st), p) in net.layers.iter_mut().zip(opt.iter_mut()).zip(&fwd.params) {
        if let (Some((sw, sb)), Some((wid, bid)), Some(w), Some(b)) = (st, p, layer.weight.as_mut(), layer.bias.as_mut()) {
            let gw = grads.take(*wid).unwrap_or_else(|| Tensor::zeros(w.shape()));
            let gb = grads.take(*bid).unwrap_or_else(|| Tensor::zeros(b.shape()));
            if !gw.all_finite() || !gb.all_finite() {
                return Err(Error::NonFinite("non-finite gradient".into()));
            }
            sw.apply(w, &gw)?;
            sb.apply(b, &gb)?;
        }
    }
    Ok(())
}

fn finite(v: f64, what: &str, epoch: usize, batch: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{what} became {v} at epoch {epoch}, batch {batch}; lower the learning rate")))
    }
}

/// Minibatch Adam on the rate-model network. The input network is not
/// modified.
pub fn train_ann<S: Scalar>(net: &Network<S>, data: &[Sample<S>], cfg: &TrainConfig) -> Result<(Network<S>, TrainHistory)> {
    cfg.validate()?;
    if net.mode != Mode::Ann {
        return Err(Error::InvalidState("train_ann needs an ANN-mode network".into()));
    }
    check_data(net, data)?;
    let mut net = net.clone();
    let mut opt = optimiser(&net, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = TrainHistory::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (bi, batch) in batches(data, &order, cfg.batch_size).enumerate() {
            let (x, y) = stack_batch(&batch)?;
            let mut tape = Tape::new();
            let xi = tape.constant(x);
            let opts = ForwardOptions { trainable: true, rates: cfg.rate_reg.is_some(), overrides: None };
            let fwd = net.forward_tape(&mut tape, xi, opts)?;
            let (loss, _) = objective(&mut tape, &fwd, &y, cfg)?;
            let lv = finite(tape.value(loss).item()?.to_acc(), "training loss", epoch, bi)?;
            total += lv * batch.len() as f64;
            apply_update(&mut net, &mut opt, &tape, &fwd, loss)?;
        }
        history.train_loss.push(total / data.len() as f64);
    }
    Ok((net, history))
}

/// Mean rate in Hz of every neural layer of an ANN-mode network over `data`.
pub fn ann_layer_rates<S: Scalar>(net: &Network<S>, data: &[Sample<S>]) -> Result<Vec<f64>> {
    if data.is_empty() {
        return invalid("no samples");
    }
    let mut sums: Vec<f64> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for chunk in data.chunks(32) {
        let refs: Vec<&Sample<S>> = chunk.iter().collect();
        let (x, _) = stack_batch(&refs)?;
        let mut tape = Tape::new();
        let xi = tape.constant(x);
        let fwd = net.forward_tape(&mut tape, xi, ForwardOptions { trainable: false, rates: true, overrides: None })?;
        let rates: Vec<_> = fwd.rates.iter().flatten().collect();
        sums.resize(rates.len(), 0.0);
        counts.resize(rates.len(), 0);
        for (i, &r) in rates.iter().enumerate() {
            let v = tape.value(*r);
            sums[i] += v.data().iter().map(|x| x.to_acc()).sum::<f64>();
            counts[i] += v.len();
        }
    }
    Ok(sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect())
}

/// Swaps every hidden rate neuron for its spiking counterpart and attaches
/// the default synapse. Weights are copied unchanged.
pub fn convert<S: Scalar>(net: &Network<S>) -> Result<Network<S>> {
    convert_with(net, Some(S::lit(DEFAULT_SYNAPSE)))
}

pub fn convert_with<S: Scalar>(net: &Network<S>, synapse: Option<S>) -> Result<Network<S>> {
    if net.mode == Mode::Snn {
        return Err(Error::InvalidState("network is already converted".into()));
    }
    if let Some(tau) = synapse {
        if !(tau > S::zero()) {
            return invalid(format!("synapse tau must be positive, got {tau}"));
        }
    }
    let mut out = net.clone();
    let last = out.layers.len() - 1;
    for (i, layer) in out.layers.iter_mut().enumerate() {
        if !layer.neuron.is_neural() {
            continue;
        }
        if i == last {
            return invalid(format!("output layer neuron {:?} has no linear readout", layer.neuron));
        }
        layer.neuron = layer
            .neuron
            .spiking_counterpart()
            .ok_or_else(|| Error::InvalidArgument(format!("layer {i}: no spiking version of {:?}", layer.neuron)))?;
    }
    out.mode = Mode::Snn;
    out.synapse = synapse;
    out.tuned = false;
    out.validate()?;
    Ok(out)
}

impl TrainConfig {
    /// Rollout settings of hybrid forward passes.
    pub fn sim<S: Scalar>(&self, synapse: Option<S>) -> SimConfig<S> {
        let mut sim = SimConfig::new(self.n_steps, synapse);
        sim.dt = S::lit(self.dt);
        if let Some(r) = self.readout {
            sim.readout = r;
        }
        sim
    }
}

/// Spiking forward pass of a batch, recorded on a tape whose activations
/// carry the measured window means forward and smooth-rate derivatives
/// (at the window-mean current) backward.
pub fn hybrid_forward<S: Scalar>(
    net: &Network<S>,
    tape: &mut Tape<S>,
    x: &Tensor<S>,
    sim: &SimConfig<S>,
    trainable: bool,
    rates: bool,
) -> Result<TapeForward> {
    let trace = run_snn_traced(net, x, sim)?;
    let overrides: Vec<Option<LayerOverride<S>>> = trace
        .activity
        .into_iter()
        .zip(trace.hz)
        .map(|(a, h)| match (a, h) {
            (Some(activity), Some(hz)) => Some(LayerOverride { activity, hz }),
            _ => None,
        })
        .collect();
    let xi = tape.constant(x.clone());
    net.forward_tape(tape, xi, ForwardOptions { trainable, rates, overrides: Some(&overrides) })
}

/// Mean task loss of the spiking network over `data`.
pub fn snn_loss<S: Scalar>(net: &Network<S>, data: &[Sample<S>], loss: LossKind, sim: &SimConfig<S>, batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in data.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample<S>> = chunk.iter().collect();
        let (x, y) = stack_batch(&refs)?;
        let out = run_snn_traced(net, &x, sim)?.output;
        total += loss.value(&out, &y)?.to_acc() * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Fine-tunes a converted network: spiking rollouts forward, smooth rate
/// derivatives backward, Adam updates. With a validation set and nonzero
/// patience, training stops per [`early_stop`] and the weights of the
/// chosen epoch are restored.
pub fn hybrid_finetune<S: Scalar>(
    net: &Network<S>,
    train: &[Sample<S>],
    val: &[Sample<S>],
    cfg: &TrainConfig,
) -> Result<(Network<S>, TrainHistory)> {
    cfg.validate()?;
    if net.mode != Mode::Snn {
        return Err(Error::InvalidState("hybrid fine-tuning needs a converted (SNN-mode) network".into()));
    }
    if !cfg.hybrid {
        return invalid("training config is not marked hybrid");
    }
    for layer in &net.layers {
        if layer.neuron.is_spiking() {
            HybridNeuronBinding::for_spiking(layer.neuron)?;
        }
    }
    check_data(net, train)?;
    if !val.is_empty() {
        check_data(net, val)?;
    }
    let sim = cfg.sim(net.synapse);
    let mut net = net.clone();
    let mut opt = optimiser(&net, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = TrainHistory::default();
    let mut snapshots: Vec<Network<S>> = Vec::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (bi, batch) in batches(train, &order, cfg.batch_size).enumerate() {
            let (x, y) = stack_batch(&batch)?;
            let mut tape = Tape::new();
            let fwd = hybrid_forward(&net, &mut tape, &x, &sim, true, cfg.rate_reg.is_some())?;
            let (loss, _) = objective(&mut tape, &fwd, &y, cfg)?;
            let lv = finite(tape.value(loss).item()?.to_acc(), "hybrid loss", epoch, bi)?;
            total += lv * batch.len() as f64;
            apply_update(&mut net, &mut opt, &tape, &fwd, loss)?;
        }
        history.train_loss.push(total / train.len() as f64);
        net.tuned = true;
        if val.is_empty() || cfg.patience == 0 {
            continue;
        }
        history.val_loss.push(snn_loss(&net, val, cfg.loss, &sim, cfg.batch_size)?);
        snapshots.push(net.clone());
        if let Some(e) = early_stop_trigger(&history.val_loss, cfg.patience) {
            history.stopped_at = Some(e);
            return Ok((snapshots.swap_remove(e), history));
        }
    }
    Ok((net, history))
}
