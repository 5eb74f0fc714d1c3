//! Clock-driven spiking rollouts, post-training scaling and spike statistics.

use crate::error::{invalid, Error, Result};
use crate::graph::{Layer, LayerKind, Mode, Network};
use crate::neuron::{lif_spike_step, relu_spike_step, LifState, NeuronKind, ReluState, SynapseState};
use crate::scalar::Scalar;
use crate::tensor::kernels::ConvGeom;
use crate::tensor::{Padding, Tensor};

/// How the output layer is decoded into a task output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Readout {
    LastStep,
    /// Mean over the final `k` steps.
    MeanOfLastK(usize),
}

impl Readout {
    fn window(self) -> usize {
        match self {
            Readout::LastStep => 1,
            Readout::MeanOfLastK(k) => k,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimConfig<S> {
    /// Step length in seconds.
    pub dt: S,
    pub n_steps: usize,
    /// Synaptic time constant in seconds, `None` for unfiltered spikes.
    pub synapse: Option<S>,
    pub readout: Readout,
}

/// Default evaluation length.
pub const EVAL_STEPS: usize = 200;
/// Default length of hybrid-training rollouts.
pub const HYBRID_STEPS: usize = 50;

impl<S: Scalar> Default for SimConfig<S> {
    fn default() -> Self {
        Self::new(EVAL_STEPS, Some(S::lit(0.005)))
    }
}

impl<S: Scalar> SimConfig<S> {
    /// `dt = 1 ms`, readout averaged over the second half of the run.
    pub fn new(n_steps: usize, synapse: Option<S>) -> Self {
        Self { dt: S::lit(1e-3), n_steps, synapse, readout: Readout::MeanOfLastK((n_steps / 2).max(1)) }
    }

    /// Uses the synapse attached to `net` at conversion.
    pub fn for_network(net: &Network<S>, n_steps: usize) -> Self {
        Self::new(n_steps, net.synapse)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > S::zero()) || !self.dt.is_finite() {
            return invalid(format!("dt must be positive, got {}", self.dt));
        }
        if self.n_steps == 0 {
            return invalid("n_steps must be at least 1");
        }
        let k = self.readout.window();
        if k == 0 || k > self.n_steps {
            return invalid(format!("readout window {k} outside 1..={}", self.n_steps));
        }
        if let Some(tau) = self.synapse {
            if !(tau > S::zero()) {
                return invalid(format!("synapse tau must be positive, got {tau}"));
            }
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        self.dt.to_acc() * self.n_steps as f64
    }
}

/// Spike totals of one or more rollouts.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SpikeRecord {
    /// Spikes per spiking layer, in layer order.
    pub layer_spikes: Vec<u64>,
    /// Neurons per spiking layer (times the batch size).
    pub layer_neurons: Vec<u64>,
    /// Simulated seconds.
    pub duration: f64,
}

impl SpikeRecord {
    pub fn total_spikes(&self) -> u64 {
        self.layer_spikes.iter().sum()
    }

    pub fn total_neurons(&self) -> u64 {
        self.layer_neurons.iter().sum()
    }

    /// Per-layer rates in Hz.
    pub fn layer_rates(&self) -> Vec<f64> {
        self.layer_spikes
            .iter()
            .zip(&self.layer_neurons)
            .map(|(&s, &n)| if n == 0 || self.duration <= 0.0 { 0.0 } else { s as f64 / (n as f64 * self.duration) })
            .collect()
    }

    /// Adds another rollout of the same network; durations accumulate.
    pub fn merge(&mut self, other: &SpikeRecord) -> Result<()> {
        if self.layer_spikes.is_empty() && self.duration == 0.0 {
            *self = other.clone();
            return Ok(());
        }
        if self.layer_neurons != other.layer_neurons {
            return invalid("merging spike records of different networks");
        }
        for (a, b) in self.layer_spikes.iter_mut().zip(&other.layer_spikes) {
            *a += b;
        }
        self.duration += other.duration;
        Ok(())
    }
}

/// Total spikes over neuron-seconds.
pub fn average_firing_rate(rec: &SpikeRecord) -> f64 {
    let denom = rec.total_neurons() as f64 * rec.duration;
    if denom <= 0.0 {
        0.0
    } else {
        rec.total_spikes() as f64 / denom
    }
}

#[derive(Clone, Debug)]
enum Neurons<S> {
    Lif(LifState<S>),
    Relu(ReluState<S>),
    Stateless,
}

#[derive(Clone, Debug)]
struct LayerState<S> {
    neurons: Neurons<S>,
    synapse: Option<SynapseState<S>>,
}

/// Membrane and filter state of every layer for one rollout.
#[derive(Clone, Debug)]
pub struct SimState<S> {
    layers: Vec<LayerState<S>>,
    batch: usize,
}

impl<S: Scalar> SimState<S> {
    pub fn new(net: &Network<S>, cfg: &SimConfig<S>, batch: usize) -> Result<Self> {
        let mut layers = Vec::with_capacity(net.layers.len());
        for layer in &net.layers {
            let n = layer.neurons() * batch;
            let neurons = match layer.neuron {
                NeuronKind::Lif => Neurons::Lif(LifState::new(n)),
                NeuronKind::SpikingRelu => Neurons::Relu(ReluState::new(n)),
                _ => Neurons::Stateless,
            };
            let synapse = match (layer.neuron.is_spiking(), cfg.synapse) {
                (true, Some(tau)) => Some(SynapseState::new(tau, cfg.dt, n)?),
                _ => None,
            };
            layers.push(LayerState { neurons, synapse });
        }
        Ok(Self { layers, batch })
    }

    pub fn reset(&mut self) {
        for l in &mut self.layers {
            match &mut l.neurons {
                Neurons::Lif(s) => s.reset(),
                Neurons::Relu(s) => s.reset(),
                Neurons::Stateless => {}
            }
            if let Some(s) = &mut l.synapse {
                s.reset();
            }
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// All membrane voltages and filter values are zero.
    pub fn is_at_rest(&self) -> bool {
        self.layers.iter().all(|l| {
            let v_ok = match &l.neurons {
                Neurons::Lif(s) => s.voltage.iter().chain(&s.refractory_remaining).all(|v| *v == S::zero()),
                Neurons::Relu(s) => s.voltage.iter().all(|v| *v == S::zero()),
                Neurons::Stateless => true,
            };
            v_ok && l.synapse.as_ref().map_or(true, |s| s.filtered.iter().all(|v| *v == S::zero()))
        })
    }
}

/// Window statistics of a rollout, used by hybrid training.
#[derive(Clone, Debug)]
pub struct SnnTrace<S> {
    /// Decoded output, batched.
    pub output: Tensor<S>,
    pub record: SpikeRecord,
    /// Per layer: window-mean of the signal passed downstream (filtered
    /// spikes for spiking layers), batched. `None` for non-neural layers.
    pub activity: Vec<Option<Tensor<S>>>,
    /// Per layer: firing rate in Hz over the readout window.
    pub hz: Vec<Option<Tensor<S>>>,
}

/// Presents `input` as a constant current for `cfg.n_steps` steps.
///
/// Accepts one sample `[C,H,W]` / `[N]` or a batch with a leading axis; the
/// output has the matching rank.
pub fn run_snn<S: Scalar>(net: &Network<S>, input: &Tensor<S>, cfg: &SimConfig<S>) -> Result<(Tensor<S>, SpikeRecord)> {
    let batched = input.rank() == net.input_shape.len() + 1;
    let x = if batched { input.clone() } else { input.batched() };
    let trace = run_snn_traced(net, &x, cfg)?;
    let out = if batched { trace.output } else { trace.output.index_outer(0)? };
    Ok((out, trace.record))
}

/// Batched rollout that also returns per-layer window statistics.
pub fn run_snn_traced<S: Scalar>(net: &Network<S>, input: &Tensor<S>, cfg: &SimConfig<S>) -> Result<SnnTrace<S>> {
    if net.mode != Mode::Snn {
        return Err(Error::InvalidState("run_snn needs a converted (SNN-mode) network".into()));
    }
    cfg.validate()?;
    if input.rank() != net.input_shape.len() + 1 || input.shape()[1..] != net.input_shape[..] {
        return invalid(format!("input {:?} does not match batched network input {:?}", input.shape(), net.input_shape));
    }
    let batch = input.shape()[0];
    let mut state = SimState::new(net, cfg, batch)?;
    rollout(net, input.data(), cfg, &mut state)
}

/// Spike input of a linear map: sparse events or a dense vector.
enum Drive<S> {
    Events(Vec<(usize, S)>),
    Dense(Vec<S>),
}

/// Weights reordered so that one input element touches a contiguous run of
/// output channels.
enum Scatter<S> {
    Conv { k: Vec<S>, c_in: usize, h: usize, w: usize, c_out: usize, kk: usize, stride: usize, pad_top: usize, pad_left: usize, ho: usize, wo: usize },
    Deconv { k: Vec<S>, c_in: usize, h: usize, w: usize, c_out: usize, kk: usize, stride: usize, ho: usize, wo: usize },
    Dense { wt: Vec<S>, n: usize, m: usize },
    Pool { h: usize, w: usize, win: usize },
}

impl<S: Scalar> Scatter<S> {
    fn new(layer: &Layer<S>) -> Result<Self> {
        let (i, o) = (&layer.in_shape, &layer.out_shape);
        let missing = || Error::InvalidState(format!("layer {:?} has no weights", layer.kind));
        Ok(match layer.kind {
            LayerKind::Conv { .. } | LayerKind::PoolConv { .. } => {
                let k = layer.weight.as_ref().ok_or_else(missing)?;
                let (stride, padding) = match layer.kind {
                    LayerKind::Conv { stride, padding, .. } => (stride, padding),
                    LayerKind::PoolConv { stride, .. } => (stride, Padding::Valid),
                    _ => unreachable!(),
                };
                let kk = k.shape()[2];
                let (c_out, c_in) = (k.shape()[0], k.shape()[1]);
                let g = ConvGeom::new(1, (i[0], i[1], i[2]), (c_out, kk, kk), stride, padding)?;
                // [co, ci, ky, kx] -> [ci, ky, kx, co]
                let mut r = vec![S::zero(); k.len()];
                for co in 0..c_out {
                    for rest in 0..c_in * kk * kk {
                        r[rest * c_out + co] = k.data()[co * c_in * kk * kk + rest];
                    }
                }
                Scatter::Conv { k: r, c_in, h: i[1], w: i[2], c_out, kk, stride, pad_top: g.pad_top, pad_left: g.pad_left, ho: o[1], wo: o[2] }
            }
            LayerKind::Deconv { stride, .. } => {
                let k = layer.weight.as_ref().ok_or_else(missing)?;
                let (c_in, c_out, kk) = (k.shape()[0], k.shape()[1], k.shape()[2]);
                // [ci, co, ky, kx] -> [ci, ky, kx, co]
                let mut r = vec![S::zero(); k.len()];
                for ci in 0..c_in {
                    for co in 0..c_out {
                        for q in 0..kk * kk {
                            r[(ci * kk * kk + q) * c_out + co] = k.data()[(ci * c_out + co) * kk * kk + q];
                        }
                    }
                }
                Scatter::Deconv { k: r, c_in, h: i[1], w: i[2], c_out, kk, stride, ho: o[1], wo: o[2] }
            }
            LayerKind::Dense { units } => {
                let w = layer.weight.as_ref().ok_or_else(missing)?;
                let n: usize = i.iter().product();
                let mut wt = vec![S::zero(); w.len()];
                for m in 0..units {
                    for j in 0..n {
                        wt[j * units + m] = w.data()[m * n + j];
                    }
                }
                Scatter::Dense { wt, n, m: units }
            }
            LayerKind::AvgPool { window } => Scatter::Pool { h: i[1], w: i[2], win: window },
        })
    }

    /// Adds `W e` for every event `e` into `out` (no bias).
    fn scatter(&self, events: &[(usize, S)], out: &mut [S]) {
        match self {
            Scatter::Conv { k, c_in, h, w, c_out, kk, stride, pad_top, pad_left, ho, wo } => {
                let plane = h * w;
                let oplane = ho * wo;
                for &(idx, v) in events {
                    let (b, rem) = (idx / (c_in * plane), idx % (c_in * plane));
                    let (ci, iy, ix) = (rem / plane, (rem % plane) / w, rem % w);
                    let obase = b * c_out * oplane;
                    for ky in 0..*kk {
                        let ny = iy + pad_top;
                        if ny < ky || (ny - ky) % stride != 0 {
                            continue;
                        }
                        let oy = (ny - ky) / stride;
                        if oy >= *ho {
                            continue;
                        }
                        for kx in 0..*kk {
                            let nx = ix + pad_left;
                            if nx < kx || (nx - kx) % stride != 0 {
                                continue;
                            }
                            let ox = (nx - kx) / stride;
                            if ox >= *wo {
                                continue;
                            }
                            let kr = &k[((ci * kk + ky) * kk + kx) * c_out..][..*c_out];
                            let pos = obase + oy * wo + ox;
                            for (co, &kv) in kr.iter().enumerate() {
                                let o = &mut out[pos + co * oplane];
                                *o = *o + v * kv;
                            }
                        }
                    }
                }
            }
            Scatter::Deconv { k, c_in, h, w, c_out, kk, stride, ho, wo } => {
                let plane = h * w;
                let oplane = ho * wo;
                for &(idx, v) in events {
                    let (b, rem) = (idx / (c_in * plane), idx % (c_in * plane));
                    let (ci, iy, ix) = (rem / plane, (rem % plane) / w, rem % w);
                    let obase = b * c_out * oplane;
                    for ky in 0..*kk {
                        for kx in 0..*kk {
                            let pos = obase + (iy * stride + ky) * wo + ix * stride + kx;
                            let kr = &k[((ci * kk + ky) * kk + kx) * c_out..][..*c_out];
                            for (co, &kv) in kr.iter().enumerate() {
                                let o = &mut out[pos + co * oplane];
                                *o = *o + v * kv;
                            }
                        }
                    }
                }
            }
            Scatter::Dense { wt, n, m } => {
                for &(idx, v) in events {
                    let (b, j) = (idx / n, idx % n);
                    let row = &wt[j * m..][..*m];
                    for (o, &wv) in out[b * m..][..*m].iter_mut().zip(row) {
                        *o = *o + v * wv;
                    }
                }
            }
            Scatter::Pool { .. } => unreachable!("pooling maps events to events"),
        }
    }

    /// Average pooling of events, still as events.
    fn pool_events(&self, events: Vec<(usize, S)>) -> Vec<(usize, S)> {
        match *self {
            Scatter::Pool { h, w, win } => {
                let plane = h * w;
                let (ho, wo) = (h / win, w / win);
                let norm = S::one() / S::lit((win * win) as f64);
                events
                    .into_iter()
                    .filter_map(|(idx, v)| {
                        let (p, rem) = (idx / plane, idx % plane);
                        let (iy, ix) = (rem / w, rem % w);
                        let (oy, ox) = (iy / win, ix / win);
                        (oy < ho && ox < wo).then(|| (p * ho * wo + oy * wo + ox, v * norm))
                    })
                    .collect()
            }
            _ => events,
        }
    }
}

/// Applies layer `i`'s linear map (with bias) to a drive.
fn propagate<S: Scalar>(layer: &Layer<S>, scatter: &Scatter<S>, drive: Drive<S>, batch: usize) -> Result<Drive<S>> {
    match (drive, scatter) {
        (Drive::Events(ev), Scatter::Pool { .. }) => Ok(Drive::Events(scatter.pool_events(ev))),
        (Drive::Events(ev), _) => {
            let n = layer.neurons() * batch;
            let mut out = vec![S::zero(); n];
            if let Some(b) = &layer.bias {
                let c = b.len();
                let inner = n / (batch * c);
                for (j, chunk) in out.chunks_mut(inner).enumerate() {
                    let bv = b.data()[j % c];
                    chunk.iter_mut().for_each(|o| *o = bv);
                }
            }
            scatter.scatter(&ev, &mut out);
            Ok(Drive::Dense(out))
        }
        (Drive::Dense(x), _) => Ok(Drive::Dense(layer.linear(&x, batch)?)),
    }
}

fn densify<S: Scalar>(drive: Drive<S>, n: usize) -> Vec<S> {
    match drive {
        Drive::Dense(v) => v,
        Drive::Events(ev) => {
            let mut out = vec![S::zero(); n];
            for (i, v) in ev {
                out[i] = out[i] + v;
            }
            out
        }
    }
}

// Event-driven rollout. A layer fed by filtered spikes sees the current
// J_t = W y_t + b with y_t = a y_{t-1} + (1 - a) s_t, which obeys
// J_t = a J_{t-1} + (1 - a) (W s_t + b); only the spikes s_t are propagated.
// Linear layers in between (pooling) are folded into the drive.
fn rollout<S: Scalar>(net: &Network<S>, input: &[S], cfg: &SimConfig<S>, state: &mut SimState<S>) -> Result<SnnTrace<S>> {
    let batch = state.batch;
    let n_layers = net.layers.len();
    let last = n_layers - 1;
    let window = cfg.readout.window();
    let start = cfg.n_steps - window;
    let decay = match cfg.synapse {
        Some(tau) => (-cfg.dt / tau).exp(),
        None => S::zero(),
    };
    let gain = S::one() - decay;

    // Currents held by layers: constant up to the first spiking layer, then
    // the response to silent upstream layers.
    let mut held: Vec<Option<Vec<S>>> = vec![None; n_layers];
    let mut first_spiking = None;
    {
        let mut sig: Vec<S> = input.to_vec();
        for (i, layer) in net.layers.iter().enumerate() {
            let cur = layer.linear(&sig, batch)?;
            sig = if layer.neuron.is_spiking() {
                first_spiking.get_or_insert(i);
                vec![S::zero(); cur.len()]
            } else {
                cur.clone()
            };
            held[i] = Some(cur);
        }
    }
    // a layer's current is constant if nothing upstream spikes
    let constant = |i: usize| first_spiking.map_or(true, |f| i <= f);
    let scatters: Vec<Scatter<S>> = net.layers.iter().map(Scatter::new).collect::<Result<_>>()?;

    let mut act_acc: Vec<Option<Vec<f64>>> =
        net.layers.iter().map(|l| l.neuron.is_spiking().then(|| vec![0.0; l.neurons() * batch])).collect();
    let mut spike_acc = act_acc.clone();
    let mut out_acc = vec![0.0f64; net.layers[last].neurons() * batch];
    let mut counts = vec![0u64; n_layers];
    let mut spikes: Vec<Vec<S>> = net.layers.iter().map(|l| vec![S::zero(); l.neurons() * batch]).collect();

    for t in 0..cfg.n_steps {
        let in_window = t >= start;
        let mut drive: Option<Drive<S>> = None;
        for (i, layer) in net.layers.iter().enumerate() {
            let needs_current = layer.neuron.is_spiking() || i == last;
            if !constant(i) {
                let d = propagate(layer, &scatters[i], drive.take().expect("upstream drive"), batch)?;
                if needs_current {
                    let d = densify(d, layer.neurons() * batch);
                    let cur = held[i].as_mut().expect("held current");
                    for (c, &v) in cur.iter_mut().zip(&d) {
                        *c = decay * *c + gain * v;
                    }
                } else {
                    drive = Some(d);
                }
            }
            let cur = held[i].as_deref().expect("held current");
            let ls = &mut state.layers[i];
            let n = match &mut ls.neurons {
                Neurons::Lif(st) => lif_spike_step(st, cur, cfg.dt, &layer.params, &mut spikes[i]),
                Neurons::Relu(st) => relu_spike_step(st, cur, cfg.dt, &layer.params, &mut spikes[i]),
                Neurons::Stateless => {
                    if i == last && in_window {
                        out_acc.iter_mut().zip(cur).for_each(|(a, v)| *a += v.to_acc());
                    }
                    continue;
                }
            };
            counts[i] += n;
            let events: Vec<(usize, S)> =
                spikes[i].iter().enumerate().filter(|(_, &v)| v != S::zero()).map(|(j, &v)| (j, v)).collect();
            if in_window {
                let y = match &mut ls.synapse {
                    Some(s) => s.step(&spikes[i]),
                    None => &spikes[i][..],
                };
                let acc = act_acc[i].as_mut().expect("spiking layer");
                acc.iter_mut().zip(y).for_each(|(a, v)| *a += v.to_acc());
                let acc = spike_acc[i].as_mut().expect("spiking layer");
                for &(j, v) in &events {
                    acc[j] += v.to_acc();
                }
            } else if let Some(s) = &mut ls.synapse {
                s.step(&spikes[i]);
            }
            drive = Some(Drive::Events(events));
        }
    }

    let k = window as f64;
    let shape_of = |l: &Layer<S>| {
        let mut s = vec![batch];
        s.extend_from_slice(&l.out_shape);
        s
    };
    let mean = |acc: Vec<f64>, f: f64| acc.into_iter().map(|a| S::from_acc(a * f / k)).collect::<Vec<S>>();
    let output = if constant(last) {
        Tensor::new(shape_of(&net.layers[last]), held[last].take().expect("held current"))?
    } else {
        Tensor::new(shape_of(&net.layers[last]), mean(out_acc, 1.0))?
    };
    let mut activity = Vec::with_capacity(n_layers);
    let mut hz = Vec::with_capacity(n_layers);
    for (i, layer) in net.layers.iter().enumerate() {
        activity.push(match act_acc[i].take() {
            Some(acc) => Some(Tensor::new(shape_of(layer), mean(acc, 1.0))?),
            None => None,
        });
        let per_act = layer.neuron.hz_per_activity(&layer.params).to_acc();
        hz.push(match spike_acc[i].take() {
            Some(acc) => Some(Tensor::new(shape_of(layer), mean(acc, per_act))?),
            None => None,
        });
    }
    let spiking: Vec<usize> = (0..n_layers).filter(|&i| net.layers[i].neuron.is_spiking()).collect();
    let record = SpikeRecord {
        layer_spikes: spiking.iter().map(|&i| counts[i]).collect(),
        layer_neurons: spiking.iter().map(|&i| (net.layers[i].neurons() * batch) as u64).collect(),
        duration: cfg.duration(),
    };
    Ok(SnnTrace { output, record, activity, hz })
}

/// Sets every neuron's scale to `s`. Rate-mode outputs are unchanged
/// because each activation divides its output by the same factor.
pub fn apply_post_training_scaling<S: Scalar>(net: &Network<S>, s: S) -> Result<Network<S>> {
    if !(s >= S::one()) || !s.is_finite() {
        return invalid(format!("post-training scale must be a finite value >= 1, got {s}"));
    }
    let mut out = net.clone();
    for layer in &mut out.layers {
        layer.params.scale = s;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{LayerKind, Task};
    use crate::neuron::NeuronParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_relu(scale: f64) -> Network<f64> {
        let p = NeuronParams::default().with_scale(scale);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Network::from_layers(
            Task::Locnet,
            vec![1],
            vec![(LayerKind::Dense { units: 1 }, NeuronKind::Relu, p), (LayerKind::Dense { units: 1 }, NeuronKind::Linear, p)],
            |_| 0.0,
            &mut rng,
        )
        .unwrap();
        for l in &mut net.layers {
            l.weight = Some(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        }
        net.layers[0].neuron = NeuronKind::SpikingRelu;
        net.mode = Mode::Snn;
        net.synapse = Some(0.005);
        net
    }

    #[test]
    fn single_neuron_rate_and_readout() {
        let net = single_relu(1000.0);
        let cfg = SimConfig::for_network(&net, 500);
        let (y, rec) = run_snn(&net, &Tensor::vector(vec![0.25]), &cfg).unwrap();
        assert!((y.data()[0] - 0.25).abs() / 0.25 < 0.05, "readout {}", y.data()[0]);
        assert_eq!(rec.layer_spikes, vec![125]);
        assert!((average_firing_rate(&rec) - 250.0).abs() < 1.0);
        assert!((rec.duration - 0.5).abs() < 1e-12);
    }

    // Straightforward rollout that recomputes every current from the
    // filtered spikes of the previous layer.
    fn dense_reference(net: &Network<f64>, x: &Tensor<f64>, cfg: &SimConfig<f64>) -> (Vec<f64>, Vec<u64>) {
        let batch = x.shape()[0];
        let mut lif: Vec<LifState<f64>> = net.layers.iter().map(|l| LifState::new(l.neurons() * batch)).collect();
        let mut relu: Vec<ReluState<f64>> = net.layers.iter().map(|l| ReluState::new(l.neurons() * batch)).collect();
        let mut syn: Vec<SynapseState<f64>> =
            net.layers.iter().map(|l| SynapseState::new(cfg.synapse.unwrap(), cfg.dt, l.neurons() * batch).unwrap()).collect();
        let k = cfg.readout.window();
        let mut out = vec![0.0; net.layers.last().unwrap().neurons() * batch];
        let mut counts = vec![];
        for (i, l) in net.layers.iter().enumerate() {
            if l.neuron.is_spiking() {
                counts.push((i, 0u64));
            }
        }
        for t in 0..cfg.n_steps {
            let mut sig = x.data().to_vec();
            for (i, l) in net.layers.iter().enumerate() {
                let cur = l.linear(&sig, batch).unwrap();
                let mut s = vec![0.0; cur.len()];
                let n = match l.neuron {
                    NeuronKind::Lif => lif_spike_step(&mut lif[i], &cur, cfg.dt, &l.params, &mut s),
                    NeuronKind::SpikingRelu => relu_spike_step(&mut relu[i], &cur, cfg.dt, &l.params, &mut s),
                    _ => {
                        sig = cur;
                        continue;
                    }
                };
                counts.iter_mut().find(|c| c.0 == i).unwrap().1 += n;
                sig = syn[i].step(&s).to_vec();
            }
            if t >= cfg.n_steps - k {
                out.iter_mut().zip(&sig).for_each(|(o, v)| *o += v / k as f64);
            }
        }
        (out, counts.into_iter().map(|c| c.1).collect())
    }

    #[test]
    fn event_propagation_matches_dense_recomputation() {
        use crate::graph::{build_cae, build_locnet, CaePlan, LocNetPlan};
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = NeuronParams::default().with_amplitude(0.01);
        let loc = build_locnet::<f64>(&[1, 16, 16], &LocNetPlan { channels: vec![3, 4], dense: vec![6, 4], lif_bias: 3.0 }, p, &mut rng).unwrap();
        let mut cae = build_cae::<f64>(&[1, 8, 8], &CaePlan { channels: vec![2, 3] }, NeuronParams::default().with_scale(400.0), &mut rng).unwrap();
        for l in &mut cae.layers {
            if let Some(b) = &mut l.bias {
                *b = Tensor::full(b.shape(), 0.3);
            }
        }
        for net in [loc, cae] {
            let snn = crate::train::convert(&net).unwrap();
            let x = Tensor::<f64>::uniform(&[2, 1, snn.input_shape[1], snn.input_shape[2]], 0.0, 1.0, &mut rng);
            let cfg = SimConfig::for_network(&snn, 60);
            let trace = run_snn_traced(&snn, &x, &cfg).unwrap();
            let (out, counts) = dense_reference(&snn, &x, &cfg);
            assert_eq!(trace.record.layer_spikes, counts);
            assert!(trace.record.layer_spikes.iter().all(|&c| c > 0), "{:?}", trace.record);
            for (a, b) in trace.output.data().iter().zip(&out) {
                assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_weights_are_silent() {
        let mut net = single_relu(1000.0);
        for l in &mut net.layers {
            l.weight = Some(Tensor::zeros(&[1, 1]));
        }
        let (y, rec) = run_snn(&net, &Tensor::vector(vec![0.7]), &SimConfig::for_network(&net, 100)).unwrap();
        assert_eq!(y.data(), &[0.0]);
        assert_eq!(rec.total_spikes(), 0);
    }

    #[test]
    fn ann_mode_rejected_and_config_checked() {
        let mut net = single_relu(1.0);
        let cfg = SimConfig::for_network(&net, 10);
        net.mode = Mode::Ann;
        assert!(matches!(run_snn(&net, &Tensor::vector(vec![1.0]), &cfg), Err(Error::InvalidState(_))));
        let bad = SimConfig { readout: Readout::MeanOfLastK(11), ..cfg };
        assert!(bad.validate().is_err());
        assert!(SimConfig::<f64>::new(0, None).validate().is_err());
    }

    #[test]
    fn counts_do_not_depend_on_readout() {
        let net = single_relu(1000.0);
        let x = Tensor::vector(vec![0.4]);
        let a = SimConfig { readout: Readout::LastStep, ..SimConfig::for_network(&net, 300) };
        let b = SimConfig { readout: Readout::MeanOfLastK(300), ..a };
        assert_eq!(run_snn(&net, &x, &a).unwrap().1, run_snn(&net, &x, &b).unwrap().1);
    }

    #[test]
    fn state_reset_returns_to_rest() {
        let net = single_relu(1000.0);
        let cfg = SimConfig::for_network(&net, 50);
        let mut st = SimState::new(&net, &cfg, 1).unwrap();
        rollout(&net, &[0.3], &cfg, &mut st).unwrap();
        assert!(!st.is_at_rest());
        st.reset();
        assert!(st.is_at_rest());
    }

    #[test]
    fn firing_rate_arithmetic() {
        let rec = SpikeRecord { layer_spikes: vec![500], layer_neurons: vec![10], duration: 0.2 };
        assert_eq!(average_firing_rate(&rec), 250.0);
        let rec = SpikeRecord { layer_spikes: vec![100, 900], layer_neurons: vec![10, 30], duration: 0.5 };
        let rates = rec.layer_rates();
        let weighted = (rates[0] * 10.0 + rates[1] * 30.0) / 40.0;
        assert!((average_firing_rate(&rec) - weighted).abs() < 1e-12);
        assert_eq!(average_firing_rate(&SpikeRecord { layer_spikes: vec![0], layer_neurons: vec![3], duration: 1.0 }), 0.0);
    }

    #[test]
    fn scaling_rejects_small_factors() {
        let net = single_relu(1.0);
        assert!(apply_post_training_scaling(&net, 0.5).is_err());
        let s = apply_post_training_scaling(&net, 1000.0).unwrap();
        assert!(s.layers.iter().all(|l| l.params.scale == 1000.0));
    }
}
