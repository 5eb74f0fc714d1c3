//! Neuron models and the synaptic low-pass filter.
//!
//! Rate models map a constant input current to a steady-state activity and
//! are differentiable (soft LIF everywhere, rectified linear almost
//! everywhere). Spiking models are clocked with a fixed step `dt` and emit
//! spikes of height `amplitude / (dt * scale)`, so the time average of a
//! spike train equals the activity of the matching rate model.

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

/// Constants of one neuron population.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NeuronParams<S> {
    /// Membrane time constant in seconds.
    pub tau_rc: S,
    /// Refractory period in seconds.
    pub tau_ref: S,
    /// Firing threshold.
    pub v_th: S,
    /// Softplus smoothing width for the soft LIF rate curve.
    pub gamma: S,
    /// Output scale applied to every activity.
    pub amplitude: S,
    /// Post-training firing-rate scale: inputs are multiplied by it and
    /// outputs divided by it.
    pub scale: S,
}

impl<S: Scalar> Default for NeuronParams<S> {
    fn default() -> Self {
        Self {
            tau_rc: S::lit(0.02),
            tau_ref: S::lit(0.002),
            v_th: S::one(),
            gamma: S::lit(0.005),
            amplitude: S::one(),
            scale: S::one(),
        }
    }
}

impl<S: Scalar> NeuronParams<S> {
    pub fn validate(&self) -> Result<()> {
        let ok = self.tau_rc > S::zero()
            && self.tau_ref >= S::zero()
            && self.v_th > S::zero()
            && self.gamma >= S::zero()
            && self.amplitude > S::zero()
            && self.scale >= S::one();
        if !ok {
            return invalid(format!("neuron parameters out of range: {self:?}"));
        }
        Ok(())
    }

    pub fn with_amplitude(mut self, amplitude: S) -> Self {
        self.amplitude = amplitude;
        self
    }

    pub fn with_scale(mut self, scale: S) -> Self {
        self.scale = scale;
        self
    }

    pub fn with_gamma(mut self, gamma: S) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn cast<T: Scalar>(&self) -> NeuronParams<T> {
        let c = |v: S| T::from_acc(v.to_acc());
        NeuronParams {
            tau_rc: c(self.tau_rc),
            tau_ref: c(self.tau_ref),
            v_th: c(self.v_th),
            gamma: c(self.gamma),
            amplitude: c(self.amplitude),
            scale: c(self.scale),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Smoothing {
    Hard,
    Soft,
}

#[inline]
pub fn rho_hard<S: Scalar>(x: S) -> S {
    x.max(S::zero())
}

/// `gamma * ln(1 + exp(x / gamma))`, overflow-safe.
#[inline]
pub fn rho_soft<S: Scalar>(x: S, gamma: S) -> S {
    let u = x / gamma;
    if u > S::zero() {
        x + gamma * (-u).exp().ln_1p()
    } else {
        gamma * u.exp().ln_1p()
    }
}

/// Steady-state LIF firing rate (Hz, times `amplitude`) for constant current `j`.
///
/// The hard variant is exactly zero at or below threshold. The soft variant
/// is zero only where the softplus underflows.
pub fn lif_rate<S: Scalar>(j: S, params: &NeuronParams<S>, smoothing: Smoothing) -> S {
    let x = j - params.v_th;
    let rho = match smoothing {
        Smoothing::Hard => rho_hard(x),
        Smoothing::Soft if params.gamma > S::zero() => rho_soft(x, params.gamma),
        Smoothing::Soft => rho_hard(x),
    };
    if rho <= S::zero() {
        return S::zero();
    }
    let denom = params.tau_ref + params.tau_rc * (params.v_th / rho).ln_1p();
    params.amplitude / denom
}

/// Derivative of [`lif_rate`] with respect to `j`.
///
/// Finite everywhere for soft smoothing. The hard curve has no usable
/// derivative at or below threshold.
pub fn lif_rate_gradient<S: Scalar>(j: S, params: &NeuronParams<S>, smoothing: Smoothing) -> Result<S> {
    let x = j - params.v_th;
    let soft = smoothing == Smoothing::Soft && params.gamma > S::zero();
    let (rho, drho) = if soft {
        let u = x / params.gamma;
        let sig = if u >= S::zero() {
            S::one() / (S::one() + (-u).exp())
        } else {
            let e = u.exp();
            e / (S::one() + e)
        };
        (rho_soft(x, params.gamma), sig)
    } else {
        if x <= S::zero() {
            return Err(Error::UndefinedGradient(format!(
                "hard LIF rate has no gradient at j = {j} <= v_th"
            )));
        }
        (x, S::one())
    };
    if rho <= S::zero() || drho <= S::zero() {
        return Ok(S::zero());
    }
    let v = params.v_th;
    let denom = params.tau_ref + params.tau_rc * (v / rho).ln_1p();
    // d/drho ln(1 + v/rho) = -v / (rho (rho + v))
    let g = params.amplitude * params.tau_rc * v * drho / (rho * (rho + v) * denom * denom);
    Ok(if g.is_finite() { g } else { S::zero() })
}

/// Rectified-linear activity `amplitude * max(j, 0)`.
#[inline]
pub fn relu_rate<S: Scalar>(j: S, params: &NeuronParams<S>) -> S {
    params.amplitude * rho_hard(j)
}

#[inline]
pub fn relu_rate_gradient<S: Scalar>(j: S, params: &NeuronParams<S>) -> S {
    if j > S::zero() {
        params.amplitude
    } else {
        S::zero()
    }
}

/// Which activation a layer applies to its input current.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NeuronKind {
    /// Smoothed LIF rate curve.
    SoftLif,
    /// Spiking LIF.
    Lif,
    /// Rectified-linear rate.
    Relu,
    /// Spiking rectified linear (integrate, fire, subtract).
    SpikingRelu,
    /// Identity, no neurons.
    Linear,
}

impl NeuronKind {
    pub fn is_spiking(self) -> bool {
        matches!(self, Self::Lif | Self::SpikingRelu)
    }

    /// Has a firing rate (spiking or not).
    pub fn is_neural(self) -> bool {
        !matches!(self, Self::Linear)
    }

    /// Spiking model a rate model is converted to.
    pub fn spiking_counterpart(self) -> Option<Self> {
        match self {
            Self::SoftLif | Self::Lif => Some(Self::Lif),
            Self::Relu | Self::SpikingRelu => Some(Self::SpikingRelu),
            Self::Linear => None,
        }
    }

    /// Smooth rate model used on the backward pass for a spiking model.
    pub fn rate_counterpart(self) -> Self {
        match self {
            Self::Lif | Self::SoftLif => Self::SoftLif,
            Self::SpikingRelu | Self::Relu => Self::Relu,
            Self::Linear => Self::Linear,
        }
    }

    /// Activity for input current `j` under post-training scale `s`:
    /// `amplitude * r(s j) / s`. Spiking kinds use their exact rate curves.
    pub fn activity<S: Scalar>(self, j: S, p: &NeuronParams<S>) -> S {
        match self {
            Self::SoftLif => lif_rate(p.scale * j, p, Smoothing::Soft) / p.scale,
            Self::Lif => lif_rate(p.scale * j, p, Smoothing::Hard) / p.scale,
            Self::Relu | Self::SpikingRelu => relu_rate(j, p),
            Self::Linear => j,
        }
    }

    pub fn activity_gradient<S: Scalar>(self, j: S, p: &NeuronParams<S>) -> Result<S> {
        match self {
            Self::SoftLif => lif_rate_gradient(p.scale * j, p, Smoothing::Soft),
            Self::Lif => lif_rate_gradient(p.scale * j, p, Smoothing::Hard),
            Self::Relu | Self::SpikingRelu => Ok(relu_rate_gradient(j, p)),
            Self::Linear => Ok(S::one()),
        }
    }

    /// Factor converting an activity into a firing rate in Hz.
    pub fn hz_per_activity<S: Scalar>(self, p: &NeuronParams<S>) -> S {
        match self {
            Self::Linear => S::zero(),
            _ => p.scale / p.amplitude,
        }
    }
}

/// Membrane state of a population of spiking LIF neurons.
#[derive(Clone, Debug, PartialEq)]
pub struct LifState<S> {
    pub voltage: Vec<S>,
    pub refractory_remaining: Vec<S>,
}

impl<S: Scalar> LifState<S> {
    pub fn new(n: usize) -> Self {
        Self { voltage: vec![S::zero(); n], refractory_remaining: vec![S::zero(); n] }
    }

    pub fn reset(&mut self) {
        self.voltage.iter_mut().for_each(|v| *v = S::zero());
        self.refractory_remaining.iter_mut().for_each(|v| *v = S::zero());
    }

    pub fn len(&self) -> usize {
        self.voltage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voltage.is_empty()
    }
}

/// Advances LIF neurons by one step of `dt` seconds.
///
/// The membrane is integrated exactly over the non-refractory part of the
/// step. A threshold crossing is located analytically inside the step, and
/// the refractory clock starts from that instant, so firing rates carry no
/// step-quantisation bias. Writes spike outputs (0 or
/// `amplitude / (dt * scale)`) into `out`, returns the spike count.
pub fn lif_spike_step<S: Scalar>(
    state: &mut LifState<S>,
    j: &[S],
    dt: S,
    params: &NeuronParams<S>,
    out: &mut [S],
) -> u64 {
    debug_assert_eq!(j.len(), state.len());
    debug_assert_eq!(out.len(), state.len());
    let zero = S::zero();
    let spike = params.amplitude / (dt * params.scale);
    let v_th = params.v_th;
    let tau = params.tau_rc;
    let mut count = 0;
    for (((v, refr), &ji), o) in state
        .voltage
        .iter_mut()
        .zip(state.refractory_remaining.iter_mut())
        .zip(j)
        .zip(out.iter_mut())
    {
        let current = params.scale * ji;
        let held = *refr;
        let active = (dt - held).max(zero).min(dt);
        let mut volt = *v - (current - *v) * (-active / tau).exp_m1();
        *o = zero;
        if volt >= v_th {
            // time between the crossing and the end of the step
            let q = if current > v_th { (volt - v_th) / (current - v_th) } else { zero };
            let since = (-tau * (-q).ln_1p()).min(active).max(zero);
            *o = spike;
            count += 1;
            volt = zero;
            *refr = (params.tau_ref - since).max(zero);
        } else {
            *refr = (held - dt).max(zero);
        }
        *v = volt.max(zero);
    }
    count
}

/// Accumulator state of spiking rectified-linear neurons.
#[derive(Clone, Debug, PartialEq)]
pub struct ReluState<S> {
    pub voltage: Vec<S>,
}

impl<S: Scalar> ReluState<S> {
    pub fn new(n: usize) -> Self {
        Self { voltage: vec![S::zero(); n] }
    }

    pub fn reset(&mut self) {
        self.voltage.iter_mut().for_each(|v| *v = S::zero());
    }
}

/// Integrates `dt * scale * max(j, 0)` and fires once per unit crossed,
/// subtracting 1 per spike. Several spikes per step are possible.
pub fn relu_spike_step<S: Scalar>(
    state: &mut ReluState<S>,
    j: &[S],
    dt: S,
    params: &NeuronParams<S>,
    out: &mut [S],
) -> u64 {
    let spike = params.amplitude / (dt * params.scale);
    let gain = dt * params.scale;
    // absorbs round-off when dt * scale * j divides 1 exactly
    let slack = S::epsilon() * S::lit(64.0);
    let mut count = 0;
    for ((v, &ji), o) in state.voltage.iter_mut().zip(j).zip(out.iter_mut()) {
        *v = *v + gain * rho_hard(ji);
        let n = (*v + slack).floor();
        if n >= S::one() {
            *v = (*v - n).max(S::zero());
            *o = spike * n;
            count += n.to_acc() as u64;
        } else {
            *o = S::zero();
        }
    }
    count
}

/// First-order low-pass filter, zero-order-hold discretisation.
#[derive(Clone, Debug, PartialEq)]
pub struct SynapseState<S> {
    pub tau_syn: S,
    pub dt: S,
    pub filtered: Vec<S>,
    decay: S,
}

impl<S: Scalar> SynapseState<S> {
    pub fn new(tau_syn: S, dt: S, n: usize) -> Result<Self> {
        if !(tau_syn > S::zero()) || !(dt > S::zero()) {
            return invalid("synapse tau and dt must be positive");
        }
        Ok(Self { tau_syn, dt, filtered: vec![S::zero(); n], decay: (-dt / tau_syn).exp() })
    }

    /// Per-step decay factor `exp(-dt / tau_syn)`.
    pub fn decay(&self) -> S {
        self.decay
    }

    /// `y <- a y + (1 - a) x`.
    pub fn step(&mut self, x: &[S]) -> &[S] {
        let a = self.decay;
        let b = S::one() - a;
        for (y, &xi) in self.filtered.iter_mut().zip(x) {
            *y = a * *y + b * xi;
        }
        &self.filtered
    }

    pub fn reset(&mut self) {
        self.filtered.iter_mut().for_each(|v| *v = S::zero());
    }
}

/// Single-signal convenience wrapper around [`SynapseState::step`].
pub fn synapse_step<S: Scalar>(state: &mut SynapseState<S>, x: S) -> S {
    state.step(&[x])[0]
}
