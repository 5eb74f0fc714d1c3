use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::tensor::{NodeId, Tape, Tensor};

use crate::tensor::tape::{bce_dice_value, mse_value};

/// Task loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossKind {
    Mse,
    BceDice { w_bce: f64, w_dice: f64 },
}

impl LossKind {
    /// Equal-weight BCE + Dice.
    pub fn bce_dice() -> Self {
        LossKind::BceDice { w_bce: 0.5, w_dice: 0.5 }
    }

    pub fn value<S: Scalar>(&self, pred: &Tensor<S>, target: &Tensor<S>) -> Result<S> {
        match *self {
            LossKind::Mse => mse_loss(pred, target),
            LossKind::BceDice { w_bce, w_dice } => bce_dice_loss(pred, target, S::lit(w_bce), S::lit(w_dice)),
        }
    }

    pub fn record<S: Scalar>(&self, tape: &mut Tape<S>, pred: NodeId, target: &Tensor<S>) -> Result<NodeId> {
        match *self {
            LossKind::Mse => tape.mse(pred, target),
            LossKind::BceDice { w_bce, w_dice } => tape.bce_dice(pred, target, S::lit(w_bce), S::lit(w_dice)),
        }
    }
}

pub fn mse_loss<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<S> {
    mse_value(pred, target)
}

/// Weighted BCE on `sigmoid(logits)` plus weighted soft-Dice loss
/// (smoothing 1). Rank-4 tensors are treated as a batch.
pub fn bce_dice_loss<S: Scalar>(logits: &Tensor<S>, mask: &Tensor<S>, w_bce: S, w_dice: S) -> Result<S> {
    logits.expect_same_shape(mask)?;
    if mask.data().iter().any(|&m| m != S::zero() && m != S::one()) {
        return invalid("mask must be binary");
    }
    let samples = if logits.rank() == 4 { logits.shape()[0] } else { 1 };
    Ok(bce_dice_value(logits, mask, w_bce, w_dice, samples))
}

/// Target firing rate and per-layer weights of the rate regulariser.
#[derive(Clone, Debug, PartialEq)]
pub struct RateRegConfig {
    pub target_hz: f64,
    /// One weight per regularised (neural) layer, in layer order.
    pub weights: Vec<f64>,
}

impl RateRegConfig {
    /// `hidden` for every layer except the last, which gets `output`.
    pub fn output_weighted(layers: usize, target_hz: f64, hidden: f64, output: f64) -> Self {
        let mut weights = vec![hidden; layers];
        if let Some(last) = weights.last_mut() {
            *last = output;
        }
        Self { target_hz, weights }
    }
}

/// `sum_l w_l * mean_neurons (rate - target)^2`.
///
/// Each entry of `layer_rates` holds one rate per neuron, or a batch
/// `[B, ...]` whose per-neuron mean over `B` is regularised.
pub fn rate_regularization<S: Scalar>(layer_rates: &[Tensor<S>], cfg: &RateRegConfig) -> Result<S> {
    if layer_rates.len() != cfg.weights.len() {
        return invalid(format!("{} rate layers but {} weights", layer_rates.len(), cfg.weights.len()));
    }
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = layer_rates.iter().map(|r| tape.constant(r.clone())).collect();
    if layer_rates.iter().any(|r| r.data().iter().any(|&v| v < S::zero())) {
        return invalid("firing rates must be nonnegative");
    }
    let loss = rate_reg_nodes(&mut tape, &ids, cfg, false)?;
    tape.value(loss).item()
}

/// Tape version of [`rate_regularization`]; rate tensors are batched.
pub fn rate_regularization_tape<S: Scalar>(tape: &mut Tape<S>, rates: &[NodeId], cfg: &RateRegConfig) -> Result<NodeId> {
    if rates.len() != cfg.weights.len() {
        return invalid(format!("{} rate layers but {} weights", rates.len(), cfg.weights.len()));
    }
    rate_reg_nodes(tape, rates, cfg, true)
}

fn rate_reg_nodes<S: Scalar>(tape: &mut Tape<S>, rates: &[NodeId], cfg: &RateRegConfig, batched: bool) -> Result<NodeId> {
    let mut total: Option<NodeId> = None;
    for (&r, &w) in rates.iter().zip(&cfg.weights) {
        let per_neuron = if batched || tape.value(r).rank() > 1 { tape.mean_outer(r)? } else { r };
        let dev = tape.shift(per_neuron, S::lit(-cfg.target_hz));
        let sq = tape.square(dev);
        let m = tape.mean(sq);
        let term = tape.scale(m, S::lit(w));
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(tape.constant(Tensor::scalar(S::zero()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rate_reg_hand_values() {
        let cfg = RateRegConfig { target_hz: 250.0, weights: vec![0.01] };
        let r = Tensor::<f64>::vector(vec![200.0, 300.0]);
        assert!((rate_regularization(&[r], &cfg).unwrap() - 25.0).abs() < 1e-9);
        let at = Tensor::<f64>::vector(vec![250.0; 5]);
        assert_eq!(rate_regularization(&[at], &cfg).unwrap(), 0.0);
        assert!(rate_regularization(&[Tensor::<f64>::vector(vec![-1.0])], &cfg).is_err());
    }

    #[test]
    fn rate_reg_gradient_sign() {
        let cfg = RateRegConfig { target_hz: 250.0, weights: vec![0.01] };
        let mut tape = Tape::<f64>::new();
        let r = tape.var(Tensor::new(vec![1, 3], vec![100.0, 250.5, 400.0]).unwrap());
        let loss = rate_regularization_tape(&mut tape, &[r], &cfg).unwrap();
        let g = tape.backward(loss).unwrap();
        let gr = g.get(r).unwrap().data().to_vec();
        assert!(gr[0] < 0.0 && gr[1] > 0.0 && gr[2] > 0.0);
    }

    #[test]
    fn bce_dice_limits() {
        let mask = Tensor::<f64>::new(vec![1, 2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let perfect = mask.map(|m| if m > 0.5 { 40.0 } else { -40.0 });
        assert!(bce_dice_loss(&perfect, &mask, 0.5, 0.5).unwrap() < 1e-9);
        assert!(bce_dice_loss(&perfect, &perfect, 0.5, 0.5).is_err());

        // uniform p = 0.5 on a half-ones mask: Dice term -> 0.5 for large masks
        let k = 5000;
        let mut m = vec![1.0; k];
        m.extend(vec![0.0; k]);
        let mask = Tensor::<f64>::new(vec![1, 100, 100], m).unwrap();
        let zeros = Tensor::zeros(&[1, 100, 100]);
        let dice_only = bce_dice_loss(&zeros, &mask, 0.0, 1.0).unwrap();
        let expect = 1.0 - (2.0 * 0.5 * k as f64 + 1.0) / (0.5 * 2.0 * k as f64 + k as f64 + 1.0);
        assert!((dice_only - expect).abs() < 1e-12);
        assert!((dice_only - 0.5).abs() < 1e-3);
    }

    #[test]
    fn losses_are_deterministic() {
        let a = Tensor::<f32>::new(vec![1, 2, 2], vec![0.3, -1.2, 2.0, 0.1]).unwrap();
        let m = Tensor::<f32>::new(vec![1, 2, 2], vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        let x = bce_dice_loss(&a, &m, 0.5, 0.5).unwrap();
        let y = bce_dice_loss(&a, &m, 0.5, 0.5).unwrap();
        assert_eq!(x.to_bits(), y.to_bits());
        assert!(x >= 0.0);
    }
}
