//! IoU and Dice metrics and per-model reports.

use std::fmt::Write as _;

use crate::data::Sample;
use crate::error::{invalid, Result};
use crate::graph::{Mode, Network, Task};
use crate::scalar::Scalar;
use crate::sim::{average_firing_rate, run_snn_traced, SimConfig, SpikeRecord};
use crate::tensor::Tensor;

/// Intersection over union of two `[x_min, y_min, x_max, y_max]` boxes. A
/// box with `min >= max` on either axis has zero area.
pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let area = |b: [f64; 4]| (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0);
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// `2|P ∩ G| / (|P| + |G|)` on binary masks; 1 when both are empty.
pub fn dice<S: Scalar>(pred: &Tensor<S>, gt: &Tensor<S>) -> Result<f64> {
    pred.expect_same_shape(gt)?;
    let bin = |t: &Tensor<S>| t.data().iter().all(|&v| v == S::zero() || v == S::one());
    if !bin(pred) || !bin(gt) {
        return invalid("dice needs binary masks");
    }
    let (mut p, mut g, mut both) = (0u64, 0u64, 0u64);
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        let (a, b) = (a == S::one(), b == S::one());
        p += a as u64;
        g += b as u64;
        both += (a && b) as u64;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + g) as f64)
}

/// Which pipeline stage a model comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelTag {
    Ann,
    Converted,
    Hybrid,
}

impl ModelTag {
    pub fn of<S>(net: &Network<S>) -> Self {
        match (net.mode, net.tuned) {
            (Mode::Ann, _) => ModelTag::Ann,
            (Mode::Snn, false) => ModelTag::Converted,
            (Mode::Snn, true) => ModelTag::Hybrid,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelTag::Ann => "ann",
            ModelTag::Converted => "converted",
            ModelTag::Hybrid => "hybrid",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Iou,
    Dice,
}

impl Metric {
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Locnet => Metric::Iou,
            Task::Cae => Metric::Dice,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Iou => "iou",
            Metric::Dice => "dice",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub tag: ModelTag,
    pub metric: Metric,
    /// Mean metric over the test set.
    pub mean: f64,
    /// Average firing rate in Hz, spiking models only.
    pub firing_rate: Option<f64>,
    pub samples: usize,
}

/// Metric of one prediction: a box, or mask logits thresholded at
/// probability 0.5.
pub fn score<S: Scalar>(task: Task, pred: &Tensor<S>, target: &Tensor<S>) -> Result<f64> {
    pred.expect_same_shape(target)?;
    match task {
        Task::Locnet => {
            if target.len() != 4 {
                return invalid(format!("box targets have 4 values, got shape {:?}", target.shape()));
            }
            let f = |t: &Tensor<S>| {
                let d = t.data();
                [d[0].to_acc(), d[1].to_acc(), d[2].to_acc(), d[3].to_acc()]
            };
            Ok(iou(f(pred), f(target)))
        }
        Task::Cae => dice(&pred.map(|v| if v > S::zero() { S::one() } else { S::zero() }), target),
    }
}

/// Mean metric of predictions against their samples.
pub fn mean_score<S: Scalar>(task: Task, preds: &[Tensor<S>], data: &[Sample<S>]) -> Result<f64> {
    if preds.len() != data.len() || data.is_empty() {
        return invalid(format!("{} predictions for {} samples", preds.len(), data.len()));
    }
    let mut total = 0.0;
    for (p, s) in preds.iter().zip(data) {
        total += score(task, p, &s.target)?;
    }
    Ok(total / data.len() as f64)
}

const EVAL_BATCH: usize = 16;

/// Predictions of `net` on every sample: rate forward pass for ANN-mode
/// networks, spiking rollout otherwise. The spike record is `None` for ANNs.
pub fn predict<S: Scalar>(net: &Network<S>, data: &[Sample<S>], sim: Option<&SimConfig<S>>) -> Result<(Vec<Tensor<S>>, Option<SpikeRecord>)> {
    let default_sim;
    let sim = match sim {
        Some(c) => c,
        None => {
            default_sim = SimConfig::for_network(net, crate::sim::EVAL_STEPS);
            &default_sim
        }
    };
    let mut preds = Vec::with_capacity(data.len());
    let mut record: Option<SpikeRecord> = None;
    for chunk in data.chunks(EVAL_BATCH) {
        let inputs: Vec<&Tensor<S>> = chunk.iter().map(|s| &s.input).collect();
        let x = Tensor::stack(&inputs)?;
        let y = match net.mode {
            Mode::Ann => net.forward(&x)?,
            Mode::Snn => {
                let trace = run_snn_traced(net, &x, sim)?;
                // per-sample records keep the neuron count independent of batching
                let per = SpikeRecord {
                    layer_spikes: trace.record.layer_spikes.clone(),
                    layer_neurons: trace.record.layer_neurons.iter().map(|n| n / chunk.len() as u64).collect(),
                    duration: trace.record.duration * chunk.len() as f64,
                };
                match &mut record {
                    Some(r) => r.merge(&per)?,
                    None => record = Some(per),
                }
                trace.output
            }
        };
        for i in 0..chunk.len() {
            preds.push(y.index_outer(i)?);
        }
    }
    Ok((preds, record))
}

/// Runs the model over `data` and aggregates its task metric and, for
/// spiking models, the average firing rate over the whole set.
pub fn evaluate<S: Scalar>(net: &Network<S>, data: &[Sample<S>], sim: Option<&SimConfig<S>>) -> Result<EvalReport> {
    if data.is_empty() {
        return invalid("evaluation set is empty");
    }
    let metric = Metric::for_task(net.task);
    for s in data {
        if s.target.shape() != net.output_shape() {
            return invalid(format!(
                "{} network predicts {:?} but targets are {:?}; task/metric mismatch",
                net.task.name(),
                net.output_shape(),
                s.target.shape()
            ));
        }
    }
    let (preds, record) = predict(net, data, sim)?;
    Ok(EvalReport {
        tag: ModelTag::of(net),
        metric,
        mean: mean_score(net.task, &preds, data)?,
        firing_rate: record.as_ref().map(average_firing_rate),
        samples: data.len(),
    })
}

/// Human-readable table, one row per report.
pub fn render_text(reports: &[EvalReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<10} {:<6} {:>8} {:>14} {:>8}", "model", "metric", "value", "avg_rate_hz", "samples");
    for r in reports {
        let rate = r.firing_rate.map_or_else(|| "-".to_string(), |h| format!("{h:.4}"));
        let _ = writeln!(s, "{:<10} {:<6} {:>8.4} {:>14} {:>8}", r.tag.name(), r.metric.name(), r.mean, rate, r.samples);
    }
    s
}

/// `tag metric value` lines; spiking models add a `firing_rate_hz` line.
pub fn render_kv(reports: &[EvalReport]) -> String {
    let mut s = String::new();
    for r in reports {
        let _ = writeln!(s, "{} {} {}", r.tag.name(), r.metric.name(), r.mean);
        if let Some(h) = r.firing_rate {
            let _ = writeln!(s, "{} firing_rate_hz {}", r.tag.name(), h);
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_hand_values() {
        assert_eq!(iou([0.0, 0.0, 2.0, 2.0], [1.0, 1.0, 3.0, 3.0]), 1.0 / 7.0);
        assert_eq!(iou([0.0, 0.0, 1.0, 1.0], [0.0, 0.0, 1.0, 1.0]), 1.0);
        assert_eq!(iou([0.0, 0.0, 1.0, 1.0], [2.0, 2.0, 3.0, 3.0]), 0.0);
        assert_eq!(iou([0.5, 0.5, 0.2, 0.9], [0.0, 0.0, 1.0, 1.0]), 0.0);
    }

    #[test]
    fn dice_hand_values() {
        let t = |v: &[f32]| Tensor::new(vec![v.len()], v.to_vec()).unwrap();
        assert_eq!(dice(&t(&[1., 1., 1., 1., 0., 0.]), &t(&[0., 0., 1., 1., 1., 1.])).unwrap(), 0.5);
        assert_eq!(dice(&t(&[0., 0.]), &t(&[0., 0.])).unwrap(), 1.0);
        assert_eq!(dice(&t(&[0., 0.]), &t(&[1., 0.])).unwrap(), 0.0);
        assert!(dice(&t(&[0.5, 0.]), &t(&[1., 0.])).is_err());
        assert!(dice(&t(&[0.]), &t(&[1., 0.])).is_err());
    }

    #[test]
    fn oracle_predictions_score_one() {
        let data = crate::data::gen_mask_dataset::<f32>(4, 2).unwrap();
        let preds: Vec<_> = data.iter().map(|s| s.target.map(|m| if m > 0.5 { 5.0 } else { -5.0 })).collect();
        assert_eq!(mean_score(Task::Cae, &preds, &data).unwrap(), 1.0);
    }

    #[test]
    fn report_formats() {
        let r = vec![
            EvalReport { tag: ModelTag::Ann, metric: Metric::Iou, mean: 0.8, firing_rate: None, samples: 3 },
            EvalReport { tag: ModelTag::Hybrid, metric: Metric::Iou, mean: 0.7, firing_rate: Some(120.5), samples: 3 },
        ];
        let kv = render_kv(&r);
        assert_eq!(kv, "ann iou 0.8\nhybrid iou 0.7\nhybrid firing_rate_hz 120.5\n");
        assert_eq!(render_text(&r).lines().count(), 3);
    }
}
