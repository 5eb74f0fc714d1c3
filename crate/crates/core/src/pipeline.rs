//! The three pipeline stages driven by a [`RunConfig`]: ANN training,
//! conversion and hybrid fine-tuning, plus evaluation of their outputs.

use crate::config::RunConfig;
use crate::data::{gen_box_dataset_with, gen_mask_dataset_with, load_dataset, split, BoxParams, MaskParams, Sample};
use crate::error::{invalid, Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::graph::{Network, Task};
use crate::sim::apply_post_training_scaling;
use crate::train::{convert_with, hybrid_finetune, train_ann, TrainConfig, TrainHistory};

/// The dataset named by the config: loaded from `data.path` when set,
/// generated from `seed` otherwise.
pub fn dataset(cfg: &RunConfig) -> Result<Vec<Sample<f32>>> {
    if let Some(p) = &cfg.data.path {
        return load_dataset(p);
    }
    let d = &cfg.data;
    match cfg.task {
        Task::Locnet => gen_box_dataset_with(d.samples, cfg.seed, &BoxParams { size: d.size, area: d.area, noise: d.noise }),
        Task::Cae => gen_mask_dataset_with(d.samples, cfg.seed, &MaskParams { size: d.size, noise: d.noise }),
    }
}

/// Seeded train/test split.
pub fn train_test(cfg: &RunConfig) -> Result<(Vec<Sample<f32>>, Vec<Sample<f32>>)> {
    split(&dataset(cfg)?, cfg.data.train_fraction, cfg.seed)
}

fn with_seed(t: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed, ..t.clone() }
}

/// Builds and trains the ANN on the training split.
pub fn stage_train(cfg: &RunConfig, train: &[Sample<f32>]) -> Result<(Network<f32>, TrainHistory)> {
    train_ann(&cfg.build_network()?, train, &with_seed(&cfg.train, cfg.seed))
}

/// Swaps in spiking neurons, attaches the synapse and sets the
/// post-training scale.
pub fn stage_convert(ann: &Network<f32>, synapse: Option<f64>, scale: f64) -> Result<Network<f32>> {
    let snn = convert_with(ann, synapse.map(|t| t as f32))?;
    apply_post_training_scaling(&snn, scale as f32)
}

/// Hybrid fine-tuning; a seeded slice of the training split is held out
/// for early stopping.
pub fn stage_finetune(cfg: &RunConfig, snn: &Network<f32>, train: &[Sample<f32>]) -> Result<(Network<f32>, TrainHistory)> {
    let (fit, val) = if cfg.finetune.patience > 0 && train.len() >= 2 {
        split(train, 1.0 - cfg.data.val_fraction, cfg.seed.wrapping_add(1))?
    } else {
        (train.to_vec(), Vec::new())
    };
    hybrid_finetune(snn, &fit, &val, &with_seed(&cfg.finetune, cfg.seed))
}

/// Evaluates a model on the test split with the config's rollout
/// settings.
pub fn stage_eval(cfg: &RunConfig, net: &Network<f32>, test: &[Sample<f32>]) -> Result<EvalReport> {
    if net.task != cfg.task {
        return Err(Error::InvalidArgument(format!(
            "checkpoint is a {} model but the config describes {}; task mismatch",
            net.task.name(),
            cfg.task.name()
        )));
    }
    if net.input_shape != [1, cfg.data.size, cfg.data.size] {
        return invalid(format!("checkpoint input {:?} does not match data size {}", net.input_shape, cfg.data.size));
    }
    let sim = cfg.eval_sim(net.synapse);
    evaluate(net, test, Some(&sim))
}

/// All artifacts of one end-to-end run.
#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub ann: Network<f32>,
    pub converted: Network<f32>,
    pub hybrid: Network<f32>,
    pub ann_history: TrainHistory,
    pub hybrid_history: TrainHistory,
    /// ANN, converted and hybrid reports, in that order.
    pub reports: [EvalReport; 3],
}

pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineRun> {
    let (train, test) = train_test(cfg)?;
    let (ann, ann_history) = stage_train(cfg, &train)?;
    let converted = stage_convert(&ann, cfg.convert.synapse, cfg.convert.scale)?;
    let (hybrid, hybrid_history) = stage_finetune(cfg, &converted, &train)?;
    let reports = [stage_eval(cfg, &ann, &test)?, stage_eval(cfg, &converted, &test)?, stage_eval(cfg, &hybrid, &test)?];
    Ok(PipelineRun { ann, converted, hybrid, ann_history, hybrid_history, reports })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        RunConfig::parse(
            "task = cae\nseed = 3\n[data]\nsamples = 12\nsize = 8\n[network]\nchannels = 2\n\
             [train]\nepochs = 2\n[convert]\nscale = 50\n[finetune]\nepochs = 2\nn_steps = 10\n[sim]\nn_steps = 10\n",
        )
        .unwrap()
    }

    #[test]
    fn pipeline_is_reproducible() {
        let cfg = tiny();
        let a = run_pipeline(&cfg).unwrap();
        let b = run_pipeline(&cfg).unwrap();
        assert_eq!(a.hybrid, b.hybrid);
        assert_eq!(a.reports, b.reports);
        assert!(a.hybrid.tuned && !a.converted.tuned);
        assert_eq!(a.converted.layers[0].params.scale, 50.0);
        for (x, y) in a.ann.layers.iter().zip(&a.converted.layers) {
            assert_eq!(x.weight, y.weight);
        }
        assert!(a.reports[0].firing_rate.is_none() && a.reports[2].firing_rate.is_some());
    }

    #[test]
    fn eval_rejects_other_task() {
        let cfg = tiny();
        let (_, test) = train_test(&cfg).unwrap();
        let mut other = RunConfig::parse("task = locnet\n[data]\nsize = 8\n[network]\nchannels = 1,1,1\ndense = 4\n").unwrap();
        other.seed = 1;
        let net = other.build_network().unwrap();
        let err = stage_eval(&cfg, &net, &test).unwrap_err();
        assert!(err.to_string().contains("task mismatch"), "{err}");
    }
}
