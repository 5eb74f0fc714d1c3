//! Run configuration files.
//!
//! Plain text, one `key = value` per line, grouped under `[section]`
//! headers; `#` starts a comment. `task` and `seed` sit above the first
//! section. Defaults depend on the task, so `task` is required.
//!
//! ```text
//! task = locnet
//! seed = 1
//!
//! [train]
//! epochs = 20
//! ```

use std::collections::HashSet;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{BoxParams, MaskParams, BOX_SAMPLES, MASK_SAMPLES};
use crate::error::{Error, Result};
use crate::graph::{build_cae, build_locnet, CaePlan, LocNetPlan, LossKind, Network, RateRegConfig, Task};
use crate::neuron::NeuronParams;
use crate::sim::{Readout, SimConfig, EVAL_STEPS};
use crate::train::{TrainConfig, DEFAULT_SYNAPSE};

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Samples generated before splitting.
    pub samples: usize,
    /// Image side in pixels.
    pub size: usize,
    pub noise: f64,
    /// Box area range as a fraction of the image (box task).
    pub area: (f64, f64),
    /// Share of the samples used for training; the rest is the test set.
    pub train_fraction: f64,
    /// Share of the training split held out for early stopping.
    pub val_fraction: f64,
    /// Dataset file to load instead of generating.
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub channels: Vec<usize>,
    /// Dense widths (box task).
    pub dense: Vec<usize>,
    /// Initial soft-LIF bias (box task).
    pub lif_bias: f64,
}

/// Weights of the firing-rate regulariser.
#[derive(Clone, Debug, PartialEq)]
pub struct RegConfig {
    pub target_hz: f64,
    pub hidden_weight: f64,
    pub output_weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvertConfig {
    /// Synaptic filter in seconds; `None` passes raw spikes.
    pub synapse: Option<f64>,
    /// Post-training scale.
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSimConfig {
    pub dt: f64,
    pub n_steps: usize,
    pub readout: Option<Readout>,
}

/// Everything one pipeline run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub seed: u64,
    pub data: DataConfig,
    pub net: NetConfig,
    pub neuron: NeuronParams<f64>,
    pub reg: RegConfig,
    /// ANN training.
    pub train: TrainConfig,
    pub convert: ConvertConfig,
    /// Hybrid fine-tuning.
    pub finetune: TrainConfig,
    /// Evaluation rollouts.
    pub sim: EvalSimConfig,
}

impl RunConfig {
    pub fn defaults(task: Task) -> Self {
        let locnet = task == Task::Locnet;
        let loss = if locnet { LossKind::Mse } else { LossKind::bce_dice() };
        Self {
            task,
            seed: 0,
            data: DataConfig {
                samples: if locnet { BOX_SAMPLES } else { MASK_SAMPLES },
                size: if locnet { BoxParams::default().size } else { MaskParams::default().size },
                noise: if locnet { BoxParams::default().noise } else { MaskParams::default().noise },
                area: BoxParams::default().area,
                train_fraction: 0.9,
                val_fraction: 0.1,
                path: None,
            },
            net: NetConfig {
                channels: if locnet { LocNetPlan::default().channels } else { CaePlan::default().channels },
                dense: LocNetPlan::default().dense,
                lif_bias: LocNetPlan::default().lif_bias,
            },
            neuron: NeuronParams { amplitude: if locnet { 0.01 } else { 1.0 }, ..NeuronParams::default() },
            reg: RegConfig { target_hz: 250.0, hidden_weight: 0.01, output_weight: 1.0 },
            train: TrainConfig { loss, ..TrainConfig::default() },
            convert: ConvertConfig { synapse: Some(DEFAULT_SYNAPSE), scale: if locnet { 1.0 } else { 1000.0 } },
            finetune: TrainConfig {
                epochs: if locnet { 7 } else { 13 },
                learning_rate: 0.001,
                loss,
                hybrid: true,
                ..TrainConfig::default()
            },
            sim: EvalSimConfig { dt: 1e-3, n_steps: EVAL_STEPS, readout: None },
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let entries = lex(text)?;
        let task = match entries.iter().find(|e| e.section.is_empty() && e.key == "task") {
            Some(e) => Task::parse(&e.value).map_err(|_| cfg_err(e.line, format!("task must be locnet or cae, got `{}`", e.value)))?,
            None => return Err(cfg_err(0, "missing `task = locnet|cae`")),
        };
        let mut cfg = Self::defaults(task);
        let mut seen = HashSet::new();
        let mut train_reg = false;
        let mut finetune_reg = false;
        for e in &entries {
            if !seen.insert((e.section.clone(), e.key.clone())) {
                return Err(cfg_err(e.line, format!("duplicate key `{}`", e.key)));
            }
            cfg.apply(e, &mut train_reg, &mut finetune_reg).map_err(|m| cfg_err(e.line, m))?;
        }
        let reg = cfg.rate_reg_config();
        cfg.train.rate_reg = train_reg.then(|| reg.clone());
        cfg.finetune.rate_reg = finetune_reg.then_some(reg);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn apply(&mut self, e: &Entry, train_reg: &mut bool, finetune_reg: &mut bool) -> std::result::Result<(), String> {
        let v = e.value.as_str();
        match (e.section.as_str(), e.key.as_str()) {
            ("", "task") => {}
            ("", "seed") => self.seed = num(v)?,
            ("data", "samples") => self.data.samples = positive(v)?,
            ("data", "size") => self.data.size = positive(v)?,
            ("data", "noise") => self.data.noise = nonneg(v)?,
            ("data", "area_min") => self.data.area.0 = fraction(v)?,
            ("data", "area_max") => self.data.area.1 = fraction(v)?,
            ("data", "train_fraction") => self.data.train_fraction = fraction(v)?,
            ("data", "val_fraction") => self.data.val_fraction = fraction(v)?,
            ("data", "path") => self.data.path = Some(PathBuf::from(v)),
            ("network", "channels") => self.net.channels = list(v)?,
            ("network", "dense") => self.net.dense = list(v)?,
            ("network", "lif_bias") => self.net.lif_bias = real(v)?,
            ("neuron", "tau_rc") => self.neuron.tau_rc = real(v)?,
            ("neuron", "tau_ref") => self.neuron.tau_ref = real(v)?,
            ("neuron", "v_th") => self.neuron.v_th = real(v)?,
            ("neuron", "gamma") => self.neuron.gamma = real(v)?,
            ("neuron", "amplitude") => self.neuron.amplitude = real(v)?,
            ("neuron", "scale") => self.neuron.scale = real(v)?,
            ("rate_reg", "target_hz") => self.reg.target_hz = nonneg(v)?,
            ("rate_reg", "hidden_weight") => self.reg.hidden_weight = nonneg(v)?,
            ("rate_reg", "output_weight") => self.reg.output_weight = nonneg(v)?,
            ("train", k) => train_key(&mut self.train, k, v, train_reg)?,
            ("finetune", "n_steps") => self.finetune.n_steps = positive(v)?,
            ("finetune", "patience") => self.finetune.patience = num(v)?,
            ("finetune", "readout") => self.finetune.readout = readout(v)?,
            ("finetune", k) => train_key(&mut self.finetune, k, v, finetune_reg)?,
            ("convert", "synapse") => self.convert.synapse = if v == "none" { None } else { Some(real(v)?) },
            ("convert", "scale") => self.convert.scale = real(v)?,
            ("sim", "dt") => {
                self.sim.dt = real(v)?;
                self.finetune.dt = self.sim.dt;
            }
            ("sim", "n_steps") => self.sim.n_steps = positive(v)?,
            ("sim", "readout") => self.sim.readout = readout(v)?,
            (s, k) if s.is_empty() => return Err(format!("unknown key `{k}`")),
            (s, k) => return Err(format!("unknown key `{k}` in [{s}]")),
        }
        Ok(())
    }

    /// Regulariser over the network's neural layers.
    pub fn rate_reg_config(&self) -> RateRegConfig {
        let layers = self.build_network().map(|n| n.neural_layers().len()).unwrap_or(0);
        RateRegConfig::output_weighted(layers, self.reg.target_hz, self.reg.hidden_weight, self.reg.output_weight)
    }

    /// Cross-field checks, including that the network can be built.
    pub fn validate(&self) -> Result<()> {
        self.neuron.validate()?;
        self.train.validate()?;
        self.finetune.validate()?;
        self.eval_sim::<f64>(self.convert.synapse).validate()?;
        if let Some(t) = self.convert.synapse {
            if !(t > 0.0) {
                return Err(Error::InvalidArgument(format!("synapse must be positive, got {t}")));
            }
        }
        if !(self.convert.scale >= 1.0) || !self.convert.scale.is_finite() {
            return Err(Error::InvalidArgument(format!("scale must be >= 1, got {}", self.convert.scale)));
        }
        if !(self.data.area.0 < self.data.area.1) {
            return Err(Error::InvalidArgument("area_min must be below area_max".into()));
        }
        let n_train = (self.data.samples as f64 * self.data.train_fraction).round();
        if self.data.path.is_none() && (self.data.samples < 2 || n_train < 2.0) {
            return Err(Error::InvalidArgument(format!("{} samples cannot be split", self.data.samples)));
        }
        self.build_network().map(|_| ())
    }

    /// Freshly initialised ANN-mode network, seeded from `seed`.
    pub fn build_network(&self) -> Result<Network<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let shape = [1, self.data.size, self.data.size];
        let p: NeuronParams<f32> = self.neuron.cast();
        match self.task {
            Task::Locnet => {
                let plan = LocNetPlan { channels: self.net.channels.clone(), dense: self.net.dense.clone(), lif_bias: self.net.lif_bias };
                build_locnet(&shape, &plan, p, &mut rng)
            }
            Task::Cae => build_cae(&shape, &CaePlan { channels: self.net.channels.clone() }, p, &mut rng),
        }
    }

    /// Evaluation rollout settings.
    pub fn eval_sim<S: crate::Scalar>(&self, synapse: Option<S>) -> SimConfig<S> {
        let mut sim = SimConfig::new(self.sim.n_steps, synapse);
        sim.dt = S::lit(self.sim.dt);
        if let Some(r) = self.sim.readout {
            sim.readout = r;
        }
        sim
    }
}

fn train_key(t: &mut TrainConfig, k: &str, v: &str, reg: &mut bool) -> std::result::Result<(), String> {
    match k {
        "epochs" => t.epochs = positive(v)?,
        "learning_rate" => t.learning_rate = nonneg(v)?,
        "batch_size" => t.batch_size = positive(v)?,
        "rate_reg" => *reg = boolean(v)?,
        "loss" => {
            t.loss = match v {
                "mse" => LossKind::Mse,
                "bce_dice" => LossKind::bce_dice(),
                _ => return Err(format!("loss must be mse or bce_dice, got `{v}`")),
            }
        }
        "bce_weight" | "dice_weight" => match &mut t.loss {
            LossKind::BceDice { w_bce, w_dice } => *(if k == "bce_weight" { w_bce } else { w_dice }) = nonneg(v)?,
            LossKind::Mse => return Err(format!("`{k}` needs loss = bce_dice set above it")),
        },
        _ => return Err(format!("unknown key `{k}`")),
    }
    Ok(())
}

struct Entry {
    section: String,
    key: String,
    value: String,
    line: usize,
}

const SECTIONS: [&str; 8] = ["data", "network", "neuron", "rate_reg", "train", "convert", "finetune", "sim"];

fn lex(text: &str) -> Result<Vec<Entry>> {
    let mut section = String::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let s = raw.split('#').next().unwrap_or("").trim();
        if s.is_empty() {
            continue;
        }
        if let Some(name) = s.strip_prefix('[') {
            let name = name.strip_suffix(']').ok_or_else(|| cfg_err(line, "unterminated section header"))?.trim();
            if !SECTIONS.contains(&name) {
                return Err(cfg_err(line, format!("unknown section [{name}]")));
            }
            section = name.to_string();
            continue;
        }
        let (k, v) = s.split_once('=').ok_or_else(|| cfg_err(line, format!("expected `key = value`, got `{s}`")))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(cfg_err(line, "empty key or value"));
        }
        out.push(Entry { section: section.clone(), key: k.to_string(), value: v.to_string(), line });
    }
    Ok(out)
}

fn cfg_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Config { line, msg: msg.into() }
}

fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("`{v}` is not a valid number"))
}

fn positive(v: &str) -> std::result::Result<usize, String> {
    match num::<usize>(v)? {
        0 => Err("must be at least 1".into()),
        n => Ok(n),
    }
}

fn real(v: &str) -> std::result::Result<f64, String> {
    let x: f64 = num(v)?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(format!("`{v}` is not finite"))
    }
}

fn nonneg(v: &str) -> std::result::Result<f64, String> {
    match real(v)? {
        x if x >= 0.0 => Ok(x),
        x => Err(format!("must be nonnegative, got {x}")),
    }
}

fn fraction(v: &str) -> std::result::Result<f64, String> {
    match real(v)? {
        x if x > 0.0 && x < 1.0 => Ok(x),
        x => Err(format!("must lie strictly between 0 and 1, got {x}")),
    }
}

fn boolean(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

fn list(v: &str) -> std::result::Result<Vec<usize>, String> {
    v.split(',').map(|p| positive(p.trim())).collect()
}

/// `last` or `mean:K`.
fn readout(v: &str) -> std::result::Result<Option<Readout>, String> {
    match v {
        "last" => Ok(Some(Readout::LastStep)),
        "half" => Ok(None),
        _ => match v.strip_prefix("mean:") {
            Some(k) => Ok(Some(Readout::MeanOfLastK(positive(k)?))),
            None => Err(format!("readout must be last, half or mean:K, got `{v}`")),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_of(e: Error) -> usize {
        match e {
            Error::Config { line, .. } => line,
            other => panic!("expected a config error, got {other}"),
        }
    }

    #[test]
    fn defaults_follow_task() {
        let c = RunConfig::parse("task = cae\n").unwrap();
        assert_eq!(c, RunConfig::defaults(Task::Cae));
        assert_eq!(c.convert.scale, 1000.0);
        assert_eq!(c.finetune.epochs, 13);
        let l = RunConfig::parse("task = locnet").unwrap();
        assert_eq!(l.train.epochs, 50);
        assert_eq!(l.train.learning_rate, 0.01);
        assert_eq!(l.finetune.learning_rate, 0.001);
        assert_eq!(l.convert.synapse, Some(0.005));
    }

    #[test]
    fn keys_apply() {
        let text = "task = locnet # box task\nseed = 7\n\n[data]\nsamples = 40\nsize = 16\n[network]\nchannels = 2, 2,4\ndense = 8,4\n\
                    [train]\nepochs = 3\nrate_reg = true\n[finetune]\nn_steps = 30\nreadout = mean:10\n[convert]\nsynapse = none\n[sim]\nreadout = last\n";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.net.channels, vec![2, 2, 4]);
        assert_eq!(c.train.epochs, 3);
        let reg = c.train.rate_reg.as_ref().unwrap();
        assert_eq!(reg.weights.len(), 7);
        assert!(c.finetune.rate_reg.is_none());
        assert_eq!(c.finetune.readout, Some(Readout::MeanOfLastK(10)));
        assert_eq!(c.convert.synapse, None);
        assert_eq!(c.sim.readout, Some(Readout::LastStep));
    }

    #[test]
    fn errors_carry_line_numbers() {
        assert_eq!(line_of(RunConfig::parse("task = locnet\n[train]\nepochs = 0\n").unwrap_err()), 3);
        assert_eq!(line_of(RunConfig::parse("task = locnet\n\n[train]\nwat = 1\n").unwrap_err()), 4);
        assert_eq!(line_of(RunConfig::parse("task = locnet\n[bogus]\n").unwrap_err()), 2);
        assert_eq!(line_of(RunConfig::parse("task = locnet\nseed 3\n").unwrap_err()), 2);
        assert_eq!(line_of(RunConfig::parse("task = locnet\nseed = 1\nseed = 2\n").unwrap_err()), 3);
        assert_eq!(line_of(RunConfig::parse("task = boxes\n").unwrap_err()), 1);
        assert_eq!(line_of(RunConfig::parse("[train]\nepochs = 3\n").unwrap_err()), 0);
        assert_eq!(line_of(RunConfig::parse("task = cae\n[train]\nlearning_rate = -1\n").unwrap_err()), 3);
    }

    #[test]
    fn cross_field_validation() {
        assert!(RunConfig::parse("task = locnet\n[data]\nsize = 20\n").is_err());
        assert!(RunConfig::parse("task = cae\n[convert]\nscale = 0.5\n").is_err());
        assert!(RunConfig::parse("task = cae\n[neuron]\ntau_rc = 0\n").is_err());
        assert!(RunConfig::parse("task = cae\n[sim]\nn_steps = 10\nreadout = mean:20\n").is_err());
    }
}
