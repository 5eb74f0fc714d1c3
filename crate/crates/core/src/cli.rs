//! The `spikeforge` command-line driver.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 runtime error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::save_dataset;
use crate::error::Error;
use crate::eval::{render_kv, render_text};
use crate::fsutil::write_atomic;
use crate::graph::Mode;
use crate::pipeline;
use crate::train::{TrainHistory, DEFAULT_SYNAPSE};

#[derive(Parser, Debug)]
#[command(name = "spikeforge", version, about = "Train rate networks, convert them to spiking networks and fine-tune them")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the rate network and write a checkpoint plus `<out>.history`.
    TrainAnn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn an ANN checkpoint into a spiking one; weights are copied as is.
    Convert {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Supplies synapse and scale defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Synaptic time constant in seconds, or `none`.
        #[arg(long)]
        synapse: Option<String>,
        /// Post-training firing-rate scale, at least 1.
        #[arg(long)]
        scale: Option<f64>,
    },
    /// Hybrid fine-tuning of a converted checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score checkpoints on the test split; writes a table and `<out>.kv`.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate; repeat for several.
        #[arg(long = "in", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the configured dataset to a file.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn load_config(c: &Common) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(&c.config).map_err(|e| Failure::Usage(format!("{}: {e}", c.config.display())))?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn history_path(out: &Path) -> PathBuf {
    let mut p = out.as_os_str().to_owned();
    p.push(".history");
    PathBuf::from(p)
}

/// `epoch train_loss [val_loss]`, one line per epoch.
fn render_history(h: &TrainHistory) -> String {
    let mut s = String::new();
    for (e, t) in h.train_loss.iter().enumerate() {
        let _ = match h.val_loss.get(e) {
            Some(v) => writeln!(s, "{e} {t} {v}"),
            None => writeln!(s, "{e} {t}"),
        };
    }
    s
}

fn execute(cli: Cli, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    let say = |out: &mut dyn Write, msg: String| {
        let _ = writeln!(out, "{msg}");
    };
    match cli.cmd {
        Command::TrainAnn { common, out: path } => {
            let cfg = load_config(&common)?;
            let (train, _) = pipeline::train_test(&cfg)?;
            let (net, hist) = pipeline::stage_train(&cfg, &train)?;
            write_atomic(&history_path(&path), render_history(&hist).as_bytes())?;
            checkpoint::save(&path, &net)?;
            say(out, format!("trained {} epochs, final loss {:.6}", hist.train_loss.len(), hist.train_loss.last().copied().unwrap_or(f64::NAN)));
        }
        Command::Convert { input, out: path, config, synapse, scale } => {
            let cfg = match &config {
                Some(p) => Some(RunConfig::load(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?),
                None => None,
            };
            let synapse = match synapse.as_deref() {
                Some("none") => None,
                Some(s) => match s.parse::<f64>() {
                    Ok(t) if t > 0.0 && t.is_finite() => Some(t),
                    _ => return Err(Failure::Usage(format!("--synapse must be a positive number of seconds or `none`, got `{s}`"))),
                },
                None => cfg.as_ref().map_or(Some(DEFAULT_SYNAPSE), |c| c.convert.synapse),
            };
            let scale = scale.or(cfg.as_ref().map(|c| c.convert.scale)).unwrap_or(1.0);
            if !(scale >= 1.0) || !scale.is_finite() {
                return Err(Failure::Usage(format!("--scale must be at least 1, got {scale}")));
            }
            let ann = checkpoint::load(&input)?;
            let snn = pipeline::stage_convert(&ann, synapse, scale)?;
            checkpoint::save(&path, &snn)?;
            say(out, format!("converted {} layers, synapse {synapse:?}, scale {scale}", snn.layers.len()));
        }
        Command::Finetune { common, input, out: path } => {
            let cfg = load_config(&common)?;
            let snn = checkpoint::load(&input)?;
            if snn.mode != Mode::Snn {
                return Err(Failure::Runtime("fine-tuning needs a converted checkpoint; run `convert` first".into()));
            }
            if snn.task != cfg.task {
                return Err(Failure::Runtime(format!("checkpoint is {} but config is {}; task mismatch", snn.task.name(), cfg.task.name())));
            }
            let (train, _) = pipeline::train_test(&cfg)?;
            let (net, hist) = pipeline::stage_finetune(&cfg, &snn, &train)?;
            write_atomic(&history_path(&path), render_history(&hist).as_bytes())?;
            checkpoint::save(&path, &net)?;
            match hist.stopped_at {
                Some(e) => say(out, format!("early stop after {} epochs, kept epoch {e}", hist.train_loss.len())),
                None => say(out, format!("fine-tuned {} epochs", hist.train_loss.len())),
            }
        }
        Command::Eval { common, inputs, out: path } => {
            let cfg = load_config(&common)?;
            let (_, test) = pipeline::train_test(&cfg)?;
            let mut reports = Vec::new();
            for p in &inputs {
                let net = checkpoint::load(p).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?;
                reports.push(pipeline::stage_eval(&cfg, &net, &test)?);
            }
            let text = render_text(&reports);
            let mut kv_path = path.as_os_str().to_owned();
            kv_path.push(".kv");
            write_atomic(&path, text.as_bytes())?;
            write_atomic(Path::new(&kv_path), render_kv(&reports).as_bytes())?;
            let _ = write!(out, "{text}");
        }
        Command::GenData { common, out: path } => {
            let cfg = load_config(&common)?;
            let data = pipeline::dataset(&cfg)?;
            save_dataset(&path, &data)?;
            say(out, format!("wrote {} samples", data.len()));
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code. Progress goes to `out`, diagnostics to `err`.
pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = if code == 0 { write!(out, "{e}") } else { write!(err, "{e}") };
            return code;
        }
    };
    match execute(cli, out) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            let _ = writeln!(err, "error: {m}");
            1
        }
        Err(Failure::Runtime(m)) => {
            let _ = writeln!(err, "error: {m}");
            2
        }
    }
}

pub fn run() -> i32 {
    run_with(std::env::args_os(), &mut std::io::stdout(), &mut std::io::stderr())
}

