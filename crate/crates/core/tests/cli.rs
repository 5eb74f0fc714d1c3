use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use spikeforge::checkpoint;
use spikeforge::config::RunConfig;
use spikeforge::graph::Mode;
use spikeforge::pipeline;

const TINY: &str = "task = locnet
seed = 4
[data]
samples = 24
size = 16
[network]
channels = 2, 2, 4
dense = 8, 4
[train]
epochs = 2
[finetune]
epochs = 4
n_steps = 20
patience = 1
[sim]
n_steps = 20
";

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spikeforge")).args(args).output().expect("binary runs")
}

struct Dir {
    dir: tempfile::TempDir,
}

impl Dir {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("run.cfg"), TINY).unwrap();
        Self { dir }
    }

    fn p(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.p(name).to_string_lossy().into_owned()
    }

    fn files(&self) -> Vec<String> {
        let mut v: Vec<String> = fs::read_dir(self.dir.path()).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
        v.sort();
        v
    }

    fn train(&self, out: &str) -> Output {
        bin(&["train-ann", "--config", &self.s("run.cfg"), "--out", &self.s(out)])
    }
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_ann_writes_loadable_reproducible_checkpoint() {
    let d = Dir::new();
    let o = d.train("a.sfck");
    assert!(o.status.success(), "{}", stderr(&o));
    let net = checkpoint::load(&d.p("a.sfck")).unwrap();
    assert_eq!(net.mode, Mode::Ann);
    assert_eq!(fs::read_to_string(d.p("a.sfck.history")).unwrap().lines().count(), 2);
    assert!(d.train("b.sfck").status.success());
    assert_eq!(fs::read(d.p("a.sfck")).unwrap(), fs::read(d.p("b.sfck")).unwrap());
}

#[test]
fn config_errors_exit_one_with_line_number() {
    let d = Dir::new();
    fs::write(d.p("bad.cfg"), "task = locnet\n[train]\nepochs = 0\n").unwrap();
    let o = bin(&["train-ann", "--config", &d.s("bad.cfg"), "--out", &d.s("x.sfck")]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
    assert!(!d.p("x.sfck").exists());
    let o = bin(&["train-ann", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(bin(&["--help"]).status.code(), Some(0));
}

#[test]
fn convert_keeps_weight_bytes_and_records_scale() {
    let d = Dir::new();
    assert!(d.train("ann.sfck").status.success());
    let o = bin(&["convert", "--in", &d.s("ann.sfck"), "--out", &d.s("snn.sfck"), "--scale", "1000", "--synapse", "0.005"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ann = checkpoint::load(&d.p("ann.sfck")).unwrap();
    let snn = checkpoint::load(&d.p("snn.sfck")).unwrap();
    assert_eq!(snn.mode, Mode::Snn);
    assert_eq!(snn.synapse, Some(0.005));
    for (a, s) in ann.layers.iter().zip(&snn.layers) {
        let bits = |t: &Option<spikeforge::Tensor32>| t.as_ref().map(|t| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(bits(&a.weight), bits(&s.weight));
        assert_eq!(bits(&a.bias), bits(&s.bias));
        assert_eq!(s.params.scale, 1000.0);
    }
    let again = bin(&["convert", "--in", &d.s("snn.sfck"), "--out", &d.s("twice.sfck")]);
    assert_eq!(again.status.code(), Some(2));
    assert!(stderr(&again).contains("already converted"), "{}", stderr(&again));
    assert!(!d.p("twice.sfck").exists());
}

#[test]
fn missing_input_leaves_no_output() {
    let d = Dir::new();
    let before = d.files();
    let o = bin(&["convert", "--in", &d.s("nope.sfck"), "--out", &d.s("out.sfck")]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(d.files(), before);
}

#[test]
fn finetune_checks_mode_and_honours_zero_learning_rate() {
    let d = Dir::new();
    assert!(d.train("ann.sfck").status.success());
    let o = bin(&["finetune", "--in", &d.s("ann.sfck"), "--config", &d.s("run.cfg"), "--out", &d.s("h.sfck")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!d.p("h.sfck").exists());

    assert!(bin(&["convert", "--in", &d.s("ann.sfck"), "--out", &d.s("snn.sfck")]).status.success());
    let frozen = TINY.replace("patience = 1", "patience = 1\nlearning_rate = 0");
    fs::write(d.p("frozen.cfg"), frozen).unwrap();
    let o = bin(&["finetune", "--in", &d.s("snn.sfck"), "--config", &d.s("frozen.cfg"), "--out", &d.s("h.sfck")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let snn = checkpoint::load(&d.p("snn.sfck")).unwrap();
    let tuned = checkpoint::load(&d.p("h.sfck")).unwrap();
    for (a, b) in snn.layers.iter().zip(&tuned.layers) {
        assert_eq!(a.weight, b.weight);
    }
    // a frozen network never improves, so patience 1 stops at epoch 0
    let hist = fs::read_to_string(d.p("h.sfck.history")).unwrap();
    assert_eq!(hist.lines().count(), 2, "{hist}");
    assert!(hist.lines().all(|l| l.split(' ').count() == 3));
}

#[test]
fn finetune_rerun_is_bit_identical() {
    let d = Dir::new();
    assert!(d.train("ann.sfck").status.success());
    assert!(bin(&["convert", "--in", &d.s("ann.sfck"), "--out", &d.s("snn.sfck")]).status.success());
    for out in ["h1.sfck", "h2.sfck"] {
        let o = bin(&["finetune", "--in", &d.s("snn.sfck"), "--config", &d.s("run.cfg"), "--out", &d.s(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(fs::read(d.p("h1.sfck")).unwrap(), fs::read(d.p("h2.sfck")).unwrap());
    let hist = fs::read_to_string(d.p("h1.sfck.history")).unwrap();
    let val: Vec<f64> = hist.lines().map(|l| l.split(' ').nth(2).unwrap().parse().unwrap()).collect();
    let kept = spikeforge::train::early_stop(&val, 1);
    assert!(kept == val.len() - 1 || kept + 2 == val.len(), "history {val:?}");
}

fn kv(path: &Path) -> Vec<(String, String, f64)> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let f: Vec<&str> = l.split(' ').collect();
            (f[0].to_string(), f[1].to_string(), f[2].parse().unwrap())
        })
        .collect()
}

#[test]
fn eval_reports_three_models_like_the_library() {
    let d = Dir::new();
    let cfg = d.s("run.cfg");
    assert!(d.train("ann.sfck").status.success());
    assert!(bin(&["convert", "--in", &d.s("ann.sfck"), "--out", &d.s("snn.sfck")]).status.success());
    assert!(bin(&["finetune", "--in", &d.s("snn.sfck"), "--config", &cfg, "--out", &d.s("hyb.sfck")]).status.success());

    let o = bin(&["eval", "--config", &cfg, "--in", &d.s("ann.sfck"), "--out", &d.s("ann.txt")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = kv(&d.p("ann.txt.kv"));
    assert_eq!(rows.len(), 1);
    assert!(!fs::read_to_string(d.p("ann.txt.kv")).unwrap().contains("firing_rate"));

    let o = bin(&["eval", "--config", &cfg, "--in", &d.s("ann.sfck"), "--in", &d.s("snn.sfck"), "--in", &d.s("hyb.sfck"), "--out", &d.s("all.txt")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = kv(&d.p("all.txt.kv"));
    let metrics: Vec<(&str, &str)> = rows.iter().map(|r| (r.0.as_str(), r.1.as_str())).collect();
    assert_eq!(
        metrics,
        [("ann", "iou"), ("converted", "iou"), ("converted", "firing_rate_hz"), ("hybrid", "iou"), ("hybrid", "firing_rate_hz")]
    );
    assert_eq!(fs::read_to_string(d.p("all.txt")).unwrap().lines().count(), 4);

    let rc = RunConfig::load(&d.p("run.cfg")).unwrap();
    let (_, test) = pipeline::train_test(&rc).unwrap();
    let hyb = checkpoint::load(&d.p("hyb.sfck")).unwrap();
    let lib = pipeline::stage_eval(&rc, &hyb, &test).unwrap();
    assert_eq!(rows[3].2, lib.mean);
    assert_eq!(rows[4].2, lib.firing_rate.unwrap());
}

#[test]
fn eval_rejects_task_mismatch() {
    let d = Dir::new();
    assert!(d.train("ann.sfck").status.success());
    fs::write(d.p("cae.cfg"), "task = cae\n[data]\nsamples = 8\nsize = 16\n[network]\nchannels = 2\n").unwrap();
    let o = bin(&["eval", "--config", &d.s("cae.cfg"), "--in", &d.s("ann.sfck"), "--out", &d.s("r.txt")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("task mismatch"), "{}", stderr(&o));
    assert!(!d.p("r.txt").exists());
}

#[test]
fn gen_data_round_trips() {
    let d = Dir::new();
    let o = bin(&["gen-data", "--config", &d.s("run.cfg"), "--seed", "9", "--out", &d.s("boxes.sfds")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let loaded = spikeforge::data::load_dataset::<f32>(&d.p("boxes.sfds")).unwrap();
    let mut rc = RunConfig::load(&d.p("run.cfg")).unwrap();
    rc.seed = 9;
    assert_eq!(loaded, pipeline::dataset(&rc).unwrap());

    // a config pointing at the file trains on exactly those samples
    fs::write(d.p("cached.cfg"), TINY.replace("samples = 24", &format!("path = {}", d.s("boxes.sfds")))).unwrap();
    let mut cached = RunConfig::load(&d.p("cached.cfg")).unwrap();
    cached.seed = 9;
    assert_eq!(pipeline::dataset(&cached).unwrap(), loaded);
}
