use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sstg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sstg"))
        .args(args)
        .env("SSTG_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL_SYNTH: &str = "\
synth.bands=4
synth.steps=8
synth.carrier_bands=0,1,2
synth.duration=2,4
synth.threshold=0.2
";

const SMALL_TRAIN: &str = "\
# tiny model for tests
model.heads=1
model.encoder_layers=1
model.main_channels=4,4
model.ssl_hidden=4
model.classifier_hidden=8
train.epochs=2
train.batch_size=4
train.lr0=0.001
";

fn small_dataset(dir: &Path, name: &str, seed: &str) -> std::path::PathBuf {
    let cfg = dir.join("synth.cfg");
    fs::write(&cfg, SMALL_SYNTH).unwrap();
    let out = dir.join(name);
    let o = sstg(&["synth", "--config", p(&cfg), "--nodes", "5", "--samples", "12", "--seed", seed, "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn help_exits_zero() {
    let o = sstg(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    for cmd in ["preprocess", "synth", "train", "eval", "export-embeddings", "selftest"] {
        assert!(text.contains(cmd), "usage lacks {cmd}");
    }
}

#[test]
fn unknown_flag_exits_one() {
    let o = sstg(&["synth", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--bogus"));
}

#[test]
fn missing_input_names_the_path() {
    let o = sstg(&["preprocess", "--input", "/nonexistent/rec.vtrx", "--out", "/tmp/x.vtxf"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/rec.vtrx"));
}

#[test]
fn selftest_passes() {
    let o = sstg(&["selftest"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).contains("suites passed"));
}

#[test]
fn synth_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = small_dataset(dir.path(), "a.vtxf", "3");
    let b = small_dataset(dir.path(), "b.vtxf", "3");
    let c = small_dataset(dir.path(), "c.vtxf", "4");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
    let manifest = fs::read_to_string(dir.path().join("a.vtxf.manifest")).unwrap();
    assert!(manifest.contains("seed.synth=3"));
    assert!(manifest.contains("config.synth.bands=4"));
    assert!(dir.path().join("a.vtxf.stats").is_file());
}

#[test]
fn preprocess_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let rec_path = dir.path().join("rec.vtrx");
    let len = 1024;
    let samples: Vec<f64> = (0..2 * 3 * len).map(|k| ((k * 37 % 101) as f64 / 50.0 - 1.0) * 0.3).collect();
    let rec = sstg_core::preprocess::RawRecording::new(2, len, 2000.0, samples).unwrap();
    sstg_core::formats::write_vtrx(&rec_path, &rec).unwrap();
    let out = dir.path().join("t.vtxf");
    let o = sstg(&["preprocess", "--input", p(&rec_path), "--out", p(&out), "--wavelet", "db4", "--depth", "4"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let t = sstg_core::formats::read_preprocessed(&out).unwrap();
    assert_eq!(t.tensors[0].len(), 2);
    assert_eq!(t.tensors[0][0].shape(), (16, 32));
    assert_eq!(t.scales.len(), t.tensors.len());
    assert!(dir.path().join("t.vtxf.manifest").is_file());

    let o = sstg(&["preprocess", "--input", p(&rec_path), "--out", p(&out), "--wavelet", "sym9"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_eval_export_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path(), "d.vtxf", "1");
    let cfg = dir.path().join("train.cfg");
    fs::write(&cfg, SMALL_TRAIN).unwrap();
    let run = dir.path().join("run");
    let o = sstg(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run), "--seed", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["best.ckpt", "last.ckpt", "last.ckpt.state", "history.csv", "config.txt", "manifest.txt"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);

    // identical config and seed give identical histories
    let run2 = dir.path().join("run2");
    let o = sstg(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run2), "--seed", "5"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(history, fs::read_to_string(run2.join("history.csv")).unwrap());

    // two epochs, then two more from the checkpoint, equals four straight
    let resumed = dir.path().join("resumed");
    let o = sstg(&["train", "--resume", p(&run.join("last.ckpt")), "--data", p(&data), "--out", p(&resumed), "--epochs", "4"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let straight = dir.path().join("straight");
    let o = sstg(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&straight), "--seed", "5", "--epochs", "4"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(fs::read(resumed.join("last.ckpt")).unwrap(), fs::read(straight.join("last.ckpt")).unwrap());

    let report = dir.path().join("report.txt");
    let o = sstg(&["eval", "--model", p(&run.join("best.ckpt")), "--data", p(&data), "--report", p(&report)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.contains("accuracy="));
    let confusion = fs::read_to_string(dir.path().join("report.txt.confusion.csv")).unwrap();
    let total: u64 = confusion
        .lines()
        .skip(1)
        .flat_map(|l| l.split(',').skip(1).map(|v| v.parse::<u64>().unwrap()).collect::<Vec<_>>())
        .sum();
    assert_eq!(total, 12 * 5);
    assert!(dir.path().join("report.txt.roc.csv").is_file());
    assert!(dir.path().join("report.txt.manifest").is_file());

    let emb = dir.path().join("emb.csv");
    let o = sstg(&["export-embeddings", "--model", p(&run.join("best.ckpt")), "--data", p(&data), "--out", p(&emb)]);
    assert_eq!(o.status.code(), Some(0));
    let first = fs::read(&emb).unwrap();
    let csv = String::from_utf8(first.clone()).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "e0,e1,e2,e3,label");
    assert_eq!(csv.lines().count(), 1 + 12 * 5);
    let o = sstg(&["export-embeddings", "--model", p(&run.join("best.ckpt")), "--data", p(&data), "--out", p(&emb)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(first, fs::read(&emb).unwrap());

    // a dataset of another shape is rejected
    let other = dir.path().join("other.vtxf");
    let o = sstg(&["synth", "--nodes", "6", "--samples", "2", "--out", p(&other)]);
    assert_eq!(o.status.code(), Some(0));
    let o = sstg(&["eval", "--model", p(&run.join("best.ckpt")), "--data", p(&other), "--report", p(&report)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bad_config_key_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path(), "d.vtxf", "1");
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "train.learning_rate=3\n").unwrap();
    let o = sstg(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.learning_rate"));
    let o = sstg(&["train", "--data", p(&data), "--out", p(&dir.path().join("r")), "--ablate", "no_magic"]);
    assert_eq!(o.status.code(), Some(1));
}
