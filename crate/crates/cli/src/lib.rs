//! Command-line front end: argument parsing, config resolution, run
//! manifests and exit codes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use sstg_core::config::{self, KeyValues};
use sstg_core::evalkit::{compute_metrics, export_embeddings, predict_all};
use sstg_core::formats;
use sstg_core::graph::{build_graph, default_graph, layout_for, Strategy};
use sstg_core::network::Ablations;
use sstg_core::preprocess::{preprocess_recording, Wavelet};
use sstg_core::selftest;
use sstg_core::synthdata::{generate_dataset, LabeledSample, SynthConfig};
use sstg_core::training::{history_csv, split_dataset, train, train_from, TrainingConfig};
use sstg_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "sstg", version, about = "Perceptual importance prediction for multi-point vibrotactile signals")]
pub struct Cli {
    /// Log progress at info level (RUST_LOG overrides).
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Convert a raw tri-axial recording into wavelet-packet tensors.
    Preprocess(PreprocessArgs),
    /// Generate a labeled synthetic dataset.
    Synth(SynthArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Write per-node embeddings as comma-separated text.
    ExportEmbeddings(ExportArgs),
    /// Run the built-in invariant suites.
    Selftest(SelftestArgs),
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10.0)]
    pub cutoff_hz: f64,
    #[arg(long, default_value = "db4")]
    pub wavelet: String,
    #[arg(long, default_value_t = 4)]
    pub depth: usize,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Key=value file; `synth.*` keys are read.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub nodes: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `full`, `knn:<k>` or `radius:<r>`.
    #[arg(long, default_value = "knn:4")]
    pub graph: String,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Key=value file; `model.*`, `train.*` and `ssl.*` keys are read.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated ablation switches.
    #[arg(long)]
    pub ablate: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Continue from a checkpoint with a `.state` sidecar.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    /// Which samples to score: all, train, val or test (split from the
    /// checkpoint's seed).
    #[arg(long, default_value = "all")]
    pub split: String,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Multiplier on the number of random cases per suite.
    #[arg(long, default_value_t = 1)]
    pub scale: usize,
}

/// An error together with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

type Outcome<T> = std::result::Result<T, Failure>;

fn invalid(e: impl std::fmt::Display) -> Failure {
    Failure {
        code: EXIT_VALIDATION,
        message: e.to_string(),
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure {
        code: EXIT_RUNTIME,
        message: e.to_string(),
    }
}

/// Validation errors for bad input, runtime errors otherwise.
fn classify(e: Error) -> Failure {
    match e {
        Error::NonFinite(_) => runtime(e),
        Error::Io { .. } => runtime(e),
        _ => invalid(e),
    }
}

/// Run metadata written next to a command's outputs.
#[derive(Clone, Debug, Default)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: KeyValues,
    pub seeds: Vec<(String, u64)>,
    pub inputs: Vec<(PathBuf, String)>,
    pub outputs: Vec<(PathBuf, String)>,
    pub wall_time_s: f64,
}

pub fn sha256_file(path: &Path) -> Outcome<String> {
    let bytes = fs::read(path).map_err(|e| runtime(Error::io(path, e)))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    fn new(command: &str, argv: &[String]) -> Self {
        Self {
            command: command.into(),
            argv: argv.to_vec(),
            ..Self::default()
        }
    }

    fn input(&mut self, path: &Path) -> Outcome<()> {
        let d = sha256_file(path)?;
        self.inputs.push((path.to_path_buf(), d));
        Ok(())
    }

    fn output(&mut self, path: &Path) -> Outcome<()> {
        let d = sha256_file(path)?;
        self.outputs.push((path.to_path_buf(), d));
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "command={}", self.command);
        let _ = writeln!(s, "argv={}", self.argv.join(" "));
        let _ = writeln!(s, "tool_version={}", env!("CARGO_PKG_VERSION"));
        for (k, v) in &self.seeds {
            let _ = writeln!(s, "seed.{k}={v}");
        }
        for (k, v) in &self.config {
            let _ = writeln!(s, "config.{k}={v}");
        }
        for (p, d) in &self.inputs {
            let _ = writeln!(s, "input.{}=sha256:{d}", p.display());
        }
        for (p, d) in &self.outputs {
            let _ = writeln!(s, "output.{}=sha256:{d}", p.display());
        }
        let _ = writeln!(s, "wall_time_s={:.3}", self.wall_time_s);
        s
    }

    fn write(mut self, path: &Path, start: Instant) -> Outcome<()> {
        self.wall_time_s = start.elapsed().as_secs_f64();
        formats::write_atomic(path, self.to_text().as_bytes()).map_err(runtime)
    }
}

fn read_kv_file(path: &Path) -> Outcome<KeyValues> {
    let text = fs::read_to_string(path).map_err(|e| invalid(Error::io(path, e)))?;
    config::parse_kv(&text).map_err(invalid)
}

fn require_file(path: &Path) -> Outcome<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(invalid(format!("input file not found: {}", path.display())))
    }
}

fn init_threads() {
    if let Some(n) = std::env::var("SSTG_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // a second call in the same process finds the pool already built
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

/// Parse `argv` (including the program name) and run the command.
pub fn dispatch(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    init_threads();
    let result = match &cli.command {
        Command::Preprocess(a) => run_preprocess(a, argv),
        Command::Synth(a) => run_synth(a, argv),
        Command::Train(a) => run_train(a, argv),
        Command::Eval(a) => run_eval(a, argv),
        Command::ExportEmbeddings(a) => run_export(a, argv),
        Command::Selftest(a) => run_selftest(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn run_preprocess(a: &PreprocessArgs, argv: &[String]) -> Outcome<()> {
    let start = Instant::now();
    require_file(&a.input)?;
    let wavelet: Wavelet = a.wavelet.parse().map_err(invalid)?;
    let rec = formats::read_vtrx(&a.input).map_err(invalid)?;
    let out = preprocess_recording(&rec, a.cutoff_hz, wavelet, a.depth).map_err(classify)?;
    formats::write_preprocessed(&a.out, &out).map_err(runtime)?;
    let mut m = RunManifest::new("preprocess", argv);
    for (k, v) in [
        ("cutoff_hz", a.cutoff_hz.to_string()),
        ("wavelet", wavelet.name().to_string()),
        ("depth", a.depth.to_string()),
    ] {
        m.config.insert(format!("preprocess.{k}"), v);
    }
    m.input(&a.input)?;
    m.output(&a.out)?;
    m.output(&formats::sidecar(&a.out, "meta"))?;
    println!("wrote {} segments to {}", out.tensors.len(), a.out.display());
    m.write(&formats::sidecar(&a.out, "manifest"), start)
}

fn synth_graph(nodes: usize, strategy: &str) -> Outcome<sstg_core::graph::TactileGraph> {
    let strategy: Strategy = strategy.parse().map_err(invalid)?;
    if nodes == 24 && strategy == Strategy::Knn(4) {
        return Ok(default_graph());
    }
    build_graph(&layout_for(nodes), strategy).map_err(invalid)
}

fn run_synth(a: &SynthArgs, argv: &[String]) -> Outcome<()> {
    let start = Instant::now();
    let mut cfg = SynthConfig::default();
    if let Some(p) = &a.config {
        require_file(p)?;
        cfg = config::apply_synth(&cfg, &read_kv_file(p)?).map_err(invalid)?;
    }
    if let Some(n) = a.nodes {
        cfg.node_count = n;
    }
    if let Some(n) = a.samples {
        cfg.sample_count = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(invalid)?;
    let g = synth_graph(cfg.node_count, &a.graph)?;
    let (samples, stats) = generate_dataset(&cfg, &g).map_err(classify)?;
    let mut kv = config::synth_to_kv(&cfg);
    kv.insert("synth.graph".into(), a.graph.clone());
    formats::write_dataset(&a.out, &samples, &g, &kv, &stats).map_err(runtime)?;
    let mut m = RunManifest::new("synth", argv);
    m.config = kv;
    m.seeds.push(("synth".into(), cfg.seed));
    m.output(&a.out)?;
    m.output(&formats::sidecar(&a.out, "meta"))?;
    m.output(&formats::sidecar(&a.out, "stats"))?;
    print!("{}", stats.to_text());
    m.write(&formats::sidecar(&a.out, "manifest"), start)
}

fn load_dataset(path: &Path) -> Outcome<formats::Dataset> {
    require_file(path)?;
    formats::read_dataset(path).map_err(invalid)
}

fn resolve_training(a: &TrainArgs, data: &formats::Dataset) -> Outcome<TrainingConfig> {
    let mut kv = match &a.config {
        Some(p) => {
            require_file(p)?;
            read_kv_file(p)?
        }
        None => KeyValues::new(),
    };
    if let Some(s) = a.seed {
        kv.insert("train.seed".into(), s.to_string());
    }
    if let Some(ab) = &a.ablate {
        Ablations::parse_list(ab).map_err(invalid)?;
        kv.insert("train.ablations".into(), ab.clone());
    }
    if let Some(e) = a.epochs {
        kv.insert("train.epochs".into(), e.to_string());
    }
    let shape = [
        ("model.nodes", data.shape.nodes),
        ("model.bands", data.shape.bands),
        ("model.steps", data.shape.steps),
    ];
    for (k, v) in shape {
        match kv.get(k) {
            Some(given) if given.parse::<usize>().ok() != Some(v) => {
                return Err(invalid(format!("{k}={given} does not match the dataset ({v})")));
            }
            _ => {
                kv.insert(k.into(), v.to_string());
            }
        }
    }
    config::apply_training(&TrainingConfig::default(), &kv).map_err(invalid)
}

fn run_train(a: &TrainArgs, argv: &[String]) -> Outcome<()> {
    let start = Instant::now();
    let data = load_dataset(&a.data)?;
    fs::create_dir_all(&a.out).map_err(|e| runtime(Error::io(&a.out, e)))?;
    let (outcome, cfg) = match &a.resume {
        Some(ck) => {
            require_file(ck)?;
            let (state, mut cfg) = formats::read_resumable(ck).map_err(invalid)?;
            if let Some(e) = a.epochs {
                cfg.epochs = e;
            }
            let split = split_dataset(data.samples.len(), cfg.split, cfg.seed).map_err(invalid)?;
            let o = train_from(state, &data.samples, &data.graph, &cfg, split, Some(&a.out)).map_err(classify)?;
            (o, cfg)
        }
        None => {
            let cfg = resolve_training(a, &data)?;
            let o = train(&data.samples, &data.graph, &cfg, Some(&a.out)).map_err(classify)?;
            (o, cfg)
        }
    };
    let history = a.out.join("history.csv");
    formats::write_atomic(&history, history_csv(&outcome.history).as_bytes()).map_err(runtime)?;
    let cfg_path = a.out.join("config.txt");
    formats::write_atomic(&cfg_path, config::training_to_text(&cfg).as_bytes()).map_err(runtime)?;

    let test: Vec<&LabeledSample> = outcome.split.test.iter().map(|&i| &data.samples[i]).collect();
    let report_path = a.out.join("test_report.txt");
    if !test.is_empty() {
        let (scores, labels) = predict_all(&outcome.best, &data.graph, &test).map_err(classify)?;
        let r = compute_metrics(&scores, &labels, cfg.decision_threshold).map_err(classify)?;
        let text = format!("best_epoch={}\n{}", outcome.best_epoch.map_or(-1, |e| e as i64), r.to_text());
        formats::write_atomic(&report_path, text.as_bytes()).map_err(runtime)?;
        print!("{text}");
    }
    let mut m = RunManifest::new("train", argv);
    m.config = config::training_to_kv(&cfg);
    m.seeds.push(("train".into(), cfg.seed));
    m.input(&a.data)?;
    if let Some(ck) = &a.resume {
        m.input(ck)?;
    }
    for name in ["best.ckpt", "last.ckpt", "last.ckpt.state", "history.csv", "config.txt", "test_report.txt"] {
        let p = a.out.join(name);
        if p.is_file() {
            m.output(&p)?;
        }
    }
    m.write(&a.out.join("manifest.txt"), start)
}

fn load_checkpoint(path: &Path) -> Outcome<(sstg_core::network::Model, TrainingConfig)> {
    require_file(path)?;
    formats::read_checkpoint(path).map_err(invalid)
}

fn check_shapes(cfg: &TrainingConfig, data: &formats::Dataset) -> Outcome<()> {
    let m = &cfg.model;
    let s = data.shape;
    if (m.nodes, m.bands, m.steps) != (s.nodes, s.bands, s.steps) {
        return Err(invalid(format!(
            "dataset is {}×{}×{} but the checkpoint expects {}×{}×{}",
            s.nodes, s.bands, s.steps, m.nodes, m.bands, m.steps
        )));
    }
    Ok(())
}

fn run_eval(a: &EvalArgs, argv: &[String]) -> Outcome<()> {
    let start = Instant::now();
    let (model, cfg) = load_checkpoint(&a.model)?;
    let data = load_dataset(&a.data)?;
    check_shapes(&cfg, &data)?;
    let idx: Vec<usize> = match a.split.as_str() {
        "all" => (0..data.samples.len()).collect(),
        which => {
            let s = split_dataset(data.samples.len(), cfg.split, cfg.seed).map_err(invalid)?;
            match which {
                "train" => s.train,
                "val" => s.val,
                "test" => s.test,
                other => return Err(invalid(format!("unknown split `{other}`"))),
            }
        }
    };
    let subset: Vec<&LabeledSample> = idx.iter().map(|&i| &data.samples[i]).collect();
    let (scores, labels) = predict_all(&model, &data.graph, &subset).map_err(classify)?;
    let r = compute_metrics(&scores, &labels, cfg.decision_threshold).map_err(classify)?;
    let roc = formats::sidecar(&a.report, "roc.csv");
    let confusion = formats::sidecar(&a.report, "confusion.csv");
    formats::write_atomic(&a.report, r.to_text().as_bytes()).map_err(runtime)?;
    formats::write_atomic(&roc, r.roc_csv().as_bytes()).map_err(runtime)?;
    formats::write_atomic(&confusion, r.confusion_csv().as_bytes()).map_err(runtime)?;
    print!("{}", r.to_text());
    let mut m = RunManifest::new("eval", argv);
    m.config = config::training_to_kv(&cfg);
    m.config.insert("eval.split".into(), a.split.clone());
    m.seeds.push(("train".into(), cfg.seed));
    m.input(&a.model)?;
    m.input(&a.data)?;
    for p in [&a.report, &roc, &confusion] {
        m.output(p)?;
    }
    m.write(&formats::sidecar(&a.report, "manifest"), start)
}

fn run_export(a: &ExportArgs, argv: &[String]) -> Outcome<()> {
    let start = Instant::now();
    let (model, cfg) = load_checkpoint(&a.model)?;
    let data = load_dataset(&a.data)?;
    check_shapes(&cfg, &data)?;
    let all: Vec<&LabeledSample> = data.samples.iter().collect();
    let mut buf = Vec::new();
    let rows = export_embeddings(&model, &data.graph, &all, &mut buf).map_err(classify)?;
    formats::write_atomic(&a.out, &buf).map_err(runtime)?;
    println!("wrote {rows} embedding rows to {}", a.out.display());
    let mut m = RunManifest::new("export-embeddings", argv);
    m.config = config::training_to_kv(&cfg);
    m.input(&a.model)?;
    m.input(&a.data)?;
    m.output(&a.out)?;
    m.write(&formats::sidecar(&a.out, "manifest"), start)
}

fn run_selftest(a: &SelftestArgs) -> Outcome<()> {
    let results = selftest::run_all(a.seed, a.scale);
    print!("{}", selftest::summary(&results));
    if results.iter().all(|r| r.passed()) {
        Ok(())
    } else {
        Err(runtime("one or more self-test suites failed"))
    }
}
