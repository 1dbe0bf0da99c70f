//! Joint two-branch training: per-task gradients, PCGrad on the shared
//! encoder, Adam with a step-halving schedule, validation-based selection.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::evalkit::{compute_metrics, predict_all};
use crate::graph::TactileGraph;
use crate::network::{mask_input, MaskSpec, Model, ModelConfig};
use crate::objectives::{bce_tape, recon_tape, sparse_tape, LossBundle, LossWeights, SPARSE_P};
use crate::params::{Binder, Group, ParamStore};
use crate::synthdata::LabeledSample;
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub lr0: f64,
    pub halve_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// `(train, val, test)` fractions.
    pub split: [f64; 3],
    /// Rate, granularity and patch length of the SSL input mask; the seed
    /// field is ignored (mask seeds come from the run RNG).
    pub mask: MaskSpec,
    pub seed: u64,
    /// Treat reconstruction and sparsity as separate PCGrad tasks.
    pub pcgrad_three_way: bool,
    /// Reconstruction loss over masked entries only.
    pub recon_masked_only: bool,
    pub loss: LossWeights,
    pub sparse_p: f64,
    /// Score at or above which a node is predicted important.
    pub decision_threshold: f64,
    pub model: ModelConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            halve_every: 50,
            epochs: 300,
            batch_size: 32,
            split: [0.6, 0.2, 0.2],
            mask: MaskSpec::default(),
            seed: 0,
            pcgrad_three_way: false,
            recon_masked_only: false,
            loss: LossWeights::default(),
            sparse_p: SPARSE_P,
            decision_threshold: 0.5,
            model: ModelConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if self.halve_every == 0 || self.batch_size == 0 {
            return bad("halve_every and batch_size must be positive".into());
        }
        if self.split.iter().any(|&s| !(0.0..=1.0).contains(&s)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("split {:?} must be fractions summing to 1", self.split));
        }
        if !(0.0..1.0).contains(&self.mask.rate) {
            return bad(format!("mask rate {} outside [0, 1)", self.mask.rate));
        }
        if self.mask.patch_len == 0 {
            return bad("mask patch length must be positive".into());
        }
        if self.sparse_p < 2.0 {
            return bad(format!("sparse exponent {} below 2", self.sparse_p));
        }
        if !(0.0..=1.0).contains(&self.decision_threshold) {
            return bad("decision threshold outside [0, 1]".into());
        }
        self.model.validate()
    }
}

/// `lr0 · 2^(−⌊epoch / halve_every⌋)`
pub fn lr_schedule(epoch: usize, cfg: &TrainingConfig) -> f64 {
    let halvings = (epoch / cfg.halve_every.max(1)).min(1074) as i32;
    cfg.lr0 * 0.5f64.powi(halvings)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Project each task gradient off the others it conflicts with (in a
/// random order per task) and sum the results.
pub fn pcgrad_combine<R: Rng>(task_grads: &[Vec<f64>], rng: &mut R) -> Result<Vec<f64>> {
    if task_grads.len() < 2 {
        return Err(Error::InvalidInput(format!("PCGrad needs at least 2 tasks, got {}", task_grads.len())));
    }
    let len = task_grads[0].len();
    if task_grads.iter().any(|g| g.len() != len) {
        return Err(Error::Shape("task gradients differ in length".into()));
    }
    if task_grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("task gradient".into()));
    }
    let norms: Vec<f64> = task_grads.iter().map(|g| dot(g, g)).collect();
    let mut out = vec![0.0; len];
    for (i, gi) in task_grads.iter().enumerate() {
        let mut g = gi.clone();
        let mut others: Vec<usize> = (0..task_grads.len()).filter(|&j| j != i).collect();
        others.shuffle(rng);
        for j in others {
            if norms[j] == 0.0 {
                continue;
            }
            let d = dot(&g, &task_grads[j]);
            if d < 0.0 {
                let c = d / norms[j];
                for (gk, hk) in g.iter_mut().zip(&task_grads[j]) {
                    *gk -= c * hk;
                }
            }
        }
        for (o, v) in out.iter_mut().zip(&g) {
            *o += v;
        }
    }
    Ok(out)
}

/// Index partition of a dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle, then `⌊f₀·n⌋` / `⌊f₁·n⌋` / remainder.
pub fn split_dataset(n: usize, split: [f64; 3], seed: u64) -> Result<Split> {
    if n < 5 {
        return Err(Error::InvalidInput(format!("need at least 5 samples to split, got {n}")));
    }
    if (split.iter().sum::<f64>() - 1.0).abs() > 1e-9 || split.iter().any(|&s| s < 0.0) {
        return Err(Error::InvalidInput(format!("split {split:?} must be fractions summing to 1")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    // small epsilon so that 0.6·10 lands on 6, not 5.999…
    let n_train = (split[0] * n as f64 + 1e-9).floor() as usize;
    let n_val = ((split[1] * n as f64 + 1e-9).floor() as usize).min(n - n_train);
    Ok(Split {
        train: idx[..n_train].to_vec(),
        val: idx[n_train..n_train + n_val].to_vec(),
        test: idx[n_train + n_val..].to_vec(),
    })
}

/// Adam moments for every entry of a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Mat> = store.entries().iter().map(|e| Mat::zeros(e.value.rows, e.value.cols)).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update; parameters with no gradient are left alone but the
    /// step counter still advances.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Mat>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (k, value) in store.values_mut().enumerate() {
            let Some(g) = &grads[k] else { continue };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..g.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
                v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                value.data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Everything needed to continue a run bit-exactly.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub adam: Adam,
    pub epoch: usize,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(cfg: &TrainingConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(ModelConfig {
            seed: cfg.seed,
            ..cfg.model.clone()
        })?;
        let adam = Adam::new(&model.store);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Self {
            model,
            adam,
            epoch: 0,
            rng,
        })
    }
}

struct SampleResult {
    ce: f64,
    rec: Option<f64>,
    sparse: Option<f64>,
    main: Vec<Option<Mat>>,
    /// One entry per SSL task (one, or two in three-way mode).
    ssl: Vec<Vec<Option<Mat>>>,
}

fn sample_gradients(
    model: &Model,
    g: &TactileGraph,
    sample: &LabeledSample,
    cfg: &TrainingConfig,
    mask_seed: u64,
) -> Result<SampleResult> {
    let mut b = Binder::new(&model.store);
    let xv: Vec<Var> = sample.x.iter().map(|m| b.tape.constant(m.clone())).collect();
    let out = model.forward_main(&mut b, g, &xv)?;
    let ce = bce_tape(&mut b.tape, out.scores, &sample.y)?;
    let ce_val = b.tape.scalar_value(ce);
    let main = b.backward_params(ce);
    drop(b);

    if model.config.ablations.no_ssl {
        return Ok(SampleResult {
            ce: ce_val,
            rec: None,
            sparse: None,
            main,
            ssl: Vec::new(),
        });
    }
    let spec = MaskSpec {
        seed: mask_seed,
        ..cfg.mask
    };
    let (masked, masks) = mask_input(&sample.x, &spec)?;
    let mut b = Binder::new(&model.store);
    let xv: Vec<Var> = masked.iter().map(|m| b.tape.constant(m.clone())).collect();
    let out = model.forward_ssl(&mut b, g, &xv)?;
    let (sp, _) = sparse_tape(&mut b.tape, &out.latent, cfg.sparse_p)?;
    let select: Option<Vec<Mat>> = cfg
        .recon_masked_only
        .then(|| masks.iter().map(|m| m.map(|k| 1.0 - k)).collect());
    let rec = recon_tape(&mut b.tape, &out.recon, &sample.x, &cfg.loss, select.as_deref())?;
    let (rec_val, sp_val) = (b.tape.scalar_value(rec), b.tape.scalar_value(sp));
    let t = &mut b.tape;
    let ssl = if cfg.pcgrad_three_way {
        let r = t.scale(rec, cfg.loss.rec);
        let s = t.scale(sp, cfg.loss.sparse);
        vec![b.backward_params(r), b.backward_params(s)]
    } else {
        let r = t.scale(rec, cfg.loss.rec);
        let s = t.scale(sp, cfg.loss.sparse);
        let total = t.add(r, s);
        vec![b.backward_params(total)]
    };
    Ok(SampleResult {
        ce: ce_val,
        rec: Some(rec_val),
        sparse: Some(sp_val),
        main,
        ssl,
    })
}

fn accumulate(acc: &mut [Option<Mat>], g: &[Option<Mat>]) {
    for (a, gi) in acc.iter_mut().zip(g) {
        if let Some(gi) = gi {
            match a {
                Some(a) => a.add_assign(gi),
                None => *a = Some(gi.clone()),
            }
        }
    }
}

fn flatten(store: &ParamStore, grads: &[Option<Mat>], group: Group) -> Vec<f64> {
    let mut out = Vec::new();
    for (e, g) in store.entries().iter().zip(grads) {
        if e.group != group {
            continue;
        }
        match g {
            Some(g) => out.extend_from_slice(&g.data),
            None => out.extend(std::iter::repeat(0.0).take(e.value.len())),
        }
    }
    out
}

/// One optimizer step on `batch`. On a non-finite loss or gradient the
/// state is left untouched and an error is returned.
pub fn train_step(state: &mut TrainState, g: &TactileGraph, batch: &[&LabeledSample], cfg: &TrainingConfig) -> Result<LossBundle> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let mut rng = state.rng.clone();
    let seeds: Vec<u64> = batch.iter().map(|_| rng.gen()).collect();
    let model = &state.model;
    let results: Vec<Result<SampleResult>> = batch
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(s, &seed)| sample_gradients(model, g, s, cfg, seed))
        .collect();
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;

    let n = batch.len() as f64;
    let np = model.store.len();
    let ssl_tasks = results[0].ssl.len();
    let mut main = vec![None; np];
    let mut ssl = vec![vec![None; np]; ssl_tasks];
    let (mut ce, mut rec, mut sparse) = (0.0, 0.0, 0.0);
    for r in &results {
        ce += r.ce;
        rec += r.rec.unwrap_or(0.0);
        sparse += r.sparse.unwrap_or(0.0);
        accumulate(&mut main, &r.main);
        for (acc, gs) in ssl.iter_mut().zip(&r.ssl) {
            accumulate(acc, gs);
        }
    }
    let has_ssl = ssl_tasks > 0;
    let bundle = LossBundle {
        l_ce: ce / n,
        l_rec: has_ssl.then_some(rec / n),
        l_sparse: has_ssl.then_some(sparse / n),
        weights: cfg.loss,
    };
    if !bundle.is_finite() {
        log::warn!("non-finite loss at epoch {}: {bundle:?}; step skipped", state.epoch);
        return Err(Error::NonFinite(format!("training loss at epoch {}", state.epoch)));
    }
    for gs in std::iter::once(&mut main).chain(ssl.iter_mut()) {
        for m in gs.iter_mut().flatten() {
            m.scale_in_place(1.0 / n);
        }
    }
    let finite = |gs: &[Option<Mat>]| gs.iter().flatten().all(Mat::is_finite);
    if !finite(&main) || !ssl.iter().all(|s| finite(s)) {
        log::warn!("non-finite gradient at epoch {}; step skipped", state.epoch);
        return Err(Error::NonFinite(format!("gradient at epoch {}", state.epoch)));
    }

    let store = &model.store;
    let mut combined: Vec<Option<Mat>> = vec![None; np];
    for (k, e) in store.entries().iter().enumerate() {
        combined[k] = match e.group {
            Group::Main => main[k].clone(),
            Group::Ssl => {
                let mut acc: Option<Mat> = None;
                for task in &ssl {
                    accumulate(std::slice::from_mut(&mut acc), std::slice::from_ref(&task[k]));
                }
                acc
            }
            Group::Shared => None,
        };
    }
    let shared_main = flatten(store, &main, Group::Shared);
    let shared = if has_ssl {
        let mut tasks = vec![shared_main];
        tasks.extend(ssl.iter().map(|s| flatten(store, s, Group::Shared)));
        pcgrad_combine(&tasks, &mut rng)?
    } else {
        shared_main
    };
    let mut off = 0;
    for (k, e) in store.entries().iter().enumerate() {
        if e.group == Group::Shared {
            let len = e.value.len();
            combined[k] = Some(Mat::from_vec(e.value.rows, e.value.cols, shared[off..off + len].to_vec()));
            off += len;
        }
    }
    let lr = lr_schedule(state.epoch, cfg);
    state.adam.step(&mut state.model.store, &combined, lr);
    state.rng = rng;
    Ok(bundle)
}

/// One line of the per-epoch history.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_ce: f64,
    pub ssl_rec: Option<f64>,
    pub ssl_sparse: Option<f64>,
    pub val_acc: f64,
    pub val_auc: f64,
    pub val_f1: f64,
}

pub const HISTORY_HEADER: &str = "epoch,lr,train_ce,ssl_rec,ssl_sparse,val_acc,val_auc,val_f1";

impl HistoryRow {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("nan".to_string(), |x| x.to_string());
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.train_ce,
            opt(self.ssl_rec),
            opt(self.ssl_sparse),
            self.val_acc,
            self.val_auc,
            self.val_f1
        )
    }
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut s = format!("{HISTORY_HEADER}\n");
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub history: Vec<HistoryRow>,
    /// Parameters at the epoch with the best validation accuracy (the
    /// initial model if no epoch ran).
    pub best: Model,
    pub best_epoch: Option<usize>,
    pub split: Split,
}

/// Validation metrics of `model` on `idx`.
pub fn evaluate(model: &Model, g: &TactileGraph, samples: &[LabeledSample], idx: &[usize], threshold: f64) -> Result<(f64, f64, f64)> {
    if idx.is_empty() {
        return Ok((f64::NAN, f64::NAN, f64::NAN));
    }
    let subset: Vec<&LabeledSample> = idx.iter().map(|&i| &samples[i]).collect();
    let (scores, labels) = predict_all(model, g, &subset)?;
    let r = compute_metrics(&scores, &labels, threshold)?;
    Ok((r.accuracy, r.auc_or_nan(), r.f1))
}

/// Run the full epoch loop from a fresh state.
pub fn train(samples: &[LabeledSample], g: &TactileGraph, cfg: &TrainingConfig, checkpoint_dir: Option<&Path>) -> Result<TrainOutcome> {
    let state = TrainState::new(cfg)?;
    let split = split_dataset(samples.len(), cfg.split, cfg.seed)?;
    train_from(state, samples, g, cfg, split, checkpoint_dir)
}

/// Continue the epoch loop from `state` until `cfg.epochs`.
pub fn train_from(
    mut state: TrainState,
    samples: &[LabeledSample],
    g: &TactileGraph,
    cfg: &TrainingConfig,
    split: Split,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(Error::InvalidInput("empty training split".into()));
    }
    let mut history = Vec::new();
    let mut best = state.model.clone();
    let mut best_epoch = None;
    let mut best_acc = f64::NEG_INFINITY;
    while state.epoch < cfg.epochs {
        let mut order = split.train.clone();
        order.shuffle(&mut state.rng);
        let (mut ce, mut rec, mut sparse, mut steps) = (0.0, 0.0, 0.0, 0usize);
        let mut has_ssl = false;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&LabeledSample> = chunk.iter().map(|&i| &samples[i]).collect();
            match train_step(&mut state, g, &batch, cfg) {
                Ok(b) => {
                    ce += b.l_ce;
                    if let (Some(r), Some(s)) = (b.l_rec, b.l_sparse) {
                        rec += r;
                        sparse += s;
                        has_ssl = true;
                    }
                    steps += 1;
                }
                Err(Error::NonFinite(msg)) => log::warn!("skipped batch: {msg}"),
                Err(e) => return Err(e),
            }
        }
        let denom = steps.max(1) as f64;
        let (val_acc, val_auc, val_f1) = evaluate(&state.model, g, samples, &split.val, cfg.decision_threshold)?;
        let row = HistoryRow {
            epoch: state.epoch,
            lr: lr_schedule(state.epoch, cfg),
            train_ce: if steps > 0 { ce / denom } else { f64::NAN },
            ssl_rec: has_ssl.then_some(rec / denom),
            ssl_sparse: has_ssl.then_some(sparse / denom),
            val_acc,
            val_auc,
            val_f1,
        };
        log::info!("{}", row.to_csv());
        history.push(row);
        state.epoch += 1;
        if val_acc > best_acc {
            best_acc = val_acc;
            best = state.model.clone();
            best_epoch = Some(state.epoch - 1);
            if let Some(dir) = checkpoint_dir {
                crate::formats::write_checkpoint(&dir.join("best.ckpt"), &best, cfg)?;
            }
        }
        if let Some(dir) = checkpoint_dir {
            crate::formats::write_checkpoint(&dir.join("last.ckpt"), &state.model, cfg)?;
            crate::formats::write_train_state(&dir.join("last.ckpt.state"), &state)?;
        }
    }
    Ok(TrainOutcome {
        state,
        history,
        best,
        best_epoch,
        split,
    })
}
