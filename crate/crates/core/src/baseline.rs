//! Graph-free reference: a per-node MLP on the flattened `F·T` input,
//! trained with the same optimizer, schedule, batching and selection rule
//! as the main model.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::evalkit::compute_metrics;
use crate::objectives::bce_tape;
use crate::params::{Binder, Group, ParamId, ParamStore, Support};
use crate::synthdata::LabeledSample;
use crate::tensor::Mat;
use crate::training::{lr_schedule, Adam, Split, TrainingConfig};

#[derive(Clone, Debug)]
pub struct Mlp {
    pub input_dim: usize,
    pub store: ParamStore,
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    pub fn new(input_dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        if input_dim == 0 || hidden.contains(&0) {
            return Err(Error::Config("MLP widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut dims = vec![input_dim];
        dims.extend(hidden);
        dims.push(1);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let bound = crate::network::he_bound(w[0]);
                let wid = store.add_uniform(&mut rng, format!("mlp.{l}.w"), (w[0], w[1]), bound, Group::Main, Support::Full);
                let bid = store.add(format!("mlp.{l}.b"), Mat::zeros(1, w[1]), Group::Main, Support::Full);
                (wid, bid)
            })
            .collect();
        Ok(Self { input_dim, store, layers })
    }

    /// One row per node: the node's `F×T` block in row-major order.
    pub fn features(&self, samples: &[&LabeledSample]) -> Result<Mat> {
        let rows: usize = samples.iter().map(|s| s.x.len()).sum();
        let mut data = Vec::with_capacity(rows * self.input_dim);
        for s in samples {
            for m in &s.x {
                if m.len() != self.input_dim {
                    return Err(Error::Shape(format!("node block of {} values, MLP expects {}", m.len(), self.input_dim)));
                }
                data.extend_from_slice(&m.data);
            }
        }
        Ok(Mat::from_vec(rows, self.input_dim, data))
    }

    /// Scores in `(0, 1)`, `rows×1`.
    pub fn forward(&self, b: &mut Binder<'_>, x: Var) -> Var {
        let mut h = x;
        for (l, &(w, bias)) in self.layers.iter().enumerate() {
            let (w, bias) = (b.param(w), b.param(bias));
            let t = &mut b.tape;
            let z = t.matmul(h, w);
            let z = t.add_row_bcast(z, bias);
            h = if l + 1 == self.layers.len() { t.sigmoid(z) } else { t.relu(z) };
        }
        h
    }

    pub fn predict(&self, samples: &[&LabeledSample]) -> Result<Vec<f64>> {
        let x = self.features(samples)?;
        let mut b = Binder::new(&self.store);
        let xv = b.tape.constant(x);
        let out = self.forward(&mut b, xv);
        Ok(b.tape.value(out).data.clone())
    }
}

#[derive(Clone, Debug)]
pub struct MlpOutcome {
    pub best: Mlp,
    pub best_epoch: Option<usize>,
    /// `(train_ce, val_acc)` per epoch.
    pub history: Vec<(f64, f64)>,
}

fn labels(samples: &[&LabeledSample]) -> Vec<u8> {
    samples.iter().flat_map(|s| s.y.iter().copied()).collect()
}

pub fn accuracy(mlp: &Mlp, samples: &[&LabeledSample], threshold: f64) -> Result<f64> {
    let scores = mlp.predict(samples)?;
    Ok(compute_metrics(&scores, &labels(samples), threshold)?.accuracy)
}

/// Train on `split.train`, keep the parameters with the best accuracy on
/// `split.val`.
pub fn train_mlp(samples: &[LabeledSample], split: &Split, hidden: &[usize], cfg: &TrainingConfig) -> Result<MlpOutcome> {
    cfg.validate()?;
    let first = samples.first().ok_or_else(|| Error::InvalidInput("no samples".into()))?;
    let input_dim = first.x.first().map_or(0, Mat::len);
    let mut mlp = Mlp::new(input_dim, hidden, cfg.seed)?;
    let mut adam = Adam::new(&mlp.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let val: Vec<&LabeledSample> = split.val.iter().map(|&i| &samples[i]).collect();
    let mut best = mlp.clone();
    let mut best_epoch = None;
    let mut best_acc = f64::NEG_INFINITY;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order = split.train.clone();
        order.shuffle(&mut rng);
        let (mut ce, mut steps) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&LabeledSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let x = mlp.features(&batch)?;
            let y = labels(&batch);
            let mut b = Binder::new(&mlp.store);
            let xv = b.tape.constant(x);
            let scores = mlp.forward(&mut b, xv);
            let loss = bce_tape(&mut b.tape, scores, &y)?;
            let value = b.tape.scalar_value(loss);
            let grads = b.backward_params(loss);
            if !value.is_finite() || !grads.iter().flatten().all(Mat::is_finite) {
                log::warn!("non-finite MLP loss at epoch {epoch}; batch skipped");
                continue;
            }
            adam.step(&mut mlp.store, &grads, lr_schedule(epoch, cfg));
            ce += value;
            steps += 1;
        }
        let acc = if val.is_empty() { f64::NAN } else { accuracy(&mlp, &val, cfg.decision_threshold)? };
        history.push((ce / steps.max(1) as f64, acc));
        if acc > best_acc {
            best_acc = acc;
            best = mlp.clone();
            best_epoch = Some(epoch);
        }
    }
    Ok(MlpOutcome {
        best,
        best_epoch,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Vec<LabeledSample> {
        // label = first feature positive
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        (0..n)
            .map(|_| {
                use rand::Rng;
                let x: Vec<Mat> = (0..3).map(|_| Mat::from_fn(2, 2, |_, _| rng.gen_range(-1.0..1.0))).collect();
                let y = x.iter().map(|m| (m.data[0] > 0.0) as u8).collect();
                LabeledSample {
                    x,
                    y,
                    graph_id: String::new(),
                }
            })
            .collect()
    }

    #[test]
    fn learns_a_linear_rule() {
        let data = toy(200);
        let split = Split {
            train: (0..120).collect(),
            val: (120..160).collect(),
            test: (160..200).collect(),
        };
        let cfg = TrainingConfig {
            lr0: 1e-2,
            epochs: 60,
            batch_size: 8,
            ..TrainingConfig::default()
        };
        let out = train_mlp(&data, &split, &[16], &cfg).unwrap();
        let test: Vec<&LabeledSample> = split.test.iter().map(|&i| &data[i]).collect();
        let acc = accuracy(&out.best, &test, 0.5).unwrap();
        assert!(acc > 0.9, "test accuracy {acc}");
        assert_eq!(out.history.len(), 60);
    }

    #[test]
    fn rejects_bad_widths() {
        assert!(Mlp::new(4, &[0], 0).is_err());
    }
}
