//! Quick randomized invariant checks, runnable from an installed binary.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{mask_passing_aggregate, TsmpLayerParams};
use crate::autodiff::Var;
use crate::config;
use crate::evalkit::{rank_auc, roc_curve, trapezoid_area};
use crate::graph::{build_graph, layout_for, Strategy};
use crate::network::{Model, ModelConfig};
use crate::objectives::sparse_loss;
use crate::params::{Binder, Group, ParamStore};
use crate::preprocess::{wpt_decompose, wpt_reconstruct, SignalSegment, Wavelet};
use crate::tensor::Mat;
use crate::training::{lr_schedule, pcgrad_combine, TrainingConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub cases: usize,
    /// First failing case, if any.
    pub failure: Option<String>,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

type Check = fn(&mut ChaCha8Rng, usize) -> std::result::Result<(), String>;

const SUITES: &[(&str, usize, Check)] = &[
    ("wpt_round_trip", 20, wpt_round_trip),
    ("attention_normalization", 50, attention_normalization),
    ("sparse_bounds", 200, sparse_bounds),
    ("pcgrad_no_conflict", 200, pcgrad_no_conflict),
    ("auc_pairwise", 50, auc_pairwise),
    ("decoder_causality", 5, decoder_causality),
    ("config_round_trip", 1, config_round_trip),
    ("lr_schedule", 1, schedule),
];

pub fn suite_names() -> Vec<&'static str> {
    SUITES.iter().map(|s| s.0).collect()
}

/// Run every suite with `seed`; `scale` multiplies the case counts.
pub fn run_all(seed: u64, scale: usize) -> Vec<SuiteResult> {
    SUITES
        .iter()
        .enumerate()
        .map(|(k, &(name, cases, check))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let cases = cases * scale.max(1);
            let failure = (0..cases).find_map(|c| check(&mut rng, c).err().map(|m| format!("case {c}: {m}")));
            SuiteResult { name, cases, failure }
        })
        .collect()
}

pub fn summary(results: &[SuiteResult]) -> String {
    let mut s = String::new();
    for r in results {
        match &r.failure {
            None => s.push_str(&format!("PASS {} ({} cases)\n", r.name, r.cases)),
            Some(m) => s.push_str(&format!("FAIL {}: {m}\n", r.name)),
        }
    }
    let passed = results.iter().filter(|r| r.passed()).count();
    s.push_str(&format!("{passed}/{} suites passed\n", results.len()));
    s
}

type Outcome = std::result::Result<(), String>;

fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

fn wpt_round_trip(rng: &mut ChaCha8Rng, _: usize) -> Outcome {
    let depth = rng.gen_range(1..=4);
    let len = (1 << depth) * rng.gen_range(2..=16);
    let seg = SignalSegment {
        samples: random_mat(rng, 2, len),
        segment_index: 0,
        scale: 1.0,
        degenerate: false,
    };
    for w in [Wavelet::Haar, Wavelet::Db2, Wavelet::Db4] {
        let t = match wpt_decompose(&seg, depth, w) {
            Ok(t) => t,
            Err(e) => return Err(e.to_string()),
        };
        let back = match wpt_reconstruct(&t) {
            Ok(b) => b,
            Err(e) => return Err(e.to_string()),
        };
        let err = back.samples.zip_map(&seg.samples, |a, b| a - b).max_abs();
        if err >= 1e-8 {
            return Err(format!("{w} depth {depth} len {len}: round-trip error {err:e}"));
        }
        let e_in: f64 = seg.samples.data.iter().map(|v| v * v).sum();
        let rel = (t.energy() - e_in).abs() / e_in;
        if rel >= 1e-10 {
            return Err(format!("{w}: energy relative error {rel:e}"));
        }
    }
    Ok(())
}

fn attention_normalization(rng: &mut ChaCha8Rng, _: usize) -> Outcome {
    let n = rng.gen_range(2..=6);
    let f = rng.gen_range(1..=8);
    let t = rng.gen_range(1..=8);
    let g = build_graph(&layout_for(n), Strategy::Full).map_err(|e| e.to_string())?;
    let mut store = ParamStore::new();
    let p = TsmpLayerParams::init(&mut store, rng, "l", f, t, 1, Group::Shared);
    let mut b = Binder::new(&store);
    let x: Vec<Var> = (0..n).map(|_| b.tape.constant(random_mat(rng, f, t))).collect();
    let out = match mask_passing_aggregate(&mut b, &x, &g, &p, true) {
        Ok(o) => o,
        Err(e) => return Err(e.to_string()),
    };
    for &(_, j, i, af, at) in &out.coefficients {
        let af = b.tape.value(af);
        for r in 0..af.rows {
            let s: f64 = af.row(r).iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(format!("alpha_F row {r} of edge {j}->{i} sums to {s}"));
            }
        }
        let at = b.tape.value(at);
        for r in 0..at.rows {
            for c in 0..r {
                if at.get(r, c) != 0.0 {
                    return Err(format!("alpha_T[{r},{c}] = {} on edge {j}->{i}", at.get(r, c)));
                }
            }
        }
    }
    Ok(())
}

fn sparse_bounds(rng: &mut ChaCha8Rng, _: usize) -> Outcome {
    let nodes = rng.gen_range(1..=4);
    let h: Vec<Mat> = (0..nodes).map(|_| random_mat(rng, 3, 5)).collect();
    let n = (nodes * 15) as f64;
    let v = sparse_loss(&h, 4.0).map_err(|e| e.to_string())?.value;
    let lo = n.powf(-0.75);
    if v < lo - 1e-10 || v > 1.0 + 1e-10 {
        return Err(format!("value {v} outside [{lo}, 1]"));
    }
    let c = rng.gen_range(0.1..10.0);
    let scaled: Vec<Mat> = h.iter().map(|m| m.map(|x| c * x)).collect();
    let vs = sparse_loss(&scaled, 4.0).map_err(|e| e.to_string())?.value;
    if (vs - v).abs() > 1e-10 {
        return Err(format!("scaling by {c} moved the loss from {v} to {vs}"));
    }
    Ok(())
}

fn pcgrad_no_conflict(rng: &mut ChaCha8Rng, _: usize) -> Outcome {
    let len = rng.gen_range(1..=10);
    let a: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    let combined = pcgrad_combine(&[a.clone(), b.clone()], rng).map_err(|e| e.to_string())?;
    // the projected task vectors are what the combination sums
    let project = |g: &[f64], h: &[f64]| -> Vec<f64> {
        let d = dot(g, h);
        let nh = dot(h, h);
        if d < 0.0 && nh > 0.0 {
            g.iter().zip(h).map(|(x, y)| x - d / nh * y).collect()
        } else {
            g.to_vec()
        }
    };
    let (pa, pb) = (project(&a, &b), project(&b, &a));
    if dot(&pa, &b) < -1e-12 || dot(&pb, &a) < -1e-12 {
        return Err("projected gradient still conflicts".into());
    }
    let sum: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x + y).collect();
    if sum.iter().zip(&combined).any(|(x, y)| (x - y).abs() > 1e-12) {
        return Err("combined gradient differs from the projected sum".into());
    }
    Ok(())
}

fn auc_pairwise(rng: &mut ChaCha8Rng, _: usize) -> Outcome {
    let n = rng.gen_range(2..=60);
    let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..10) as f64) / 10.0).collect();
    let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=1)).collect();
    let auc = rank_auc(&scores, &labels).map_err(|e| e.to_string())?;
    let (mut wins, mut pairs) = (0.0, 0usize);
    for i in 0..n {
        for j in 0..n {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1;
                wins += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    match auc {
        None if pairs == 0 => Ok(()),
        Some(a) if pairs > 0 => {
            let brute = wins / pairs as f64;
            if (a - brute).abs() > 1e-12 {
                return Err(format!("rank AUC {a} vs pairwise {brute}"));
            }
            let area = trapezoid_area(&roc_curve(&scores, &labels).map_err(|e| e.to_string())?);
            if (area - a).abs() > 1e-10 {
                return Err(format!("ROC area {area} vs AUC {a}"));
            }
            Ok(())
        }
        other => Err(format!("AUC {other:?} with {pairs} pairs")),
    }
}

fn decoder_causality(rng: &mut ChaCha8Rng, _: usize) -> Outcome {
    let cfg = ModelConfig {
        nodes: 3,
        bands: 4,
        steps: 8,
        heads: 1,
        encoder_layers: 1,
        main_channels: vec![5],
        ssl_hidden: vec![5],
        seed: rng.gen(),
        ..ModelConfig::default()
    };
    let model = Model::new(cfg).map_err(|e| e.to_string())?;
    let x: Vec<Mat> = (0..3).map(|_| random_mat(rng, 4, 8)).collect();
    let cut = rng.gen_range(0..7);
    let mut y = x.clone();
    for m in &mut y {
        for f in 0..4 {
            for t in cut + 1..8 {
                m.set(f, t, rng.gen_range(-1.0..1.0));
            }
        }
    }
    let run = |inp: &[Mat]| -> Vec<Mat> {
        let mut b = Binder::new(&model.store);
        let v: Vec<Var> = inp.iter().map(|m| b.tape.constant(m.clone())).collect();
        let blk = &model.params.ssl_decoder_blocks[0];
        let conv = model.tcn_forward(&mut b, &v, blk);
        let rec = model.reconstruct(&mut b, &v);
        conv.iter().chain(&rec).map(|&o| b.tape.value(o).clone()).collect()
    };
    let (a, bb) = (run(&x), run(&y));
    for (p, q) in a.iter().zip(&bb) {
        for r in 0..p.rows {
            for t in 0..=cut {
                if p.get(r, t) != q.get(r, t) {
                    return Err(format!("output at t={t} changed after perturbing t>{cut}"));
                }
            }
        }
    }
    Ok(())
}

fn config_round_trip(_: &mut ChaCha8Rng, _: usize) -> Outcome {
    let c = TrainingConfig::default();
    match config::parse_training(&config::training_to_text(&c)) {
        Ok(back) if back == c => Ok(()),
        Ok(_) => Err("default training config changed in a round trip".into()),
        Err(e) => Err(e.to_string()),
    }
}

fn schedule(_: &mut ChaCha8Rng, _: usize) -> Outcome {
    let c = TrainingConfig::default();
    let got = [lr_schedule(0, &c), lr_schedule(50, &c), lr_schedule(299, &c)];
    if got != [1e-4, 5e-5, 3.125e-6] {
        return Err(format!("schedule gave {got:?}"));
    }
    Ok(())
}
