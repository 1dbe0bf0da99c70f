use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sstg_core::error::Error;
use sstg_core::formats::{decode_checkpoint, encode_checkpoint};
use sstg_core::graph::{build_graph, layout_for, Strategy, TactileGraph};
use sstg_core::network::ModelConfig;
use sstg_core::objectives::bce_loss;
use sstg_core::params::Group;
use sstg_core::synthdata::{generate_dataset, LabeledSample, SynthConfig};
use sstg_core::tensor::Mat;
use sstg_core::training::{train, train_step, TrainState, TrainingConfig};

fn small_cfg(nodes: usize) -> TrainingConfig {
    TrainingConfig {
        lr0: 3e-3,
        batch_size: 8,
        epochs: 2,
        seed: 4,
        model: ModelConfig {
            nodes,
            bands: 4,
            steps: 8,
            heads: 1,
            encoder_layers: 1,
            main_channels: vec![6, 6],
            ssl_hidden: vec![4],
            classifier_hidden: vec![16],
            ..ModelConfig::default()
        },
        ..TrainingConfig::default()
    }
}

fn toy_set(nodes: usize, count: usize) -> (Vec<LabeledSample>, TactileGraph) {
    let g = build_graph(&layout_for(nodes), Strategy::Knn(2)).unwrap();
    let synth = SynthConfig {
        node_count: nodes,
        sample_count: count,
        bands: 4,
        steps: 8,
        carrier_bands: vec![0, 1, 2, 3],
        duration: (2, 5),
        seed: 3,
        ..SynthConfig::default()
    };
    (generate_dataset(&synth, &g).unwrap().0, g)
}

fn mean_bce(state: &TrainState, g: &TactileGraph, samples: &[LabeledSample]) -> f64 {
    let mut total = 0.0;
    for s in samples {
        let (scores, _) = state.model.predict(g, &s.x).unwrap();
        total += bce_loss(&scores, &s.y).unwrap();
    }
    total / samples.len() as f64
}

#[test]
fn two_hundred_steps_reduce_training_bce() {
    let (samples, g) = toy_set(5, 32);
    let cfg = small_cfg(5);
    let mut state = TrainState::new(&cfg).unwrap();
    let before = mean_bce(&state, &g, &samples);
    let batch: Vec<&LabeledSample> = samples.iter().collect();
    for _ in 0..200 {
        train_step(&mut state, &g, &batch, &cfg).unwrap();
    }
    let after = mean_bce(&state, &g, &samples);
    assert!(after < before, "bce {before} -> {after}");
}

#[test]
fn no_ssl_leaves_the_ssl_branch_untouched() {
    let (samples, g) = toy_set(5, 8);
    let mut cfg = small_cfg(5);
    cfg.model.ablations.no_ssl = true;
    let mut state = TrainState::new(&cfg).unwrap();
    let before = state.model.store.clone();
    let batch: Vec<&LabeledSample> = samples.iter().collect();
    let bundle = train_step(&mut state, &g, &batch, &cfg).unwrap();
    assert_eq!(bundle.l_rec, None);
    assert_eq!(bundle.l_sparse, None);
    let mut changed = [0usize; 3];
    for (now, was) in state.model.store.entries().iter().zip(before.entries()) {
        let slot = match now.group {
            Group::Shared => 0,
            Group::Main => 1,
            Group::Ssl => 2,
        };
        if now.value != was.value {
            changed[slot] += 1;
        }
    }
    assert!(changed[0] > 0 && changed[1] > 0, "{changed:?}");
    assert_eq!(changed[2], 0);
}

#[test]
fn ssl_branch_trains_with_its_own_loss() {
    let (samples, g) = toy_set(5, 8);
    let cfg = small_cfg(5);
    let mut state = TrainState::new(&cfg).unwrap();
    let before = state.model.store.clone();
    let batch: Vec<&LabeledSample> = samples.iter().collect();
    let bundle = train_step(&mut state, &g, &batch, &cfg).unwrap();
    assert!(bundle.l_rec.is_some() && bundle.l_sparse.is_some());
    let ssl_moved = state
        .model
        .store
        .entries()
        .iter()
        .zip(before.entries())
        .any(|(a, b)| a.group == Group::Ssl && a.value != b.value);
    assert!(ssl_moved);
}

#[test]
fn non_finite_input_aborts_without_touching_state() {
    let (mut samples, g) = toy_set(5, 4);
    samples[1].x[2].set(1, 3, f64::NAN);
    let cfg = small_cfg(5);
    let mut state = TrainState::new(&cfg).unwrap();
    let (store, t, rng) = (state.model.store.clone(), state.adam.t, state.rng.clone());
    let batch: Vec<&LabeledSample> = samples.iter().collect();
    let err = train_step(&mut state, &g, &batch, &cfg).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    assert_eq!(state.adam.t, t);
    assert_eq!(state.rng, rng);
    for (a, b) in state.model.store.entries().iter().zip(store.entries()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
}

#[test]
fn zero_epochs_returns_the_initial_model() {
    let (samples, g) = toy_set(5, 10);
    let cfg = TrainingConfig {
        epochs: 0,
        ..small_cfg(5)
    };
    let out = train(&samples, &g, &cfg, None).unwrap();
    assert!(out.history.is_empty());
    assert_eq!(out.best_epoch, None);
    let fresh = TrainState::new(&cfg).unwrap();
    for (a, b) in out.best.store.entries().iter().zip(fresh.model.store.entries()) {
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn empty_batch_is_rejected() {
    let (_, g) = toy_set(5, 1);
    let cfg = small_cfg(5);
    let mut state = TrainState::new(&cfg).unwrap();
    assert!(train_step(&mut state, &g, &[], &cfg).is_err());
}

#[test]
fn checkpoint_rejects_damage() {
    let cfg = small_cfg(5);
    let state = TrainState::new(&cfg).unwrap();
    let bytes = encode_checkpoint(&state.model, &cfg).unwrap();
    let (model, back) = decode_checkpoint(&bytes).unwrap();
    // the model seed always follows the run seed
    let mut want = cfg.clone();
    want.model.seed = cfg.seed;
    assert_eq!(back, want);
    assert_eq!(model.store.len(), state.model.store.len());

    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(decode_checkpoint(&bad).is_err());
    for cut in [0, 8, bytes.len() / 2, bytes.len() - 1] {
        assert!(decode_checkpoint(&bytes[..cut]).is_err(), "truncated at {cut}");
    }
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(decode_checkpoint(&longer).is_err());
}

#[test]
fn batch_gradients_do_not_depend_on_thread_count() {
    let (samples, g) = toy_set(5, 8);
    let cfg = small_cfg(5);
    let batch: Vec<&LabeledSample> = samples.iter().collect();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let mut state = TrainState::new(&cfg).unwrap();
            for _ in 0..3 {
                train_step(&mut state, &g, &batch, &cfg).unwrap();
            }
            state.model.store.entries().iter().map(|e| e.value.clone()).collect::<Vec<Mat>>()
        })
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn different_seeds_give_different_models() {
    let cfg = small_cfg(5);
    let a = TrainState::new(&cfg).unwrap();
    let b = TrainState::new(&TrainingConfig { seed: 99, ..cfg }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let k = rng.gen_range(1..a.model.store.len());
    let differ = a
        .model
        .store
        .entries()
        .iter()
        .zip(b.model.store.entries())
        .skip(k - 1)
        .any(|(x, y)| x.value != y.value);
    assert!(differ);
}
