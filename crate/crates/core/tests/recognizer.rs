use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tpgsr::data::{build_dataset, Alphabet, BLANK, NUM_CLASSES};
use tpgsr::recognizer::*;
use tpgsr::tensor::AdamState;
use tpgsr::{Graph, ParamStore, Tensor};

fn small_config() -> RecognizerConfig {
    RecognizerConfig::standard().with_channels([4, 8, 8, 8])
}

fn build(seed: u64, config: RecognizerConfig) -> (ParamStore<f32>, Recognizer) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rec = Recognizer::new(&mut store, "rec.", config, &mut rng).unwrap();
    (store, rec)
}

fn tp_of(store: &mut ParamStore<f32>, rec: &Recognizer, x: Tensor<f32>, train: bool) -> Tensor<f32> {
    let mut g = Graph::new(store);
    let x = g.input(x);
    let tp = rec.generate_tp(&mut g, x, train).unwrap();
    g.value(tp).clone()
}

#[test]
fn prior_rows_are_distributions_of_the_right_shape() {
    let (mut store, rec) = build(1, small_config());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::uniform(&[3, 1, 32, 128], 0.0, 1.0, &mut rng);
    let tp = tp_of(&mut store, &rec, x, false);
    assert_eq!(tp.shape(), &[3, 16, NUM_CLASSES]);
    for row in tp.data().chunks_exact(NUM_CLASSES) {
        let s: f64 = row.iter().map(|&v| v as f64).sum();
        assert!((s - 1.0).abs() < 1e-6, "{s}");
    }
}

#[test]
fn lr_sized_inputs_are_resized_first() {
    let (mut store, rec) = build(1, small_config());
    let tp = tp_of(&mut store, &rec, Tensor::full(&[2, 1, 16, 64], 0.5), false);
    assert_eq!(tp.shape(), &[2, 16, NUM_CLASSES]);
}

#[test]
fn eval_mode_is_deterministic_and_batch_independent() {
    let (mut store, rec) = build(3, small_config());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::uniform(&[4, 1, 32, 128], 0.0, 1.0, &mut rng);
    let a = tp_of(&mut store, &rec, x.clone(), false);
    let b = tp_of(&mut store, &rec, x.clone(), false);
    assert_eq!(a.data(), b.data());
    let one = tp_of(&mut store, &rec, x.narrow0(2, 3).unwrap(), false);
    let per = 16 * NUM_CLASSES;
    assert!(one.data().iter().zip(&a.data()[2 * per..3 * per]).all(|(p, q)| (p - q).abs() < 1e-6));
}

#[test]
fn fresh_models_are_near_uniform_on_blank_input() {
    for seed in 0..10 {
        let (mut store, rec) = build(seed, RecognizerConfig::standard());
        let tp = tp_of(&mut store, &rec, Tensor::zeros(&[1, 1, 32, 128]), false);
        let max = tp.data().iter().copied().fold(0.0f32, f32::max);
        assert!(max < 0.5, "seed {seed}: {max}");
    }
}

fn one_hot_rows(symbols: &[usize]) -> Vec<f32> {
    let mut rows = vec![0.0; symbols.len() * NUM_CLASSES];
    for (i, &s) in symbols.iter().enumerate() {
        rows[i * NUM_CLASSES + s] = 1.0;
    }
    rows
}

#[test]
fn greedy_decoding_collapses_repeats_and_drops_blanks() {
    let (a, b, c) = (Alphabet.index('a'), Alphabet.index('b'), Alphabet.index('c'));
    assert_eq!(decode(&one_hot_rows(&[a, a, BLANK, b])), "ab");
    assert_eq!(decode(&one_hot_rows(&[BLANK; 16])), "");
    assert_eq!(decode(&one_hot_rows(&[BLANK, c, c, BLANK, c])), "cc");
    assert_eq!(decode_indices(&[a, a, BLANK, b]), "ab");
}

#[test]
fn exact_match_ignores_case() {
    let preds = vec!["ab1".to_string(), "x".to_string()];
    assert_eq!(exact_match(&preds, &["AB1", "y"]), 0.5);
}

/// Runs `steps` Adam steps on the mean log-probability of blank.
fn train_steps(store: &mut ParamStore<f32>, rec: &Recognizer, steps: usize) {
    let mut adam = AdamState::new(1e-2);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..steps {
        let x = Tensor::uniform(&[2, 1, 32, 128], 0.0, 1.0, &mut rng);
        let mut g = Graph::new(store);
        let x = g.input(x);
        let logits = rec.logits(&mut g, x, true).unwrap();
        let flat = g.reshape(logits, &[2 * 16, NUM_CLASSES]).unwrap();
        let loss = g.cross_entropy(flat, &[BLANK; 32]).unwrap();
        g.backward(loss).unwrap();
        drop(g);
        adam.step(store);
    }
}

fn weights(store: &ParamStore<f32>) -> Vec<Vec<u32>> {
    store
        .iter()
        .filter(|(_, p)| !p.name.contains("running"))
        .map(|(_, p)| p.tensor.data().iter().map(|v| v.to_bits()).collect())
        .collect()
}

#[test]
fn freezing_blocks_updates_and_unfreezing_resumes_them() {
    let (mut store, rec) = build(5, small_config());
    set_trainable(&mut store, &rec, false);
    let before = weights(&store);
    train_steps(&mut store, &rec, 100);
    assert_eq!(weights(&store), before, "frozen recognizer changed");
    assert!(store.iter().all(|(_, p)| p.tensor.grad().is_none_or(|g| g.iter().all(|&v| v == 0.0))));

    set_trainable(&mut store, &rec, true);
    train_steps(&mut store, &rec, 3);
    let tuned = weights(&store);
    assert_ne!(tuned, before, "tuned recognizer did not change");

    set_trainable(&mut store, &rec, false);
    assert_eq!(weights(&store), tuned, "toggling must not reset values");
    train_steps(&mut store, &rec, 5);
    assert_eq!(weights(&store), tuned);
}

#[test]
fn zero_epochs_is_a_no_op_and_empty_data_is_rejected() {
    let ds = build_dataset(8, 3, 1, 1).unwrap();
    let (mut store, rec) = build(6, small_config());
    let before = store.clone();
    let cfg = PretrainConfig {
        epochs: 0,
        ..Default::default()
    };
    let report = pretrain(&mut store, &rec, &ds.train, &cfg, |_| {}).unwrap();
    assert!(report.epochs.is_empty());
    assert!(store.bitwise_eq(&before));
    assert!(pretrain(&mut store, &rec, &[], &PretrainConfig::default(), |_| {}).is_err());
}

#[test]
fn pretraining_lowers_the_loss_and_keeps_the_best_epoch() {
    let ds = build_dataset(240, 3, 2, 1).unwrap();
    let (mut store, rec) = build(7, small_config());
    let cfg = PretrainConfig {
        epochs: 3,
        batch: 16,
        seed: 3,
        ..Default::default()
    };
    let mut seen = Vec::new();
    let report = pretrain(&mut store, &rec, &ds.train, &cfg, |e| seen.push(e.clone())).unwrap();
    assert_eq!(seen.len(), 3);
    assert!(seen[2].mean_loss < seen[0].mean_loss, "{seen:?}");
    assert!(seen[0].last_batch_loss < seen[0].first_batch_loss, "{seen:?}");
    let best = seen.iter().map(|e| e.val_accuracy).fold(f64::MIN, f64::max);
    assert_eq!(report.best_val_accuracy, best);
}
