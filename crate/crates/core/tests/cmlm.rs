use cmlm_da::cmlm::{
    argmax, example_with_positions, make_masked_example, masked_loss, Cmlm, ConditioningMode, ExampleBatch,
    FinetuneConfig, MaskedExample, Side,
};
use cmlm_da::corpus::{TokenizedPair, CLS, MASK, SEP};
use cmlm_da::model::TransformerConfig;
use cmlm_da::numcore::{rng, Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const V: usize = 20;

fn small() -> TransformerConfig {
    TransformerConfig {
        layers: 1,
        d_model: 16,
        d_ff: 32,
        heads: 2,
        dropout: 0.0,
        max_len: 32,
    }
}

fn pair(x: &[usize], y: &[usize]) -> TokenizedPair {
    TokenizedPair::new(x.to_vec(), y.to_vec(), V).unwrap()
}

fn random_pair(r: &mut ChaCha8Rng) -> TokenizedPair {
    let m = r.random_range(1..8);
    let n = r.random_range(1..8);
    let x = (0..m).map(|_| r.random_range(7..V)).collect();
    let y = (0..n).map(|_| r.random_range(7..V)).collect();
    TokenizedPair::new(x, y, V).unwrap()
}

fn assert_one_side(ex: &MaskedExample, p: &TokenizedPair) {
    let first_sep = ex.ids.iter().position(|&t| t == SEP).unwrap();
    assert!(!ex.mask_positions.is_empty());
    assert_eq!(ex.mask_positions.len(), ex.labels.len());
    for (&pos, &label) in ex.mask_positions.iter().zip(&ex.labels) {
        assert_eq!(ex.ids[pos], MASK);
        match (ex.mode, ex.side) {
            (ConditioningMode::Both, Side::Source) => assert!(pos >= 1 && pos < first_sep),
            (ConditioningMode::Both, Side::Target) => assert!(pos > first_sep && pos < ex.ids.len() - 1),
            (ConditioningMode::Mono, _) => assert!(pos >= 1 && pos < ex.ids.len() - 1),
        }
        assert_eq!(ex.side.of(p)[pos - ex.span.start], label);
    }
}

#[test]
fn one_side_rule_over_a_thousand_examples() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    for i in 0..1000 {
        let p = random_pair(&mut r);
        let side = if i % 2 == 0 { Side::Source } else { Side::Target };
        let mode = if i % 3 == 0 { ConditioningMode::Mono } else { ConditioningMode::Both };
        let ex = make_masked_example(&p, side, 0.15, mode, 64, &mut r).unwrap();
        assert_one_side(&ex, &p);
    }
}

#[test]
fn layout_and_segments() {
    let p = pair(&[7, 8], &[9, 10, 11]);
    let mut r = rng::rng(0);
    let ex = make_masked_example(&p, Side::Target, 0.5, ConditioningMode::Both, 64, &mut r).unwrap();
    assert_eq!(ex.segments, vec![0, 0, 0, 0, 1, 1, 1, 1]);
    assert_eq!(ex.ids[0], CLS);
    assert_eq!(ex.ids[3], SEP);
    assert_eq!(*ex.ids.last().unwrap(), SEP);
    assert_eq!(ex.span, 4..7);
}

#[test]
fn mono_examples_hold_only_their_side() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        // Disjoint id ranges per side make leakage visible.
        let m = r.random_range(1..6);
        let n = r.random_range(1..6);
        let p = pair(&(0..m).map(|_| r.random_range(7..13)).collect::<Vec<_>>(), &(0..n).map(|_| r.random_range(13..V)).collect::<Vec<_>>());
        let ex = make_masked_example(&p, Side::Source, 0.3, ConditioningMode::Mono, 64, &mut r).unwrap();
        assert!(ex.ids.iter().all(|&t| t < 13));
        let ex = make_masked_example(&p, Side::Target, 0.3, ConditioningMode::Mono, 64, &mut r).unwrap();
        assert!(ex.ids.iter().all(|&t| !(7..13).contains(&t)));
    }
}

#[test]
fn nothing_selected_forces_one_mask() {
    let p = pair(&[7, 8, 9, 10], &[11]);
    let mut r = rng::rng(3);
    for _ in 0..50 {
        let ex = make_masked_example(&p, Side::Source, 1e-12, ConditioningMode::Both, 64, &mut r).unwrap();
        assert_eq!(ex.mask_positions.len(), 1);
    }
}

#[test]
fn mask_rate_is_respected_in_aggregate() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let p = pair(&[7; 20], &[8; 3]);
    let (mut masked, mut total) = (0usize, 0usize);
    while total < 10_000 {
        let ex = make_masked_example(&p, Side::Source, 0.15, ConditioningMode::Both, 64, &mut r).unwrap();
        masked += ex.mask_positions.len();
        total += 20;
    }
    let frac = masked as f64 / total as f64;
    assert!((frac - 0.15).abs() <= 0.01, "masked fraction {frac}");
}

#[test]
fn invalid_rates_and_lengths_are_rejected() {
    let p = pair(&[7, 8], &[9]);
    let mut r = rng::rng(0);
    assert!(make_masked_example(&p, Side::Source, 0.0, ConditioningMode::Both, 64, &mut r).is_err());
    assert!(make_masked_example(&p, Side::Source, 1.0, ConditioningMode::Both, 64, &mut r).is_err());
    assert!(make_masked_example(&p, Side::Source, 0.5, ConditioningMode::Both, 5, &mut r).is_err());
    assert!(example_with_positions(&p, Side::Target, ConditioningMode::Both, &[1], 64).is_err());
}

#[test]
fn finetune_error_names_the_pair() {
    let mut m = Cmlm::<f64>::init(TransformerConfig { max_len: 6, ..small() }, V, 0, Side::Source, ConditioningMode::Both).unwrap();
    let corpus = vec![pair(&[7], &[8]), pair(&[7, 8, 9], &[10, 11])];
    let cfg = FinetuneConfig { steps: 5, batch_size: 8, ..FinetuneConfig::default() };
    let err = m.finetune(&corpus, &cfg).unwrap_err().to_string();
    assert!(err.contains("pair 2"), "{err}");
}

#[test]
fn zero_steps_leaves_model_unchanged() {
    let mut m = Cmlm::<f64>::init(small(), V, 5, Side::Source, ConditioningMode::Both).unwrap();
    let before = m.model.params.checksum();
    let curve = m.finetune(&[pair(&[7], &[8])], &FinetuneConfig { steps: 0, ..FinetuneConfig::default() }).unwrap();
    assert!(curve.is_empty());
    assert_eq!(before, m.model.params.checksum());
}

fn ten_pairs() -> Vec<TokenizedPair> {
    let mut r = ChaCha8Rng::seed_from_u64(10);
    (0..10).map(|_| random_pair(&mut r)).collect()
}

#[test]
fn finetuning_reduces_masked_loss() {
    let mut m = Cmlm::<f64>::init(small(), V, 6, Side::Target, ConditioningMode::Both).unwrap();
    let cfg = FinetuneConfig {
        steps: 200,
        batch_size: 10,
        peak_lr: 3e-3,
        mask_rate: 0.15,
        seed: 7,
    };
    let curve = m.finetune(&ten_pairs(), &cfg).unwrap();
    assert_eq!(curve.len(), 200);
    let head: f64 = curve[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = curve[190..].iter().sum::<f64>() / 10.0;
    assert!(tail < head, "{head} -> {tail}");
}

#[test]
fn finetuning_is_bit_deterministic() {
    let run = || {
        let mut m = Cmlm::<f64>::init(small(), V, 6, Side::Source, ConditioningMode::Both).unwrap();
        let cfg = FinetuneConfig {
            steps: 20,
            batch_size: 4,
            peak_lr: 1e-3,
            mask_rate: 0.15,
            seed: 8,
        };
        m.finetune(&ten_pairs(), &cfg).unwrap();
        m.to_checkpoint([0; 32]).to_bytes()
    };
    assert_eq!(run(), run());
}

#[test]
fn predictions_are_distributions_one_per_mask() {
    let m = Cmlm::<f64>::init(small(), V, 9, Side::Source, ConditioningMode::Both).unwrap();
    let p = pair(&[7, 8, 9, 10], &[11, 12]);
    let ex = example_with_positions(&p, Side::Source, ConditioningMode::Both, &[0, 2, 3], 64).unwrap();
    let d = m.predict_masked(&ex).unwrap();
    assert_eq!(d.len(), 3);
    assert_eq!(d.iter().map(|s| s.position).collect::<Vec<_>>(), vec![0, 2, 3]);
    for s in &d {
        assert_eq!(s.probs.len(), V);
        assert!(s.probs.iter().all(|&q| q >= 0.0));
        assert!((s.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn predicting_with_the_wrong_binding_fails() {
    let m = Cmlm::<f64>::init(small(), V, 9, Side::Source, ConditioningMode::Both).unwrap();
    let p = pair(&[7], &[8]);
    let ex = example_with_positions(&p, Side::Target, ConditioningMode::Both, &[0], 64).unwrap();
    assert!(m.predict_masked(&ex).is_err());
    let ex = example_with_positions(&p, Side::Source, ConditioningMode::Mono, &[0], 64).unwrap();
    assert!(m.predict_masked(&ex).is_err());
}

#[test]
fn degenerate_corpus_predicts_the_only_token() {
    let a = 7;
    let mut m = Cmlm::<f64>::init(small(), V, 11, Side::Source, ConditioningMode::Both).unwrap();
    let corpus = vec![pair(&[a, a, a], &[a, a, a])];
    let cfg = FinetuneConfig {
        steps: 60,
        batch_size: 4,
        peak_lr: 3e-3,
        mask_rate: 0.3,
        seed: 1,
    };
    m.finetune(&corpus, &cfg).unwrap();
    let ex = example_with_positions(&corpus[0], Side::Source, ConditioningMode::Both, &[1], 64).unwrap();
    let d = m.predict_masked(&ex).unwrap();
    assert_eq!(argmax(&d[0].probs), a);
}

#[test]
fn loss_ignores_unmasked_logits() {
    let m = Cmlm::<f64>::init(small(), V, 12, Side::Source, ConditioningMode::Both).unwrap();
    let p = pair(&[7, 8, 9], &[10, 11]);
    let ex = example_with_positions(&p, Side::Source, ConditioningMode::Both, &[1], 64).unwrap();
    let batch = ExampleBatch::new(std::slice::from_ref(&ex));
    let mut g = Graph::new();
    let pv = m.model.params.load(&mut g, false);
    let logits = m.model.forward(&mut g, &pv, &batch.ids, &batch.segments, &batch.visible, 1, batch.width).unwrap();
    let full = masked_loss(&mut g, logits, &batch).unwrap();
    let mut zeroed: Tensor<f64> = g.value(logits).clone();
    for pos in 0..batch.width {
        if !batch.rows.contains(&pos) {
            zeroed.data_mut()[pos * V..(pos + 1) * V].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let z = g.constant(zeroed);
    let part = masked_loss(&mut g, z, &batch).unwrap();
    assert_eq!(g.value(full).item(), g.value(part).item());
}

#[test]
fn checkpoint_roles_are_enforced() {
    let m = Cmlm::<f32>::init(small(), V, 13, Side::Target, ConditioningMode::Mono).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.ckpt");
    m.save(&path, [7; 32]).unwrap();
    assert!(Cmlm::<f32>::load(&path, Side::Source, ConditioningMode::Mono).is_err());
    assert!(Cmlm::<f32>::load(&path, Side::Target, ConditioningMode::Both).is_err());
    let back = Cmlm::<f64>::load(&path, Side::Target, ConditioningMode::Mono).unwrap();
    assert_eq!(back.model.config, m.model.config);
    assert_eq!(Cmlm::<f64>::peek_role(&path).unwrap(), (Side::Target, ConditioningMode::Mono));
}

/// Source token `s` is 7 exactly when the target's second token is 11, so only a model that
/// reads the target can recover it.
fn linked_corpus() -> Vec<TokenizedPair> {
    let mut r = ChaCha8Rng::seed_from_u64(20);
    (0..64)
        .map(|_| {
            let flip = r.random_bool(0.5);
            let filler = r.random_range(14..V);
            pair(&[9, if flip { 7 } else { 8 }, filler], &[10, if flip { 11 } else { 12 }, filler])
        })
        .collect()
}

fn prob_of_7(m: &Cmlm<f64>, t: usize, mode: ConditioningMode) -> f64 {
    let p = pair(&[9, 7, 15], &[10, t, 15]);
    let ex = example_with_positions(&p, Side::Source, mode, &[1], 64).unwrap();
    m.predict_masked(&ex).unwrap()[0].probs[7]
}

#[test]
fn conditioning_on_the_target_is_live() {
    let corpus = linked_corpus();
    let cfg = FinetuneConfig {
        steps: 300,
        batch_size: 16,
        peak_lr: 3e-3,
        mask_rate: 0.3,
        seed: 21,
    };
    let mut both = Cmlm::<f64>::init(small(), V, 22, Side::Source, ConditioningMode::Both).unwrap();
    both.finetune(&corpus, &cfg).unwrap();
    let gap = prob_of_7(&both, 11, ConditioningMode::Both) - prob_of_7(&both, 12, ConditioningMode::Both);
    assert!(gap > 0.5, "probability gap {gap}");

    let mut mono = Cmlm::<f64>::init(small(), V, 22, Side::Source, ConditioningMode::Mono).unwrap();
    mono.finetune(&corpus, &cfg).unwrap();
    assert_eq!(
        prob_of_7(&mono, 11, ConditioningMode::Mono),
        prob_of_7(&mono, 12, ConditioningMode::Mono)
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masked_examples_respect_the_bound_side(seed in any::<u64>(), rate in 0.01f64..0.99, target in any::<bool>(), mono in any::<bool>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let p = random_pair(&mut r);
        let side = if target { Side::Target } else { Side::Source };
        let mode = if mono { ConditioningMode::Mono } else { ConditioningMode::Both };
        let ex = make_masked_example(&p, side, rate, mode, 64, &mut r).unwrap();
        assert_one_side(&ex, &p);
        let batch = ExampleBatch::new(std::slice::from_ref(&ex));
        prop_assert_eq!(batch.rows, ex.mask_positions);
    }
}
