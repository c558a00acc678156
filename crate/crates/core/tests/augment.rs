use cmlm_da::augment::{
    apply_plan, hard_substitute, noise, plan_soft_substitution, select_positions, soft_embedding, without_specials,
    write_synthetic, HardStrategy, HardSubstitution, NoiseSpec, SoftDistribution, SubstitutionPlan, Unigram,
};
use cmlm_da::cmlm::{Cmlm, ConditioningMode, FinetuneConfig, Side};
use cmlm_da::corpus::{read_id_pairs, TokenizedPair, MASK, NUM_SPECIALS};
use cmlm_da::model::TransformerConfig;
use cmlm_da::numcore::{Graph, Tensor};
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

fn table(rows: usize, d: usize, seed: u64) -> Tensor<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[rows, d], |_| r.random_range(-1.0..1.0))
}

fn random_dist(v: usize, seed: u64) -> Vec<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..v).map(|_| r.random::<f64>()).collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|p| p / z).collect()
}

fn dist(probs: Vec<f64>) -> SoftDistribution<f64> {
    SoftDistribution { position: 0, probs }
}

#[test]
fn one_hot_gives_the_row() {
    let e = table(8, 4, 1);
    let mut p = vec![0.0; 8];
    p[5] = 1.0;
    assert_eq!(soft_embedding(&dist(p), &e).unwrap(), e.data()[20..24].to_vec());
}

#[test]
fn even_split_gives_the_midpoint() {
    let e = table(8, 4, 2);
    let mut p = vec![0.0; 8];
    p[2] = 0.5;
    p[6] = 0.5;
    let got = soft_embedding(&dist(p), &e).unwrap();
    for c in 0..4 {
        assert!((got[c] - (e.data()[8 + c] + e.data()[24 + c]) / 2.0).abs() < 1e-15);
    }
}

#[test]
fn matches_explicit_summation() {
    let e = table(8, 4, 3);
    let p = random_dist(8, 4);
    let got = soft_embedding(&dist(p.clone()), &e).unwrap();
    let row = |j: usize| &e.data()[j * 4..(j + 1) * 4];
    for c in 0..4 {
        let want = p[0] * row(0)[c]
            + p[1] * row(1)[c]
            + p[2] * row(2)[c]
            + p[3] * row(3)[c]
            + p[4] * row(4)[c]
            + p[5] * row(5)[c]
            + p[6] * row(6)[c]
            + p[7] * row(7)[c];
        assert!((got[c] - want).abs() < 1e-6);
    }
}

#[test]
fn dimension_mismatch_is_an_error() {
    assert!(soft_embedding(&dist(vec![1.0; 3]), &table(4, 2, 0)).is_err());
}

proptest! {
    #[test]
    fn soft_embedding_stays_in_the_convex_hull(v in 1usize..12, d in 1usize..6, seed in any::<u64>()) {
        let e = table(v, d, seed);
        let got = soft_embedding(&dist(random_dist(v, seed + 1)), &e).unwrap();
        for c in 0..d {
            let col: Vec<f64> = (0..v).map(|j| e.data()[j * d + c]).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(got[c] >= lo - 1e-12 && got[c] <= hi + 1e-12);
        }
    }

    #[test]
    fn soft_embedding_is_linear(v in 1usize..12, d in 1usize..6, alpha in 0.0f64..1.0, seed in any::<u64>()) {
        let e = table(v, d, seed);
        let p = random_dist(v, seed + 1);
        let q = random_dist(v, seed + 2);
        let mix: Vec<f64> = p.iter().zip(&q).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
        let ep = soft_embedding(&dist(p), &e).unwrap();
        let eq = soft_embedding(&dist(q), &e).unwrap();
        let em = soft_embedding(&dist(mix), &e).unwrap();
        for c in 0..d {
            prop_assert!((em[c] - (alpha * ep[c] + (1.0 - alpha) * eq[c])).abs() < 1e-6);
        }
    }

    #[test]
    fn special_mass_is_removed(v in 8usize..30, seed in any::<u64>()) {
        let p = without_specials(&random_dist(v, seed));
        prop_assert!(p[..NUM_SPECIALS].iter().all(|&x| x == 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn swap_drop_blank_smooth_shapes(n in 1usize..20, p in 0.0f64..1.0, k in 1usize..4, seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let seq: Vec<usize> = (0..n).map(|i| NUM_SPECIALS + i).collect();
        let uni = unigram();
        prop_assert_eq!(noise(&seq, NoiseSpec::Swap(k), &uni, &mut r).unwrap().len(), n);
        prop_assert_eq!(noise(&seq, NoiseSpec::Blank(p), &uni, &mut r).unwrap().len(), n);
        prop_assert_eq!(noise(&seq, NoiseSpec::Smooth(p), &uni, &mut r).unwrap().len(), n);
        let dropped = noise(&seq, NoiseSpec::Drop(p), &uni, &mut r).unwrap();
        prop_assert!(!dropped.is_empty() && dropped.len() <= n);
        // Survivors keep their relative order.
        prop_assert!(dropped.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn swap_displacement_is_bounded_by_window(n in 1usize..20, k in 1usize..5, seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let seq: Vec<usize> = (0..n).map(|i| NUM_SPECIALS + i).collect();
        let out = noise(&seq, NoiseSpec::Swap(k), &unigram(), &mut r).unwrap();
        for (new_pos, t) in out.iter().enumerate() {
            let old_pos = t - NUM_SPECIALS;
            prop_assert!(new_pos.abs_diff(old_pos) <= k);
        }
    }
}

fn unigram() -> Unigram {
    let mut counts = vec![0u64; V];
    counts[7] = 3;
    counts[8] = 1;
    Unigram::from_counts(&counts).unwrap()
}

#[test]
fn swap_of_window_one_over_ten_thousand_runs() {
    let seq = [7usize, 8, 9, 10];
    let uni = unigram();
    for seed in 0..10_000u64 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let out = noise(&seq, NoiseSpec::Swap(1), &uni, &mut r).unwrap();
        let mut sorted = out.clone();
        sorted.sort();
        assert_eq!(sorted, seq);
        for (i, t) in out.iter().enumerate() {
            assert!(i.abs_diff(t - 7) <= 1, "seed {seed}: {out:?}");
        }
    }
}

#[test]
fn zero_noise_is_identity() {
    let seq = vec![7, 8, 9, 10, 11];
    let uni = unigram();
    let mut r = ChaCha8Rng::seed_from_u64(0);
    for spec in [NoiseSpec::Drop(0.0), NoiseSpec::Blank(0.0), NoiseSpec::Smooth(0.0)] {
        assert_eq!(noise(&seq, spec, &uni, &mut r).unwrap(), seq);
    }
}

#[test]
fn full_drop_keeps_one_token() {
    let seq = vec![7, 8, 9, 10, 11];
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let out = noise(&seq, NoiseSpec::Drop(1.0), &unigram(), &mut r).unwrap();
    assert_eq!(out.len(), 1);
    assert!(seq.contains(&out[0]));
}

#[test]
fn full_blank_and_smooth() {
    let seq = vec![9, 10, 11];
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let uni = unigram();
    assert_eq!(noise(&seq, NoiseSpec::Blank(1.0), &uni, &mut r).unwrap(), vec![MASK; 3]);
    let s = noise(&seq, NoiseSpec::Smooth(1.0), &uni, &mut r).unwrap();
    assert!(s.iter().all(|t| *t == 7 || *t == 8));
}

#[test]
fn unigram_sampling_follows_counts() {
    let uni = unigram();
    assert!((uni.probability(7) - 0.75).abs() < 1e-12);
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let hits = (0..20_000).filter(|_| uni.sample(&mut r) == 7).count();
    assert!((hits as f64 / 20_000.0 - 0.75).abs() < 0.01);
}

#[test]
fn invalid_noise_is_rejected() {
    let uni = unigram();
    let mut r = ChaCha8Rng::seed_from_u64(0);
    assert!(noise(&[], NoiseSpec::Drop(0.1), &uni, &mut r).is_err());
    assert!(noise(&[7], NoiseSpec::Swap(0), &uni, &mut r).is_err());
    assert!(noise(&[7], NoiseSpec::Blank(1.5), &uni, &mut r).is_err());
}

#[test]
fn gate_probability_is_respected() {
    let tokens: Vec<usize> = vec![7; 100];
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let mut picked = 0;
    for _ in 0..100 {
        picked += select_positions(&tokens, 0.25, &mut r).len();
    }
    let frac = picked as f64 / 10_000.0;
    assert!((frac - 0.25).abs() <= 0.01, "{frac}");
    assert!(select_positions(&tokens, 0.0, &mut r).is_empty());
    assert_eq!(select_positions(&tokens, 1.0, &mut r).len(), 100);
}

fn pairs() -> Vec<TokenizedPair> {
    vec![
        TokenizedPair::new(vec![7, 8, 9], vec![10, 11], V).unwrap(),
        TokenizedPair::new(vec![12, 1, 13, 14], vec![15, 16, 17], V).unwrap(),
    ]
}

#[test]
fn plans_cover_exactly_the_gated_side() {
    let ps = pairs();
    let refs: Vec<&TokenizedPair> = ps.iter().collect();
    let mut r = ChaCha8Rng::seed_from_u64(0);
    for side in [Side::Source, Side::Target] {
        let m = Cmlm::<f64>::init(small(), V, 1, side, ConditioningMode::Both).unwrap();
        let none = plan_soft_substitution(&refs, side, &m, 0.0, &mut r).unwrap();
        assert!(none.iter().all(SubstitutionPlan::is_empty));
        let all = plan_soft_substitution(&refs, side, &m, 1.0, &mut r).unwrap();
        for (p, plan) in ps.iter().zip(&all) {
            let toks = side.of(p);
            // Every ordinary token is planned; UNK (id 1) never is.
            let want: Vec<usize> = (0..toks.len()).filter(|&i| toks[i] >= NUM_SPECIALS).collect();
            assert_eq!(plan.positions(), want);
            for e in &plan.entries {
                assert!((e.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(e.probs[..NUM_SPECIALS].iter().all(|&q| q == 0.0));
            }
        }
        let other = if side == Side::Source { Side::Target } else { Side::Source };
        assert!(plan_soft_substitution(&refs, other, &m, 0.5, &mut r).is_err());
    }
}

fn embed(g: &mut Graph<f64>, e: cmlm_da::numcore::Var, ids: &[usize], b: usize, l: usize) -> cmlm_da::numcore::Var {
    g.gather(e, ids, &[b, l]).unwrap()
}

#[test]
fn apply_plan_touches_only_planned_rows() {
    let e = table(V, 4, 9);
    let ids = [7, 8, 9, 10, 11, 12];
    let mut g = Graph::new();
    let ev = g.param(e.clone());
    let base = embed(&mut g, ev, &ids, 2, 3);

    let empty = vec![SubstitutionPlan::<f64> { side: Side::Source, gamma: 0.0, entries: vec![] }; 2];
    assert_eq!(apply_plan(&mut g, base, &empty, ev, 0).unwrap(), base);

    let mut onehot = vec![0.0; V];
    onehot[11] = 1.0;
    let identity = vec![
        SubstitutionPlan { side: Side::Source, gamma: 1.0, entries: vec![] },
        SubstitutionPlan { side: Side::Source, gamma: 1.0, entries: vec![SoftDistribution { position: 1, probs: onehot }] },
    ];
    let same = apply_plan(&mut g, base, &identity, ev, 0).unwrap();
    assert_eq!(g.value(same), g.value(base));

    let single = vec![
        SubstitutionPlan { side: Side::Target, gamma: 1.0, entries: vec![SoftDistribution { position: 0, probs: random_dist(V, 3) }] },
        SubstitutionPlan { side: Side::Target, gamma: 1.0, entries: vec![] },
    ];
    let changed = apply_plan(&mut g, base, &single, ev, 1).unwrap();
    let diff_rows: Vec<usize> = (0..6)
        .filter(|r| g.value(changed).data()[r * 4..(r + 1) * 4] != g.value(base).data()[r * 4..(r + 1) * 4])
        .collect();
    assert_eq!(diff_rows, vec![1]);

    // Gradients flow into the embedding through the mixture.
    let s = g.sum(changed);
    g.backward(s).unwrap();
    assert!(g.grad(ev).unwrap().data().iter().all(|v| v.is_finite()));
}

fn degenerate_cmlm() -> (Cmlm<f64>, TokenizedPair) {
    let a = 7;
    let p = TokenizedPair::new(vec![a, a, a], vec![a, a, a], V).unwrap();
    let mut m = Cmlm::<f64>::init(small(), V, 11, Side::Target, ConditioningMode::Both).unwrap();
    let cfg = FinetuneConfig {
        steps: 60,
        batch_size: 4,
        peak_lr: 3e-3,
        mask_rate: 0.3,
        seed: 1,
    };
    m.finetune(std::slice::from_ref(&p), &cfg).unwrap();
    (m, p)
}

#[test]
fn hard_substitution_behaviour() {
    let (m, p) = degenerate_cmlm();
    let mut r = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(hard_substitute(&p, Side::Target, &m, 0.0, &mut r, HardStrategy::Sample).unwrap(), p);
    let am = hard_substitute(&p, Side::Target, &m, 1.0, &mut r, HardStrategy::Argmax).unwrap();
    assert_eq!(am, p);

    let q = TokenizedPair::new(vec![8, 9], vec![10, 11, 12, 13], V).unwrap();
    let draw = |seed| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        hard_substitute(&q, Side::Target, &m, 0.5, &mut r, HardStrategy::Sample).unwrap()
    };
    assert_eq!(draw(4), draw(4));
    assert_eq!(draw(4).x, q.x);
}

#[test]
fn synthetic_corpus_files_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let prefix = dir.path().join("synth");
    let items = vec![
        (0, HardSubstitution { pair: pairs()[0].clone(), replaced: vec![1] }),
        (5, HardSubstitution { pair: pairs()[1].clone(), replaced: vec![0, 2] }),
    ];
    write_synthetic(&prefix, &items).unwrap();
    let back = read_id_pairs(&dir.path().join("synth.src.ids"), &dir.path().join("synth.tgt.ids"), V).unwrap();
    assert_eq!(back, pairs());
    let prov = std::fs::read_to_string(dir.path().join("synth.prov")).unwrap();
    assert_eq!(prov, "1\t1\n6\t0,2\n");
}
