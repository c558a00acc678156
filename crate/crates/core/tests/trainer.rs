use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use cmlm_da::cmlm::{Cmlm, ConditioningMode, Side};
use cmlm_da::corpus::{ids_to_text, read_id_pairs, TokenizedPair};
use cmlm_da::model::{NmtInputs, NmtModel, TransformerConfig};
use cmlm_da::numcore::Tensor;
use cmlm_da::trainer::{train_nmt, Augmenters, DaConfig, DaMode, TrainConfig, TrainRun, TrainState, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const V: usize = 30;

fn corpus(n: usize, seed: u64) -> Vec<TokenizedPair> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = r.random_range(2..6);
            let x: Vec<usize> = (0..len).map(|_| r.random_range(7..18)).collect();
            let y = x.iter().rev().map(|t| t + 12).collect();
            TokenizedPair::new(x, y, V).unwrap()
        })
        .collect()
}

fn nmt_config() -> TransformerConfig {
    TransformerConfig {
        layers: 1,
        d_model: 16,
        d_ff: 32,
        heads: 2,
        dropout: 0.1,
        max_len: 16,
    }
}

fn train_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        max_tokens: 24,
        warmup: 4,
        seed: 7,
        ..Default::default()
    }
}

fn cmlm(side: Side) -> Cmlm<f64> {
    let c = TransformerConfig {
        max_len: 16,
        dropout: 0.0,
        ..nmt_config()
    };
    Cmlm::init(c, V, 3 + side.code() as u64, side, ConditioningMode::Both).unwrap()
}

fn both_cmlms() -> Augmenters<f64> {
    Augmenters {
        source: Some(cmlm(Side::Source)),
        target: Some(cmlm(Side::Target)),
    }
}

fn model() -> NmtModel<f64> {
    NmtModel::new(nmt_config(), V, 11).unwrap()
}

fn run(data: &[TokenizedPair], da: &DaConfig, aug: &Augmenters<f64>, cfg: &TrainConfig) -> TrainRun {
    train_nmt(model(), data, &[], da, aug, cfg, [0; 32]).unwrap().1
}

fn plain_stream(emb: &Tensor<f64>, ids: &[usize]) -> Vec<f64> {
    let d = emb.shape()[1];
    ids.iter().flat_map(|&i| emb.data()[i * d..(i + 1) * d].to_vec()).collect()
}

#[test]
fn gamma_zero_soft_is_bit_identical_to_no_augmentation() {
    let data = corpus(20, 1);
    let cfg = train_config();
    let base = run(&data, &DaConfig::none(), &Augmenters::none(), &cfg);
    let soft = run(&data, &DaConfig::soft(0.0, true, true), &both_cmlms(), &cfg);
    assert!(base.metrics.len() > 4);
    assert_eq!(base.metrics, soft.metrics);
    let hard = DaConfig {
        mode: DaMode::Hard,
        ..DaConfig::soft(0.0, true, true)
    };
    assert_eq!(base.metrics, run(&data, &hard, &both_cmlms(), &cfg).metrics);
}

#[test]
fn positive_gamma_changes_training() {
    let data = corpus(20, 1);
    let cfg = train_config();
    let base = run(&data, &DaConfig::none(), &Augmenters::none(), &cfg);
    for mode in [DaMode::Soft, DaMode::Hard, DaMode::Drop, DaMode::Blank, DaMode::Smooth, DaMode::Swap] {
        let da = DaConfig {
            mode,
            ..DaConfig::soft(0.5, true, true)
        };
        let r = run(&data, &da, &both_cmlms(), &cfg);
        assert_eq!(r.metrics.len(), base.metrics.len());
        assert_ne!(r.losses(), base.losses(), "{mode}");
    }
}

fn observe(data: &[TokenizedPair], da: &DaConfig, aug: &Augmenters<f64>) -> Vec<(Vec<usize>, bool, bool)> {
    let cfg = train_config();
    let t = Trainer {
        config: &cfg,
        da,
        augmenters: aug,
        train: data,
        valid: &[],
        digest: [0; 32],
    };
    let mut seen = vec![];
    let mut obs = |s: &cmlm_da::trainer::StepInfo<'_, f64>| {
        let src_plain = plain_stream(s.embedding, &s.inputs.src_ids) == s.source_stream.data();
        let tgt_plain = plain_stream(s.embedding, &s.inputs.tgt_in) == s.target_stream.data();
        seen.push((s.inputs.tgt_out.clone(), src_plain, tgt_plain));
    };
    t.run(&mut TrainState::new(model(), cfg.adam), None, Some(&mut obs)).unwrap();
    seen
}

#[test]
fn decoder_only_leaves_source_stream_and_labels_alone() {
    let data = corpus(20, 2);
    let base = observe(&data, &DaConfig::none(), &Augmenters::none());
    let dec = observe(&data, &DaConfig::soft(0.5, false, true), &both_cmlms());
    assert_eq!(base.len(), dec.len());
    for ((labels_a, _, _), (labels_b, src_plain, _)) in base.iter().zip(&dec) {
        assert_eq!(labels_a, labels_b);
        assert!(src_plain);
    }
    assert!(dec.iter().any(|s| !s.2), "decoder stream never augmented");
    assert!(base.iter().all(|s| s.1 && s.2));
}

#[test]
fn encoder_only_leaves_decoder_stream_alone() {
    let data = corpus(20, 2);
    let enc = observe(&data, &DaConfig::soft(0.5, true, false), &both_cmlms());
    assert!(enc.iter().all(|s| s.2));
    assert!(enc.iter().any(|s| !s.1));
}

#[test]
fn masked_lms_stay_frozen() {
    let data = corpus(20, 3);
    let aug = both_cmlms();
    let before = [aug.source.as_ref().unwrap().model.params.checksum(), aug.target.as_ref().unwrap().model.params.checksum()];
    run(&data, &DaConfig::soft(0.5, true, true), &aug, &train_config());
    let after = [aug.source.as_ref().unwrap().model.params.checksum(), aug.target.as_ref().unwrap().model.params.checksum()];
    assert_eq!(before, after);
}

#[test]
fn missing_masked_lm_fails_before_training() {
    let data = corpus(10, 4);
    let cfg = train_config();
    let only_src = Augmenters {
        source: Some(cmlm(Side::Source)),
        target: None,
    };
    for da in [DaConfig::soft(0.25, true, true), DaConfig { mode: DaMode::Hard, ..DaConfig::soft(0.25, false, true) }] {
        let t = Trainer {
            config: &cfg,
            da: &da,
            augmenters: &only_src,
            train: &data,
            valid: &[],
            digest: [0; 32],
        };
        let mut state = TrainState::new(model(), cfg.adam);
        let before = state.model.params.checksum();
        let mut calls = 0;
        let err = t.run(&mut state, None, Some(&mut |_| calls += 1)).unwrap_err();
        assert!(err.to_string().contains("target"), "{err}");
        assert_eq!(calls, 0);
        assert_eq!(state.step, 0);
        assert_eq!(state.model.params.checksum(), before);
    }
    let swapped = Augmenters {
        source: Some(cmlm(Side::Target)),
        target: Some(cmlm(Side::Target)),
    };
    let da = DaConfig::soft(0.25, true, false);
    let t = Trainer {
        config: &cfg,
        da: &da,
        augmenters: &swapped,
        train: &data,
        valid: &[],
        digest: [0; 32],
    };
    assert!(t.run(&mut TrainState::new(model(), cfg.adam), None, None).is_err());
    // encoder-only soft training does not need a target model
    let t = Trainer { augmenters: &only_src, ..t };
    assert!(t.run(&mut TrainState::new(model(), cfg.adam), None, None).is_ok());
}

#[test]
fn same_seed_same_metrics() {
    let data = corpus(20, 5);
    let da = DaConfig::soft(0.3, true, true);
    let a = run(&data, &da, &both_cmlms(), &train_config());
    let b = run(&data, &da, &both_cmlms(), &train_config());
    assert_eq!(a.to_records(), b.to_records());
    let c = run(&data, &da, &both_cmlms(), &TrainConfig { seed: 8, ..train_config() });
    assert_ne!(a.losses(), c.losses());
    assert!(a.metrics.windows(2).all(|w| w[0].step + 1 == w[1].step));
}

#[test]
fn metric_records_have_fixed_shape() {
    let data = corpus(12, 6);
    let cfg = TrainConfig {
        validate_every: 2,
        ..train_config()
    };
    let (_, r) = train_nmt(model(), &data, &data[..4], &DaConfig::none(), &Augmenters::none(), &cfg, [9; 32]).unwrap();
    let text = r.to_records();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), format!("# config_digest={} seed=7", "09".repeat(32)));
    for (i, l) in lines.enumerate() {
        let keys: Vec<&str> = l.split(' ').map(|kv| kv.split('=').next().unwrap()).collect();
        assert!(l.starts_with(&format!("step={} ", i + 1)), "{l}");
        if (i + 1) % 2 == 0 || i + 1 == r.metrics.len() {
            assert_eq!(keys, ["step", "loss", "lr", "val_bleu"]);
        } else {
            assert_eq!(keys, ["step", "loss", "lr"]);
        }
    }
}

fn trainer_with<'a>(
    cfg: &'a TrainConfig,
    da: &'a DaConfig,
    aug: &'a Augmenters<f64>,
    data: &'a [TokenizedPair],
) -> Trainer<'a, f64> {
    Trainer {
        config: cfg,
        da,
        augmenters: aug,
        train: data,
        valid: &[],
        digest: [5; 32],
    }
}

#[test]
fn pause_and_resume_reproduces_the_trace() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(24, 7);
    let aug = both_cmlms();
    let da = DaConfig::soft(0.3, true, true);
    let cfg = TrainConfig {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        ..train_config()
    };
    let t = trainer_with(&cfg, &da, &aug, &data);
    let mut full_state = TrainState::new(model(), cfg.adam);
    let full = t.run(&mut full_state, None, None).unwrap();
    let total = full.metrics.len() as u64;
    assert!(total > 6);

    for pause in [0, 3, total / 2 + 1, total - 1] {
        let mut state = TrainState::new(model(), cfg.adam);
        let path = dir.path().join(format!("pause{pause}.ckpt"));
        let first = t.run(&mut state, Some(pause), None).unwrap();
        assert_eq!(first.metrics.len() as u64, pause);
        state.save(&path, t.digest).unwrap();
        let (resumed_state, resumed) = t.resume(&first, &path, None, None).unwrap();
        assert_eq!(resumed.losses(), full.losses(), "pause at {pause}");
        assert_eq!(resumed_state.model.params.checksum(), full_state.model.params.checksum());
    }
}

#[test]
fn resume_from_periodic_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(24, 8);
    let da = DaConfig::none();
    let aug = Augmenters::none();
    let cfg = TrainConfig {
        checkpoint_every: 3,
        checkpoint_dir: Some(dir.path().to_path_buf()),
        ..train_config()
    };
    let t = trainer_with(&cfg, &da, &aug, &data);
    let full = t.run(&mut TrainState::new(model(), cfg.adam), None, None).unwrap();
    assert!(full.checkpoints.len() >= 2);
    let ck = &full.checkpoints[0];
    assert!(ck.ends_with("nmt.step3.ckpt"));
    let (_, resumed) = t.resume(&full, ck, None, None).unwrap();
    assert_eq!(resumed.metrics, full.metrics);
}

#[test]
fn corrupted_or_foreign_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(12, 9);
    let da = DaConfig::none();
    let aug = Augmenters::none();
    let cfg = train_config();
    let t = trainer_with(&cfg, &da, &aug, &data);
    let mut state = TrainState::new(model(), cfg.adam);
    let run = t.run(&mut state, Some(2), None).unwrap();
    let path = dir.path().join("a.ckpt");
    state.save(&path, t.digest).unwrap();

    let mut bytes = fs::read(&path).unwrap();
    let mid = bytes.len() / 3;
    bytes[mid] ^= 1;
    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, &bytes).unwrap();
    let snapshot = run.clone();
    assert!(t.resume(&run, &bad, None, None).is_err());
    assert_eq!(run, snapshot);

    let other = Trainer { digest: [6; 32], ..trainer_with(&cfg, &da, &aug, &data) };
    let foreign = TrainRun { digest: [6; 32], ..run.clone() };
    assert!(other.resume(&foreign, &path, None, None).is_err());
    assert!(t.resume(&foreign, &path, None, None).is_err());
}

#[test]
fn checkpoint_roundtrip_keeps_state() {
    let data = corpus(12, 10);
    let cfg = train_config();
    let (state, _) = train_nmt(model(), &data, &[], &DaConfig::none(), &Augmenters::none(), &cfg, [1; 32]).unwrap();
    let back = TrainState::from_checkpoint(state.to_checkpoint([1; 32]), cfg.adam).unwrap();
    assert_eq!(back.step, state.step);
    assert_eq!(back.adam, state.adam);
    assert_eq!(back.model.params.checksum(), state.model.params.checksum());
    assert_eq!(back.model.config, state.model.config);
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn soft_training_writes_no_data() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(16, 11);
    let (src, tgt) = (dir.path().join("train.src.ids"), dir.path().join("train.tgt.ids"));
    fs::write(&src, ids_to_text(data.iter().map(|p| &p.x))).unwrap();
    fs::write(&tgt, ids_to_text(data.iter().map(|p| &p.y))).unwrap();
    let before = snapshot(dir.path());
    let loaded = read_id_pairs(&src, &tgt, V).unwrap();
    assert_eq!(loaded, data);
    run(&loaded, &DaConfig::soft(0.5, true, true), &both_cmlms(), &train_config());
    assert_eq!(snapshot(dir.path()), before);
}

#[test]
fn memorizes_fifty_pairs() {
    let data = corpus(50, 12);
    let config = TransformerConfig {
        layers: 2,
        d_model: 32,
        d_ff: 64,
        heads: 4,
        dropout: 0.0,
        max_len: 16,
    };
    let inputs = NmtInputs::from_pairs(&data);
    assert!(inputs.batch == 50);
    let cfg = TrainConfig {
        epochs: 200,
        max_tokens: 60,
        warmup: 60,
        lr_scale: 0.3,
        label_smoothing: 0.0,
        seed: 1,
        validate_every: 0,
        ..Default::default()
    };
    let model = NmtModel::<f64>::new(config, V, 2).unwrap();
    let t = Trainer {
        config: &cfg,
        da: &DaConfig::none(),
        augmenters: &Augmenters::none(),
        train: &data,
        valid: &data,
        digest: [0; 32],
    };
    let mut state = TrainState::new(model, cfg.adam);
    let r = t.run(&mut state, Some(500), None).unwrap();
    assert_eq!(r.metrics.len(), 500);
    let bleu = t.validation_bleu(&state.model).unwrap().unwrap();
    assert!(bleu > 90.0, "training-subset BLEU {bleu}");
}
