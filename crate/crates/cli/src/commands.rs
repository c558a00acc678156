use std::fs;
use std::path::{Path, PathBuf};

use cmlm_da::cmlm::{Cmlm, ConditioningMode, FinetuneConfig, Side};
use cmlm_da::corpus::synthetic::SynonymLanguage;
use cmlm_da::corpus::{
    build_vocab, ids_to_text, learn_bpe, read_id_pairs, read_parallel, tokenize_pairs, TokenizedPair, Vocab,
    END_OF_WORD, NUM_SPECIALS,
};
use cmlm_da::eval::{bleu, consistency_accuracy, decode, paired_bootstrap, words, BleuReport};
use cmlm_da::model::NmtModel;
use cmlm_da::numcore::rng::{child, substream};
use cmlm_da::numcore::{Checkpoint, Scalar};
use cmlm_da::trainer::{Augmenters, DaConfig, TrainConfig, TrainState, Trainer};
use cmlm_da::{Error, Result};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn sha_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn load_vocab(dir: &Path) -> Result<Vocab> {
    let p = dir.join("vocab.txt");
    let text = fs::read_to_string(&p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
    Vocab::from_text(&text)
}

pub fn split_paths(dir: &Path, split: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{split}.src.ids")), dir.join(format!("{split}.tgt.ids")))
}

pub fn load_split(dir: &Path, split: &str, vocab_size: usize) -> Result<Vec<TokenizedPair>> {
    let (s, t) = split_paths(dir, split);
    if !s.exists() || !t.exists() {
        return Err(Error::Data(format!("missing {} or {}", s.display(), t.display())));
    }
    read_id_pairs(&s, &t, vocab_size)
}

fn optional_split(dir: &Path, split: &str, vocab_size: usize) -> Result<Vec<TokenizedPair>> {
    let (s, t) = split_paths(dir, split);
    if s.exists() && t.exists() {
        read_id_pairs(&s, &t, vocab_size)
    } else {
        Ok(vec![])
    }
}

/// Tokenized corpus files plus a manifest holding the digest, seed and file checksums.
pub fn prepare_data(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut files: Vec<(String, String)> = Vec::new();
    match cfg.get("synthetic.language") {
        "none" => {
            let (Some(ts), Some(tt)) = (cfg.path("data.train_src"), cfg.path("data.train_tgt")) else {
                return Err(Error::Config("data.train_src and data.train_tgt are required".into()));
            };
            let train = read_parallel(&ts, &tt)?;
            let lines: Vec<&str> = train.iter().flat_map(|p| [p.source.as_str(), p.target.as_str()]).collect();
            let merges = learn_bpe(&lines, cfg.usize("bpe.merges"))?;
            let vocab = build_vocab(&lines, &merges, cfg.usize("bpe.min_freq"))?;
            files.push(("merges.txt".into(), merges.to_text()));
            files.push(("vocab.txt".into(), vocab.to_text()));
            for split in SPLITS {
                let (s, t) = (cfg.path(&format!("data.{split}_src")), cfg.path(&format!("data.{split}_tgt")));
                let (Some(s), Some(t)) = (s, t) else { continue };
                let pairs = tokenize_pairs(&read_parallel(&s, &t)?, &merges, &vocab)?;
                files.push((format!("{split}.src.ids"), ids_to_text(pairs.iter().map(|p| &p.x))));
                files.push((format!("{split}.tgt.ids"), ids_to_text(pairs.iter().map(|p| &p.y))));
            }
        }
        name => {
            let lang = match name {
                "aligned" => SynonymLanguage::aligned_pairs(cfg.seed()),
                _ => SynonymLanguage::synonym_rich(cfg.seed()),
            };
            let tokens = (NUM_SPECIALS..lang.vocab_size())
                .map(|id| format!("{}{END_OF_WORD}", lang.word_name(id).expect("in range")));
            let vocab = Vocab::from_tokens(tokens)?;
            files.push(("vocab.txt".into(), vocab.to_text()));
            let root = substream(cfg.seed(), "synthetic");
            for (i, split) in SPLITS.iter().enumerate() {
                let pairs = lang.sample(cfg.usize(&format!("synthetic.{split}")), child(root, i as u64))?;
                files.push((format!("{split}.src.ids"), ids_to_text(pairs.iter().map(|p| &p.x))));
                files.push((format!("{split}.tgt.ids"), ids_to_text(pairs.iter().map(|p| &p.y))));
                let text = |f: fn(&TokenizedPair) -> &Vec<usize>| -> String {
                    pairs.iter().map(|p| vocab.detokenize(f(p)) + "\n").collect()
                };
                files.push((format!("{split}.src.txt"), text(|p| &p.x)));
                files.push((format!("{split}.tgt.txt"), text(|p| &p.y)));
            }
        }
    }
    let mut manifest = cfg.header();
    for (name, body) in &files {
        write(&out.join(name), body)?;
        manifest.push_str(&format!("file={name} sha256={}\n", sha_hex(body.as_bytes())));
    }
    write(&out.join("manifest.txt"), &manifest)
}

pub fn cmlm_file(side: Side, mode: ConditioningMode) -> String {
    format!("cmlm.{}.{}.ckpt", side.name(), mode.name())
}

pub fn train_cmlm<T: Scalar>(cfg: &ExperimentConfig, side: Side, mode: ConditioningMode, out: &Path) -> Result<PathBuf> {
    let dir = PathBuf::from(cfg.get("data.dir"));
    let vocab = load_vocab(&dir)?;
    let train = load_split(&dir, "train", vocab.len())?;
    let seed = cfg.seed();
    let init = substream(seed, &format!("cmlm-init-{}", side.name()));
    let mut model = Cmlm::<T>::init(cfg.cmlm()?, vocab.len(), init, side, mode)?;
    let ft = FinetuneConfig {
        steps: cfg.usize("cmlm.steps"),
        batch_size: cfg.usize("cmlm.batch_size"),
        peak_lr: cfg.float("cmlm.lr"),
        mask_rate: cfg.float("cmlm.mask_rate"),
        seed: substream(seed, &format!("cmlm-{}", side.name())),
    };
    let curve = model.finetune(&train, &ft)?;
    fs::create_dir_all(out)?;
    let path = out.join(cmlm_file(side, mode));
    model.save(&path, cfg.digest())?;
    let mut log = cfg.header();
    for (i, l) in curve.iter().enumerate() {
        log.push_str(&format!("step={} loss={l:.6}\n", i + 1));
    }
    write(&out.join(format!("cmlm.{}.{}.loss.txt", side.name(), mode.name())), &log)?;
    Ok(path)
}

/// Loads the masked LMs the augmentation mode needs for its enabled sides.
pub fn load_augmenters<T: Scalar>(da: &DaConfig) -> Result<Augmenters<T>> {
    let mut aug = Augmenters::none();
    if !da.mode.needs_cmlm() {
        return Ok(aug);
    }
    for (enabled, side, path, key) in [
        (da.augment_encoder, Side::Source, &da.cmlm_src, "cmlm.source_checkpoint"),
        (da.augment_decoder, Side::Target, &da.cmlm_tgt, "cmlm.target_checkpoint"),
    ] {
        if !enabled {
            continue;
        }
        let p = path
            .as_ref()
            .ok_or_else(|| Error::Config(format!("da.mode = {} needs {key}", da.mode)))?;
        let (s, mode) = Cmlm::<T>::peek_role(p)?;
        if s != side {
            return Err(Error::Config(format!("{key} holds a {} model", s.name())));
        }
        let m = Cmlm::<T>::load(p, side, mode)?;
        match side {
            Side::Source => aug.source = Some(m),
            Side::Target => aug.target = Some(m),
        }
    }
    Ok(aug)
}

/// Trains (or resumes) a translation model and writes its metrics to `out/metrics.txt`.
pub fn train_nmt<T: Scalar>(
    cfg: &ExperimentConfig,
    out: &Path,
    resume: Option<&Path>,
    stop_after: Option<u64>,
    checkpoints: bool,
) -> Result<TrainState<T>> {
    let dir = PathBuf::from(cfg.get("data.dir"));
    let vocab = load_vocab(&dir)?;
    let train = load_split(&dir, "train", vocab.len())?;
    let valid = optional_split(&dir, "valid", vocab.len())?;
    let da = cfg.da()?;
    let tc: TrainConfig = cfg.train(checkpoints.then(|| out.to_path_buf()))?;
    let augmenters = load_augmenters::<T>(&da)?;
    fs::create_dir_all(out)?;
    write(&out.join("config.txt"), &cfg.to_text())?;
    let trainer = Trainer {
        config: &tc,
        da: &da,
        augmenters: &augmenters,
        train: &train,
        valid: &valid,
        digest: cfg.digest(),
    };
    let (mut state, mut lines) = match resume {
        Some(p) => {
            let state = TrainState::<T>::load(p, cfg.digest(), tc.adam)?;
            let old = fs::read_to_string(out.join("metrics.txt")).unwrap_or_default();
            let kept: Vec<String> = old
                .lines()
                .filter(|l| {
                    l.strip_prefix("step=")
                        .and_then(|r| r.split(' ').next())
                        .and_then(|n| n.parse::<u64>().ok())
                        .is_some_and(|n| n <= state.step)
                })
                .map(str::to_string)
                .collect();
            (state, kept)
        }
        None => {
            let model = NmtModel::<T>::new(cfg.nmt()?, vocab.len(), substream(cfg.seed(), "nmt-init"))?;
            (TrainState::new(model, tc.adam), vec![])
        }
    };
    let run = trainer.run(&mut state, stop_after, None)?;
    lines.extend(run.metrics.iter().map(|m| m.to_record()));
    let mut records = cfg.header();
    for l in &lines {
        records.push_str(l);
        records.push('\n');
    }
    write(&out.join("metrics.txt"), &records)?;
    if checkpoints {
        state.save(&out.join("nmt.ckpt"), cfg.digest())?;
    }
    Ok(state)
}

pub fn load_nmt<T: Scalar>(path: &Path) -> Result<NmtModel<T>> {
    let ck = Checkpoint::<T>::load(path)?;
    Ok(TrainState::from_checkpoint(ck, Default::default())?.model)
}

/// Beam-search hypotheses and word-level BLEU against the references of `pairs`.
pub fn translate<T: Scalar>(
    model: &NmtModel<T>,
    vocab: &Vocab,
    pairs: &[TokenizedPair],
    beam: usize,
    max_len: usize,
) -> Result<(Vec<String>, BleuReport)> {
    let mut hyps = Vec::with_capacity(pairs.len());
    for p in pairs {
        hyps.push(vocab.detokenize(&decode(model, &p.x, beam, max_len)?));
    }
    let refs: Vec<String> = pairs.iter().map(|p| vocab.detokenize(&p.y)).collect();
    let report = bleu(&words(&hyps), &words(&refs))?;
    Ok((hyps, report))
}

pub fn evaluate<T: Scalar>(cfg: &ExperimentConfig, checkpoint: &Path, split: &str, out: &Path) -> Result<BleuReport> {
    let dir = PathBuf::from(cfg.get("data.dir"));
    let vocab = load_vocab(&dir)?;
    let pairs = load_split(&dir, split, vocab.len())?;
    let model = load_nmt::<T>(checkpoint)?;
    if model.vocab_size != vocab.len() {
        return Err(Error::Data(format!("model vocabulary {} vs {}", model.vocab_size, vocab.len())));
    }
    let (hyps, report) = translate(&model, &vocab, &pairs, cfg.usize("eval.beam"), cfg.usize("eval.max_len"))?;
    let mut h = cfg.header();
    for l in &hyps {
        h.push_str(l);
        h.push('\n');
    }
    write(&out.join(format!("hyp.{split}.txt")), &h)?;
    let ck_digest = Checkpoint::<T>::load(checkpoint)?.header.digest;
    let body = format!(
        "{}checkpoint_digest={}\nsplit={split} beam={}\n{}\n# {report}\n",
        cfg.header(),
        ck_digest.iter().map(|b| format!("{b:02x}")).collect::<String>(),
        cfg.usize("eval.beam"),
        report.to_records()
    );
    write(&out.join(format!("bleu.{split}.txt")), &body)?;
    Ok(report)
}

pub fn consistency_check<T: Scalar>(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    split: &str,
    out: &Path,
) -> Result<f64> {
    let dir = PathBuf::from(cfg.get("data.dir"));
    let vocab = load_vocab(&dir)?;
    let pairs = load_split(&dir, split, vocab.len())?;
    let (side, mode) = Cmlm::<T>::peek_role(checkpoint)?;
    let model = Cmlm::<T>::load(checkpoint, side, mode)?;
    let rate = cfg.float("consistency.mask_rate");
    let rep = consistency_accuracy(&model, &pairs, rate, cfg.seed(), cfg.flag("consistency.sample"))?;
    let body = format!(
        "{}side={} mode={} split={split} mask_rate={rate} correct={} evaluated={} accuracy={:.6}\n# {} accuracy {:.2}% over {} masked tokens\n",
        cfg.header(),
        side.name(),
        mode.name(),
        rep.correct,
        rep.evaluated,
        rep.accuracy,
        side.name(),
        100.0 * rep.accuracy,
        rep.evaluated
    );
    write(&out.join(format!("consistency.{}.txt", side.name())), &body)?;
    write(&out.join(format!("consistency.{}.tsv", side.name())), &(cfg.header() + &rep.dump()))?;
    Ok(rep.accuracy)
}

/// Lines of a text file, skipping a leading digest header.
fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(i, l)| !(*i == 0 && l.starts_with("# config_digest=")))
        .map(|(_, l)| l.to_string())
        .collect())
}

pub fn significance(cfg: &ExperimentConfig, hyp_a: &Path, hyp_b: &Path, refs: &Path, out: &Path) -> Result<f64> {
    let (a, b, r) = (words(&read_lines(hyp_a)?), words(&read_lines(hyp_b)?), words(&read_lines(refs)?));
    if a.len() != r.len() || b.len() != r.len() {
        return Err(Error::Data(format!("line counts differ: {} / {} / {}", a.len(), b.len(), r.len())));
    }
    let rep = paired_bootstrap(&a, &b, &r, cfg.usize("significance.samples"), substream(cfg.seed(), "bootstrap"))
        .map_err(|e| Error::Config(e.to_string()))?;
    write(&out.join("significance.txt"), &format!("{}{}\n", cfg.header(), rep.to_records()))?;
    Ok(rep.p_value)
}

/// Trains one soft-augmented model per γ and tabulates evaluation BLEU.
pub fn sweep_gamma<T: Scalar>(cfg: &ExperimentConfig, gammas: &[f64], out: &Path) -> Result<Vec<(f64, f64)>> {
    let dir = PathBuf::from(cfg.get("data.dir"));
    let vocab = load_vocab(&dir)?;
    let split = cfg.get("eval.split").to_string();
    let pairs = load_split(&dir, &split, vocab.len())?;
    let mut table = cfg.header();
    table.push_str(&format!("# split={split} beam={}\ngamma\tbleu\tconfig_digest\n", cfg.usize("eval.beam")));
    let mut rows = Vec::new();
    for &g in gammas {
        let mut c = cfg.clone();
        if !matches!(c.get("da.mode"), "soft" | "hard") {
            c.set("da.mode", "soft")?;
        }
        c.set("da.gamma", g.to_string())?;
        let run = train_nmt::<T>(&c, &out.join(format!("gamma_{g}")), None, None, false)?;
        let (_, rep) = translate(&run.model, &vocab, &pairs, c.usize("eval.beam"), c.usize("eval.max_len"))?;
        table.push_str(&format!("{g}\t{:.4}\t{}\n", rep.bleu, c.digest_hex()));
        rows.push((g, rep.bleu));
    }
    write(&out.join("sweep.txt"), &table)?;
    Ok(rows)
}
