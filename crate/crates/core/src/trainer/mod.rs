//! NMT training with optional data augmentation on the encoder and/or decoder input stream.

mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub use config::{DaConfig, DaMode, TrainConfig};

use crate::augment::{apply_plan, hard_substitute_batch, noise, plan_soft_substitution, HardStrategy, Unigram};
use crate::cmlm::{Cmlm, Side};
use crate::corpus::{make_batches, PaddedBatch, TokenizedPair};
use crate::error::{Error, Result};
use crate::eval::{bleu, greedy_batch};
use crate::model::{NmtInputs, NmtModel, TransformerConfig};
use crate::numcore::rng::{child, rng, substream};
use crate::numcore::{
    lr_inverse_sqrt, AdamConfig, AdamState, Checkpoint, CheckpointHeader, DropoutKey, Graph, ModelRole, Scalar,
    Tensor,
};

const VAL_CHUNK: usize = 64;

/// Frozen masked LMs supplying substitution distributions, one per side.
pub struct Augmenters<T: Scalar> {
    pub source: Option<Cmlm<T>>,
    pub target: Option<Cmlm<T>>,
}

impl<T: Scalar> Default for Augmenters<T> {
    fn default() -> Self {
        Augmenters {
            source: None,
            target: None,
        }
    }
}

impl<T: Scalar> Augmenters<T> {
    pub fn none() -> Self {
        Self::default()
    }

    fn get(&self, side: Side) -> Option<&Cmlm<T>> {
        match side {
            Side::Source => self.source.as_ref(),
            Side::Target => self.target.as_ref(),
        }
    }
}

/// Parameters, optimizer moments and the number of completed steps.
#[derive(Clone, Debug)]
pub struct TrainState<T: Scalar> {
    pub model: NmtModel<T>,
    pub adam: AdamState<T>,
    pub step: u64,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: NmtModel<T>, adam: AdamConfig) -> Self {
        let adam = AdamState::new(&model.params, adam);
        TrainState { model, adam, step: 0 }
    }

    pub fn to_checkpoint(&self, digest: [u8; 32]) -> Checkpoint<T> {
        let mut meta: std::collections::BTreeMap<String, u64> =
            self.model.config.to_meta("model.").into_iter().collect();
        meta.insert("step".into(), self.step);
        meta.insert("adam.t".into(), self.adam.t);
        let mut records = Vec::new();
        for (name, t) in self.model.params.iter() {
            records.push((format!("param.{name}"), t.clone()));
        }
        for (i, (name, _)) in self.model.params.iter().enumerate() {
            records.push((format!("adam.m.{name}"), self.adam.m[i].clone()));
            records.push((format!("adam.v.{name}"), self.adam.v[i].clone()));
        }
        Checkpoint {
            header: CheckpointHeader {
                vocab_size: self.model.vocab_size as u32,
                role: ModelRole::Nmt,
                digest,
            },
            meta,
            records,
        }
    }

    /// Rebuilds the state; optimizer moments are optional so that a bare model also loads.
    pub fn from_checkpoint(mut ck: Checkpoint<T>, adam: AdamConfig) -> Result<Self> {
        if ck.header.role != ModelRole::Nmt {
            return Err(Error::Checkpoint("checkpoint does not hold a translation model".into()));
        }
        let config = TransformerConfig::from_meta(&ck.meta, "model.")?;
        let mut model = NmtModel::new(config, ck.header.vocab_size as usize, 0)?;
        model.params.assign(ck.take_prefixed("param."))?;
        let mut state = TrainState::new(model, adam);
        let m = ck.take_prefixed("adam.m.");
        let v = ck.take_prefixed("adam.v.");
        if !m.is_empty() || !v.is_empty() {
            let fill = |dst: &mut Vec<Tensor<T>>, src: Vec<(String, Tensor<T>)>| -> Result<()> {
                let mut scratch = state.model.params.clone();
                scratch.assign(src)?;
                *dst = scratch.iter().map(|(_, t)| t.clone()).collect();
                Ok(())
            };
            let (mut mm, mut vv) = (vec![], vec![]);
            fill(&mut mm, m)?;
            fill(&mut vv, v)?;
            state.adam.m = mm;
            state.adam.v = vv;
        }
        state.adam.t = ck.meta.get("adam.t").copied().unwrap_or(0);
        state.step = ck.meta.get("step").copied().unwrap_or(0);
        Ok(state)
    }

    pub fn save(&self, path: &Path, digest: [u8; 32]) -> Result<()> {
        self.to_checkpoint(digest).save(path)
    }

    /// Loads a state whose checkpoint carries `digest`.
    pub fn load(path: &Path, digest: [u8; 32], adam: AdamConfig) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        if ck.header.digest != digest {
            return Err(Error::Checkpoint(format!(
                "{} was written under config {}, not {}",
                path.display(),
                crate::hex(&ck.header.digest),
                crate::hex(&digest)
            )));
        }
        Self::from_checkpoint(ck, adam)
    }
}

/// One line of the metrics stream.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetric {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub val_bleu: Option<f64>,
}

impl StepMetric {
    pub fn to_record(&self) -> String {
        let mut s = format!("step={} loss={:.6} lr={:.6e}", self.step, self.loss, self.lr);
        if let Some(b) = self.val_bleu {
            write!(s, " val_bleu={b:.2}").expect("write to string");
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRun {
    pub digest: [u8; 32],
    pub seed: u64,
    pub metrics: Vec<StepMetric>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainRun {
    pub fn digest_hex(&self) -> String {
        crate::hex(&self.digest)
    }

    pub fn losses(&self) -> Vec<f64> {
        self.metrics.iter().map(|m| m.loss).collect()
    }

    pub fn last_bleu(&self) -> Option<f64> {
        self.metrics.iter().rev().find_map(|m| m.val_bleu)
    }

    /// Header with digest and seed, then one record per step.
    pub fn to_records(&self) -> String {
        let mut s = format!("# config_digest={} seed={}\n", self.digest_hex(), self.seed);
        for m in &self.metrics {
            s.push_str(&m.to_record());
            s.push('\n');
        }
        s
    }
}

/// What one optimizer step saw, before the update.
pub struct StepInfo<'a, T: Scalar> {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub inputs: &'a NmtInputs,
    /// Embedding stream fed to the encoder, `[B, Ls, d]`.
    pub source_stream: &'a Tensor<T>,
    /// Embedding stream fed to the decoder, `[B, Lt, d]`.
    pub target_stream: &'a Tensor<T>,
    /// Shared embedding matrix the streams were built from.
    pub embedding: &'a Tensor<T>,
}

pub type Observer<'o, T> = &'o mut dyn FnMut(&StepInfo<'_, T>);

/// Everything a training run depends on apart from the model state.
pub struct Trainer<'a, T: Scalar> {
    pub config: &'a TrainConfig,
    pub da: &'a DaConfig,
    pub augmenters: &'a Augmenters<T>,
    pub train: &'a [TokenizedPair],
    pub valid: &'a [TokenizedPair],
    pub digest: [u8; 32],
}

impl<'a, T: Scalar> Trainer<'a, T> {
    /// Checks configuration and resources against the model; runs before any step.
    pub fn check(&self, model: &NmtModel<T>) -> Result<()> {
        self.config.validate()?;
        self.da.validate()?;
        if self.train.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let v = model.vocab_size;
        if let Some((i, _)) = self.train.iter().chain(self.valid).enumerate().find(|(_, p)| {
            p.x.iter().chain(&p.y).any(|&t| t >= v)
        }) {
            return Err(Error::Data(format!("pair {} has ids outside the vocabulary of {v}", i + 1)));
        }
        if self.da.mode.needs_cmlm() {
            for (enabled, side) in [(self.da.augment_encoder, Side::Source), (self.da.augment_decoder, Side::Target)] {
                if !enabled {
                    continue;
                }
                let cmlm = self.augmenters.get(side).ok_or_else(|| {
                    Error::Config(format!("{} augmentation needs a {} masked LM", self.da.mode, side.name()))
                })?;
                if cmlm.side() != side {
                    return Err(Error::Config(format!(
                        "{} masked LM supplied for the {} side",
                        cmlm.side().name(),
                        side.name()
                    )));
                }
                if cmlm.model.vocab_size != v {
                    return Err(Error::Config(format!(
                        "{} masked LM has vocabulary {}, translation model {v}",
                        side.name(),
                        cmlm.model.vocab_size
                    )));
                }
            }
        }
        Ok(())
    }

    /// Total number of steps over all epochs.
    pub fn total_steps(&self) -> Result<u64> {
        let mut n = 0;
        for e in 0..self.config.epochs {
            n += self.epoch_batches(e)?.len() as u64;
        }
        Ok(n)
    }

    fn epoch_batches(&self, epoch: usize) -> Result<Vec<PaddedBatch>> {
        make_batches(self.train, self.config.max_tokens, child(substream(self.config.seed, "data-order"), epoch as u64))
    }

    /// Greedy-decoding BLEU over the validation pairs, on id sequences.
    pub fn validation_bleu(&self, model: &NmtModel<T>) -> Result<Option<f64>> {
        if self.valid.is_empty() {
            return Ok(None);
        }
        let mut hyps = Vec::with_capacity(self.valid.len());
        for chunk in self.valid.chunks(VAL_CHUNK) {
            let xs: Vec<&[usize]> = chunk.iter().map(|p| p.x.as_slice()).collect();
            hyps.extend(greedy_batch(model, &xs, self.config.val_max_len)?);
        }
        let refs: Vec<Vec<usize>> = self.valid.iter().map(|p| p.y.clone()).collect();
        Ok(Some(bleu(&hyps, &refs)?.bleu))
    }

    /// Continues `state` up to the end of the last epoch, or until `stop_at` steps are done.
    pub fn run(&self, state: &mut TrainState<T>, stop_at: Option<u64>, mut observer: Option<Observer<'_, T>>) -> Result<TrainRun> {
        self.check(&state.model)?;
        let total = self.total_steps()?;
        let end = stop_at.map_or(total, |s| s.min(total));
        let mut run = TrainRun {
            digest: self.digest,
            seed: self.config.seed,
            metrics: vec![],
            checkpoints: vec![],
        };
        let unigram = match self.da.mode {
            DaMode::Swap | DaMode::Drop | DaMode::Blank | DaMode::Smooth => {
                Some(Unigram::from_corpus(self.train, state.model.vocab_size)?)
            }
            _ => None,
        };
        let mut done = 0u64;
        'epochs: for e in 0..self.config.epochs {
            for batch in self.epoch_batches(e)? {
                if done >= end {
                    break 'epochs;
                }
                done += 1;
                if done <= state.step {
                    continue;
                }
                let mut metric = self.step(state, &batch, unigram.as_ref(), observer.as_mut().map(|o| &mut **o as &mut dyn FnMut(&StepInfo<'_, T>)))?;
                let last = state.step == end;
                let every = |k: u64| k > 0 && state.step.is_multiple_of(k);
                if every(self.config.validate_every) || (last && end == total) {
                    metric.val_bleu = self.validation_bleu(&state.model)?;
                }
                run.metrics.push(metric);
                if let Some(dir) = &self.config.checkpoint_dir {
                    if every(self.config.checkpoint_every) || last {
                        let path = dir.join(format!("nmt.step{}.ckpt", state.step));
                        state.save(&path, self.digest)?;
                        run.checkpoints.push(path);
                    }
                }
            }
        }
        Ok(run)
    }

    /// Loads the checkpoint written under `run`'s digest and trains on from there, returning the
    /// new state and `run`'s metrics up to the checkpoint followed by the new ones.
    pub fn resume(
        &self,
        run: &TrainRun,
        checkpoint: &Path,
        stop_at: Option<u64>,
        observer: Option<Observer<'_, T>>,
    ) -> Result<(TrainState<T>, TrainRun)> {
        if run.digest != self.digest {
            return Err(Error::Checkpoint("run and trainer configurations differ".into()));
        }
        let mut state = TrainState::load(checkpoint, self.digest, self.config.adam)?;
        let mut merged = TrainRun {
            metrics: run.metrics.iter().filter(|m| m.step <= state.step).copied().collect(),
            checkpoints: run.checkpoints.clone(),
            ..run.clone()
        };
        let more = self.run(&mut state, stop_at, observer)?;
        merged.metrics.extend(more.metrics);
        merged.checkpoints.extend(more.checkpoints);
        Ok((state, merged))
    }

    fn step(
        &self,
        state: &mut TrainState<T>,
        batch: &PaddedBatch,
        unigram: Option<&Unigram>,
        observer: Option<&mut dyn FnMut(&StepInfo<'_, T>)>,
    ) -> Result<StepMetric> {
        let step = state.step + 1;
        let seed = self.config.seed;
        let mut r = rng(child(substream(seed, "augment"), step));
        let pairs: Vec<TokenizedPair> = (0..batch.size()).map(|i| batch.pair(i)).collect();
        let refs: Vec<&TokenizedPair> = pairs.iter().collect();
        let da = self.da;
        let sides = [(da.augment_encoder, Side::Source), (da.augment_decoder, Side::Target)];

        let mut rows: Vec<(Vec<usize>, Vec<usize>)> = pairs.iter().map(|p| (p.x.clone(), p.y.clone())).collect();
        let mut plans = [None, None];
        match da.mode {
            DaMode::None => {}
            DaMode::Soft => {
                for (k, (enabled, side)) in sides.into_iter().enumerate() {
                    if enabled {
                        let cmlm = self.augmenters.get(side).expect("checked");
                        plans[k] = Some(plan_soft_substitution(&refs, side, cmlm, da.gamma, &mut r)?);
                    }
                }
            }
            DaMode::Hard => {
                for (enabled, side) in sides {
                    if enabled {
                        let cmlm = self.augmenters.get(side).expect("checked");
                        let subs = hard_substitute_batch(&refs, side, cmlm, da.gamma, &mut r, HardStrategy::Sample)?;
                        for (row, s) in rows.iter_mut().zip(subs) {
                            match side {
                                Side::Source => row.0 = s.pair.x,
                                Side::Target => row.1 = s.pair.y,
                            }
                        }
                    }
                }
            }
            _ => {
                let spec = da.noise().expect("noise mode");
                let uni = unigram.expect("unigram for noise modes");
                for row in rows.iter_mut() {
                    if da.augment_encoder {
                        row.0 = noise(&row.0, spec, uni, &mut r)?;
                    }
                    if da.augment_decoder {
                        row.1 = noise(&row.1, spec, uni, &mut r)?;
                    }
                }
            }
        }
        let inputs = NmtInputs::from_rows(rows.iter().map(|(x, y)| (x.as_slice(), y.as_slice())));

        let model = &state.model;
        let mut g = Graph::training(DropoutKey {
            seed: substream(seed, "dropout"),
            step,
        });
        let pv = model.params.load(&mut g, true);
        let (b, ls, lt) = (inputs.batch, inputs.src_width, inputs.tgt_width);
        let embedding = pv[model.embedding_slot()];
        let mut src = model.embed_tokens(&mut g, &pv, &inputs.src_ids, b, ls)?;
        if let Some(p) = &plans[0] {
            src = apply_plan(&mut g, src, p, embedding, 0)?;
        }
        let mut tgt = model.embed_tokens(&mut g, &pv, &inputs.tgt_in, b, lt)?;
        if let Some(p) = &plans[1] {
            tgt = apply_plan(&mut g, tgt, p, embedding, 1)?;
        }
        let out = model.forward(&mut g, &pv, &inputs, Some(src), Some(tgt), self.config.label_smoothing)?;
        let loss = g.value(out.loss).item().as_f64();
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("translation loss diverged at step {step}")));
        }
        let lr = self.config.lr_scale * lr_inverse_sqrt(step, self.config.warmup, model.config.d_model);
        if let Some(obs) = observer {
            obs(&StepInfo {
                step,
                loss,
                lr,
                inputs: &inputs,
                source_stream: g.value(src),
                target_stream: g.value(tgt),
                embedding: model.embedding(),
            });
        }
        g.backward(out.loss)?;
        let grads = model.params.collect_grads(&g, &pv);
        state
            .adam
            .step(&mut state.model.params, &grads, lr)
            .map_err(|e| Error::Numerical(format!("step {step}: {e}")))?;
        state.step = step;
        Ok(StepMetric {
            step,
            loss,
            lr,
            val_bleu: None,
        })
    }
}

/// Trains a fresh optimizer state on `model` for the configured epochs.
#[allow(clippy::too_many_arguments)]
pub fn train_nmt<T: Scalar>(
    model: NmtModel<T>,
    train: &[TokenizedPair],
    valid: &[TokenizedPair],
    da: &DaConfig,
    augmenters: &Augmenters<T>,
    config: &TrainConfig,
    digest: [u8; 32],
) -> Result<(TrainState<T>, TrainRun)> {
    let trainer = Trainer {
        config,
        da,
        augmenters,
        train,
        valid,
        digest,
    };
    let mut state = TrainState::new(model, config.adam);
    let run = trainer.run(&mut state, None, None)?;
    Ok((state, run))
}
