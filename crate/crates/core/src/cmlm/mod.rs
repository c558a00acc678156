//! Conditional masked language models that see both halves of a pair and predict one.

pub mod example;

use std::path::Path;

use rand::Rng as _;

pub use example::{
    example_with_positions, layout, make_masked_example, maskable_positions, ConditioningMode, ExampleBatch,
    MaskedExample, Side,
};

use crate::corpus::TokenizedPair;
use crate::error::{Error, Result};
use crate::model::{CmlmModel, TransformerConfig};
use crate::numcore::rng::{child, rng, substream};
use crate::numcore::{
    lr_triangular, AdamConfig, AdamState, Checkpoint, CheckpointHeader, DropoutKey, Graph, ModelRole, Scalar, Var,
};

/// Probability vector over the vocabulary for one position of a sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftDistribution<T> {
    /// Index into the side's own token sequence.
    pub position: usize,
    pub probs: Vec<T>,
}

/// A masked language model permanently bound to one side and one conditioning mode.
#[derive(Clone, Debug)]
pub struct Cmlm<T: Scalar> {
    pub model: CmlmModel<T>,
    side: Side,
    mode: ConditioningMode,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Peak learning rate of the triangular schedule.
    pub peak_lr: f64,
    pub mask_rate: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            steps: 1000,
            batch_size: 32,
            peak_lr: 1e-3,
            mask_rate: 0.15,
            seed: 0,
        }
    }
}

/// Cross-entropy of vocabulary logits `[B, L, V]` at the masked slots of `batch` only.
pub fn masked_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, batch: &ExampleBatch) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 3 || s[0] != batch.batch || s[1] != batch.width {
        return Err(Error::shape("masked_loss", format!("logits {s:?} for batch [{}, {}]", batch.batch, batch.width)));
    }
    let flat = g.reshape(logits, &[s[0] * s[1], s[2]])?;
    let picked = g.gather(flat, &batch.rows, &[batch.rows.len()])?;
    g.cross_entropy(picked, &batch.labels, 0.0, usize::MAX)
}

impl<T: Scalar> Cmlm<T> {
    pub fn new(model: CmlmModel<T>, side: Side, mode: ConditioningMode) -> Self {
        Cmlm { model, side, mode }
    }

    pub fn init(config: TransformerConfig, vocab_size: usize, init_seed: u64, side: Side, mode: ConditioningMode) -> Result<Self> {
        Ok(Self::new(CmlmModel::new(config, vocab_size, init_seed)?, side, mode))
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn mode(&self) -> ConditioningMode {
        self.mode
    }

    pub fn max_len(&self) -> usize {
        self.model.config.max_len
    }

    /// Logits `[n, V]` at every masked slot of `batch`, in example order.
    fn masked_logits(&self, g: &mut Graph<T>, pv: &[Var], batch: &ExampleBatch) -> Result<Var> {
        self.model.forward_at(
            g,
            pv,
            &batch.ids,
            &batch.segments,
            &batch.visible,
            batch.batch,
            batch.width,
            &batch.rows,
        )
    }

    fn check_examples(&self, examples: &[MaskedExample]) -> Result<()> {
        for ex in examples {
            if ex.side != self.side || ex.mode != self.mode {
                return Err(Error::InvalidArgument(format!(
                    "example for {}/{} given to a {}/{} model",
                    ex.side.name(),
                    ex.mode.name(),
                    self.side.name(),
                    self.mode.name()
                )));
            }
        }
        Ok(())
    }

    /// One distribution per masked position, all positions predicted in a single pass.
    pub fn predict_masked(&self, example: &MaskedExample) -> Result<Vec<SoftDistribution<T>>> {
        Ok(self.predict_masked_batch(std::slice::from_ref(example))?.pop().unwrap_or_default())
    }

    /// [`Self::predict_masked`] for several independent examples stacked into one forward pass.
    pub fn predict_masked_batch(&self, examples: &[MaskedExample]) -> Result<Vec<Vec<SoftDistribution<T>>>> {
        self.check_examples(examples)?;
        if examples.is_empty() {
            return Ok(vec![]);
        }
        let batch = ExampleBatch::new(examples);
        let mut g = Graph::new();
        let pv = self.model.params.load(&mut g, false);
        let logits = self.masked_logits(&mut g, &pv, &batch)?;
        let probs = g.value(logits).softmax(1)?;
        let v = self.model.vocab_size;
        let mut out = Vec::with_capacity(examples.len());
        for (i, ex) in examples.iter().enumerate() {
            let dists = ex
                .local_positions()
                .into_iter()
                .enumerate()
                .map(|(k, position)| {
                    let r = batch.offsets[i] + k;
                    SoftDistribution {
                        position,
                        probs: probs.data()[r * v..(r + 1) * v].to_vec(),
                    }
                })
                .collect();
            out.push(dists);
        }
        Ok(out)
    }

    /// Trains on masked examples drawn from `corpus`, returning the loss at every step.
    ///
    /// Each step samples `batch_size` pairs with replacement and masks them afresh; the
    /// learning rate follows the triangular schedule peaking at `peak_lr`.
    pub fn finetune(&mut self, corpus: &[TokenizedPair], cfg: &FinetuneConfig) -> Result<Vec<f64>> {
        if cfg.steps == 0 {
            return Ok(vec![]);
        }
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if cfg.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        let data_seed = substream(cfg.seed, "masking");
        let dropout_seed = substream(cfg.seed, "dropout");
        let mut adam = AdamState::new(&self.model.params, AdamConfig::default());
        let mut curve = Vec::with_capacity(cfg.steps);
        for step in 0..cfg.steps {
            let mut r = rng(child(data_seed, step as u64));
            let mut examples = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                let i = r.random_range(0..corpus.len());
                let ex = make_masked_example(&corpus[i], self.side, cfg.mask_rate, self.mode, self.max_len(), &mut r)
                    .map_err(|e| Error::Data(format!("pair {}: {e}", i + 1)))?;
                examples.push(ex);
            }
            let batch = ExampleBatch::new(&examples);
            let mut g = Graph::training(DropoutKey {
                seed: dropout_seed,
                step: step as u64,
            });
            let pv = self.model.params.load(&mut g, true);
            let logits = self.masked_logits(&mut g, &pv, &batch)?;
            let loss = g.cross_entropy(logits, &batch.labels, 0.0, usize::MAX)?;
            let value = g.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(Error::Numerical(format!("masked-LM loss diverged at step {}", step + 1)));
            }
            g.backward(loss)?;
            let grads = self.model.params.collect_grads(&g, &pv);
            let lr = lr_triangular(step as u64 + 1, cfg.steps as u64, cfg.peak_lr);
            adam.step(&mut self.model.params, &grads, lr)
                .map_err(|e| Error::Numerical(format!("step {}: {e}", step + 1)))?;
            curve.push(value);
        }
        Ok(curve)
    }

    pub fn to_checkpoint(&self, digest: [u8; 32]) -> Checkpoint<T> {
        Checkpoint {
            header: CheckpointHeader {
                vocab_size: self.model.vocab_size as u32,
                role: ModelRole::Cmlm {
                    side: self.side.code(),
                    mode: self.mode.code(),
                },
                digest,
            },
            meta: self.model.config.to_meta("model.").into_iter().collect(),
            records: self.model.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    /// Rebuilds a model from a checkpoint, which must hold a masked LM bound to `side`/`mode`.
    pub fn from_checkpoint(ck: Checkpoint<T>, side: Side, mode: ConditioningMode) -> Result<Self> {
        let (s, m) = match ck.header.role {
            ModelRole::Cmlm { side, mode } => (
                Side::from_code(side).ok_or_else(|| Error::Checkpoint(format!("bad side code {side}")))?,
                ConditioningMode::from_code(mode).ok_or_else(|| Error::Checkpoint(format!("bad mode code {mode}")))?,
            ),
            ModelRole::Nmt => return Err(Error::Checkpoint("checkpoint holds a translation model".into())),
        };
        if s != side || m != mode {
            return Err(Error::Checkpoint(format!(
                "checkpoint is a {}/{} model, expected {}/{}",
                s.name(),
                m.name(),
                side.name(),
                mode.name()
            )));
        }
        let config = TransformerConfig::from_meta(&ck.meta, "model.")?;
        let mut model = CmlmModel::new(config, ck.header.vocab_size as usize, 0)?;
        model.params.assign(ck.records)?;
        Ok(Cmlm { model, side, mode })
    }

    pub fn save(&self, path: &Path, digest: [u8; 32]) -> Result<()> {
        self.to_checkpoint(digest).save(path)
    }

    pub fn load(path: &Path, side: Side, mode: ConditioningMode) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?, side, mode)
    }

    /// Role flags stored in a checkpoint file, without building the model.
    pub fn peek_role(path: &Path) -> Result<(Side, ConditioningMode)> {
        let ck = Checkpoint::<T>::load(path)?;
        match ck.header.role {
            ModelRole::Cmlm { side, mode } => Ok((
                Side::from_code(side).ok_or_else(|| Error::Checkpoint("bad side code".into()))?,
                ConditioningMode::from_code(mode).ok_or_else(|| Error::Checkpoint("bad mode code".into()))?,
            )),
            ModelRole::Nmt => Err(Error::Checkpoint("checkpoint holds a translation model".into())),
        }
    }
}

/// Index of the largest probability (first one on ties).
pub fn argmax<T: Scalar>(probs: &[T]) -> usize {
    let mut best = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > probs[best] {
            best = i;
        }
    }
    best
}
