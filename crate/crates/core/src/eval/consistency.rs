use std::fmt::Write as _;

use crate::augment::sample_index;
use crate::cmlm::{argmax, make_masked_example, Cmlm, ConditioningMode, Side};
use crate::corpus::TokenizedPair;
use crate::error::{Error, Result};
use crate::numcore::rng::{child, rng, substream};
use crate::numcore::Scalar;

const CHUNK: usize = 64;

/// One masked slot: which pair, where, the original token, the prediction and its probability.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRecord {
    pub pair: usize,
    pub position: usize,
    pub gold: usize,
    pub predicted: usize,
    pub probability: f64,
}

/// Token-level recovery rate of one masked language model.
#[derive(Clone, Debug, PartialEq)]
pub struct SideConsistency {
    pub side: Side,
    pub mode: ConditioningMode,
    pub mask_rate: f64,
    pub correct: usize,
    pub evaluated: usize,
    pub accuracy: f64,
    pub predictions: Vec<PredictionRecord>,
}

impl SideConsistency {
    /// `pair position gold predicted probability` per line, pairs 1-based.
    pub fn dump(&self) -> String {
        let mut out = String::from("pair\tposition\tgold\tpredicted\tprobability\n");
        for p in &self.predictions {
            writeln!(out, "{}\t{}\t{}\t{}\t{:.6}", p.pair + 1, p.position, p.gold, p.predicted, p.probability)
                .expect("write to string");
        }
        out
    }
}

/// Source- and target-side accuracies side by side.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyReport {
    pub source_acc: Option<f64>,
    pub target_acc: Option<f64>,
    pub source_tokens: usize,
    pub target_tokens: usize,
    pub mask_rate: f64,
}

impl ConsistencyReport {
    pub fn new(parts: &[&SideConsistency]) -> Self {
        let mut r = ConsistencyReport {
            source_acc: None,
            target_acc: None,
            source_tokens: 0,
            target_tokens: 0,
            mask_rate: parts.first().map_or(0.0, |p| p.mask_rate),
        };
        for p in parts {
            match p.side {
                Side::Source => {
                    r.source_acc = Some(p.accuracy);
                    r.source_tokens = p.evaluated;
                }
                Side::Target => {
                    r.target_acc = Some(p.accuracy);
                    r.target_tokens = p.evaluated;
                }
            }
        }
        r
    }
}

/// Masks each pair at `mask_rate` on the model's side and counts exact recoveries,
/// micro-averaged over all masked tokens. Predictions are argmax unless `sample` is set.
pub fn consistency_accuracy<T: Scalar>(
    cmlm: &Cmlm<T>,
    corpus: &[TokenizedPair],
    mask_rate: f64,
    seed: u64,
    sample: bool,
) -> Result<SideConsistency> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mask_seed = substream(seed, "consistency-mask");
    let sample_seed = substream(seed, "consistency-sample");
    let mut predictions = Vec::new();
    for start in (0..corpus.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(corpus.len());
        let examples = (start..end)
            .map(|i| {
                let mut r = rng(child(mask_seed, i as u64));
                make_masked_example(&corpus[i], cmlm.side(), mask_rate, cmlm.mode(), cmlm.max_len(), &mut r)
                    .map_err(|e| Error::Data(format!("pair {}: {e}", i + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        for (k, (ex, dists)) in examples.iter().zip(cmlm.predict_masked_batch(&examples)?).enumerate() {
            let i = start + k;
            let mut r = rng(child(sample_seed, i as u64));
            for (d, &gold) in dists.iter().zip(&ex.labels) {
                let predicted = if sample { sample_index(&d.probs, &mut r) } else { argmax(&d.probs) };
                predictions.push(PredictionRecord {
                    pair: i,
                    position: d.position,
                    gold,
                    predicted,
                    probability: d.probs[predicted].as_f64(),
                });
            }
        }
    }
    let evaluated = predictions.len();
    let correct = predictions.iter().filter(|p| p.gold == p.predicted).count();
    Ok(SideConsistency {
        side: cmlm.side(),
        mode: cmlm.mode(),
        mask_rate,
        correct,
        evaluated,
        accuracy: correct as f64 / evaluated as f64,
        predictions,
    })
}
