use rand::Rng;

use crate::cmlm::{example_with_positions, maskable_positions, Cmlm, Side, SoftDistribution};
use crate::corpus::{TokenizedPair, NUM_SPECIALS};
use crate::error::{Error, Result};
use crate::numcore::{Graph, Scalar, Tensor, Var};

/// Positions of one sentence whose embeddings are replaced, with the distribution for each.
#[derive(Clone, Debug, PartialEq)]
pub struct SubstitutionPlan<T> {
    pub side: Side,
    pub gamma: f64,
    /// Ascending by position; positions index the side's own token sequence.
    pub entries: Vec<SoftDistribution<T>>,
}

impl<T> SubstitutionPlan<T> {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn positions(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.position).collect()
    }
}

/// Zeroes the probability of every special token and rescales the rest to sum to one.
/// If all mass sat on specials the result is uniform over ordinary tokens.
pub fn without_specials<T: Scalar>(probs: &[T]) -> Vec<T> {
    let mut out = probs.to_vec();
    let k = NUM_SPECIALS.min(out.len());
    out[..k].iter_mut().for_each(|p| *p = T::zero());
    let z: T = out.iter().copied().sum();
    if z > T::zero() {
        out.iter_mut().for_each(|p| *p /= z);
    } else if out.len() > k {
        let u = T::one() / T::lit((out.len() - k) as f64);
        out[k..].iter_mut().for_each(|p| *p = u);
    }
    out
}

/// Expected embedding row `sum_j p_j E_j` under `dist`.
pub fn soft_embedding<T: Scalar>(dist: &SoftDistribution<T>, embedding: &Tensor<T>) -> Result<Vec<T>> {
    let s = embedding.shape();
    if s.len() != 2 || s[0] != dist.probs.len() {
        return Err(Error::shape(
            "soft_embedding",
            format!("distribution over {} words, embedding {s:?}", dist.probs.len()),
        ));
    }
    let d = s[1];
    let mut out = vec![T::zero(); d];
    for (j, &p) in dist.probs.iter().enumerate() {
        if p != T::zero() {
            for (o, &e) in out.iter_mut().zip(&embedding.data()[j * d..(j + 1) * d]) {
                *o += p * e;
            }
        }
    }
    Ok(out)
}

/// Picks each maskable token of `tokens` with probability `gamma`.
pub fn select_positions<R: Rng + ?Sized>(tokens: &[usize], gamma: f64, rng: &mut R) -> Vec<usize> {
    if gamma <= 0.0 {
        return vec![];
    }
    maskable_positions(tokens)
        .into_iter()
        .filter(|_| rng.random::<f64>() < gamma)
        .collect()
}

/// Plans soft substitution for every pair of a batch.
///
/// Each sentence gets one masked-LM pass with all of its selected positions masked together;
/// the returned distributions exclude special tokens.
pub fn plan_soft_substitution<T: Scalar, R: Rng + ?Sized>(
    pairs: &[&TokenizedPair],
    side: Side,
    cmlm: &Cmlm<T>,
    gamma: f64,
    rng: &mut R,
) -> Result<Vec<SubstitutionPlan<T>>> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("gamma {gamma} outside [0, 1]")));
    }
    if cmlm.side() != side {
        return Err(Error::InvalidArgument(format!(
            "{} masked LM cannot plan {} substitutions",
            cmlm.side().name(),
            side.name()
        )));
    }
    let chosen: Vec<Vec<usize>> = pairs.iter().map(|p| select_positions(side.of(p), gamma, rng)).collect();
    let mut examples = Vec::new();
    let mut owners = Vec::new();
    for (i, (p, pos)) in pairs.iter().zip(&chosen).enumerate() {
        if !pos.is_empty() {
            examples.push(example_with_positions(p, side, cmlm.mode(), pos, cmlm.max_len())?);
            owners.push(i);
        }
    }
    let mut plans: Vec<SubstitutionPlan<T>> = (0..pairs.len())
        .map(|_| SubstitutionPlan {
            side,
            gamma,
            entries: vec![],
        })
        .collect();
    for (owner, dists) in owners.into_iter().zip(cmlm.predict_masked_batch(&examples)?) {
        plans[owner].entries = dists
            .into_iter()
            .map(|d| SoftDistribution {
                position: d.position,
                probs: without_specials(&d.probs),
            })
            .collect();
    }
    Ok(plans)
}

/// Replaces planned rows of the embedding stream `emb` (`[B, L, d]`) by soft embeddings.
///
/// Row `b` of the batch uses `plans[b]`; a plan position `p` lands at sequence index
/// `p + offset` (1 on the decoder input, which starts with BOS). Gradients reach the
/// embedding matrix through the mixture; the distributions themselves are constants.
pub fn apply_plan<T: Scalar>(
    g: &mut Graph<T>,
    emb: Var,
    plans: &[SubstitutionPlan<T>],
    embedding: Var,
    offset: usize,
) -> Result<Var> {
    let s = g.shape(emb).to_vec();
    if s.len() != 3 || s[0] != plans.len() {
        return Err(Error::shape("apply_plan", format!("embeddings {s:?} for {} plans", plans.len())));
    }
    let (b, l, d) = (s[0], s[1], s[2]);
    let v = g.shape(embedding)[0];
    let mut rows = Vec::new();
    let mut probs = Vec::new();
    for (r, plan) in plans.iter().enumerate() {
        for e in &plan.entries {
            if e.position + offset >= l || e.probs.len() != v {
                return Err(Error::shape(
                    "apply_plan",
                    format!("position {} (+{offset}) of width {l}, distribution over {}", e.position, e.probs.len()),
                ));
            }
            rows.push(r * l + e.position + offset);
            probs.extend_from_slice(&e.probs);
        }
    }
    if rows.is_empty() {
        return Ok(emb);
    }
    let n = rows.len();
    let p = g.constant(Tensor::new(&[n, v], probs)?);
    let soft = g.matmul(p, embedding, false)?;
    let flat = g.reshape(emb, &[b * l, d])?;
    let mixed = g.scatter_rows(flat, soft, &rows)?;
    g.reshape(mixed, &[b, l, d])
}
