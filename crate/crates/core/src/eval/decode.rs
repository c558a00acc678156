use crate::corpus::{is_special, BOS, EOS};
use crate::error::{Error, Result};
use crate::model::NmtModel;
use crate::numcore::{Graph, Scalar, Tensor, Var};

/// A finished hypothesis: tokens without EOS and its length-normalized log-probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    /// Sum of token log-probabilities (EOS included when emitted) divided by their count.
    pub score: f64,
}

struct Session<'a, T: Scalar> {
    model: &'a NmtModel<T>,
    g: Graph<T>,
    pv: Vec<Var>,
    memory: Var,
    src_len: usize,
}

impl<'a, T: Scalar> Session<'a, T> {
    fn new(model: &'a NmtModel<T>, x: &[usize]) -> Result<Self> {
        let mut src = x.to_vec();
        src.push(EOS);
        let mut g = Graph::new();
        let pv = model.params.load(&mut g, false);
        let emb = model.embed_tokens(&mut g, &pv, &src, 1, src.len())?;
        let memory = model.encode(&mut g, &pv, emb, &[src.len()])?;
        Ok(Session {
            model,
            g,
            pv,
            memory,
            src_len: src.len(),
        })
    }

    /// Next-token log-probabilities `[k, V]` for `k` equal-length prefixes (each starting with BOS).
    fn step(&mut self, prefixes: &[Vec<usize>]) -> Result<Tensor<T>> {
        let k = prefixes.len();
        let t = prefixes[0].len();
        let d = self.model.config.d_model;
        let ids: Vec<usize> = prefixes.iter().flatten().copied().collect();
        let g = &mut self.g;
        let emb = self.model.embed_tokens(g, &self.pv, &ids, k, t)?;
        let flat = g.reshape(self.memory, &[1, self.src_len * d])?;
        let mem = g.gather(flat, &vec![0; k], &[k])?;
        let mem = g.reshape(mem, &[k, self.src_len, d])?;
        let logits = self.model.decode(g, &self.pv, emb, &vec![t; k], mem, &vec![self.src_len; k])?;
        let last = g.narrow(logits, 1, t - 1, 1)?;
        let v = self.model.vocab_size;
        let rows = g.value(last).clone().reshape(&[k, v])?;
        rows.log_softmax(1)
    }
}

/// Log-probabilities with every special token except EOS removed, and EOS removed too
/// while nothing has been generated.
fn allowed(logp: &[impl Scalar], generated: usize) -> Vec<f64> {
    logp.iter()
        .enumerate()
        .map(|(i, p)| {
            if (is_special(i) && i != EOS) || (i == EOS && generated == 0) {
                f64::NEG_INFINITY
            } else {
                p.as_f64()
            }
        })
        .collect()
}

fn max_steps<T: Scalar>(model: &NmtModel<T>, max_len: usize) -> usize {
    // The decoder input holds BOS plus the generated prefix.
    max_len.min(model.config.max_len.saturating_sub(1)).max(1)
}

fn greedy<T: Scalar>(model: &NmtModel<T>, x: &[usize], max_len: usize) -> Result<Hypothesis> {
    let mut s = Session::new(model, x)?;
    let mut prefix = vec![BOS];
    let mut total = 0.0;
    let mut scored = 0;
    for step in 0..max_steps(model, max_len) {
        let lp = s.step(std::slice::from_ref(&prefix))?;
        let lp = allowed(lp.data(), step);
        let (best, val) = lp
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        total += val;
        scored += 1;
        if best == EOS {
            break;
        }
        prefix.push(best);
    }
    Ok(Hypothesis {
        tokens: prefix[1..].to_vec(),
        score: total / scored as f64,
    })
}

/// Beam search with length-normalized scores; `beam = 1` is greedy decoding.
///
/// Output has between 1 and `max_len` tokens and stops at EOS. Live hypotheses are ranked by
/// summed log-probability, finished ones by normalized score, and the greedy path always
/// competes in the final ranking, so a wider beam never scores below `beam = 1`.
pub fn decode_scored<T: Scalar>(model: &NmtModel<T>, x: &[usize], beam: usize, max_len: usize) -> Result<Hypothesis> {
    if beam == 0 {
        return Err(Error::InvalidArgument("beam must be at least 1".into()));
    }
    if x.is_empty() {
        return Err(Error::InvalidArgument("cannot decode an empty source".into()));
    }
    let greedy_hyp = greedy(model, x, max_len)?;
    if beam == 1 {
        return Ok(greedy_hyp);
    }
    let mut s = Session::new(model, x)?;
    let mut live: Vec<(Vec<usize>, f64)> = vec![(vec![BOS], 0.0)];
    let mut finished: Vec<Hypothesis> = vec![greedy_hyp];
    let steps = max_steps(model, max_len);
    for step in 0..steps {
        let prefixes: Vec<Vec<usize>> = live.iter().map(|(p, _)| p.clone()).collect();
        let lp = s.step(&prefixes)?;
        let v = model.vocab_size;
        let mut cands: Vec<(usize, usize, f64)> = Vec::new();
        for (h, (_, sc)) in live.iter().enumerate() {
            let row = allowed(&lp.data()[h * v..(h + 1) * v], step);
            for (tok, &l) in row.iter().enumerate() {
                if l.is_finite() {
                    cands.push((h, tok, sc + l));
                }
            }
        }
        cands.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
        let mut next = Vec::new();
        for (h, tok, sc) in cands {
            if next.len() == beam {
                break;
            }
            let len = step + 1;
            if tok == EOS {
                finished.push(Hypothesis {
                    tokens: live[h].0[1..].to_vec(),
                    score: sc / len as f64,
                });
            } else {
                let mut p = live[h].0.clone();
                p.push(tok);
                if step + 1 == steps {
                    finished.push(Hypothesis {
                        tokens: p[1..].to_vec(),
                        score: sc / len as f64,
                    });
                } else {
                    next.push((p, sc));
                }
            }
        }
        if next.is_empty() {
            break;
        }
        live = next;
    }
    finished.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(finished.swap_remove(0))
}

pub fn decode<T: Scalar>(model: &NmtModel<T>, x: &[usize], beam: usize, max_len: usize) -> Result<Vec<usize>> {
    Ok(decode_scored(model, x, beam, max_len)?.tokens)
}

/// Length-normalized log-probability of forcing `y` (followed by EOS) on source `x`.
pub fn sequence_score<T: Scalar>(model: &NmtModel<T>, x: &[usize], y: &[usize], with_eos: bool) -> Result<f64> {
    let mut s = Session::new(model, x)?;
    let mut prefix = vec![BOS];
    let mut total = 0.0;
    let mut targets = y.to_vec();
    if with_eos {
        targets.push(EOS);
    }
    for (step, &t) in targets.iter().enumerate() {
        let lp = s.step(std::slice::from_ref(&prefix))?;
        total += allowed(lp.data(), step)[t];
        prefix.push(t);
    }
    Ok(total / targets.len() as f64)
}

/// Greedy decoding of many sources at once, sharing one encoder pass.
pub fn greedy_batch<T: Scalar>(model: &NmtModel<T>, sources: &[&[usize]], max_len: usize) -> Result<Vec<Vec<usize>>> {
    let b = sources.len();
    if b == 0 {
        return Ok(vec![]);
    }
    let ls = sources.iter().map(|x| x.len() + 1).max().unwrap_or(1);
    let mut src = vec![crate::corpus::PAD; b * ls];
    let mut src_len = Vec::with_capacity(b);
    for (r, x) in sources.iter().enumerate() {
        if x.is_empty() {
            return Err(Error::InvalidArgument(format!("source {} is empty", r + 1)));
        }
        src[r * ls..r * ls + x.len()].copy_from_slice(x);
        src[r * ls + x.len()] = EOS;
        src_len.push(x.len() + 1);
    }
    let mut g = Graph::new();
    let pv = model.params.load(&mut g, false);
    let emb = model.embed_tokens(&mut g, &pv, &src, b, ls)?;
    let memory = model.encode(&mut g, &pv, emb, &src_len)?;
    let memory_t = g.value(memory).clone();
    drop(g);

    let mut out: Vec<Vec<usize>> = vec![vec![]; b];
    let mut done = vec![false; b];
    let mut prefix: Vec<usize> = vec![BOS; b];
    let v = model.vocab_size;
    for step in 0..max_steps(model, max_len) {
        let t = step + 1;
        let mut g = Graph::new();
        let pv = model.params.load(&mut g, false);
        let mem = g.constant(memory_t.clone());
        let emb = model.embed_tokens(&mut g, &pv, &prefix, b, t)?;
        let logits = model.decode(&mut g, &pv, emb, &vec![t; b], mem, &src_len)?;
        let last = g.narrow(logits, 1, t - 1, 1)?;
        let rows = g.value(last).clone().reshape(&[b, v])?.log_softmax(1)?;
        let mut next = Vec::with_capacity(b * (t + 1));
        for r in 0..b {
            let lp = allowed(&rows.data()[r * v..(r + 1) * v], step);
            let best = lp
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
                .0;
            if !done[r] {
                if best == EOS {
                    done[r] = true;
                } else {
                    out[r].push(best);
                }
            }
            next.extend_from_slice(&prefix[r * t..(r + 1) * t]);
            next.push(if done[r] { EOS } else { best });
        }
        if done.iter().all(|&x| x) {
            break;
        }
        prefix = next;
    }
    Ok(out)
}
