use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::augment::soft::{plan_soft_substitution, SubstitutionPlan};
use crate::cmlm::{argmax, Cmlm, Side};
use crate::corpus::{ids_to_text, TokenizedPair};
use crate::error::{Error, Result};
use crate::numcore::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HardStrategy {
    /// Draw from the predicted distribution (temperature 1).
    Sample,
    Argmax,
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_index<T: Scalar, R: Rng + ?Sized>(probs: &[T], rng: &mut R) -> usize {
    let u = rng.random::<f64>();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.iter().enumerate() {
        let p = p.as_f64();
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// A synthetic pair and the side-local positions that were rewritten.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HardSubstitution {
    pub pair: TokenizedPair,
    pub replaced: Vec<usize>,
}

fn realize<T: Scalar, R: Rng + ?Sized>(
    pair: &TokenizedPair,
    plan: &SubstitutionPlan<T>,
    strategy: HardStrategy,
    rng: &mut R,
) -> HardSubstitution {
    let mut out = pair.clone();
    let tokens = match plan.side {
        Side::Source => &mut out.x,
        Side::Target => &mut out.y,
    };
    for e in &plan.entries {
        tokens[e.position] = match strategy {
            HardStrategy::Sample => sample_index(&e.probs, rng),
            HardStrategy::Argmax => argmax(&e.probs),
        };
    }
    HardSubstitution {
        pair: out,
        replaced: plan.positions(),
    }
}

/// Rewrites γ-selected tokens of one side of every pair with words predicted by `cmlm`.
pub fn hard_substitute_batch<T: Scalar, R: Rng + ?Sized>(
    pairs: &[&TokenizedPair],
    side: Side,
    cmlm: &Cmlm<T>,
    gamma: f64,
    rng: &mut R,
    strategy: HardStrategy,
) -> Result<Vec<HardSubstitution>> {
    let plans = plan_soft_substitution(pairs, side, cmlm, gamma, rng)?;
    Ok(pairs
        .iter()
        .zip(&plans)
        .map(|(p, plan)| realize(p, plan, strategy, rng))
        .collect())
}

pub fn hard_substitute<T: Scalar, R: Rng + ?Sized>(
    pair: &TokenizedPair,
    side: Side,
    cmlm: &Cmlm<T>,
    gamma: f64,
    rng: &mut R,
    strategy: HardStrategy,
) -> Result<TokenizedPair> {
    let mut out = hard_substitute_batch(&[pair], side, cmlm, gamma, rng, strategy)?;
    Ok(out.remove(0).pair)
}

/// Writes synthetic pairs as `<prefix>.src.ids`, `<prefix>.tgt.ids` and a provenance file
/// `<prefix>.prov` with `origin_line<TAB>positions` per line (1-based origin lines).
pub fn write_synthetic(prefix: &Path, items: &[(usize, HardSubstitution)]) -> Result<()> {
    let with_ext = |ext: &str| {
        let mut s = prefix.as_os_str().to_owned();
        s.push(ext);
        std::path::PathBuf::from(s)
    };
    if items.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    fs::write(with_ext(".src.ids"), ids_to_text(items.iter().map(|(_, h)| &h.pair.x)))?;
    fs::write(with_ext(".tgt.ids"), ids_to_text(items.iter().map(|(_, h)| &h.pair.y)))?;
    let mut prov = String::new();
    for (origin, h) in items {
        let pos: Vec<String> = h.replaced.iter().map(usize::to_string).collect();
        writeln!(prov, "{}\t{}", origin + 1, pos.join(",")).expect("write to string");
    }
    fs::write(with_ext(".prov"), prov)?;
    Ok(())
}
