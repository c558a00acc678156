use std::ops::Range;

use rand::Rng;

use crate::corpus::{is_special, TokenizedPair, CLS, MASK, PAD, SEP};
use crate::error::{Error, Result};

/// The half of a sentence pair a masked language model predicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    Source,
    Target,
}

impl Side {
    pub fn code(self) -> u8 {
        match self {
            Side::Source => 0,
            Side::Target => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Side::Source),
            1 => Some(Side::Target),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Side::Source => "source",
            Side::Target => "target",
        }
    }

    /// Token sequence of this side of `pair`.
    pub fn of(self, pair: &TokenizedPair) -> &[usize] {
        match self {
            Side::Source => &pair.x,
            Side::Target => &pair.y,
        }
    }
}

impl std::str::FromStr for Side {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" | "src" => Ok(Side::Source),
            "target" | "tgt" => Ok(Side::Target),
            _ => Err(Error::InvalidArgument(format!("unknown side {s:?} (expected source or target)"))),
        }
    }
}

/// What the model sees besides the side it predicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConditioningMode {
    /// The whole opposite sentence is visible.
    Both,
    /// Only the predicted side is present.
    Mono,
}

impl ConditioningMode {
    pub fn code(self) -> u8 {
        match self {
            ConditioningMode::Both => 0,
            ConditioningMode::Mono => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(ConditioningMode::Both),
            1 => Some(ConditioningMode::Mono),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ConditioningMode::Both => "both",
            ConditioningMode::Mono => "mono",
        }
    }
}

impl std::str::FromStr for ConditioningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(ConditioningMode::Both),
            "mono" => Ok(ConditioningMode::Mono),
            _ => Err(Error::InvalidArgument(format!("unknown conditioning mode {s:?} (expected both or mono)"))),
        }
    }
}

/// `[CLS] X [SEP] Y [SEP]` (or only the predicted side in mono mode) with some positions of
/// one side replaced by MASK.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedExample {
    pub ids: Vec<usize>,
    pub segments: Vec<usize>,
    /// Indices into `ids`, ascending.
    pub mask_positions: Vec<usize>,
    /// Original ids at `mask_positions`.
    pub labels: Vec<usize>,
    pub side: Side,
    pub mode: ConditioningMode,
    /// Range of `ids` holding the predicted side.
    pub span: Range<usize>,
}

impl MaskedExample {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Mask positions as indices into the predicted side's own token sequence.
    pub fn local_positions(&self) -> Vec<usize> {
        self.mask_positions.iter().map(|p| p - self.span.start).collect()
    }
}

/// Unmasked layout of a pair: ids, segment ids and the span of the predicted side.
pub fn layout(pair: &TokenizedPair, side: Side, mode: ConditioningMode) -> (Vec<usize>, Vec<usize>, Range<usize>) {
    let (m, n) = (pair.x.len(), pair.y.len());
    match mode {
        ConditioningMode::Both => {
            let mut ids = Vec::with_capacity(m + n + 3);
            ids.push(CLS);
            ids.extend(&pair.x);
            ids.push(SEP);
            ids.extend(&pair.y);
            ids.push(SEP);
            let mut seg = vec![0; m + 2];
            seg.resize(m + n + 3, 1);
            let span = match side {
                Side::Source => 1..1 + m,
                Side::Target => m + 2..m + 2 + n,
            };
            (ids, seg, span)
        }
        ConditioningMode::Mono => {
            let s = side.of(pair);
            let mut ids = Vec::with_capacity(s.len() + 2);
            ids.push(CLS);
            ids.extend(s);
            ids.push(SEP);
            let seg = vec![side.code() as usize; s.len() + 2];
            (ids, seg, 1..1 + s.len())
        }
    }
}

/// Side-local positions that may be masked (everything except special tokens).
pub fn maskable_positions(tokens: &[usize]) -> Vec<usize> {
    (0..tokens.len()).filter(|&i| !is_special(tokens[i])).collect()
}

/// Masks exactly the given side-local positions.
pub fn example_with_positions(
    pair: &TokenizedPair,
    side: Side,
    mode: ConditioningMode,
    local: &[usize],
    max_len: usize,
) -> Result<MaskedExample> {
    let (mut ids, segments, span) = layout(pair, side, mode);
    if ids.len() > max_len {
        return Err(Error::Data(format!("masked example of length {} exceeds max_len {max_len}", ids.len())));
    }
    if local.is_empty() {
        return Err(Error::InvalidArgument("no positions to mask".into()));
    }
    let mut mask_positions = Vec::with_capacity(local.len());
    let mut labels = Vec::with_capacity(local.len());
    for (k, &p) in local.iter().enumerate() {
        if p >= span.len() || (k > 0 && p <= local[k - 1]) {
            return Err(Error::InvalidArgument(format!("mask positions {local:?} not ascending within the side")));
        }
        let at = span.start + p;
        if is_special(ids[at]) {
            return Err(Error::InvalidArgument(format!("position {p} holds a special token")));
        }
        labels.push(ids[at]);
        ids[at] = MASK;
        mask_positions.push(at);
    }
    Ok(MaskedExample {
        ids,
        segments,
        mask_positions,
        labels,
        side,
        mode,
        span,
    })
}

/// Selects each maskable position of `side` with probability `mask_rate`; if nothing is
/// selected, one maskable position is chosen uniformly instead.
pub fn make_masked_example<R: Rng + ?Sized>(
    pair: &TokenizedPair,
    side: Side,
    mask_rate: f64,
    mode: ConditioningMode,
    max_len: usize,
    rng: &mut R,
) -> Result<MaskedExample> {
    if !(mask_rate > 0.0 && mask_rate < 1.0) {
        return Err(Error::InvalidArgument(format!("mask rate {mask_rate} outside (0, 1)")));
    }
    let eligible = maskable_positions(side.of(pair));
    if eligible.is_empty() {
        return Err(Error::Data(format!("{} side has no maskable token", side.name())));
    }
    let mut chosen: Vec<usize> = eligible.iter().copied().filter(|_| rng.random::<f64>() < mask_rate).collect();
    if chosen.is_empty() {
        chosen.push(eligible[rng.random_range(0..eligible.len())]);
    }
    example_with_positions(pair, side, mode, &chosen, max_len)
}

/// Row-major padded stack of masked examples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExampleBatch {
    pub batch: usize,
    pub width: usize,
    pub ids: Vec<usize>,
    pub segments: Vec<usize>,
    pub visible: Vec<bool>,
    /// Flat indices (row * width + position) of every masked slot, example by example.
    pub rows: Vec<usize>,
    pub labels: Vec<usize>,
    /// `offsets[i]..offsets[i + 1]` indexes `rows` for example `i`.
    pub offsets: Vec<usize>,
}

impl ExampleBatch {
    pub fn new(examples: &[MaskedExample]) -> Self {
        let batch = examples.len();
        let width = examples.iter().map(MaskedExample::len).max().unwrap_or(0);
        let mut ids = vec![PAD; batch * width];
        let mut segments = vec![0; batch * width];
        let mut visible = vec![false; batch * width];
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut offsets = vec![0];
        for (r, ex) in examples.iter().enumerate() {
            let base = r * width;
            ids[base..base + ex.len()].copy_from_slice(&ex.ids);
            segments[base..base + ex.len()].copy_from_slice(&ex.segments);
            visible[base..base + ex.len()].iter_mut().for_each(|v| *v = true);
            rows.extend(ex.mask_positions.iter().map(|p| base + p));
            labels.extend(&ex.labels);
            offsets.push(rows.len());
        }
        ExampleBatch {
            batch,
            width,
            ids,
            segments,
            visible,
            rows,
            labels,
            offsets,
        }
    }
}
