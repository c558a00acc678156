use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::augment::NoiseSpec;
use crate::error::{Error, Result};
use crate::numcore::AdamConfig;

/// How training batches are augmented.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DaMode {
    None,
    /// Embedding-level soft substitution from the masked LMs.
    Soft,
    /// Token rewriting with words sampled from the masked LMs.
    Hard,
    Swap,
    Drop,
    Blank,
    Smooth,
}

impl DaMode {
    pub const ALL: [DaMode; 7] = [
        DaMode::None,
        DaMode::Soft,
        DaMode::Hard,
        DaMode::Swap,
        DaMode::Drop,
        DaMode::Blank,
        DaMode::Smooth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DaMode::None => "none",
            DaMode::Soft => "soft",
            DaMode::Hard => "hard",
            DaMode::Swap => "swap",
            DaMode::Drop => "drop",
            DaMode::Blank => "blank",
            DaMode::Smooth => "smooth",
        }
    }

    pub fn needs_cmlm(self) -> bool {
        matches!(self, DaMode::Soft | DaMode::Hard)
    }
}

impl fmt::Display for DaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DaMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        DaMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown augmentation mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DaConfig {
    pub mode: DaMode,
    /// Substitution probability for soft/hard, corruption probability for drop/blank/smooth.
    pub gamma: f64,
    /// Window for swap noise.
    pub swap_window: usize,
    pub augment_encoder: bool,
    pub augment_decoder: bool,
    pub cmlm_src: Option<PathBuf>,
    pub cmlm_tgt: Option<PathBuf>,
}

impl Default for DaConfig {
    fn default() -> Self {
        DaConfig {
            mode: DaMode::None,
            gamma: 0.25,
            swap_window: 3,
            augment_encoder: true,
            augment_decoder: true,
            cmlm_src: None,
            cmlm_tgt: None,
        }
    }
}

impl DaConfig {
    pub fn none() -> Self {
        DaConfig::default()
    }

    pub fn soft(gamma: f64, encoder: bool, decoder: bool) -> Self {
        DaConfig {
            mode: DaMode::Soft,
            gamma,
            augment_encoder: encoder,
            augment_decoder: decoder,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if let Some(spec) = self.noise() {
            spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn noise(&self) -> Option<NoiseSpec> {
        match self.mode {
            DaMode::Swap => Some(NoiseSpec::Swap(self.swap_window)),
            DaMode::Drop => Some(NoiseSpec::Drop(self.gamma)),
            DaMode::Blank => Some(NoiseSpec::Blank(self.gamma)),
            DaMode::Smooth => Some(NoiseSpec::Smooth(self.gamma)),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Padded-token budget per batch side.
    pub max_tokens: usize,
    pub warmup: u64,
    /// Multiplier on the inverse square-root schedule.
    pub lr_scale: f64,
    pub label_smoothing: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Validation BLEU every this many steps (0: only after the last step).
    pub validate_every: u64,
    pub val_max_len: usize,
    /// Checkpoint every this many steps (0: only after the last step). Needs `checkpoint_dir`.
    pub checkpoint_every: u64,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            max_tokens: 1024,
            warmup: 400,
            lr_scale: 1.0,
            label_smoothing: 0.1,
            adam: AdamConfig::transformer(),
            seed: 0,
            validate_every: 0,
            val_max_len: 64,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_tokens == 0 {
            return Err(Error::Config("max_tokens must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("label smoothing {} outside [0, 1)", self.label_smoothing)));
        }
        if !(self.lr_scale > 0.0) {
            return Err(Error::Config("lr_scale must be positive".into()));
        }
        Ok(())
    }
}
