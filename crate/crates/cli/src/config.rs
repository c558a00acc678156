//! Flat `key = value` experiment configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use cmlm_da::cmlm::ConditioningMode;
use cmlm_da::model::TransformerConfig;
use cmlm_da::numcore::AdamConfig;
use cmlm_da::trainer::{DaConfig, DaMode, TrainConfig};
use cmlm_da::{Error, Result};
use sha2::{Digest, Sha256};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Int,
    Float,
    Bool,
    Text,
    Floats,
    Choice(&'static [&'static str]),
}

const MODES: &[&str] = &["none", "soft", "hard", "swap", "drop", "blank", "smooth"];

/// Every key, its default and its type.
const SCHEMA: &[(&str, &str, Kind)] = &[
    ("seed", "0", Kind::Int),
    ("precision", "f32", Kind::Choice(&["f32", "f64"])),
    ("data.dir", "data", Kind::Text),
    ("data.train_src", "", Kind::Text),
    ("data.train_tgt", "", Kind::Text),
    ("data.valid_src", "", Kind::Text),
    ("data.valid_tgt", "", Kind::Text),
    ("data.test_src", "", Kind::Text),
    ("data.test_tgt", "", Kind::Text),
    ("bpe.merges", "8000", Kind::Int),
    ("bpe.min_freq", "1", Kind::Int),
    ("synthetic.language", "none", Kind::Choice(&["none", "aligned", "rich"])),
    ("synthetic.train", "5000", Kind::Int),
    ("synthetic.valid", "500", Kind::Int),
    ("synthetic.test", "500", Kind::Int),
    ("nmt.layers", "2", Kind::Int),
    ("nmt.d_model", "64", Kind::Int),
    ("nmt.d_ff", "128", Kind::Int),
    ("nmt.heads", "4", Kind::Int),
    ("nmt.dropout", "0.1", Kind::Float),
    ("nmt.max_len", "64", Kind::Int),
    ("cmlm.layers", "2", Kind::Int),
    ("cmlm.d_model", "64", Kind::Int),
    ("cmlm.d_ff", "128", Kind::Int),
    ("cmlm.heads", "4", Kind::Int),
    ("cmlm.dropout", "0.1", Kind::Float),
    ("cmlm.max_len", "128", Kind::Int),
    ("cmlm.mode", "both", Kind::Choice(&["both", "mono"])),
    ("cmlm.steps", "1000", Kind::Int),
    ("cmlm.batch_size", "32", Kind::Int),
    ("cmlm.lr", "0.001", Kind::Float),
    ("cmlm.mask_rate", "0.15", Kind::Float),
    ("cmlm.source_checkpoint", "", Kind::Text),
    ("cmlm.target_checkpoint", "", Kind::Text),
    ("da.mode", "none", Kind::Choice(MODES)),
    ("da.gamma", "0.25", Kind::Float),
    ("da.swap_window", "3", Kind::Int),
    ("da.encoder", "true", Kind::Bool),
    ("da.decoder", "true", Kind::Bool),
    ("train.epochs", "10", Kind::Int),
    ("train.max_tokens", "512", Kind::Int),
    ("train.warmup", "400", Kind::Int),
    ("train.lr_scale", "1.0", Kind::Float),
    ("train.label_smoothing", "0.1", Kind::Float),
    ("train.adam_beta1", "0.9", Kind::Float),
    ("train.adam_beta2", "0.98", Kind::Float),
    ("train.adam_eps", "1e-9", Kind::Float),
    ("train.validate_every", "0", Kind::Int),
    ("train.checkpoint_every", "0", Kind::Int),
    ("train.val_max_len", "64", Kind::Int),
    ("eval.beam", "4", Kind::Int),
    ("eval.max_len", "64", Kind::Int),
    ("eval.split", "test", Kind::Choice(&["train", "valid", "test"])),
    ("consistency.mask_rate", "0.15", Kind::Float),
    ("consistency.sample", "false", Kind::Bool),
    ("significance.samples", "1000", Kind::Int),
    ("sweep.gammas", "0,0.15,0.25,0.35,0.5", Kind::Floats),
];

fn kind_of(key: &str) -> Option<Kind> {
    SCHEMA.iter().find(|(k, _, _)| *k == key).map(|(_, _, t)| *t)
}

fn check_value(kind: Kind, v: &str) -> bool {
    match kind {
        Kind::Int => v.parse::<u64>().is_ok(),
        Kind::Float => v.parse::<f64>().is_ok_and(f64::is_finite),
        Kind::Bool => matches!(v, "true" | "false"),
        Kind::Text => true,
        Kind::Floats => v.split(',').all(|x| x.trim().parse::<f64>().is_ok_and(f64::is_finite)),
        Kind::Choice(opts) => opts.contains(&v),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    values: BTreeMap<String, String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            values: SCHEMA.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl ExperimentConfig {
    /// Defaults, then the file (if any), then `--set` overrides. Unknown keys and malformed
    /// values are all reported together.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut entries: Vec<(String, String, String)> = Vec::new();
        if let Some(p) = path {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("{} line {}: expected key = value", p.display(), i + 1)))?;
                entries.push((k.trim().to_string(), v.trim().to_string(), format!("{} line {}", p.display(), i + 1)));
            }
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set {o:?}: expected KEY=VALUE")))?;
            entries.push((k.trim().to_string(), v.trim().to_string(), "--set".into()));
        }
        let mut cfg = Self::default();
        let mut unknown = Vec::new();
        let mut malformed = Vec::new();
        for (k, v, origin) in entries {
            match kind_of(&k) {
                None => unknown.push(format!("{k} ({origin})")),
                Some(kind) if !check_value(kind, &v) => malformed.push(format!("{k} = {v:?} ({origin})")),
                Some(_) => {
                    cfg.values.insert(k, v);
                }
            }
        }
        let mut problems = Vec::new();
        if !unknown.is_empty() {
            problems.push(format!("unknown keys: {}", unknown.join(", ")));
        }
        if !malformed.is_empty() {
            problems.push(format!("malformed values: {}", malformed.join(", ")));
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        let value = value.into();
        let kind = kind_of(key).ok_or_else(|| Error::Config(format!("unknown keys: {key}")))?;
        if !check_value(kind, &value) {
            return Err(Error::Config(format!("malformed values: {key} = {value:?}")));
        }
        self.values.insert(key.to_string(), value);
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("key {key} not in schema"))
    }

    pub fn int(&self, key: &str) -> u64 {
        self.get(key).parse().expect("validated")
    }

    pub fn usize(&self, key: &str) -> usize {
        self.int(key) as usize
    }

    pub fn float(&self, key: &str) -> f64 {
        self.get(key).parse().expect("validated")
    }

    pub fn flag(&self, key: &str) -> bool {
        self.get(key) == "true"
    }

    pub fn floats(&self, key: &str) -> Vec<f64> {
        self.get(key).split(',').map(|x| x.trim().parse().expect("validated")).collect()
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    pub fn seed(&self) -> u64 {
        self.int("seed")
    }

    /// `key = value` lines in key order.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 of the sorted effective configuration, defaults included.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (k, v) in &self.values {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        h.finalize().into()
    }

    pub fn digest_hex(&self) -> String {
        self.digest().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// First line of every report.
    pub fn header(&self) -> String {
        format!("# config_digest={} seed={}\n", self.digest_hex(), self.seed())
    }

    fn transformer(&self, prefix: &str) -> Result<TransformerConfig> {
        let c = TransformerConfig {
            layers: self.usize(&format!("{prefix}.layers")),
            d_model: self.usize(&format!("{prefix}.d_model")),
            d_ff: self.usize(&format!("{prefix}.d_ff")),
            heads: self.usize(&format!("{prefix}.heads")),
            dropout: self.float(&format!("{prefix}.dropout")),
            max_len: self.usize(&format!("{prefix}.max_len")),
        };
        c.validate().map_err(|e| Error::Config(format!("{prefix}: {e}")))?;
        Ok(c)
    }

    pub fn nmt(&self) -> Result<TransformerConfig> {
        self.transformer("nmt")
    }

    pub fn cmlm(&self) -> Result<TransformerConfig> {
        self.transformer("cmlm")
    }

    pub fn cmlm_mode(&self) -> ConditioningMode {
        self.get("cmlm.mode").parse().expect("validated")
    }

    pub fn da(&self) -> Result<DaConfig> {
        let da = DaConfig {
            mode: self.get("da.mode").parse::<DaMode>()?,
            gamma: self.float("da.gamma"),
            swap_window: self.usize("da.swap_window"),
            augment_encoder: self.flag("da.encoder"),
            augment_decoder: self.flag("da.decoder"),
            cmlm_src: self.path("cmlm.source_checkpoint"),
            cmlm_tgt: self.path("cmlm.target_checkpoint"),
        };
        da.validate()?;
        Ok(da)
    }

    pub fn train(&self, checkpoint_dir: Option<PathBuf>) -> Result<TrainConfig> {
        let t = TrainConfig {
            epochs: self.usize("train.epochs"),
            max_tokens: self.usize("train.max_tokens"),
            warmup: self.int("train.warmup"),
            lr_scale: self.float("train.lr_scale"),
            label_smoothing: self.float("train.label_smoothing"),
            adam: AdamConfig {
                beta1: self.float("train.adam_beta1"),
                beta2: self.float("train.adam_beta2"),
                eps: self.float("train.adam_eps"),
            },
            seed: self.seed(),
            validate_every: self.int("train.validate_every"),
            val_max_len: self.usize("train.val_max_len"),
            checkpoint_every: self.int("train.checkpoint_every"),
            checkpoint_dir,
        };
        t.validate()?;
        Ok(t)
    }
}
