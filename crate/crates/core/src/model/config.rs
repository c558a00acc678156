use crate::error::{Error, Result};

/// Size of one transformer stack.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransformerConfig {
    pub layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub dropout: f64,
    pub max_len: usize,
}

impl Default for TransformerConfig {
    /// Desk-scale setting: small enough for CPU property tests.
    fn default() -> Self {
        TransformerConfig {
            layers: 2,
            d_model: 64,
            d_ff: 128,
            heads: 2,
            dropout: 0.1,
            max_len: 128,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.layers == 0 || self.d_model == 0 || self.d_ff == 0 || self.max_len == 0 {
            return Err(Error::Config("transformer sizes must be positive".into()));
        }
        Ok(())
    }

    pub(crate) fn attention_params(&self) -> usize {
        4 * self.d_model * self.d_model + 4 * self.d_model
    }

    pub(crate) fn ffn_params(&self) -> usize {
        2 * self.d_model * self.d_ff + self.d_ff + self.d_model
    }

    pub(crate) fn norm_params(&self) -> usize {
        2 * self.d_model
    }
}

impl TransformerConfig {
    /// Key/value form stored in checkpoint metadata.
    pub fn to_meta(&self, prefix: &str) -> Vec<(String, u64)> {
        vec![
            (format!("{prefix}layers"), self.layers as u64),
            (format!("{prefix}d_model"), self.d_model as u64),
            (format!("{prefix}d_ff"), self.d_ff as u64),
            (format!("{prefix}heads"), self.heads as u64),
            (format!("{prefix}dropout_bits"), self.dropout.to_bits()),
            (format!("{prefix}max_len"), self.max_len as u64),
        ]
    }

    pub fn from_meta(meta: &std::collections::BTreeMap<String, u64>, prefix: &str) -> Result<Self> {
        let get = |k: &str| {
            meta.get(&format!("{prefix}{k}"))
                .copied()
                .ok_or_else(|| Error::Checkpoint(format!("missing metadata {prefix}{k}")))
        };
        let c = TransformerConfig {
            layers: get("layers")? as usize,
            d_model: get("d_model")? as usize,
            d_ff: get("d_ff")? as usize,
            heads: get("heads")? as usize,
            dropout: f64::from_bits(get("dropout_bits")?),
            max_len: get("max_len")? as usize,
        };
        c.validate()?;
        Ok(c)
    }
}
