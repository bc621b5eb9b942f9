use serde::{Deserialize, Serialize};

use crate::codec::VOCAB_SIZE;
use crate::error::{Error, Result};

/// Architecture hyperparameters of the byte-level encoder-decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub max_src_len: usize,
    pub max_tgt_len: usize,
    pub rel_pos_buckets: usize,
    pub rel_pos_max_distance: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: VOCAB_SIZE,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            n_encoder_layers: 3,
            n_decoder_layers: 3,
            max_src_len: 128,
            max_tgt_len: 128,
            rel_pos_buckets: 32,
            rel_pos_max_distance: 128,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    /// Two encoder and two decoder layers at width 64, no dropout.
    pub fn small() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            n_encoder_layers: 2,
            n_decoder_layers: 2,
            dropout: 0.0,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("n_encoder_layers", self.n_encoder_layers),
            ("n_decoder_layers", self.n_decoder_layers),
            ("max_src_len", self.max_src_len),
            ("max_tgt_len", self.max_tgt_len),
            ("rel_pos_buckets", self.rel_pos_buckets),
            ("rel_pos_max_distance", self.rel_pos_max_distance),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.vocab_size != VOCAB_SIZE {
            return Err(Error::Config(format!(
                "vocab_size must be {VOCAB_SIZE}, got {}",
                self.vocab_size
            )));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.rel_pos_buckets < 2 {
            return Err(Error::Config("rel_pos_buckets must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Errors naming the first field that differs from `expected`.
    pub fn ensure_matches(&self, expected: &ModelConfig) -> Result<()> {
        let ours = serde_json::to_value(self)?;
        let theirs = serde_json::to_value(expected)?;
        if let (Some(a), Some(b)) = (ours.as_object(), theirs.as_object()) {
            for (key, found) in a {
                let want = &b[key];
                if want != found {
                    return Err(Error::Incompatible {
                        field: key.clone(),
                        expected: want.to_string(),
                        found: found.to_string(),
                    });
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::small().validate().unwrap();
    }

    #[test]
    fn rejects_bad_configs() {
        let bad_heads = ModelConfig {
            n_heads: 3,
            ..ModelConfig::default()
        };
        assert!(bad_heads.validate().is_err());
        let bad_vocab = ModelConfig {
            vocab_size: 300,
            ..ModelConfig::default()
        };
        assert!(bad_vocab.validate().is_err());
        let bad_dropout = ModelConfig {
            dropout: 1.0,
            ..ModelConfig::default()
        };
        assert!(bad_dropout.validate().is_err());
    }

    #[test]
    fn mismatch_names_field() {
        let a = ModelConfig::default();
        let b = ModelConfig {
            d_ff: 256,
            ..a.clone()
        };
        match b.ensure_matches(&a) {
            Err(Error::Incompatible { field, .. }) => assert_eq!(field, "d_ff"),
            other => panic!("unexpected {other:?}"),
        }
        a.ensure_matches(&a.clone()).unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        let json = r#"{"d_model": 64, "bogus": 1}"#;
        assert!(serde_json::from_str::<ModelConfig>(json).is_err());
        let cfg: ModelConfig = serde_json::from_str(r#"{"d_model": 64}"#).unwrap();
        assert_eq!(cfg.n_heads, 4);
    }
}
