use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Shape of a LLaMA-style decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub ffn_hidden: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
}

impl ModelConfig {
    /// Small default that trains in seconds.
    pub fn toy() -> Self {
        ModelConfig {
            vocab_size: 512,
            dim: 64,
            n_layers: 4,
            n_heads: 4,
            max_seq_len: 256,
            ffn_hidden: 172,
            rope_base: 10000.0,
            norm_eps: 1e-5,
        }
    }

    /// LLaMA 6.7B. Only ever used analytically.
    pub fn paper_scale() -> Self {
        ModelConfig {
            vocab_size: 32000,
            dim: 4096,
            n_layers: 32,
            n_heads: 32,
            max_seq_len: 2048,
            ffn_hidden: 11008,
            rope_base: 10000.0,
            norm_eps: 1e-6,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("dim", self.dim),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("max_seq_len", self.max_seq_len),
            ("ffn_hidden", self.ffn_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "dim {} is not divisible by n_heads {}",
                self.dim, self.n_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::Config(format!(
                "head dimension {} must be even for rotary encoding",
                self.head_dim()
            )));
        }
        if !(self.rope_base > 0.0) || !(self.norm_eps > 0.0) {
            return Err(Error::Config("rope_base and norm_eps must be positive".into()));
        }
        Ok(())
    }

    /// Applies one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |e: &dyn std::fmt::Display| Error::Config(format!("{key} = {value}: {e}"));
        match key {
            "vocab_size" => self.vocab_size = value.parse().map_err(|e| bad(&e))?,
            "dim" => self.dim = value.parse().map_err(|e| bad(&e))?,
            "n_layers" => self.n_layers = value.parse().map_err(|e| bad(&e))?,
            "n_heads" => self.n_heads = value.parse().map_err(|e| bad(&e))?,
            "max_seq_len" => self.max_seq_len = value.parse().map_err(|e| bad(&e))?,
            "ffn_hidden" => self.ffn_hidden = value.parse().map_err(|e| bad(&e))?,
            "rope_base" => self.rope_base = value.parse().map_err(|e| bad(&e))?,
            "norm_eps" => self.norm_eps = value.parse().map_err(|e| bad(&e))?,
            _ => return Err(Error::Config(format!("unknown model key {key:?}"))),
        }
        Ok(())
    }

    /// Canonical `key=value;...` rendering; parses back exactly via [`ModelConfig::parse_canonical`].
    pub fn canonical(&self) -> String {
        format!(
            "vocab_size={};dim={};n_layers={};n_heads={};max_seq_len={};ffn_hidden={};rope_base={};norm_eps={}",
            self.vocab_size,
            self.dim,
            self.n_layers,
            self.n_heads,
            self.max_seq_len,
            self.ffn_hidden,
            self.rope_base,
            self.norm_eps
        )
    }

    pub fn parse_canonical(s: &str) -> Result<Self> {
        let mut cfg = ModelConfig::toy();
        let mut seen = 0;
        for item in s.split(';') {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("malformed config item {item:?}")))?;
            cfg.set(k, v)?;
            seen += 1;
        }
        if seen != 8 {
            return Err(Error::Format(format!("config record has {seen} of 8 fields")));
        }
        Ok(cfg)
    }

    /// SHA-256 of [`ModelConfig::canonical`]; adapters and checkpoints carry it.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.canonical().as_bytes()).into()
    }

    pub fn digest_hex(&self) -> String {
        hex::encode(self.digest())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::toy().validate().unwrap();
        ModelConfig::paper_scale().validate().unwrap();
    }

    #[test]
    fn indivisible_heads_rejected() {
        let mut c = ModelConfig::toy();
        c.n_heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn digest_tracks_every_field() {
        let base = ModelConfig::toy();
        let mut other = base.clone();
        other.set("ffn_hidden", "170").unwrap();
        assert_ne!(base.digest(), other.digest());
        assert_eq!(base.digest(), ModelConfig::toy().digest());
    }

    #[test]
    fn canonical_form_round_trips() {
        let c = ModelConfig::paper_scale();
        assert_eq!(ModelConfig::parse_canonical(&c.canonical()).unwrap(), c);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(ModelConfig::toy().set("width", "3").is_err());
    }
}
