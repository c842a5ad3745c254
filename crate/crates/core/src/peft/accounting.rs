//! Closed-form trainable-parameter and storage figures. Nothing is allocated,
//! so this works at full LLaMA-7B scale.

use serde::Serialize;

use super::{AdapterHyper, LoraConfig, PrefixConfig};
use crate::error::Result;
use crate::model::ModelConfig;

const MIB: f64 = 1024.0 * 1024.0;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Accounting {
    pub method: String,
    pub hyper: String,
    pub trainable: usize,
    /// Storage at 2 bytes per parameter (half precision).
    pub bytes_half: u64,
    /// Storage at 4 bytes per parameter, the on-disk desk format.
    pub bytes_f32: u64,
}

impl Accounting {
    pub fn mib_half(&self) -> f64 {
        self.bytes_half as f64 / MIB
    }

    pub fn mib_f32(&self) -> f64 {
        self.bytes_f32 as f64 / MIB
    }

    /// `8388608` → `"~8.4M"`.
    pub fn trainable_rounded(&self) -> String {
        format!("~{:.1}M", self.trainable as f64 / 1e6)
    }
}

pub fn analytic_count(hyper: &AdapterHyper, model: &ModelConfig) -> Result<usize> {
    hyper.validate(model)?;
    Ok(match hyper {
        AdapterHyper::Lora(c) => c.count_trainable(model),
        AdapterHyper::Prefix(c) => c.count_trainable(model),
    })
}

pub fn account(hyper: &AdapterHyper, model: &ModelConfig) -> Result<Accounting> {
    let trainable = analytic_count(hyper, model)?;
    Ok(Accounting {
        method: hyper.kind().name().to_string(),
        hyper: hyper.describe(),
        trainable,
        bytes_half: trainable as u64 * 2,
        bytes_f32: trainable as u64 * 4,
    })
}

/// Prefix (K=10, L=30), LoRA r=8 and LoRA r=16 on the 6.7B configuration.
pub fn paper_scale_table() -> Vec<Accounting> {
    let model = ModelConfig::paper_scale();
    [
        AdapterHyper::Prefix(PrefixConfig::default()),
        AdapterHyper::Lora(LoraConfig { rank: 8, ..Default::default() }),
        AdapterHyper::Lora(LoraConfig::default()),
    ]
    .iter()
    .map(|h| account(h, &model).expect("paper-scale hyperparameters are valid"))
    .collect()
}
