use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::batch::{batch_loss, Batch, Encoded};
use crate::error::{Error, Result};
use crate::model::{BaseVars, ModelWeights};
use crate::numerics::{AdamW, AdamWConfig, GradMap, Graph};
use crate::peft::{Adapter, AdapterKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Instruction,
    Task,
}

impl Stage {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "instruct" | "instruction" => Ok(Stage::Instruction),
            "task" => Ok(Stage::Task),
            other => Err(Error::Config(format!("unknown stage {other:?} (instruct, task)"))),
        }
    }
}

/// Task kinds as far as training defaults care.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EpochPreset {
    Necessity,
    Generation,
    Instruction,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_tokens: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Stops after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
}

pub const KEYS: [&str; 8] = [
    "stage",
    "epochs",
    "batch_size",
    "max_tokens",
    "learning_rate",
    "weight_decay",
    "seed",
    "max_steps",
];

impl TrainConfig {
    /// Published hyperparameters: prefix 0.009 / 0.02, LoRA 0.0003 / 0.01,
    /// batch 64, 2048 tokens, 5 epochs for necessity and 10 for generation.
    pub fn defaults(method: AdapterKind, stage: Stage, preset: EpochPreset) -> Self {
        let (learning_rate, weight_decay) = match method {
            AdapterKind::Prefix => (0.009, 0.02),
            AdapterKind::Lora => (0.0003, 0.01),
        };
        TrainConfig {
            stage,
            epochs: match preset {
                EpochPreset::Necessity => 5,
                EpochPreset::Generation => 10,
                EpochPreset::Instruction => 3,
            },
            batch_size: 64,
            max_tokens: 2048,
            learning_rate,
            weight_decay,
            seed: 0,
            max_steps: None,
        }
    }

    /// Desk preset: batch 8.
    pub fn desk(mut self) -> Self {
        self.batch_size = 8;
        self
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |e: &dyn std::fmt::Display| Error::Config(format!("{key} = {value}: {e}"));
        match key {
            "stage" => self.stage = Stage::parse(value)?,
            "epochs" => self.epochs = value.parse().map_err(|e| bad(&e))?,
            "batch_size" => self.batch_size = value.parse().map_err(|e| bad(&e))?,
            "max_tokens" => self.max_tokens = value.parse().map_err(|e| bad(&e))?,
            "learning_rate" | "lr" => self.learning_rate = value.parse().map_err(|e| bad(&e))?,
            "weight_decay" => self.weight_decay = value.parse().map_err(|e| bad(&e))?,
            "seed" => self.seed = value.parse().map_err(|e| bad(&e))?,
            "max_steps" => {
                self.max_steps = match value {
                    "none" | "" => None,
                    v => Some(v.parse().map_err(|e| bad(&e))?),
                }
            }
            _ => return Err(Error::Config(format!("unknown training key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.max_tokens < 2 {
            return Err(Error::Config(
                "epochs and batch_size must be positive, max_tokens at least 2".into(),
            ));
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning_rate and weight_decay must be non-negative".into()));
        }
        if self.max_steps == Some(0) {
            return Err(Error::Config("max_steps must be positive".into()));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Parses a flat `key = value` file. Blank lines and `#` comments are skipped;
/// the returned pairs are in file order.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("config line {}: expected key = value", i + 1))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

/// Trains `adapter` on `data` with the base held constant.
pub fn train_stage(
    weights: &ModelWeights<f32>,
    adapter: &mut Adapter<f32>,
    data: &[Encoded],
    cfg: &TrainConfig,
) -> Result<Vec<StepLog>> {
    train_stage_with(weights, adapter, data, cfg, |_, _| true)
}

/// [`train_stage`] with a hook after every optimizer step. Training stops
/// early when the hook returns `false`.
pub fn train_stage_with<F>(
    weights: &ModelWeights<f32>,
    adapter: &mut Adapter<f32>,
    data: &[Encoded],
    cfg: &TrainConfig,
    mut on_step: F,
) -> Result<Vec<StepLog>>
where
    F: FnMut(&StepLog, &Adapter<f32>) -> bool,
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let limit = cfg.max_tokens.min(weights.config.max_seq_len + 1);
    if let Some(e) = data.iter().find(|e| e.tokens.len() > limit) {
        return Err(Error::Length { len: e.tokens.len(), max: limit });
    }
    weights.check_shapes()?;
    adapter.check_compatible(&weights.config)?;

    let names: Vec<String> = adapter.named_tensors().into_iter().map(|(n, _)| n).collect();
    let mut opt = AdamW::new(cfg.adamw());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| log.len() >= m) {
                return Ok(log);
            }
            let step = log.len();
            let items: Vec<&Encoded> = chunk.iter().map(|&i| &data[i]).collect();
            let batch = Batch::from_encoded(&items)?;
            let mut g = Graph::new();
            let base = BaseVars::bind(&mut g, weights, false)?;
            let av = adapter.bind(&mut g, true);
            let loss = batch_loss(&mut g, weights, &base, Some(&av), &batch)?;
            let value = g.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            let grads = g.backward(loss)?;
            let mut gm = GradMap::new();
            for (name, v) in names.iter().zip(av.vars()) {
                let grad = grads
                    .get(v)
                    .ok_or_else(|| Error::Usage(format!("no gradient reached {name}")))?;
                gm.accumulate(name, grad)?;
            }
            opt.step(adapter.named_tensors_mut(), &gm)?;
            log.push(StepLog { step, epoch, loss: value });
            if !on_step(&log[step], adapter) {
                return Ok(log);
            }
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_published_settings() {
        let p = TrainConfig::defaults(AdapterKind::Prefix, Stage::Task, EpochPreset::Necessity);
        assert_eq!((p.learning_rate, p.weight_decay, p.epochs), (0.009, 0.02, 5));
        let l = TrainConfig::defaults(AdapterKind::Lora, Stage::Task, EpochPreset::Generation);
        assert_eq!((l.learning_rate, l.weight_decay, l.epochs), (0.0003, 0.01, 10));
        assert_eq!((l.batch_size, l.max_tokens), (64, 2048));
        assert_eq!(l.clone().desk().batch_size, 8);
    }

    #[test]
    fn key_value_file_overrides_and_rejects_unknown_keys() {
        let mut c = TrainConfig::defaults(AdapterKind::Lora, Stage::Task, EpochPreset::Generation);
        for (k, v) in parse_kv("# desk run\nepochs = 2\nlearning_rate=0.001\n\nmax_steps = 7\n").unwrap() {
            c.set(&k, &v).unwrap();
        }
        assert_eq!((c.epochs, c.learning_rate, c.max_steps), (2, 0.001, Some(7)));
        assert!(matches!(c.set("momentum", "0.9"), Err(Error::Config(_))));
        assert!(parse_kv("epochs 3").is_err());
        c.epochs = 0;
        assert!(c.validate().is_err());
    }
}
