//! Zero-init attention prefix-tuning.
//!
//! `K` learnable prompt vectors are inserted as extra keys/values in each of
//! the topmost `L` layers. Scores against the prompts and against the
//! ordinary tokens are softmaxed separately; the prompt segment is then
//! multiplied by a learnable gate that starts at zero, so a fresh adapter
//! leaves the base model's output unchanged. Each attention row therefore
//! carries mass `1 + g`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::{Float, Graph, Mask, Tensor, Var};

const PROMPT_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    /// One gate per head in each prefixed layer.
    PerHead,
    /// One scalar gate per prefixed layer, shared by all heads.
    PerLayer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrefixConfig {
    /// Number of prompt vectors `K`.
    pub prompt_len: usize,
    /// Number of topmost layers `L` that receive prompts.
    pub layers: usize,
    pub gate_mode: GateMode,
    /// Rotate prompt keys as if they sat at positions `-K..-1`. Off by default:
    /// prompts are free vectors, not positioned tokens.
    pub rotate_keys: bool,
}

impl Default for PrefixConfig {
    fn default() -> Self {
        PrefixConfig {
            prompt_len: 10,
            layers: 30,
            gate_mode: GateMode::PerHead,
            rotate_keys: false,
        }
    }
}

impl PrefixConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.prompt_len == 0 {
            return Err(Error::Config("prefix length must be at least 1".into()));
        }
        if self.layers == 0 || self.layers > model.n_layers {
            return Err(Error::Config(format!(
                "prefix layers {} must be within 1..={}",
                self.layers, model.n_layers
            )));
        }
        Ok(())
    }

    pub fn gates_per_layer(&self, model: &ModelConfig) -> usize {
        match self.gate_mode {
            GateMode::PerHead => model.n_heads,
            GateMode::PerLayer => 1,
        }
    }

    /// `L·K·C` prompt scalars plus the gates.
    pub fn count_trainable(&self, model: &ModelConfig) -> usize {
        self.layers * self.prompt_len * model.dim + self.layers * self.gates_per_layer(model)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrefixAdapter<T: Float = f32> {
    pub config: PrefixConfig,
    pub config_digest: [u8; 32],
    pub n_layers: usize,
    pub n_heads: usize,
    /// `prompts[i]` is `[K × C]` for layer `first_layer() + i`.
    pub prompts: Vec<Tensor<T>>,
    pub gates: Vec<Tensor<T>>,
}

impl<T: Float> PrefixAdapter<T> {
    pub fn init(model: &ModelConfig, config: PrefixConfig, seed: u64) -> Result<Self> {
        model.validate()?;
        config.validate(model)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prompts = (0..config.layers)
            .map(|_| {
                Tensor::normal(&[config.prompt_len, model.dim], PROMPT_INIT_STD, &mut rng)
                    .with_requires_grad(true)
            })
            .collect();
        let gates = (0..config.layers)
            .map(|_| Tensor::zeros(&[config.gates_per_layer(model)]).with_requires_grad(true))
            .collect();
        Ok(PrefixAdapter {
            config_digest: model.digest(),
            n_layers: model.n_layers,
            n_heads: model.n_heads,
            config,
            prompts,
            gates,
        })
    }

    pub fn first_layer(&self) -> usize {
        self.n_layers - self.config.layers
    }

    pub fn gate_index(&self, head: usize) -> usize {
        match self.config.gate_mode {
            GateMode::PerHead => head,
            GateMode::PerLayer => 0,
        }
    }

    pub fn count_trainable(&self) -> usize {
        self.prompts.iter().chain(&self.gates).map(|t| t.numel()).sum()
    }

    pub(crate) fn names(&self) -> impl Iterator<Item = (String, String)> + '_ {
        (0..self.config.layers).map(move |i| {
            let layer = self.first_layer() + i;
            (
                format!("prefix.layers.{layer}.prompt"),
                format!("prefix.layers.{layer}.gate"),
            )
        })
    }
}

/// Prompt keys/values for one head plus that head's gate.
#[derive(Clone, Copy, Debug)]
pub struct PrefixSegment {
    pub keys: Var,
    pub values: Var,
    pub gate: Var,
    pub gate_index: usize,
}

/// Attention of queries `q` over `keys`/`values`, optionally preceded by a
/// gated prompt segment.
///
/// Without a prompt segment this is ordinary masked softmax attention. With
/// one, the prompt scores and the token scores are softmaxed independently,
/// the prompt weights are scaled by the gate, and the concatenated weight
/// row is applied to the concatenated values. Returns `(output, weights)`.
pub fn gated_attention<T: Float>(
    g: &mut Graph<T>,
    q: Var,
    keys: Var,
    values: Var,
    prefix: Option<PrefixSegment>,
    scale: T,
    mask: Mask,
) -> Result<(Var, Var)> {
    let raw = g.matmul_bt(q, keys)?;
    let scores = g.scale(raw, scale);
    let probs = g.softmax(scores, mask)?;
    match prefix {
        None => {
            let out = g.matmul(probs, values)?;
            Ok((out, probs))
        }
        Some(p) => {
            let raw = g.matmul_bt(q, p.keys)?;
            let prompt_scores = g.scale(raw, scale);
            let prompt_probs = g.softmax(prompt_scores, Mask::None)?;
            let gated = g.scale_by(prompt_probs, p.gate, p.gate_index)?;
            let weights = g.concat_cols(&[gated, probs])?;
            let all_values = g.concat_rows(&[p.values, values])?;
            let out = g.matmul(weights, all_values)?;
            Ok((out, weights))
        }
    }
}
