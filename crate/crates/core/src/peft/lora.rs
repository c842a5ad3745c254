//! Low-rank adaptation: `W0 + (α/r)·W_down·W_up` on selected projections.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelWeights, Proj};
use crate::numerics::{matmul, Float, Graph, Tensor, Var};

const DOWN_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<Proj>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 16,
            alpha: 16.0,
            targets: vec![Proj::Q, Proj::V],
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        if self.rank > model.dim {
            return Err(Error::Config(format!(
                "LoRA rank {} exceeds min(d, k) = {}",
                self.rank, model.dim
            )));
        }
        if !self.alpha.is_finite() {
            return Err(Error::Config("LoRA alpha must be finite".into()));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("LoRA needs at least one target".into()));
        }
        let mut sorted = self.targets.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.targets.len() {
            return Err(Error::Config("duplicate LoRA target".into()));
        }
        Ok(())
    }

    /// `Σ_targets r·(d + k)`; every attention projection is `C × C`.
    pub fn count_trainable(&self, model: &ModelConfig) -> usize {
        model.n_layers * self.targets.len() * self.rank * (model.dim + model.dim)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraEntry<T: Float = f32> {
    pub layer: usize,
    pub proj: Proj,
    /// `[d × r]`
    pub down: Tensor<T>,
    /// `[r × k]`
    pub up: Tensor<T>,
}

impl<T: Float> LoraEntry<T> {
    pub fn rank(&self) -> usize {
        self.down.cols()
    }

    pub(crate) fn names(&self) -> (String, String) {
        let base = format!("lora.layers.{}.{}", self.layer, self.proj.name());
        (format!("{base}.down"), format!("{base}.up"))
    }

    fn check(&self, w0: &Tensor<T>) -> Result<()> {
        let (d, k) = (w0.shape()[0], w0.shape()[1]);
        let r = self.rank();
        if self.down.shape() != [d, r] || self.up.shape() != [r, k] {
            return Err(Error::Compatibility(format!(
                "LoRA factors {:?}·{:?} do not fit a {d}×{k} matrix",
                self.down.shape(),
                self.up.shape()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<T: Float = f32> {
    pub config: LoraConfig,
    pub config_digest: [u8; 32],
    pub entries: Vec<LoraEntry<T>>,
}

impl<T: Float> LoraAdapter<T> {
    /// `W_down ~ normal(0, 0.02)`, `W_up = 0`.
    pub fn init(model: &ModelConfig, config: LoraConfig, seed: u64) -> Result<Self> {
        model.validate()?;
        config.validate(model)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = model.dim;
        let mut entries = Vec::new();
        for layer in 0..model.n_layers {
            for &proj in &config.targets {
                entries.push(LoraEntry {
                    layer,
                    proj,
                    down: Tensor::normal(&[c, config.rank], DOWN_INIT_STD, &mut rng)
                        .with_requires_grad(true),
                    up: Tensor::zeros(&[config.rank, c]).with_requires_grad(true),
                });
            }
        }
        Ok(LoraAdapter {
            config,
            config_digest: model.digest(),
            entries,
        })
    }

    pub fn scale(&self) -> T {
        T::from_f64_lossy(self.config.scale())
    }

    pub fn entry(&self, layer: usize, proj: Proj) -> Option<&LoraEntry<T>> {
        self.entries
            .iter()
            .find(|e| e.layer == layer && e.proj == proj)
    }

    /// `(α/r)·W_down·W_up`.
    pub fn delta(&self, entry: &LoraEntry<T>) -> Result<Tensor<T>> {
        let mut d = matmul(&entry.down, &entry.up)?;
        let s = self.scale();
        d.data_mut().iter_mut().for_each(|v| *v = *v * s);
        Ok(d)
    }

    pub fn count_trainable(&self) -> usize {
        self.entries
            .iter()
            .map(|e| e.down.numel() + e.up.numel())
            .sum()
    }
}

/// `x·W0 + scale·(x·W_down)·W_up` on the tape.
pub(crate) fn lora_project<T: Float>(
    g: &mut Graph<T>,
    x: Var,
    w0: Var,
    lora: Option<(Var, Var, T)>,
) -> Result<Var> {
    let h = g.matmul(x, w0)?;
    match lora {
        None => Ok(h),
        Some((down, up, scale)) => {
            let low = g.matmul(x, down)?;
            let delta = g.matmul(low, up)?;
            let scaled = g.scale(delta, scale);
            g.add(h, scaled)
        }
    }
}

/// Adapted output of one linear map: `h + (α/r)·(x·W_down)·W_up` with `h = x·W0`.
pub fn lora_apply<T: Float>(
    w0: &Tensor<T>,
    x: &Tensor<T>,
    entry: &LoraEntry<T>,
    scale: T,
) -> Result<Tensor<T>> {
    if w0.shape().len() != 2 {
        return Err(Error::shape(format!("expected a matrix, got {:?}", w0.shape())));
    }
    entry.check(w0)?;
    let mut g = Graph::new();
    let (vx, vw) = (g.constant(x.clone()), g.constant(w0.clone()));
    let (vd, vu) = (g.constant(entry.down.clone()), g.constant(entry.up.clone()));
    let out = lora_project(&mut g, vx, vw, Some((vd, vu, scale)))?;
    Ok(g.value(out).clone())
}

/// Folds every adapter entry into its base matrix. Untargeted tensors are
/// copied bitwise; the result runs without an adapter.
pub fn lora_merge<T: Float>(
    weights: &ModelWeights<T>,
    adapter: &LoraAdapter<T>,
) -> Result<ModelWeights<T>> {
    if adapter.config_digest != weights.config.digest() {
        return Err(Error::Compatibility(
            "LoRA adapter was built for a different model config".into(),
        ));
    }
    let mut merged = weights.clone();
    for entry in &adapter.entries {
        let layer = merged.layers.get_mut(entry.layer).ok_or_else(|| {
            Error::Compatibility(format!("adapter targets missing layer {}", entry.layer))
        })?;
        let w = layer.proj_mut(entry.proj);
        entry.check(w)?;
        let delta = adapter.delta(entry)?;
        for (a, b) in w.data_mut().iter_mut().zip(delta.data()) {
            *a = *a + *b;
        }
    }
    Ok(merged)
}
