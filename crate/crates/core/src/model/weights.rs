use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::numerics::{Float, Tensor};
use crate::peft::format::{FileKind, TensorFile};

pub const INIT_STD: f64 = 0.02;
/// The config travels in the name of a placeholder scalar tensor.
const CONFIG_PREFIX: &str = "meta.config:";

/// Attention projection matrices, the LoRA target set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Proj {
    Q,
    K,
    V,
    O,
}

impl Proj {
    pub const ALL: [Proj; 4] = [Proj::Q, Proj::K, Proj::V, Proj::O];

    pub fn name(self) -> &'static str {
        match self {
            Proj::Q => "wq",
            Proj::K => "wk",
            Proj::V => "wv",
            Proj::O => "wo",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "q" | "wq" => Ok(Proj::Q),
            "k" | "wk" => Ok(Proj::K),
            "v" | "wv" => Ok(Proj::V),
            "o" | "wo" => Ok(Proj::O),
            other => Err(Error::Config(format!("unknown projection {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<T: Float = f32> {
    pub attention_norm: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ffn_norm: Tensor<T>,
    pub w1: Tensor<T>,
    pub w2: Tensor<T>,
    pub w3: Tensor<T>,
}

impl<T: Float> LayerWeights<T> {
    pub fn proj(&self, p: Proj) -> &Tensor<T> {
        match p {
            Proj::Q => &self.wq,
            Proj::K => &self.wk,
            Proj::V => &self.wv,
            Proj::O => &self.wo,
        }
    }

    pub fn proj_mut(&mut self, p: Proj) -> &mut Tensor<T> {
        match p {
            Proj::Q => &mut self.wq,
            Proj::K => &mut self.wk,
            Proj::V => &mut self.wv,
            Proj::O => &mut self.wo,
        }
    }

    fn fields(&self) -> [(&'static str, &Tensor<T>); 9] {
        [
            ("attention_norm", &self.attention_norm),
            ("attention.wq", &self.wq),
            ("attention.wk", &self.wk),
            ("attention.wv", &self.wv),
            ("attention.wo", &self.wo),
            ("ffn_norm", &self.ffn_norm),
            ("feed_forward.w1", &self.w1),
            ("feed_forward.w2", &self.w2),
            ("feed_forward.w3", &self.w3),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 9] {
        [
            ("attention_norm", &mut self.attention_norm),
            ("attention.wq", &mut self.wq),
            ("attention.wk", &mut self.wk),
            ("attention.wv", &mut self.wv),
            ("attention.wo", &mut self.wo),
            ("ffn_norm", &mut self.ffn_norm),
            ("feed_forward.w1", &mut self.w1),
            ("feed_forward.w2", &mut self.w2),
            ("feed_forward.w3", &mut self.w3),
        ]
    }
}

/// Base-model parameters. Matrices are stored `[in × out]` and applied as
/// `x · W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<T: Float = f32> {
    pub config: ModelConfig,
    pub tok_embeddings: Tensor<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub norm: Tensor<T>,
    pub output: Tensor<T>,
    /// A frozen model refuses to bind its tensors as trainable.
    pub frozen: bool,
}

impl<T: Float> ModelWeights<T> {
    /// Seeded init: normal(0, 0.02) matrices, unit norm weights. Frozen.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::init_with_std(config, seed, INIT_STD)
    }

    /// [`ModelWeights::init`] with another matrix std.
    pub fn init_with_std(config: &ModelConfig, seed: u64, std: f64) -> Result<Self> {
        config.validate()?;
        if !(std > 0.0) || !std.is_finite() {
            return Err(Error::Config(format!("init std must be positive, got {std}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, f) = (config.dim, config.ffn_hidden);
        let tok_embeddings = Tensor::normal(&[config.vocab_size, c], std, &mut rng);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                attention_norm: Tensor::ones(&[c]),
                wq: Tensor::normal(&[c, c], std, &mut rng),
                wk: Tensor::normal(&[c, c], std, &mut rng),
                wv: Tensor::normal(&[c, c], std, &mut rng),
                wo: Tensor::normal(&[c, c], std, &mut rng),
                ffn_norm: Tensor::ones(&[c]),
                w1: Tensor::normal(&[c, f], std, &mut rng),
                w2: Tensor::normal(&[f, c], std, &mut rng),
                w3: Tensor::normal(&[c, f], std, &mut rng),
            })
            .collect();
        Ok(ModelWeights {
            config: config.clone(),
            tok_embeddings,
            layers,
            norm: Tensor::ones(&[c]),
            output: Tensor::normal(&[c, config.vocab_size], std, &mut rng),
            frozen: true,
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("tok_embeddings".to_string(), &self.tok_embeddings)];
        for (i, l) in self.layers.iter().enumerate() {
            for (n, t) in l.fields() {
                out.push((format!("layers.{i}.{n}"), t));
            }
        }
        out.push(("norm".into(), &self.norm));
        out.push(("output".into(), &self.output));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![("tok_embeddings".to_string(), &mut self.tok_embeddings)];
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (n, t) in l.fields_mut() {
                out.push((format!("layers.{i}.{n}"), t));
            }
        }
        out.push(("norm".into(), &mut self.norm));
        out.push(("output".into(), &mut self.output));
        out
    }

    /// Unfreezes (or freezes) the model and marks every tensor accordingly.
    pub fn set_trainable(&mut self, trainable: bool) {
        self.frozen = !trainable;
        for (_, t) in self.named_tensors_mut() {
            *t = std::mem::replace(t, Tensor::scalar(T::zero())).with_requires_grad(trainable);
        }
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Checks every tensor against the shapes `config` implies.
    pub fn check_shapes(&self) -> Result<()> {
        let cfg = &self.config;
        let (c, f, v) = (cfg.dim, cfg.ffn_hidden, cfg.vocab_size);
        if self.layers.len() != cfg.n_layers {
            return Err(Error::Compatibility(format!(
                "{} layers for a {}-layer config",
                self.layers.len(),
                cfg.n_layers
            )));
        }
        for (name, t) in self.named_tensors() {
            let want: Vec<usize> = match name.rsplit('.').next().unwrap_or("") {
                "tok_embeddings" => vec![v, c],
                "output" => vec![c, v],
                "norm" | "attention_norm" | "ffn_norm" => vec![c],
                "wq" | "wk" | "wv" | "wo" => vec![c, c],
                "w1" | "w3" => vec![c, f],
                "w2" => vec![f, c],
                _ => unreachable!("unexpected tensor {name}"),
            };
            if t.shape() != want.as_slice() {
                return Err(Error::Compatibility(format!(
                    "{name}: shape {:?}, config implies {want:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Per-tensor SHA-256 of the raw little-endian bits.
    pub fn tensor_digests(&self) -> BTreeMap<String, String> {
        self.named_tensors()
            .into_iter()
            .map(|(name, t)| (name, tensor_digest(t)))
            .collect()
    }

    pub fn cast<U: Float>(&self) -> ModelWeights<U> {
        ModelWeights {
            config: self.config.clone(),
            tok_embeddings: self.tok_embeddings.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    attention_norm: l.attention_norm.cast(),
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    ffn_norm: l.ffn_norm.cast(),
                    w1: l.w1.cast(),
                    w2: l.w2.cast(),
                    w3: l.w3.cast(),
                })
                .collect(),
            norm: self.norm.cast(),
            output: self.output.cast(),
            frozen: self.frozen,
        }
    }
}

fn tensor_digest<T: Float>(t: &Tensor<T>) -> String {
    let mut h = Sha256::new();
    for d in t.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    for v in t.data() {
        h.update(v.as_f64().to_bits().to_le_bytes());
    }
    hex::encode(h.finalize())
}

impl ModelWeights<f32> {
    pub fn to_file(&self) -> TensorFile {
        let mut tensors = vec![(
            format!("{CONFIG_PREFIX}{}", self.config.canonical()),
            Tensor::scalar(0.0f32),
        )];
        tensors.extend(
            self.named_tensors()
                .into_iter()
                .map(|(n, t)| (n, t.clone().with_requires_grad(false))),
        );
        TensorFile {
            kind: FileKind::BaseModel,
            config_digest: self.config.digest(),
            tensors,
        }
    }

    pub fn from_file(file: TensorFile) -> Result<Self> {
        if file.kind != FileKind::BaseModel {
            return Err(Error::Format(format!(
                "expected a base-model checkpoint, found a {} file",
                file.kind.name()
            )));
        }
        let mut map: BTreeMap<String, Tensor<f32>> = file.tensors.into_iter().collect();
        let record = map
            .keys()
            .find(|k| k.starts_with(CONFIG_PREFIX))
            .cloned()
            .ok_or_else(|| Error::Format("checkpoint has no config record".into()))?;
        map.remove(&record);
        let config = ModelConfig::parse_canonical(&record[CONFIG_PREFIX.len()..])?;
        config.validate()?;
        if config.digest() != file.config_digest {
            return Err(Error::Compatibility(
                "checkpoint config record does not match its digest".into(),
            ));
        }
        let mut take = |name: String| {
            map.remove(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing {name}")))
        };
        let tok_embeddings = take("tok_embeddings".into())?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let mut t = |n: &str| take(format!("layers.{i}.{n}"));
            layers.push(LayerWeights {
                attention_norm: t("attention_norm")?,
                wq: t("attention.wq")?,
                wk: t("attention.wk")?,
                wv: t("attention.wv")?,
                wo: t("attention.wo")?,
                ffn_norm: t("ffn_norm")?,
                w1: t("feed_forward.w1")?,
                w2: t("feed_forward.w2")?,
                w3: t("feed_forward.w3")?,
            });
        }
        let norm = take("norm".into())?;
        let output = take("output".into())?;
        if let Some(extra) = map.keys().next() {
            return Err(Error::Format(format!("unexpected tensor {extra} in checkpoint")));
        }
        let w = ModelWeights {
            config,
            tok_embeddings,
            layers,
            norm,
            output,
            frozen: true,
        };
        w.check_shapes()?;
        Ok(w)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_file().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file(TensorFile::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            dim: 8,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 16,
            ffn_hidden: 12,
            rope_base: 10000.0,
            norm_eps: 1e-5,
        }
    }

    #[test]
    fn init_is_seed_deterministic_and_shaped() {
        let a = ModelWeights::<f32>::init(&tiny(), 3).unwrap();
        let b = ModelWeights::<f32>::init(&tiny(), 3).unwrap();
        let c = ModelWeights::<f32>::init(&tiny(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.tok_embeddings, c.tok_embeddings);
        a.check_shapes().unwrap();
        assert!(a.frozen);
        assert!(a.layers[0].attention_norm.data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let w = ModelWeights::<f32>::init(&tiny(), 9).unwrap();
        let bytes = w.to_file().to_bytes().unwrap();
        let back = ModelWeights::from_file(TensorFile::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.to_file().to_bytes().unwrap(), bytes);
    }

    #[test]
    fn adapter_file_is_not_a_checkpoint() {
        let mut f = ModelWeights::<f32>::init(&tiny(), 9).unwrap().to_file();
        f.kind = FileKind::Lora;
        assert!(matches!(ModelWeights::from_file(f), Err(Error::Format(_))));
    }

    #[test]
    fn digests_change_with_any_element() {
        let mut w = ModelWeights::<f32>::init(&tiny(), 1).unwrap();
        let before = w.tensor_digests();
        w.layers[1].w2.data_mut()[5] += 1e-7;
        let after = w.tensor_digests();
        let changed: Vec<_> = before
            .iter()
            .filter(|(k, v)| after[*k] != **v)
            .map(|(k, _)| k.clone())
            .collect();
        assert_eq!(changed, vec!["layers.1.feed_forward.w2".to_string()]);
    }
}
