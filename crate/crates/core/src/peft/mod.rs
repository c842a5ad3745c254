//! Parameter-efficient adapters, their accounting and the plug-in file format.

pub mod accounting;
pub mod format;
pub mod lora;
pub mod prefix;

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Proj};
use crate::numerics::{Float, Graph, Tensor, Var};
use format::{FileKind, TensorFile};

pub use accounting::{account, analytic_count, paper_scale_table, Accounting};
pub use lora::{lora_apply, lora_merge, LoraAdapter, LoraConfig, LoraEntry};
pub use prefix::{gated_attention, GateMode, PrefixAdapter, PrefixConfig, PrefixSegment};

const LORA_META: &str = "meta.lora:";
const PREFIX_META: &str = "meta.prefix:";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdapterKind {
    Lora,
    Prefix,
}

impl AdapterKind {
    pub fn name(self) -> &'static str {
        match self {
            AdapterKind::Lora => "lora",
            AdapterKind::Prefix => "prefix",
        }
    }
}

/// Hyperparameters of either adapter kind.
#[derive(Clone, Debug, PartialEq)]
pub enum AdapterHyper {
    Lora(LoraConfig),
    Prefix(PrefixConfig),
}

impl AdapterHyper {
    pub fn kind(&self) -> AdapterKind {
        match self {
            AdapterHyper::Lora(_) => AdapterKind::Lora,
            AdapterHyper::Prefix(_) => AdapterKind::Prefix,
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        match self {
            AdapterHyper::Lora(c) => c.validate(model),
            AdapterHyper::Prefix(c) => c.validate(model),
        }
    }

    /// One-line `key=value` rendering, also used as the file's metadata record.
    pub fn describe(&self) -> String {
        match self {
            AdapterHyper::Lora(c) => {
                let targets: Vec<_> = c.targets.iter().map(|p| p.name()).collect();
                format!("rank={};alpha={};targets={}", c.rank, c.alpha, targets.join(","))
            }
            AdapterHyper::Prefix(c) => format!(
                "prompt_len={};layers={};gate_mode={};rotate_keys={}",
                c.prompt_len,
                c.layers,
                match c.gate_mode {
                    GateMode::PerHead => "per-head",
                    GateMode::PerLayer => "per-layer",
                },
                c.rotate_keys
            ),
        }
    }

    /// Hyperparameters recorded in an adapter file. Nothing is checked
    /// against a model.
    pub fn from_file(file: &TensorFile) -> Result<Self> {
        let (kind, meta) = match file.kind {
            FileKind::Lora => (AdapterKind::Lora, LORA_META),
            FileKind::Prefix => (AdapterKind::Prefix, PREFIX_META),
            FileKind::BaseModel => {
                return Err(Error::Format(
                    "expected an adapter file, found a base-model checkpoint".into(),
                ))
            }
        };
        match file.tensors.first() {
            Some((name, _)) if name.starts_with(meta) => AdapterHyper::parse(kind, &name[meta.len()..]),
            _ => Err(Error::Format("adapter file has no metadata record".into())),
        }
    }

    fn parse(kind: AdapterKind, record: &str) -> Result<Self> {
        let bad = |m: String| Error::Format(format!("adapter metadata: {m}"));
        let mut fields = std::collections::BTreeMap::new();
        for item in record.split(';') {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| bad(format!("malformed item {item:?}")))?;
            fields.insert(k, v);
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| bad(format!("missing {k}")));
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| bad(format!("bad {k}")))
        };
        match kind {
            AdapterKind::Lora => {
                let targets = get("targets")?
                    .split(',')
                    .map(Proj::parse)
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| bad(e.to_string()))?;
                Ok(AdapterHyper::Lora(LoraConfig {
                    rank: num("rank")?,
                    alpha: get("alpha")?.parse().map_err(|_| bad("bad alpha".into()))?,
                    targets,
                }))
            }
            AdapterKind::Prefix => Ok(AdapterHyper::Prefix(PrefixConfig {
                prompt_len: num("prompt_len")?,
                layers: num("layers")?,
                gate_mode: match get("gate_mode")? {
                    "per-head" => GateMode::PerHead,
                    "per-layer" => GateMode::PerLayer,
                    other => return Err(bad(format!("unknown gate mode {other}"))),
                },
                rotate_keys: get("rotate_keys")?
                    .parse()
                    .map_err(|_| bad("bad rotate_keys".into()))?,
            })),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Adapter<T: Float = f32> {
    Lora(LoraAdapter<T>),
    Prefix(PrefixAdapter<T>),
}

impl<T: Float> Adapter<T> {
    /// Fresh adapter whose attached model reproduces the base model exactly.
    pub fn init(hyper: &AdapterHyper, model: &ModelConfig, seed: u64) -> Result<Self> {
        match hyper {
            AdapterHyper::Lora(c) => Ok(Adapter::Lora(LoraAdapter::init(model, c.clone(), seed)?)),
            AdapterHyper::Prefix(c) => {
                Ok(Adapter::Prefix(PrefixAdapter::init(model, c.clone(), seed)?))
            }
        }
    }

    pub fn kind(&self) -> AdapterKind {
        match self {
            Adapter::Lora(_) => AdapterKind::Lora,
            Adapter::Prefix(_) => AdapterKind::Prefix,
        }
    }

    pub fn hyper(&self) -> AdapterHyper {
        match self {
            Adapter::Lora(a) => AdapterHyper::Lora(a.config.clone()),
            Adapter::Prefix(a) => AdapterHyper::Prefix(a.config.clone()),
        }
    }

    pub fn config_digest(&self) -> [u8; 32] {
        match self {
            Adapter::Lora(a) => a.config_digest,
            Adapter::Prefix(a) => a.config_digest,
        }
    }

    /// Fails unless the adapter was built against `model` and its tensors fit it.
    pub fn check_compatible(&self, model: &ModelConfig) -> Result<()> {
        if self.config_digest() != model.digest() {
            return Err(Error::Compatibility(format!(
                "{} adapter was built for a different model config",
                self.kind().name()
            )));
        }
        let c = model.dim;
        match self {
            Adapter::Lora(a) => {
                for e in &a.entries {
                    let r = a.config.rank;
                    if e.layer >= model.n_layers
                        || e.down.shape() != [c, r]
                        || e.up.shape() != [r, c]
                    {
                        return Err(Error::Compatibility(format!(
                            "LoRA entry for layer {} {} does not fit the model",
                            e.layer,
                            e.proj.name()
                        )));
                    }
                }
            }
            Adapter::Prefix(a) => {
                let g = a.config.gates_per_layer(model);
                let ok = a.n_layers == model.n_layers
                    && a.n_heads == model.n_heads
                    && a.prompts.len() == a.config.layers
                    && a.prompts.iter().all(|p| p.shape() == [a.config.prompt_len, c])
                    && a.gates.iter().all(|t| t.shape() == [g]);
                if !ok {
                    return Err(Error::Compatibility(
                        "prefix adapter tensors do not fit the model".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        match self {
            Adapter::Lora(a) => a
                .entries
                .iter()
                .flat_map(|e| {
                    let (d, u) = e.names();
                    [(d, &e.down), (u, &e.up)]
                })
                .collect(),
            Adapter::Prefix(a) => a
                .names()
                .zip(a.prompts.iter().zip(&a.gates))
                .flat_map(|((pn, gn), (p, g))| [(pn, p), (gn, g)])
                .collect(),
        }
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        match self {
            Adapter::Lora(a) => a
                .entries
                .iter_mut()
                .flat_map(|e| {
                    let (d, u) = e.names();
                    [(d, &mut e.down), (u, &mut e.up)]
                })
                .collect(),
            Adapter::Prefix(a) => {
                let names: Vec<_> = a.names().collect();
                names
                    .into_iter()
                    .zip(a.prompts.iter_mut().zip(a.gates.iter_mut()))
                    .flat_map(|((pn, gn), (p, g))| [(pn, p), (gn, g)])
                    .collect()
            }
        }
    }

    /// Number of trainable scalars; metadata records are not counted.
    pub fn count_trainable(&self) -> usize {
        match self {
            Adapter::Lora(a) => a.count_trainable(),
            Adapter::Prefix(a) => a.count_trainable(),
        }
    }

    /// Places the adapter tensors on the tape, as gradient-tracking leaves
    /// when `trainable`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> AdapterVars<T> {
        let mut leaf = |t: &Tensor<T>| {
            if trainable {
                g.param(t)
            } else {
                g.constant(t.clone())
            }
        };
        match self {
            Adapter::Lora(a) => AdapterVars::Lora {
                scale: a.scale(),
                entries: a
                    .entries
                    .iter()
                    .map(|e| (e.layer, e.proj, leaf(&e.down), leaf(&e.up)))
                    .collect(),
            },
            Adapter::Prefix(a) => AdapterVars::Prefix {
                first_layer: a.first_layer(),
                prompts: a.prompts.iter().map(&mut leaf).collect(),
                gates: a.gates.iter().map(&mut leaf).collect(),
                gate_mode: a.config.gate_mode,
                rotate_keys: a.config.rotate_keys,
            },
        }
    }

    pub fn cast<U: Float>(&self) -> Adapter<U> {
        match self {
            Adapter::Lora(a) => Adapter::Lora(LoraAdapter {
                config: a.config.clone(),
                config_digest: a.config_digest,
                entries: a
                    .entries
                    .iter()
                    .map(|e| LoraEntry {
                        layer: e.layer,
                        proj: e.proj,
                        down: e.down.cast(),
                        up: e.up.cast(),
                    })
                    .collect(),
            }),
            Adapter::Prefix(a) => Adapter::Prefix(PrefixAdapter {
                config: a.config.clone(),
                config_digest: a.config_digest,
                n_layers: a.n_layers,
                n_heads: a.n_heads,
                prompts: a.prompts.iter().map(|t| t.cast()).collect(),
                gates: a.gates.iter().map(|t| t.cast()).collect(),
            }),
        }
    }
}

/// Adapter tensors placed on a tape.
#[derive(Clone, Debug)]
pub enum AdapterVars<T: Float> {
    Lora {
        scale: T,
        entries: Vec<(usize, Proj, Var, Var)>,
    },
    Prefix {
        first_layer: usize,
        prompts: Vec<Var>,
        gates: Vec<Var>,
        gate_mode: GateMode,
        rotate_keys: bool,
    },
}

impl<T: Float> AdapterVars<T> {
    pub(crate) fn lora(&self, layer: usize, proj: Proj) -> Option<(Var, Var, T)> {
        match self {
            AdapterVars::Lora { scale, entries } => entries
                .iter()
                .find(|(l, p, _, _)| *l == layer && *p == proj)
                .map(|&(_, _, d, u)| (d, u, *scale)),
            AdapterVars::Prefix { .. } => None,
        }
    }

    /// Vars in the same order as [`Adapter::named_tensors`].
    pub fn vars(&self) -> Vec<Var> {
        match self {
            AdapterVars::Lora { entries, .. } => {
                entries.iter().flat_map(|&(_, _, d, u)| [d, u]).collect()
            }
            AdapterVars::Prefix { prompts, gates, .. } => prompts
                .iter()
                .zip(gates)
                .flat_map(|(&p, &g)| [p, g])
                .collect(),
        }
    }
}

impl Adapter<f32> {
    pub fn to_file(&self) -> TensorFile {
        let (kind, meta) = match self {
            Adapter::Lora(_) => (FileKind::Lora, LORA_META),
            Adapter::Prefix(_) => (FileKind::Prefix, PREFIX_META),
        };
        let mut tensors = vec![(
            format!("{meta}{}", self.hyper().describe()),
            Tensor::scalar(0.0f32),
        )];
        tensors.extend(
            self.named_tensors()
                .into_iter()
                .map(|(n, t)| (n, t.clone().with_requires_grad(false))),
        );
        TensorFile {
            kind,
            config_digest: self.config_digest(),
            tensors,
        }
    }

    /// Rebuilds an adapter and checks it against `model`.
    pub fn from_file(file: TensorFile, model: &ModelConfig) -> Result<Self> {
        let hyper = AdapterHyper::from_file(&file)?;
        let tensors = file.tensors.into_iter().skip(1);
        if file.config_digest != model.digest() {
            return Err(Error::Compatibility(format!(
                "adapter config digest {} does not match model config {}",
                hex::encode(file.config_digest),
                model.digest_hex()
            )));
        }
        hyper
            .validate(model)
            .map_err(|e| Error::Compatibility(e.to_string()))?;
        // A seed-0 skeleton fixes names and order; its tensors are then replaced.
        let mut adapter = Adapter::<f32>::init(&hyper, model, 0)?;
        {
            let mut slots = adapter.named_tensors_mut();
            let loaded: Vec<_> = tensors.collect();
            if loaded.len() != slots.len() {
                return Err(Error::Format(format!(
                    "adapter file holds {} tensors, expected {}",
                    loaded.len(),
                    slots.len()
                )));
            }
            for ((want, slot), (name, t)) in slots.iter_mut().zip(loaded) {
                if *want != name {
                    return Err(Error::Format(format!("expected tensor {want}, found {name}")));
                }
                if t.shape() != slot.shape() {
                    return Err(Error::Compatibility(format!(
                        "{name}: shape {:?}, expected {:?}",
                        t.shape(),
                        slot.shape()
                    )));
                }
                **slot = t.with_requires_grad(true);
            }
        }
        adapter.check_compatible(model)?;
        Ok(adapter)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_file().write(path)
    }

    pub fn load(path: &Path, model: &ModelConfig) -> Result<Self> {
        Self::from_file(TensorFile::read(path)?, model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig { n_layers: 2, vocab_size: 300, ..ModelConfig::toy() }
    }

    fn hypers() -> [AdapterHyper; 2] {
        [
            AdapterHyper::Lora(LoraConfig { rank: 4, alpha: 8.0, targets: vec![Proj::Q, Proj::V, Proj::O] }),
            AdapterHyper::Prefix(PrefixConfig { prompt_len: 3, layers: 2, ..Default::default() }),
        ]
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        for h in hypers() {
            let a = Adapter::<f32>::init(&h, &cfg(), 11).unwrap();
            let bytes = a.to_file().to_bytes().unwrap();
            let back = Adapter::from_file(TensorFile::from_bytes(&bytes).unwrap(), &cfg()).unwrap();
            assert_eq!(back, a);
            assert_eq!(back.to_file().to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn mismatched_config_digest_is_a_compatibility_error() {
        let other = ModelConfig { ffn_hidden: 100, ..cfg() };
        for h in hypers() {
            let f = Adapter::<f32>::init(&h, &cfg(), 1).unwrap().to_file();
            assert!(matches!(Adapter::from_file(f, &other), Err(Error::Compatibility(_))));
        }
    }

    #[test]
    fn seeds_change_lora_down_only() {
        let h = &hypers()[0];
        let a = Adapter::<f32>::init(h, &cfg(), 1).unwrap();
        let b = Adapter::<f32>::init(h, &cfg(), 1).unwrap();
        let c = Adapter::<f32>::init(h, &cfg(), 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn checkpoint_file_is_not_an_adapter() {
        let w = crate::model::ModelWeights::<f32>::init(&cfg(), 1).unwrap();
        assert!(matches!(Adapter::from_file(w.to_file(), &cfg()), Err(Error::Format(_))));
    }

    #[test]
    fn hyper_metadata_round_trips() {
        for h in hypers() {
            assert_eq!(AdapterHyper::parse(h.kind(), &h.describe()).unwrap(), h);
        }
    }
}
