use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::weights::{ModelWeights, Proj};
use crate::error::{Error, Result};
use crate::numerics::{log_softmax_rows, Float, Graph, Mask, Tensor, Var};
use crate::peft::lora::lora_project;
use crate::peft::{gated_attention, Adapter, AdapterVars, GateMode, PrefixSegment};

/// Base tensors placed on a tape.
#[derive(Clone, Debug)]
pub struct BaseVars {
    tok_embeddings: Var,
    layers: Vec<[Var; 9]>,
    norm: Var,
    output: Var,
}

impl BaseVars {
    /// Binds every base tensor. `trainable` requires an unfrozen model.
    pub fn bind<T: Float>(g: &mut Graph<T>, w: &ModelWeights<T>, trainable: bool) -> Result<Self> {
        if trainable && w.frozen {
            return Err(Error::Usage("cannot train a frozen base model".into()));
        }
        let mut leaf = |t: &Tensor<T>| {
            if trainable {
                g.param(t)
            } else {
                g.constant(t.clone())
            }
        };
        Ok(BaseVars {
            tok_embeddings: leaf(&w.tok_embeddings),
            layers: w
                .layers
                .iter()
                .map(|l| {
                    [
                        leaf(&l.attention_norm),
                        leaf(&l.wq),
                        leaf(&l.wk),
                        leaf(&l.wv),
                        leaf(&l.wo),
                        leaf(&l.ffn_norm),
                        leaf(&l.w1),
                        leaf(&l.w2),
                        leaf(&l.w3),
                    ]
                })
                .collect(),
            norm: leaf(&w.norm),
            output: leaf(&w.output),
        })
    }

    /// Vars in the order of [`ModelWeights::named_tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.tok_embeddings];
        for l in &self.layers {
            out.extend_from_slice(l);
        }
        out.push(self.norm);
        out.push(self.output);
        out
    }
}

/// Attention weights of one head in one layer. With a prompt segment the
/// first `prefix_len` columns are the gated prompt weights.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadTrace<T: Float> {
    pub layer: usize,
    pub head: usize,
    pub weights: Tensor<T>,
    pub prefix_len: usize,
    pub gate: Option<T>,
}

fn check_tokens<T: Float>(w: &ModelWeights<T>, tokens: &[usize]) -> Result<()> {
    let cfg = &w.config;
    if tokens.is_empty() {
        return Err(Error::Validation("token sequence is empty".into()));
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(Error::Length {
            len: tokens.len(),
            max: cfg.max_seq_len,
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Validation(format!(
            "token id {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

/// Builds the logits `[M × vocab]` for `tokens` on `g`. Head traces are
/// collected when `trace` is given.
pub fn logits_on_graph<T: Float>(
    g: &mut Graph<T>,
    w: &ModelWeights<T>,
    base: &BaseVars,
    adapter: Option<&AdapterVars<T>>,
    tokens: &[usize],
    mut trace: Option<&mut Vec<HeadTrace<T>>>,
) -> Result<Var> {
    check_tokens(w, tokens)?;
    let cfg = &w.config;
    let hd = cfg.head_dim();
    let eps = T::from_f64_lossy(cfg.norm_eps);
    let scale = T::from_f64_lossy(1.0 / (hd as f64).sqrt());
    let positions: Vec<f64> = (0..tokens.len()).map(|p| p as f64).collect();
    let lora = |layer: usize, p: Proj| adapter.and_then(|a| a.lora(layer, p));

    let mut x = g.embedding(base.tok_embeddings, tokens)?;
    for (l, lv) in base.layers.iter().enumerate() {
        let [attn_norm, wq, wk, wv, wo, ffn_norm, w1, w2, w3] = *lv;
        let h = g.rmsnorm(x, attn_norm, eps)?;
        let q = lora_project(g, h, wq, lora(l, Proj::Q))?;
        let k = lora_project(g, h, wk, lora(l, Proj::K))?;
        let v = lora_project(g, h, wv, lora(l, Proj::V))?;
        let q = g.rope(q, hd, &positions, cfg.rope_base)?;
        let k = g.rope(k, hd, &positions, cfg.rope_base)?;

        let prompt = match adapter {
            Some(AdapterVars::Prefix {
                first_layer,
                prompts,
                gates,
                gate_mode,
                rotate_keys,
            }) if l >= *first_layer => {
                let i = l - first_layer;
                let p = prompts[i];
                let mut pk = g.matmul(p, wk)?;
                let pv = g.matmul(p, wv)?;
                if *rotate_keys {
                    let n = g.value(p).rows();
                    let pos: Vec<f64> = (0..n).map(|j| j as f64 - n as f64).collect();
                    pk = g.rope(pk, hd, &pos, cfg.rope_base)?;
                }
                Some((pk, pv, gates[i], *gate_mode))
            }
            _ => None,
        };

        let mut heads = Vec::with_capacity(cfg.n_heads);
        for head in 0..cfg.n_heads {
            let qh = g.slice_cols(q, head * hd, hd)?;
            let kh = g.slice_cols(k, head * hd, hd)?;
            let vh = g.slice_cols(v, head * hd, hd)?;
            let segment = match prompt {
                Some((pk, pv, gate, mode)) => Some(PrefixSegment {
                    keys: g.slice_cols(pk, head * hd, hd)?,
                    values: g.slice_cols(pv, head * hd, hd)?,
                    gate,
                    gate_index: match mode {
                        GateMode::PerHead => head,
                        GateMode::PerLayer => 0,
                    },
                }),
                None => None,
            };
            let (out, weights) =
                gated_attention(g, qh, kh, vh, segment, scale, Mask::Causal { offset: 0 })?;
            if let Some(t) = trace.as_deref_mut() {
                t.push(HeadTrace {
                    layer: l,
                    head,
                    weights: g.value(weights).clone(),
                    prefix_len: segment.map_or(0, |s| g.value(s.keys).rows()),
                    gate: segment.map(|s| g.value(s.gate).data()[s.gate_index]),
                });
            }
            heads.push(out);
        }
        let attn = g.concat_cols(&heads)?;
        let o = lora_project(g, attn, wo, lora(l, Proj::O))?;
        x = g.add(x, o)?;

        let h = g.rmsnorm(x, ffn_norm, eps)?;
        let a = g.matmul(h, w1)?;
        let a = g.silu(a);
        let b = g.matmul(h, w3)?;
        let m = g.mul(a, b)?;
        let f = g.matmul(m, w2)?;
        x = g.add(x, f)?;
    }
    let x = g.rmsnorm(x, base.norm, eps)?;
    g.matmul(x, base.output)
}

fn run<T: Float>(
    w: &ModelWeights<T>,
    tokens: &[usize],
    adapter: Option<&Adapter<T>>,
    trace: Option<&mut Vec<HeadTrace<T>>>,
) -> Result<Tensor<T>> {
    w.check_shapes()?;
    if let Some(a) = adapter {
        a.check_compatible(&w.config)?;
    }
    let mut g = Graph::new();
    let base = BaseVars::bind(&mut g, w, false)?;
    let av = adapter.map(|a| a.bind(&mut g, false));
    let out = logits_on_graph(&mut g, w, &base, av.as_ref(), tokens, trace)?;
    Ok(g.value(out).clone())
}

/// Logits `[M × vocab]`; row `i` depends only on `tokens[..=i]`.
pub fn forward<T: Float>(
    w: &ModelWeights<T>,
    tokens: &[usize],
    adapter: Option<&Adapter<T>>,
) -> Result<Tensor<T>> {
    run(w, tokens, adapter, None)
}

/// Like [`forward`], also returning every head's attention weights.
pub fn forward_traced<T: Float>(
    w: &ModelWeights<T>,
    tokens: &[usize],
    adapter: Option<&Adapter<T>>,
) -> Result<(Tensor<T>, Vec<HeadTrace<T>>)> {
    let mut trace = Vec::new();
    let logits = run(w, tokens, adapter, Some(&mut trace))?;
    Ok((logits, trace))
}

/// Row-wise log-softmax of the logits.
pub fn token_logprobs<T: Float>(
    w: &ModelWeights<T>,
    tokens: &[usize],
    adapter: Option<&Adapter<T>>,
) -> Result<Tensor<T>> {
    Ok(log_softmax_rows(&forward(w, tokens, adapter)?))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Decoding {
    Greedy,
    Temperature { temperature: f64, seed: u64 },
}

/// Index of the largest value; the first one wins ties.
pub fn argmax<T: Float>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Appends up to `max_new` tokens to `prompt`, stopping after `eos`.
/// Returns only the new tokens.
pub fn generate<T: Float>(
    w: &ModelWeights<T>,
    prompt: &[usize],
    max_new: usize,
    adapter: Option<&Adapter<T>>,
    mode: Decoding,
    eos: Option<usize>,
) -> Result<Vec<usize>> {
    if max_new == 0 {
        return Err(Error::Usage("max_new must be at least 1".into()));
    }
    if prompt.is_empty() {
        return Err(Error::Validation("prompt is empty".into()));
    }
    let max = w.config.max_seq_len;
    if prompt.len() + max_new > max {
        return Err(Error::Length {
            len: prompt.len() + max_new,
            max,
        });
    }
    let mut rng = match mode {
        Decoding::Temperature { temperature, seed } => {
            if !(temperature > 0.0) || !temperature.is_finite() {
                return Err(Error::Config("temperature must be positive".into()));
            }
            Some(ChaCha8Rng::seed_from_u64(seed))
        }
        Decoding::Greedy => None,
    };
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..max_new {
        let logits = forward(w, &seq, adapter)?;
        let last = logits.row(logits.rows() - 1);
        let next = match (mode, rng.as_mut()) {
            (Decoding::Temperature { temperature, .. }, Some(rng)) => {
                let m = last[argmax(last)].as_f64();
                let weights: Vec<f64> = last
                    .iter()
                    .map(|v| ((v.as_f64() - m) / temperature).exp())
                    .collect();
                WeightedIndex::new(&weights)
                    .map_err(|e| Error::Validation(format!("sampling: {e}")))?
                    .sample(rng)
            }
            _ => argmax(last),
        };
        seq.push(next);
        out.push(next);
        if Some(next) == eos {
            break;
        }
    }
    Ok(out)
}
