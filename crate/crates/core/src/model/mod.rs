//! LLaMA-style decoder: RMSNorm, rotary multi-head causal attention, SwiGLU.

mod config;
mod forward;
mod weights;

pub use config::ModelConfig;
pub use forward::{
    argmax, forward, forward_traced, generate, logits_on_graph, token_logprobs, BaseVars, Decoding,
    HeadTrace,
};
pub use weights::{LayerWeights, ModelWeights, Proj, INIT_STD};
