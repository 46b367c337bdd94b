//! Exact toy-scale decoder arithmetic and analytic FLOP counts.

pub mod flops;
pub mod matrix;
pub mod model;
pub mod ops;
pub mod verify;

pub use flops::{decode_attention_flops, decode_layer_flops, flop_count, OpKind};
pub use matrix::{ActivationMatrix, Matrix};
pub use model::{DecoderWeights, LayerWeights, ModelConfig};
pub use ops::{
    assemble_context, attention_step, decode_step, embed, embed_at, prefill, project_ffn, qkv_generate,
    recompute_kv_from_activation, token_recompute_kv, ContextSource, ForwardTrace, KvPair, Scaling, StepOutput,
};
