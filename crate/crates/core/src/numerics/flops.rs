use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::model::ModelConfig;
use crate::error::{Error, Result};

/// Operations with an analytic FLOP count. One multiply-add counts as two.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    /// K and V from activation checkpoints: two `d×d` products.
    KvGen,
    QkvGen,
    /// Causal attention among `n` tokens.
    Attention,
    ProjFfn,
    /// Layers `0..k` in full plus QKV generation at layer `k`.
    TokenRecomputeToLayerK,
    FullLayer,
}

impl OpKind {
    pub const ALL: [OpKind; 6] = [
        OpKind::KvGen,
        OpKind::QkvGen,
        OpKind::Attention,
        OpKind::ProjFfn,
        OpKind::TokenRecomputeToLayerK,
        OpKind::FullLayer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::KvGen => "kv_gen",
            OpKind::QkvGen => "qkv_gen",
            OpKind::Attention => "attention",
            OpKind::ProjFfn => "proj_ffn",
            OpKind::TokenRecomputeToLayerK => "token_recompute_to_layer_k",
            OpKind::FullLayer => "full_layer",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown op kind `{s}`")))
    }
}

/// FLOPs of `op` over `n_tokens` tokens; `k` is only read by
/// [`OpKind::TokenRecomputeToLayerK`].
pub fn flop_count(op: OpKind, config: &ModelConfig, n_tokens: u64, k: u64) -> u64 {
    let d = config.hidden_dim as u64;
    let f = config.ffn_dim as u64;
    let n = n_tokens;
    match op {
        OpKind::KvGen => 2 * 2 * n * d * d,
        OpKind::QkvGen => 2 * 3 * n * d * d,
        OpKind::Attention => 2 * d * n * (n + 1),
        OpKind::ProjFfn => 2 * n * (d * d + 2 * d * f),
        OpKind::FullLayer => {
            flop_count(OpKind::QkvGen, config, n, 0)
                + flop_count(OpKind::Attention, config, n, 0)
                + flop_count(OpKind::ProjFfn, config, n, 0)
        }
        OpKind::TokenRecomputeToLayerK => {
            k * flop_count(OpKind::FullLayer, config, n, 0) + flop_count(OpKind::QkvGen, config, n, 0)
        }
    }
}

/// FLOPs for one query token attending over `context` keys and values.
pub fn decode_attention_flops(config: &ModelConfig, context: u64) -> u64 {
    2 * 2 * config.hidden_dim as u64 * context
}

/// FLOPs of one generation step for a single token at one layer:
/// QKV for the new token, attention over `context + 1` entries, then
/// projection and FFN.
pub fn decode_layer_flops(config: &ModelConfig, context: u64) -> u64 {
    flop_count(OpKind::QkvGen, config, 1, 0)
        + decode_attention_flops(config, context + 1)
        + flop_count(OpKind::ProjFfn, config, 1, 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_gen_direct_formula() {
        let c = ModelConfig::new(1, 4096, 32, 8);
        assert_eq!(flop_count(OpKind::KvGen, &c, 1, 0), 67_108_864);
    }

    #[test]
    fn token_recompute_base_is_qkv() {
        let c = ModelConfig::new(4, 64, 4, 8);
        for n in [1, 7, 100] {
            assert_eq!(
                flop_count(OpKind::TokenRecomputeToLayerK, &c, n, 0),
                flop_count(OpKind::QkvGen, &c, n, 0)
            );
        }
    }

    #[test]
    fn full_layer_is_additive() {
        let c = ModelConfig::new(4, 96, 4, 8);
        for n in [0, 1, 5, 333] {
            let parts: u64 = [OpKind::QkvGen, OpKind::Attention, OpKind::ProjFfn]
                .iter()
                .map(|&k| flop_count(k, &c, n, 0))
                .sum();
            assert_eq!(flop_count(OpKind::FullLayer, &c, n, 0), parts);
        }
    }

    #[test]
    fn parse_names() {
        for k in OpKind::ALL {
            assert_eq!(k.name().parse::<OpKind>().unwrap(), k);
        }
        assert!(matches!("matmul".parse::<OpKind>(), Err(Error::Input(_))));
    }
}
