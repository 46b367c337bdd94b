use rand::RngCore;
use rand::SeedableRng;
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{Error, Result};

fn default_bytes_per_scalar() -> u64 {
    2
}
fn default_tokens_per_block() -> usize {
    16
}
fn default_max_seq() -> usize {
    2048
}
fn default_true() -> bool {
    true
}

/// Dimensions of a decoder-only transformer.
///
/// Serialized form matches the model JSON accepted by the CLI; `ffn_dim`
/// defaults to `4 * hidden_dim` when absent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    #[serde(default)]
    pub ffn_dim: usize,
    pub vocab_size: usize,
    #[serde(default = "default_bytes_per_scalar")]
    pub bytes_per_scalar: u64,
    #[serde(default = "default_tokens_per_block")]
    pub tokens_per_block: usize,
    #[serde(default = "default_max_seq")]
    pub max_seq: usize,
    /// Scale attention logits by `1/sqrt(head_dim)`.
    #[serde(default = "default_true")]
    pub scale_attention: bool,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(num_layers: usize, hidden_dim: usize, num_heads: usize, vocab_size: usize) -> Self {
        Self {
            num_layers,
            hidden_dim,
            num_heads,
            ffn_dim: 4 * hidden_dim,
            vocab_size,
            bytes_per_scalar: default_bytes_per_scalar(),
            tokens_per_block: default_tokens_per_block(),
            max_seq: default_max_seq(),
            scale_attention: true,
            seed: 0,
        }
    }

    /// Published OPT dimensions: `opt-6.7b`, `opt-13b`, `opt-30b`, `opt-66b`.
    pub fn preset(name: &str) -> Result<Self> {
        let (layers, d, heads) = match name.to_ascii_lowercase().as_str() {
            "opt-6.7b" => (32, 4096, 32),
            "opt-13b" => (40, 5120, 40),
            "opt-30b" => (48, 7168, 56),
            "opt-66b" => (64, 9216, 72),
            other => return Err(Error::Input(format!("unknown model preset `{other}`"))),
        };
        Ok(Self::new(layers, d, heads, 50272))
    }

    pub const PRESETS: [&'static str; 4] = ["opt-6.7b", "opt-13b", "opt-30b", "opt-66b"];

    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: ModelConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.ffn_dim == 0 {
            cfg.ffn_dim = 4 * cfg.hidden_dim;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("vocab_size", self.vocab_size),
            ("tokens_per_block", self.tokens_per_block),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.bytes_per_scalar == 0 {
            return Err(Error::Config("bytes_per_scalar must be at least 1".into()));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.ffn_dim < self.hidden_dim {
            return Err(Error::Config(format!(
                "ffn_dim {} smaller than hidden_dim {}",
                self.ffn_dim, self.hidden_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_proj: Matrix,
    pub w_ffn1: Matrix,
    pub w_ffn2: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderWeights {
    pub config: ModelConfig,
    /// `vocab_size × hidden_dim`
    pub embedding: Matrix,
    /// `max_seq × hidden_dim`
    pub positional: Matrix,
    pub layers: Vec<LayerWeights>,
}

/// Uniform samples in `[-0.1, 0.1]` from a SplitMix64 stream.
struct WeightStream(SplitMix64);

impl WeightStream {
    fn next(&mut self) -> f64 {
        let unit = (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        -0.1 + 0.2 * unit
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| self.next()).collect();
        Matrix::from_vec(rows, cols, data).expect("sized by construction")
    }
}

impl DecoderWeights {
    /// Deterministic weights: identical `(config, seed)` give identical bits.
    pub fn generate(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let f = config.ffn_dim;
        let mut s = WeightStream(SplitMix64::seed_from_u64(seed));
        let embedding = s.matrix(config.vocab_size, d);
        let positional = s.matrix(config.max_seq, d);
        let layers = (0..config.num_layers)
            .map(|_| LayerWeights {
                w_q: s.matrix(d, d),
                w_k: s.matrix(d, d),
                w_v: s.matrix(d, d),
                w_proj: s.matrix(d, d),
                w_ffn1: s.matrix(d, f),
                w_ffn2: s.matrix(f, d),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            embedding,
            positional,
            layers,
        })
    }

    pub fn layer(&self, i: usize) -> Result<&LayerWeights> {
        self.layers.get(i).ok_or_else(|| {
            Error::Input(format!(
                "layer {i} out of range for {} layers",
                self.layers.len()
            ))
        })
    }
}
