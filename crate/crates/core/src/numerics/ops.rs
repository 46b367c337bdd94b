//! Decoder operations over [`Matrix`] values.
//!
//! The layer is deliberately bare: embedding plus positional lookup, QKV
//! projection, multi-head attention, output projection, and a two-matrix FFN
//! with ReLU in between. There is no layer norm and no residual path.

use serde::{Deserialize, Serialize};

use super::matrix::{ActivationMatrix, Matrix};
use super::model::DecoderWeights;
use crate::error::{Error, Result};

/// Keys and values for a run of context tokens at one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvPair {
    pub k: Matrix,
    pub v: Matrix,
}

impl KvPair {
    pub fn empty(d: usize) -> Self {
        Self {
            k: Matrix::zeros(0, d),
            v: Matrix::zeros(0, d),
        }
    }

    pub fn len(&self) -> usize {
        self.k.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.k.rows() == 0
    }

    pub fn slice(&self, start: usize, end: usize) -> KvPair {
        KvPair {
            k: self.k.slice_rows(start, end),
            v: self.v.slice_rows(start, end),
        }
    }

    pub fn concat(&self, other: &KvPair) -> Result<KvPair> {
        Ok(KvPair {
            k: self.k.vstack(&other.k)?,
            v: self.v.vstack(&other.v)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scaling {
    /// Multiply logits by `1/sqrt(head_dim)`.
    #[default]
    Scaled,
    Unscaled,
}

impl Scaling {
    pub fn from_flag(scaled: bool) -> Self {
        if scaled {
            Scaling::Scaled
        } else {
            Scaling::Unscaled
        }
    }
}

fn expect_cols(m: &Matrix, d: usize, what: &str) -> Result<()> {
    if m.cols() != d {
        return Err(Error::Shape(format!(
            "{what} has {} columns, expected {d}",
            m.cols()
        )));
    }
    Ok(())
}

/// Token embedding plus positional embedding, positions starting at 0.
pub fn embed(token_ids: &[usize], weights: &DecoderWeights) -> Result<ActivationMatrix> {
    embed_at(token_ids, 0, weights)
}

/// Like [`embed`] with positions starting at `offset`.
pub fn embed_at(token_ids: &[usize], offset: usize, weights: &DecoderWeights) -> Result<ActivationMatrix> {
    let cfg = &weights.config;
    if offset + token_ids.len() > weights.positional.rows() {
        return Err(Error::Input(format!(
            "sequence end {} exceeds max_seq {}",
            offset + token_ids.len(),
            weights.positional.rows()
        )));
    }
    let d = cfg.hidden_dim;
    let mut out = Matrix::zeros(token_ids.len(), d);
    for (t, &id) in token_ids.iter().enumerate() {
        if id >= weights.embedding.rows() {
            return Err(Error::Input(format!(
                "token id {id} out of range for vocab {}",
                weights.embedding.rows()
            )));
        }
        let e = weights.embedding.row(id);
        let p = weights.positional.row(offset + t);
        for c in 0..d {
            out.set(t, c, e[c] + p[c]);
        }
    }
    Ok(out)
}

/// `Q = A·W_Q`, `K = A·W_K`, `V = A·W_V`.
pub fn qkv_generate(
    a: &ActivationMatrix,
    layer: usize,
    weights: &DecoderWeights,
) -> Result<(Matrix, Matrix, Matrix)> {
    expect_cols(a, weights.config.hidden_dim, "activation")?;
    let w = weights.layer(layer)?;
    Ok((a.matmul(&w.w_q)?, a.matmul(&w.w_k)?, a.matmul(&w.w_v)?))
}

/// Multi-head attention of a single query row over `kv`.
///
/// Each head attends within its own `head_dim` column slice; head outputs
/// are written back into the same slice, so concatenation is implicit.
pub fn attention_step(q_new: &Matrix, kv: &KvPair, num_heads: usize, scaling: Scaling) -> Result<Matrix> {
    if kv.is_empty() {
        return Err(Error::Input("attention over an empty context".into()));
    }
    if q_new.rows() != 1 {
        return Err(Error::Shape(format!("query has {} rows, expected 1", q_new.rows())));
    }
    let d = q_new.cols();
    expect_cols(&kv.k, d, "keys")?;
    expect_cols(&kv.v, d, "values")?;
    if kv.k.rows() != kv.v.rows() {
        return Err(Error::Shape("keys and values differ in length".into()));
    }
    if num_heads == 0 || !d.is_multiple_of(num_heads) {
        return Err(Error::Input(format!("hidden dim {d} not divisible by {num_heads} heads")));
    }
    let hd = d / num_heads;
    let scale = match scaling {
        Scaling::Scaled => 1.0 / (hd as f64).sqrt(),
        Scaling::Unscaled => 1.0,
    };
    let q = q_new.row(0);
    let n = kv.len();
    let mut out = Matrix::zeros(1, d);
    let mut logits = vec![0.0; n];
    for h in 0..num_heads {
        let cols = h * hd..(h + 1) * hd;
        for (t, l) in logits.iter_mut().enumerate() {
            let k = &kv.k.row(t)[cols.clone()];
            let dot: f64 = q[cols.clone()].iter().zip(k).map(|(a, b)| a * b).sum();
            *l = dot * scale;
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            denom += *l;
        }
        for c in cols {
            let mut acc = 0.0;
            for (t, e) in logits.iter().enumerate() {
                acc += (e / denom) * kv.v.get(t, c);
            }
            out.set(0, c, acc);
        }
    }
    Ok(out)
}

/// `relu(att·W_Proj·W_FFN1)·W_FFN2`.
pub fn project_ffn(att: &Matrix, layer: usize, weights: &DecoderWeights) -> Result<ActivationMatrix> {
    expect_cols(att, weights.config.hidden_dim, "attention output")?;
    let w = weights.layer(layer)?;
    let proj = att.matmul(&w.w_proj)?;
    let hidden = proj.matmul(&w.w_ffn1)?.map(|x| x.max(0.0));
    hidden.matmul(&w.w_ffn2)
}

/// Rebuild keys and values from checkpointed layer inputs.
///
/// Uses the same products as [`qkv_generate`], so the rows match the
/// originals exactly.
pub fn recompute_kv_from_activation(a_c: &ActivationMatrix, layer: usize, weights: &DecoderWeights) -> Result<KvPair> {
    expect_cols(a_c, weights.config.hidden_dim, "activation checkpoint")?;
    let w = weights.layer(layer)?;
    Ok(KvPair {
        k: a_c.matmul(&w.w_k)?,
        v: a_c.matmul(&w.w_v)?,
    })
}

/// Causal self-attention plus FFN for a whole sequence at one layer.
/// Returns the layer's keys/values and the next layer's input.
fn layer_forward(a: &ActivationMatrix, layer: usize, weights: &DecoderWeights) -> Result<(KvPair, ActivationMatrix)> {
    let (q, k, v) = qkv_generate(a, layer, weights)?;
    let kv = KvPair { k, v };
    let scaling = Scaling::from_flag(weights.config.scale_attention);
    let mut att = Matrix::zeros(0, a.cols());
    for t in 0..a.rows() {
        let row = attention_step(&q.row_matrix(t), &kv.slice(0, t + 1), weights.config.num_heads, scaling)?;
        att.push_row(row.row(0))?;
    }
    let next = project_ffn(&att, layer, weights)?;
    Ok((kv, next))
}

/// Everything a prefill pass produces, kept for replay in tests.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Inputs of layers `0..num_layers` followed by the final output.
    pub layer_inputs: Vec<ActivationMatrix>,
    /// Per-layer keys and values for every token.
    pub kv: Vec<KvPair>,
}

impl ForwardTrace {
    pub fn output(&self) -> &ActivationMatrix {
        self.layer_inputs.last().expect("at least the embedding")
    }
}

/// Full causal forward pass over `token_ids`.
pub fn prefill(token_ids: &[usize], weights: &DecoderWeights) -> Result<ForwardTrace> {
    let mut a = embed(token_ids, weights)?;
    let mut layer_inputs = Vec::with_capacity(weights.layers.len() + 1);
    let mut kv = Vec::with_capacity(weights.layers.len());
    for layer in 0..weights.layers.len() {
        let (pair, next) = layer_forward(&a, layer, weights)?;
        layer_inputs.push(a);
        kv.push(pair);
        a = next;
    }
    layer_inputs.push(a);
    Ok(ForwardTrace { layer_inputs, kv })
}

/// Recompute layer `target_layer`'s keys and values from raw token ids by
/// running every preceding layer.
pub fn token_recompute_kv(token_ids: &[usize], weights: &DecoderWeights, target_layer: usize) -> Result<KvPair> {
    weights.layer(target_layer)?;
    let mut a = embed(token_ids, weights)?;
    for layer in 0..target_layer {
        a = layer_forward(&a, layer, weights)?.1;
    }
    recompute_kv_from_activation(&a, target_layer, weights)
}

/// Result of generating one token against a cached context.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// `1 × d` inputs of each layer, then the final output.
    pub layer_inputs: Vec<ActivationMatrix>,
    /// The new token's keys and values per layer.
    pub new_kv: Vec<KvPair>,
}

impl StepOutput {
    pub fn output(&self) -> &ActivationMatrix {
        self.layer_inputs.last().expect("at least the embedding")
    }
}

/// One generation step for `token_id` at `position`, attending over the
/// per-layer `context` plus itself.
pub fn decode_step(token_id: usize, position: usize, context: &[KvPair], weights: &DecoderWeights) -> Result<StepOutput> {
    if context.len() != weights.layers.len() {
        return Err(Error::Input(format!(
            "context covers {} layers, model has {}",
            context.len(),
            weights.layers.len()
        )));
    }
    let scaling = Scaling::from_flag(weights.config.scale_attention);
    let mut a = embed_at(&[token_id], position, weights)?;
    let mut layer_inputs = Vec::with_capacity(context.len() + 1);
    let mut new_kv = Vec::with_capacity(context.len());
    for (layer, ctx) in context.iter().enumerate() {
        if ctx.len() != position {
            return Err(Error::Input(format!(
                "layer {layer} context has {} tokens, position is {position}",
                ctx.len()
            )));
        }
        let (q, k, v) = qkv_generate(&a, layer, weights)?;
        let own = KvPair { k, v };
        let full = ctx.concat(&own)?;
        let att = attention_step(&q, &full, weights.config.num_heads, scaling)?;
        let next = project_ffn(&att, layer, weights)?;
        layer_inputs.push(a);
        new_kv.push(own);
        a = next;
    }
    layer_inputs.push(a);
    Ok(StepOutput { layer_inputs, new_kv })
}

/// Where a context block's keys and values come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContextSource {
    /// Stored keys and values.
    Kv,
    /// Regenerated from the checkpointed layer input.
    Activation,
    /// Regenerated from token ids through all preceding layers.
    Tokens,
}

/// Build one layer's context from a block-wise mix of sources.
///
/// `sources[b]` covers tokens `b*tokens_per_block ..` of the prefix held by
/// `trace`; the last block may be partial.
pub fn assemble_context(
    layer: usize,
    sources: &[ContextSource],
    tokens_per_block: usize,
    token_ids: &[usize],
    trace: &ForwardTrace,
    weights: &DecoderWeights,
) -> Result<KvPair> {
    let n = token_ids.len();
    if tokens_per_block == 0 {
        return Err(Error::Input("tokens_per_block must be positive".into()));
    }
    if sources.len() != n.div_ceil(tokens_per_block) {
        return Err(Error::Input(format!(
            "{} sources for {n} tokens in blocks of {tokens_per_block}",
            sources.len()
        )));
    }
    let stored = trace
        .kv
        .get(layer)
        .ok_or_else(|| Error::Input(format!("layer {layer} missing from trace")))?;
    let mut out = KvPair::empty(weights.config.hidden_dim);
    for (b, src) in sources.iter().enumerate() {
        let start = b * tokens_per_block;
        let end = (start + tokens_per_block).min(n);
        let part = match src {
            ContextSource::Kv => stored.slice(start, end),
            ContextSource::Activation => {
                recompute_kv_from_activation(&trace.layer_inputs[layer].slice_rows(start, end), layer, weights)?
            }
            ContextSource::Tokens => token_recompute_kv(&token_ids[..end], weights, layer)?.slice(start, end),
        };
        out = out.concat(&part)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::model::ModelConfig;

    fn tiny(layers: usize, d: usize, heads: usize) -> DecoderWeights {
        let mut cfg = ModelConfig::new(layers, d, heads, 6);
        cfg.max_seq = 32;
        DecoderWeights::generate(&cfg, 3).unwrap()
    }

    #[test]
    fn embed_zero_tables() {
        let mut w = tiny(1, 4, 2);
        w.embedding = Matrix::zeros(6, 4);
        w.positional = Matrix::zeros(32, 4);
        let a = embed(&[1, 5, 3], &w).unwrap();
        assert!(a.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn embed_one_hot() {
        let mut w = tiny(1, 4, 2);
        let mut e = Matrix::zeros(6, 4);
        for i in 0..4 {
            e.set(i, i, 1.0);
        }
        w.embedding = e;
        w.positional = Matrix::zeros(32, 4);
        let a = embed(&[2, 0], &w).unwrap();
        assert_eq!(a.row(0), &[0.0, 0.0, 1.0, 0.0]);
        assert_eq!(a.row(1), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn embed_rejects_bad_ids_and_lengths() {
        let w = tiny(1, 4, 2);
        assert!(matches!(embed(&[6], &w), Err(Error::Input(_))));
        assert!(embed_at(&[0], 32, &w).is_err());
        assert!(embed(&vec![0; 33], &w).is_err());
    }

    #[test]
    fn qkv_zero_and_identity() {
        let mut w = tiny(1, 4, 2);
        let (q, k, v) = qkv_generate(&Matrix::zeros(3, 4), 0, &w).unwrap();
        for m in [q, k, v] {
            assert!(m.as_slice().iter().all(|&x| x == 0.0));
        }
        w.layers[0].w_q = Matrix::identity(4);
        w.layers[0].w_k = Matrix::identity(4);
        w.layers[0].w_v = Matrix::identity(4);
        let a = Matrix::from_vec(2, 4, vec![1., -2., 3., 0.5, 0., 1., 7., -1.]).unwrap();
        let (q, k, v) = qkv_generate(&a, 0, &w).unwrap();
        assert_eq!((&q, &k, &v), (&a, &a, &a));
        assert!(matches!(qkv_generate(&Matrix::zeros(1, 3), 0, &w), Err(Error::Shape(_))));
    }

    #[test]
    fn attention_single_token_returns_value() {
        let q = Matrix::from_rows(&[vec![0.3, -1.0, 2.0, 0.1]]).unwrap();
        let kv = KvPair {
            k: Matrix::from_rows(&[vec![9.0, 8.0, -7.0, 1.0]]).unwrap(),
            v: Matrix::from_rows(&[vec![0.25, -0.5, 1.5, 3.0]]).unwrap(),
        };
        let out = attention_step(&q, &kv, 2, Scaling::Scaled).unwrap();
        assert_eq!(out.row(0), kv.v.row(0));
    }

    #[test]
    fn attention_identical_values() {
        let q = Matrix::from_rows(&[vec![0.3, -1.0, 2.0, 0.1]]).unwrap();
        let k = Matrix::from_rows(&vec![vec![1.0, 2.0, 3.0, 4.0]; 5]).unwrap();
        let v = Matrix::from_rows(&vec![vec![0.5, 0.25, -1.0, 2.0]; 5]).unwrap();
        let out = attention_step(&q, &KvPair { k, v: v.clone() }, 4, Scaling::Unscaled).unwrap();
        for c in 0..4 {
            assert!((out.get(0, c) - v.get(0, c)).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_errors() {
        let q = Matrix::zeros(1, 4);
        assert!(matches!(
            attention_step(&q, &KvPair::empty(4), 2, Scaling::Scaled),
            Err(Error::Input(_))
        ));
        let kv = KvPair {
            k: Matrix::zeros(1, 4),
            v: Matrix::zeros(1, 4),
        };
        assert!(attention_step(&q, &kv, 3, Scaling::Scaled).is_err());
        assert!(attention_step(&Matrix::zeros(2, 4), &kv, 2, Scaling::Scaled).is_err());
    }

    #[test]
    fn project_ffn_zero_and_identity() {
        let mut w = tiny(1, 4, 2);
        let z = project_ffn(&Matrix::zeros(2, 4), 0, &w).unwrap();
        assert!(z.as_slice().iter().all(|&x| x == 0.0));
        // ffn_dim = 16: W_FFN1 = [I 0], W_FFN2 = [I; 0]
        let mut f1 = Matrix::zeros(4, 16);
        let mut f2 = Matrix::zeros(16, 4);
        for i in 0..4 {
            f1.set(i, i, 1.0);
            f2.set(i, i, 1.0);
        }
        w.layers[0].w_proj = Matrix::identity(4);
        w.layers[0].w_ffn1 = f1;
        w.layers[0].w_ffn2 = f2;
        let x = Matrix::from_rows(&[vec![0.0, 1.5, 2.0, 0.25]]).unwrap();
        assert_eq!(project_ffn(&x, 0, &w).unwrap(), x);
        assert!(project_ffn(&Matrix::zeros(1, 5), 0, &w).is_err());
    }

    #[test]
    fn recompute_zero_and_shared_weights() {
        let mut w = tiny(1, 4, 2);
        let kv = recompute_kv_from_activation(&Matrix::zeros(3, 4), 0, &w).unwrap();
        assert!(kv.k.as_slice().iter().chain(kv.v.as_slice()).all(|&x| x == 0.0));
        w.layers[0].w_v = w.layers[0].w_k.clone();
        let a = embed(&[1, 2, 3], &w).unwrap();
        let kv = recompute_kv_from_activation(&a, 0, &w).unwrap();
        assert_eq!(kv.k, kv.v);
    }

    #[test]
    fn token_recompute_base_case() {
        let w = tiny(3, 8, 2);
        let ids = [1, 4, 2, 5];
        let kv = token_recompute_kv(&ids, &w, 0).unwrap();
        let (_, k, v) = qkv_generate(&embed(&ids, &w).unwrap(), 0, &w).unwrap();
        assert_eq!(kv, KvPair { k, v });
        assert!(token_recompute_kv(&ids, &w, 3).is_err());
    }

    #[test]
    fn decode_matches_longer_prefill() {
        let w = tiny(2, 8, 2);
        let ids = [3, 1, 4, 1, 5];
        let trace = prefill(&ids[..4], &w).unwrap();
        let step = decode_step(ids[4], 4, &trace.kv, &w).unwrap();
        let full = prefill(&ids, &w).unwrap();
        assert_eq!(step.output().row(0), full.output().row(4));
    }

    #[test]
    fn decode_rejects_wrong_context_length() {
        let w = tiny(2, 8, 2);
        let trace = prefill(&[1, 2, 3], &w).unwrap();
        assert!(decode_step(0, 2, &trace.kv, &w).is_err());
        assert!(decode_step(0, 3, &trace.kv[..1], &w).is_err());
    }

    #[test]
    fn assemble_checks_block_count() {
        let w = tiny(1, 8, 2);
        let ids = [1, 2, 3];
        let trace = prefill(&ids, &w).unwrap();
        assert!(assemble_context(0, &[ContextSource::Kv], 2, &ids, &trace, &w).is_err());
        let kv = assemble_context(0, &[ContextSource::Kv, ContextSource::Activation], 2, &ids, &trace, &w).unwrap();
        assert_eq!(kv, trace.kv[0]);
    }
}
