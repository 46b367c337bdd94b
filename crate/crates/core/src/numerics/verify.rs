//! Generation with rebuilt context against the plain KV-cache path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{DecoderWeights, ModelConfig};
use super::ops::{assemble_context, decode_step, prefill, ContextSource, ForwardTrace, KvPair, StepOutput};
use crate::error::{Error, Result};

/// Relative deviation above which a run fails.
pub const TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceOptions {
    pub prompt_len: usize,
    pub gen_steps: usize,
    pub tokens_per_block: usize,
    /// Perturb `W_K` of layer 0 in the weights used for recomputation only.
    pub mutate_wk: bool,
}

impl Default for EquivalenceOptions {
    fn default() -> Self {
        Self {
            prompt_len: 12,
            gen_steps: 4,
            tokens_per_block: 4,
            mutate_wk: false,
        }
    }
}

/// Which sources a context mix may draw blocks from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceMix {
    ActivationOnly,
    KvAndActivation,
    All,
}

impl SourceMix {
    pub const ALL: [SourceMix; 3] = [SourceMix::ActivationOnly, SourceMix::KvAndActivation, SourceMix::All];

    fn pick(self, rng: &mut ChaCha8Rng) -> ContextSource {
        use ContextSource::*;
        match self {
            SourceMix::ActivationOnly => Activation,
            SourceMix::KvAndActivation => [Kv, Activation][rng.random_range(0..2)],
            SourceMix::All => [Kv, Activation, Tokens][rng.random_range(0..3)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub seed: u64,
    pub num_layers: usize,
    pub hidden_dim: usize,
    /// Worst relative deviation per mix, over all generated steps.
    pub deviations: Vec<(SourceMix, f64)>,
    pub max_deviation: f64,
    pub passed: bool,
}

impl ForwardTrace {
    /// Appends one generated token's layer inputs and keys/values.
    pub fn push_step(&mut self, step: &StepOutput) -> Result<()> {
        if step.layer_inputs.len() != self.layer_inputs.len() || step.new_kv.len() != self.kv.len() {
            return Err(Error::Shape("step does not match trace depth".into()));
        }
        for (a, s) in self.layer_inputs.iter_mut().zip(&step.layer_inputs) {
            *a = a.vstack(s)?;
        }
        for (kv, s) in self.kv.iter_mut().zip(&step.new_kv) {
            *kv = kv.concat(s)?;
        }
        Ok(())
    }
}

fn random_ids(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..vocab)).collect()
}

/// Generates `gen_steps` tokens for one seeded model, once from stored KV
/// and once per [`SourceMix`] with each block's source fixed up front.
///
/// Input ids are teacher-forced so every path sees the same sequence.
pub fn check_equivalence(config: &ModelConfig, seed: u64, opts: &EquivalenceOptions) -> Result<EquivalenceReport> {
    if opts.prompt_len == 0 || opts.tokens_per_block == 0 {
        return Err(Error::Input("prompt_len and tokens_per_block must be positive".into()));
    }
    let total = opts.prompt_len + opts.gen_steps;
    if total > config.max_seq {
        return Err(Error::Input(format!("{total} tokens exceed max_seq {}", config.max_seq)));
    }
    let weights = DecoderWeights::generate(config, seed)?;
    let mut rebuild = weights.clone();
    if opts.mutate_wk {
        let w_k = &mut rebuild.layers[0].w_k;
        w_k.set(0, 0, w_k.get(0, 0) + 1e-3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let ids = random_ids(&mut rng, total, config.vocab_size);
    let prompt = &ids[..opts.prompt_len];

    let mut reference = prefill(prompt, &weights)?;
    let mut expected = Vec::with_capacity(opts.gen_steps);
    for pos in opts.prompt_len..total {
        let step = decode_step(ids[pos], pos, &reference.kv, &weights)?;
        reference.push_step(&step)?;
        expected.push(step);
    }

    let blocks = total.div_ceil(opts.tokens_per_block);
    let mut deviations = Vec::new();
    for mix in SourceMix::ALL {
        let sources: Vec<Vec<ContextSource>> = (0..config.num_layers)
            .map(|_| (0..blocks).map(|_| mix.pick(&mut rng)).collect())
            .collect();
        let mut store = prefill(prompt, &weights)?;
        let mut worst: f64 = 0.0;
        for (pos, want) in (opts.prompt_len..total).zip(&expected) {
            let n_blocks = pos.div_ceil(opts.tokens_per_block);
            let ctx: Vec<KvPair> = (0..config.num_layers)
                .map(|l| assemble_context(l, &sources[l][..n_blocks], opts.tokens_per_block, &ids[..pos], &store, &rebuild))
                .collect::<Result<_>>()?;
            let step = decode_step(ids[pos], pos, &ctx, &weights)?;
            worst = worst.max(step.output().max_rel_diff(want.output()));
            store.push_step(&step)?;
        }
        deviations.push((mix, worst));
    }
    let max_deviation = deviations.iter().map(|d| d.1).fold(0.0, f64::max);
    Ok(EquivalenceReport {
        seed,
        num_layers: config.num_layers,
        hidden_dim: config.hidden_dim,
        deviations,
        max_deviation,
        passed: max_deviation <= TOLERANCE,
    })
}
