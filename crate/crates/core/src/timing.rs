//! Linear latency models for KV regeneration and KV loading.
//!
//! Both latencies are close to linear in the number of tokens, so each is
//! fitted by ordinary least squares from `(n_tokens, seconds)` samples. The
//! samples normally come from [`synthesize_samples`], which evaluates an
//! analytic roofline with multiplicative Gaussian noise; measured samples
//! can be imported instead.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cache::{token_bytes, BlockKind};
use crate::error::{Error, Result};
use crate::numerics::{flop_count, ModelConfig, OpKind};

/// Host/GPU machine characteristics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareProfile {
    /// Effective host-to-GPU bandwidth, bytes/s.
    pub pcie_bandwidth: f64,
    /// Peak GPU throughput, FLOP/s.
    pub gpu_throughput: f64,
    /// Fraction of peak reached by the kernels, in (0, 1].
    pub gpu_efficiency: f64,
    /// Host memory capacity in bytes.
    pub host_mem: f64,
    pub gpu_mem: f64,
    /// Relative standard deviation of synthetic sample noise.
    pub noise_std: f64,
}

impl Default for HardwareProfile {
    /// A 24 GB consumer GPU on PCIe 4.0 x16 with 882 GB of host DRAM.
    fn default() -> Self {
        Self {
            pcie_bandwidth: 25e9,
            gpu_throughput: 82.6e12,
            gpu_efficiency: 0.35,
            host_mem: 882e9,
            gpu_mem: 24e9,
            noise_std: 0.02,
        }
    }
}

impl HardwareProfile {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("pcie_bandwidth", self.pcie_bandwidth),
            ("gpu_throughput", self.gpu_throughput),
            ("gpu_efficiency", self.gpu_efficiency),
            ("host_mem", self.host_mem),
            ("gpu_mem", self.gpu_mem),
        ];
        for (name, v) in pos {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.gpu_efficiency > 1.0 {
            return Err(Error::Config("gpu_efficiency must not exceed 1".into()));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be non-negative".into()));
        }
        Ok(())
    }

    /// Sustained FLOP/s.
    pub fn effective_flops(&self) -> f64 {
        self.gpu_throughput * self.gpu_efficiency
    }

    pub fn compute_seconds(&self, flops: u64) -> f64 {
        flops as f64 / self.effective_flops()
    }

    pub fn transfer_seconds(&self, bytes: u64) -> f64 {
        bytes as f64 / self.pcie_bandwidth
    }
}

/// `seconds = slope * n_tokens + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearTimeModel {
    pub slope: f64,
    pub intercept: f64,
    #[serde(rename = "r2")]
    pub r_squared: f64,
    /// The least-squares fit produced a negative slope or intercept that was
    /// clamped to zero.
    #[serde(default)]
    pub clamped: bool,
}

impl LinearTimeModel {
    pub fn new(slope: f64, intercept: f64) -> Self {
        Self {
            slope,
            intercept,
            r_squared: 1.0,
            clamped: false,
        }
    }

    pub fn eval(&self, n_tokens: f64) -> Result<f64> {
        if n_tokens.is_nan() || n_tokens < 0.0 {
            return Err(Error::Input(format!("negative token count {n_tokens}")));
        }
        Ok(self.at(n_tokens))
    }

    /// [`eval`](Self::eval) without the domain check.
    #[inline]
    pub fn at(&self, n_tokens: f64) -> f64 {
        self.slope * n_tokens + self.intercept
    }

    /// Largest token count whose predicted time fits in `seconds`.
    ///
    /// Floors rather than rounds so that `eval(invert(t)) <= t`; a budget
    /// below the intercept yields 0.
    pub fn invert(&self, seconds: f64) -> Result<u64> {
        if !(self.slope > 0.0) {
            return Err(Error::NonInvertible);
        }
        if seconds.is_nan() {
            return Err(Error::Input("NaN time budget".into()));
        }
        if seconds <= self.intercept {
            return Ok(0);
        }
        let raw = ((seconds - self.intercept) / self.slope).floor();
        let mut n = if raw >= u64::MAX as f64 { u64::MAX - 1 } else { raw as u64 };
        // one-ulp corrections either way
        while n > 0 && self.at(n as f64) > seconds {
            n -= 1;
        }
        while self.at((n + 1) as f64) <= seconds {
            n += 1;
        }
        Ok(n)
    }
}

/// Ordinary least squares over `(n_tokens, seconds)`.
pub fn fit_linear(samples: &[(f64, f64)]) -> Result<LinearTimeModel> {
    if samples.len() < 2 {
        return Err(Error::Degenerate(format!("{} samples, need at least 2", samples.len())));
    }
    if samples.iter().any(|&(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::Degenerate("non-finite sample".into()));
    }
    let n = samples.len() as f64;
    let mx = samples.iter().map(|s| s.0).sum::<f64>() / n;
    let my = samples.iter().map(|s| s.1).sum::<f64>() / n;
    let sxx: f64 = samples.iter().map(|s| (s.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Degenerate("all samples share one token count".into()));
    }
    let sxy: f64 = samples.iter().map(|s| (s.0 - mx) * (s.1 - my)).sum();
    let syy: f64 = samples.iter().map(|s| (s.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = samples.iter().map(|s| (s.1 - (slope * s.0 + intercept)).powi(2)).sum();
    let r_squared = if syy == 0.0 {
        if ss_res <= f64::EPSILON * my.abs().max(1e-300) {
            1.0
        } else {
            0.0
        }
    } else {
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    };
    // Round-off on an exact line can leave a hair of negative intercept;
    // only a material one is reported.
    let scale = samples.iter().map(|s| s.1.abs()).fold(0.0, f64::max).max(1e-300);
    let clamped = intercept < -1e-9 * scale || slope < 0.0;
    Ok(LinearTimeModel {
        slope: slope.max(0.0),
        intercept: intercept.max(0.0),
        r_squared,
        clamped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    KvGen,
    LoadKv,
}

pub const DEFAULT_SAMPLE_POINTS: usize = 16;
pub const SAMPLE_MIN_TOKENS: f64 = 64.0;
pub const SAMPLE_MAX_TOKENS: f64 = 65536.0;

/// Token counts log-spaced over `[64, 65536]`.
pub fn sample_points(n_points: usize) -> Vec<u64> {
    let ratio = SAMPLE_MAX_TOKENS / SAMPLE_MIN_TOKENS;
    (0..n_points)
        .map(|i| {
            let t = if n_points == 1 { 0.0 } else { i as f64 / (n_points - 1) as f64 };
            (SAMPLE_MIN_TOKENS * ratio.powf(t)).round() as u64
        })
        .collect()
}

/// Noiseless per-layer latency of `kind` for `n` tokens.
pub fn analytic_seconds(profile: &HardwareProfile, config: &ModelConfig, kind: SampleKind, n: u64) -> f64 {
    match kind {
        SampleKind::KvGen => profile.compute_seconds(flop_count(OpKind::KvGen, config, n, 0)),
        SampleKind::LoadKv => profile.transfer_seconds(n * token_bytes(BlockKind::Kv, config)),
    }
}

/// Synthetic stand-in for on-device latency sampling.
///
/// Each point is the analytic latency scaled by `1 + eps`,
/// `eps ~ Normal(0, noise_std)`, drawn from a stream seeded by `seed`.
pub fn synthesize_samples(
    profile: &HardwareProfile,
    config: &ModelConfig,
    kind: SampleKind,
    n_points: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    if n_points < 2 {
        return Err(Error::Input(format!("need at least 2 sample points, got {n_points}")));
    }
    profile.validate()?;
    let stream = match kind {
        SampleKind::KvGen => 0x6b76_5f67_656e,
        SampleKind::LoadKv => 0x6c6f_6164_6b76,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stream);
    let noise = Normal::new(0.0, profile.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    Ok(sample_points(n_points)
        .into_iter()
        .map(|n| {
            let eps = if profile.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            (n as f64, analytic_seconds(profile, config, kind, n) * (1.0 + eps))
        })
        .collect())
}

/// `(per_layer, total)` weight bytes. A layer holds Q, K, V and the output
/// projection (`4·d²`) plus both FFN matrices (`2·d·ffn_dim`); the total
/// adds the token and positional embedding tables.
pub fn weight_bytes(config: &ModelConfig) -> (u64, u64) {
    let d = config.hidden_dim as u64;
    let f = config.ffn_dim as u64;
    let b = config.bytes_per_scalar;
    let per_layer = (4 * d * d + 2 * d * f) * b;
    let embeddings = (config.vocab_size as u64 + config.max_seq as u64) * d * b;
    (per_layer, per_layer * config.num_layers as u64 + embeddings)
}

/// Everything the planner and simulator need to know about latency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingBundle {
    pub kv_gen: LinearTimeModel,
    pub load_kv: LinearTimeModel,
    /// Seconds to load one decoder layer's weights.
    pub t_load_w: f64,
    pub s_weight_layer: u64,
    pub s_weight_total: u64,
}

impl TimingBundle {
    pub fn from_models(
        kv_gen: LinearTimeModel,
        load_kv: LinearTimeModel,
        profile: &HardwareProfile,
        config: &ModelConfig,
    ) -> Self {
        let (s_weight_layer, s_weight_total) = weight_bytes(config);
        Self {
            kv_gen,
            load_kv,
            t_load_w: profile.transfer_seconds(s_weight_layer),
            s_weight_layer,
            s_weight_total,
        }
    }

    pub fn from_samples(
        kv_gen: &[(f64, f64)],
        load_kv: &[(f64, f64)],
        profile: &HardwareProfile,
        config: &ModelConfig,
    ) -> Result<Self> {
        Ok(Self::from_models(fit_linear(kv_gen)?, fit_linear(load_kv)?, profile, config))
    }

    pub fn validate(&self) -> Result<()> {
        for (name, m) in [("kv_gen", &self.kv_gen), ("load_kv", &self.load_kv)] {
            if !(m.slope >= 0.0 && m.intercept >= 0.0 && m.slope.is_finite() && m.intercept.is_finite()) {
                return Err(Error::Config(format!("{name} model must be non-negative")));
            }
        }
        if !(self.t_load_w.is_finite() && self.t_load_w >= 0.0) {
            return Err(Error::Config("t_load_w must be non-negative".into()));
        }
        Ok(())
    }
}

/// Fit both models from synthetic samples.
pub fn calibrate(profile: &HardwareProfile, config: &ModelConfig, n_points: usize, seed: u64) -> Result<TimingBundle> {
    config.validate()?;
    let g = synthesize_samples(profile, config, SampleKind::KvGen, n_points, seed)?;
    let l = synthesize_samples(profile, config, SampleKind::LoadKv, n_points, seed)?;
    TimingBundle::from_samples(&g, &l, profile, config)
}

/// Parse `n_tokens,seconds` rows (header optional, `#` comments).
pub fn parse_samples_csv(text: &str) -> Result<Vec<(f64, f64)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Input(format!("samples CSV: {e}")))?;
        let line = rec.position().map_or(i as u64 + 1, |p| p.line());
        if rec.len() != 2 {
            return Err(Error::Input(format!("line {line}: expected 2 columns")));
        }
        match (rec[0].parse::<f64>(), rec[1].parse::<f64>()) {
            (Ok(x), Ok(y)) => out.push((x, y)),
            _ if i == 0 => continue,
            _ => return Err(Error::Input(format!("line {line}: not numeric"))),
        }
    }
    Ok(out)
}
