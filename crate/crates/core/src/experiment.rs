//! Experiment grids: sizing a planner run to a batch, building simulator
//! configs, and sweeping modes, batch sizes and prompt lengths.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::{bytes_of, BlockKind};
use crate::error::{Error, Result};
use crate::numerics::ModelConfig;
use crate::packing::PackerConfig;
use crate::policy::{plan_host_allocation, GpuResidency, HostAllocation, MemoryBudget};
use crate::sim::{simulate, Mode, RequestSpec, SimConfig, SimMetrics};
use crate::timing::{calibrate, HardwareProfile, TimingBundle, DEFAULT_SAMPLE_POINTS};

/// A preset name or full dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSource {
    Preset(String),
    Inline(ModelConfig),
}

impl ModelSource {
    pub fn resolve(&self) -> Result<ModelConfig> {
        match self {
            ModelSource::Preset(name) => ModelConfig::preset(name),
            ModelSource::Inline(cfg) => {
                let mut cfg = cfg.clone();
                if cfg.ffn_dim == 0 {
                    cfg.ffn_dim = 4 * cfg.hidden_dim;
                }
                cfg.validate()?;
                Ok(cfg)
            }
        }
    }
}

fn default_calibration_points() -> usize {
    DEFAULT_SAMPLE_POINTS
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub model: ModelSource,
    #[serde(default)]
    pub profile: HardwareProfile,
    pub modes: Vec<Mode>,
    pub batch_sizes: Vec<usize>,
    pub prompt_lens: Vec<u64>,
    pub gen_len: u64,
    #[serde(default)]
    pub seed: u64,
    /// ACT blocks resident on the GPU, per layer.
    #[serde(default)]
    pub act_gpu: u64,
    #[serde(default = "default_calibration_points")]
    pub calibration_points: usize,
    #[serde(default = "default_true")]
    pub store_checkpoint_traffic: bool,
    #[serde(default)]
    pub full_duplex: bool,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentSpec {
    /// OPT-30B on the default profile, three cache modes, batch 16 to 128
    /// and prompts of 256 to 1920 tokens.
    fn default() -> Self {
        Self {
            model: ModelSource::Preset("opt-30b".into()),
            profile: HardwareProfile::default(),
            modes: vec![Mode::Hybrid, Mode::KvOnly, Mode::ActOnly],
            batch_sizes: vec![16, 32, 64, 128],
            prompt_lens: vec![256, 512, 1024, 1920],
            gen_len: 16,
            seed: 0,
            act_gpu: 0,
            calibration_points: DEFAULT_SAMPLE_POINTS,
            store_checkpoint_traffic: true,
            full_duplex: false,
            out_dir: None,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() || self.batch_sizes.is_empty() || self.prompt_lens.is_empty() {
            return Err(Error::Config("modes, batch_sizes and prompt_lens must be nonempty".into()));
        }
        if self.batch_sizes.contains(&0) || self.prompt_lens.contains(&0) {
            return Err(Error::Config("batch sizes and prompt lengths must be positive".into()));
        }
        self.profile.validate()?;
        self.model.resolve()?;
        Ok(())
    }

    pub fn points(&self) -> Vec<SweepPoint> {
        let mut out = Vec::new();
        for &mode in &self.modes {
            for &batch in &self.batch_sizes {
                for &prompt_len in &self.prompt_lens {
                    out.push(SweepPoint { mode, batch, prompt_len });
                }
            }
        }
        out
    }

    /// Timing bundle fitted from synthetic samples under this spec's seed.
    pub fn calibrate(&self) -> Result<TimingBundle> {
        calibrate(&self.profile, &self.model.resolve()?, self.calibration_points, self.seed)
    }
}

/// Per-layer blocks the batch occupies once generation finishes.
pub fn batch_blocks(batch: &[RequestSpec], tokens_per_block: u64) -> u64 {
    batch.iter().map(|r| (r.prompt_len + r.gen_len).div_ceil(tokens_per_block)).sum()
}

/// Plans the host split for the memory this batch actually occupies.
///
/// Planning against all of host memory would split terabytes the batch
/// never touches, and the ratio would drift toward the asymptotic slope
/// ratio. Instead the cache budget is grown until the plan holds as many
/// blocks as the batch needs, capped at the profile's host memory.
pub fn plan_for_batch(
    bundle: &TimingBundle,
    model: &ModelConfig,
    profile: &HardwareProfile,
    gpu: GpuResidency,
    batch: &[RequestSpec],
) -> Result<HostAllocation> {
    let full = MemoryBudget::new(profile.host_mem, bundle.s_weight_total, model);
    let needed = batch_blocks(batch, full.tokens_per_block).saturating_sub(gpu.act_gpu);
    let with_units = |k: u64| MemoryBudget {
        host_mem: (bundle.s_weight_total as f64 + (k * full.s_act) as f64).min(profile.host_mem),
        ..full
    };
    let ok = |k: u64| match plan_host_allocation(bundle, &with_units(k), gpu) {
        Ok(a) => a.act_host + a.kv_host >= needed,
        Err(_) => false,
    };
    // k counts ACT-block-sized units of cache memory; a KV block is two
    let ratio = full.s_kv / full.s_act;
    let mut hi = needed * ratio.max(1);
    if !ok(hi) {
        let probe = crate::policy::initial_cache_allocation(bundle, gpu, full.tokens_per_block);
        hi = hi.max(probe.0 + ratio * probe.1 + needed * ratio);
    }
    let mut lo = 0;
    if ok(lo) {
        hi = lo;
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    plan_host_allocation(bundle, &with_units(hi), gpu)
}

/// Mini-batch capacities from the GPU memory left after two weight slots
/// and the resident ACT blocks. That remainder is double-buffered; within
/// one buffer half goes to KV blocks and half to ACT blocks together with
/// the KV regenerated from them.
pub fn default_packer(
    model: &ModelConfig,
    profile: &HardwareProfile,
    bundle: &TimingBundle,
    gpu: GpuResidency,
) -> Result<PackerConfig> {
    let act_block = bytes_of(BlockKind::Act, model) as f64;
    let kv_block = bytes_of(BlockKind::Kv, model) as f64;
    let resident = gpu.act_gpu as f64 * act_block * model.num_layers as f64;
    let free = profile.gpu_mem - 2.0 * bundle.s_weight_layer as f64 - resident;
    if free <= 0.0 {
        return Err(Error::Config(format!(
            "GPU memory {} bytes cannot hold two weight slots and {} resident ACT blocks",
            profile.gpu_mem, gpu.act_gpu
        )));
    }
    let per_kind = free / 4.0;
    PackerConfig::new(
        (per_kind / (act_block + kv_block)).floor() as u64,
        (per_kind / kv_block).floor() as u64,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub mode: Mode,
    pub batch: usize,
    pub prompt_len: u64,
}

/// Simulator input for one point of `spec`, using `bundle` for latencies.
pub fn build_sim_config(spec: &ExperimentSpec, bundle: &TimingBundle, point: SweepPoint) -> Result<SimConfig> {
    let model = spec.model.resolve()?;
    let gpu = GpuResidency { act_gpu: spec.act_gpu };
    let batch = vec![
        RequestSpec {
            prompt_len: point.prompt_len,
            gen_len: spec.gen_len,
        };
        point.batch
    ];
    let allocation = plan_for_batch(bundle, &model, &spec.profile, gpu, &batch)?;
    let packer = default_packer(&model, &spec.profile, bundle, gpu)?;
    Ok(SimConfig {
        model,
        profile: spec.profile.clone(),
        bundle: bundle.clone(),
        allocation,
        act_gpu: gpu,
        packer,
        batch,
        mode: point.mode,
        store_checkpoint_traffic: spec.store_checkpoint_traffic,
        full_duplex: spec.full_duplex,
    })
}

pub fn run_point(spec: &ExperimentSpec, bundle: &TimingBundle, point: SweepPoint) -> Result<SimMetrics> {
    simulate(&build_sim_config(spec, bundle, point)?).map(|(m, _)| m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub point: SweepPoint,
    pub result: std::result::Result<SimMetrics, Error>,
}

/// Runs every grid point on up to `jobs` threads (0 picks a default).
/// Failures are kept per row; other points still run.
pub fn sweep(spec: &ExperimentSpec, bundle: &TimingBundle, jobs: usize) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let points = spec.points();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| {
        points
            .par_iter()
            .map(|&point| SweepRow {
                point,
                result: run_point(spec, bundle, point),
            })
            .collect()
    }))
}

pub const CSV_COLUMNS: [&str; 14] = [
    "mode",
    "batch",
    "prompt_len",
    "throughput_tok_s",
    "pcie_busy",
    "gpu_busy",
    "traffic_weights",
    "traffic_kv_load",
    "traffic_act_load",
    "traffic_kv_store",
    "traffic_act_store",
    "makespan_s",
    "tokens_generated",
    "error",
];

/// Sweep rows as CSV with a header line. Failed points keep their
/// coordinates and carry the error text.
pub fn metrics_csv(rows: &[SweepRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_COLUMNS).expect("in-memory write");
    for row in rows {
        let p = row.point;
        let mut rec = vec![p.mode.to_string(), p.batch.to_string(), p.prompt_len.to_string()];
        match &row.result {
            Ok(m) => {
                let t = m.traffic;
                rec.extend(
                    [
                        m.throughput.to_string(),
                        m.pcie_busy.to_string(),
                        m.gpu_busy.to_string(),
                        t.weights.to_string(),
                        t.kv_load.to_string(),
                        t.act_load.to_string(),
                        t.kv_store.to_string(),
                        t.act_store.to_string(),
                        m.makespan.to_string(),
                        m.tokens_generated.to_string(),
                    ]
                    .into_iter()
                    .chain([String::new()]),
                );
            }
            Err(e) => {
                rec.extend(std::iter::repeat_n(String::new(), 10));
                rec.push(e.to_string());
            }
        }
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blocks_round_up() {
        let b = [RequestSpec { prompt_len: 17, gen_len: 0 }, RequestSpec { prompt_len: 16, gen_len: 16 }];
        assert_eq!(batch_blocks(&b, 16), 4);
    }

    #[test]
    fn grid_size() {
        let spec = ExperimentSpec::default();
        assert_eq!(spec.points().len(), 3 * 4 * 4);
        spec.validate().unwrap();
    }

    #[test]
    fn empty_grid_rejected() {
        let spec = ExperimentSpec {
            modes: vec![],
            ..Default::default()
        };
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn batch_plan_covers_batch() {
        let model = ModelConfig::preset("opt-30b").unwrap();
        let profile = HardwareProfile::default();
        let bundle = calibrate(&profile, &model, 16, 1).unwrap();
        let batch = vec![RequestSpec { prompt_len: 1024, gen_len: 16 }; 32];
        let a = plan_for_batch(&bundle, &model, &profile, GpuResidency::default(), &batch).unwrap();
        let need = batch_blocks(&batch, 16);
        assert!(a.act_host + a.kv_host >= need);
        assert!(a.act_host + a.kv_host <= need + 4);
        assert!(a.act_host > 0 && a.kv_host > 0);
    }
}
