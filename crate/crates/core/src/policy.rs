//! Host memory split between ACT and KV blocks, and per-request block kinds.
//!
//! The split balances two per-layer latencies of a generation iteration:
//!
//! ```text
//! T_pcie = T_load_w + T_load_kv(tokens(kv_host))
//! T_comp = T_kv_gen(tokens(act_host + act_gpu))
//! ```
//!
//! Planning runs in two steps. The first sizes an initial ACT (or KV)
//! allocation that fills the gap between weight loading and regenerating
//! the GPU-resident checkpoints. The second divides the remaining host
//! memory so that the extra recompute time equals the extra load time.
//! Block counts are per-layer working-set counts; one block's host
//! footprint covers all layers.

use serde::{Deserialize, Serialize};

use crate::cache::{bytes_of, BlockKind};
use crate::error::{Error, Result};
use crate::numerics::ModelConfig;
use crate::timing::{HardwareProfile, TimingBundle};

/// Byte sizes that constrain the host split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryBudget {
    /// Host memory available to weights plus cache, bytes.
    pub host_mem: f64,
    /// Bytes of all weights.
    pub s_weight: u64,
    /// Host bytes of one KV block across all layers.
    pub s_kv: u64,
    /// Host bytes of one ACT block across all layers.
    pub s_act: u64,
    pub tokens_per_block: u64,
}

impl MemoryBudget {
    pub fn new(host_mem: f64, s_weight: u64, config: &ModelConfig) -> Self {
        let layers = config.num_layers as u64;
        Self {
            host_mem,
            s_weight,
            s_kv: bytes_of(BlockKind::Kv, config) * layers,
            s_act: bytes_of(BlockKind::Act, config) * layers,
            tokens_per_block: config.tokens_per_block as u64,
        }
    }

    pub fn from_profile(profile: &HardwareProfile, bundle: &TimingBundle, config: &ModelConfig) -> Self {
        Self::new(profile.host_mem, bundle.s_weight_total, config)
    }

    /// Bytes left for cache blocks.
    pub fn cache_bytes(&self) -> f64 {
        self.host_mem - self.s_weight as f64
    }

    pub fn bytes_used(&self, act: u64, kv: u64) -> f64 {
        self.s_act as f64 * act as f64 + self.s_kv as f64 * kv as f64
    }

    fn validate(&self) -> Result<()> {
        if self.s_kv == 0 || self.s_act == 0 || self.tokens_per_block == 0 {
            return Err(Error::Config("block sizes and tokens_per_block must be positive".into()));
        }
        if !self.host_mem.is_finite() {
            return Err(Error::Config("host memory must be finite".into()));
        }
        Ok(())
    }
}

/// ACT blocks kept in GPU memory, per layer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GpuResidency {
    pub act_gpu: u64,
}

/// Result of planning, with the two steps kept for auditing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostAllocation {
    pub act_host: u64,
    pub kv_host: u64,
    pub act_init: u64,
    pub kv_init: u64,
    pub act_remain: u64,
    pub kv_remain: u64,
}

impl HostAllocation {
    /// Every cache byte as KV blocks.
    pub fn kv_only(mem: &MemoryBudget) -> Self {
        let kv = (mem.cache_bytes().max(0.0) / mem.s_kv as f64).floor() as u64;
        Self {
            kv_host: kv,
            kv_remain: kv,
            ..Default::default()
        }
    }

    /// Every cache byte as ACT blocks.
    pub fn act_only(mem: &MemoryBudget) -> Self {
        let act = (mem.cache_bytes().max(0.0) / mem.s_act as f64).floor() as u64;
        Self {
            act_host: act,
            act_remain: act,
            ..Default::default()
        }
    }

    /// Share of ACT among host blocks; `None` when nothing is allocated.
    pub fn act_fraction(&self) -> Option<f64> {
        let total = self.act_host + self.kv_host;
        (total > 0).then(|| self.act_host as f64 / total as f64)
    }
}

/// `(T_pcie, T_comp)` predicted for a plan.
pub fn predicted_times(bundle: &TimingBundle, alloc: &HostAllocation, gpu: GpuResidency, tokens_per_block: u64) -> (f64, f64) {
    let tokens = |b: u64| (b * tokens_per_block) as f64;
    let t_pcie = bundle.t_load_w + bundle.load_kv.at(tokens(alloc.kv_host));
    let t_comp = bundle.kv_gen.at(tokens(alloc.act_host + gpu.act_gpu));
    (t_pcie, t_comp)
}

/// `|T_pcie - T_comp|` for explicit host block counts.
pub fn imbalance(bundle: &TimingBundle, act_host: u64, kv_host: u64, gpu: GpuResidency, tokens_per_block: u64) -> f64 {
    let a = HostAllocation {
        act_host,
        kv_host,
        ..Default::default()
    };
    let (p, c) = predicted_times(bundle, &a, gpu, tokens_per_block);
    (p - c).abs()
}

/// Step one: blocks needed so that neither channel idles during weight
/// loading. At most one of the two results is nonzero.
pub fn initial_cache_allocation(bundle: &TimingBundle, gpu: GpuResidency, tokens_per_block: u64) -> (u64, u64) {
    let t_budget = bundle.t_load_w - bundle.kv_gen.at((gpu.act_gpu * tokens_per_block) as f64);
    // A flat latency model cannot be inverted; step two sizes that axis.
    if t_budget >= 0.0 {
        let tokens = bundle.kv_gen.invert(t_budget).unwrap_or(0);
        (tokens / tokens_per_block, 0)
    } else {
        let tokens = bundle.load_kv.invert(-t_budget).unwrap_or(0);
        (0, tokens / tokens_per_block)
    }
}

/// Step two: split the memory left after weights and the initial blocks so
/// that `T_kv_gen(tokens(act)) = T_load_kv(tokens(kv))`.
///
/// The KV count is floored and the ACT count then takes whatever whole ACT
/// blocks still fit. A negative solution on either axis is clamped to zero
/// with all memory going to the other kind.
pub fn alloc_remaining(
    bundle: &TimingBundle,
    mem: &MemoryBudget,
    act_init: u64,
    kv_init: u64,
) -> Result<(u64, u64)> {
    mem.validate()?;
    let remaining = mem.cache_bytes() - mem.bytes_used(act_init, kv_init);
    if remaining < 0.0 {
        return Err(Error::Capacity(format!(
            "host memory short by {:.0} bytes for weights and initial blocks",
            -remaining
        )));
    }
    let s_act = mem.s_act as f64;
    let s_kv = mem.s_kv as f64;
    let tpb = mem.tokens_per_block as f64;
    let g = &bundle.kv_gen;
    let l = &bundle.load_kv;
    let denom = tpb * (l.slope + g.slope * s_kv / s_act);
    let kv_max = (remaining / s_kv).floor();
    let kv = if denom <= 0.0 {
        kv_max
    } else {
        let y = (g.slope * tpb * remaining / s_act + g.intercept - l.intercept) / denom;
        floor_blocks(y).clamp(0.0, kv_max)
    };
    let act = floor_blocks((remaining - s_kv * kv) / s_act).max(0.0);
    Ok((act as u64, kv as u64))
}

/// Floor that absorbs rounding error when `v` is an integer in exact
/// arithmetic.
fn floor_blocks(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() <= 1e-9 * r.abs().max(1.0) {
        r
    } else {
        v.floor()
    }
}

/// Both steps, then a whole-block adjustment.
///
/// Flooring can leave the split a few blocks away from the best integer
/// point, and on a memory-filling frontier one KV block trades for two ACT
/// blocks. Along that frontier `T_pcie - T_comp` only grows with the KV
/// count, so the final step walks downhill in `|T_pcie - T_comp|` from the
/// algebraic solution, never dropping below the step-one allocation. Ties
/// go to fewer KV blocks.
pub fn plan_host_allocation(bundle: &TimingBundle, mem: &MemoryBudget, gpu: GpuResidency) -> Result<HostAllocation> {
    bundle.validate()?;
    mem.validate()?;
    let tpb = mem.tokens_per_block;
    let (act_init, kv_init) = initial_cache_allocation(bundle, gpu, tpb);
    let (act_rem, kv_rem) = alloc_remaining(bundle, mem, act_init, kv_init)?;

    let cache = mem.cache_bytes();
    let point = |kv: u64| -> Option<(f64, u64)> {
        let act = floor_blocks((cache - mem.bytes_used(0, kv)) / mem.s_act as f64);
        (act >= act_init as f64).then(|| (imbalance(bundle, act as u64, kv, gpu, tpb), act as u64))
    };
    let mut kv = kv_init + kv_rem;
    let (mut cost, mut act) = point(kv).unwrap_or((imbalance(bundle, act_init + act_rem, kv, gpu, tpb), act_init + act_rem));
    loop {
        let down = kv.checked_sub(1).filter(|&k| k >= kv_init).and_then(|k| point(k).map(|p| (k, p)));
        let up = point(kv + 1).map(|p| (kv + 1, p));
        match (down, up) {
            (Some((k, (c, a))), _) if c <= cost => (kv, cost, act) = (k, c, a),
            (_, Some((k, (c, a)))) if c < cost => (kv, cost, act) = (k, c, a),
            _ => break,
        }
    }
    Ok(HostAllocation {
        act_host: act,
        kv_host: kv,
        act_init,
        kv_init,
        act_remain: act - act_init,
        kv_remain: kv - kv_init,
    })
}

/// Kind for a request's next block that keeps its ACT share closest to
/// `target`; ties go to ACT.
pub fn kind_for_fraction(act_req: u64, kv_req: u64, target: f64) -> BlockKind {
    let total = (act_req + kv_req + 1) as f64;
    let with_act = ((act_req + 1) as f64 / total - target).abs();
    let with_kv = (act_req as f64 / total - target).abs();
    if with_act <= with_kv {
        BlockKind::Act
    } else {
        BlockKind::Kv
    }
}

/// Next block kind for a request holding `act_req` ACT and `kv_req` KV
/// blocks, tracking the host ratio. An empty allocation yields KV.
pub fn next_block_kind(act_req: u64, kv_req: u64, allocation: &HostAllocation) -> BlockKind {
    match allocation.act_fraction() {
        Some(f) => kind_for_fraction(act_req, kv_req, f),
        None => BlockKind::Kv,
    }
}
