//! Mini-batch formation under GPU buffer capacities.
//!
//! A mini-batch is balanced when regenerating its ACT blocks takes as long
//! as loading its KV blocks. The greedy packer grows one batch at a time,
//! admitting a request only when it keeps the batch at least as balanced.

use serde::{Deserialize, Serialize};

use crate::cache::{bytes_of, BlockKind, RequestId};
use crate::error::{Error, Result};
use crate::numerics::ModelConfig;
use crate::timing::{LinearTimeModel, TimingBundle};

/// Largest request count [`brute_force_pack`] accepts.
pub const BRUTE_FORCE_LIMIT: usize = 10;

/// Per-request block demand for one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackRequest {
    pub id: RequestId,
    pub act_blocks: u64,
    pub kv_blocks: u64,
}

impl PackRequest {
    pub fn new(id: RequestId, act_blocks: u64, kv_blocks: u64) -> Self {
        Self { id, act_blocks, kv_blocks }
    }

    pub fn total(&self) -> u64 {
        self.act_blocks + self.kv_blocks
    }
}

/// GPU buffer capacity in blocks of each kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackerConfig {
    pub act_max: u64,
    pub kv_max: u64,
}

impl PackerConfig {
    pub fn new(act_max: u64, kv_max: u64) -> Result<Self> {
        let cfg = Self { act_max, kv_max };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Capacities from per-kind buffer sizes in bytes, for one layer.
    pub fn from_buffer_bytes(act_bytes: u64, kv_bytes: u64, config: &ModelConfig) -> Result<Self> {
        Self::new(
            act_bytes / bytes_of(BlockKind::Act, config),
            kv_bytes / bytes_of(BlockKind::Kv, config),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.act_max == 0 || self.kv_max == 0 {
            return Err(Error::Config(format!(
                "packer capacities must be at least one block (act_max={}, kv_max={})",
                self.act_max, self.kv_max
            )));
        }
        Ok(())
    }

    fn fits(&self, act: u64, kv: u64) -> bool {
        act <= self.act_max && kv <= self.kv_max
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MiniBatch {
    pub requests: Vec<RequestId>,
    pub act_mb: u64,
    pub kv_mb: u64,
}

impl MiniBatch {
    pub fn from_requests(reqs: &[PackRequest]) -> Self {
        let mut mb = MiniBatch::default();
        for r in reqs {
            mb.push(r);
        }
        mb
    }

    fn push(&mut self, r: &PackRequest) {
        self.requests.push(r.id);
        self.act_mb += r.act_blocks;
        self.kv_mb += r.kv_blocks;
    }

    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }
}

// No blocks means no kernel launch or transfer, so the intercept is not paid.
fn predicted(model: &LinearTimeModel, blocks: u64, tokens_per_block: u64) -> f64 {
    if blocks == 0 {
        0.0
    } else {
        model.at((blocks * tokens_per_block) as f64)
    }
}

fn balance_of(act: u64, kv: u64, bundle: &TimingBundle, tokens_per_block: u64) -> f64 {
    let num = predicted(&bundle.kv_gen, act, tokens_per_block);
    let den = predicted(&bundle.load_kv, kv, tokens_per_block);
    if den == 0.0 {
        if num == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        num / den
    }
}

fn fb_of(b: f64) -> f64 {
    if b == 0.0 {
        f64::INFINITY
    } else {
        b.max(1.0 / b)
    }
}

/// Ratio of predicted recompute time to predicted load time.
///
/// With nothing to load and something to recompute the ratio is
/// `+inf`; with neither it is 1. A kind with zero blocks takes zero time.
pub fn balance(mb: &MiniBatch, bundle: &TimingBundle, tokens_per_block: u64) -> f64 {
    balance_of(mb.act_mb, mb.kv_mb, bundle, tokens_per_block)
}

/// `max(b, 1/b)`: 1 for a perfectly balanced batch, larger otherwise.
pub fn cost_fb(mb: &MiniBatch, bundle: &TimingBundle, tokens_per_block: u64) -> f64 {
    fb_of(balance(mb, bundle, tokens_per_block))
}

/// Arithmetic mean of `cost_fb` over batches.
pub fn mean_fb(batches: &[MiniBatch], bundle: &TimingBundle, tokens_per_block: u64) -> f64 {
    if batches.is_empty() {
        return 1.0;
    }
    batches.iter().map(|b| cost_fb(b, bundle, tokens_per_block)).sum::<f64>() / batches.len() as f64
}

/// One accepted insertion, recorded for replay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Insertion {
    pub batch: usize,
    pub request: RequestId,
    /// `None` when the batch was empty before the insertion.
    pub fb_before: Option<f64>,
    pub fb_after: f64,
}

fn check_fits(requests: &[PackRequest], cfg: &PackerConfig) -> Result<()> {
    cfg.validate()?;
    if let Some(r) = requests.iter().find(|r| !cfg.fits(r.act_blocks, r.kv_blocks)) {
        return Err(Error::Input(format!(
            "request {} needs {} ACT and {} KV blocks, over capacity {} ACT / {} KV",
            r.id, r.act_blocks, r.kv_blocks, cfg.act_max, cfg.kv_max
        )));
    }
    Ok(())
}

/// Greedy packing; see [`form_minibatches_traced`] for the insertion log.
pub fn form_minibatches(
    requests: &[PackRequest],
    cfg: &PackerConfig,
    bundle: &TimingBundle,
    tokens_per_block: u64,
) -> Result<Vec<MiniBatch>> {
    form_minibatches_traced(requests, cfg, bundle, tokens_per_block).map(|(b, _)| b)
}

/// Greedy packing.
///
/// Requests are visited largest first (total blocks, then id). The open
/// batch takes any request that fits and does not raise its `F_b`; an empty
/// batch takes the first remaining request. Once a full pass admits
/// nothing, the batch is closed.
pub fn form_minibatches_traced(
    requests: &[PackRequest],
    cfg: &PackerConfig,
    bundle: &TimingBundle,
    tokens_per_block: u64,
) -> Result<(Vec<MiniBatch>, Vec<Insertion>)> {
    check_fits(requests, cfg)?;
    let mut pending: Vec<PackRequest> = requests.to_vec();
    pending.sort_by(|a, b| b.total().cmp(&a.total()).then(a.id.cmp(&b.id)));

    let mut batches = Vec::new();
    let mut log = Vec::new();
    while !pending.is_empty() {
        let idx = batches.len();
        let mut open = MiniBatch::default();
        loop {
            let mut admitted = false;
            let mut i = 0;
            while i < pending.len() {
                let r = pending[i];
                let (act, kv) = (open.act_mb + r.act_blocks, open.kv_mb + r.kv_blocks);
                let before = (!open.is_empty()).then(|| cost_fb(&open, bundle, tokens_per_block));
                let after = fb_of(balance_of(act, kv, bundle, tokens_per_block));
                let ok = cfg.fits(act, kv) && before.is_none_or(|b| after <= b);
                if ok {
                    open.push(&r);
                    log.push(Insertion {
                        batch: idx,
                        request: r.id,
                        fb_before: before,
                        fb_after: after,
                    });
                    pending.remove(i);
                    admitted = true;
                } else {
                    i += 1;
                }
            }
            if !admitted {
                break;
            }
        }
        batches.push(open);
    }
    Ok((batches, log))
}

/// Exhaustive search over set partitions: fewest batches, then lowest mean
/// `F_b`. Refuses more than [`BRUTE_FORCE_LIMIT`] requests.
pub fn brute_force_pack(
    requests: &[PackRequest],
    cfg: &PackerConfig,
    bundle: &TimingBundle,
    tokens_per_block: u64,
) -> Result<Vec<MiniBatch>> {
    if requests.len() > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge(requests.len(), BRUTE_FORCE_LIMIT));
    }
    check_fits(requests, cfg)?;
    if requests.is_empty() {
        return Ok(Vec::new());
    }

    struct Search<'a> {
        reqs: &'a [PackRequest],
        cfg: &'a PackerConfig,
        bundle: &'a TimingBundle,
        tpb: u64,
        groups: Vec<Vec<usize>>,
        sums: Vec<(u64, u64)>,
        best: Option<(usize, f64, Vec<Vec<usize>>)>,
    }

    impl Search<'_> {
        // Restricted growth: request i joins an existing group or opens the next one.
        fn walk(&mut self, i: usize) {
            if let Some((count, _, _)) = &self.best {
                if self.groups.len() > *count {
                    return;
                }
            }
            if i == self.reqs.len() {
                let n = self.groups.len();
                let mean = self
                    .sums
                    .iter()
                    .map(|&(a, k)| fb_of(balance_of(a, k, self.bundle, self.tpb)))
                    .sum::<f64>()
                    / n as f64;
                let better = match &self.best {
                    None => true,
                    Some((c, m, _)) => n < *c || (n == *c && mean < *m),
                };
                if better {
                    self.best = Some((n, mean, self.groups.clone()));
                }
                return;
            }
            let r = self.reqs[i];
            for g in 0..self.groups.len() {
                let (a, k) = self.sums[g];
                if self.cfg.fits(a + r.act_blocks, k + r.kv_blocks) {
                    self.groups[g].push(i);
                    self.sums[g] = (a + r.act_blocks, k + r.kv_blocks);
                    self.walk(i + 1);
                    self.groups[g].pop();
                    self.sums[g] = (a, k);
                }
            }
            self.groups.push(vec![i]);
            self.sums.push((r.act_blocks, r.kv_blocks));
            self.walk(i + 1);
            self.groups.pop();
            self.sums.pop();
        }
    }

    let mut s = Search {
        reqs: requests,
        cfg,
        bundle,
        tpb: tokens_per_block,
        groups: Vec::new(),
        sums: Vec::new(),
        best: None,
    };
    s.walk(0);
    let (_, _, groups) = s.best.expect("every request fits alone");
    Ok(groups
        .into_iter()
        .map(|g| {
            let members: Vec<PackRequest> = g.into_iter().map(|i| requests[i]).collect();
            MiniBatch::from_requests(&members)
        })
        .collect())
}
