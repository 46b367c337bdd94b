//! Paged block tables for the KV/activation hybrid cache.
//!
//! Each request owns an ordered list of logical blocks. A logical block is
//! either a KV block (keys and values for `tokens_per_block` tokens) or an
//! ACT block (the layer inputs for the same tokens, half the bytes), and it
//! is mapped to a physical block number in one of four pools keyed by kind
//! and location. Blocks are bookkeeping records only; no payload is stored.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ModelConfig;

pub type RequestId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum BlockKind {
    Kv,
    Act,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Location {
    HostMem,
    GpuMem,
}

/// Bytes one token occupies at one layer.
pub fn token_bytes(kind: BlockKind, config: &ModelConfig) -> u64 {
    let d = config.hidden_dim as u64 * config.bytes_per_scalar;
    match kind {
        BlockKind::Kv => 2 * d,
        BlockKind::Act => d,
    }
}

/// Bytes of one block at one layer.
pub fn bytes_of(kind: BlockKind, config: &ModelConfig) -> u64 {
    config.tokens_per_block as u64 * token_bytes(kind, config)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockTableEntry {
    pub kind: BlockKind,
    pub location: Location,
    pub pbn: u32,
    pub filled: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockTable {
    pub request_id: RequestId,
    pub prompt_len: usize,
    pub entries: Vec<BlockTableEntry>,
}

impl BlockTable {
    pub fn context_len(&self) -> usize {
        self.entries.iter().map(|e| e.filled).sum()
    }

    /// `(#ACT, #KV)`; a partial block counts as one.
    pub fn blocks_by_kind(&self) -> (usize, usize) {
        let act = self.entries.iter().filter(|e| e.kind == BlockKind::Act).count();
        (act, self.entries.len() - act)
    }

    /// Filled tokens per `(kind, location)`.
    pub fn tokens_at(&self, kind: BlockKind, location: Location) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == kind && e.location == location)
            .map(|e| e.filled)
            .sum()
    }
}

/// Pool sizes in blocks and placement switches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheConfig {
    pub tokens_per_block: usize,
    pub gpu_act_blocks: usize,
    pub host_act_blocks: usize,
    pub host_kv_blocks: usize,
    #[serde(default)]
    pub gpu_kv_blocks: usize,
    /// Place KV blocks on the GPU while its KV pool has room.
    #[serde(default)]
    pub kv_on_gpu: bool,
}

#[derive(Debug, Clone)]
struct Pool {
    capacity: usize,
    next_fresh: u32,
    recycled: BinaryHeap<Reverse<u32>>,
    owner: Vec<Option<RequestId>>,
}

impl Pool {
    fn new(capacity: usize) -> Self {
        Self {
            capacity,
            next_fresh: 0,
            recycled: BinaryHeap::new(),
            owner: Vec::new(),
        }
    }

    fn allocated(&self) -> usize {
        self.next_fresh as usize - self.recycled.len()
    }

    fn free(&self) -> usize {
        self.capacity - self.allocated()
    }

    fn alloc(&mut self, owner: RequestId) -> Option<u32> {
        let pbn = if let Some(Reverse(p)) = self.recycled.pop() {
            p
        } else if (self.next_fresh as usize) < self.capacity {
            self.next_fresh += 1;
            self.owner.push(None);
            self.next_fresh - 1
        } else {
            return None;
        };
        self.owner[pbn as usize] = Some(owner);
        Some(pbn)
    }

    fn release(&mut self, pbn: u32) {
        debug_assert!(self.owner[pbn as usize].is_some());
        self.owner[pbn as usize] = None;
        self.recycled.push(Reverse(pbn));
    }
}

const POOLS: [(BlockKind, Location); 4] = [
    (BlockKind::Kv, Location::HostMem),
    (BlockKind::Kv, Location::GpuMem),
    (BlockKind::Act, Location::HostMem),
    (BlockKind::Act, Location::GpuMem),
];

fn pool_index(kind: BlockKind, location: Location) -> usize {
    POOLS.iter().position(|&p| p == (kind, location)).expect("all pairs listed")
}

/// Block tables for all live requests plus the four physical pools.
///
/// Single writer; independent instances share nothing.
#[derive(Debug, Clone)]
pub struct HybridCache {
    config: CacheConfig,
    pools: [Pool; 4],
    tables: BTreeMap<RequestId, BlockTable>,
}

/// Occupancy of one pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PoolUsage {
    pub kind: BlockKind,
    pub location: Location,
    pub capacity: usize,
    pub allocated: usize,
    pub free: usize,
}

impl HybridCache {
    pub fn new(config: CacheConfig) -> Result<Self> {
        if config.tokens_per_block == 0 {
            return Err(Error::Config("tokens_per_block must be at least 1".into()));
        }
        let cap = |k, l| match (k, l) {
            (BlockKind::Kv, Location::HostMem) => config.host_kv_blocks,
            (BlockKind::Kv, Location::GpuMem) => config.gpu_kv_blocks,
            (BlockKind::Act, Location::HostMem) => config.host_act_blocks,
            (BlockKind::Act, Location::GpuMem) => config.gpu_act_blocks,
        };
        let pools = POOLS.map(|(k, l)| Pool::new(cap(k, l)));
        Ok(Self {
            config,
            pools,
            tables: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    pub fn create_request(&mut self, id: RequestId, prompt_len: usize) -> Result<&BlockTable> {
        if self.tables.contains_key(&id) {
            return Err(Error::DuplicateRequest(id));
        }
        Ok(self.tables.entry(id).or_insert(BlockTable {
            request_id: id,
            prompt_len,
            entries: Vec::new(),
        }))
    }

    pub fn table(&self, id: RequestId) -> Result<&BlockTable> {
        self.tables.get(&id).ok_or(Error::UnknownRequest(id))
    }

    pub fn tables(&self) -> impl Iterator<Item = &BlockTable> {
        self.tables.values()
    }

    fn placement(&self, kind: BlockKind) -> Location {
        let gpu_has_room = |k| self.pools[pool_index(k, Location::GpuMem)].free() > 0;
        match kind {
            BlockKind::Act if gpu_has_room(BlockKind::Act) => Location::GpuMem,
            BlockKind::Kv if self.config.kv_on_gpu && gpu_has_room(BlockKind::Kv) => Location::GpuMem,
            _ => Location::HostMem,
        }
    }

    /// Append an empty block of `kind`. ACT blocks go to GPU memory while
    /// the GPU ACT pool has room, then to host memory; KV blocks go to host
    /// memory unless `kv_on_gpu` is set. On error nothing changes.
    pub fn append_block(&mut self, id: RequestId, kind: BlockKind) -> Result<BlockTableEntry> {
        if !self.tables.contains_key(&id) {
            return Err(Error::UnknownRequest(id));
        }
        let location = self.placement(kind);
        let pbn = self.pools[pool_index(kind, location)]
            .alloc(id)
            .ok_or_else(|| Error::Capacity(format!("no free {kind:?} block in {location:?}")))?;
        let entry = BlockTableEntry {
            kind,
            location,
            pbn,
            filled: 0,
        };
        self.tables.get_mut(&id).expect("checked above").entries.push(entry);
        Ok(entry)
    }

    /// Record one more token. Blocks appended ahead of need act as
    /// reservations and fill in table order.
    pub fn fill_token(&mut self, id: RequestId) -> Result<()> {
        let tpb = self.config.tokens_per_block;
        let table = self.tables.get_mut(&id).ok_or(Error::UnknownRequest(id))?;
        match table.entries.iter_mut().find(|e| e.filled < tpb) {
            Some(e) => {
                e.filled += 1;
                Ok(())
            }
            None => Err(Error::NeedsBlock(id)),
        }
    }

    /// True when the next token needs a fresh block.
    pub fn needs_block(&self, id: RequestId) -> Result<bool> {
        let t = self.table(id)?;
        Ok(t.entries.last().is_none_or(|e| e.filled == self.config.tokens_per_block))
    }

    pub fn blocks_by_kind(&self, id: RequestId) -> Result<(usize, usize)> {
        Ok(self.table(id)?.blocks_by_kind())
    }

    pub fn context_len(&self, id: RequestId) -> Result<usize> {
        Ok(self.table(id)?.context_len())
    }

    pub fn free_request(&mut self, id: RequestId) -> Result<()> {
        let table = self.tables.remove(&id).ok_or(Error::UnknownRequest(id))?;
        for e in table.entries {
            self.pools[pool_index(e.kind, e.location)].release(e.pbn);
        }
        Ok(())
    }

    pub fn usage(&self) -> Vec<PoolUsage> {
        POOLS
            .iter()
            .zip(&self.pools)
            .map(|(&(kind, location), p)| PoolUsage {
                kind,
                location,
                capacity: p.capacity,
                allocated: p.allocated(),
                free: p.free(),
            })
            .collect()
    }

    /// Full consistency scan: pool conservation, single ownership, and
    /// sequence integrity of every table.
    pub fn audit(&self) -> Result<()> {
        let tpb = self.config.tokens_per_block;
        let mut seen: [Vec<Option<RequestId>>; 4] = Default::default();
        for (i, p) in self.pools.iter().enumerate() {
            if p.allocated() + p.free() != p.capacity || p.allocated() > p.capacity {
                return Err(Error::Input(format!("pool {i} does not conserve blocks")));
            }
            seen[i] = vec![None; p.next_fresh as usize];
        }
        for t in self.tables.values() {
            for (j, e) in t.entries.iter().enumerate() {
                let pi = pool_index(e.kind, e.location);
                let slot = seen[pi]
                    .get_mut(e.pbn as usize)
                    .ok_or_else(|| Error::Input(format!("pbn {} never allocated", e.pbn)))?;
                if let Some(other) = slot.replace(t.request_id) {
                    return Err(Error::Input(format!(
                        "pbn {} of {:?} owned by {} and {}",
                        e.pbn, POOLS[pi], other, t.request_id
                    )));
                }
                if self.pools[pi].owner[e.pbn as usize] != Some(t.request_id) {
                    return Err(Error::Input(format!("owner map disagrees for pbn {}", e.pbn)));
                }
                // full blocks, at most one partial block, then empty reservations
                let prev_full = j == 0 || t.entries[j - 1].filled == tpb;
                if e.filled > tpb || (e.filled > 0 && !prev_full) {
                    return Err(Error::Input(format!(
                        "request {} block {j} holds {} tokens",
                        t.request_id, e.filled
                    )));
                }
            }
        }
        for (i, p) in self.pools.iter().enumerate() {
            let owned = seen[i].iter().filter(|s| s.is_some()).count();
            if owned != p.allocated() {
                return Err(Error::Input(format!("pool {i}: {owned} owned, {} allocated", p.allocated())));
            }
        }
        Ok(())
    }

    /// Block tables as JSON, ordered by request id.
    pub fn dump_json(&self) -> serde_json::Value {
        serde_json::to_value(self.tables.values().collect::<Vec<_>>()).expect("tables serialize")
    }
}
