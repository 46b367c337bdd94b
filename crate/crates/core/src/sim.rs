//! Discrete-event model of offloaded generation on two resources: the PCIe
//! link and the GPU.
//!
//! Every generation iteration walks the decoder layers. At each layer the
//! running requests are split into mini-batches and each mini-batch becomes
//! a *stage*. Per stage the PCIe link loads ACT then KV blocks, the GPU
//! regenerates KV from the loaded activations and then runs the layer.
//! Weights for the next layer stream in while the current one computes.
//!
//! Buffers are double-buffered: a stage's loads wait for the stage two
//! positions earlier to finish computing, and weight slot `G` is freed when
//! layer `G - 2` completes. Scheduling is non-preemptive list scheduling:
//! whenever a channel is idle it starts the highest-priority ready task.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cache::{token_bytes, BlockKind};
use crate::error::{Error, Result};
use crate::numerics::{decode_layer_flops, flop_count, ModelConfig, OpKind};
use crate::packing::{form_minibatches, PackRequest, PackerConfig};
use crate::policy::{kind_for_fraction, GpuResidency, HostAllocation};
use crate::timing::{HardwareProfile, TimingBundle};

/// How a request's cache blocks are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Mode {
    /// ACT and KV blocks in the planned host ratio.
    Hybrid,
    KvOnly,
    ActOnly,
    /// This fraction of blocks keeps only token ids; their KV is rebuilt
    /// by rerunning the layers. The rest is KV.
    TokenRecompute(f64),
}

impl Mode {
    pub fn label(&self) -> String {
        self.to_string()
    }

    /// Target share of "cheap" blocks (ACT, or token ids under
    /// [`Mode::TokenRecompute`]) for a planned allocation.
    fn target(&self, allocation: &HostAllocation) -> Option<f64> {
        match *self {
            Mode::Hybrid => allocation.act_fraction(),
            Mode::KvOnly => Some(0.0),
            Mode::ActOnly => Some(1.0),
            Mode::TokenRecompute(r) => Some(r),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Hybrid => f.write_str("hybrid"),
            Mode::KvOnly => f.write_str("kv_only"),
            Mode::ActOnly => f.write_str("act_only"),
            Mode::TokenRecompute(r) => write!(f, "token_recompute({r})"),
        }
    }
}

impl From<Mode> for String {
    fn from(m: Mode) -> String {
        m.to_string()
    }
}

impl TryFrom<String> for Mode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hybrid" => Ok(Mode::Hybrid),
            "kv_only" => Ok(Mode::KvOnly),
            "act_only" => Ok(Mode::ActOnly),
            _ => {
                let ratio = s
                    .strip_prefix("token_recompute(")
                    .and_then(|r| r.strip_suffix(')'))
                    .or_else(|| s.strip_prefix("token_recompute:"))
                    .ok_or_else(|| Error::Input(format!("unknown mode `{s}`")))?;
                let r: f64 = ratio
                    .parse()
                    .map_err(|_| Error::Input(format!("bad recompute ratio in `{s}`")))?;
                Ok(Mode::TokenRecompute(r))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestSpec {
    pub prompt_len: u64,
    pub gen_len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub model: ModelConfig,
    pub profile: HardwareProfile,
    pub bundle: TimingBundle,
    pub allocation: HostAllocation,
    pub act_gpu: GpuResidency,
    pub packer: PackerConfig,
    pub batch: Vec<RequestSpec>,
    pub mode: Mode,
    /// Write new tokens' cache entries back to host memory.
    pub store_checkpoint_traffic: bool,
    /// Stores get their own device-to-host channel.
    pub full_duplex: bool,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.profile.validate()?;
        self.bundle.validate()?;
        self.packer.validate()?;
        if let Mode::TokenRecompute(r) = self.mode {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("recompute ratio {r} outside [0, 1]")));
            }
        }
        if let Some(i) = self.batch.iter().position(|r| r.prompt_len == 0) {
            return Err(Error::Config(format!("request {i} has an empty prompt")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    /// Host to device; also carries stores unless full duplex.
    Pcie,
    Gpu,
    /// Device to host, only in full-duplex runs.
    PcieD2h,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Prefill,
    WeightLoad,
    ActLoad,
    KvLoad,
    KvGen,
    TokenRecompute,
    QkvAndForward,
    KvStore,
    ActStore,
}

impl EventKind {
    pub fn name(self) -> &'static str {
        match self {
            EventKind::Prefill => "prefill",
            EventKind::WeightLoad => "weight_load",
            EventKind::ActLoad => "act_load",
            EventKind::KvLoad => "kv_load",
            EventKind::KvGen => "kv_gen",
            EventKind::TokenRecompute => "token_recompute",
            EventKind::QkvAndForward => "qkv_and_forward",
            EventKind::KvStore => "kv_store",
            EventKind::ActStore => "act_store",
        }
    }

    fn rank(self) -> u8 {
        match self {
            EventKind::Prefill | EventKind::WeightLoad | EventKind::KvGen => 0,
            EventKind::ActLoad | EventKind::TokenRecompute => 1,
            EventKind::KvLoad | EventKind::QkvAndForward => 2,
            EventKind::KvStore => 3,
            EventKind::ActStore => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub channel: Channel,
    pub kind: EventKind,
    pub start: f64,
    pub end: f64,
    pub layer: usize,
    pub minibatch: usize,
    pub iteration: usize,
    /// Tokens moved or processed.
    pub tokens: u64,
    /// Bytes moved over PCIe; zero for compute.
    pub bytes: u64,
}

impl SimEvent {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Traffic {
    pub weights: u64,
    pub kv_load: u64,
    pub act_load: u64,
    pub kv_store: u64,
    pub act_store: u64,
}

impl Traffic {
    pub fn context_load(&self) -> u64 {
        self.kv_load + self.act_load
    }

    pub fn stores(&self) -> u64 {
        self.kv_store + self.act_store
    }

    pub fn total(&self) -> u64 {
        self.weights + self.context_load() + self.stores()
    }

    fn add(&mut self, kind: EventKind, bytes: u64) {
        match kind {
            EventKind::WeightLoad => self.weights += bytes,
            EventKind::KvLoad => self.kv_load += bytes,
            EventKind::ActLoad => self.act_load += bytes,
            EventKind::KvStore => self.kv_store += bytes,
            EventKind::ActStore => self.act_store += bytes,
            _ => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimMetrics {
    pub tokens_generated: u64,
    pub makespan: f64,
    pub throughput: f64,
    /// Busy share of the PCIe host-to-device channel over the generation
    /// window (prefill excluded).
    pub pcie_busy: f64,
    pub gpu_busy: f64,
    pub prefill_seconds: f64,
    pub iterations: usize,
    /// Generation window divided by the iteration count.
    pub mean_iteration_latency: f64,
    /// Largest mini-batch count used at any iteration.
    pub max_minibatches: usize,
    pub traffic: Traffic,
}

/// Per-category bytes plus shares of the total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficReport {
    pub traffic: Traffic,
    pub context_load: u64,
    pub stores: u64,
    pub total: u64,
    pub share_weights: f64,
    pub share_kv_load: f64,
    pub share_act_load: f64,
    pub share_stores: f64,
}

pub fn traffic_report(metrics: &SimMetrics) -> TrafficReport {
    let t = metrics.traffic;
    let total = t.total();
    let share = |b: u64| if total == 0 { 0.0 } else { b as f64 / total as f64 };
    TrafficReport {
        traffic: t,
        context_load: t.context_load(),
        stores: t.stores(),
        total,
        share_weights: share(t.weights),
        share_kv_load: share(t.kv_load),
        share_act_load: share(t.act_load),
        share_stores: share(t.stores()),
    }
}

/// Where one cache block lives and how its KV is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Kv,
    ActHost,
    ActGpu,
    Tokens,
}

#[derive(Debug, Clone, Default)]
struct RequestState {
    // tokens and blocks per slot, indexed by Slot as usize
    tokens: [u64; 4],
    blocks: [u64; 4],
    last: Option<Slot>,
    last_fill: u64,
}

impl Slot {
    fn idx(self) -> usize {
        self as usize
    }
}

struct Layout {
    target: Option<f64>,
    is_recompute: bool,
    gpu_free: u64,
    tpb: u64,
}

impl Layout {
    fn choose(&mut self, r: &RequestState) -> Slot {
        let Some(target) = self.target else { return Slot::Kv };
        let kv = r.blocks[Slot::Kv.idx()];
        if self.is_recompute {
            return match kind_for_fraction(r.blocks[Slot::Tokens.idx()], kv, target) {
                BlockKind::Act => Slot::Tokens,
                BlockKind::Kv => Slot::Kv,
            };
        }
        match kind_for_fraction(r.blocks[Slot::ActHost.idx()], kv, target) {
            BlockKind::Kv => Slot::Kv,
            BlockKind::Act if self.gpu_free > 0 => {
                self.gpu_free -= 1;
                Slot::ActGpu
            }
            BlockKind::Act => Slot::ActHost,
        }
    }

    /// Appends one token, opening a block when needed; returns its slot.
    fn append(&mut self, r: &mut RequestState) -> Slot {
        let slot = match r.last {
            Some(s) if r.last_fill < self.tpb => s,
            _ => {
                let s = self.choose(r);
                r.blocks[s.idx()] += 1;
                r.last = Some(s);
                r.last_fill = 0;
                s
            }
        };
        r.last_fill += 1;
        r.tokens[slot.idx()] += 1;
        slot
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Priority {
    class: u8,
    stage: u64,
    rank: u8,
}

#[derive(Debug, Clone)]
struct Task {
    channel: Channel,
    kind: EventKind,
    duration: f64,
    priority: Priority,
    layer: usize,
    minibatch: usize,
    iteration: usize,
    tokens: u64,
    bytes: u64,
    pending: usize,
    successors: Vec<usize>,
}

#[derive(Default)]
struct Graph {
    tasks: Vec<Task>,
}

impl Graph {
    fn add(&mut self, task: Task, deps: &[usize]) -> usize {
        let id = self.tasks.len();
        let mut deps = deps.to_vec();
        deps.sort_unstable();
        deps.dedup();
        self.tasks.push(Task {
            pending: deps.len(),
            ..task
        });
        for d in deps {
            self.tasks[d].successors.push(id);
        }
        id
    }
}

#[derive(PartialEq)]
struct Completion(f64, usize);

impl Eq for Completion {}

impl PartialOrd for Completion {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Completion {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

fn run_schedule(graph: &mut Graph) -> Vec<SimEvent> {
    const CHANNELS: [Channel; 3] = [Channel::Pcie, Channel::Gpu, Channel::PcieD2h];
    let ch_idx = |c: Channel| CHANNELS.iter().position(|&x| x == c).unwrap();
    let mut ready: [BinaryHeap<Reverse<(Priority, usize)>>; 3] = Default::default();
    let mut busy = [false; 3];
    let mut done: BinaryHeap<Reverse<Completion>> = BinaryHeap::new();
    let mut start = vec![0.0; graph.tasks.len()];
    let mut events = Vec::with_capacity(graph.tasks.len());

    for (id, t) in graph.tasks.iter().enumerate() {
        if t.pending == 0 {
            ready[ch_idx(t.channel)].push(Reverse((t.priority, id)));
        }
    }
    let mut now = 0.0_f64;
    loop {
        for c in 0..3 {
            if !busy[c] {
                if let Some(Reverse((_, id))) = ready[c].pop() {
                    busy[c] = true;
                    start[id] = now;
                    done.push(Reverse(Completion(now + graph.tasks[id].duration, id)));
                }
            }
        }
        let Some(Reverse(Completion(t, id))) = done.pop() else { break };
        now = t;
        let task = &graph.tasks[id];
        busy[ch_idx(task.channel)] = false;
        events.push(SimEvent {
            channel: task.channel,
            kind: task.kind,
            start: start[id],
            end: t,
            layer: task.layer,
            minibatch: task.minibatch,
            iteration: task.iteration,
            tokens: task.tokens,
            bytes: task.bytes,
        });
        let succ = std::mem::take(&mut graph.tasks[id].successors);
        for s in succ {
            let st = &mut graph.tasks[s];
            st.pending -= 1;
            if st.pending == 0 {
                ready[ch_idx(st.channel)].push(Reverse((st.priority, s)));
            }
        }
    }
    assert_eq!(events.len(), graph.tasks.len(), "dependency cycle in task graph");
    events.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.end.total_cmp(&b.end)));
    events
}

/// Runs the whole batch: prefill, then one iteration per generated token.
///
/// Returns metrics and the chronological event list.
pub fn simulate(config: &SimConfig) -> Result<(SimMetrics, Vec<SimEvent>)> {
    config.validate()?;
    let m = &config.model;
    let bundle = &config.bundle;
    let profile = &config.profile;
    let layers = m.num_layers;
    let tpb = m.tokens_per_block as u64;
    let kv_tok_bytes = token_bytes(BlockKind::Kv, m);
    let act_tok_bytes = token_bytes(BlockKind::Act, m);
    let half = |n: u64| n as f64 / 2.0;

    let mut layout = Layout {
        target: config.mode.target(&config.allocation),
        is_recompute: matches!(config.mode, Mode::TokenRecompute(_)),
        gpu_free: config.act_gpu.act_gpu,
        tpb,
    };
    let mut states: Vec<RequestState> = vec![RequestState::default(); config.batch.len()];
    for (st, req) in states.iter_mut().zip(&config.batch) {
        for _ in 0..req.prompt_len {
            layout.append(st);
        }
    }

    let mut g = Graph::default();
    let task = |channel, kind, duration: f64, priority, layer, minibatch, iteration, tokens, bytes| Task {
        channel,
        kind,
        duration,
        priority,
        layer,
        minibatch,
        iteration,
        tokens,
        bytes,
        pending: 0,
        successors: Vec::new(),
    };
    let prio = |class: u8, stage: u64, kind: EventKind| Priority {
        class,
        stage,
        rank: kind.rank(),
    };

    let prefill_flops: u64 = config
        .batch
        .iter()
        .map(|r| layers as u64 * flop_count(OpKind::FullLayer, m, r.prompt_len, 0))
        .sum();
    let prompt_tokens: u64 = config.batch.iter().map(|r| r.prompt_len).sum();
    let prefill = g.add(
        task(
            Channel::Gpu,
            EventKind::Prefill,
            profile.compute_seconds(prefill_flops),
            prio(0, 0, EventKind::Prefill),
            0,
            0,
            0,
            prompt_tokens,
            0,
        ),
        &[],
    );
    let prefill_seconds = profile.compute_seconds(prefill_flops);

    let store_channel = if config.full_duplex { Channel::PcieD2h } else { Channel::Pcie };
    let iterations = config.batch.iter().map(|r| r.gen_len).max().unwrap_or(0) as usize;

    // forwards of each global layer, in stage order
    let mut layer_forwards: Vec<Vec<usize>> = Vec::new();
    let mut stage_forwards: Vec<usize> = Vec::new();
    // stores issued at layer l of the previous iteration
    let mut prev_stores: Vec<Vec<usize>> = vec![Vec::new(); layers];
    let mut stage: u64 = 1;
    let mut max_mbs = 0;

    for it in 0..iterations {
        let active: Vec<usize> = (0..config.batch.len()).filter(|&r| (it as u64) < config.batch[r].gen_len).collect();
        let demands: Vec<PackRequest> = active
            .iter()
            .map(|&r| {
                let s = &states[r];
                PackRequest::new(
                    r as u64,
                    s.blocks[Slot::ActHost.idx()] + s.blocks[Slot::Tokens.idx()],
                    s.blocks[Slot::Kv.idx()],
                )
            })
            .collect();
        let batches = form_minibatches(&demands, &config.packer, bundle, tpb).map_err(|e| match e {
            Error::Input(msg) => Error::Config(format!("GPU buffer smaller than one mini-batch: {msg}")),
            other => other,
        })?;
        max_mbs = max_mbs.max(batches.len());

        // new-token slots are fixed by the layout before any layer runs
        let mut new_slot = vec![None; states.len()];
        let ctx: Vec<u64> = states.iter().map(|s| s.tokens.iter().sum()).collect();
        let snapshot = states.clone();
        for &r in &active {
            new_slot[r] = Some(layout.append(&mut states[r]));
        }

        let mut stores_now: Vec<Vec<usize>> = vec![Vec::new(); layers];
        let mut prev_mb_forward: Vec<usize> = Vec::new();
        let mut prev_mb_recompute: Vec<Option<usize>> = Vec::new();
        for layer in 0..layers {
            let gl = it * layers + layer;
            let first_stage = stage;
            let mut w_deps = vec![prefill];
            if gl >= 2 {
                w_deps.extend(&layer_forwards[gl - 2]);
            }
            let weight = g.add(
                task(
                    Channel::Pcie,
                    EventKind::WeightLoad,
                    bundle.t_load_w,
                    prio(0, first_stage, EventKind::WeightLoad),
                    layer,
                    0,
                    it,
                    0,
                    bundle.s_weight_layer,
                ),
                &w_deps,
            );

            let mut forwards = Vec::with_capacity(batches.len());
            let mut recomputes = Vec::with_capacity(batches.len());
            for (mbi, mb) in batches.iter().enumerate() {
                let members: Vec<usize> = mb.requests.iter().map(|&id| id as usize).collect();
                let sum_slot = |slot: Slot| -> u64 { members.iter().map(|&r| snapshot[r].tokens[slot.idx()]).sum() };
                let act_host = sum_slot(Slot::ActHost);
                let act_gpu = sum_slot(Slot::ActGpu);
                let kv = sum_slot(Slot::Kv);

                let mut load_deps = vec![prefill];
                if stage_forwards.len() >= 2 {
                    load_deps.push(stage_forwards[stage_forwards.len() - 2]);
                }
                load_deps.extend(&prev_stores[layer]);

                let act_load = (act_host > 0).then(|| {
                    g.add(
                        task(
                            Channel::Pcie,
                            EventKind::ActLoad,
                            bundle.load_kv.at(half(act_host)),
                            prio(0, stage, EventKind::ActLoad),
                            layer,
                            mbi,
                            it,
                            act_host,
                            act_host * act_tok_bytes,
                        ),
                        &load_deps,
                    )
                });
                let kv_load = (kv > 0).then(|| {
                    g.add(
                        task(
                            Channel::Pcie,
                            EventKind::KvLoad,
                            bundle.load_kv.at(kv as f64),
                            prio(0, stage, EventKind::KvLoad),
                            layer,
                            mbi,
                            it,
                            kv,
                            kv * kv_tok_bytes,
                        ),
                        &load_deps,
                    )
                });
                let act_total = act_host + act_gpu;
                let kv_gen = (act_total > 0).then(|| {
                    let mut deps = vec![weight, prefill];
                    deps.extend(act_load);
                    g.add(
                        task(
                            Channel::Gpu,
                            EventKind::KvGen,
                            bundle.kv_gen.at(act_total as f64),
                            prio(0, stage, EventKind::KvGen),
                            layer,
                            mbi,
                            it,
                            act_total,
                            0,
                        ),
                        &deps,
                    )
                });
                let rec_flops: u64 = members
                    .iter()
                    .map(|&r| flop_count(OpKind::FullLayer, m, snapshot[r].tokens[Slot::Tokens.idx()], 0))
                    .sum();
                let rec_tokens = sum_slot(Slot::Tokens);
                let recompute = (rec_tokens > 0).then(|| {
                    let mut deps = vec![weight, prefill];
                    if layer > 0 {
                        deps.extend(prev_mb_recompute[mbi]);
                    }
                    g.add(
                        task(
                            Channel::Gpu,
                            EventKind::TokenRecompute,
                            profile.compute_seconds(rec_flops),
                            prio(0, stage, EventKind::TokenRecompute),
                            layer,
                            mbi,
                            it,
                            rec_tokens,
                            0,
                        ),
                        &deps,
                    )
                });
                recomputes.push(recompute);

                let fwd_flops: u64 = members.iter().map(|&r| decode_layer_flops(m, ctx[r])).sum();
                let mut deps = vec![weight, prefill];
                deps.extend(kv_load);
                deps.extend(kv_gen);
                deps.extend(recompute);
                if layer > 0 {
                    deps.push(prev_mb_forward[mbi]);
                } else if gl > 0 {
                    deps.extend(&layer_forwards[gl - 1]);
                }
                let forward = g.add(
                    task(
                        Channel::Gpu,
                        EventKind::QkvAndForward,
                        profile.compute_seconds(fwd_flops),
                        prio(0, stage, EventKind::QkvAndForward),
                        layer,
                        mbi,
                        it,
                        members.len() as u64,
                        0,
                    ),
                    &deps,
                );
                forwards.push(forward);
                stage_forwards.push(forward);

                if config.store_checkpoint_traffic {
                    let count = |slot: Slot| members.iter().filter(|&&r| new_slot[r] == Some(slot)).count() as u64;
                    let kv_new = count(Slot::Kv);
                    let act_new = count(Slot::ActHost);
                    if kv_new > 0 {
                        stores_now[layer].push(g.add(
                            task(
                                store_channel,
                                EventKind::KvStore,
                                bundle.load_kv.at(kv_new as f64),
                                prio(1, stage, EventKind::KvStore),
                                layer,
                                mbi,
                                it,
                                kv_new,
                                kv_new * kv_tok_bytes,
                            ),
                            &[forward],
                        ));
                    }
                    if act_new > 0 {
                        stores_now[layer].push(g.add(
                            task(
                                store_channel,
                                EventKind::ActStore,
                                bundle.load_kv.at(half(act_new)),
                                prio(1, stage, EventKind::ActStore),
                                layer,
                                mbi,
                                it,
                                act_new,
                                act_new * act_tok_bytes,
                            ),
                            &[forward],
                        ));
                    }
                }
                stage += 1;
            }
            prev_mb_forward = forwards.clone();
            prev_mb_recompute = recomputes;
            layer_forwards.push(forwards);
        }
        prev_stores = stores_now;
    }

    let events = run_schedule(&mut g);
    let makespan = events.iter().map(|e| e.end).fold(0.0, f64::max);
    let window = makespan - prefill_seconds;
    let busy_of = |c: Channel| -> f64 {
        let b: f64 = events
            .iter()
            .filter(|e| e.channel == c && e.kind != EventKind::Prefill)
            .map(SimEvent::duration)
            .sum();
        if window > 0.0 {
            (b / window).min(1.0)
        } else {
            0.0
        }
    };
    let mut traffic = Traffic::default();
    for e in &events {
        traffic.add(e.kind, e.bytes);
    }
    let tokens_generated: u64 = config.batch.iter().map(|r| r.gen_len).sum();
    let metrics = SimMetrics {
        tokens_generated,
        makespan,
        throughput: if makespan > 0.0 { tokens_generated as f64 / makespan } else { 0.0 },
        pcie_busy: busy_of(Channel::Pcie),
        gpu_busy: busy_of(Channel::Gpu),
        prefill_seconds,
        iterations,
        mean_iteration_latency: if iterations > 0 { window / iterations as f64 } else { 0.0 },
        max_minibatches: max_mbs,
        traffic,
    };
    Ok((metrics, events))
}

/// Chrome trace-event JSON: one complete event per entry, times in
/// microseconds, channels as threads.
pub fn trace_json(events: &[SimEvent]) -> serde_json::Value {
    let tid = |c: Channel| match c {
        Channel::Pcie => 0,
        Channel::Gpu => 1,
        Channel::PcieD2h => 2,
    };
    let mut out: Vec<serde_json::Value> = [Channel::Pcie, Channel::Gpu, Channel::PcieD2h]
        .iter()
        .map(|&c| {
            serde_json::json!({
                "name": "thread_name", "ph": "M", "pid": 0, "tid": tid(c),
                "args": { "name": serde_json::to_value(c).unwrap() }
            })
        })
        .collect();
    out.extend(events.iter().map(|e| {
        serde_json::json!({
            "name": e.kind.name(),
            "cat": serde_json::to_value(e.channel).unwrap(),
            "ph": "X",
            "pid": 0,
            "tid": tid(e.channel),
            "ts": e.start * 1e6,
            "dur": e.duration() * 1e6,
            "args": {
                "layer": e.layer, "minibatch": e.minibatch, "iteration": e.iteration,
                "tokens": e.tokens, "bytes": e.bytes
            }
        })
    }));
    serde_json::json!({ "traceEvents": out, "displayTimeUnit": "ms" })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timing::LinearTimeModel;

    fn config(mode: Mode) -> SimConfig {
        let model = ModelConfig::new(1, 8, 2, 16);
        SimConfig {
            profile: HardwareProfile {
                gpu_throughput: 1e6,
                gpu_efficiency: 1.0,
                ..Default::default()
            },
            bundle: TimingBundle {
                kv_gen: LinearTimeModel::new(2e-3, 0.0),
                load_kv: LinearTimeModel::new(1e-3, 0.0),
                t_load_w: 0.05,
                s_weight_layer: 1000,
                s_weight_total: 1000,
            },
            allocation: HostAllocation::default(),
            act_gpu: GpuResidency::default(),
            packer: PackerConfig::new(100, 100).unwrap(),
            batch: vec![RequestSpec { prompt_len: 20, gen_len: 1 }],
            mode,
            store_checkpoint_traffic: false,
            full_duplex: false,
            model,
        }
    }

    #[test]
    fn mode_names_round_trip() {
        for m in [Mode::Hybrid, Mode::KvOnly, Mode::ActOnly, Mode::TokenRecompute(0.5)] {
            assert_eq!(m.to_string().parse::<Mode>().unwrap(), m);
        }
        assert!("fast".parse::<Mode>().is_err());
    }

    #[test]
    fn kv_only_single_chain() {
        let cfg = config(Mode::KvOnly);
        let (m, ev) = simulate(&cfg).unwrap();
        let fwd = cfg.profile.compute_seconds(decode_layer_flops(&cfg.model, 20));
        let expected = m.prefill_seconds + 0.05 + 20e-3 + fwd;
        assert!((m.makespan - expected).abs() < 1e-12);
        let kinds: Vec<_> = ev.iter().map(|e| e.kind).collect();
        assert_eq!(
            kinds,
            [EventKind::Prefill, EventKind::WeightLoad, EventKind::KvLoad, EventKind::QkvAndForward]
        );
    }

    #[test]
    fn act_only_halves_context_bytes() {
        let (kv, _) = simulate(&config(Mode::KvOnly)).unwrap();
        let (act, _) = simulate(&config(Mode::ActOnly)).unwrap();
        assert_eq!(2 * act.traffic.context_load(), kv.traffic.context_load());
    }

    #[test]
    fn zero_generation_has_no_stores() {
        let mut cfg = config(Mode::KvOnly);
        cfg.store_checkpoint_traffic = true;
        cfg.batch[0].gen_len = 0;
        let (m, _) = simulate(&cfg).unwrap();
        assert_eq!(m.traffic.stores(), 0);
        assert_eq!(m.tokens_generated, 0);
    }

    #[test]
    fn bad_ratio_rejected() {
        assert!(matches!(simulate(&config(Mode::TokenRecompute(1.5))), Err(Error::Config(_))));
    }

    #[test]
    fn undersized_buffer_is_config_error() {
        let mut cfg = config(Mode::KvOnly);
        cfg.packer = PackerConfig::new(1, 1).unwrap();
        assert!(matches!(simulate(&cfg), Err(Error::Config(_))));
    }
}
