//! Instance generators and oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use actcache::numerics::ModelConfig;
use actcache::packing::{MiniBatch, PackRequest, PackerConfig};
use actcache::policy::{imbalance, initial_cache_allocation, GpuResidency, HostAllocation, MemoryBudget};
use actcache::sim::{simulate, Channel, EventKind, Mode, RequestSpec, SimConfig, SimEvent, SimMetrics};
use actcache::timing::{HardwareProfile, LinearTimeModel, TimingBundle};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_sim_config(seed: u64) -> SimConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = rng.random_range(1..=4);
    let mut model = ModelConfig::new(rng.random_range(1..=4), heads * rng.random_range(4..=16), heads, 64);
    model.tokens_per_block = rng.random_range(1..=8);
    let tpb = model.tokens_per_block as u64;

    let batch: Vec<RequestSpec> = (0..rng.random_range(1..=6))
        .map(|_| RequestSpec {
            prompt_len: rng.random_range(1..=48),
            gen_len: rng.random_range(0..=4),
        })
        .collect();
    let most = batch.iter().map(|r| (r.prompt_len + r.gen_len).div_ceil(tpb)).max().unwrap();
    let packer = PackerConfig::new(most + rng.random_range(0..3 * most), most + rng.random_range(0..3 * most)).unwrap();

    let slope = |rng: &mut ChaCha8Rng| 10f64.powf(rng.random_range(-7.0..-4.0));
    let bundle = TimingBundle {
        kv_gen: LinearTimeModel::new(slope(&mut rng), rng.random_range(0.0..1e-4)),
        load_kv: LinearTimeModel::new(slope(&mut rng), rng.random_range(0.0..1e-4)),
        t_load_w: rng.random_range(0.0..2e-3),
        s_weight_layer: rng.random_range(0..1_000_000),
        s_weight_total: 0,
    };
    let profile = HardwareProfile {
        gpu_throughput: 10f64.powf(rng.random_range(9.0..12.0)),
        ..Default::default()
    };
    let mode = match rng.random_range(0..4) {
        0 => Mode::Hybrid,
        1 => Mode::KvOnly,
        2 => Mode::ActOnly,
        _ => Mode::TokenRecompute(rng.random_range(0.0..=1.0)),
    };
    SimConfig {
        model,
        profile,
        bundle,
        allocation: HostAllocation {
            act_host: rng.random_range(0..40),
            kv_host: rng.random_range(0..40),
            ..Default::default()
        },
        act_gpu: GpuResidency {
            act_gpu: rng.random_range(0..4),
        },
        packer,
        batch,
        mode,
        store_checkpoint_traffic: rng.random_bool(0.8),
        full_duplex: rng.random_bool(0.3),
    }
}

fn find<'a>(events: &'a [SimEvent], kind: EventKind, of: &SimEvent, by_minibatch: bool) -> Option<&'a SimEvent> {
    events.iter().find(|e| {
        e.kind == kind
            && e.iteration == of.iteration
            && e.layer == of.layer
            && (!by_minibatch || e.minibatch == of.minibatch)
    })
}

/// Checks channel exclusivity, dependency order, work conservation and
/// metric consistency for one run.
pub fn check_run(cfg: &SimConfig, m: &SimMetrics, events: &[SimEvent]) -> Result<(), String> {
    for e in events {
        if !(e.end >= e.start && e.start >= 0.0) {
            return Err(format!("bad interval {e:?}"));
        }
    }
    for ch in [Channel::Pcie, Channel::Gpu, Channel::PcieD2h] {
        let mut on: Vec<&SimEvent> = events.iter().filter(|e| e.channel == ch).collect();
        on.sort_by(|a, b| a.start.total_cmp(&b.start));
        for w in on.windows(2) {
            if w[0].end > w[1].start {
                return Err(format!("{ch:?} overlap: {:?} / {:?}", w[0], w[1]));
            }
        }
    }

    let prefill_end = events.iter().find(|e| e.kind == EventKind::Prefill).ok_or("no prefill")?.end;
    let before = |a: Option<&SimEvent>, b: &SimEvent, what: &str| match a {
        Some(a) if a.end > b.start => Err(format!("{what}: {a:?} ends after {b:?} starts")),
        _ => Ok(()),
    };
    for e in events {
        if e.kind != EventKind::Prefill && e.start < prefill_end {
            return Err(format!("{e:?} starts during prefill"));
        }
        match e.kind {
            EventKind::KvGen => {
                before(find(events, EventKind::ActLoad, e, true), e, "act_load -> kv_gen")?;
                before(find(events, EventKind::WeightLoad, e, false), e, "weight -> kv_gen")?;
            }
            EventKind::QkvAndForward => {
                let w = find(events, EventKind::WeightLoad, e, false);
                if w.is_none() {
                    return Err(format!("no weight load for {e:?}"));
                }
                before(w, e, "weight -> forward")?;
                before(find(events, EventKind::KvLoad, e, true), e, "kv_load -> forward")?;
                before(find(events, EventKind::KvGen, e, true), e, "kv_gen -> forward")?;
                before(find(events, EventKind::TokenRecompute, e, true), e, "recompute -> forward")?;
            }
            EventKind::KvStore | EventKind::ActStore => {
                before(find(events, EventKind::QkvAndForward, e, true), e, "forward -> store")?;
            }
            _ => {}
        }
    }

    // Work conservation: the list scheduler never idles every channel
    // while work remains, so the busy intervals cover [0, makespan].
    let mut iv: Vec<(f64, f64)> = events.iter().filter(|e| e.end > e.start).map(|e| (e.start, e.end)).collect();
    iv.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut reach = 0.0;
    for (s, e) in iv {
        if s > reach {
            return Err(format!("all channels idle over [{reach}, {s}]"));
        }
        reach = f64::max(reach, e);
    }
    if reach != m.makespan {
        return Err(format!("coverage ends at {reach}, makespan {}", m.makespan));
    }
    for ch in [Channel::Pcie, Channel::Gpu] {
        let busy: f64 = events.iter().filter(|e| e.channel == ch).map(SimEvent::duration).sum();
        if busy > m.makespan * (1.0 + 1e-12) {
            return Err(format!("{ch:?} busy {busy} > makespan {}", m.makespan));
        }
    }

    if !(0.0..=1.0).contains(&m.pcie_busy) || !(0.0..=1.0).contains(&m.gpu_busy) {
        return Err(format!("busy fractions out of range: {m:?}"));
    }
    let tokens: u64 = cfg.batch.iter().map(|r| r.gen_len).sum();
    if m.tokens_generated != tokens {
        return Err("token count".into());
    }
    if m.makespan > 0.0 && (m.throughput - tokens as f64 / m.makespan).abs() > 1e-9 * m.throughput {
        return Err("throughput != tokens / makespan".into());
    }
    let bytes = |k: EventKind| events.iter().filter(|e| e.kind == k).map(|e| e.bytes).sum::<u64>();
    let t = m.traffic;
    let want = (
        bytes(EventKind::WeightLoad),
        bytes(EventKind::KvLoad),
        bytes(EventKind::ActLoad),
        bytes(EventKind::KvStore),
        bytes(EventKind::ActStore),
    );
    if (t.weights, t.kv_load, t.act_load, t.kv_store, t.act_store) != want {
        return Err(format!("traffic {t:?} != event bytes {want:?}"));
    }
    let layers = cfg.model.num_layers;
    let weights = events.iter().filter(|e| e.kind == EventKind::WeightLoad).count();
    if weights != m.iterations * layers {
        return Err(format!("{weights} weight loads for {} iterations", m.iterations));
    }
    Ok(())
}

/// Hybrid with an all-KV (or all-ACT) allocation must replay the matching
/// single-kind mode exactly.
pub fn check_degeneracy(cfg: &SimConfig) -> Result<(), String> {
    let run = |mode: Mode, act: u64, kv: u64| {
        let mut c = cfg.clone();
        c.mode = mode;
        c.allocation = HostAllocation {
            act_host: act,
            kv_host: kv,
            ..Default::default()
        };
        simulate(&c).map_err(|e| e.to_string())
    };
    let hybrid = run(Mode::Hybrid, 0, 10)?;
    if hybrid != run(Mode::KvOnly, 0, 10)? {
        return Err("hybrid(act=0) differs from kv_only".into());
    }
    let hybrid = run(Mode::Hybrid, 10, 0)?;
    if hybrid != run(Mode::ActOnly, 10, 0)? {
        return Err("hybrid(kv=0) differs from act_only".into());
    }
    Ok(())
}

/// Runs every check on one fuzzed config.
pub fn check_seed(seed: u64) -> Result<(), String> {
    let cfg = random_sim_config(seed);
    let (m, events) = simulate(&cfg).map_err(|e| format!("seed {seed}: {e}"))?;
    check_run(&cfg, &m, &events).map_err(|e| format!("seed {seed}: {e}"))?;
    if simulate(&cfg).map_err(|e| e.to_string())? != (m, events) {
        return Err(format!("seed {seed}: nondeterministic"));
    }
    check_degeneracy(&cfg).map_err(|e| format!("seed {seed}: {e}"))
}

// ---- allocation planning ----

pub fn bundle(gen: (f64, f64), load: (f64, f64), t_w: f64) -> TimingBundle {
    TimingBundle {
        kv_gen: LinearTimeModel::new(gen.0, gen.1),
        load_kv: LinearTimeModel::new(load.0, load.1),
        t_load_w: t_w,
        s_weight_layer: 0,
        s_weight_total: 0,
    }
}

pub fn budget(cache_bytes: u64, s_act: u64) -> MemoryBudget {
    MemoryBudget {
        host_mem: cache_bytes as f64,
        s_weight: 0,
        s_kv: 2 * s_act,
        s_act,
        tokens_per_block: 16,
    }
}

/// Best pair among those where no further block fits, by |T_pcie - T_comp|;
/// ties go to fewer KV blocks. Pairs with spare room for a block are
/// skipped: along the balance line every such pair ties with a fuller one.
pub fn brute_force_split(b: &TimingBundle, mem: &MemoryBudget, gpu: GpuResidency) -> (u64, u64) {
    let cache = mem.host_mem as u64 - mem.s_weight;
    let mut best = None;
    for y in 0..=cache / mem.s_kv {
        let x = (cache - y * mem.s_kv) / mem.s_act;
        let cost = imbalance(b, x, y, gpu, mem.tokens_per_block);
        if best.is_none_or(|(c, _, _)| cost < c) {
            best = Some((cost, x, y));
        }
    }
    let (_, x, y) = best.unwrap();
    (x, y)
}

pub fn within_one(p: &HostAllocation, o: (u64, u64)) -> bool {
    p.act_host.abs_diff(o.0) <= 1 && p.kv_host.abs_diff(o.1) <= 1
}

pub fn random_policy_case(rng: &mut ChaCha8Rng, intercepts: bool) -> (TimingBundle, MemoryBudget, GpuResidency) {
    let gen_slope = 10f64.powf(rng.random_range(-7.0..-4.0));
    let load_slope = 10f64.powf(rng.random_range(-7.0..-4.0));
    let t_w = rng.random_range(1e-3..0.1);
    let (bg, bl) = if intercepts {
        (rng.random_range(0.0..1e-3), rng.random_range(0.0..1e-3))
    } else {
        (0.0, 0.0)
    };
    let s_act = rng.random_range(100..5000);
    let gpu = GpuResidency {
        act_gpu: rng.random_range(0..50),
    };
    let b = bundle((gen_slope, bg), (load_slope, bl), t_w);
    // mostly enough room for the step-one blocks, sometimes not
    let (ai, ki) = initial_cache_allocation(&b, gpu, 16);
    let floor = if rng.random_bool(0.9) { ai + 2 * ki } else { 0 };
    let cache = (floor + rng.random_range(0..4000)) * s_act + rng.random_range(0..s_act);
    (b, budget(cache, s_act), gpu)
}

// ---- mini-batch packing ----

pub const PACK_TPB: u64 = 16;

/// `mixed`: every request holds at least one block of each kind, so every
/// batch has a finite `F_b`. Otherwise either count may be zero.
pub fn random_pack_instance(rng: &mut ChaCha8Rng, mixed: bool) -> (Vec<PackRequest>, PackerConfig, TimingBundle) {
    let cfg = PackerConfig::new(rng.random_range(1..=12), rng.random_range(1..=12)).unwrap();
    let n = rng.random_range(1..=8);
    let lo = u64::from(mixed);
    let reqs = (0..n)
        .map(|i| PackRequest::new(i, rng.random_range(lo..=cfg.act_max), rng.random_range(lo..=cfg.kv_max)))
        .collect();
    let b = bundle(
        (10f64.powf(rng.random_range(-7.0..-5.0)), rng.random_range(0.0..1e-4)),
        (10f64.powf(rng.random_range(-7.0..-5.0)), rng.random_range(0.0..1e-4)),
        0.0,
    );
    (reqs, cfg, b)
}

/// Partition and capacity check for a packing of `reqs`.
pub fn check_packing(reqs: &[PackRequest], cfg: &PackerConfig, out: &[MiniBatch]) -> Result<(), String> {
    let mut seen = BTreeSet::new();
    for mb in out {
        if mb.is_empty() {
            return Err("empty mini-batch".into());
        }
        if mb.act_mb > cfg.act_max || mb.kv_mb > cfg.kv_max {
            return Err(format!("over capacity: {mb:?}"));
        }
        let (mut a, mut k) = (0, 0);
        for id in &mb.requests {
            if !seen.insert(*id) {
                return Err(format!("request {id} placed twice"));
            }
            let r = reqs.iter().find(|r| r.id == *id).ok_or(format!("unknown request {id}"))?;
            a += r.act_blocks;
            k += r.kv_blocks;
        }
        if (a, k) != (mb.act_mb, mb.kv_mb) {
            return Err(format!("block sums {:?} != {mb:?}", (a, k)));
        }
    }
    let all: BTreeSet<_> = reqs.iter().map(|r| r.id).collect();
    if seen != all {
        return Err("requests missing from packing".into());
    }
    Ok(())
}
