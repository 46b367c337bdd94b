use std::path::PathBuf;

use actcache::cache::{bytes_of, BlockKind};
use actcache::experiment::{build_sim_config, default_packer, metrics_csv, plan_for_batch, sweep, SweepPoint};
use actcache::numerics::verify::{check_equivalence, EquivalenceOptions};
use actcache::numerics::ModelConfig;
use actcache::packing::{balance, cost_fb, form_minibatches, mean_fb, PackRequest, PackerConfig};
use actcache::policy::{plan_host_allocation, predicted_times, GpuResidency, MemoryBudget};
use actcache::sim::{simulate, trace_json, traffic_report, Mode, RequestSpec};
use actcache::timing::{parse_samples_csv, TimingBundle};
use anyhow::{bail, Context as _, Result};
use clap::Args;
use serde_json::json;

use crate::context::Context;

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Preset name or JSON file with model dimensions.
    #[arg(long)]
    pub model: Option<String>,
    /// Sample points per model.
    #[arg(long)]
    pub points: Option<usize>,
    /// Measured `n_tokens,seconds` samples for activation recompute.
    #[arg(long, requires = "load_csv")]
    pub kv_gen_csv: Option<PathBuf>,
    /// Measured `n_tokens,seconds` samples for KV loads.
    #[arg(long, requires = "kv_gen_csv")]
    pub load_csv: Option<PathBuf>,
}

pub fn calibrate(ctx: &mut Context, args: &CalibrateArgs) -> Result<()> {
    let model = ctx.model(args.model.as_deref())?;
    if let Some(n) = args.points {
        ctx.spec.calibration_points = n;
    }
    let bundle = match (&args.kv_gen_csv, &args.load_csv) {
        (Some(g), Some(l)) => {
            let g = parse_samples_csv(&ctx.read_text(g)?)?;
            let l = parse_samples_csv(&ctx.read_text(l)?)?;
            TimingBundle::from_samples(&g, &l, &ctx.spec.profile, &model)?
        }
        _ => ctx.spec.calibrate()?,
    };
    let path = ctx.write_json(
        "bundle.json",
        json!({
            "model": model,
            "profile": ctx.spec.profile,
            "bundle": bundle,
        }),
    )?;
    println!(
        "kv_gen R^2 {:.4}, load_kv R^2 {:.4} -> {}",
        bundle.kv_gen.r_squared,
        bundle.load_kv.r_squared,
        path.display()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub model: Option<String>,
    /// Timing bundle from `calibrate`; calibrates in place when absent.
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    /// ACT blocks per layer resident on the GPU.
    #[arg(long)]
    pub act_gpu: Option<u64>,
    /// Host memory in bytes, overriding the profile.
    #[arg(long)]
    pub host_mem: Option<f64>,
    /// Size the cache to this many requests instead of all host memory.
    #[arg(long, requires = "prompt_len")]
    pub batch: Option<usize>,
    #[arg(long)]
    pub prompt_len: Option<u64>,
}

pub fn plan(ctx: &mut Context, args: &PlanArgs) -> Result<()> {
    let model = ctx.model(args.model.as_deref())?;
    let bundle = ctx.bundle(args.bundle.as_deref())?;
    if let Some(h) = args.host_mem {
        ctx.spec.profile.host_mem = h;
    }
    let gpu = GpuResidency {
        act_gpu: args.act_gpu.unwrap_or(ctx.spec.act_gpu),
    };
    let alloc = match (args.batch, args.prompt_len) {
        (Some(b), Some(p)) => {
            let reqs = vec![
                RequestSpec {
                    prompt_len: p,
                    gen_len: ctx.spec.gen_len
                };
                b
            ];
            plan_for_batch(&bundle, &model, &ctx.spec.profile, gpu, &reqs)?
        }
        _ => plan_host_allocation(&bundle, &MemoryBudget::from_profile(&ctx.spec.profile, &bundle, &model), gpu)?,
    };
    let tpb = model.tokens_per_block as u64;
    let (t_pcie, t_comp) = predicted_times(&bundle, &alloc, gpu, tpb);
    let layers = model.num_layers as u64;
    let act_bytes = alloc.act_host * bytes_of(BlockKind::Act, &model) * layers;
    let kv_bytes = alloc.kv_host * bytes_of(BlockKind::Kv, &model) * layers;
    let path = ctx.write_json(
        "plan.json",
        json!({
            "allocation": alloc,
            "act_gpu": gpu.act_gpu,
            "bytes": { "act": act_bytes, "kv": kv_bytes },
            "act_block_fraction": alloc.act_fraction(),
            "predicted": { "t_pcie": t_pcie, "t_comp": t_comp },
        }),
    )?;
    println!(
        "ACT {} / KV {} blocks per layer, |T_pcie - T_comp| = {:.3e} s -> {}",
        alloc.act_host,
        alloc.kv_host,
        (t_pcie - t_comp).abs(),
        path.display()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct PackArgs {
    /// CSV with columns id, act_blocks, kv_blocks.
    #[arg(long)]
    pub requests: PathBuf,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    /// Capacities; derived from GPU memory when absent.
    #[arg(long, requires = "kv_max")]
    pub act_max: Option<u64>,
    #[arg(long, requires = "act_max")]
    pub kv_max: Option<u64>,
}

pub fn pack(ctx: &mut Context, args: &PackArgs) -> Result<()> {
    let model = ctx.model(args.model.as_deref())?;
    let bundle = ctx.bundle(args.bundle.as_deref())?;
    let text = ctx.read_input(&args.requests)?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_slice());
    let requests: Vec<PackRequest> = reader
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("cannot parse {}", args.requests.display()))?;
    let cfg = match (args.act_max, args.kv_max) {
        (Some(a), Some(k)) => PackerConfig::new(a, k)?,
        _ => default_packer(&model, &ctx.spec.profile, &bundle, GpuResidency { act_gpu: ctx.spec.act_gpu })?,
    };
    let tpb = model.tokens_per_block as u64;
    let batches = form_minibatches(&requests, &cfg, &bundle, tpb)?;
    let rows: Vec<_> = batches
        .iter()
        .map(|mb| {
            json!({
                "requests": mb.requests,
                "act_mb": mb.act_mb,
                "kv_mb": mb.kv_mb,
                "balance": finite(balance(mb, &bundle, tpb)),
                "f_b": finite(cost_fb(mb, &bundle, tpb)),
            })
        })
        .collect();
    let path = ctx.write_json(
        "packing.json",
        json!({
            "capacity": cfg,
            "minibatches": rows,
            "mean_f_b": finite(mean_fb(&batches, &bundle, tpb)),
        }),
    )?;
    println!("{} requests in {} mini-batches -> {}", requests.len(), batches.len(), path.display());
    Ok(())
}

// JSON has no infinity; unbounded ratios are written as null.
fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    /// hybrid, kv_only, act_only or token_recompute(R).
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub prompt_len: Option<u64>,
    #[arg(long)]
    pub gen_len: Option<u64>,
    /// Also write the event timeline as trace.json.
    #[arg(long)]
    pub trace: bool,
}

pub fn simulate_cmd(ctx: &mut Context, args: &SimulateArgs) -> Result<()> {
    ctx.model(args.model.as_deref())?;
    let bundle = ctx.bundle(args.bundle.as_deref())?;
    if let Some(g) = args.gen_len {
        ctx.spec.gen_len = g;
    }
    let point = SweepPoint {
        mode: args.mode.unwrap_or(ctx.spec.modes[0]),
        batch: args.batch.unwrap_or(ctx.spec.batch_sizes[0]),
        prompt_len: args.prompt_len.unwrap_or(ctx.spec.prompt_lens[0]),
    };
    ctx.spec.validate()?;
    let cfg = build_sim_config(&ctx.spec, &bundle, point)?;
    let (metrics, events) = simulate(&cfg)?;
    let path = ctx.write_json(
        "metrics.json",
        json!({
            "point": point,
            "allocation": cfg.allocation,
            "packer": cfg.packer,
            "metrics": metrics,
            "traffic": traffic_report(&metrics),
        }),
    )?;
    if args.trace {
        ctx.write_json("trace.json", trace_json(&events))?;
    }
    println!(
        "{}: {:.3} tok/s, pcie {:.3}, gpu {:.3} -> {}",
        point.mode,
        metrics.throughput,
        metrics.pcie_busy,
        metrics.gpu_busy,
        path.display()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub bundle: Option<PathBuf>,
}

pub fn sweep_cmd(ctx: &mut Context, args: &SweepArgs) -> Result<()> {
    ctx.model(args.model.as_deref())?;
    let bundle = ctx.bundle(args.bundle.as_deref())?;
    let rows = sweep(&ctx.spec, &bundle, ctx.jobs)?;
    let failed = rows.iter().filter(|r| r.result.is_err()).count();
    let path = ctx.write_csv("metrics.csv", &metrics_csv(&rows))?;
    println!("{} points ({failed} failed) -> {}", rows.len(), path.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Number of seeded models, starting at --seed.
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    #[arg(long, default_value_t = 3)]
    pub layers: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 12)]
    pub prompt_len: usize,
    #[arg(long, default_value_t = 4)]
    pub gen_steps: usize,
    #[arg(long, default_value_t = 4)]
    pub tokens_per_block: usize,
    /// Perturb W_K in the recompute weights; the run must then fail.
    #[arg(long)]
    pub mutate_wk: bool,
}

#[derive(Debug)]
pub struct VerificationFailed(pub f64);

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "recomputed context deviates from stored KV by {:e}", self.0)
    }
}

impl std::error::Error for VerificationFailed {}

pub fn verify_numerics(ctx: &mut Context, args: &VerifyArgs) -> Result<()> {
    let mut cfg = ModelConfig::new(args.layers, args.dim, args.heads, 64);
    cfg.tokens_per_block = args.tokens_per_block;
    cfg.max_seq = (args.prompt_len + args.gen_steps).max(1);
    cfg.validate()?;
    let opts = EquivalenceOptions {
        prompt_len: args.prompt_len,
        gen_steps: args.gen_steps,
        tokens_per_block: args.tokens_per_block,
        mutate_wk: args.mutate_wk,
    };
    let base = ctx.spec.seed;
    let reports = (base..base + args.seeds)
        .map(|s| check_equivalence(&cfg, s, &opts))
        .collect::<actcache::Result<Vec<_>>>()?;
    let worst = reports.iter().map(|r| r.max_deviation).fold(0.0, f64::max);
    let passed = reports.iter().all(|r| r.passed);
    let path = ctx.write_json(
        "verify.json",
        json!({
            "model": cfg,
            "options": opts,
            "max_deviation": worst,
            "passed": passed,
            "runs": reports,
        }),
    )?;
    println!(
        "{} seeds, max relative deviation {worst:e}: {} -> {}",
        args.seeds,
        if passed { "pass" } else { "FAIL" },
        path.display()
    );
    if !passed {
        bail!(VerificationFailed(worst));
    }
    Ok(())
}
