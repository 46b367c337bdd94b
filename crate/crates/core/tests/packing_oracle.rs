//! Greedy mini-batch packing against set-partition enumeration.

mod common;

use actcache::packing::{
    balance, brute_force_pack, cost_fb, form_minibatches, form_minibatches_traced, mean_fb, MiniBatch, PackRequest,
    PackerConfig, BRUTE_FORCE_LIMIT,
};
use actcache::timing::TimingBundle;
use actcache::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{check_packing, random_pack_instance, PACK_TPB as TPB};

fn bundle(gen: (f64, f64), load: (f64, f64)) -> TimingBundle {
    common::bundle(gen, load, 0.0)
}

fn check_valid(reqs: &[PackRequest], cfg: &PackerConfig, out: &[MiniBatch]) {
    check_packing(reqs, cfg, out).unwrap();
}

#[test]
fn greedy_within_bound_of_exhaustive() {
    let mut worst: f64 = 1.0;
    for seed in 0..200 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (reqs, cfg, b) = random_pack_instance(&mut rng, true);
        let greedy = form_minibatches(&reqs, &cfg, &b, TPB).unwrap();
        check_valid(&reqs, &cfg, &greedy);
        let best = brute_force_pack(&reqs, &cfg, &b, TPB).unwrap();
        check_valid(&reqs, &cfg, &best);
        assert!(best.len() <= greedy.len());
        let ratio = mean_fb(&greedy, &b, TPB) / mean_fb(&best, &b, TPB);
        worst = worst.max(ratio);
        assert!(ratio <= 1.5, "seed {seed}: ratio {ratio}");
    }
    eprintln!("worst greedy/optimal mean F_b: {worst:.4}");
}

// Single-kind requests: a leftover all-ACT request alone gets F_b = inf,
// so only validity and batch count are checked here.
#[test]
fn single_kind_requests_stay_valid() {
    let mut infinite = 0;
    for seed in 0..200 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let (reqs, cfg, b) = random_pack_instance(&mut rng, false);
        let greedy = form_minibatches(&reqs, &cfg, &b, TPB).unwrap();
        check_valid(&reqs, &cfg, &greedy);
        let best = brute_force_pack(&reqs, &cfg, &b, TPB).unwrap();
        check_valid(&reqs, &cfg, &best);
        assert!(best.len() <= greedy.len());
        infinite += usize::from(mean_fb(&greedy, &b, TPB).is_infinite());
    }
    eprintln!("greedy packings with an unbounded batch: {infinite} of 200");
}

#[test]
fn insertion_log_replays() {
    for seed in 0..200 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (reqs, cfg, b) = random_pack_instance(&mut rng, seed % 2 == 0);
        let (batches, log) = form_minibatches_traced(&reqs, &cfg, &b, TPB).unwrap();
        assert_eq!(log.len(), reqs.len());
        let mut rebuilt = vec![MiniBatch::default(); batches.len()];
        for ins in &log {
            let mb = &mut rebuilt[ins.batch];
            match ins.fb_before {
                None => assert!(mb.is_empty()),
                Some(before) => {
                    assert_eq!(before, cost_fb(mb, &b, TPB));
                    assert!(ins.fb_after <= before);
                }
            }
            let r = reqs.iter().find(|r| r.id == ins.request).unwrap();
            mb.requests.push(r.id);
            mb.act_mb += r.act_blocks;
            mb.kv_mb += r.kv_blocks;
            assert_eq!(ins.fb_after, cost_fb(mb, &b, TPB));
        }
        assert_eq!(rebuilt, batches);
        assert_eq!(form_minibatches(&reqs, &cfg, &b, TPB).unwrap(), batches);
    }
}

#[test]
fn small_cases() {
    let b = bundle((1e-6, 0.0), (1e-6, 0.0));
    let cfg = PackerConfig::new(4, 4).unwrap();
    let one = [PackRequest::new(9, 1, 2)];
    let out = form_minibatches(&one, &cfg, &b, TPB).unwrap();
    assert_eq!(out, vec![MiniBatch::from_requests(&one)]);
    assert_eq!(brute_force_pack(&one, &cfg, &b, TPB).unwrap(), out);

    let full = [PackRequest::new(1, 0, 4), PackRequest::new(2, 0, 4)];
    assert_eq!(form_minibatches(&full, &cfg, &b, TPB).unwrap().len(), 2);

    // symmetric pair: together they balance perfectly
    let pair = [PackRequest::new(1, 2, 0), PackRequest::new(2, 0, 2)];
    let best = brute_force_pack(&pair, &cfg, &b, TPB).unwrap();
    assert_eq!(best.len(), 1);
    assert_eq!(cost_fb(&best[0], &b, TPB), 1.0);
    assert_eq!(form_minibatches(&pair, &cfg, &b, TPB).unwrap(), best);

    // separable: each request fills a batch alone
    let sep = [PackRequest::new(1, 4, 4), PackRequest::new(2, 3, 3), PackRequest::new(3, 4, 4)];
    let g = form_minibatches(&sep, &cfg, &b, TPB).unwrap();
    assert_eq!(g.len(), 3);
    assert_eq!(mean_fb(&g, &b, TPB), mean_fb(&brute_force_pack(&sep, &cfg, &b, TPB).unwrap(), &b, TPB));
}

#[test]
fn errors() {
    let b = bundle((1e-6, 0.0), (1e-6, 0.0));
    let cfg = PackerConfig::new(2, 2).unwrap();
    let big = [PackRequest::new(1, 1, 1), PackRequest::new(42, 3, 0)];
    match form_minibatches(&big, &cfg, &b, TPB) {
        Err(Error::Input(msg)) => assert!(msg.contains("42"), "{msg}"),
        other => panic!("{other:?}"),
    }
    let many: Vec<_> = (0..BRUTE_FORCE_LIMIT as u64 + 1).map(|i| PackRequest::new(i, 0, 1)).collect();
    assert!(matches!(brute_force_pack(&many, &cfg, &b, TPB), Err(Error::TooLarge(..))));
    assert!(PackerConfig::new(0, 3).is_err());
}

#[test]
fn balance_edge_values() {
    let b = bundle((1e-3 / 16.0, 0.0), (1e-3 / 16.0, 0.0));
    let mb = |a, k| MiniBatch {
        requests: vec![0],
        act_mb: a,
        kv_mb: k,
    };
    assert_eq!(balance(&mb(1, 1), &b, TPB), 1.0);
    assert_eq!(balance(&mb(2, 1), &b, TPB), 2.0);
    assert_eq!(cost_fb(&mb(4, 1), &b, TPB), 4.0);
    assert_eq!(cost_fb(&mb(1, 4), &b, TPB), 4.0);
    assert_eq!(balance(&mb(3, 0), &b, TPB), f64::INFINITY);
    assert_eq!(balance(&mb(0, 0), &b, TPB), 1.0);
}

proptest! {
    #[test]
    fn balance_matches_direct_formula(
        a in 1u64..500, k in 1u64..500,
        gs in 1e-8f64..1e-4, gi in 0.0f64..1e-3,
        ls in 1e-8f64..1e-4, li in 0.0f64..1e-3,
    ) {
        let b = bundle((gs, gi), (ls, li));
        let mb = MiniBatch { requests: vec![0], act_mb: a, kv_mb: k };
        let want = (gs * (a * TPB) as f64 + gi) / (ls * (k * TPB) as f64 + li);
        prop_assert!((balance(&mb, &b, TPB) - want).abs() <= 1e-12 * want);
        prop_assert!(cost_fb(&mb, &b, TPB) >= 1.0);
    }

    #[test]
    fn fb_is_symmetric_under_swap(a in 1u64..500, k in 1u64..500, s1 in 1e-8f64..1e-4, s2 in 1e-8f64..1e-4) {
        let fwd = bundle((s1, 0.0), (s2, 0.0));
        let rev = bundle((s2, 0.0), (s1, 0.0));
        let x = MiniBatch { requests: vec![0], act_mb: a, kv_mb: k };
        let y = MiniBatch { requests: vec![0], act_mb: k, kv_mb: a };
        let (p, q) = (cost_fb(&x, &fwd, TPB), cost_fb(&y, &rev, TPB));
        prop_assert!((p - q).abs() <= 1e-12 * p);
    }
}
