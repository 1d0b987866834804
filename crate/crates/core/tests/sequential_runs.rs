use std::collections::HashSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use seqgee::chi2::chi2_quantile;
use seqgee::datagen::{continuous_pool, logistic_pool, ContinuousScenario, LogisticScenario};
use seqgee::sequential::{should_stop, StopDecision};
use seqgee::{run_sequential, CorrKind, DataPool, FitOptions, Link, ModelConfig, SelectorKind, StoppingPolicy};

fn continuous(pool_size: usize, seed: u64) -> DataPool {
    let mut s = ContinuousScenario::new(8, CorrKind::Ar1, 0.5).unwrap();
    s.pool_size = pool_size;
    let g = continuous_pool(&s, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    DataPool::new(g.clusters, seed).unwrap()
}

fn model(link: Link) -> ModelConfig {
    ModelConfig { link, kind: CorrKind::Ar1, fit: FitOptions::default() }
}

#[test]
fn outcome_invariants() {
    for seed in 0..10 {
        for selector in [SelectorKind::Random, SelectorKind::DOptimal] {
            let mut pool = continuous(300, seed);
            let policy = StoppingPolicy::new(0.15, 25);
            let out = run_sequential(&mut pool, selector, &model(Link::Identity), &policy).unwrap();
            assert!(out.n_stop >= policy.n0);
            assert_eq!(out.recruited.len(), out.n_stop);
            let unique: HashSet<_> = out.recruited.iter().collect();
            assert_eq!(unique.len(), out.n_stop);
            assert!(!out.pool_exhausted);

            let e = out.ellipsoid.as_ref().unwrap();
            assert!((e.max_semi_axis() - policy.d).abs() < 1e-8);
            assert_eq!(e.selected.len(), out.ase.p0_hat);

            // the rule holds at the stop and failed at every earlier check
            let a_sq = chi2_quantile(out.ase.p0_hat as u32, policy.conf_level);
            assert!(out.nu_at_stop <= policy.d * policy.d / a_sq);
            let last = out.history.last().unwrap();
            assert_eq!(last.k, out.n_stop);
            for h in &out.history[..out.history.len() - 1] {
                assert_eq!(should_stop(h.k, &policy, h.nu, h.p0_hat), StopDecision::Continue);
            }
            assert!(out.history.windows(2).all(|w| w[1].k == w[0].k + 1));
        }
    }
}

#[test]
fn same_seed_same_path() {
    let policy = StoppingPolicy::new(0.15, 25);
    let a = run_sequential(&mut continuous(300, 4), SelectorKind::DOptimal, &model(Link::Identity), &policy).unwrap();
    let b = run_sequential(&mut continuous(300, 4), SelectorKind::DOptimal, &model(Link::Identity), &policy).unwrap();
    assert_eq!(a.recruited, b.recruited);
    assert_eq!(a.fit.beta, b.fit.beta);
}

#[test]
fn tiny_pool_is_exhausted() {
    let mut pool = continuous(40, 1);
    let policy = StoppingPolicy::new(1e-3, 25);
    let out = run_sequential(&mut pool, SelectorKind::DOptimal, &model(Link::Identity), &policy).unwrap();
    assert!(out.pool_exhausted);
    assert_eq!(out.n_stop, 40);
}

#[test]
fn huge_d_stops_at_pilot() {
    let mut pool = continuous(100, 2);
    let policy = StoppingPolicy::new(1e6, 25);
    let out = run_sequential(&mut pool, SelectorKind::DOptimal, &model(Link::Identity), &policy).unwrap();
    assert_eq!(out.n_stop, 25);
}

#[test]
fn pilot_larger_than_pool_is_rejected() {
    let mut pool = continuous(10, 2);
    let policy = StoppingPolicy::new(0.5, 25);
    assert!(run_sequential(&mut pool, SelectorKind::Random, &model(Link::Identity), &policy).is_err());
}

#[test]
fn logistic_session_runs() {
    let mut s = LogisticScenario::new(6, 0.3).unwrap();
    s.pool_size = 1500;
    let g = logistic_pool(&s, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let mut pool = DataPool::new(g.clusters, 5).unwrap();
    let policy = StoppingPolicy::new(0.6, 200);
    let out = run_sequential(&mut pool, SelectorKind::DOptimal, &model(Link::Logit), &policy).unwrap();
    assert!(out.n_stop >= 200);
    if let Some(e) = &out.ellipsoid {
        assert!((e.max_semi_axis() - 0.6).abs() < 1e-8);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn smaller_d_never_stops_earlier_on_the_same_path(seed in 0u64..1000) {
        // random recruitment follows the same order whatever d is
        let policy_wide = StoppingPolicy::new(0.3, 25);
        let policy_narrow = StoppingPolicy::new(0.2, 25);
        let a = run_sequential(&mut continuous(400, seed), SelectorKind::Random, &model(Link::Identity), &policy_wide).unwrap();
        let b = run_sequential(&mut continuous(400, seed), SelectorKind::Random, &model(Link::Identity), &policy_narrow).unwrap();
        prop_assert!(b.n_stop >= a.n_stop);
        prop_assert_eq!(&b.recruited[..a.n_stop], &a.recruited[..]);
    }
}
