use bufstab::casestudy::*;
use bufstab::dynamics::{integrate, IntegrateOptions, Model};
use bufstab::equilibrium::{existence_sweep, SweepOptions};
use bufstab::error::Error;
use bufstab::policy::{Policy, Smoothing};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn shared() -> Policy<f64> {
    Policy::shared_buffer_backpressure(Smoothing::default()).unwrap()
}

fn cfg(capacity: &[f64], mu: &[f64], lambda: &[f64], buffer: f64) -> OneHopSharedConfig<f64> {
    OneHopSharedConfig::new(capacity.to_vec(), mu.to_vec(), lambda.to_vec(), buffer).unwrap()
}

fn sweep_threshold(c: &OneHopSharedConfig<f64>, commodity: usize, hi: f64) -> f64 {
    let net = c.to_network().unwrap();
    existence_sweep(&net, &shared(), commodity, (0.0, hi), &SweepOptions::default())
        .unwrap()
        .threshold
}

/// Average over the second half of a long run of the hub gate `σ(a(b − ε − Σ q_K))`.
fn observed_beta(c: &OneHopSharedConfig<f64>) -> f64 {
    let net = c.to_network().unwrap();
    let model = Model::new(net.clone(), shared()).unwrap();
    let hub = net.node_index("K").unwrap();
    let coords: Vec<usize> = (0..net.commodity_count())
        .filter_map(|l| model.layout().index_of(hub, l))
        .collect();
    let s = Smoothing::<f64>::default();
    let t_end = 2000.0;
    let traj = integrate(&model, &vec![0.0; model.dim()], t_end, &IntegrateOptions::default()).unwrap();
    let (mut sum, mut n) = (0.0, 0);
    for (t, q) in traj.times.iter().zip(&traj.states) {
        if *t >= t_end / 2.0 {
            let occ: f64 = coords.iter().map(|&k| q[k]).sum();
            sum += 1.0 / (1.0 + (-s.a * (c.buffer - s.epsilon - occ)).exp());
            n += 1;
        }
    }
    sum / n as f64
}

#[test]
fn two_commodity_examples() {
    let r = admissible_range_two_commodity(&cfg(&[6.0, 4.5], &[2.0, 3.0], &[3.0, 1.0], 6.0)).unwrap();
    assert_eq!((r.lower, r.upper, r.closed), (0.0, 1.5, true));
    let r = admissible_range_two_commodity(&cfg(&[4.0, 2.0], &[1.0, 1.0], &[2.0, 0.0], 6.0)).unwrap();
    assert_eq!((r.lower, r.upper), (0.0, 0.5));
    assert!(OneHopSharedConfig::new(vec![2.0, 4.5], vec![2.0, 3.0], vec![3.0, 0.0], 6.0).is_err());
}

#[test]
fn three_commodity_example_with_middle_overload() {
    let c = cfg(&[8.0, 4.0, 3.0], &[2.0, 2.0, 2.0], &[0.0, 3.0, 0.0], 6.0);
    let r = admissible_ranges_c_commodity(&c, 1).unwrap();
    assert_eq!(r.permutation, vec![0, 1, 2]);
    assert_eq!(r.beta, 0.5);
    let first = r.entries.iter().find(|e| e.commodity == 0).unwrap();
    assert_eq!((first.interval.upper, first.interval.closed), (2.0, false));
    let third = r.entries.iter().find(|e| e.commodity == 2).unwrap();
    assert_eq!((third.interval.upper, third.interval.closed), (1.5, true));
    assert!(r.entries.iter().all(|e| !e.inconclusive && e.lambda_within));
}

#[test]
fn extreme_overload_positions() {
    let mu = [2.0, 2.0, 2.0];
    let cap = [8.0, 4.0, 3.0];
    let top = admissible_ranges_c_commodity(&cfg(&cap, &mu, &[3.0, 0.0, 0.0], 6.0), 0).unwrap();
    for e in &top.entries {
        assert!(e.interval.closed);
        assert!((e.interval.upper - 2.0 * cap[e.commodity] / 8.0).abs() < 1e-15);
    }
    let bottom = admissible_ranges_c_commodity(&cfg(&cap, &mu, &[0.0, 0.0, 3.0], 6.0), 2).unwrap();
    for e in &bottom.entries {
        assert!(!e.interval.closed);
        assert_eq!(e.interval.upper, mu[e.commodity]);
        assert_eq!(e.interval.sweep_upper(), mu[e.commodity] - OPEN_END_ETA);
    }
}

#[test]
fn unsorted_ratios_are_reindexed() {
    let c = cfg(&[3.0, 8.0, 4.0], &[2.0, 2.0, 2.0], &[0.0, 0.0, 3.0], 6.0);
    let r = admissible_ranges_c_commodity(&c, 2).unwrap();
    assert_eq!(r.permutation, vec![1, 2, 0]);
    let e0 = r.entries.iter().find(|e| e.commodity == 0).unwrap();
    assert_eq!((e0.rank, e0.interval.upper, e0.interval.closed), (2, 1.5, true));
}

#[test]
fn ties_and_double_overloads_are_flagged() {
    let tie = cfg(&[4.0, 4.0], &[2.0, 2.0], &[3.0, 0.0], 6.0);
    let r = admissible_ranges_c_commodity(&tie, 0).unwrap();
    assert!(r.entries[0].inconclusive);
    let two = cfg(&[8.0, 4.0, 3.0], &[2.0, 2.0, 2.0], &[3.0, 3.0, 0.0], 6.0);
    assert!(matches!(admissible_ranges_c_commodity(&two, 0), Err(Error::Hypothesis(_))));
    assert!(beta_limit(&cfg(&[6.0, 4.5], &[2.0, 3.0], &[1.0, 1.0], 6.0), 0).is_err());
}

#[test]
fn beta_matches_long_run_gate() {
    for (capacity, mu) in [([6.0, 4.5], [2.0, 3.0]), ([4.0, 3.0], [2.0, 2.0])] {
        let c = cfg(&capacity, &mu, &[3.0, 0.5], 6.0);
        let want = beta_limit(&c, 0).unwrap();
        let got = observed_beta(&c);
        assert!((got - want).abs() < 0.02, "β {got} vs {want}");
    }
}

#[test]
fn beta_approaches_one_as_egress_nears_capacity() {
    let c = cfg(&[2.0 + 1e-6, 1.5], &[2.0, 1.0], &[3.0, 0.0], 6.0);
    assert!((beta_limit(&c, 0).unwrap() - 1.0).abs() < 1e-6);
}

#[test]
fn throughput_collapses_above_the_cap() {
    let cap = 1.5;
    for excess in [0.3, 0.5] {
        let c = cfg(&[6.0, 4.5], &[2.0, 3.0], &[3.0, cap + excess], 6.0);
        let net = c.to_network().unwrap();
        let model = Model::new(net.clone(), shared()).unwrap();
        let src = model.layout().index_of(net.node_index("2").unwrap(), 1).unwrap();
        let traj = integrate(&model, &vec![0.0; model.dim()], 2000.0, &IntegrateOptions::default()).unwrap();
        let rate = traj.growth_rate(src, 1000.0).unwrap();
        assert!((rate - excess).abs() <= 0.1 * excess, "growth {rate} vs {excess}");
    }
}

#[test]
fn two_commodity_sweeps_match_the_formula() {
    let fig = cfg(&[6.0, 4.5], &[2.0, 3.0], &[3.0, 0.0], 6.0);
    assert!((sweep_threshold(&fig, 1, 3.0) - 1.5).abs() < 0.02);
    let small = cfg(&[4.0, 2.0], &[1.0, 1.0], &[2.0, 0.0], 6.0);
    assert!((sweep_threshold(&small, 1, 1.0) - 0.5).abs() < 0.02);
}

#[test]
fn random_three_commodity_sweeps_match_the_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..2 {
        let (c, l) = random_config(&mut rng, 3);
        let ranges = admissible_ranges_c_commodity(&c, l).unwrap();
        for e in &ranges.entries {
            let hi = 1.5 * e.interval.upper;
            let t = sweep_threshold(&c, e.commodity, hi);
            assert!((t - e.interval.upper).abs() < 0.02, "{c:?}: commodity {} threshold {t} vs {}", e.commodity, e.interval.upper);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn two_commodity_range_is_strictly_inside_the_egress_range(seed in 0u64..1_000_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut c, l) = random_config(&mut rng, 2);
        if l == 1 || c.ratio(0) <= c.ratio(1) {
            c.capacity.swap(0, 1);
            c.mu.swap(0, 1);
            c.lambda.swap(0, 1);
        }
        prop_assume!(c.ratio(0) > c.ratio(1) && c.lambda[0] > c.mu[0]);
        let r = admissible_range_two_commodity(&c).unwrap();
        prop_assert!(r.lower == 0.0 && r.upper < c.mu[1]);
    }

    #[test]
    fn random_configs_satisfy_the_hypotheses(seed in 0u64..1_000_000, n in 2usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, l) = random_config(&mut rng, n);
        prop_assert!(c.validate().is_ok());
        prop_assert_eq!(c.overloaded(), vec![l]);
        let r = admissible_ranges_c_commodity(&c, l).unwrap();
        for e in &r.entries {
            prop_assert!(e.interval.upper <= c.mu[e.commodity] + 1e-12);
            prop_assert!(!e.inconclusive);
        }
    }
}
