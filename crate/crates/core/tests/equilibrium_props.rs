use bufstab::dynamics::Model;
use bufstab::equilibrium::*;
use bufstab::error::Error;
use bufstab::instances::{chain2, fig1, fig1_config, random_dag};
use bufstab::network::{Buffer, NetworkBuilder};
use bufstab::policy::{LinkPolicy, Policy, Smoothing};
use bufstab::stability::{eigen_spectrum, jacobian, max_real_part, JacobianMethod};
use proptest::prelude::*;

fn smooth() -> Policy<f64> {
    Policy::smooth_backpressure(Smoothing::default()).unwrap()
}

fn shared() -> Policy<f64> {
    Policy::shared_buffer_backpressure(Smoothing::default()).unwrap()
}

fn sigma(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn solve_from_zero(model: &Model<f64>) -> EquilibriumCertificate<f64> {
    let mut q0 = vec![0.0; model.dim()];
    model.apply_pins(&mut q0);
    find_equilibrium(model, &q0, &SolverOptions::default()).unwrap()
}

#[test]
fn chain_equilibrium_balances_flows() {
    let (lambda, c, mu, b) = (1.0, 2.0, 2.0, 5.0);
    let model = Model::new(chain2(lambda, c, mu, b).unwrap(), smooth()).unwrap();
    let cert = solve_from_zero(&model);
    assert_eq!(cert.status, EquilibriumStatus::Found);
    assert!(cert.residual < 1e-10);
    let q = cert.q.unwrap();
    let s = Smoothing::<f64>::default();
    let link = LinkPolicy::smooth_backpressure(c, Buffer::Finite(b), s.a, s.epsilon).unwrap();
    let g12 = link.rate(q[0], q[1]);
    let g2t = sigma(s.a * (q[1] - s.epsilon)) * mu;
    assert!((g12 - 1.0).abs() < 1e-9, "g12 = {g12}");
    assert!((g2t - 1.0).abs() < 1e-9, "g2T = {g2t}");
}

#[test]
fn idle_network_rests_near_empty() {
    let model = Model::new(chain2(0.0, 2.0, 2.0, 5.0).unwrap(), smooth()).unwrap();
    let cert = solve_from_zero(&model);
    assert_eq!(cert.status, EquilibriumStatus::Found);
    assert!(cert.residual < 1e-10);
    let eps = Smoothing::<f64>::default().epsilon;
    assert!(cert.q.unwrap().iter().all(|&x| (0.0..=eps).contains(&x)));
}

#[test]
fn overloaded_hub_subsystem_has_no_equilibrium() {
    let mut model = Model::new(fig1(3.0, 2.0).unwrap(), shared()).unwrap();
    let pinned = pin_overloaded(&mut model, Some(1));
    assert_eq!(pinned.len(), 1);
    let cert = solve_from_zero(&model);
    assert!(matches!(cert.status, EquilibriumStatus::NotFound | EquilibriumStatus::Diverged));
    assert!(!cert.found());
}

#[test]
fn hub_subsystem_below_the_cap_has_an_equilibrium() {
    let mut model = Model::new(fig1(3.0, 1.2).unwrap(), shared()).unwrap();
    pin_overloaded(&mut model, Some(1));
    let cert = solve_from_zero(&model);
    assert_eq!(cert.status, EquilibriumStatus::Found);
}

#[test]
fn chain_box_is_ordered_and_certified() {
    let model = Model::new(chain2(1.0, 2.0, 2.0, 10.0).unwrap(), smooth()).unwrap();
    let bx = construct_backpressure_box(&model, &BoxOptions::default()).unwrap();
    let r = &bx.region;
    assert!(r.lower.iter().all(|&x| x == 0.0));
    assert!(r.upper[0] > r.upper[1]);
    assert!(r.upper[1] <= 10.0 - 0.1);
    let cert = verify_box(&model, r, &FaceSamplingOptions::default());
    assert!(cert.certified);
    assert_eq!(cert.label, "sampled evidence");
}

#[test]
fn single_egress_node_box_brackets_the_root() {
    let net = NetworkBuilder::new()
        .node("k", Buffer::Unbounded)
        .unwrap()
        .egress("k", 2.0)
        .unwrap()
        .commodity("x", &[("k", 1.0)], false)
        .unwrap()
        .build()
        .unwrap();
    let model = Model::new(net, smooth()).unwrap();
    let bx = construct_backpressure_box(&model, &BoxOptions::default()).unwrap();
    let up = bx.region.upper[0];
    assert!(model.drift(&[0.0], None).unwrap()[0] >= 0.0);
    assert!(model.drift(&[up], None).unwrap()[0] <= 0.0);
    assert!(verify_box(&model, &bx.region, &FaceSamplingOptions::default()).certified);
}

#[test]
fn overloaded_source_fails_on_its_upper_face() {
    let model = Model::new(chain2(3.0, 2.0, 1.0, 5.0).unwrap(), smooth()).unwrap();
    let region = BoxRegion::new(vec![0.0, 0.0], vec![10.0, 4.0]).unwrap();
    let cert = verify_box(&model, &region, &FaceSamplingOptions::default());
    assert!(!cert.certified);
    let w = cert.witness.unwrap();
    assert_eq!((w.coord, w.face), (0, Face::Upper));
    assert!(w.f > 0.0);
}

#[test]
fn capacity_violation_names_the_node() {
    let model = Model::new(chain2(3.0, 2.0, 1.0, 5.0).unwrap(), smooth()).unwrap();
    match construct_backpressure_box(&model, &BoxOptions::default()) {
        Err(Error::CapacityInfeasible { node, .. }) => assert_eq!(node, "s"),
        other => panic!("expected a capacity error, got {other:?}"),
    }
}

#[test]
fn tiny_buffer_makes_the_box_infeasible() {
    let net = bufstab::instances::line(4, 0.2, 1.5, 1.0).unwrap();
    let model = Model::new(net, smooth()).unwrap();
    assert!(matches!(
        construct_backpressure_box(&model, &BoxOptions::default()),
        Err(Error::BoxInfeasible { .. })
    ));
}

#[test]
fn disjoint_commodities_give_a_product_of_chain_boxes() {
    let net = NetworkBuilder::new()
        .node("a", Buffer::Unbounded)
        .unwrap()
        .node("ka", Buffer::Finite(10.0))
        .unwrap()
        .node("b", Buffer::Unbounded)
        .unwrap()
        .node("kb", Buffer::Finite(10.0))
        .unwrap()
        .link("a", "ka", 2.0)
        .unwrap()
        .link("b", "kb", 2.0)
        .unwrap()
        .egress_for("ka", "x", 2.0)
        .unwrap()
        .egress_for("kb", "y", 2.0)
        .unwrap()
        .commodity("x", &[("a", 1.0)], false)
        .unwrap()
        .commodity("y", &[("b", 1.0)], false)
        .unwrap()
        .build()
        .unwrap();
    let model = Model::new(net, smooth()).unwrap();
    let pb = per_commodity_box(&model, &BoxOptions::default(), &FaceSamplingOptions::default()).unwrap();
    assert!(pb.certificate.certified);
    let single = Model::new(chain2(1.0, 2.0, 2.0, 10.0).unwrap(), smooth()).unwrap();
    let one = construct_backpressure_box(&single, &BoxOptions::default()).unwrap().region;
    let mut uppers: Vec<f64> = pb.construction.region.upper.clone();
    uppers.sort_by(f64::total_cmp);
    let mut want = [one.upper.clone(), one.upper.clone()].concat();
    want.sort_by(f64::total_cmp);
    assert_eq!(uppers, want);
}

#[test]
fn commodities_sharing_a_link_with_separate_buffers_are_certified() {
    let net = NetworkBuilder::new()
        .node("s", Buffer::Unbounded)
        .unwrap()
        .node("k", Buffer::Finite(12.0))
        .unwrap()
        .link("s", "k", 4.0)
        .unwrap()
        .egress("k", 2.0)
        .unwrap()
        .commodity("x", &[("s", 0.5)], false)
        .unwrap()
        .commodity("y", &[("s", 0.8)], false)
        .unwrap()
        .build()
        .unwrap();
    let model = Model::new(net, smooth()).unwrap();
    let pb = per_commodity_box(&model, &BoxOptions::default(), &FaceSamplingOptions::default()).unwrap();
    assert!(pb.certificate.certified);
    let cert = find_equilibrium(&model, &pb.construction.region.center(), &SolverOptions::default()).unwrap();
    assert!(cert.found());
    assert!(pb.construction.region.contains(cert.q.as_ref().unwrap(), 1e-9));
}

#[test]
fn shared_buffers_are_not_boxed() {
    let model = Model::new(fig1(1.0, 1.0).unwrap(), shared()).unwrap();
    assert!(matches!(
        per_commodity_box(&model, &BoxOptions::default(), &FaceSamplingOptions::default()),
        Err(Error::NotApplicable(_))
    ));
}

#[test]
fn chain_threshold_sits_at_the_egress_capacity() {
    let mu = 1.0;
    let net = chain2(0.5, 2.0, mu, 5.0).unwrap();
    let res = existence_sweep(&net, &smooth(), 0, (0.0, 2.0 * mu), &SweepOptions::default()).unwrap();
    assert!((res.threshold - mu).abs() < 0.01, "threshold {}", res.threshold);
    assert!(res.hi - res.lo <= 2.0 * mu / 4096.0 + 1e-12);
    assert_eq!(res.points.len(), 14);
    let mut out = Vec::new();
    res.write_csv(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert!(text.starts_with("lambda,status,residual,stable,threshold\n"));
    assert_eq!(text.lines().count(), 15);
}

#[test]
fn stable_interval_is_not_a_bracket() {
    let net = chain2(0.5, 2.0, 1.0, 5.0).unwrap();
    assert!(matches!(
        existence_sweep(&net, &smooth(), 0, (0.0, 0.5), &SweepOptions::default()),
        Err(Error::NoBracket(_))
    ));
}

#[test]
fn hub_threshold_scales_with_the_overloaded_egress() {
    for mu1 in [1.0, 2.0, 3.0] {
        let mut cfg = fig1_config(mu1 + 1.0, 0.5);
        cfg.mu[0] = mu1;
        let net = cfg.to_network().unwrap();
        let res = existence_sweep(&net, &shared(), 1, (0.0, 3.0), &SweepOptions::default()).unwrap();
        let want = mu1 * 4.5 / 6.0;
        assert!((res.threshold - want).abs() < 0.01, "μ1 = {mu1}: {} vs {want}", res.threshold);
    }
}

#[test]
fn equilibria_from_many_starts_coincide() {
    for seed in 0..8 {
        let model = Model::new(random_dag(500 + seed, 3 + seed as usize % 8).unwrap(), smooth()).unwrap();
        let mut first: Option<Vec<f64>> = None;
        for q0 in random_starts(&model, 20, seed) {
            let cert = find_equilibrium(&model, &q0, &SolverOptions::default()).unwrap();
            let Some(q) = cert.q else { continue };
            match &first {
                None => first = Some(q),
                Some(p) => {
                    let d = p.iter().zip(&q).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                    assert!(d < 1e-6, "seed {seed}: equilibria differ by {d}");
                }
            }
        }
        assert!(first.is_some(), "seed {seed}: nothing found");
    }
}

#[test]
fn certified_boxes_contain_the_solution_from_their_center() {
    let mut certified = 0;
    for seed in 0..20 {
        let model = Model::new(random_dag(700 + seed, 2 + seed as usize % 6).unwrap(), smooth()).unwrap();
        let Ok(bx) = construct_backpressure_box(&model, &BoxOptions::default()) else { continue };
        if !verify_box(&model, &bx.region, &FaceSamplingOptions::default()).certified {
            continue;
        }
        certified += 1;
        let cert = find_equilibrium(&model, &bx.region.center(), &SolverOptions::default()).unwrap();
        assert!(cert.found(), "seed {seed}");
        assert!(bx.region.contains(cert.q.as_ref().unwrap(), 1e-9), "seed {seed}");
    }
    assert!(certified >= 10);
}

#[test]
fn found_equilibria_are_linearly_stable() {
    for seed in 0..20 {
        let model = Model::new(random_dag(900 + seed, 2 + seed as usize % 11).unwrap(), smooth()).unwrap();
        let cert = solve_from_zero(&model);
        let q = cert.q.expect("equilibrium");
        let j = jacobian(&model, &q, JacobianMethod::Analytic).unwrap();
        assert!(max_real_part(&eigen_spectrum(&j.matrix).unwrap()) < -1e-8, "seed {seed}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn found_certificates_respect_the_tolerance(seed in 0u64..10_000, n in 2usize..10) {
        let model = Model::new(random_dag(seed, n).unwrap(), smooth()).unwrap();
        let cert = solve_from_zero(&model);
        if cert.found() {
            let q = cert.q.unwrap();
            prop_assert!(cert.residual < 1e-10);
            prop_assert!(model.region().violation(&q) == 0.0);
            prop_assert!(projected_residual(&model, &q) < 1e-10);
        }
    }
}
