//! End-to-end acceptance suite. Every criterion runs in sequence inside one test so
//! that the wall-clock limits are measured without competing test threads. One
//! `PASS`/`FAIL` line per criterion is written straight to stderr, so the lines show
//! up in the normal `cargo test` output.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use bufstab::casestudy::{admissible_ranges_c_commodity, random_config};
use bufstab::dynamics::{integrate, IntegrateOptions, Model};
use bufstab::equilibrium::*;
use bufstab::instances::{chain2, fig1, random_dag};
use bufstab::linalg::Matrix;
use bufstab::network::{Buffer, FeasibleRegion, NetworkBuilder, StateLayout};
use bufstab::policy::{check_pointwise_condition_in, Policy, PolicyFamily, Smoothing, Verdict};
use bufstab::stability::*;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

const DAG_INSTANCES: u64 = 100;
const CASE_CONFIGS: usize = 50;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn report(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
    let _ = err.flush();
}

fn smooth() -> Policy<f64> {
    Policy::smooth_backpressure(Smoothing::default()).unwrap()
}

fn shared() -> Policy<f64> {
    Policy::shared_buffer_backpressure(Smoothing::default()).unwrap()
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn bufstab_run(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_bufstab"))
        .args([cmd, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .args(extra)
        .output()
        .unwrap();
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stdout).into_owned())
}

fn read_json(path: PathBuf) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn dag(seed: u64) -> Model<f64> {
    let n = 2 + (seed % 11) as usize;
    Model::new(random_dag(40_000 + seed, n).unwrap(), smooth()).unwrap()
}

fn zero_start(model: &Model<f64>) -> EquilibriumCertificate<f64> {
    let mut q0 = vec![0.0; model.dim()];
    model.apply_pins(&mut q0);
    find_equilibrium(model, &q0, &SolverOptions::default()).unwrap()
}

fn fig1_reproduction() -> Outcome {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut notes = Vec::new();
    let mut pass = true;

    let (code, _) = bufstab_run("simulate", &configs().join("fig1.toml"), dir.path(), &[]);
    let sim = read_json(dir.path().join("simulate.json"));
    let thr = sim["commodities"][1]["throughput"].as_f64().unwrap_or(f64::NAN);
    let growth = sim["queues"]
        .as_array()
        .and_then(|qs| qs.iter().find(|q| q["label"] == "q_2_2"))
        .and_then(|q| q["growth_rate"].as_f64())
        .unwrap_or(f64::NAN);
    pass &= code == 0 && (thr - 1.5).abs() <= 0.05 && (growth - 1.5).abs() <= 0.1;
    notes.push(format!("throughput {thr:.4}, q_2_2 growth {growth:.4}"));

    let (code, _) = bufstab_run("sweep", &configs().join("fig1.toml"), dir.path(), &["--bracket", "0:3"]);
    let threshold = read_json(dir.path().join("sweep.json"))["threshold"].as_f64().unwrap_or(f64::NAN);
    pass &= code == 0 && (threshold - 1.5).abs() <= 0.01;
    notes.push(format!("threshold {threshold:.4}"));

    let text = std::fs::read_to_string(configs().join("fig1.toml")).unwrap();
    let below = dir.path().join("fig1-below.toml");
    std::fs::write(&below, text.replace("\"2\" = 3.0 }", "\"2\" = 1.2 }")).unwrap();
    let (code, _) = bufstab_run("analyze", &below, dir.path(), &["--samples", "500"]);
    let sub = &read_json(dir.path().join("analyze.json"))["subsystem"]["equilibrium"];
    let residual = sub["residual"].as_f64().unwrap_or(f64::NAN);
    pass &= code == 0 && sub["status"] == "FOUND" && residual < 1e-10;
    notes.push(format!("λ2 = 1.2: {} residual {residual:.1e}", sub["status"].as_str().unwrap_or("missing")));

    let elapsed = started.elapsed();
    pass &= elapsed < Duration::from_secs(30);
    notes.push(format!("{:.1} s", elapsed.as_secs_f64()));
    Outcome::new(pass, notes.join("; "))
}

fn closed_form_vs_sweeps() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut checked, mut worst, mut failures) = (0, 0.0f64, Vec::new());
    for i in 0..CASE_CONFIGS {
        let commodities = 2 + i % 3;
        let (cfg, over) = random_config(&mut rng, commodities);
        let ranges = admissible_ranges_c_commodity(&cfg, over).unwrap();
        let net = cfg.to_network().unwrap();
        for e in &ranges.entries {
            let upper = e.interval.upper;
            let t = match existence_sweep(&net, &shared(), e.commodity, (0.0, 1.5 * upper), &SweepOptions::default()) {
                Ok(s) => s.threshold,
                Err(err) => {
                    failures.push(format!("config {i} commodity {}: {err}", e.commodity));
                    continue;
                }
            };
            checked += 1;
            let gap = (t - upper).abs();
            worst = worst.max(gap);
            if gap > 0.02 {
                failures.push(format!("config {i} commodity {}: {t:.4} vs {upper:.4}", e.commodity));
            }
        }
    }
    let elapsed = started.elapsed();
    let pass = failures.is_empty() && elapsed < Duration::from_secs(600);
    let mut detail = format!(
        "{CASE_CONFIGS} configs, {checked} thresholds, worst gap {worst:.4}, {:.0} s",
        elapsed.as_secs_f64()
    );
    if let Some(f) = failures.first() {
        detail.push_str(&format!("; {} failures, first: {f}", failures.len()));
    }
    Outcome::new(pass, detail)
}

fn random_equilibria_are_certified() -> Outcome {
    let (mut found, mut bad) = (0, Vec::new());
    let mut worst = (f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0f64);
    for seed in 0..DAG_INSTANCES {
        let model = dag(seed);
        let cert = zero_start(&model);
        let (true, Some(q)) = (cert.found(), cert.q.clone()) else {
            bad.push(format!("instance {seed}: {}", cert.status));
            continue;
        };
        found += 1;
        let p = analyze_point(&model, &q).unwrap();
        let lyap = p.lyapunov.as_ref().map(|l| (l.verdict.clone(), l.lambda_max));
        let perron = p.perron.as_ref().map(|s| s.residual).unwrap_or(f64::INFINITY);
        worst.0 = worst.0.max(p.max_real_part);
        worst.1 = worst.1.max(lyap.as_ref().map_or(f64::INFINITY, |l| l.1));
        worst.2 = worst.2.max(perron);
        let ok = p.max_real_part < -1e-8
            && p.column_dominance.verdict == Verdict::Pass
            && matches!(lyap, Ok((Verdict::Pass, l)) if l < -STABILITY_TOL)
            && perron < PERRON_RESIDUAL_TOL;
        if !ok {
            bad.push(format!("instance {seed}"));
        }
    }
    let mut detail = format!(
        "{found}/{DAG_INSTANCES} found; max Re {:.2e}, max λ_max(Q) {:.2e}, max Perron residual {:.1e}",
        worst.0, worst.1, worst.2
    );
    if let Some(b) = bad.first() {
        detail.push_str(&format!("; {} failures, first: {b}", bad.len()));
    }
    Outcome::new(bad.is_empty(), detail)
}

fn multistart_uniqueness() -> Outcome {
    let (mut spread, mut bad) = (0.0f64, Vec::new());
    let mut solves = 0;
    for seed in 0..DAG_INSTANCES {
        let model = dag(seed);
        let mut first: Option<Vec<f64>> = None;
        for q0 in random_starts(&model, 20, seed) {
            let cert = find_equilibrium(&model, &q0, &SolverOptions::default()).unwrap();
            let (true, Some(q)) = (cert.found(), cert.q.clone()) else {
                bad.push(format!("instance {seed}: {} from a start", cert.status));
                continue;
            };
            solves += 1;
            match &first {
                None => first = Some(q),
                Some(p) => {
                    let d = p.iter().zip(&q).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                    spread = spread.max(d);
                    if d >= 1e-6 {
                        bad.push(format!("instance {seed}: spread {d:.1e}"));
                    }
                }
            }
        }
    }
    let mut detail = format!("{solves} solves over {DAG_INSTANCES} instances, max spread {spread:.1e}");
    if let Some(b) = bad.first() {
        detail.push_str(&format!("; {} failures, first: {b}", bad.len()));
    }
    Outcome::new(bad.is_empty(), detail)
}

fn boxes_are_certified() -> Outcome {
    let (mut certified, mut samples, mut bad) = (0, 0usize, Vec::new());
    for seed in 0..DAG_INSTANCES {
        let model = dag(seed);
        let bx = match construct_backpressure_box(&model, &BoxOptions::default()) {
            Ok(b) => b,
            Err(e) => {
                bad.push(format!("instance {seed}: {e}"));
                continue;
            }
        };
        let cert = verify_box(&model, &bx.region, &FaceSamplingOptions::default());
        samples = samples.max(cert.total_samples);
        if !cert.certified {
            bad.push(format!("instance {seed}: faces not certified"));
            continue;
        }
        certified += 1;
        let eq = find_equilibrium(&model, &bx.region.center(), &SolverOptions::default()).unwrap();
        let inside = eq.found() && eq.q.as_ref().is_some_and(|q| bx.region.contains(q, 1e-9));
        if !inside {
            bad.push(format!("instance {seed}: Newton from the center left the box"));
        }
    }
    let mut detail = format!("{certified}/{DAG_INSTANCES} certified, largest face sample {samples}");
    if let Some(b) = bad.first() {
        detail.push_str(&format!("; {} failures, first: {b}", bad.len()));
    }
    Outcome::new(bad.is_empty(), detail)
}

/// Queue gaps above about 15 push `σ'(a·Δq)` below the smallest double.
fn moderate_state(model: &Model<f64>, rng: &mut ChaCha8Rng) -> Vec<f64> {
    model
        .region()
        .bounds
        .iter()
        .map(|b| rng.gen_range(b.lower..b.upper.min(10.0)))
        .collect()
}

fn jacobian_matches_differences() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for i in 0..1000u64 {
        let model = Model::new(random_dag(60_000 + i, rng.gen_range(2..=12)).unwrap(), smooth()).unwrap();
        let q = moderate_state(&model, &mut rng);
        let a = jacobian(&model, &q, JacobianMethod::Analytic).unwrap();
        let f = jacobian(&model, &q, JacobianMethod::FiniteDifference).unwrap();
        worst = worst.max(relative_error(&a.matrix, &f.matrix, 1e-3));
    }
    Outcome::new(worst < 1e-5, format!("1000 pairs, worst relative error {worst:.2e}"))
}

fn sign_conditions() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut states = Vec::with_capacity(10_000);
    let mut inst = 0;
    while states.len() < 10_000 {
        let net = random_dag(70_000 + inst, rng.gen_range(3..=12)).unwrap();
        inst += 1;
        let layout = StateLayout::new(&net);
        let region = FeasibleRegion::from_layout(&layout, 100.0);
        for _ in 0..100 {
            let q: Vec<f64> = region
                .bounds
                .iter()
                .map(|b| rng.gen_range(b.lower + 1e-6..b.upper - 1e-6))
                .collect();
            states.push((net.clone(), layout.clone(), q));
        }
    }
    states.truncate(10_000);
    let count_failures = |pol: &Policy<f64>| {
        states
            .iter()
            .filter(|(net, layout, q)| check_pointwise_condition_in(pol, net, layout, q).unwrap().verdict != Verdict::Pass)
            .count()
    };
    let smooth_fail = count_failures(&Policy::new(PolicyFamily::SmoothBackpressure, Smoothing::default()).unwrap());
    let occ_fail = count_failures(&Policy::new(PolicyFamily::BufferOccupancy, Smoothing::default()).unwrap());
    let const_fail = count_failures(&Policy::constant_rate(0.5).unwrap());
    let pass = smooth_fail == 0 && occ_fail == 0 && const_fail == states.len();
    Outcome::new(
        pass,
        format!(
            "{} states; violations: smooth backpressure {smooth_fail}, buffer occupancy {occ_fail}, constant rate {const_fail}",
            states.len()
        ),
    )
}

/// Disjoint chains, one commodity each.
fn decoupled_network(rng: &mut ChaCha8Rng) -> bufstab::Network {
    let mut b = NetworkBuilder::new();
    let chains = rng.gen_range(2..=3);
    for k in 0..chains {
        let len = rng.gen_range(2..=4);
        let names: Vec<String> = (0..len).map(|i| format!("{k}.{i}")).collect();
        for (i, name) in names.iter().enumerate() {
            let buf = if i == 0 { Buffer::Unbounded } else { Buffer::Finite(rng.gen_range(8.0..20.0)) };
            b = b.node(name, buf).unwrap();
        }
        for w in names.windows(2) {
            b = b.link(&w[0], &w[1], rng.gen_range(1.0..3.0)).unwrap();
        }
        b = b.egress(names.last().unwrap(), rng.gen_range(3.0..4.0)).unwrap();
        b = b.commodity(&format!("c{k}"), &[(names[0].as_str(), rng.gen_range(0.2..0.8))], false).unwrap();
    }
    b.build().unwrap()
}

fn oracle_sigma_min(m: &Matrix<f64>) -> f64 {
    let d = DMatrix::from_fn(m.rows(), m.cols(), |r, c| m[(r, c)]);
    d.singular_values().min()
}

fn block_dominance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut blocks, mut worst, mut bad) = (0, 0.0f64, Vec::new());
    for i in 0..100 {
        let model = Model::new(decoupled_network(&mut rng), smooth()).unwrap();
        let q = moderate_state(&model, &mut rng);
        let j = jacobian(&model, &q, JacobianMethod::Analytic).unwrap();
        let bd = check_block_dominance(&j.matrix, &j.blocks).unwrap();
        for (r, m) in j.blocks.iter().zip(&bd.blocks) {
            blocks += 1;
            let smin = oracle_sigma_min(&j.matrix.block(r.clone(), r.clone()));
            let gap = (m.sigma_min - smin).abs() / (1.0 + smin);
            worst = worst.max(gap);
            if m.coupling != 0.0 || m.margin != m.sigma_min || gap > 1e-9 {
                bad.push(format!("instance {i}"));
            }
        }
    }
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(2..=8);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|r| {
                (0..n)
                    .map(|c| if r == c { -rng.gen_range(0.5..5.0) } else { rng.gen_range(-1.0..1.0) })
                    .collect()
            })
            .collect();
        let m = Matrix::from_rows(&rows);
        let parts: Vec<_> = (0..n).map(|i| i..i + 1).collect();
        let bd = check_block_dominance(&m, &parts).unwrap();
        let cd = check_column_dominance(&m);
        let same_margins = bd.blocks.iter().zip(&cd.margins).all(|(b, c)| (b.margin - c).abs() < 1e-12);
        let same_verdict = (bd.verdict == Verdict::Pass) == (cd.verdict == Verdict::Pass);
        if !(same_margins && same_verdict) {
            mismatches += 1;
        }
    }
    let pass = bad.is_empty() && mismatches == 0;
    Outcome::new(
        pass,
        format!(
            "{blocks} decoupled blocks, worst σ_min gap {worst:.1e}, {} block failures; 1000 scalar partitions, {mismatches} mismatches",
            bad.len()
        ),
    )
}

fn conservation() -> Outcome {
    let mut cases: Vec<(String, Model<f64>)> = (0..20)
        .map(|s| (format!("dag {s}"), dag(s)))
        .collect();
    cases.push(("chain".into(), Model::new(chain2(1.0, 2.0, 2.0, 5.0).unwrap(), smooth()).unwrap()));
    cases.push(("hub".into(), Model::new(fig1(1.0, 1.0).unwrap(), shared()).unwrap()));
    let opts = IntegrateOptions::default();
    let (mut worst, mut bad) = (0.0f64, Vec::new());
    for (name, model) in &cases {
        let q0 = vec![0.0; model.dim()];
        let traj = integrate(model, &q0, 1000.0, &opts).unwrap();
        let arrival: f64 = (0..model.dim()).map(|k| model.arrival(k, None)).sum();
        let egress: f64 = (0..model.net().commodity_count())
            .map(|c| traj.throughput_estimate(c, 500.0).unwrap())
            .sum();
        let rel = (egress - arrival).abs() / arrival;
        worst = worst.max(rel);
        if rel > 0.01 {
            bad.push(format!("{name}: egress {egress:.4} vs arrival {arrival:.4}"));
        }
    }
    let mut detail = format!("{} stable instances, worst relative gap {worst:.2e}", cases.len());
    if let Some(b) = bad.first() {
        detail.push_str(&format!("; first failure {b}"));
    }
    Outcome::new(bad.is_empty(), detail)
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("fig1 reproduction", fig1_reproduction),
        ("closed-form ranges vs sweeps", closed_form_vs_sweeps),
        ("random equilibria certified stable", random_equilibria_are_certified),
        ("multistart uniqueness", multistart_uniqueness),
        ("backpressure boxes", boxes_are_certified),
        ("analytic vs finite-difference jacobian", jacobian_matches_differences),
        ("sign conditions", sign_conditions),
        ("block dominance reductions", block_dominance),
        ("flow conservation", conservation),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let o = check();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        report(&format!(
            "criterion {} {name}: {verdict} | {} | {:.1} s",
            i + 1,
            o.detail,
            started.elapsed().as_secs_f64()
        ));
        if !o.pass {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
