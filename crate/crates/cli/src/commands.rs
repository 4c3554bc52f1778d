//! The five subcommands.

use std::collections::BTreeMap;

use bufstab::casestudy::{self, admissible_range_two_commodity, admissible_ranges_c_commodity, CommodityRanges, Interval};
use bufstab::dynamics::{integrate, IntegrateOptions, Model, TrajectoryStatus};
use bufstab::equilibrium::{
    existence_sweep, find_equilibrium_multistart, overloaded_commodities, per_commodity_box, pin_overloaded,
    BoxOptions, EquilibriumCertificate, EquilibriumStatus, FaceSamplingOptions, NotFoundReason, ProductBox,
    SolverOptions, SweepOptions, SweepPoint,
};
use bufstab::network::NetworkInstance;
use bufstab::policy::{Policy, Smoothing};
use bufstab::stability::{self, analyze_point, grid_condition_scan, GlobalConditionReport, PointAnalysis, Sampler};
use bufstab::Error;
use serde::Serialize;

use crate::config::{load, LoadedConfig, RunConfig};
use crate::output::{sha256_hex, write_atomic, write_json, Header, REPORT_SCHEMA_VERSION};
use crate::{CliError, CommonArgs};

type Tolerances = BTreeMap<&'static str, f64>;

/// Spectral abscissa below which an equilibrium counts as asymptotically stable.
const EIGEN_MARGIN: f64 = -1e-8;
/// Largest gap between a closed-form endpoint and a sweep threshold reported as agreement.
const CASESTUDY_AGREEMENT: f64 = 0.02;

struct Context {
    loaded: LoadedConfig,
    seed: u64,
}

impl Context {
    fn new(a: &CommonArgs) -> Result<Self, CliError> {
        let loaded = load(&a.config)?;
        let seed = a.seed.or(loaded.config.seed).unwrap_or(0);
        Ok(Self { loaded, seed })
    }

    fn cfg(&self) -> &RunConfig {
        &self.loaded.config
    }

    fn network(&self) -> Result<NetworkInstance<f64>, CliError> {
        self.cfg()
            .network
            .as_ref()
            .ok_or_else(|| CliError::Config("missing [network] block".into()))?
            .build()
    }

    fn model(&self, net: NetworkInstance<f64>, cap: f64) -> Result<Model<f64>, CliError> {
        let pol = self.cfg().policy.build(&net)?;
        Model::with_cap(net, pol, cap).map_err(|e| match e {
            Error::InvalidNetwork(_) => CliError::Run(e.to_string()),
            other => CliError::Config(other.to_string()),
        })
    }

    fn header(&self, command: &'static str, tolerances: Tolerances, net: Option<&NetworkInstance<f64>>, model: Option<&Model<f64>>) -> Header<Tolerances> {
        Header {
            schema_version: REPORT_SCHEMA_VERSION,
            tool: "bufstab",
            version: env!("CARGO_PKG_VERSION"),
            command,
            config_sha256: sha256_hex(&self.loaded.raw),
            seed: self.seed,
            tolerances,
            node_index: net.map(|n| n.index_map()).unwrap_or_default(),
            state_index: model.map(|m| m.layout().index_map(m.net())).unwrap_or_default(),
        }
    }
}

fn run_err(e: Error) -> CliError {
    CliError::Run(e.to_string())
}

fn smoothing_tolerances(t: &mut Tolerances, s: Smoothing<f64>) {
    t.insert("smoothing_a", s.a);
    t.insert("smoothing_epsilon", s.epsilon);
}

fn solver_tolerances(t: &mut Tolerances, s: &SolverOptions<f64>) {
    t.insert("newton_tol", s.tol);
    t.insert("newton_max_iter", s.max_iter as f64);
    t.insert("newton_max_halvings", s.max_halvings as f64);
    t.insert("fallback_t_end", s.fallback_t_end);
    t.insert("fallback_step", s.fallback_step);
    t.insert("fallback_steady_tol", s.fallback_steady_tol);
    t.insert("projection_tol", s.projection_tol);
}

#[derive(Serialize)]
struct ValidateReport {
    header: Header<Tolerances>,
    valid: bool,
    messages: Vec<String>,
    violations: Vec<bufstab::network::Violation>,
}

pub fn validate(a: &CommonArgs) -> Result<i32, CliError> {
    let ctx = Context::new(a)?;
    let net = ctx.network()?;
    let report = net.validate();
    let out = ValidateReport {
        header: ctx.header("validate", Tolerances::new(), Some(&net), None),
        valid: report.is_valid(),
        messages: report.violations.iter().map(ToString::to_string).collect(),
        violations: report.violations.clone(),
    };
    let text = serde_json::to_string_pretty(&out).map_err(|e| CliError::Run(e.to_string()))?;
    println!("{text}");
    for m in &out.messages {
        eprintln!("{m}");
    }
    Ok(if out.valid { 0 } else { 1 })
}

#[derive(Serialize)]
struct CommoditySummary {
    id: String,
    arrival_rate: f64,
    throughput: Option<f64>,
}

#[derive(Serialize)]
struct QueueSummary {
    label: String,
    final_value: f64,
    unbounded: bool,
    growth_rate: Option<f64>,
    status: &'static str,
}

#[derive(Serialize)]
struct SimulateReport {
    header: Header<Tolerances>,
    status: &'static str,
    trajectory_status: TrajectoryStatus,
    t_end: f64,
    window: f64,
    steps: usize,
    rejected_steps: usize,
    clamp_events: usize,
    max_clamp: f64,
    max_overshoot: f64,
    smoothing_too_loose: bool,
    commodities: Vec<CommoditySummary>,
    queues: Vec<QueueSummary>,
}

pub fn simulate(a: &CommonArgs) -> Result<i32, CliError> {
    let ctx = Context::new(a)?;
    let sim = &ctx.cfg().simulate;
    let net = ctx.network()?;
    let model = ctx.model(net.clone(), ctx.cfg().analyze.sampling_cap)?;
    let horizon = a.horizon.unwrap_or(sim.horizon);
    let step = a.step.unwrap_or(sim.step);
    if !(horizon > 0.0 && step > 0.0) {
        return Err(CliError::Config(format!("horizon {horizon} and step {step} must be positive")));
    }
    let q0 = match &sim.initial {
        Some(q) if q.len() != model.dim() => {
            return Err(CliError::Config(format!(
                "simulate.initial has {} entries, the state has {}",
                q.len(),
                model.dim()
            )))
        }
        Some(q) => q.clone(),
        None => vec![0.0; model.dim()],
    };
    let opts = IntegrateOptions {
        step,
        adaptive: sim.adaptive,
        divergence_cap: sim.divergence_cap,
        max_samples: sim.max_samples,
        ..IntegrateOptions::default()
    };
    let traj = integrate(&model, &q0, horizon, &opts).map_err(|e| match e {
        Error::InfeasibleState(_) | Error::Dimension { .. } => CliError::Config(e.to_string()),
        other => run_err(other),
    })?;
    let window = traj.t_end() / 2.0;
    let diverged = traj.status == TrajectoryStatus::Diverged;
    let labels = model.labels();
    let queues: Vec<QueueSummary> = (0..model.dim())
        .map(|k| {
            let unbounded = model.layout().upper(k).is_none();
            let growth = traj.growth_rate(k, window).ok();
            let growing = unbounded && (diverged || growth.is_some_and(|g| g > sim.growth_tol));
            QueueSummary {
                label: labels[k].clone(),
                final_value: traj.final_state()[k],
                unbounded,
                growth_rate: growth,
                status: if growing { "UNSTABLE" } else { "STABLE" },
            }
        })
        .collect();
    let status = if diverged || queues.iter().any(|q| q.status == "UNSTABLE") {
        "UNSTABLE"
    } else {
        "STABLE"
    };
    let ids: Vec<String> = net.commodities().iter().map(|c| c.id.clone()).collect();
    let commodities = ids
        .iter()
        .enumerate()
        .map(|(c, id)| CommoditySummary {
            id: id.clone(),
            arrival_rate: net.total_arrival(c),
            throughput: traj.throughput_estimate(c, window).ok(),
        })
        .collect();
    let mut tol = Tolerances::new();
    tol.insert("horizon", horizon);
    tol.insert("step", step);
    tol.insert("rtol", opts.rtol);
    tol.insert("atol", opts.atol);
    tol.insert("clamp_threshold", opts.clamp_threshold);
    tol.insert("divergence_cap", opts.divergence_cap);
    tol.insert("growth_tol", sim.growth_tol);
    smoothing_tolerances(&mut tol, model.policy().smoothing());
    let report = SimulateReport {
        header: ctx.header("simulate", tol, Some(&net), Some(&model)),
        status,
        trajectory_status: traj.status,
        t_end: traj.t_end(),
        window,
        steps: traj.steps,
        rejected_steps: traj.rejected_steps,
        clamp_events: traj.clamp_events,
        max_clamp: traj.max_clamp,
        max_overshoot: traj.max_overshoot,
        smoothing_too_loose: traj.smoothing_too_loose,
        commodities,
        queues,
    };
    let mut csv = Vec::new();
    traj.write_csv(&mut csv, &labels, &ids).map_err(run_err)?;
    write_atomic(&a.out, "trajectory.csv", &csv)?;
    write_json(&a.out, "simulate.json", &report)?;
    println!("status: {status}");
    for c in &report.commodities {
        println!(
            "commodity {}: arrival {} throughput {}",
            c.id,
            c.arrival_rate,
            c.throughput.map_or("n/a".into(), |x| format!("{x:.6}"))
        );
    }
    for q in report.queues.iter().filter(|q| q.status == "UNSTABLE") {
        println!(
            "{}: UNSTABLE (growth {})",
            q.label,
            q.growth_rate.map_or("n/a".into(), |x| format!("{x:.6}"))
        );
    }
    Ok(0)
}

#[derive(Serialize)]
struct Conclusion {
    conclusion: &'static str,
    stage: Option<&'static str>,
    reason: String,
}

#[derive(Serialize)]
struct SubsystemReport {
    pinned_commodities: Vec<String>,
    commodities: Vec<String>,
    equilibrium: EquilibriumCertificate<f64>,
    analysis: Option<Result<PointAnalysis, String>>,
    verdict: &'static str,
}

#[derive(Serialize)]
struct AnalyzeReport {
    header: Header<Tolerances>,
    conclusion: Conclusion,
    condition_scan: Result<GlobalConditionReport, String>,
    overloaded_commodities: Vec<String>,
    equilibrium: Option<EquilibriumCertificate<f64>>,
    analysis: Option<Result<PointAnalysis, String>>,
    box_certificate: Result<ProductBox<f64>, String>,
    subsystem: Option<SubsystemReport>,
}

fn point_verdict(analysis: &Result<PointAnalysis, String>) -> Result<(), (&'static str, String)> {
    match analysis {
        Err(e) => Err(("jacobian", e.clone())),
        Ok(p) if p.eigen_error.is_some() => Err(("eigenvalues", p.eigen_error.clone().unwrap_or_default())),
        Ok(p) if !(p.max_real_part < EIGEN_MARGIN) => Err((
            "eigenvalues",
            format!("largest real part {:e} is not below {EIGEN_MARGIN:e}", p.max_real_part),
        )),
        Ok(_) => Ok(()),
    }
}

pub fn analyze(a: &CommonArgs) -> Result<i32, CliError> {
    let ctx = Context::new(a)?;
    let acfg = &ctx.cfg().analyze;
    let net = ctx.network()?;
    let model = ctx.model(net.clone(), acfg.sampling_cap)?;
    let samples = a.samples.unwrap_or(acfg.samples);
    let solver = SolverOptions::default();
    let faces = FaceSamplingOptions {
        points_per_coordinate: acfg.face_points,
        max_total: acfg.face_budget,
        seed: ctx.seed,
        ..FaceSamplingOptions::default()
    };
    let com_id = |c: usize| net.commodities()[c].id.clone();

    let scan = grid_condition_scan(&model, Sampler::LatinHypercube { count: samples, seed: ctx.seed }).map_err(|e| e.to_string());
    let overloaded = overloaded_commodities(&net);

    let (equilibrium, analysis) = if overloaded.is_empty() {
        let cert = find_equilibrium_multistart(&model, acfg.starts, ctx.seed, &solver).map_err(run_err)?;
        let analysis = cert.q.as_ref().map(|q| analyze_point(&model, q).map_err(|e| e.to_string()));
        (Some(cert), analysis)
    } else {
        (None, None)
    };

    let box_certificate = if !overloaded.is_empty() {
        Err("skipped: overloaded commodities admit no bounded box".to_string())
    } else {
        per_commodity_box(&model, &BoxOptions::default(), &faces).map_err(|e| e.to_string())
    };

    let subsystem = if !overloaded.is_empty() && overloaded.len() < net.commodity_count() {
        let mut sub = model.clone();
        pin_overloaded(&mut sub, None);
        let cert = find_equilibrium_multistart(&sub, acfg.starts, ctx.seed, &solver).map_err(run_err)?;
        let analysis = cert.q.as_ref().map(|q| analyze_point(&sub, q).map_err(|e| e.to_string()));
        let verdict = match (&cert.status, &analysis) {
            (EquilibriumStatus::Found | EquilibriumStatus::BoxCertified, Some(an)) if point_verdict(an).is_ok() => "stable",
            (EquilibriumStatus::NotFound, _) if cert.reason == Some(NotFoundReason::SolverFailure) => "inconclusive",
            (EquilibriumStatus::NotFound | EquilibriumStatus::Diverged, _) => "unstable",
            _ => "inconclusive",
        };
        Some(SubsystemReport {
            pinned_commodities: overloaded.iter().map(|&c| com_id(c)).collect(),
            commodities: (0..net.commodity_count()).filter(|c| !overloaded.contains(c)).map(com_id).collect(),
            equilibrium: cert,
            analysis,
            verdict,
        })
    } else {
        None
    };

    let conclusion = conclude(&scan, &overloaded, equilibrium.as_ref(), analysis.as_ref(), &com_id);

    let mut tol = Tolerances::new();
    solver_tolerances(&mut tol, &solver);
    tol.insert("eigen_margin", EIGEN_MARGIN);
    tol.insert("stability_tol", stability::STABILITY_TOL);
    tol.insert("perron_tol", stability::PERRON_TOL);
    tol.insert("perron_residual_tol", stability::PERRON_RESIDUAL_TOL);
    tol.insert("face_tol", faces.tol);
    tol.insert("face_points_per_coordinate", faces.points_per_coordinate as f64);
    tol.insert("face_budget", faces.max_total as f64);
    tol.insert("scan_samples", samples as f64);
    tol.insert("newton_starts", acfg.starts as f64);
    tol.insert("sampling_cap", acfg.sampling_cap);
    smoothing_tolerances(&mut tol, model.policy().smoothing());

    let report = AnalyzeReport {
        header: ctx.header("analyze", tol, Some(&net), Some(&model)),
        conclusion,
        condition_scan: scan,
        overloaded_commodities: overloaded.iter().map(|&c| com_id(c)).collect(),
        equilibrium,
        analysis,
        box_certificate,
        subsystem,
    };
    write_json(&a.out, "analyze.json", &report)?;
    println!("conclusion: {}", report.conclusion.conclusion);
    if let Some(stage) = report.conclusion.stage {
        println!("stage: {stage}");
    }
    println!("reason: {}", report.conclusion.reason);
    if let Some(s) = &report.subsystem {
        println!("subsystem [{}]: {}", s.commodities.join(", "), s.verdict);
    }
    Ok(0)
}

fn conclude(
    scan: &Result<GlobalConditionReport, String>,
    overloaded: &[usize],
    equilibrium: Option<&EquilibriumCertificate<f64>>,
    analysis: Option<&Result<PointAnalysis, String>>,
    com_id: &dyn Fn(usize) -> String,
) -> Conclusion {
    let inconclusive = |stage, reason| Conclusion {
        conclusion: "INCONCLUSIVE",
        stage: Some(stage),
        reason,
    };
    if !overloaded.is_empty() {
        let ids: Vec<String> = overloaded.iter().map(|&c| com_id(c)).collect();
        return Conclusion {
            conclusion: "NO-EQUILIBRIUM EVIDENCE",
            stage: Some("arrival rates"),
            reason: format!("arrivals exceed total egress capacity for commodities {}", ids.join(", ")),
        };
    }
    let Some(cert) = equilibrium else {
        return inconclusive("equilibrium", "no equilibrium search was run".into());
    };
    match cert.status {
        EquilibriumStatus::Diverged => {
            return Conclusion {
                conclusion: "NO-EQUILIBRIUM EVIDENCE",
                stage: Some("equilibrium"),
                reason: cert.detail.clone().unwrap_or_else(|| "trajectory diverged".into()),
            }
        }
        EquilibriumStatus::NotFound => {
            return if cert.reason == Some(NotFoundReason::NoEquilibriumEvidence) {
                Conclusion {
                    conclusion: "NO-EQUILIBRIUM EVIDENCE",
                    stage: Some("equilibrium"),
                    reason: cert.detail.clone().unwrap_or_default(),
                }
            } else {
                inconclusive("equilibrium", cert.detail.clone().unwrap_or_else(|| "solver failure".into()))
            };
        }
        _ => {}
    }
    match analysis {
        None => return inconclusive("jacobian", "equilibrium certificate carries no state".into()),
        Some(an) => {
            if let Err((stage, reason)) = point_verdict(an) {
                return inconclusive(stage, reason);
            }
        }
    }
    match scan {
        Err(e) => inconclusive("condition scan", e.clone()),
        Ok(s) if s.failures > 0 => inconclusive(
            "condition scan",
            format!("{} of {} samples violate the policy conditions", s.failures, s.samples),
        ),
        Ok(_) => Conclusion {
            conclusion: "STABLE",
            stage: None,
            reason: format!(
                "equilibrium found (residual {:e}) with every Jacobian eigenvalue in the open left half-plane; policy conditions hold at every sample",
                cert.residual
            ),
        },
    }
}

#[derive(Serialize)]
struct SweepReport {
    header: Header<Tolerances>,
    commodity: String,
    bracket: (f64, f64),
    threshold: f64,
    lo: f64,
    hi: f64,
    iterations: usize,
    points: Vec<SweepPoint>,
}

pub fn sweep(a: &CommonArgs) -> Result<i32, CliError> {
    let ctx = Context::new(a)?;
    let scfg = &ctx.cfg().sweep;
    let net = ctx.network()?;
    let model = ctx.model(net.clone(), ctx.cfg().analyze.sampling_cap)?;
    let commodity = match a.commodity.as_ref().or(scfg.commodity.as_ref()) {
        Some(id) => net
            .commodity_index(id)
            .ok_or_else(|| CliError::Config(format!("unknown commodity `{id}`")))?,
        None if net.commodity_count() == 1 => 0,
        None => return Err(CliError::Config("several commodities: choose one with --commodity".into())),
    };
    let bracket = a
        .bracket
        .or(scfg.bracket)
        .ok_or_else(|| CliError::Config("missing sweep bracket (--bracket LO:HI)".into()))?;
    let opts = SweepOptions {
        iterations: scfg.iterations,
        ..SweepOptions::default()
    };
    let res = existence_sweep(&net, model.policy(), commodity, bracket, &opts).map_err(run_err)?;
    let mut tol = Tolerances::new();
    solver_tolerances(&mut tol, &opts.solver);
    tol.insert("sweep_iterations", opts.iterations as f64);
    smoothing_tolerances(&mut tol, model.policy().smoothing());
    let mut csv = Vec::new();
    res.write_csv(&mut csv).map_err(run_err)?;
    write_atomic(&a.out, "sweep.csv", &csv)?;
    let report = SweepReport {
        header: ctx.header("sweep", tol, Some(&net), Some(&model)),
        commodity: res.commodity.clone(),
        bracket,
        threshold: res.threshold,
        lo: res.lo,
        hi: res.hi,
        iterations: res.iterations,
        points: res.points,
    };
    write_json(&a.out, "sweep.json", &report)?;
    println!("commodity {}: threshold {:.6} (bracket [{}, {}])", report.commodity, report.threshold, report.lo, report.hi);
    Ok(0)
}

#[derive(Serialize)]
struct ValidationRow {
    commodity: usize,
    closed_form: f64,
    sweep_threshold: f64,
    abs_diff: f64,
    agrees: bool,
}

#[derive(Serialize)]
struct CaseStudyEntry {
    name: String,
    overloaded: usize,
    two_commodity_range: Option<Interval>,
    ranges: CommodityRanges,
    validation: Vec<ValidationRow>,
}

#[derive(Serialize)]
struct CaseStudyReport {
    header: Header<Tolerances>,
    open_end_note: String,
    blocks: Vec<CaseStudyEntry>,
}

pub fn casestudy(a: &CommonArgs) -> Result<i32, CliError> {
    let ctx = Context::new(a)?;
    let blocks = &ctx.cfg().casestudy;
    if blocks.is_empty() {
        return Err(CliError::Config("no [[casestudy]] blocks".into()));
    }
    let smoothing = ctx.cfg().policy.smoothing()?;
    let pol = Policy::shared_buffer_backpressure(smoothing).map_err(|e| CliError::Config(e.to_string()))?;
    let opts = SweepOptions::default();
    let mut entries = Vec::new();
    let mut table = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Run(format!("csv output failed: {e}"));
    table
        .write_record([
            "block", "commodity", "rank", "lower", "upper", "closed", "sweep_upper", "inconclusive", "lambda_within",
            "sweep_threshold", "abs_diff",
        ])
        .map_err(csv_err)?;
    for b in blocks {
        let cfg = b.to_config()?;
        let overloaded = match b.overloaded {
            Some(l) if l >= 1 && l <= cfg.commodities() => l - 1,
            Some(l) => return Err(CliError::Config(format!("block `{}`: overloaded index {l} out of range", b.label()))),
            None => match cfg.overloaded().as_slice() {
                [l] => *l,
                other => {
                    return Err(CliError::Config(format!(
                        "block `{}`: expected exactly one overloaded commodity, found {}",
                        b.label(),
                        other.len()
                    )))
                }
            },
        };
        let hyp = |e: Error| CliError::Config(format!("block `{}`: {e}", b.label()));
        let ranges = admissible_ranges_c_commodity(&cfg, overloaded).map_err(hyp)?;
        let two = if cfg.commodities() == 2 && overloaded == 0 {
            Some(admissible_range_two_commodity(&cfg).map_err(hyp)?)
        } else {
            None
        };
        let mut validation = Vec::new();
        if b.validate {
            let net = cfg.to_network().map_err(hyp)?;
            for e in &ranges.entries {
                let hi = 1.5 * e.interval.upper;
                let res = existence_sweep(&net, &pol, e.commodity, (0.0, hi), &opts).map_err(run_err)?;
                let diff = (res.threshold - e.interval.upper).abs();
                validation.push(ValidationRow {
                    commodity: e.commodity + 1,
                    closed_form: e.interval.upper,
                    sweep_threshold: res.threshold,
                    abs_diff: diff,
                    agrees: diff < CASESTUDY_AGREEMENT,
                });
            }
        }
        for e in &ranges.entries {
            let v = validation.iter().find(|v| v.commodity == e.commodity + 1);
            table
                .write_record([
                    b.label(),
                    (e.commodity + 1).to_string(),
                    (e.rank + 1).to_string(),
                    e.interval.lower.to_string(),
                    e.interval.upper.to_string(),
                    e.interval.closed.to_string(),
                    e.interval.sweep_upper().to_string(),
                    e.inconclusive.to_string(),
                    e.lambda_within.to_string(),
                    v.map_or(String::new(), |v| v.sweep_threshold.to_string()),
                    v.map_or(String::new(), |v| v.abs_diff.to_string()),
                ])
                .map_err(csv_err)?;
            println!(
                "{} commodity {}: [{}, {}{}",
                b.label(),
                e.commodity + 1,
                e.interval.lower,
                e.interval.upper,
                if e.interval.closed { "]" } else { ")" }
            );
        }
        entries.push(CaseStudyEntry {
            name: b.label(),
            overloaded: overloaded + 1,
            two_commodity_range: two,
            ranges,
            validation,
        });
    }
    let mut tol = Tolerances::new();
    tol.insert("tie_tol", casestudy::TIE_TOL);
    tol.insert("open_end_eta", casestudy::OPEN_END_ETA);
    tol.insert("agreement", CASESTUDY_AGREEMENT);
    tol.insert("sweep_iterations", opts.iterations as f64);
    solver_tolerances(&mut tol, &opts.solver);
    smoothing_tolerances(&mut tol, smoothing);
    let report = CaseStudyReport {
        header: ctx.header("casestudy", tol, None, None),
        open_end_note: format!(
            "half-open intervals [0, μ) are probed up to μ − {}",
            casestudy::OPEN_END_ETA
        ),
        blocks: entries,
    };
    let bytes = table.into_inner().map_err(|e| CliError::Run(e.to_string()))?;
    write_atomic(&a.out, "casestudy.csv", &bytes)?;
    write_json(&a.out, "casestudy.json", &report)?;
    Ok(0)
}
