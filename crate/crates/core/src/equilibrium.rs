//! Equilibrium search, sampled Poincaré–Miranda box certificates and arrival-rate sweeps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::{integrate, IntegrateOptions, Model, TrajectoryStatus};
use crate::error::{Error, Result};
use crate::linalg::lu_solve;
use crate::network::NetworkInstance;
use crate::policy::{Policy, Smoothing};
use crate::scalar::{sigmoid, Scalar};
use crate::stability::{jacobian, latin_hypercube, JacobianMethod};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverOptions<T> {
    /// Residual target `‖f‖∞`.
    pub tol: T,
    pub max_iter: usize,
    pub max_halvings: usize,
    /// Horizon of the integration fallback.
    pub fallback_t_end: T,
    pub fallback_step: T,
    /// The fallback stops once the drift norm drops below this value.
    pub fallback_steady_tol: T,
    /// Largest constraint violation that may be projected away.
    pub projection_tol: T,
    /// Extra full Newton steps after convergence.
    pub polish_steps: usize,
    pub integration_fallback: bool,
}

impl<T: Scalar> Default for SolverOptions<T> {
    fn default() -> Self {
        Self {
            tol: T::of(1e-10),
            max_iter: 100,
            max_halvings: 30,
            fallback_t_end: T::of(1000.0),
            fallback_step: T::of(0.01),
            fallback_steady_tol: T::of(1e-7),
            projection_tol: T::of(1e-8),
            polish_steps: 2,
            integration_fallback: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EquilibriumStatus {
    Found,
    BoxCertified,
    NotFound,
    Diverged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum NotFoundReason {
    /// The dynamics kept drifting: evidence that no equilibrium exists.
    NoEquilibriumEvidence,
    /// The dynamics settled but Newton could not reach the tolerance.
    SolverFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquilibriumCertificate<T> {
    pub status: EquilibriumStatus,
    pub q: Option<Vec<T>>,
    /// Residual at `q`, or at the last iterate when nothing was found.
    pub residual: T,
    pub newton_iterations: usize,
    pub used_integration: bool,
    pub reason: Option<NotFoundReason>,
    pub detail: Option<String>,
    /// Coordinates held fixed during the search.
    pub pinned: Vec<usize>,
    pub box_certificate: Option<BoxCertificate<T>>,
}

impl<T: Scalar> EquilibriumCertificate<T> {
    pub fn found(&self) -> bool {
        matches!(self.status, EquilibriumStatus::Found | EquilibriumStatus::BoxCertified) && self.q.is_some()
    }
}

struct NewtonOutcome<T> {
    q: Vec<T>,
    residual: T,
    iterations: usize,
    converged: bool,
}

/// Free coordinates resting at an empty queue while the drift pushes them below zero.
/// The clamped dynamics hold these in place, so they count as satisfied constraints.
pub fn active_lower<T: Scalar>(model: &Model<T>, q: &[T], f: &[T]) -> Vec<bool> {
    let bounds = &model.region().bounds;
    (0..model.dim())
        .map(|k| model.pins()[k].is_none() && q[k] <= bounds[k].lower && f[k] < T::zero())
        .collect()
}

/// `max |f_k|` over free coordinates that are not held at an empty queue.
pub fn projected_residual<T: Scalar>(model: &Model<T>, q: &[T]) -> T {
    let f = model.drift_unchecked(q, None);
    projected_norm(model, q, &f)
}

fn projected_norm<T: Scalar>(model: &Model<T>, q: &[T], f: &[T]) -> T {
    let active = active_lower(model, q, f);
    (0..f.len())
        .filter(|&k| !active[k])
        .fold(T::zero(), |m, k| m.max(f[k].abs()))
}

fn newton<T: Scalar>(model: &Model<T>, q0: &[T], opts: &SolverOptions<T>) -> NewtonOutcome<T> {
    let free = model.free_coords();
    let mut q = q0.to_vec();
    model.apply_pins(&mut q);
    model.region().clamp(&mut q);
    model.apply_pins(&mut q);
    let mut f = model.drift_unchecked(&q, None);
    let mut r = projected_norm(model, &q, &f);
    let mut it = 0;
    let mut converged = r < opts.tol;
    while !converged && it < opts.max_iter {
        it += 1;
        let Some((dx, moving)) = newton_direction(model, &free, &q, &f) else { break };
        let mut step = T::one();
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let mut trial = q.clone();
            for (d, &k) in dx.iter().zip(&moving) {
                trial[k] = q[k] + step * *d;
            }
            model.region().clamp(&mut trial);
            model.apply_pins(&mut trial);
            let ft = model.drift_unchecked(&trial, None);
            let rt = projected_norm(model, &trial, &ft);
            if rt < r {
                accepted = Some((trial, ft, rt));
                break;
            }
            step = step * T::half();
        }
        let Some((qn, fnew, rn)) = accepted else { break };
        q = qn;
        f = fnew;
        r = rn;
        converged = r < opts.tol;
    }
    if converged {
        for _ in 0..opts.polish_steps {
            let Some((dx, moving)) = newton_direction(model, &free, &q, &f) else { break };
            let mut trial = q.clone();
            for (d, &k) in dx.iter().zip(&moving) {
                trial[k] = q[k] + *d;
            }
            model.region().clamp(&mut trial);
            model.apply_pins(&mut trial);
            let ft = model.drift_unchecked(&trial, None);
            let rt = projected_norm(model, &trial, &ft);
            if rt <= r {
                q = trial;
                f = ft;
                r = rt;
            } else {
                break;
            }
        }
    }
    NewtonOutcome {
        q,
        residual: r,
        iterations: it,
        converged,
    }
}

/// Newton step on the free coordinates that are not held at an empty queue.
fn newton_direction<T: Scalar>(model: &Model<T>, free: &[usize], q: &[T], f: &[T]) -> Option<(Vec<T>, Vec<usize>)> {
    let j = jacobian(model, q, JacobianMethod::Analytic).ok()?;
    let active = active_lower(model, q, f);
    let keep: Vec<usize> = (0..free.len()).filter(|&p| !active[free[p]]).collect();
    let moving: Vec<usize> = keep.iter().map(|&p| free[p]).collect();
    if moving.is_empty() {
        return None;
    }
    let m = if keep.len() == free.len() { j.matrix } else { j.matrix.select(&keep) };
    let rhs: Vec<T> = moving.iter().map(|&k| -f[k]).collect();
    let dx = lu_solve(&m, &rhs)?;
    dx.iter().all(|x| x.is_finite()).then_some((dx, moving))
}

fn pinned_of<T: Scalar>(model: &Model<T>) -> Vec<usize> {
    (0..model.dim()).filter(|&k| model.pins()[k].is_some()).collect()
}

fn found<T: Scalar>(model: &Model<T>, out: NewtonOutcome<T>, used_integration: bool, opts: &SolverOptions<T>) -> EquilibriumCertificate<T> {
    let violation = model.region().violation(&out.q);
    let mut q = out.q;
    if violation > opts.projection_tol {
        return EquilibriumCertificate {
            status: EquilibriumStatus::NotFound,
            q: None,
            residual: out.residual,
            newton_iterations: out.iterations,
            used_integration,
            reason: Some(NotFoundReason::SolverFailure),
            detail: Some(format!("root violates the feasible region by {violation}")),
            pinned: pinned_of(model),
            box_certificate: None,
        };
    }
    model.region().clamp(&mut q);
    model.apply_pins(&mut q);
    let residual = projected_residual(model, &q);
    EquilibriumCertificate {
        status: EquilibriumStatus::Found,
        q: Some(q),
        residual,
        newton_iterations: out.iterations,
        used_integration,
        reason: None,
        detail: None,
        pinned: pinned_of(model),
        box_certificate: None,
    }
}

/// Damped Newton from `q0`, falling back to long-horizon integration when Newton stalls.
pub fn find_equilibrium<T: Scalar>(model: &Model<T>, q0: &[T], opts: &SolverOptions<T>) -> Result<EquilibriumCertificate<T>> {
    model.check_state(q0)?;
    let first = newton(model, q0, opts);
    if first.converged {
        return Ok(found(model, first, false, opts));
    }
    if !opts.integration_fallback {
        return Ok(EquilibriumCertificate {
            status: EquilibriumStatus::NotFound,
            q: None,
            residual: first.residual,
            newton_iterations: first.iterations,
            used_integration: false,
            reason: Some(NotFoundReason::SolverFailure),
            detail: Some("Newton stalled".into()),
            pinned: pinned_of(model),
            box_certificate: None,
        });
    }
    let mut start = q0.to_vec();
    model.apply_pins(&mut start);
    let iopts = IntegrateOptions {
        step: opts.fallback_step,
        steady_tol: Some(opts.fallback_steady_tol),
        time_varying: false,
        max_samples: 2,
        ..IntegrateOptions::default()
    };
    let traj = integrate(model, &start, opts.fallback_t_end, &iopts)?;
    let end = traj.final_state().to_vec();
    if traj.status == TrajectoryStatus::Diverged {
        return Ok(EquilibriumCertificate {
            status: EquilibriumStatus::Diverged,
            q: None,
            residual: projected_residual(model, &end),
            newton_iterations: first.iterations,
            used_integration: true,
            reason: Some(NotFoundReason::NoEquilibriumEvidence),
            detail: Some(format!("trajectory diverged at t = {}", traj.t_end())),
            pinned: pinned_of(model),
            box_certificate: None,
        });
    }
    let second = newton(model, &end, opts);
    let iterations = first.iterations + second.iterations;
    if second.converged {
        let mut cert = found(model, second, true, opts);
        cert.newton_iterations = iterations;
        return Ok(cert);
    }
    let end_residual = projected_residual(model, &end);
    let settled = traj.status == TrajectoryStatus::Steady;
    Ok(EquilibriumCertificate {
        status: EquilibriumStatus::NotFound,
        q: None,
        residual: second.residual.min(end_residual),
        newton_iterations: iterations,
        used_integration: true,
        reason: Some(if settled {
            NotFoundReason::SolverFailure
        } else {
            NotFoundReason::NoEquilibriumEvidence
        }),
        detail: Some(if settled {
            "dynamics settled but Newton did not reach the tolerance".into()
        } else {
            format!("trajectory still drifting at t = {} (residual {end_residual})", traj.t_end())
        }),
        pinned: pinned_of(model),
        box_certificate: None,
    })
}

/// Random feasible starting points: the empty state followed by `count − 1` uniform draws.
pub fn random_starts<T: Scalar>(model: &Model<T>, count: usize, seed: u64) -> Vec<Vec<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut starts = Vec::with_capacity(count);
    if count > 0 {
        let mut z = vec![T::zero(); model.dim()];
        model.apply_pins(&mut z);
        starts.push(z);
    }
    while starts.len() < count {
        let mut q = model.region().sample(&mut rng);
        model.apply_pins(&mut q);
        starts.push(q);
    }
    starts
}

/// Newton from several starts (integration fallback only if every start fails).
pub fn find_equilibrium_multistart<T: Scalar>(
    model: &Model<T>,
    starts: usize,
    seed: u64,
    opts: &SolverOptions<T>,
) -> Result<EquilibriumCertificate<T>> {
    let points = random_starts(model, starts.max(1), seed);
    let newton_only = SolverOptions {
        integration_fallback: false,
        ..*opts
    };
    for p in &points {
        let c = find_equilibrium(model, p, &newton_only)?;
        if c.found() {
            return Ok(c);
        }
    }
    find_equilibrium(model, &points[0], opts)
}

/// Per-coordinate interval box.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoxRegion<T> {
    pub lower: Vec<T>,
    pub upper: Vec<T>,
}

impl<T: Scalar> BoxRegion<T> {
    pub fn new(lower: Vec<T>, upper: Vec<T>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::Dimension {
                expected: lower.len(),
                got: upper.len(),
            });
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l <= u)) {
            return Err(Error::InvalidParameter("box lower bound exceeds upper bound".into()));
        }
        Ok(Self { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn center(&self) -> Vec<T> {
        self.lower.iter().zip(&self.upper).map(|(&l, &u)| T::half() * (l + u)).collect()
    }

    pub fn contains(&self, q: &[T], tol: T) -> bool {
        q.len() == self.dim()
            && q
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(&x, (&l, &u))| x >= l - tol && x <= u + tol)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum FaceSampling {
    Grid { points_per_coordinate: usize },
    LatinHypercube { per_face: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FaceSamplingOptions {
    pub points_per_coordinate: usize,
    /// Total sample budget; above it the grid is replaced by a Latin hypercube.
    pub max_total: usize,
    pub seed: u64,
    pub tol: f64,
}

impl Default for FaceSamplingOptions {
    fn default() -> Self {
        Self {
            points_per_coordinate: 7,
            max_total: 100_000,
            seed: 0,
            tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Face {
    Lower,
    Upper,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FaceWitness<T> {
    pub coord: usize,
    pub face: Face,
    pub q: Vec<T>,
    pub f: T,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoxCertificate<T> {
    pub certified: bool,
    pub region: BoxRegion<T>,
    pub sampling: FaceSampling,
    pub total_samples: usize,
    /// Largest `f_i` seen on an upper face (must be `≤ tol`).
    pub worst_upper: T,
    /// Smallest `f_i + allowance_i` seen on a lower face (must be `≥ −tol`).
    pub worst_lower: T,
    /// Allowance added on lower faces per coordinate.
    pub lower_allowance: Vec<T>,
    pub witness: Option<FaceWitness<T>>,
    pub label: String,
}

/// Checks `f_i ≤ tol` on every face `q_i = upper_i` and `f_i + allowance_i ≥ −tol` on
/// every face `q_i = lower_i`, sampling the remaining coordinates.
///
/// `component(q, i)` returns `f_i(q)`. Coordinates listed in `fixed` are held at their
/// lower bound and get no faces.
pub fn verify_poincare_miranda<T: Scalar, F>(
    component: F,
    region: &BoxRegion<T>,
    lower_allowance: &[T],
    fixed: &[usize],
    opts: &FaceSamplingOptions,
) -> BoxCertificate<T>
where
    F: Fn(&[T], usize) -> T + Sync,
{
    let d = region.dim();
    let free: Vec<usize> = (0..d).filter(|k| !fixed.contains(k)).collect();
    let faces = 2 * free.len();
    let others = free.len().saturating_sub(1);
    let p = opts.points_per_coordinate.max(1);
    let grid_per_face = p.checked_pow(others as u32);
    let sampling = match grid_per_face {
        Some(g) if g.saturating_mul(faces) <= opts.max_total => FaceSampling::Grid {
            points_per_coordinate: p,
        },
        _ => FaceSampling::LatinHypercube {
            per_face: (opts.max_total / faces.max(1)).max(p * others.max(1)),
            seed: opts.seed,
        },
    };
    let unit_points: Vec<Vec<f64>> = match sampling {
        FaceSampling::Grid { points_per_coordinate } => {
            let total = grid_per_face.unwrap_or(1);
            (0..total)
                .map(|mut idx| {
                    (0..others)
                        .map(|_| {
                            let i = idx % points_per_coordinate;
                            idx /= points_per_coordinate;
                            if points_per_coordinate == 1 {
                                0.5
                            } else {
                                i as f64 / (points_per_coordinate - 1) as f64
                            }
                        })
                        .collect()
                })
                .collect()
        }
        FaceSampling::LatinHypercube { per_face, seed } => latin_hypercube(others, per_face, seed),
    };
    let tol = T::of(opts.tol);
    let mut base = region.lower.clone();
    for &k in fixed {
        base[k] = region.lower[k];
    }
    let jobs: Vec<(usize, Face)> = free.iter().flat_map(|&i| [(i, Face::Lower), (i, Face::Upper)]).collect();
    let results: Vec<(T, Option<FaceWitness<T>>)> = jobs
        .par_iter()
        .map(|&(i, face)| {
            let rest: Vec<usize> = free.iter().copied().filter(|&k| k != i).collect();
            let mut q = base.clone();
            q[i] = match face {
                Face::Lower => region.lower[i],
                Face::Upper => region.upper[i],
            };
            let mut worst = match face {
                Face::Lower => T::infinity(),
                Face::Upper => T::neg_infinity(),
            };
            let mut witness = None;
            for u in &unit_points {
                for (&k, &x) in rest.iter().zip(u) {
                    q[k] = region.lower[k] + (region.upper[k] - region.lower[k]) * T::of(x);
                }
                let f = component(&q, i);
                match face {
                    Face::Upper => {
                        if !(f <= worst) {
                            worst = f;
                        }
                        if !(f <= tol) && witness.is_none() {
                            witness = Some(FaceWitness { coord: i, face, q: q.clone(), f });
                        }
                    }
                    Face::Lower => {
                        let g = f + lower_allowance.get(i).copied().unwrap_or(T::zero());
                        if !(g >= worst) {
                            worst = g;
                        }
                        if !(g >= -tol) && witness.is_none() {
                            witness = Some(FaceWitness { coord: i, face, q: q.clone(), f });
                        }
                    }
                }
            }
            (worst, witness)
        })
        .collect();
    let mut worst_upper = T::neg_infinity();
    let mut worst_lower = T::infinity();
    let mut witness = None;
    for ((_, face), (w, wit)) in jobs.iter().zip(results) {
        match face {
            Face::Upper => worst_upper = worst_upper.max(w),
            Face::Lower => worst_lower = worst_lower.min(w),
        }
        if witness.is_none() {
            witness = wit;
        }
    }
    BoxCertificate {
        certified: witness.is_none(),
        region: region.clone(),
        sampling,
        total_samples: unit_points.len() * faces,
        worst_upper,
        worst_lower,
        lower_allowance: lower_allowance.to_vec(),
        witness,
        label: "sampled evidence".into(),
    }
}

/// Smoothing leakage `σ(−aε)·(Σ_out c + μ)` that an empty queue still emits.
pub fn leakage_allowance<T: Scalar>(model: &Model<T>) -> Vec<T> {
    let layout = model.layout();
    let s: Smoothing<T> = model.policy().smoothing();
    let mut out = vec![T::zero(); model.dim()];
    for l in &layout.links {
        out[l.from] = out[l.from] + sigmoid(-s.a * s.epsilon) * l.capacity;
    }
    for e in &layout.egress {
        let se = model.policy().egress_smoothing(e.node);
        out[e.coord] = out[e.coord] + sigmoid(-se.a * se.epsilon) * e.capacity;
    }
    out
}

/// Face test of a box against the model drift (pinned coordinates stay fixed).
pub fn verify_box<T: Scalar>(model: &Model<T>, region: &BoxRegion<T>, opts: &FaceSamplingOptions) -> BoxCertificate<T> {
    let fixed: Vec<usize> = (0..model.dim()).filter(|&k| model.pins()[k].is_some()).collect();
    let allowance = leakage_allowance(model);
    verify_poincare_miranda(|q, i| model.drift_component(q, i), region, &allowance, &fixed, opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoxOptions<T> {
    /// Increment between successive topological levels.
    pub delta_step: T,
    /// Buffer margin `δ_i`; `None` selects `max(0.01·b_i, ε + 10/a)`.
    pub delta: Option<T>,
}

impl<T: Scalar> Default for BoxOptions<T> {
    fn default() -> Self {
        Self {
            delta_step: T::one(),
            delta: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeSlack {
    pub node: String,
    pub commodity: String,
    pub upper: f64,
    /// `b_i − δ_i` for finite buffers.
    pub limit: Option<f64>,
    /// `Σ_out c + μ − λ − Σ_in c`.
    pub capacity_slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BackpressureBox<T> {
    pub region: BoxRegion<T>,
    pub slack: Vec<NodeSlack>,
}

/// Box `[0, b̄]` with `b̄` strictly decreasing along every link and a margin below
/// every finite buffer, assigned level by level from the sinks upwards.
pub fn construct_backpressure_box<T: Scalar>(model: &Model<T>, opts: &BoxOptions<T>) -> Result<BackpressureBox<T>> {
    let net = model.net();
    let layout = model.layout();
    let n = model.dim();
    let mut inflow = vec![T::zero(); n];
    let mut outflow = vec![T::zero(); n];
    for k in 0..n {
        inflow[k] = model.arrival(k, None);
    }
    for l in &layout.links {
        inflow[l.to] = inflow[l.to] + l.capacity;
        outflow[l.from] = outflow[l.from] + l.capacity;
    }
    for e in &layout.egress {
        outflow[e.coord] = outflow[e.coord] + e.capacity;
    }
    let node_id = |k: usize| net.nodes()[layout.coords[k].node].id.clone();
    let com_id = |k: usize| net.commodities()[layout.coords[k].commodity].id.clone();
    for k in 0..n {
        if model.pins()[k].is_none() && inflow[k] > outflow[k] {
            return Err(Error::CapacityInfeasible {
                node: node_id(k),
                commodity: com_id(k),
                inflow: inflow[k].as_f64(),
                outflow: outflow[k].as_f64(),
            });
        }
    }
    let order = net
        .topological_order()
        .ok_or_else(|| Error::InvalidNetwork("graph has a cycle".into()))?;
    let s = model.policy().smoothing();
    let mut upper = vec![T::zero(); n];
    let mut limits = vec![None; n];
    for &node in order.iter().rev() {
        for c in 0..net.commodity_count() {
            let Some(k) = layout.index_of(node, c) else { continue };
            let succ_max = layout
                .links
                .iter()
                .filter(|l| l.from == k)
                .map(|l| upper[l.to])
                .fold(T::zero(), T::max);
            let b = succ_max + opts.delta_step;
            if let Some(cap) = layout.upper(k) {
                let delta = opts
                    .delta
                    .unwrap_or_else(|| (T::of(0.01) * cap).max(s.epsilon + T::of(10.0) / s.a));
                let limit = cap - delta;
                limits[k] = Some(limit);
                if b > limit {
                    return Err(Error::BoxInfeasible {
                        node: node_id(k),
                        required: b.as_f64(),
                        limit: limit.as_f64(),
                    });
                }
            }
            upper[k] = b;
        }
    }
    let mut lower = vec![T::zero(); n];
    for (k, p) in model.pins().iter().enumerate() {
        if let Some(v) = p {
            lower[k] = *v;
            upper[k] = *v;
        }
    }
    let slack = (0..n)
        .map(|k| NodeSlack {
            node: node_id(k),
            commodity: com_id(k),
            upper: upper[k].as_f64(),
            limit: limits[k].map(|x: T| x.as_f64()),
            capacity_slack: (outflow[k] - inflow[k]).as_f64(),
        })
        .collect();
    Ok(BackpressureBox {
        region: BoxRegion::new(lower, upper)?,
        slack,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProductBox<T> {
    pub construction: BackpressureBox<T>,
    pub certificate: BoxCertificate<T>,
}

/// Per-commodity box construction against the buffer allocations, certified on the
/// product box. Shared buffers are rejected.
pub fn per_commodity_box<T: Scalar>(
    model: &Model<T>,
    opts: &BoxOptions<T>,
    faces: &FaceSamplingOptions,
) -> Result<ProductBox<T>> {
    if let Some(c) = model.net().commodities().iter().find(|c| c.buffer_mode.is_shared()) {
        return Err(Error::NotApplicable(format!(
            "commodity `{}` uses a shared buffer, so the feasible region is not a box; \
             use the case-study closed forms for one-hop shared-buffer systems",
            c.id
        )));
    }
    let construction = construct_backpressure_box(model, opts)?;
    let certificate = verify_box(model, &construction.region, faces);
    Ok(ProductBox {
        construction,
        certificate,
    })
}

/// Saturation level used for pinned overloaded sources.
pub fn saturation_level<T: Scalar>(model: &Model<T>) -> T {
    let max_upper = (0..model.dim())
        .filter_map(|k| model.layout().upper(k))
        .fold(T::zero(), T::max);
    T::two() * max_upper + T::of(10.0)
}

/// Commodities whose stationary arrivals exceed their total egress capacity.
pub fn overloaded_commodities<T: Scalar>(net: &NetworkInstance<T>) -> Vec<usize> {
    (0..net.commodity_count())
        .filter(|&c| net.total_arrival(c) > net.total_egress_capacity(c))
        .collect()
}

/// Pins the unbounded source coordinates of every overloaded commodity other than
/// `except` at the saturation level. Returns the pinned coordinates.
pub fn pin_overloaded<T: Scalar>(model: &mut Model<T>, except: Option<usize>) -> Vec<usize> {
    let level = saturation_level(model);
    let targets = overloaded_commodities(model.net());
    let mut pinned = Vec::new();
    for k in 0..model.dim() {
        let c = model.layout().coords[k];
        if Some(c.commodity) == except || !targets.contains(&c.commodity) {
            continue;
        }
        if model.layout().upper(k).is_none() && model.arrival(k, None) > T::zero() {
            model.pin(k, level);
            pinned.push(k);
        }
    }
    pinned
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub lambda: f64,
    pub status: EquilibriumStatus,
    pub residual: f64,
    pub stable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub commodity: String,
    pub threshold: f64,
    /// Final bracket: stable at `lo`, unstable at `hi`.
    pub lo: f64,
    pub hi: f64,
    pub iterations: usize,
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    /// One row per probe: `lambda,status,residual,stable,threshold`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let io = |e: csv::Error| Error::InvalidParameter(format!("csv output failed: {e}"));
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["lambda", "status", "residual", "stable", "threshold"]).map_err(io)?;
        for p in &self.points {
            let status = p.status.as_str();
            w.write_record([
                format!("{}", p.lambda),
                status.to_string(),
                format!("{:e}", p.residual),
                p.stable.to_string(),
                format!("{}", self.threshold),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::InvalidParameter(format!("csv output failed: {e}")))?;
        Ok(())
    }
}

impl EquilibriumStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Found => "FOUND",
            Self::BoxCertified => "BOX_CERTIFIED",
            Self::NotFound => "NOT_FOUND",
            Self::Diverged => "DIVERGED",
        }
    }
}

impl std::fmt::Display for EquilibriumStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepOptions<T> {
    pub iterations: usize,
    pub solver: SolverOptions<T>,
    /// Pin overloaded sources of the other commodities.
    pub pin_overloaded: bool,
}

impl<T: Scalar> Default for SweepOptions<T> {
    fn default() -> Self {
        Self {
            iterations: 12,
            solver: SolverOptions::default(),
            pin_overloaded: true,
        }
    }
}

/// Equilibrium search at one arrival total of `commodity`, from the empty state.
pub fn probe_arrival<T: Scalar>(
    net: &NetworkInstance<T>,
    pol: &Policy<T>,
    commodity: usize,
    lambda: T,
    opts: &SweepOptions<T>,
) -> Result<EquilibriumCertificate<T>> {
    let mut net = net.clone();
    net.set_total_arrival(commodity, lambda)?;
    let mut model = Model::new(net, pol.clone())?;
    if opts.pin_overloaded {
        pin_overloaded(&mut model, Some(commodity));
    }
    let mut q0 = vec![T::zero(); model.dim()];
    model.apply_pins(&mut q0);
    find_equilibrium(&model, &q0, &opts.solver)
}

/// Bisection on the arrival total of `commodity` for the existence threshold.
pub fn existence_sweep<T: Scalar>(
    net: &NetworkInstance<T>,
    pol: &Policy<T>,
    commodity: usize,
    interval: (T, T),
    opts: &SweepOptions<T>,
) -> Result<SweepResult> {
    let (mut lo, mut hi) = interval;
    if !(lo < hi) || lo < T::zero() {
        return Err(Error::InvalidParameter(format!("invalid sweep interval [{lo}, {hi}]")));
    }
    let com_id = net
        .commodities()
        .get(commodity)
        .ok_or_else(|| Error::UnknownCommodity(commodity.to_string()))?
        .id
        .clone();
    let mut points = Vec::new();
    let mut probe = |lambda: T| -> Result<bool> {
        let cert = probe_arrival(net, pol, commodity, lambda, opts)?;
        let stable = cert.found();
        points.push(SweepPoint {
            lambda: lambda.as_f64(),
            status: cert.status,
            residual: cert.residual.as_f64(),
            stable,
        });
        Ok(stable)
    };
    let lo_stable = probe(lo)?;
    let hi_stable = probe(hi)?;
    if !lo_stable || hi_stable {
        return Err(Error::NoBracket(format!(
            "equilibrium {} at λ = {lo} and {} at λ = {hi}",
            if lo_stable { "found" } else { "not found" },
            if hi_stable { "found" } else { "not found" },
        )));
    }
    for _ in 0..opts.iterations {
        let mid = T::half() * (lo + hi);
        if probe(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(SweepResult {
        commodity: com_id,
        threshold: (T::half() * (lo + hi)).as_f64(),
        lo: lo.as_f64(),
        hi: hi.as_f64(),
        iterations: opts.iterations,
        points,
    })
}
