//! Jacobian assembly and the matrix-analytic stability checks.

use std::ops::Range;

use num_complex::Complex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::Model;
use crate::error::{Error, Result};
use crate::linalg::{eigenvalues, lu_solve, symmetric_eigenvalues, EigenError, Matrix};
use crate::network::FeasibleRegion;
use crate::policy::{check_pointwise_condition_in, evaluate_egress, evaluate_links, ConditionVerdict, Verdict, FD_STEP};
use crate::scalar::Scalar;

/// Absolute tolerance for strict inequalities in matrix checks.
pub const STABILITY_TOL: f64 = 1e-9;
pub const PERRON_MAX_ITER: usize = 100_000;
pub const PERRON_TOL: f64 = 1e-12;
pub const PERRON_RESIDUAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum JacobianMethod {
    Analytic,
    FiniteDifference,
}

/// Partials of one commodity link expressed in Jacobian (free-coordinate) indices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinkEntry<T> {
    pub from: usize,
    pub to: usize,
    pub dgi: T,
    pub dgj: T,
}

/// Drift Jacobian over the free coordinates of a model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JacobianMatrix<T: Scalar> {
    pub matrix: Matrix<T>,
    /// Row/column range of each commodity block.
    pub blocks: Vec<Range<usize>>,
    /// Model coordinate of each Jacobian index.
    pub coords: Vec<usize>,
    pub q: Vec<T>,
    pub method: JacobianMethod,
    /// `∂g_iT/∂q_i` per Jacobian index (zero at non-egress coordinates).
    pub egress_partials: Vec<T>,
    /// Links whose endpoints are both free (empty for finite-difference Jacobians).
    pub links: Vec<LinkEntry<T>>,
}

impl<T: Scalar> JacobianMatrix<T> {
    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    /// `J₀ = J + diag(∂g_iT/∂q_i)`: the Jacobian with the egress terms removed.
    pub fn without_egress(&self) -> Matrix<T> {
        let mut m = self.matrix.clone();
        for (i, &d) in self.egress_partials.iter().enumerate() {
            m[(i, i)] = m[(i, i)] + d;
        }
        m
    }
}

fn blocks_for<T: Scalar>(model: &Model<T>, free: &[usize]) -> Vec<Range<usize>> {
    model
        .layout()
        .blocks
        .iter()
        .map(|b| {
            let start = free.partition_point(|&k| k < b.start);
            let end = free.partition_point(|&k| k < b.end);
            start..end
        })
        .collect()
}

/// Drift Jacobian at `q` over the model's free coordinates.
pub fn jacobian<T: Scalar>(model: &Model<T>, q: &[T], method: JacobianMethod) -> Result<JacobianMatrix<T>> {
    if q.len() != model.dim() {
        return Err(Error::Dimension {
            expected: model.dim(),
            got: q.len(),
        });
    }
    let free = model.free_coords();
    let mut pos = vec![usize::MAX; model.dim()];
    for (i, &k) in free.iter().enumerate() {
        pos[k] = i;
    }
    let n = free.len();
    let layout = model.layout();
    let mut egress_partials = vec![T::zero(); n];
    for (port, p) in layout.egress.iter().zip(evaluate_egress(model.policy(), layout, q)) {
        if pos[port.coord] != usize::MAX {
            egress_partials[pos[port.coord]] = p.dgi;
        }
    }
    let (matrix, links) = match method {
        JacobianMethod::Analytic => {
            let mut full = Matrix::zeros(model.dim(), model.dim());
            let mut links = Vec::new();
            for (l, p) in layout.links.iter().zip(evaluate_links(model.policy(), layout, q)) {
                let (i, j) = (l.from, l.to);
                full[(i, i)] = full[(i, i)] - p.dgi;
                full[(j, i)] = full[(j, i)] + p.dgi;
                full[(i, j)] = full[(i, j)] - p.dgj;
                full[(j, j)] = full[(j, j)] + p.dgj;
                for &k in &layout.gate_of(j).members {
                    if k != j {
                        full[(i, k)] = full[(i, k)] - p.d_occupancy;
                        full[(j, k)] = full[(j, k)] + p.d_occupancy;
                    }
                }
                if pos[i] != usize::MAX && pos[j] != usize::MAX {
                    links.push(LinkEntry {
                        from: pos[i],
                        to: pos[j],
                        dgi: p.dgi,
                        dgj: p.dgj,
                    });
                }
            }
            for (port, p) in layout.egress.iter().zip(evaluate_egress(model.policy(), layout, q)) {
                let k = port.coord;
                full[(k, k)] = full[(k, k)] - p.dgi;
            }
            for (k, pin) in model.pins().iter().enumerate() {
                if pin.is_some() {
                    for c in 0..model.dim() {
                        full[(k, c)] = T::zero();
                    }
                }
            }
            (full.select(&free), links)
        }
        JacobianMethod::FiniteDifference => {
            let h = T::of(FD_STEP);
            let mut m = Matrix::zeros(n, n);
            let mut qp = q.to_vec();
            for (col, &k) in free.iter().enumerate() {
                qp[k] = q[k] + h;
                let fp = model.drift_unchecked(&qp, None);
                qp[k] = q[k] - h;
                let fm = model.drift_unchecked(&qp, None);
                qp[k] = q[k];
                for (row, &r) in free.iter().enumerate() {
                    m[(row, col)] = (fp[r] - fm[r]) / (h + h);
                }
            }
            (m, Vec::new())
        }
    };
    Ok(JacobianMatrix {
        matrix,
        blocks: blocks_for(model, &free),
        coords: free,
        q: q.to_vec(),
        method,
        egress_partials,
        links,
    })
}

/// Entrywise relative error `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, floor: T) -> T {
    let mut worst = T::zero();
    for r in 0..a.rows() {
        for c in 0..a.cols() {
            let (x, y) = (a[(r, c)], b[(r, c)]);
            let scale = x.abs().max(y.abs()).max(floor);
            worst = worst.max((x - y).abs() / scale);
        }
    }
    worst
}

/// All eigenvalues, sorted by real part descending.
pub fn eigen_spectrum<T: Scalar>(j: &Matrix<T>) -> std::result::Result<Vec<Complex<T>>, EigenError<T>> {
    eigenvalues(j)
}

pub fn max_real_part<T: Scalar>(ev: &[Complex<T>]) -> T {
    ev.iter().map(|z| z.re).fold(T::neg_infinity(), T::max)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ColumnDominance {
    pub verdict: Verdict,
    /// `|J_ii| − Σ_{u≠i} |J_ui|` per column.
    pub margins: Vec<f64>,
    pub min_margin: f64,
    pub diagonal_negative: bool,
    pub tol: f64,
}

/// Column diagonal dominance with negative diagonal.
pub fn check_column_dominance<T: Scalar>(j: &Matrix<T>) -> ColumnDominance {
    let n = j.rows();
    let tol = STABILITY_TOL;
    let mut margins = Vec::with_capacity(n);
    let mut diag_neg = true;
    for c in 0..n {
        let off: T = (0..n).filter(|&r| r != c).map(|r| j[(r, c)].abs()).sum();
        margins.push((j[(c, c)].abs() - off).as_f64());
        diag_neg &= j[(c, c)] < T::zero();
    }
    let min_margin = margins.iter().copied().fold(f64::INFINITY, f64::min);
    let pass = diag_neg && margins.iter().all(|&m| m >= -tol);
    ColumnDominance {
        verdict: if pass { Verdict::Pass } else { Verdict::Fail },
        margins,
        min_margin,
        diagonal_negative: diag_neg,
        tol,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockMargin {
    pub block: usize,
    /// `√λ_min(J_ℓℓ J_ℓℓᵀ)`.
    pub sigma_min: f64,
    /// `Σ_{p≠ℓ} √λ_max(J_pℓᵀ J_pℓ)`.
    pub coupling: f64,
    pub margin: f64,
    pub nonsingular: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockDominance {
    pub verdict: Verdict,
    pub blocks: Vec<BlockMargin>,
    pub note: Option<String>,
    pub tol: f64,
}

fn gram_extreme<T: Scalar>(m: &Matrix<T>, smallest: bool) -> T {
    let ev = symmetric_eigenvalues(m);
    let x = if smallest { ev.first() } else { ev.last() };
    x.copied().unwrap_or(T::zero()).max(T::zero()).sqrt()
}

/// Block strict diagonal dominance over a partition of rows and columns.
pub fn check_block_dominance<T: Scalar>(j: &Matrix<T>, partition: &[Range<usize>]) -> Result<BlockDominance> {
    let n = j.rows();
    let mut covered = vec![false; n];
    for b in partition {
        for i in b.clone() {
            if i >= n || covered[i] {
                return Err(Error::InvalidParameter("partition does not tile the matrix".into()));
            }
            covered[i] = true;
        }
    }
    if covered.iter().any(|c| !c) {
        return Err(Error::InvalidParameter("partition does not cover the matrix".into()));
    }
    let tol = STABILITY_TOL;
    let mut blocks = Vec::new();
    let mut verdict = Verdict::Pass;
    let mut singular = false;
    for (l, bl) in partition.iter().enumerate() {
        if bl.is_empty() {
            continue;
        }
        let d = j.block(bl.clone(), bl.clone());
        let sigma_min = gram_extreme(&d.matmul(&d.transpose()), true);
        let mut coupling = T::zero();
        for (p, bp) in partition.iter().enumerate() {
            if p == l || bp.is_empty() {
                continue;
            }
            let off = j.block(bp.clone(), bl.clone());
            if off.max_abs() == T::zero() {
                continue;
            }
            coupling = coupling + gram_extreme(&off.transpose().matmul(&off), false);
        }
        let margin = sigma_min - coupling;
        let nonsingular = sigma_min.as_f64() >= tol;
        if !nonsingular {
            singular = true;
            verdict = Verdict::Fail;
        } else if margin.as_f64().abs() < tol {
            if verdict == Verdict::Pass {
                verdict = Verdict::Inconclusive;
            }
        } else if margin.as_f64() < 0.0 {
            verdict = Verdict::Fail;
        }
        blocks.push(BlockMargin {
            block: l,
            sigma_min: sigma_min.as_f64(),
            coupling: coupling.as_f64(),
            margin: margin.as_f64(),
            nonsingular,
        });
    }
    Ok(BlockDominance {
        verdict,
        blocks,
        note: singular.then(|| "nonsingularity violated".to_string()),
        tol,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MMatrixVerdict {
    pub verdict: Verdict,
    pub max_offdiag: f64,
    pub min_real_eigenvalue: f64,
    pub tol: f64,
}

/// M-matrix test: nonpositive off-diagonals and eigenvalues with nonnegative real part.
pub fn check_m_matrix<T: Scalar>(m: &Matrix<T>) -> Result<MMatrixVerdict> {
    let n = m.rows();
    let tol = STABILITY_TOL;
    let mut max_off = f64::NEG_INFINITY;
    for r in 0..n {
        for c in 0..n {
            if r != c {
                max_off = max_off.max(m[(r, c)].as_f64());
            }
        }
    }
    let ev = eigenvalues(m).map_err(|e| Error::Eigen(e.to_string()))?;
    let min_re = ev.iter().map(|z| z.re.as_f64()).fold(f64::INFINITY, f64::min);
    let pass = (n < 2 || max_off <= tol) && (n == 0 || min_re >= -tol);
    Ok(MMatrixVerdict {
        verdict: if pass { Verdict::Pass } else { Verdict::Fail },
        max_offdiag: if n < 2 { 0.0 } else { max_off },
        min_real_eigenvalue: if n == 0 { 0.0 } else { min_re },
        tol,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PerronMethod {
    PowerIteration,
    /// Grassmann–Taksar–Heyman state reduction, used when power iteration stalls.
    StateReduction,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerronVector<T> {
    /// Positive null vector of `J₀`, `‖δ‖₁ = 1`.
    pub delta: Vec<T>,
    pub residual: T,
    pub theta: T,
    pub iterations: usize,
    pub method: PerronMethod,
    /// Connected components of `J₀`, each carrying mass proportional to its size.
    pub components: usize,
}

fn components<T: Scalar>(m: &Matrix<T>) -> Vec<Vec<usize>> {
    let n = m.rows();
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    for s in 0..n {
        if seen[s] {
            continue;
        }
        let mut comp = vec![s];
        seen[s] = true;
        let mut head = 0;
        while head < comp.len() {
            let u = comp[head];
            head += 1;
            for v in 0..n {
                if !seen[v] && (m[(u, v)] != T::zero() || m[(v, u)] != T::zero()) {
                    seen[v] = true;
                    comp.push(v);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

fn power_iteration<T: Scalar>(m: &Matrix<T>, theta: T) -> Option<(Vec<T>, usize)> {
    let n = m.rows();
    let mut v = vec![T::one() / T::of_usize(n); n];
    let tol = T::of(PERRON_TOL);
    for it in 1..=PERRON_MAX_ITER {
        let mut w = m.mul_vec(&v);
        for (wi, vi) in w.iter_mut().zip(&v) {
            *wi = *wi + theta * *vi;
        }
        let norm: T = w.iter().map(|x| x.abs()).sum();
        if !(norm > T::zero()) || !norm.is_finite() {
            return None;
        }
        let mut diff = T::zero();
        for (wi, vi) in w.iter_mut().zip(&v) {
            *wi = *wi / norm;
            diff = diff.max((*wi - *vi).abs());
        }
        v = w;
        if diff < tol {
            return Some((v, it));
        }
    }
    None
}

/// Stationary vector of `J₀` seen as the transpose of a generator (columns sum to zero).
fn state_reduction<T: Scalar>(m: &Matrix<T>) -> Option<Vec<T>> {
    let n = m.rows();
    // a[i][j]: rate from state i to state j of the chain with generator J₀ᵀ
    let mut a = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                a[(i, j)] = m[(j, i)].max(T::zero());
            }
        }
    }
    for k in (1..n).rev() {
        let s: T = (0..k).map(|j| a[(k, j)]).sum();
        if !(s > T::zero()) {
            return None;
        }
        for i in 0..k {
            a[(i, k)] = a[(i, k)] / s;
        }
        for i in 0..k {
            let aik = a[(i, k)];
            if aik == T::zero() {
                continue;
            }
            for j in 0..k {
                a[(i, j)] = a[(i, j)] + aik * a[(k, j)];
            }
        }
    }
    let mut pi = vec![T::zero(); n];
    pi[0] = T::one();
    for k in 1..n {
        pi[k] = (0..k).map(|i| pi[i] * a[(i, k)]).sum();
    }
    let total: T = pi.iter().copied().sum();
    Some(pi.into_iter().map(|x| x / total).collect())
}

/// Positive vector `δ` with `J₀δ = 0` from the Perron eigenvector of `J₀ + θI`.
pub fn perron_null_vector<T: Scalar>(j0: &Matrix<T>) -> Result<PerronVector<T>> {
    let n = j0.rows();
    if n == 0 || !j0.is_square() {
        return Err(Error::PerronAssumptions("empty or non-square matrix".into()));
    }
    if !j0.is_finite() {
        return Err(Error::PerronAssumptions("non-finite entries".into()));
    }
    let scale = j0.max_abs().max(T::min_positive_value());
    for r in 0..n {
        for c in 0..n {
            if r != c && j0[(r, c)] < -T::of(1e-12) * scale {
                return Err(Error::PerronAssumptions(format!(
                    "negative off-diagonal entry J0[{r},{c}] = {}",
                    j0[(r, c)]
                )));
            }
        }
    }
    let max_diag = (0..n).map(|i| j0[(i, i)].abs()).fold(T::zero(), T::max);
    let comps = components(j0);
    let mut delta = vec![T::zero(); n];
    let mut method = PerronMethod::PowerIteration;
    let mut iterations = 0;
    let mut theta_used = T::two() * max_diag + T::one();
    for comp in &comps {
        let sub = j0.select(comp);
        let weight = T::of_usize(comp.len()) / T::of_usize(n);
        if comp.len() == 1 {
            delta[comp[0]] = weight;
            continue;
        }
        let mut theta = T::two() * max_diag + T::one();
        let mut found = None;
        for _ in 0..4 {
            match power_iteration(&sub, theta) {
                Some((v, it)) if v.iter().all(|&x| x > T::zero()) => {
                    iterations += it;
                    found = Some(v);
                    break;
                }
                Some((_, it)) => {
                    iterations += it;
                    theta = theta + theta;
                }
                None => {
                    iterations += PERRON_MAX_ITER;
                    break;
                }
            }
        }
        theta_used = theta_used.max(theta);
        let v = match found {
            Some(v) => v,
            None => {
                method = PerronMethod::StateReduction;
                state_reduction(&sub).ok_or_else(|| {
                    Error::PerronAssumptions("J0 + θI is reducible (no positive Perron vector)".into())
                })?
            }
        };
        for (&k, &x) in comp.iter().zip(&v) {
            delta[k] = x * weight;
        }
    }
    let total: T = delta.iter().copied().sum();
    for x in &mut delta {
        *x = *x / total;
    }
    if delta.iter().any(|&x| !(x > T::zero())) {
        return Err(Error::PerronAssumptions("Perron vector has nonpositive entries".into()));
    }
    let residual = j0.mul_vec(&delta).into_iter().fold(T::zero(), |m, x| m.max(x.abs()));
    if !(residual < T::of(PERRON_RESIDUAL_TOL)) {
        return Err(Error::PerronAssumptions(format!(
            "residual ‖J0 δ‖∞ = {residual} exceeds {PERRON_RESIDUAL_TOL}"
        )));
    }
    Ok(PerronVector {
        delta,
        residual,
        theta: theta_used,
        iterations,
        method,
        components: comps.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LyapunovCertificate<T: Scalar> {
    pub delta: Vec<T>,
    /// Diagonal of `A = diag(1/δ)`.
    pub a: Vec<T>,
    pub q: Matrix<T>,
    pub lambda_max: T,
    /// `α_ij = −δ_i ∂g_ij/∂q_i + δ_j ∂g_ij/∂q_j` per link.
    pub alphas: Vec<T>,
    pub alphas_negative: bool,
    pub verdict: Verdict,
    pub tol: f64,
}

/// Diagonal Lyapunov certificate `Q = AJ + JᵀA` with `A = diag(1/δ)`.
pub fn lyapunov_certificate<T: Scalar>(j: &JacobianMatrix<T>, delta: &[T]) -> Result<LyapunovCertificate<T>> {
    let n = j.dim();
    if delta.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: delta.len(),
        });
    }
    if delta.iter().any(|&d| !(d > T::zero())) {
        return Err(Error::InvalidParameter("δ must be entrywise positive".into()));
    }
    let a: Vec<T> = delta.iter().map(|&d| T::one() / d).collect();
    let mut q = Matrix::zeros(n, n);
    for r in 0..n {
        for c in 0..n {
            q[(r, c)] = a[r] * j.matrix[(r, c)] + j.matrix[(c, r)] * a[c];
        }
    }
    let ev = symmetric_eigenvalues(&q);
    let lambda_max = ev.last().copied().unwrap_or(T::zero());
    let alphas: Vec<T> = j
        .links
        .iter()
        .map(|l| -delta[l.from] * l.dgi + delta[l.to] * l.dgj)
        .collect();
    let alphas_negative = alphas.iter().all(|&x| x < T::zero());
    let pass = lambda_max.as_f64() < -STABILITY_TOL;
    Ok(LyapunovCertificate {
        delta: delta.to_vec(),
        a,
        q,
        lambda_max,
        alphas,
        alphas_negative,
        verdict: if pass { Verdict::Pass } else { Verdict::Fail },
        tol: STABILITY_TOL,
    })
}

/// Every matrix check at one state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointAnalysis {
    pub eigenvalues: Vec<(f64, f64)>,
    pub eigen_error: Option<String>,
    pub max_real_part: f64,
    pub column_dominance: ColumnDominance,
    pub block_dominance: Option<BlockDominance>,
    /// M-matrix verdict of `−J_ℓℓ` per commodity block.
    pub m_matrix: Vec<MMatrixVerdict>,
    pub perron: std::result::Result<PerronSummary, String>,
    pub lyapunov: std::result::Result<LyapunovSummary, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerronSummary {
    pub delta: Vec<f64>,
    pub residual: f64,
    pub theta: f64,
    pub iterations: usize,
    pub method: PerronMethod,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LyapunovSummary {
    pub lambda_max: f64,
    pub alphas_negative: bool,
    pub verdict: Verdict,
}

/// Runs the spectral, dominance, M-matrix, Perron and Lyapunov checks at `q`.
pub fn analyze_point<T: Scalar>(model: &Model<T>, q: &[T]) -> Result<PointAnalysis> {
    let j = jacobian(model, q, JacobianMethod::Analytic)?;
    let (ev, eigen_error) = match eigen_spectrum(&j.matrix) {
        Ok(ev) => (ev, None),
        Err(e) => (e.partial.clone(), Some(e.to_string())),
    };
    let column_dominance = check_column_dominance(&j.matrix);
    let nonempty: Vec<Range<usize>> = j.blocks.iter().filter(|b| !b.is_empty()).cloned().collect();
    let block_dominance = if nonempty.len() > 1 {
        Some(check_block_dominance(&j.matrix, &nonempty)?)
    } else {
        None
    };
    let mut m_matrix = Vec::new();
    for b in &nonempty {
        m_matrix.push(check_m_matrix(&j.matrix.block(b.clone(), b.clone()).scale(-T::one()))?);
    }
    let perron = perron_null_vector(&j.without_egress());
    let lyapunov = match &perron {
        Ok(p) => lyapunov_certificate(&j, &p.delta)
            .map(|c| LyapunovSummary {
                lambda_max: c.lambda_max.as_f64(),
                alphas_negative: c.alphas_negative,
                verdict: c.verdict,
            })
            .map_err(|e| e.to_string()),
        Err(e) => Err(format!("not applicable: {e}")),
    };
    Ok(PointAnalysis {
        max_real_part: max_real_part(&ev).as_f64(),
        eigenvalues: ev.iter().map(|z| (z.re.as_f64(), z.im.as_f64())).collect(),
        eigen_error,
        column_dominance,
        block_dominance,
        m_matrix,
        perron: perron
            .map(|p| PerronSummary {
                delta: p.delta.iter().map(|x| x.as_f64()).collect(),
                residual: p.residual.as_f64(),
                theta: p.theta.as_f64(),
                iterations: p.iterations,
                method: p.method,
            })
            .map_err(|e| e.to_string()),
        lyapunov,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Sampler {
    /// Cell-centred grid with this many points per axis.
    Grid { per_axis: usize },
    /// Latin hypercube with `count` points.
    LatinHypercube { count: usize, seed: u64 },
}

/// Interior sample points of a region (shared groups scaled strictly inside their simplex).
pub fn sample_points<T: Scalar>(region: &FeasibleRegion<T>, sampler: Sampler) -> Vec<Vec<T>> {
    let d = region.dim();
    let raw: Vec<Vec<f64>> = match sampler {
        Sampler::Grid { per_axis } => {
            let p = per_axis.max(1);
            let total = p.checked_pow(d as u32).unwrap_or(usize::MAX).min(10_000_000);
            (0..total)
                .map(|mut idx| {
                    (0..d)
                        .map(|_| {
                            let i = idx % p;
                            idx /= p;
                            (i as f64 + 0.5) / p as f64
                        })
                        .collect()
                })
                .collect()
        }
        Sampler::LatinHypercube { count, seed } => latin_hypercube(d, count, seed),
    };
    raw.into_iter()
        .map(|u| {
            let mut q: Vec<T> = u
                .iter()
                .zip(&region.bounds)
                .map(|(&x, b)| b.lower + (b.upper - b.lower) * T::of(x))
                .collect();
            for s in &region.shared {
                let tot: T = s.coords.iter().map(|&k| q[k]).sum();
                let limit = s.capacity * T::of(1.0 - 1e-6);
                if tot > limit && tot > T::zero() {
                    let f = limit / tot;
                    for &k in &s.coords {
                        q[k] = q[k] * f;
                    }
                }
            }
            q
        })
        .collect()
}

/// Unit-cube Latin hypercube: each axis split into `count` strata, one point per stratum.
pub fn latin_hypercube(dim: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    use rand::seq::SliceRandom;
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = vec![vec![0.0; dim]; count];
    for axis in 0..dim {
        let mut perm: Vec<usize> = (0..count).collect();
        perm.shuffle(&mut rng);
        for (i, p) in pts.iter_mut().enumerate() {
            let u: f64 = rng.gen_range(f64::EPSILON..1.0);
            p[axis] = (perm[i] as f64 + u) / count as f64;
        }
    }
    pts
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FailingState {
    pub q: Vec<f64>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GlobalConditionReport {
    pub samples: usize,
    pub passes: usize,
    pub failures: usize,
    pub pass_fraction: f64,
    pub worst_min_dgi: f64,
    pub worst_min_neg_dgj: f64,
    pub worst_max_egress: f64,
    pub block_failures: usize,
    pub block_inconclusive: usize,
    pub m_matrix_failures: usize,
    /// Up to ten failing states.
    pub failing_states: Vec<FailingState>,
    /// Unbounded coordinates were sampled only up to the cap.
    pub truncated: bool,
    pub caveat: Option<String>,
}

struct SampleOutcome {
    verdict: ConditionVerdict,
    block: Option<Verdict>,
    m_ok: bool,
}

/// Pointwise condition check (and, with several commodities, block and M-matrix
/// checks) at every sample of the feasible region.
pub fn grid_condition_scan<T: Scalar>(model: &Model<T>, sampler: Sampler) -> Result<GlobalConditionReport> {
    let points = sample_points(model.region(), sampler);
    let multi = model.net().commodity_count() > 1;
    let outcomes: Vec<Result<SampleOutcome>> = points
        .par_iter()
        .map(|q| {
            let verdict = check_pointwise_condition_in(model.policy(), model.net(), model.layout(), q)?;
            let (block, m_ok) = if multi {
                let j = jacobian(model, q, JacobianMethod::Analytic)?;
                let parts: Vec<Range<usize>> = j.blocks.iter().filter(|b| !b.is_empty()).cloned().collect();
                let block = check_block_dominance(&j.matrix, &parts)?.verdict;
                let mut ok = true;
                for b in &parts {
                    ok &= check_m_matrix(&j.matrix.block(b.clone(), b.clone()).scale(-T::one()))?.verdict == Verdict::Pass;
                }
                (Some(block), ok)
            } else {
                (None, true)
            };
            Ok(SampleOutcome { verdict, block, m_ok })
        })
        .collect();
    let mut report = GlobalConditionReport {
        samples: points.len(),
        passes: 0,
        failures: 0,
        pass_fraction: 0.0,
        worst_min_dgi: f64::INFINITY,
        worst_min_neg_dgj: f64::INFINITY,
        worst_max_egress: f64::INFINITY,
        block_failures: 0,
        block_inconclusive: 0,
        m_matrix_failures: 0,
        failing_states: Vec::new(),
        truncated: model.region().is_truncated(),
        caveat: None,
    };
    for (q, out) in points.iter().zip(outcomes) {
        let out = out?;
        let v = &out.verdict;
        report.worst_min_dgi = report.worst_min_dgi.min(v.min_dgi);
        report.worst_min_neg_dgj = report.worst_min_neg_dgj.min(v.min_neg_dgj);
        report.worst_max_egress = report.worst_max_egress.min(v.max_egress);
        match out.block {
            Some(Verdict::Fail) => report.block_failures += 1,
            Some(Verdict::Inconclusive) => report.block_inconclusive += 1,
            _ => {}
        }
        if !out.m_ok {
            report.m_matrix_failures += 1;
        }
        let ok = v.pass() && out.block != Some(Verdict::Fail) && out.m_ok;
        if ok {
            report.passes += 1;
        } else {
            report.failures += 1;
            if report.failing_states.len() < 10 {
                let reason = if !v.pass() {
                    "pointwise sign condition"
                } else if !out.m_ok {
                    "M-matrix condition"
                } else {
                    "block diagonal dominance"
                };
                report.failing_states.push(FailingState {
                    q: q.iter().map(|x| x.as_f64()).collect(),
                    reason: reason.into(),
                });
            }
        }
    }
    report.pass_fraction = if report.samples == 0 {
        0.0
    } else {
        report.passes as f64 / report.samples as f64
    };
    if report.truncated {
        report.caveat = Some(format!(
            "unbounded coordinates sampled only up to the cap {}; the scan is evidence for the truncated region, not the whole state space",
            model.region().sampling_cap
        ));
    }
    Ok(report)
}

/// Solves `J x = b` on the Jacobian; `None` when numerically singular.
pub fn solve<T: Scalar>(j: &JacobianMatrix<T>, b: &[T]) -> Option<Vec<T>> {
    lu_solve(&j.matrix, b)
}
