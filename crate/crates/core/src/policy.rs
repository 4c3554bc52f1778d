//! Local transmission policies `g_ij(q_i, q_j)` with analytic partials and pointwise
//! sign-condition checks.
//!
//! Partials are reported both as plain values and as natural-log magnitudes. At
//! saturated states the plain values underflow (`σ'(50·100)` is far below the smallest
//! `f64`), while the log magnitudes stay finite and still witness the strict sign.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::network::{Buffer, NetworkInstance, StateLayout};
use crate::scalar::{ln_abs, ln_add_exp, ln_sigmoid, ln_sigmoid_prime, sigmoid, sigmoid_prime, Scalar};

/// Default sigmoid sharpness.
pub const DEFAULT_A: f64 = 50.0;
/// Strict-inequality tolerance for pointwise checks.
pub const POLICY_TOL: f64 = 1e-12;
/// Central finite-difference step.
pub const FD_STEP: f64 = 1e-6;

/// Sigmoid sharpness `a` and offset `ε`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Smoothing<T> {
    pub a: T,
    pub epsilon: T,
}

impl<T: Scalar> Smoothing<T> {
    pub fn new(a: T, epsilon: T) -> Result<Self> {
        if !(a > T::zero()) || !a.is_finite() {
            return Err(Error::InvalidParameter(format!("smoothing a must be positive, got {a}")));
        }
        if !(epsilon > T::zero()) || !epsilon.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "smoothing epsilon must be positive, got {epsilon}"
            )));
        }
        Ok(Self { a, epsilon })
    }

    /// `ε = 1/√a`.
    pub fn with_a(a: T) -> Result<Self> {
        if !(a > T::zero()) {
            return Err(Error::InvalidParameter(format!("smoothing a must be positive, got {a}")));
        }
        Self::new(a, T::one() / a.sqrt())
    }

    /// Upper bound `σ(−aε)` on the relative rate leaked by an empty queue.
    pub fn leakage(&self) -> T {
        sigmoid(-self.a * self.epsilon)
    }
}

impl<T: Scalar> Default for Smoothing<T> {
    fn default() -> Self {
        Self::with_a(T::of(DEFAULT_A)).expect("default smoothing is valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PolicyFamily {
    SmoothBackpressure,
    BufferOccupancy,
    SharedBufferBackpressure,
    /// Rate fixed at a fraction of capacity; violates the sign conditions everywhere.
    ConstantRate,
    Custom,
}

impl fmt::Display for PolicyFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PolicyFamily::SmoothBackpressure => "smooth_backpressure",
            PolicyFamily::BufferOccupancy => "buffer_occupancy",
            PolicyFamily::SharedBufferBackpressure => "shared_buffer_backpressure",
            PolicyFamily::ConstantRate => "constant_rate",
            PolicyFamily::Custom => "custom",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PartialsMethod {
    Analytic,
    FiniteDifference,
}

/// Link data handed to custom rate functions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkContext<T> {
    pub capacity: T,
    /// Capacity of the downstream buffer gate, `None` when unbounded.
    pub downstream_buffer: Option<T>,
    pub smoothing: Smoothing<T>,
}

/// User-supplied link rate. `occupancy` is the downstream gate occupancy (equal to
/// `q_j` unless several commodities share the downstream buffer).
pub trait LinkRate<T: Scalar>: Send + Sync + fmt::Debug {
    fn rate(&self, ctx: &LinkContext<T>, qi: T, occupancy: T) -> T;

    /// Analytic `(∂g/∂q_i, ∂g/∂occupancy)`, or `None` to request central differences.
    fn partials(&self, _ctx: &LinkContext<T>, _qi: T, _occupancy: T) -> Option<(T, T)> {
        None
    }
}

/// Value and first partials of one rate function at one state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RatePartials<T> {
    pub value: T,
    /// `∂g/∂q_i`.
    pub dgi: T,
    /// `∂g/∂q_j` (includes the occupancy term when `q_j` belongs to the gate).
    pub dgj: T,
    /// `∂g/∂q_k` for another coordinate `k` sharing the downstream buffer.
    pub d_occupancy: T,
    /// `ln(∂g/∂q_i)`; `-inf` when the partial is not positive.
    pub ln_dgi: T,
    /// `ln(−∂g/∂q_j)`; `-inf` when the partial is not negative.
    pub ln_neg_dgj: T,
    pub method: PartialsMethod,
}

impl<T: Scalar> RatePartials<T> {
    fn from_values(value: T, dgi: T, d_own: T, d_occ: T, method: PartialsMethod) -> Self {
        let dgj = d_own + d_occ;
        Self {
            value,
            dgi,
            dgj,
            d_occupancy: d_occ,
            ln_dgi: if dgi > T::zero() { dgi.ln() } else { T::neg_infinity() },
            ln_neg_dgj: if dgj < T::zero() { (-dgj).ln() } else { T::neg_infinity() },
            method,
        }
    }

    fn zero(value: T) -> Self {
        Self::from_values(value, T::zero(), T::zero(), T::zero(), PartialsMethod::Analytic)
    }
}

/// A network-wide policy: one family applied to every link, plus egress smoothing.
#[derive(Clone)]
pub struct Policy<T: Scalar> {
    family: PolicyFamily,
    smoothing: Smoothing<T>,
    egress_overrides: BTreeMap<usize, Smoothing<T>>,
    constant_fraction: T,
    custom: Option<Arc<dyn LinkRate<T>>>,
}

impl<T: Scalar> fmt::Debug for Policy<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Policy")
            .field("family", &self.family)
            .field("smoothing", &self.smoothing)
            .field("egress_overrides", &self.egress_overrides)
            .finish()
    }
}

impl<T: Scalar> Policy<T> {
    pub fn new(family: PolicyFamily, smoothing: Smoothing<T>) -> Result<Self> {
        if family == PolicyFamily::Custom {
            return Err(Error::InvalidParameter(
                "custom policies are built with Policy::custom".into(),
            ));
        }
        Smoothing::new(smoothing.a, smoothing.epsilon)?;
        Ok(Self {
            family,
            smoothing,
            egress_overrides: BTreeMap::new(),
            constant_fraction: T::half(),
            custom: None,
        })
    }

    pub fn smooth_backpressure(smoothing: Smoothing<T>) -> Result<Self> {
        Self::new(PolicyFamily::SmoothBackpressure, smoothing)
    }

    pub fn buffer_occupancy(smoothing: Smoothing<T>) -> Result<Self> {
        Self::new(PolicyFamily::BufferOccupancy, smoothing)
    }

    pub fn shared_buffer_backpressure(smoothing: Smoothing<T>) -> Result<Self> {
        Self::new(PolicyFamily::SharedBufferBackpressure, smoothing)
    }

    /// `g ≡ fraction · c` on links and `fraction · μ` on egress.
    pub fn constant_rate(fraction: T) -> Result<Self> {
        if !(fraction >= T::zero() && fraction <= T::one()) {
            return Err(Error::InvalidParameter(format!(
                "constant-rate fraction must lie in [0, 1], got {fraction}"
            )));
        }
        let mut p = Self::new(PolicyFamily::ConstantRate, Smoothing::default())?;
        p.constant_fraction = fraction;
        Ok(p)
    }

    /// Custom link rate; egress uses the smoothed sigmoid with `smoothing`.
    pub fn custom(rate: Arc<dyn LinkRate<T>>, smoothing: Smoothing<T>) -> Result<Self> {
        Smoothing::new(smoothing.a, smoothing.epsilon)?;
        Ok(Self {
            family: PolicyFamily::Custom,
            smoothing,
            egress_overrides: BTreeMap::new(),
            constant_fraction: T::half(),
            custom: Some(rate),
        })
    }

    pub fn with_egress_override(mut self, node: usize, smoothing: Smoothing<T>) -> Result<Self> {
        Smoothing::new(smoothing.a, smoothing.epsilon)?;
        self.egress_overrides.insert(node, smoothing);
        Ok(self)
    }

    pub fn family(&self) -> PolicyFamily {
        self.family
    }

    pub fn smoothing(&self) -> Smoothing<T> {
        self.smoothing
    }

    pub fn egress_smoothing(&self, node: usize) -> Smoothing<T> {
        self.egress_overrides.get(&node).copied().unwrap_or(self.smoothing)
    }

    pub fn egress_overrides(&self) -> &BTreeMap<usize, Smoothing<T>> {
        &self.egress_overrides
    }

    /// Which partials this policy uses.
    pub fn partials_method(&self) -> PartialsMethod {
        match (&self.custom, self.family) {
            (Some(c), PolicyFamily::Custom) => {
                let ctx = LinkContext {
                    capacity: T::one(),
                    downstream_buffer: Some(T::one()),
                    smoothing: self.smoothing,
                };
                if c.partials(&ctx, T::half(), T::half()).is_some() {
                    PartialsMethod::Analytic
                } else {
                    PartialsMethod::FiniteDifference
                }
            }
            _ => PartialsMethod::Analytic,
        }
    }

    /// Rejects policy/network combinations outside the family's domain.
    pub fn check_applicable(&self, net: &NetworkInstance<T>) -> Result<()> {
        match self.family {
            PolicyFamily::BufferOccupancy => {
                for l in net.links() {
                    if net.nodes()[l.to].buffer.is_unbounded() {
                        return Err(Error::PolicyNotApplicable {
                            family: self.family.to_string(),
                            reason: format!(
                                "link {}→{} enters an unbounded buffer; the rate needs a finite b_j",
                                net.nodes()[l.from].id,
                                net.nodes()[l.to].id
                            ),
                        });
                    }
                }
            }
            PolicyFamily::SharedBufferBackpressure => {
                if let Some(c) = net.commodities().iter().find(|c| !c.buffer_mode.is_shared()) {
                    return Err(Error::PolicyNotApplicable {
                        family: self.family.to_string(),
                        reason: format!("commodity `{}` uses per-commodity buffers", c.id),
                    });
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Link rate and partials. `occupancy` is the downstream gate occupancy
    /// (`q_j` itself for an exclusive gate) and `gate` its capacity.
    pub fn link(&self, capacity: T, gate: Option<T>, qi: T, qj: T, occupancy: T) -> RatePartials<T> {
        let s = self.smoothing;
        match self.family {
            PolicyFamily::SmoothBackpressure | PolicyFamily::SharedBufferBackpressure => {
                backpressure(s, capacity, gate, qi, qj, occupancy)
            }
            PolicyFamily::BufferOccupancy => occupancy_rate(s, capacity, gate, qi, occupancy),
            PolicyFamily::ConstantRate => RatePartials::zero(self.constant_fraction * capacity),
            PolicyFamily::Custom => {
                let rate = self.custom.as_ref().expect("custom policy carries a rate");
                let ctx = LinkContext {
                    capacity,
                    downstream_buffer: gate,
                    smoothing: s,
                };
                let value = rate.rate(&ctx, qi, occupancy);
                match rate.partials(&ctx, qi, occupancy) {
                    Some((dgi, docc)) => {
                        RatePartials::from_values(value, dgi, T::zero(), docc, PartialsMethod::Analytic)
                    }
                    None => {
                        let h = T::of(FD_STEP);
                        let two_h = h + h;
                        let dgi = (rate.rate(&ctx, qi + h, occupancy) - rate.rate(&ctx, qi - h, occupancy)) / two_h;
                        let docc = (rate.rate(&ctx, qi, occupancy + h) - rate.rate(&ctx, qi, occupancy - h)) / two_h;
                        RatePartials::from_values(value, dgi, T::zero(), docc, PartialsMethod::FiniteDifference)
                    }
                }
            }
        }
    }

    /// Egress rate `g_iT` and its derivative in `dgi`.
    /// Rate only, skipping the partial derivatives.
    pub fn link_rate(&self, capacity: T, gate: Option<T>, qi: T, qj: T, occupancy: T) -> T {
        let s = self.smoothing;
        match self.family {
            PolicyFamily::SmoothBackpressure | PolicyFamily::SharedBufferBackpressure => {
                let open = sigmoid(s.a * (qi - qj - s.epsilon)) * capacity;
                gate.map_or(open, |b| open * sigmoid(s.a * (b - s.epsilon - occupancy)))
            }
            PolicyFamily::BufferOccupancy => {
                let sx = sigmoid(s.a * (qi - s.epsilon)) * capacity;
                gate.map_or(sx, |b| sx * (T::one() - occupancy / b))
            }
            PolicyFamily::ConstantRate => self.constant_fraction * capacity,
            PolicyFamily::Custom => self.link(capacity, gate, qi, qj, occupancy).value,
        }
    }

    pub fn egress_rate(&self, node: usize, mu: T, qi: T) -> T {
        if self.family == PolicyFamily::ConstantRate {
            return self.constant_fraction * mu;
        }
        let s = self.egress_smoothing(node);
        sigmoid(s.a * (qi - s.epsilon)) * mu
    }

    pub fn egress(&self, node: usize, mu: T, qi: T) -> RatePartials<T> {
        if self.family == PolicyFamily::ConstantRate {
            return RatePartials::zero(self.constant_fraction * mu);
        }
        let s = self.egress_smoothing(node);
        let x = s.a * (qi - s.epsilon);
        let value = sigmoid(x) * mu;
        let dgi = s.a * sigmoid_prime(x) * mu;
        RatePartials {
            value,
            dgi,
            dgj: T::zero(),
            d_occupancy: T::zero(),
            ln_dgi: s.a.ln() + ln_sigmoid_prime(x) + ln_abs(mu),
            ln_neg_dgj: T::neg_infinity(),
            method: PartialsMethod::Analytic,
        }
    }
}

fn backpressure<T: Scalar>(
    s: Smoothing<T>,
    c: T,
    gate: Option<T>,
    qi: T,
    qj: T,
    occupancy: T,
) -> RatePartials<T> {
    let x1 = s.a * (qi - qj - s.epsilon);
    let ln_a = s.a.ln();
    let ln_c = ln_abs(c);
    let (s1, ds1) = (sigmoid(x1), sigmoid_prime(x1));
    let (ln_s1, ln_ds1) = (ln_sigmoid(x1), ln_sigmoid_prime(x1));
    match gate {
        None => {
            let dgi = s.a * ds1 * c;
            let ln_dgi = ln_a + ln_ds1 + ln_c;
            RatePartials {
                value: s1 * c,
                dgi,
                dgj: -dgi,
                d_occupancy: T::zero(),
                ln_dgi,
                ln_neg_dgj: ln_dgi,
                method: PartialsMethod::Analytic,
            }
        }
        Some(b) => {
            let x2 = s.a * (b - s.epsilon - occupancy);
            let (s2, ds2) = (sigmoid(x2), sigmoid_prime(x2));
            let (ln_s2, ln_ds2) = (ln_sigmoid(x2), ln_sigmoid_prime(x2));
            let dgi = s.a * ds1 * s2 * c;
            let d_occ = -s.a * s1 * ds2 * c;
            let ln_dgi = ln_a + ln_ds1 + ln_s2 + ln_c;
            let ln_occ = ln_a + ln_s1 + ln_ds2 + ln_c;
            RatePartials {
                value: s1 * s2 * c,
                dgi,
                dgj: -dgi + d_occ,
                d_occupancy: d_occ,
                ln_dgi,
                ln_neg_dgj: ln_add_exp(ln_dgi, ln_occ),
                method: PartialsMethod::Analytic,
            }
        }
    }
}

fn occupancy_rate<T: Scalar>(s: Smoothing<T>, c: T, gate: Option<T>, qi: T, occupancy: T) -> RatePartials<T> {
    let Some(b) = gate else {
        // Rejected by `check_applicable`; degrade to the occupancy-free factor.
        let x = s.a * (qi - s.epsilon);
        let dgi = s.a * sigmoid_prime(x) * c;
        return RatePartials::from_values(sigmoid(x) * c, dgi, T::zero(), T::zero(), PartialsMethod::Analytic);
    };
    let x = s.a * (qi - s.epsilon);
    let room = T::one() - occupancy / b;
    let sx = sigmoid(x);
    let dgi = s.a * sigmoid_prime(x) * room * c;
    let d_occ = -sx * c / b;
    RatePartials {
        value: sx * room * c,
        dgi,
        dgj: d_occ,
        d_occupancy: d_occ,
        ln_dgi: if room > T::zero() {
            s.a.ln() + ln_sigmoid_prime(x) + room.ln() + ln_abs(c)
        } else {
            T::neg_infinity()
        },
        ln_neg_dgj: ln_sigmoid(x) + ln_abs(c) - b.ln(),
        method: PartialsMethod::Analytic,
    }
}

/// A single-link view of a policy, for evaluating one rate function in isolation.
#[derive(Debug, Clone)]
pub struct LinkPolicy<T: Scalar> {
    pub policy: Policy<T>,
    pub capacity: T,
    pub downstream: Buffer<T>,
}

impl<T: Scalar> LinkPolicy<T> {
    fn checked(policy: Policy<T>, capacity: T, downstream: Buffer<T>) -> Result<Self> {
        if !(capacity > T::zero()) {
            return Err(Error::InvalidParameter(format!("link capacity must be positive, got {capacity}")));
        }
        if let Buffer::Finite(b) = downstream {
            if !(b > T::zero()) {
                return Err(Error::InvalidParameter(format!("buffer must be positive, got {b}")));
            }
        }
        Ok(Self {
            policy,
            capacity,
            downstream,
        })
    }

    pub fn smooth_backpressure(capacity: T, downstream: Buffer<T>, a: T, epsilon: T) -> Result<Self> {
        Self::checked(Policy::smooth_backpressure(Smoothing::new(a, epsilon)?)?, capacity, downstream)
    }

    pub fn buffer_occupancy(capacity: T, downstream: Buffer<T>, a: T, epsilon: T) -> Result<Self> {
        if downstream.is_unbounded() {
            return Err(Error::PolicyNotApplicable {
                family: PolicyFamily::BufferOccupancy.to_string(),
                reason: "downstream buffer is unbounded".into(),
            });
        }
        Self::checked(Policy::buffer_occupancy(Smoothing::new(a, epsilon)?)?, capacity, downstream)
    }

    pub fn shared_buffer_backpressure(capacity: T, downstream: Buffer<T>, a: T, epsilon: T) -> Result<Self> {
        Self::checked(
            Policy::shared_buffer_backpressure(Smoothing::new(a, epsilon)?)?,
            capacity,
            downstream,
        )
    }

    pub fn constant_rate(capacity: T, fraction: T) -> Result<Self> {
        Self::checked(Policy::constant_rate(fraction)?, capacity, Buffer::Unbounded)
    }

    pub fn rate(&self, qi: T, qj: T) -> T {
        self.partials(qi, qj).value
    }

    /// Rate and partials with `q_j` as the only occupant of the downstream buffer.
    pub fn partials(&self, qi: T, qj: T) -> RatePartials<T> {
        self.policy.link(self.capacity, self.downstream.finite(), qi, qj, qj)
    }

    /// Shared downstream buffer: `occupancy = Σ_p q_j^(p)` including `q_j`.
    pub fn partials_shared(&self, qi: T, qj: T, occupancy: T) -> RatePartials<T> {
        self.policy.link(self.capacity, self.downstream.finite(), qi, qj, occupancy)
    }
}

/// Rate and partials on every commodity link of a layout, in `layout.links` order.
pub fn evaluate_links<T: Scalar>(pol: &Policy<T>, layout: &StateLayout<T>, q: &[T]) -> Vec<RatePartials<T>> {
    (0..layout.links.len()).map(|i| evaluate_link(pol, layout, i, q)).collect()
}

/// Rate and partials on commodity link `index` of a layout.
pub fn evaluate_link<T: Scalar>(pol: &Policy<T>, layout: &StateLayout<T>, index: usize, q: &[T]) -> RatePartials<T> {
    let l = &layout.links[index];
    let gate = layout.gate_of(l.to);
    let occupancy = if gate.members.len() == 1 {
        q[l.to]
    } else {
        gate.members.iter().map(|&k| q[k]).sum()
    };
    pol.link(l.capacity, gate.capacity, q[l.from], q[l.to], occupancy)
}

/// Rate on commodity link `index`, without partials.
pub fn link_value<T: Scalar>(pol: &Policy<T>, layout: &StateLayout<T>, index: usize, q: &[T]) -> T {
    let l = &layout.links[index];
    let gate = layout.gate_of(l.to);
    let occupancy = if gate.members.len() == 1 {
        q[l.to]
    } else {
        gate.members.iter().map(|&k| q[k]).sum()
    };
    pol.link_rate(l.capacity, gate.capacity, q[l.from], q[l.to], occupancy)
}

/// Egress rate and derivative on every egress port, in `layout.egress` order.
pub fn evaluate_egress<T: Scalar>(pol: &Policy<T>, layout: &StateLayout<T>, q: &[T]) -> Vec<RatePartials<T>> {
    layout
        .egress
        .iter()
        .map(|e| pol.egress(e.node, e.capacity, q[e.coord]))
        .collect()
}

/// Strict positivity witnessed by the value, or for analytic partials by a finite log.
pub fn strictly_positive<T: Scalar>(value: T, ln_value: T, method: PartialsMethod, tol: T) -> bool {
    if value > tol {
        return true;
    }
    method == PartialsMethod::Analytic && value >= T::zero() && ln_value.is_finite()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CommodityMargins {
    pub commodity: String,
    pub links: usize,
    /// `min ∂g/∂q_i` over the commodity's links (`+inf` without links).
    pub min_dgi: f64,
    /// `min −∂g/∂q_j`.
    pub min_neg_dgj: f64,
    /// `max ∂g_iT/∂q_i` over egress ports.
    pub max_egress: f64,
    /// Log-magnitude counterparts; finite values certify strict signs below `tol`.
    pub ln_min_dgi: f64,
    pub ln_min_neg_dgj: f64,
    pub ln_max_egress: f64,
    pub links_pass: bool,
    pub egress_pass: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::Inconclusive => "INCONCLUSIVE",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionVerdict {
    pub verdict: Verdict,
    pub per_commodity: Vec<CommodityMargins>,
    pub min_dgi: f64,
    pub min_neg_dgj: f64,
    pub max_egress: f64,
    pub method: PartialsMethod,
    pub tol: f64,
}

impl ConditionVerdict {
    pub fn pass(&self) -> bool {
        self.verdict == Verdict::Pass
    }
}

/// Pointwise sign conditions: every link has `∂g/∂q_i > 0` and `∂g/∂q_j < 0`, and each
/// commodity has an egress port with `∂g_iT/∂q_i > 0`.
pub fn check_pointwise_condition<T: Scalar>(
    pol: &Policy<T>,
    net: &NetworkInstance<T>,
    q: &[T],
) -> Result<ConditionVerdict> {
    let layout = StateLayout::new(net);
    check_pointwise_condition_in(pol, net, &layout, q)
}

/// As [`check_pointwise_condition`] with a prebuilt layout.
pub fn check_pointwise_condition_in<T: Scalar>(
    pol: &Policy<T>,
    net: &NetworkInstance<T>,
    layout: &StateLayout<T>,
    q: &[T],
) -> Result<ConditionVerdict> {
    if q.len() != layout.dim() {
        return Err(Error::Dimension {
            expected: layout.dim(),
            got: q.len(),
        });
    }
    let tol = T::of(POLICY_TOL);
    let links = evaluate_links(pol, layout, q);
    let egress = evaluate_egress(pol, layout, q);
    let mut per_commodity = Vec::with_capacity(net.commodity_count());
    for (c, com) in net.commodities().iter().enumerate() {
        let mut m = CommodityMargins {
            commodity: com.id.clone(),
            links: 0,
            min_dgi: f64::INFINITY,
            min_neg_dgj: f64::INFINITY,
            max_egress: f64::NEG_INFINITY,
            ln_min_dgi: f64::INFINITY,
            ln_min_neg_dgj: f64::INFINITY,
            ln_max_egress: f64::NEG_INFINITY,
            links_pass: true,
            egress_pass: false,
        };
        for (_, p) in layout.links.iter().zip(&links).filter(|(l, _)| l.commodity == c) {
            m.links += 1;
            m.min_dgi = m.min_dgi.min(p.dgi.as_f64());
            m.min_neg_dgj = m.min_neg_dgj.min((-p.dgj).as_f64());
            m.ln_min_dgi = m.ln_min_dgi.min(p.ln_dgi.as_f64());
            m.ln_min_neg_dgj = m.ln_min_neg_dgj.min(p.ln_neg_dgj.as_f64());
            let ok = strictly_positive(p.dgi, p.ln_dgi, p.method, tol)
                && strictly_positive(-p.dgj, p.ln_neg_dgj, p.method, tol);
            m.links_pass &= ok;
        }
        for (_, p) in layout.egress.iter().zip(&egress).filter(|(e, _)| e.commodity == c) {
            m.max_egress = m.max_egress.max(p.dgi.as_f64());
            m.ln_max_egress = m.ln_max_egress.max(p.ln_dgi.as_f64());
            m.egress_pass |= strictly_positive(p.dgi, p.ln_dgi, p.method, tol);
        }
        per_commodity.push(m);
    }
    let pass = per_commodity.iter().all(|m| m.links_pass && m.egress_pass);
    Ok(ConditionVerdict {
        verdict: if pass { Verdict::Pass } else { Verdict::Fail },
        min_dgi: per_commodity.iter().map(|m| m.min_dgi).fold(f64::INFINITY, f64::min),
        min_neg_dgj: per_commodity.iter().map(|m| m.min_neg_dgj).fold(f64::INFINITY, f64::min),
        max_egress: per_commodity.iter().map(|m| m.max_egress).fold(f64::NEG_INFINITY, f64::max),
        per_commodity,
        method: pol.partials_method(),
        tol: POLICY_TOL,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiscreteLimitGaps {
    /// `(a, |g_a − g_hard|)` with `ε = 1/√a`.
    pub gaps: Vec<(f64, f64)>,
    pub hard_rate: f64,
    /// State lies on the hard rule's switching surface; gaps need not vanish there.
    pub switching_surface: bool,
    pub monotone: bool,
}

/// Distance between the smoothed rate and its hard-threshold limit for increasing `a`.
///
/// Backpressure families use the rule `c·1{q_i>q_j}·1{q_j<b_j}`; buffer occupancy uses
/// `c·1{q_i>0}·(1 − q_j/b_j)`.
pub fn discrete_limit_gap<T: Scalar>(
    family: PolicyFamily,
    capacity: T,
    downstream: Buffer<T>,
    a_list: &[T],
    qi: T,
    qj: T,
) -> Result<DiscreteLimitGaps> {
    let ind = |b: bool| if b { T::one() } else { T::zero() };
    let below = match downstream {
        Buffer::Finite(b) => qj < b,
        Buffer::Unbounded => true,
    };
    let (hard, switching) = match family {
        PolicyFamily::SmoothBackpressure | PolicyFamily::SharedBufferBackpressure => (
            capacity * ind(qi > qj) * ind(below),
            qi == qj || downstream.finite() == Some(qj),
        ),
        PolicyFamily::BufferOccupancy => {
            let b = downstream.finite().ok_or_else(|| Error::PolicyNotApplicable {
                family: family.to_string(),
                reason: "downstream buffer is unbounded".into(),
            })?;
            (capacity * ind(qi > T::zero()) * (T::one() - qj / b), qi == T::zero())
        }
        other => {
            return Err(Error::PolicyNotApplicable {
                family: other.to_string(),
                reason: "no hard-threshold limit".into(),
            })
        }
    };
    let mut gaps = Vec::with_capacity(a_list.len());
    for &a in a_list {
        let s = Smoothing::with_a(a)?;
        let pol = Policy::new(family, s)?;
        let g = pol.link(capacity, downstream.finite(), qi, qj, qj).value;
        gaps.push((a.as_f64(), (g - hard).abs().as_f64()));
    }
    let mut order: Vec<usize> = (0..gaps.len()).collect();
    order.sort_by(|&x, &y| gaps[x].0.total_cmp(&gaps[y].0));
    let monotone = order.windows(2).all(|w| gaps[w[1]].1 <= gaps[w[0]].1);
    Ok(DiscreteLimitGaps {
        gaps,
        hard_rate: hard.as_f64(),
        switching_surface: switching,
        monotone,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bp(b: Buffer<f64>) -> LinkPolicy<f64> {
        LinkPolicy::smooth_backpressure(2.0, b, 50.0, 1.0 / 50f64.sqrt()).unwrap()
    }

    #[test]
    fn half_rate_at_offset() {
        let eps = 1.0 / 50f64.sqrt();
        assert!((bp(Buffer::Unbounded).rate(3.0 + eps, 3.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn saturates_to_capacity() {
        assert!((bp(Buffer::Finite(10.0)).rate(5.0, 1.0) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn full_downstream_buffer_blocks() {
        let p = bp(Buffer::Finite(6.0));
        let s = Smoothing::<f64>::default();
        assert!(p.rate(50.0, 6.0) <= s.leakage() * 2.0 * (1.0 + 1e-9));
    }

    #[test]
    fn occupancy_examples() {
        let p = LinkPolicy::<f64>::buffer_occupancy(2.0, Buffer::Finite(4.0), 50.0, 0.1).unwrap();
        assert!((p.rate(50.0, 0.0) - 2.0).abs() < 1e-12);
        assert_eq!(p.rate(50.0, 4.0), 0.0);
        assert!((p.rate(50.0, 2.0) - 1.0).abs() < 1e-12);
        assert!((p.partials(50.0, 1.0).dgj + 0.5).abs() < 1e-12);
        assert!(LinkPolicy::buffer_occupancy(2.0, Buffer::Unbounded, 50.0, 0.1).is_err());
    }

    #[test]
    fn rejects_nonpositive_parameters() {
        assert!(LinkPolicy::smooth_backpressure(1.0, Buffer::Unbounded, 0.0, 0.1).is_err());
        assert!(LinkPolicy::smooth_backpressure(1.0, Buffer::Unbounded, 1.0, -0.1).is_err());
        assert!(LinkPolicy::smooth_backpressure(0.0, Buffer::Unbounded, 1.0, 0.1).is_err());
    }

    #[test]
    fn log_witness_survives_underflow() {
        let p = bp(Buffer::Finite(200.0)).partials(100.0, 0.0);
        assert_eq!(p.dgi, 0.0);
        assert!(p.ln_dgi.is_finite());
        assert!(strictly_positive(p.dgi, p.ln_dgi, p.method, 1e-12));
    }

    #[test]
    fn gaps_shrink_with_sharpness() {
        let g = discrete_limit_gap(PolicyFamily::SmoothBackpressure, 1.0, Buffer::Finite(10.0), &[10.0, 100.0, 1000.0], 3.0, 2.0).unwrap();
        assert!(g.monotone && !g.switching_surface);
        assert!(g.gaps[2].1 < 1e-9);
        let g = discrete_limit_gap(PolicyFamily::SmoothBackpressure, 1.0, Buffer::Finite(10.0), &[10.0, 100.0, 1000.0], 2.0, 3.0).unwrap();
        assert_eq!(g.hard_rate, 0.0);
        assert!(g.monotone);
        let g = discrete_limit_gap(PolicyFamily::SmoothBackpressure, 1.0, Buffer::Finite(10.0), &[10.0], 2.0, 2.0).unwrap();
        assert!(g.switching_surface);
    }
}
