//! Drift assembly from flow conservation and ODE integration.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::network::{ArrivalSchedule, FeasibleRegion, NetworkInstance, StateLayout, DEFAULT_SAMPLING_CAP};
use crate::policy::{link_value, Policy};
use crate::scalar::Scalar;

/// Feasibility tolerance for externally supplied states.
pub const STATE_TOL: f64 = 1e-9;

/// A network bound to a policy, with its state layout and feasible region.
///
/// Coordinates may be pinned: a pinned coordinate keeps its value and has zero drift,
/// which removes its equation from the system.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    net: NetworkInstance<T>,
    policy: Policy<T>,
    layout: StateLayout<T>,
    region: FeasibleRegion<T>,
    arrivals: Vec<Option<ArrivalSchedule<T>>>,
    pins: Vec<Option<T>>,
    /// Commodity links leaving or entering each coordinate.
    incident: Vec<Vec<usize>>,
    egress_port: Vec<Option<usize>>,
}

impl<T: Scalar> Model<T> {
    pub fn new(net: NetworkInstance<T>, policy: Policy<T>) -> Result<Self> {
        Self::with_cap(net, policy, T::of(DEFAULT_SAMPLING_CAP))
    }

    pub fn with_cap(net: NetworkInstance<T>, policy: Policy<T>, sampling_cap: T) -> Result<Self> {
        let report = net.validate();
        if !report.is_valid() {
            let msgs: Vec<String> = report.violations.iter().map(ToString::to_string).collect();
            return Err(Error::InvalidNetwork(msgs.join("; ")));
        }
        policy.check_applicable(&net)?;
        let layout = StateLayout::new(&net);
        let region = FeasibleRegion::from_layout(&layout, sampling_cap);
        let arrivals = layout
            .coords
            .iter()
            .map(|c| net.commodities()[c.commodity].arrivals.get(&c.node).cloned())
            .collect();
        let pins = vec![None; layout.dim()];
        let mut incident = vec![Vec::new(); layout.dim()];
        for (i, l) in layout.links.iter().enumerate() {
            incident[l.from].push(i);
            incident[l.to].push(i);
        }
        let mut egress_port = vec![None; layout.dim()];
        for (i, e) in layout.egress.iter().enumerate() {
            egress_port[e.coord] = Some(i);
        }
        Ok(Self {
            net,
            policy,
            layout,
            region,
            arrivals,
            pins,
            incident,
            egress_port,
        })
    }

    pub fn net(&self) -> &NetworkInstance<T> {
        &self.net
    }

    pub fn policy(&self) -> &Policy<T> {
        &self.policy
    }

    pub fn layout(&self) -> &StateLayout<T> {
        &self.layout
    }

    pub fn region(&self) -> &FeasibleRegion<T> {
        &self.region
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn pins(&self) -> &[Option<T>] {
        &self.pins
    }

    pub fn pin(&mut self, coord: usize, value: T) {
        self.pins[coord] = Some(value);
    }

    pub fn clear_pins(&mut self) {
        self.pins.iter_mut().for_each(|p| *p = None);
    }

    /// Indices of the coordinates that are not pinned.
    pub fn free_coords(&self) -> Vec<usize> {
        (0..self.dim()).filter(|&k| self.pins[k].is_none()).collect()
    }

    /// Overwrites pinned entries of `q` with their pinned values.
    pub fn apply_pins(&self, q: &mut [T]) {
        for (x, p) in q.iter_mut().zip(&self.pins) {
            if let Some(v) = p {
                *x = *v;
            }
        }
    }

    /// Arrival rate of coordinate `k` at time `t` (`None` selects the stationary rate).
    pub fn arrival(&self, k: usize, t: Option<T>) -> T {
        self.arrivals[k].as_ref().map_or(T::zero(), |s| match t {
            Some(t) => s.rate_at(t),
            None => s.stationary_rate(),
        })
    }

    pub fn check_state(&self, q: &[T]) -> Result<()> {
        if q.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: q.len(),
            });
        }
        let mut unpinned = self.region.clone();
        for (b, p) in unpinned.bounds.iter_mut().zip(&self.pins) {
            if p.is_some() {
                b.truncated = true;
            }
        }
        let v = unpinned.violation(q);
        if !(v <= T::of(STATE_TOL)) {
            return Err(Error::InfeasibleState(format!(
                "constraint violation {v} exceeds {STATE_TOL}"
            )));
        }
        Ok(())
    }

    /// Drift at a feasible state; `t = None` uses stationary arrival rates.
    pub fn drift(&self, q: &[T], t: Option<T>) -> Result<Vec<T>> {
        self.check_state(q)?;
        Ok(self.drift_unchecked(q, t))
    }

    /// Drift without the feasibility check (used on intermediate integrator stages).
    pub fn drift_unchecked(&self, q: &[T], t: Option<T>) -> Vec<T> {
        let mut f = vec![T::zero(); self.dim()];
        self.drift_with_egress(q, t, &mut f, None);
        f
    }

    /// Writes the drift into `f`; when `egress` is given, also the total egress rate per
    /// commodity.
    pub fn drift_with_egress(&self, q: &[T], t: Option<T>, f: &mut [T], mut egress: Option<&mut [T]>) {
        for (k, x) in f.iter_mut().enumerate() {
            *x = self.arrival(k, t);
        }
        for (i, l) in self.layout.links.iter().enumerate() {
            let g = link_value(&self.policy, &self.layout, i, q);
            f[l.from] = f[l.from] - g;
            f[l.to] = f[l.to] + g;
        }
        if let Some(e) = egress.as_deref_mut() {
            e.iter_mut().for_each(|x| *x = T::zero());
        }
        for port in &self.layout.egress {
            let g = self.policy.egress_rate(port.node, port.capacity, q[port.coord]);
            f[port.coord] = f[port.coord] - g;
            if let Some(e) = egress.as_deref_mut() {
                if self.pins[port.coord].is_none() {
                    e[port.commodity] = e[port.commodity] + g;
                }
            }
        }
        for (x, p) in f.iter_mut().zip(&self.pins) {
            if p.is_some() {
                *x = T::zero();
            }
        }
    }

    /// One component of the stationary drift, touching only the incident links.
    pub fn drift_component(&self, q: &[T], k: usize) -> T {
        if self.pins[k].is_some() {
            return T::zero();
        }
        let mut f = self.arrival(k, None);
        for &i in &self.incident[k] {
            let g = link_value(&self.policy, &self.layout, i, q);
            if self.layout.links[i].from == k {
                f = f - g;
            } else {
                f = f + g;
            }
        }
        if let Some(p) = self.egress_port[k] {
            let port = &self.layout.egress[p];
            f = f - self.policy.egress_rate(port.node, port.capacity, q[k]);
        }
        f
    }

    /// Infinity norm of the stationary drift over the free coordinates.
    pub fn residual(&self, q: &[T]) -> T {
        self.drift_unchecked(q, None)
            .into_iter()
            .fold(T::zero(), |m, x| m.max(x.abs()))
    }

    /// Column labels `q_<node>_<commodity>`.
    pub fn labels(&self) -> Vec<String> {
        (0..self.dim()).map(|k| self.layout.label(&self.net, k)).collect()
    }
}

/// Drift of `net` under `pol` at a feasible state `q` and time `t`.
pub fn drift<T: Scalar>(net: &NetworkInstance<T>, pol: &Policy<T>, q: &[T], t: T) -> Result<Vec<T>> {
    Model::new(net.clone(), pol.clone())?.drift(q, Some(t))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IntegrateOptions<T> {
    /// Fixed step, or the initial step in adaptive mode.
    pub step: T,
    pub adaptive: bool,
    pub rtol: T,
    pub atol: T,
    /// Post-step corrections larger than this count as clamp events.
    pub clamp_threshold: T,
    /// Unbounded coordinates above this value stop the run as diverged.
    pub divergence_cap: T,
    /// Keep at most this many samples (plus the final one).
    pub max_samples: usize,
    /// Use the time-varying arrival schedules instead of the stationary rates.
    pub time_varying: bool,
    /// Stop early once the drift infinity norm falls below this value.
    pub steady_tol: Option<T>,
}

impl<T: Scalar> Default for IntegrateOptions<T> {
    fn default() -> Self {
        Self {
            step: T::of(0.01),
            adaptive: false,
            rtol: T::of(1e-6),
            atol: T::of(1e-9),
            clamp_threshold: T::of(1e-6),
            divergence_cap: T::of(1e9),
            max_samples: 10_000,
            time_varying: true,
            steady_tol: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TrajectoryStatus {
    Completed,
    /// Stopped early on reaching `steady_tol`.
    Steady,
    /// An unbounded coordinate exceeded the divergence cap or a value became non-finite.
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory<T> {
    pub times: Vec<T>,
    pub states: Vec<Vec<T>>,
    /// Cumulative egress per commodity at each sample.
    pub cum_egress: Vec<Vec<T>>,
    pub status: TrajectoryStatus,
    pub steps: usize,
    pub rejected_steps: usize,
    pub clamp_events: usize,
    pub max_clamp: T,
    /// Largest excess of a finite-buffer coordinate over its bound before clamping.
    pub max_overshoot: T,
    pub step: T,
    pub adaptive: bool,
    /// Clamp events exceed 0.1% of the steps.
    pub smoothing_too_loose: bool,
}

impl<T: Scalar> Trajectory<T> {
    pub fn t_end(&self) -> T {
        *self.times.last().expect("trajectory has samples")
    }

    pub fn final_state(&self) -> &[T] {
        self.states.last().expect("trajectory has samples")
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    fn interpolate(&self, t: T, value: impl Fn(usize) -> T) -> T {
        let idx = self.times.partition_point(|&s| s < t);
        if idx == 0 {
            return value(0);
        }
        if idx >= self.times.len() {
            return value(self.times.len() - 1);
        }
        let (t0, t1) = (self.times[idx - 1], self.times[idx]);
        let w = if t1 > t0 { (t - t0) / (t1 - t0) } else { T::one() };
        value(idx - 1) * (T::one() - w) + value(idx) * w
    }

    fn check_window(&self, window: T) -> Result<()> {
        let span = self.t_end() - self.times[0];
        if !(window > T::zero()) || window + window > span * (T::one() + T::of(1e-12)) {
            return Err(Error::TrajectoryTooShort(format!(
                "window {window} needs at least {} time units, trajectory covers {span}",
                window + window
            )));
        }
        Ok(())
    }

    /// Average egress rate of a commodity over the final `window`.
    pub fn throughput_estimate(&self, commodity: usize, window: T) -> Result<T> {
        self.check_window(window)?;
        let end = self.t_end();
        let last = self.cum_egress.last().expect("trajectory has samples")[commodity];
        let start = self.interpolate(end - window, |i| self.cum_egress[i][commodity]);
        Ok((last - start) / window)
    }

    /// Average growth rate of coordinate `coord` over the final `window`.
    pub fn growth_rate(&self, coord: usize, window: T) -> Result<T> {
        self.check_window(window)?;
        let end = self.t_end();
        let last = self.final_state()[coord];
        let start = self.interpolate(end - window, |i| self.states[i][coord]);
        Ok((last - start) / window)
    }

    /// Writes `t, q_..., cum_egress_...` rows.
    pub fn write_csv<W: Write>(&self, out: W, state_labels: &[String], commodity_ids: &[String]) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::InvalidParameter(format!("csv output failed: {e}"));
        let mut header = vec!["t".to_string()];
        header.extend(state_labels.iter().cloned());
        header.extend(commodity_ids.iter().map(|c| format!("cum_egress_{c}")));
        w.write_record(&header).map_err(io)?;
        for i in 0..self.times.len() {
            let mut row = Vec::with_capacity(header.len());
            row.push(fmt_num(self.times[i]));
            row.extend(self.states[i].iter().map(|&x| fmt_num(x)));
            row.extend(self.cum_egress[i].iter().map(|&x| fmt_num(x)));
            w.write_record(&row).map_err(io)?;
        }
        w.flush()
            .map_err(|e| Error::InvalidParameter(format!("csv output failed: {e}")))
    }
}

fn fmt_num<T: Scalar>(x: T) -> String {
    format!("{}", x.as_f64())
}

/// Augmented state: queue lengths followed by cumulative egress per commodity.
struct Augmented<'a, T: Scalar> {
    model: &'a Model<T>,
    n: usize,
    c: usize,
    time_varying: bool,
}

impl<T: Scalar> Augmented<'_, T> {
    fn rhs(&self, t: T, y: &[T], out: &mut [T]) {
        let (q, rest) = out.split_at_mut(self.n);
        let tt = self.time_varying.then_some(t);
        self.model.drift_with_egress(&y[..self.n], tt, q, Some(&mut rest[..self.c]));
    }

    fn rk4(&self, t: T, y: &[T], h: T, k1: &[T]) -> Vec<T> {
        let m = y.len();
        let half = T::half() * h;
        let mut tmp = vec![T::zero(); m];
        let mut k2 = vec![T::zero(); m];
        let mut k3 = vec![T::zero(); m];
        let mut k4 = vec![T::zero(); m];
        for i in 0..m {
            tmp[i] = y[i] + half * k1[i];
        }
        self.rhs(t + half, &tmp, &mut k2);
        for i in 0..m {
            tmp[i] = y[i] + half * k2[i];
        }
        self.rhs(t + half, &tmp, &mut k3);
        for i in 0..m {
            tmp[i] = y[i] + h * k3[i];
        }
        self.rhs(t + h, &tmp, &mut k4);
        let sixth = h / T::of(6.0);
        (0..m)
            .map(|i| y[i] + sixth * (k1[i] + T::two() * (k2[i] + k3[i]) + k4[i]))
            .collect()
    }
}

/// Integrates the queue dynamics from `q0` to `t_end` with classical RK4 and
/// post-step projection onto the feasible region.
pub fn integrate<T: Scalar>(model: &Model<T>, q0: &[T], t_end: T, opts: &IntegrateOptions<T>) -> Result<Trajectory<T>> {
    model.check_state(q0)?;
    if !(t_end > T::zero()) {
        return Err(Error::InvalidParameter(format!("t_end must be positive, got {t_end}")));
    }
    if !(opts.step > T::zero()) {
        return Err(Error::InvalidParameter(format!("step must be positive, got {}", opts.step)));
    }
    let n = model.dim();
    let c = model.net().commodity_count();
    let sys = Augmented {
        model,
        n,
        c,
        time_varying: opts.time_varying,
    };
    let region = model.region();
    let mut y: Vec<T> = q0.iter().copied().chain(std::iter::repeat(T::zero()).take(c)).collect();
    model.apply_pins(&mut y[..n]);
    region.clamp(&mut y[..n]);
    model.apply_pins(&mut y[..n]);

    let expected_steps = (t_end / opts.step).ceil().as_f64().max(1.0) as usize;
    let stride = if opts.adaptive {
        1
    } else {
        expected_steps.div_ceil(opts.max_samples.max(1)).max(1)
    };
    let mut traj = Trajectory {
        times: vec![T::zero()],
        states: vec![y[..n].to_vec()],
        cum_egress: vec![y[n..].to_vec()],
        status: TrajectoryStatus::Completed,
        steps: 0,
        rejected_steps: 0,
        clamp_events: 0,
        max_clamp: T::zero(),
        max_overshoot: T::zero(),
        step: opts.step,
        adaptive: opts.adaptive,
        smoothing_too_loose: false,
    };
    let mut t = T::zero();
    let mut h = opts.step;
    let mut k1 = vec![T::zero(); n + c];
    let min_sample_dt = t_end / T::of_usize(opts.max_samples.max(1));
    let mut last_sample_t = T::zero();

    while t < t_end {
        sys.rhs(t, &y, &mut k1);
        if let Some(tol) = opts.steady_tol {
            let norm = k1[..n].iter().fold(T::zero(), |m, x| m.max(x.abs()));
            if norm < tol {
                traj.status = TrajectoryStatus::Steady;
                break;
            }
        }
        let remaining = t_end - t;
        let last = h >= remaining;
        let h_try = if last { remaining } else { h };
        let next = if opts.adaptive {
            let full = sys.rk4(t, &y, h_try, &k1);
            let half = T::half() * h_try;
            let mid = sys.rk4(t, &y, half, &k1);
            let mut k1_mid = vec![T::zero(); n + c];
            sys.rhs(t + half, &mid, &mut k1_mid);
            let two = sys.rk4(t + half, &mid, half, &k1_mid);
            let mut err = T::zero();
            for i in 0..n + c {
                let scale = opts.atol + opts.rtol * two[i].abs().max(y[i].abs());
                err = err.max((two[i] - full[i]).abs() / scale);
            }
            if !err.is_finite() || err > T::one() {
                traj.rejected_steps += 1;
                let shrink = if err.is_finite() {
                    (T::of(0.9) * err.powf(T::of(-0.2))).max(T::of(0.2))
                } else {
                    T::of(0.2)
                };
                h = h_try * shrink;
                if h < T::of(1e-12) {
                    traj.status = TrajectoryStatus::Diverged;
                    break;
                }
                continue;
            }
            let grow = if err > T::zero() {
                (T::of(0.9) * err.powf(T::of(-0.2))).min(T::two())
            } else {
                T::two()
            };
            if !last {
                h = h_try * grow.max(T::one());
            }
            two.iter()
                .zip(&full)
                .map(|(&a, &b)| a + (a - b) / T::of(15.0))
                .collect::<Vec<T>>()
        } else {
            sys.rk4(t, &y, h_try, &k1)
        };
        y = next;
        t = if last { t_end } else { t + h_try };
        traj.steps += 1;

        for k in 0..n {
            if let Some(u) = model.layout().upper(k) {
                traj.max_overshoot = traj.max_overshoot.max(y[k] - u);
            }
        }
        let moved = region.clamp(&mut y[..n]);
        model.apply_pins(&mut y[..n]);
        if moved > opts.clamp_threshold {
            traj.clamp_events += 1;
        }
        traj.max_clamp = traj.max_clamp.max(moved);

        let diverged = y.iter().any(|x| !x.is_finite())
            || (0..n).any(|k| model.layout().upper(k).is_none() && y[k] > opts.divergence_cap);
        let record = if opts.adaptive {
            t - last_sample_t >= min_sample_dt
        } else {
            traj.steps % stride == 0
        };
        if record || diverged || t >= t_end {
            traj.times.push(t);
            traj.states.push(y[..n].to_vec());
            traj.cum_egress.push(y[n..].to_vec());
            last_sample_t = t;
        }
        if diverged {
            traj.status = TrajectoryStatus::Diverged;
            break;
        }
    }
    if traj.status == TrajectoryStatus::Steady && *traj.times.last().unwrap() < t {
        traj.times.push(t);
        traj.states.push(y[..n].to_vec());
        traj.cum_egress.push(y[n..].to_vec());
    }
    traj.smoothing_too_loose = traj.steps > 0 && traj.clamp_events * 1000 > traj.steps;
    Ok(traj)
}
