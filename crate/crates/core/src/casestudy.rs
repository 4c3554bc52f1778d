//! Closed-form admissible arrival ranges for one-hop systems: `C` unbounded sources
//! feeding a single shared-buffer node `K` with per-commodity egress.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::network::{Buffer, NetworkBuilder, NetworkInstance};
use crate::scalar::Scalar;

/// Ratio ties closer than this make the ordering ambiguous.
pub const TIE_TOL: f64 = 1e-9;
/// Offset used to represent a half-open upper end `[0, μ)` in sweeps.
pub const OPEN_END_ETA: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OneHopSharedConfig<T> {
    /// Link capacities `c_iK`.
    pub capacity: Vec<T>,
    /// Egress rates `μ_i` at `K`.
    pub mu: Vec<T>,
    /// Arrival rates `λ_i` at source `i`.
    pub lambda: Vec<T>,
    pub buffer: T,
}

impl<T: Scalar> OneHopSharedConfig<T> {
    pub fn new(capacity: Vec<T>, mu: Vec<T>, lambda: Vec<T>, buffer: T) -> Result<Self> {
        let cfg = Self {
            capacity,
            mu,
            lambda,
            buffer,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn commodities(&self) -> usize {
        self.mu.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.mu.len();
        if c == 0 || self.capacity.len() != c || self.lambda.len() != c {
            return Err(Error::InvalidParameter(
                "capacity, mu and lambda must be non-empty and of equal length".into(),
            ));
        }
        if !(self.buffer > T::zero() && self.buffer.is_finite()) {
            return Err(Error::InvalidParameter("buffer at K must be finite and positive".into()));
        }
        for i in 0..c {
            if !(self.mu[i] > T::zero()) || !(self.capacity[i] > T::zero()) || !(self.lambda[i] >= T::zero()) {
                return Err(Error::InvalidParameter(format!("commodity {}: rates must be positive", i + 1)));
            }
            if !(self.capacity[i] > self.mu[i]) {
                return Err(Error::Hypothesis(format!(
                    "commodity {}: link capacity {} must exceed egress rate {}",
                    i + 1,
                    self.capacity[i],
                    self.mu[i]
                )));
            }
        }
        Ok(())
    }

    pub fn ratio(&self, i: usize) -> T {
        self.capacity[i] / self.mu[i]
    }

    pub fn overloaded(&self) -> Vec<usize> {
        (0..self.commodities()).filter(|&i| self.lambda[i] > self.mu[i]).collect()
    }

    /// Network with sources `1..=C`, shared node `K` and one commodity per source.
    pub fn to_network(&self) -> Result<NetworkInstance<T>> {
        self.validate()?;
        let mut b = NetworkBuilder::new().node("K", Buffer::Finite(self.buffer))?;
        for i in 0..self.commodities() {
            let id = (i + 1).to_string();
            b = b
                .node(&id, Buffer::Unbounded)?
                .link(&id, "K", self.capacity[i])?
                .egress_for("K", &id, self.mu[i])?;
        }
        for i in 0..self.commodities() {
            let id = (i + 1).to_string();
            b = b.commodity(&id, &[(id.as_str(), self.lambda[i])], true)?;
        }
        b.build()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
    /// Whether `upper` itself is admissible.
    pub closed: bool,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        x >= self.lower && (x < self.upper || (self.closed && x <= self.upper))
    }

    /// Largest value used to probe the interval numerically.
    pub fn sweep_upper(&self) -> f64 {
        if self.closed {
            self.upper
        } else {
            self.upper - OPEN_END_ETA
        }
    }
}

/// Admissible `λ_2` for two commodities with commodity 1 overloaded:
/// `[0, μ_1·c_2K / c_1K]`.
pub fn admissible_range_two_commodity<T: Scalar>(cfg: &OneHopSharedConfig<T>) -> Result<Interval> {
    cfg.validate()?;
    if cfg.commodities() != 2 {
        return Err(Error::InvalidParameter(format!(
            "two commodities required, got {}",
            cfg.commodities()
        )));
    }
    if !(cfg.lambda[0] > cfg.mu[0]) {
        return Err(Error::Hypothesis(format!(
            "commodity 1 must be overloaded: λ1 = {} ≤ μ1 = {}",
            cfg.lambda[0], cfg.mu[0]
        )));
    }
    if !(cfg.ratio(0) > cfg.ratio(1)) {
        return Err(Error::Hypothesis(format!(
            "ratio ordering c1K/μ1 = {} > c2K/μ2 = {} fails",
            cfg.ratio(0),
            cfg.ratio(1)
        )));
    }
    let upper = (cfg.mu[0] * cfg.capacity[1] / cfg.capacity[0]).as_f64();
    Ok(Interval {
        lower: 0.0,
        upper,
        closed: true,
    })
}

/// Limiting shared-gate fraction `β* = μ_ℓ / c_ℓK` for overloaded commodity `ℓ`.
pub fn beta_limit<T: Scalar>(cfg: &OneHopSharedConfig<T>, overloaded: usize) -> Result<T> {
    cfg.validate()?;
    if overloaded >= cfg.commodities() {
        return Err(Error::UnknownCommodity((overloaded + 1).to_string()));
    }
    if !(cfg.lambda[overloaded] > cfg.mu[overloaded]) {
        return Err(Error::Hypothesis(format!(
            "commodity {} is not overloaded",
            overloaded + 1
        )));
    }
    Ok(cfg.mu[overloaded] / cfg.capacity[overloaded])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RangeEntry {
    /// Original commodity index (0-based).
    pub commodity: usize,
    /// Position after sorting by decreasing `c_iK/μ_i` (0-based).
    pub rank: usize,
    pub interval: Interval,
    /// Ratio ties with the overloaded commodity within [`TIE_TOL`].
    pub inconclusive: bool,
    pub lambda_within: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CommodityRanges {
    pub overloaded: usize,
    /// `permutation[rank] = original index`.
    pub permutation: Vec<usize>,
    pub beta: f64,
    pub entries: Vec<RangeEntry>,
}

/// Admissible ranges for every commodity other than the overloaded one.
///
/// Commodities ranked before `ℓ` (larger `c_iK/μ_i`) get `[0, μ_p)`; those ranked after
/// get `[0, μ_ℓ·c_pK / c_ℓK]`.
pub fn admissible_ranges_c_commodity<T: Scalar>(
    cfg: &OneHopSharedConfig<T>,
    overloaded: usize,
) -> Result<CommodityRanges> {
    cfg.validate()?;
    let over = cfg.overloaded();
    if over.len() > 1 {
        return Err(Error::Hypothesis(format!(
            "exactly one overloaded commodity allowed, found {}",
            over.len()
        )));
    }
    let beta = beta_limit(cfg, overloaded)?.as_f64();
    let c = cfg.commodities();
    let mut permutation: Vec<usize> = (0..c).collect();
    permutation.sort_by(|&i, &j| cfg.ratio(j).partial_cmp(&cfg.ratio(i)).unwrap_or(std::cmp::Ordering::Equal));
    let rank_of = |i: usize| permutation.iter().position(|&p| p == i).unwrap_or(i);
    let r_l = cfg.ratio(overloaded).as_f64();
    let rank_l = rank_of(overloaded);
    let entries = (0..c)
        .filter(|&p| p != overloaded)
        .map(|p| {
            let rank = rank_of(p);
            let r_p = cfg.ratio(p).as_f64();
            let tie = (r_p - r_l).abs() <= TIE_TOL * r_p.abs().max(r_l.abs()).max(1.0);
            let interval = if rank < rank_l {
                Interval {
                    lower: 0.0,
                    upper: cfg.mu[p].as_f64(),
                    closed: false,
                }
            } else {
                Interval {
                    lower: 0.0,
                    upper: beta * cfg.capacity[p].as_f64(),
                    closed: true,
                }
            };
            RangeEntry {
                commodity: p,
                rank,
                interval,
                inconclusive: tie,
                lambda_within: interval.contains(cfg.lambda[p].as_f64()),
            }
        })
        .collect();
    Ok(CommodityRanges {
        overloaded,
        permutation,
        beta,
        entries,
    })
}

/// Random configuration satisfying the closed-form hypotheses: log-uniform rates,
/// ratios separated by at least 10 %, one overloaded commodity and idle others.
pub fn random_config<R: Rng + ?Sized>(rng: &mut R, commodities: usize) -> (OneHopSharedConfig<f64>, usize) {
    let c = commodities.max(2);
    let mut ratios: Vec<f64> = Vec::with_capacity(c);
    while ratios.len() < c {
        let r = (rng.gen_range(1.2f64.ln()..5.0f64.ln())).exp();
        if ratios.iter().all(|&x| (x / r).ln().abs() > 1.1f64.ln()) {
            ratios.push(r);
        }
    }
    let mu: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5f64.ln()..4.0f64.ln()).exp()).collect();
    let capacity: Vec<f64> = mu.iter().zip(&ratios).map(|(m, r)| m * r).collect();
    let overloaded = rng.gen_range(0..c);
    let mut lambda = vec![0.0; c];
    lambda[overloaded] = mu[overloaded] * rng.gen_range(1.3..2.0);
    let buffer = rng.gen_range(4.0..12.0);
    (
        OneHopSharedConfig {
            capacity,
            mu,
            lambda,
            buffer,
        },
        overloaded,
    )
}
