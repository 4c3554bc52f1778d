//! Network topology, buffers, commodities and the feasible queue region.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::ops::Range;

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Sampling cap substituted for unbounded buffers in box and scan routines.
pub const DEFAULT_SAMPLING_CAP: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Buffer<T> {
    Finite(T),
    Unbounded,
}

impl<T: Scalar> Buffer<T> {
    pub fn finite(&self) -> Option<T> {
        match *self {
            Buffer::Finite(b) => Some(b),
            Buffer::Unbounded => None,
        }
    }

    pub fn is_unbounded(&self) -> bool {
        matches!(self, Buffer::Unbounded)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node<T> {
    pub id: String,
    pub buffer: Buffer<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Link<T> {
    pub from: usize,
    pub to: usize,
    pub capacity: T,
}

/// Piecewise-constant arrival rate: `(t_start, rate)` segments in increasing start time.
///
/// The rate before the first segment is zero. Stationary analyses use the last segment.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrivalSchedule<T> {
    segments: Vec<(T, T)>,
}

impl<T: Scalar> ArrivalSchedule<T> {
    pub fn constant(rate: T) -> Self {
        Self {
            segments: vec![(T::zero(), rate)],
        }
    }

    pub fn piecewise(mut segments: Vec<(T, T)>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::InvalidParameter("empty arrival schedule".into()));
        }
        segments.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
        if segments.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::InvalidParameter(
                "arrival schedule has duplicate segment start times".into(),
            ));
        }
        Ok(Self { segments })
    }

    pub fn rate_at(&self, t: T) -> T {
        self.segments
            .iter()
            .take_while(|(start, _)| *start <= t)
            .last()
            .map_or(T::zero(), |&(_, r)| r)
    }

    pub fn stationary_rate(&self) -> T {
        self.segments.last().map_or(T::zero(), |&(_, r)| r)
    }

    pub fn segments(&self) -> &[(T, T)] {
        &self.segments
    }

    pub fn set_stationary_rate(&mut self, rate: T) {
        if let Some(last) = self.segments.last_mut() {
            last.1 = rate;
        }
    }

    pub fn is_constant(&self) -> bool {
        self.segments.len() == 1 && self.segments[0].0 <= T::zero()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BufferMode<T> {
    /// Fixed allocation `b_i^(l)` at each finite node; missing entries get a default share.
    PerCommodity { allocations: BTreeMap<usize, T> },
    /// All shared commodities jointly occupy the node's pool.
    Shared,
}

impl<T> BufferMode<T> {
    pub fn is_shared(&self) -> bool {
        matches!(self, BufferMode::Shared)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Commodity<T> {
    pub id: String,
    /// Arrival schedules keyed by node index.
    pub arrivals: BTreeMap<usize, ArrivalSchedule<T>>,
    pub buffer_mode: BufferMode<T>,
}

/// A finite-buffer network: acyclic digraph, buffers, egress capacities, commodities.
///
/// Egress capacity is stored per (node, commodity); `0` marks a non-egress node.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkInstance<T> {
    nodes: Vec<Node<T>>,
    links: Vec<Link<T>>,
    egress: Vec<Vec<T>>,
    commodities: Vec<Commodity<T>>,
    node_index: HashMap<String, usize>,
}

/// Incremental builder keyed by string ids.
#[derive(Debug, Clone)]
pub struct NetworkBuilder<T> {
    net: NetworkInstance<T>,
    egress_default: Vec<Option<T>>,
    egress_by_commodity: Vec<BTreeMap<String, T>>,
    pending_commodities: Vec<PendingCommodity<T>>,
}

#[derive(Debug, Clone)]
struct PendingCommodity<T> {
    id: String,
    arrivals: Vec<(String, ArrivalSchedule<T>)>,
    shared: bool,
    allocations: Vec<(String, T)>,
}

impl<T: Scalar> Default for NetworkBuilder<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> NetworkBuilder<T> {
    pub fn new() -> Self {
        Self {
            net: NetworkInstance {
                nodes: Vec::new(),
                links: Vec::new(),
                egress: Vec::new(),
                commodities: Vec::new(),
                node_index: HashMap::new(),
            },
            egress_default: Vec::new(),
            egress_by_commodity: Vec::new(),
            pending_commodities: Vec::new(),
        }
    }

    pub fn node(mut self, id: &str, buffer: Buffer<T>) -> Result<Self> {
        if self.net.node_index.contains_key(id) {
            return Err(Error::DuplicateNode(id.to_string()));
        }
        self.net.node_index.insert(id.to_string(), self.net.nodes.len());
        self.net.nodes.push(Node {
            id: id.to_string(),
            buffer,
        });
        self.egress_default.push(None);
        self.egress_by_commodity.push(BTreeMap::new());
        Ok(self)
    }

    /// Egress capacity applying to every commodity at `node`.
    pub fn egress(mut self, node: &str, mu: T) -> Result<Self> {
        let i = self.index(node)?;
        self.egress_default[i] = Some(mu);
        Ok(self)
    }

    /// Egress capacity for one commodity; overrides [`Self::egress`].
    pub fn egress_for(mut self, node: &str, commodity: &str, mu: T) -> Result<Self> {
        let i = self.index(node)?;
        self.egress_by_commodity[i].insert(commodity.to_string(), mu);
        Ok(self)
    }

    pub fn link(mut self, from: &str, to: &str, capacity: T) -> Result<Self> {
        let from = self.index(from)?;
        let to = self.index(to)?;
        self.net.links.push(Link { from, to, capacity });
        Ok(self)
    }

    /// Adds a commodity with constant arrival rates.
    pub fn commodity(self, id: &str, arrivals: &[(&str, T)], shared: bool) -> Result<Self> {
        let arrivals = arrivals
            .iter()
            .map(|&(n, r)| (n.to_string(), ArrivalSchedule::constant(r)))
            .collect();
        self.commodity_with(id, arrivals, shared, Vec::new())
    }

    pub fn commodity_with(
        mut self,
        id: &str,
        arrivals: Vec<(String, ArrivalSchedule<T>)>,
        shared: bool,
        allocations: Vec<(String, T)>,
    ) -> Result<Self> {
        if self.pending_commodities.iter().any(|c| c.id == id) {
            return Err(Error::DuplicateCommodity(id.to_string()));
        }
        for (n, _) in &arrivals {
            self.index(n)?;
        }
        for (n, _) in &allocations {
            self.index(n)?;
        }
        self.pending_commodities.push(PendingCommodity {
            id: id.to_string(),
            arrivals,
            shared,
            allocations,
        });
        Ok(self)
    }

    fn index(&self, id: &str) -> Result<usize> {
        self.net
            .node_index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownNode(id.to_string()))
    }

    pub fn build(mut self) -> Result<NetworkInstance<T>> {
        let n = self.net.nodes.len();
        let c = self.pending_commodities.len();
        for (i, per) in self.egress_by_commodity.iter().enumerate() {
            for key in per.keys() {
                if !self.pending_commodities.iter().any(|p| &p.id == key) {
                    return Err(Error::UnknownCommodity(format!(
                        "{key} (egress at node `{}`)",
                        self.net.nodes[i].id
                    )));
                }
            }
        }
        self.net.egress = (0..n)
            .map(|i| {
                self.pending_commodities
                    .iter()
                    .map(|p| {
                        self.egress_by_commodity[i]
                            .get(&p.id)
                            .copied()
                            .or(self.egress_default[i])
                            .unwrap_or_else(T::zero)
                    })
                    .collect()
            })
            .collect();
        let mut commodities = Vec::with_capacity(c);
        for p in std::mem::take(&mut self.pending_commodities) {
            let mut arrivals = BTreeMap::new();
            for (node, sched) in p.arrivals {
                arrivals.insert(self.index(&node)?, sched);
            }
            let buffer_mode = if p.shared {
                BufferMode::Shared
            } else {
                let mut allocations = BTreeMap::new();
                for (node, b) in p.allocations {
                    allocations.insert(self.index(&node)?, b);
                }
                BufferMode::PerCommodity { allocations }
            };
            commodities.push(Commodity {
                id: p.id,
                arrivals,
                buffer_mode,
            });
        }
        self.net.commodities = commodities;
        Ok(self.net)
    }
}

impl<T: Scalar> NetworkInstance<T> {
    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn links(&self) -> &[Link<T>] {
        &self.links
    }

    pub fn commodities(&self) -> &[Commodity<T>] {
        &self.commodities
    }

    pub fn commodities_mut(&mut self) -> &mut [Commodity<T>] {
        &mut self.commodities
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn commodity_count(&self) -> usize {
        self.commodities.len()
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.node_index.get(id).copied()
    }

    pub fn commodity_index(&self, id: &str) -> Option<usize> {
        self.commodities.iter().position(|c| c.id == id)
    }

    /// Egress capacity `μ_i^(l)`.
    pub fn egress(&self, node: usize, commodity: usize) -> T {
        self.egress[node][commodity]
    }

    pub fn set_egress(&mut self, node: usize, commodity: usize, mu: T) {
        self.egress[node][commodity] = mu;
    }

    pub fn set_link_capacity(&mut self, link: usize, capacity: T) {
        self.links[link].capacity = capacity;
    }

    pub fn set_buffer(&mut self, node: usize, buffer: Buffer<T>) {
        self.nodes[node].buffer = buffer;
    }

    pub fn out_links(&self, node: usize) -> impl Iterator<Item = (usize, &Link<T>)> {
        self.links.iter().enumerate().filter(move |(_, l)| l.from == node)
    }

    pub fn in_links(&self, node: usize) -> impl Iterator<Item = (usize, &Link<T>)> {
        self.links.iter().enumerate().filter(move |(_, l)| l.to == node)
    }

    /// Stationary (final-segment) arrival rate of `commodity` at `node`.
    pub fn stationary_arrival(&self, node: usize, commodity: usize) -> T {
        self.commodities[commodity]
            .arrivals
            .get(&node)
            .map_or(T::zero(), ArrivalSchedule::stationary_rate)
    }

    pub fn total_arrival(&self, commodity: usize) -> T {
        self.commodities[commodity]
            .arrivals
            .values()
            .map(ArrivalSchedule::stationary_rate)
            .sum()
    }

    pub fn total_egress_capacity(&self, commodity: usize) -> T {
        (0..self.nodes.len()).map(|i| self.egress[i][commodity]).sum()
    }

    /// Sets the stationary arrival total of a commodity, keeping the split across its
    /// source nodes proportional (uniform when all current rates are zero).
    pub fn set_total_arrival(&mut self, commodity: usize, total: T) -> Result<()> {
        let com = self
            .commodities
            .get_mut(commodity)
            .ok_or_else(|| Error::UnknownCommodity(commodity.to_string()))?;
        if com.arrivals.is_empty() {
            return Err(Error::InvalidParameter(format!(
                "commodity `{}` has no arrival nodes",
                com.id
            )));
        }
        let current: T = com.arrivals.values().map(ArrivalSchedule::stationary_rate).sum();
        let k = T::of_usize(com.arrivals.len());
        for sched in com.arrivals.values_mut() {
            let share = if current > T::zero() {
                sched.stationary_rate() / current
            } else {
                T::one() / k
            };
            sched.set_stationary_rate(total * share);
        }
        Ok(())
    }

    /// Topological order of the node indices, or `None` if the graph has a cycle.
    pub fn topological_order(&self) -> Option<Vec<usize>> {
        let n = self.nodes.len();
        let mut indeg = vec![0usize; n];
        for l in &self.links {
            indeg[l.to] += 1;
        }
        let mut queue: VecDeque<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(u) = queue.pop_front() {
            order.push(u);
            for l in self.links.iter().filter(|l| l.from == u) {
                indeg[l.to] -= 1;
                if indeg[l.to] == 0 {
                    queue.push_back(l.to);
                }
            }
        }
        (order.len() == n).then_some(order)
    }

    fn find_cycle(&self) -> Option<Vec<usize>> {
        let n = self.nodes.len();
        // 0 = unvisited, 1 = on stack, 2 = done
        let mut state = vec![0u8; n];
        let mut parent = vec![usize::MAX; n];
        for root in 0..n {
            if state[root] != 0 {
                continue;
            }
            let mut stack = vec![(root, 0usize)];
            state[root] = 1;
            while let Some(&mut (u, ref mut next)) = stack.last_mut() {
                let succ: Vec<usize> = self
                    .links
                    .iter()
                    .filter(|l| l.from == u)
                    .map(|l| l.to)
                    .collect();
                if *next < succ.len() {
                    let v = succ[*next];
                    *next += 1;
                    match state[v] {
                        0 => {
                            state[v] = 1;
                            parent[v] = u;
                            stack.push((v, 0));
                        }
                        1 => {
                            let mut cycle = vec![v];
                            let mut w = u;
                            while w != v {
                                cycle.push(w);
                                w = parent[w];
                            }
                            cycle.push(v);
                            cycle.reverse();
                            return Some(cycle);
                        }
                        _ => {}
                    }
                } else {
                    state[u] = 2;
                    stack.pop();
                }
            }
        }
        None
    }

    /// Nodes on the available paths of a commodity: reachable from one of its arrival
    /// nodes and able to reach one of its egress nodes. Sorted by node index.
    pub fn commodity_nodes(&self, commodity: usize) -> Vec<usize> {
        let n = self.nodes.len();
        let mut fwd = vec![false; n];
        let mut queue: VecDeque<usize> = self.commodities[commodity].arrivals.keys().copied().collect();
        for &s in &queue {
            fwd[s] = true;
        }
        while let Some(u) = queue.pop_front() {
            for l in self.links.iter().filter(|l| l.from == u) {
                if !fwd[l.to] {
                    fwd[l.to] = true;
                    queue.push_back(l.to);
                }
            }
        }
        let mut bwd = vec![false; n];
        let mut queue: VecDeque<usize> = (0..n)
            .filter(|&i| self.egress[i][commodity] > T::zero())
            .collect();
        for &s in &queue {
            bwd[s] = true;
        }
        while let Some(u) = queue.pop_front() {
            for l in self.links.iter().filter(|l| l.to == u) {
                if !bwd[l.from] {
                    bwd[l.from] = true;
                    queue.push_back(l.from);
                }
            }
        }
        (0..n).filter(|&i| fwd[i] && bwd[i]).collect()
    }

    /// Checks every modelling assumption and lists all violations.
    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        if let Some(cycle) = self.find_cycle() {
            violations.push(Violation::Cycle {
                path: cycle.iter().map(|&i| self.nodes[i].id.clone()).collect(),
            });
        }
        for l in &self.links {
            if l.from == l.to {
                continue;
            }
            if !(l.capacity > T::zero()) {
                violations.push(Violation::NonPositiveCapacity {
                    from: self.nodes[l.from].id.clone(),
                    to: self.nodes[l.to].id.clone(),
                    capacity: l.capacity.as_f64(),
                });
            }
        }
        for node in &self.nodes {
            if let Buffer::Finite(b) = node.buffer {
                if !(b > T::zero()) {
                    violations.push(Violation::NonPositiveBuffer {
                        node: node.id.clone(),
                        buffer: b.as_f64(),
                    });
                }
            }
        }
        for (ci, com) in self.commodities.iter().enumerate() {
            for i in 0..self.nodes.len() {
                if self.egress[i][ci] < T::zero() || !self.egress[i][ci].is_finite() {
                    violations.push(Violation::NegativeEgress {
                        node: self.nodes[i].id.clone(),
                        commodity: com.id.clone(),
                    });
                }
            }
            if !(0..self.nodes.len()).any(|i| self.egress[i][ci] > T::zero()) {
                violations.push(Violation::NoEgress {
                    commodity: com.id.clone(),
                });
            }
            let reachable = self.commodity_nodes(ci);
            for (&node, sched) in &com.arrivals {
                let negative = sched.segments().iter().any(|&(_, r)| r < T::zero() || !r.is_finite());
                if negative {
                    violations.push(Violation::NegativeArrival {
                        node: self.nodes[node].id.clone(),
                        commodity: com.id.clone(),
                    });
                }
                let positive = sched.segments().iter().any(|&(_, r)| r > T::zero());
                if positive && !self.nodes[node].buffer.is_unbounded() {
                    violations.push(Violation::BoundedSource {
                        node: self.nodes[node].id.clone(),
                        commodity: com.id.clone(),
                    });
                }
                if !reachable.contains(&node) && self.egress.iter().any(|e| e[ci] > T::zero()) {
                    violations.push(Violation::StrandedArrival {
                        node: self.nodes[node].id.clone(),
                        commodity: com.id.clone(),
                    });
                }
            }
            if let BufferMode::PerCommodity { allocations } = &com.buffer_mode {
                for (&node, &b) in allocations {
                    if !(b > T::zero()) {
                        violations.push(Violation::NonPositiveAllocation {
                            node: self.nodes[node].id.clone(),
                            commodity: com.id.clone(),
                        });
                    }
                }
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let Buffer::Finite(b) = node.buffer {
                let total: T = self
                    .commodities
                    .iter()
                    .filter_map(|c| match &c.buffer_mode {
                        BufferMode::PerCommodity { allocations } => allocations.get(&i).copied(),
                        BufferMode::Shared => None,
                    })
                    .sum();
                if total > b * (T::one() + T::of(1e-12)) {
                    violations.push(Violation::AllocationExceedsBuffer {
                        node: node.id.clone(),
                        total: total.as_f64(),
                        buffer: b.as_f64(),
                    });
                }
            }
        }
        ValidationReport {
            violations,
            index_map: self.index_map(),
        }
    }

    /// Dense index ↔ string id mapping of the nodes.
    pub fn index_map(&self) -> Vec<NodeIndexEntry> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| NodeIndexEntry {
                index: i,
                id: n.id.clone(),
            })
            .collect()
    }

    /// Converts the parameters to another scalar type.
    pub fn cast<U: Scalar>(&self) -> NetworkInstance<U> {
        let c = |x: T| U::of(x.as_f64());
        NetworkInstance {
            nodes: self
                .nodes
                .iter()
                .map(|n| Node {
                    id: n.id.clone(),
                    buffer: match n.buffer {
                        Buffer::Finite(b) => Buffer::Finite(c(b)),
                        Buffer::Unbounded => Buffer::Unbounded,
                    },
                })
                .collect(),
            links: self
                .links
                .iter()
                .map(|l| Link {
                    from: l.from,
                    to: l.to,
                    capacity: c(l.capacity),
                })
                .collect(),
            egress: self.egress.iter().map(|row| row.iter().map(|&x| c(x)).collect()).collect(),
            commodities: self
                .commodities
                .iter()
                .map(|com| Commodity {
                    id: com.id.clone(),
                    arrivals: com
                        .arrivals
                        .iter()
                        .map(|(&k, s)| {
                            (
                                k,
                                ArrivalSchedule {
                                    segments: s.segments.iter().map(|&(a, b)| (c(a), c(b))).collect(),
                                },
                            )
                        })
                        .collect(),
                    buffer_mode: match &com.buffer_mode {
                        BufferMode::Shared => BufferMode::Shared,
                        BufferMode::PerCommodity { allocations } => BufferMode::PerCommodity {
                            allocations: allocations.iter().map(|(&k, &v)| (k, c(v))).collect(),
                        },
                    },
                })
                .collect(),
            node_index: self.node_index.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeIndexEntry {
    pub index: usize,
    pub id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    Cycle { path: Vec<String> },
    NonPositiveCapacity { from: String, to: String, capacity: f64 },
    NonPositiveBuffer { node: String, buffer: f64 },
    NonPositiveAllocation { node: String, commodity: String },
    BoundedSource { node: String, commodity: String },
    NoEgress { commodity: String },
    NegativeEgress { node: String, commodity: String },
    NegativeArrival { node: String, commodity: String },
    StrandedArrival { node: String, commodity: String },
    AllocationExceedsBuffer { node: String, total: f64, buffer: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Cycle { path } => write!(f, "cycle: {}", path.join("→")),
            Violation::NonPositiveCapacity { from, to, capacity } => {
                write!(f, "nonpositive capacity {capacity} on link {from}→{to}")
            }
            Violation::NonPositiveBuffer { node, buffer } => {
                write!(f, "nonpositive buffer {buffer} at node {node}")
            }
            Violation::NonPositiveAllocation { node, commodity } => {
                write!(f, "nonpositive allocation for commodity {commodity} at node {node}")
            }
            Violation::BoundedSource { node, commodity } => write!(
                f,
                "source node {node} of commodity {commodity} has a finite buffer (sources must be unbounded)"
            ),
            Violation::NoEgress { commodity } => {
                write!(f, "commodity {commodity} has no egress node")
            }
            Violation::NegativeEgress { node, commodity } => {
                write!(f, "negative egress capacity at node {node} for commodity {commodity}")
            }
            Violation::NegativeArrival { node, commodity } => {
                write!(f, "negative arrival rate at node {node} for commodity {commodity}")
            }
            Violation::StrandedArrival { node, commodity } => write!(
                f,
                "arrivals of commodity {commodity} at node {node} cannot reach any of its egress nodes"
            ),
            Violation::AllocationExceedsBuffer { node, total, buffer } => write!(
                f,
                "per-commodity allocations {total} exceed buffer {buffer} at node {node}"
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    pub index_map: Vec<NodeIndexEntry>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has_cycle(&self) -> bool {
        self.violations.iter().any(|v| matches!(v, Violation::Cycle { .. }))
    }
}

/// One state coordinate `q_i^(l)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Coord {
    pub node: usize,
    pub commodity: usize,
}

/// Buffer gate of a coordinate: the capacity it competes for and the coordinates occupying it.
#[derive(Debug, Clone, PartialEq)]
pub struct Gate<T> {
    pub node: usize,
    /// `None` for unbounded buffers.
    pub capacity: Option<T>,
    pub members: Vec<usize>,
}

/// A link as seen by one commodity.
#[derive(Debug, Clone, PartialEq)]
pub struct CommodityLink<T> {
    pub link: usize,
    pub commodity: usize,
    pub from: usize,
    pub to: usize,
    /// Capacity available to this commodity (the link capacity split equally among
    /// the commodities routed over it).
    pub capacity: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EgressPort<T> {
    pub coord: usize,
    pub node: usize,
    pub commodity: usize,
    pub capacity: T,
}

/// Dense indexing of the state vector and the structural data every evaluation needs.
///
/// Coordinates are grouped by commodity (block `l` occupies `blocks[l]`), each block
/// sorted by node index.
#[derive(Debug, Clone, PartialEq)]
pub struct StateLayout<T> {
    pub coords: Vec<Coord>,
    pub blocks: Vec<Range<usize>>,
    pub links: Vec<CommodityLink<T>>,
    pub egress: Vec<EgressPort<T>>,
    pub gates: Vec<Gate<T>>,
    /// Gate index of every coordinate.
    pub coord_gate: Vec<usize>,
    lookup: HashMap<(usize, usize), usize>,
}

impl<T: Scalar> StateLayout<T> {
    pub fn new(net: &NetworkInstance<T>) -> Self {
        let mut coords = Vec::new();
        let mut blocks = Vec::new();
        let mut lookup = HashMap::new();
        for c in 0..net.commodity_count() {
            let start = coords.len();
            for node in net.commodity_nodes(c) {
                lookup.insert((node, c), coords.len());
                coords.push(Coord { node, commodity: c });
            }
            blocks.push(start..coords.len());
        }
        let mut links = Vec::new();
        for (li, l) in net.links().iter().enumerate() {
            let users: Vec<(usize, usize, usize)> = (0..net.commodity_count())
                .filter_map(|c| Some((c, *lookup.get(&(l.from, c))?, *lookup.get(&(l.to, c))?)))
                .collect();
            let share = T::one() / T::of_usize(users.len().max(1));
            for (c, from, to) in users {
                links.push(CommodityLink {
                    link: li,
                    commodity: c,
                    from,
                    to,
                    capacity: l.capacity * share,
                });
            }
        }
        let egress = coords
            .iter()
            .enumerate()
            .filter_map(|(k, co)| {
                let mu = net.egress(co.node, co.commodity);
                (mu > T::zero()).then_some(EgressPort {
                    coord: k,
                    node: co.node,
                    commodity: co.commodity,
                    capacity: mu,
                })
            })
            .collect();
        let allocations = resolve_allocations(net, &lookup);
        let mut gates = Vec::new();
        let mut coord_gate = vec![usize::MAX; coords.len()];
        for node in 0..net.node_count() {
            let here: Vec<usize> = (0..net.commodity_count())
                .filter_map(|c| lookup.get(&(node, c)).copied())
                .collect();
            let buffer = net.nodes()[node].buffer.finite();
            let mut shared_members = Vec::new();
            for &k in &here {
                let c = coords[k].commodity;
                if net.commodities()[c].buffer_mode.is_shared() {
                    shared_members.push(k);
                } else {
                    coord_gate[k] = gates.len();
                    gates.push(Gate {
                        node,
                        capacity: buffer.map(|_| allocations[&(node, c)]),
                        members: vec![k],
                    });
                }
            }
            if !shared_members.is_empty() {
                let reserved: T = net
                    .commodities()
                    .iter()
                    .enumerate()
                    .filter(|(_, com)| !com.buffer_mode.is_shared())
                    .filter_map(|(c, _)| allocations.get(&(node, c)).copied())
                    .sum();
                for &k in &shared_members {
                    coord_gate[k] = gates.len();
                }
                gates.push(Gate {
                    node,
                    capacity: buffer.map(|b| b - reserved),
                    members: shared_members,
                });
            }
        }
        Self {
            coords,
            blocks,
            links,
            egress,
            gates,
            coord_gate,
            lookup,
        }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn index_of(&self, node: usize, commodity: usize) -> Option<usize> {
        self.lookup.get(&(node, commodity)).copied()
    }

    pub fn gate_of(&self, coord: usize) -> &Gate<T> {
        &self.gates[self.coord_gate[coord]]
    }

    /// Per-coordinate upper bound (`None` when unbounded).
    pub fn upper(&self, coord: usize) -> Option<T> {
        self.gate_of(coord).capacity
    }

    /// Human-readable index map entries `(index, node id, commodity id)`.
    pub fn index_map(&self, net: &NetworkInstance<T>) -> Vec<StateIndexEntry> {
        self.coords
            .iter()
            .enumerate()
            .map(|(k, c)| StateIndexEntry {
                index: k,
                node: net.nodes()[c.node].id.clone(),
                commodity: net.commodities()[c.commodity].id.clone(),
            })
            .collect()
    }

    pub fn label(&self, net: &NetworkInstance<T>, coord: usize) -> String {
        let c = self.coords[coord];
        format!(
            "q_{}_{}",
            net.nodes()[c.node].id,
            net.commodities()[c.commodity].id
        )
    }
}

fn resolve_allocations<T: Scalar>(
    net: &NetworkInstance<T>,
    lookup: &HashMap<(usize, usize), usize>,
) -> HashMap<(usize, usize), T> {
    let mut out = HashMap::new();
    for node in 0..net.node_count() {
        let Some(b) = net.nodes()[node].buffer.finite() else {
            continue;
        };
        let present: Vec<usize> = (0..net.commodity_count())
            .filter(|&c| lookup.contains_key(&(node, c)))
            .collect();
        let mut explicit = T::zero();
        let mut defaults = Vec::new();
        let mut any_shared = false;
        for &c in &present {
            match &net.commodities()[c].buffer_mode {
                BufferMode::PerCommodity { allocations } => match allocations.get(&node) {
                    Some(&a) => {
                        explicit = explicit + a;
                        out.insert((node, c), a);
                    }
                    None => defaults.push(c),
                },
                BufferMode::Shared => any_shared = true,
            }
        }
        if !defaults.is_empty() {
            let parts = defaults.len() + usize::from(any_shared);
            let share = ((b - explicit) / T::of_usize(parts)).max(T::zero());
            for c in defaults {
                out.insert((node, c), share);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StateIndexEntry {
    pub index: usize,
    pub node: String,
    pub commodity: String,
}

/// Queue-length vector at a time instant.
#[derive(Debug, Clone, PartialEq)]
pub struct QueueState<T> {
    pub q: Vec<T>,
    pub t: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoordBound<T> {
    pub lower: T,
    pub upper: T,
    /// Upper bound is the sampling cap standing in for an unbounded buffer.
    pub truncated: bool,
}

/// Shared-buffer simplex constraint `Σ_p q_i^(p) ≤ capacity`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SharedConstraint<T> {
    pub node: usize,
    pub coords: Vec<usize>,
    pub capacity: T,
}

/// Feasible queue region: a box (unbounded coordinates truncated at the sampling cap)
/// intersected with the shared-buffer simplices.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeasibleRegion<T> {
    pub bounds: Vec<CoordBound<T>>,
    pub shared: Vec<SharedConstraint<T>>,
    pub sampling_cap: T,
}

/// The feasible region of a valid network.
pub fn feasible_box<T: Scalar>(net: &NetworkInstance<T>, sampling_cap: T) -> Result<FeasibleRegion<T>> {
    let report = net.validate();
    if !report.is_valid() {
        let msgs: Vec<String> = report.violations.iter().map(ToString::to_string).collect();
        return Err(Error::InvalidNetwork(msgs.join("; ")));
    }
    Ok(FeasibleRegion::from_layout(&StateLayout::new(net), sampling_cap))
}

impl<T: Scalar> FeasibleRegion<T> {
    pub fn from_layout(layout: &StateLayout<T>, sampling_cap: T) -> Self {
        let bounds = (0..layout.dim())
            .map(|k| match layout.upper(k) {
                Some(u) => CoordBound {
                    lower: T::zero(),
                    upper: u,
                    truncated: false,
                },
                None => CoordBound {
                    lower: T::zero(),
                    upper: sampling_cap,
                    truncated: true,
                },
            })
            .collect();
        let shared = layout
            .gates
            .iter()
            .filter(|g| g.members.len() > 1)
            .filter_map(|g| {
                g.capacity.map(|cap| SharedConstraint {
                    node: g.node,
                    coords: g.members.clone(),
                    capacity: cap,
                })
            })
            .collect();
        Self {
            bounds,
            shared,
            sampling_cap,
        }
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn is_truncated(&self) -> bool {
        self.bounds.iter().any(|b| b.truncated)
    }

    /// Membership with absolute tolerance; truncated coordinates are only bounded below.
    pub fn contains(&self, q: &[T], tol: T) -> bool {
        if q.len() != self.bounds.len() {
            return false;
        }
        let box_ok = q.iter().zip(&self.bounds).all(|(&x, b)| {
            x.is_finite() && x >= b.lower - tol && (b.truncated || x <= b.upper + tol)
        });
        box_ok
            && self
                .shared
                .iter()
                .all(|s| s.coords.iter().map(|&k| q[k]).sum::<T>() <= s.capacity + tol)
    }

    /// Largest violation of the constraints (0 when feasible).
    pub fn violation(&self, q: &[T]) -> T {
        let mut v = T::zero();
        for (&x, b) in q.iter().zip(&self.bounds) {
            v = v.max(b.lower - x);
            if !b.truncated {
                v = v.max(x - b.upper);
            }
        }
        for s in &self.shared {
            let tot: T = s.coords.iter().map(|&k| q[k]).sum();
            v = v.max(tot - s.capacity);
        }
        v
    }

    /// Projects onto the region: clip to the box, then scale overshooting shared
    /// groups proportionally. Returns the largest single-coordinate change.
    pub fn clamp(&self, q: &mut [T]) -> T {
        let mut moved = T::zero();
        for (x, b) in q.iter_mut().zip(&self.bounds) {
            let mut y = x.max(b.lower);
            if !b.truncated {
                y = y.min(b.upper);
            }
            moved = moved.max((y - *x).abs());
            *x = y;
        }
        for s in &self.shared {
            let tot: T = s.coords.iter().map(|&k| q[k]).sum();
            if tot > s.capacity && tot > T::zero() {
                let f = s.capacity / tot;
                for &k in &s.coords {
                    let y = q[k] * f;
                    moved = moved.max((q[k] - y).abs());
                    q[k] = y;
                }
            }
        }
        moved
    }

    pub fn center(&self) -> Vec<T> {
        let mut c: Vec<T> = self
            .bounds
            .iter()
            .map(|b| T::half() * (b.lower + b.upper))
            .collect();
        self.clamp(&mut c);
        c
    }

    /// Uniform sample from the (truncated) region by rejection, falling back to
    /// proportional scaling after 64 rejected draws.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<T> {
        for _ in 0..64 {
            let q = self.sample_box(rng);
            if self.contains(&q, T::zero()) {
                return q;
            }
        }
        let mut q = self.sample_box(rng);
        self.clamp(&mut q);
        q
    }

    fn sample_box<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<T> {
        self.bounds
            .iter()
            .map(|b| b.lower + (b.upper - b.lower) * T::of(rng.gen::<f64>()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain() -> NetworkInstance<f64> {
        NetworkBuilder::new()
            .node("1", Buffer::Unbounded)
            .unwrap()
            .node("2", Buffer::Finite(5.0))
            .unwrap()
            .link("1", "2", 2.0)
            .unwrap()
            .egress("2", 2.0)
            .unwrap()
            .commodity("c", &[("1", 1.0)], false)
            .unwrap()
            .build()
            .unwrap()
    }

    #[test]
    fn two_node_chain_is_valid() {
        assert!(chain().validate().is_valid());
    }

    #[test]
    fn two_cycle_is_reported() {
        let net = NetworkBuilder::new()
            .node("1", Buffer::Unbounded)
            .unwrap()
            .node("2", Buffer::Finite(5.0))
            .unwrap()
            .link("1", "2", 2.0)
            .unwrap()
            .link("2", "1", 2.0)
            .unwrap()
            .egress("2", 2.0)
            .unwrap()
            .commodity("c", &[("1", 1.0)], false)
            .unwrap()
            .build()
            .unwrap();
        let report = net.validate();
        assert!(report.has_cycle());
        let msg = report.violations.iter().find(|v| matches!(v, Violation::Cycle { .. })).unwrap().to_string();
        assert_eq!(msg, "cycle: 1→2→1");
    }

    #[test]
    fn every_violation_is_listed() {
        let net = NetworkBuilder::new()
            .node("s", Buffer::Finite(3.0))
            .unwrap()
            .node("t", Buffer::Finite(-1.0))
            .unwrap()
            .link("s", "t", 0.0)
            .unwrap()
            .commodity("c", &[("s", 1.0)], false)
            .unwrap()
            .build()
            .unwrap();
        let v = net.validate().violations;
        assert!(v.iter().any(|v| matches!(v, Violation::NonPositiveCapacity { .. })));
        assert!(v.iter().any(|v| matches!(v, Violation::NonPositiveBuffer { .. })));
        assert!(v.iter().any(|v| matches!(v, Violation::BoundedSource { .. })));
        assert!(v.iter().any(|v| matches!(v, Violation::NoEgress { .. })));
    }

    #[test]
    fn single_node_box_and_truncation() {
        let net = NetworkBuilder::<f64>::new()
            .node("K", Buffer::Finite(6.0))
            .unwrap()
            .egress("K", 1.0)
            .unwrap()
            .commodity("c", &[("K", 0.0)], false)
            .unwrap()
            .build()
            .unwrap();
        let r = feasible_box(&net, 100.0).unwrap();
        assert_eq!(r.bounds, vec![CoordBound { lower: 0.0, upper: 6.0, truncated: false }]);

        let r = feasible_box(&chain(), 100.0).unwrap();
        assert_eq!(r.bounds[0], CoordBound { lower: 0.0, upper: 100.0, truncated: true });
        assert!(r.is_truncated());
    }

    #[test]
    fn shared_buffer_adds_simplex_constraint() {
        let net = NetworkBuilder::<f64>::new()
            .node("K", Buffer::Finite(6.0))
            .unwrap()
            .egress("K", 1.0)
            .unwrap()
            .commodity("a", &[("K", 0.0)], true)
            .unwrap()
            .commodity("b", &[("K", 0.0)], true)
            .unwrap()
            .build()
            .unwrap();
        let r = feasible_box(&net, 100.0).unwrap();
        assert_eq!(r.bounds.len(), 2);
        assert!(r.bounds.iter().all(|b| b.upper == 6.0 && !b.truncated));
        assert_eq!(r.shared.len(), 1);
        assert_eq!(r.shared[0].coords, vec![0, 1]);
        assert_eq!(r.shared[0].capacity, 6.0);
        let mut q = vec![5.0, 3.0];
        r.clamp(&mut q);
        assert!((q[0] + q[1] - 6.0).abs() < 1e-12);
        assert!((q[0] / q[1] - 5.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_network_rejected_by_feasible_box() {
        let net = NetworkBuilder::<f64>::new()
            .node("K", Buffer::Finite(6.0))
            .unwrap()
            .commodity("c", &[("K", 0.0)], false)
            .unwrap()
            .build()
            .unwrap();
        assert!(matches!(feasible_box(&net, 100.0), Err(Error::InvalidNetwork(_))));
    }

    #[test]
    fn schedule_uses_last_segment_for_stationary_rate() {
        let s = ArrivalSchedule::piecewise(vec![(10.0, 3.0), (0.0, 1.0)]).unwrap();
        assert_eq!(s.rate_at(5.0), 1.0);
        assert_eq!(s.rate_at(10.0), 3.0);
        assert_eq!(s.stationary_rate(), 3.0);
    }

    #[test]
    fn per_commodity_allocations_default_to_equal_shares() {
        let net = NetworkBuilder::<f64>::new()
            .node("K", Buffer::Finite(6.0))
            .unwrap()
            .egress("K", 1.0)
            .unwrap()
            .commodity_with("a", vec![("K".into(), ArrivalSchedule::constant(0.0))], false, vec![("K".into(), 4.0)])
            .unwrap()
            .commodity("b", &[("K", 0.0)], false)
            .unwrap()
            .build()
            .unwrap();
        let layout = StateLayout::new(&net);
        assert_eq!(layout.upper(0), Some(4.0));
        assert_eq!(layout.upper(1), Some(2.0));
    }
}
