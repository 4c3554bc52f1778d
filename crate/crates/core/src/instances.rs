//! Ready-made networks: the two-source shared-buffer example, small chains and
//! seeded random DAGs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::casestudy::OneHopSharedConfig;
use crate::error::Result;
use crate::network::{Buffer, NetworkBuilder, NetworkInstance};

/// Two sources feeding `K` (buffer 6) with `c_1K = 6`, `c_2K = 4.5`, `μ_1 = 2`, `μ_2 = 3`.
pub fn fig1_config(lambda1: f64, lambda2: f64) -> OneHopSharedConfig<f64> {
    OneHopSharedConfig {
        capacity: vec![6.0, 4.5],
        mu: vec![2.0, 3.0],
        lambda: vec![lambda1, lambda2],
        buffer: 6.0,
    }
}

pub fn fig1(lambda1: f64, lambda2: f64) -> Result<NetworkInstance<f64>> {
    fig1_config(lambda1, lambda2).to_network()
}

/// Unbounded source `s` linked to a finite node `k` that drains at rate `mu`.
pub fn chain2(lambda: f64, capacity: f64, mu: f64, buffer: f64) -> Result<NetworkInstance<f64>> {
    NetworkBuilder::new()
        .node("s", Buffer::Unbounded)?
        .node("k", Buffer::Finite(buffer))?
        .link("s", "k", capacity)?
        .egress("k", mu)?
        .commodity("x", &[("s", lambda)], false)?
        .build()
}

/// Path `0 → 1 → … → n−1` with unit capacities, egress `mu` at the tail.
pub fn line(n: usize, lambda: f64, buffer: f64, mu: f64) -> Result<NetworkInstance<f64>> {
    let mut b = NetworkBuilder::new();
    for i in 0..n {
        let buf = if i == 0 { Buffer::Unbounded } else { Buffer::Finite(buffer) };
        b = b.node(&i.to_string(), buf)?;
    }
    for i in 1..n {
        b = b.link(&(i - 1).to_string(), &i.to_string(), 1.0)?;
    }
    b.egress(&(n - 1).to_string(), mu)?
        .commodity("x", &[("0", lambda)], false)?
        .build()
}

/// Seeded single-commodity DAG on `n` nodes.
///
/// Roots are unbounded sources with positive arrivals, every other buffer lies in
/// `[15, 25]`, and each node's drain capacity `Σ_out c + μ` is at least `1.2` times its
/// inflow bound `λ + Σ_in c`. Sinks always egress.
pub fn random_dag(seed: u64, n: usize) -> Result<NetworkInstance<f64>> {
    let n = n.max(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let edges = loop {
        let mut edges = Vec::new();
        for j in 1..n {
            let mut parents: Vec<usize> = (0..j).filter(|_| rng.gen_bool(0.25)).collect();
            if parents.is_empty() && rng.gen_bool(0.85) {
                parents.push(rng.gen_range(0..j));
            }
            edges.extend(parents.into_iter().map(|i| (i, j)));
        }
        if weakly_connected(n, &edges) {
            break edges;
        }
    };
    let has_in = |j: usize| edges.iter().any(|&(_, t)| t == j);
    let has_out = |i: usize| edges.iter().any(|&(f, _)| f == i);
    let caps: Vec<f64> = edges.iter().map(|_| rng.gen_range(0.5..2.0)).collect();
    let mut lambda = vec![0.0; n];
    let mut mu = vec![0.0; n];
    let mut b = NetworkBuilder::new();
    for i in 0..n {
        let buf = if has_in(i) {
            Buffer::Finite(rng.gen_range(15.0..25.0))
        } else {
            lambda[i] = rng.gen_range(0.2..1.0);
            Buffer::Unbounded
        };
        b = b.node(&i.to_string(), buf)?;
        if !has_out(i) || rng.gen_bool(0.2) {
            mu[i] = rng.gen_range(0.5..2.0);
        }
    }
    for i in 0..n {
        let inflow = lambda[i] + edges.iter().zip(&caps).filter(|(e, _)| e.1 == i).map(|(_, c)| c).sum::<f64>();
        let out: f64 = edges.iter().zip(&caps).filter(|(e, _)| e.0 == i).map(|(_, c)| c).sum();
        if out + mu[i] < 1.2 * inflow {
            mu[i] = 1.2 * inflow - out;
        }
    }
    for ((f, t), c) in edges.iter().zip(&caps) {
        b = b.link(&f.to_string(), &t.to_string(), *c)?;
    }
    for (i, &m) in mu.iter().enumerate() {
        if m > 0.0 {
            b = b.egress(&i.to_string(), m)?;
        }
    }
    let arrivals: Vec<(String, f64)> = (0..n)
        .filter(|&i| lambda[i] > 0.0)
        .map(|i| (i.to_string(), lambda[i]))
        .collect();
    let refs: Vec<(&str, f64)> = arrivals.iter().map(|(s, l)| (s.as_str(), *l)).collect();
    b.commodity("x", &refs, false)?.build()
}

fn weakly_connected(n: usize, edges: &[(usize, usize)]) -> bool {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        p[x] = r;
        r
    }
    for &(a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        parent[ra] = rb;
    }
    let root = find(&mut parent, 0);
    (0..n).all(|i| find(&mut parent, i) == root)
}
