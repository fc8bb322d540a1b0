#![allow(dead_code)]

use milodo::graph::{build_topology, ring_gossip_weights, GossipMatrix, Topology, TopologyKind};
use milodo::problems::{centralized_solve, gen_lasso, Optimizee, ProblemShape, SolutionOracle};

pub fn ring(n: usize) -> Topology {
    build_topology(&TopologyKind::Ring, n, 0).unwrap()
}

pub fn ring_w(t: &Topology) -> GossipMatrix<f64> {
    ring_gossip_weights(t).unwrap()
}

pub fn lasso(n: usize, d: usize, samples: usize, lambda: f64, seed: u64) -> Optimizee<f64> {
    gen_lasso(ProblemShape::new(n, d, samples, lambda), seed).unwrap()
}

pub fn oracle(opt: &Optimizee<f64>) -> SolutionOracle {
    centralized_solve(opt, 1e-12, 200_000).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
