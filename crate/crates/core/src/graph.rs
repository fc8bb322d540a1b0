//! Network topologies and gossip mixing matrices.
//!
//! Nodes are dense `0..n` indices. Edges are stored as sorted `(i, j)` pairs
//! with `i < j`, and every adjacency list is sorted ascending, so iteration
//! order is deterministic everywhere downstream.

use std::collections::VecDeque;
use std::fmt::Write as _;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param, shape, Error, Result};
use crate::scalar::Scalar;

/// Topology family with its kind-specific parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TopologyKind {
    Ring,
    Grid { rows: usize, cols: usize },
    Tree,
    Exponential,
    ErdosRenyi { p: f64 },
    /// Arbitrary edge list; must be connected.
    Custom { edges: Vec<(usize, usize)> },
}

/// Undirected, connected communication graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    n: usize,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
    /// `edge_of[i][s]`: edge index joining `i` and its `s`-th neighbor.
    edge_of: Vec<Vec<usize>>,
    /// `back_slot[i][s]`: position of `i` inside the adjacency list of its `s`-th neighbor.
    back_slot: Vec<Vec<usize>>,
}

impl Topology {
    /// Builds a topology from an edge list, normalizing order and rejecting
    /// self-loops, out-of-range nodes and disconnected graphs.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let topo = Self::from_edges_unchecked(n, edges)?;
        if !validate_connected(&topo) {
            return Err(param(format!("graph on {n} nodes is not connected")));
        }
        Ok(topo)
    }

    /// Same as [`Topology::from_edges`] without the connectivity requirement.
    pub fn from_edges_unchecked(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if n == 0 {
            return Err(param("topology needs at least one node"));
        }
        let mut list = Vec::new();
        for (a, b) in edges {
            if a == b {
                return Err(param(format!("self-loop on node {a}")));
            }
            if a >= n || b >= n {
                return Err(param(format!("edge ({a}, {b}) out of range for n={n}")));
            }
            list.push((a.min(b), a.max(b)));
        }
        list.sort_unstable();
        list.dedup();

        let mut neighbors = vec![Vec::new(); n];
        for &(a, b) in &list {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for adj in &mut neighbors {
            adj.sort_unstable();
        }
        let edge_of = neighbors
            .iter()
            .enumerate()
            .map(|(i, adj)| {
                adj.iter()
                    .map(|&j| list.binary_search(&(i.min(j), i.max(j))).expect("edge present"))
                    .collect()
            })
            .collect();
        let back_slot = neighbors
            .iter()
            .enumerate()
            .map(|(i, adj)| {
                adj.iter()
                    .map(|&j| neighbors[j].binary_search(&i).expect("symmetric adjacency"))
                    .collect()
            })
            .collect();
        Ok(Self { n, edges: list, neighbors, edge_of, back_slot })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    #[inline]
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    #[inline]
    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    #[inline]
    pub fn edge_index(&self, i: usize, slot: usize) -> usize {
        self.edge_of[i][slot]
    }

    #[inline]
    pub fn back_slot(&self, i: usize, slot: usize) -> usize {
        self.back_slot[i][slot]
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        i != j && self.edges.binary_search(&(i.min(j), i.max(j))).is_ok()
    }

    pub fn is_ring(&self) -> bool {
        self.n >= 3 && (0..self.n).all(|i| self.degree(i) == 2) && validate_connected(self)
    }

    /// Hop distance from `src` to every node (`usize::MAX` if unreachable).
    pub fn hop_distances(&self, src: usize) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.n];
        let mut queue = VecDeque::from([src]);
        dist[src] = 0;
        while let Some(u) = queue.pop_front() {
            for &v in &self.neighbors[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// Plain-text edge list: header `n=<count>` then one `i j` pair per line.
    pub fn to_edge_list(&self) -> String {
        let mut s = format!("n={}\n", self.n);
        for &(a, b) in &self.edges {
            let _ = writeln!(s, "{a} {b}");
        }
        s
    }

    pub fn parse_edge_list(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header = lines.next().ok_or_else(|| Error::Format("empty edge list".into()))?;
        let n: usize = header
            .strip_prefix("n=")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::Format(format!("bad header `{header}`, expected n=<count>")))?;
        let mut edges = Vec::new();
        for line in lines {
            let mut it = line.split_whitespace().map(str::parse::<usize>);
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(a)), Some(Ok(b)), None) => edges.push((a, b)),
                _ => return Err(Error::Format(format!("bad edge line `{line}`"))),
            }
        }
        Self::from_edges(n, edges)
    }
}

/// True iff a breadth-first search from node 0 reaches all nodes.
pub fn validate_connected(topology: &Topology) -> bool {
    topology.hop_distances(0).iter().all(|&d| d != usize::MAX)
}

/// Constructs a connected topology of the requested family.
pub fn build_topology(kind: &TopologyKind, n: usize, seed: u64) -> Result<Topology> {
    if n < 2 {
        return Err(param(format!("topology needs n >= 2, got {n}")));
    }
    match kind {
        TopologyKind::Ring => Topology::from_edges(n, (0..n).map(|i| (i, (i + 1) % n))),
        TopologyKind::Grid { rows, cols } => {
            if rows * cols != n || *rows == 0 || *cols == 0 {
                return Err(param(format!("grid {rows}x{cols} does not cover n={n} nodes")));
            }
            let mut edges = Vec::new();
            for r in 0..*rows {
                for c in 0..*cols {
                    let id = r * cols + c;
                    if c + 1 < *cols {
                        edges.push((id, id + 1));
                    }
                    if r + 1 < *rows {
                        edges.push((id, id + cols));
                    }
                }
            }
            Topology::from_edges(n, edges)
        }
        TopologyKind::Tree => Topology::from_edges(n, (1..n).map(|i| ((i - 1) / 2, i))),
        TopologyKind::Exponential => {
            let mut edges = Vec::new();
            let mut hop = 1;
            while hop < n {
                for i in 0..n {
                    edges.push((i, (i + hop) % n));
                    edges.push((i, (i + n - hop) % n));
                }
                hop *= 2;
            }
            Topology::from_edges(n, edges.into_iter().filter(|(a, b)| a != b))
        }
        TopologyKind::ErdosRenyi { p } => {
            if !(*p > 0.0 && *p <= 1.0) {
                return Err(param(format!("edge probability {p} outside (0, 1]")));
            }
            let mut s = seed;
            loop {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let mut edges = Vec::new();
                for i in 0..n {
                    for j in i + 1..n {
                        if rng.random::<f64>() < *p {
                            edges.push((i, j));
                        }
                    }
                }
                let topo = Topology::from_edges_unchecked(n, edges)?;
                if validate_connected(&topo) {
                    return Ok(topo);
                }
                s = s.wrapping_add(1);
            }
        }
        TopologyKind::Custom { edges } => Topology::from_edges(n, edges.iter().copied()),
    }
}

/// Symmetric doubly-stochastic mixing weights supported on a topology.
#[derive(Debug, Clone, PartialEq)]
pub struct GossipMatrix<T> {
    n: usize,
    weights: Vec<T>,
}

impl<T: Scalar> GossipMatrix<T> {
    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.weights[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.weights[i * self.n..(i + 1) * self.n]
    }

    /// Builds from a dense row-major buffer without validation.
    pub fn from_dense(n: usize, weights: Vec<T>) -> Result<Self> {
        if weights.len() != n * n {
            return Err(shape(format!("gossip buffer has {} entries, expected {}", weights.len(), n * n)));
        }
        Ok(Self { n, weights })
    }

    /// Rounds every weight to another scalar type.
    pub fn cast<U: Scalar>(&self) -> GossipMatrix<U> {
        GossipMatrix { n: self.n, weights: self.weights.iter().map(|w| U::lit(w.as_f64())).collect() }
    }

    /// Checks symmetry, nonnegativity, sparsity and unit row/column sums.
    pub fn validate(&self, topology: &Topology, tol: f64) -> Result<()> {
        let n = self.n;
        if n != topology.n() {
            return Err(shape(format!("gossip is {n}x{n}, topology has {} nodes", topology.n())));
        }
        for i in 0..n {
            let mut row = 0.0;
            let mut col = 0.0;
            for j in 0..n {
                let w = self.get(i, j).as_f64();
                if w < 0.0 {
                    return Err(param(format!("negative weight w[{i}][{j}] = {w}")));
                }
                if i != j && w != 0.0 && !topology.has_edge(i, j) {
                    return Err(param(format!("weight on non-edge ({i}, {j})")));
                }
                if w != self.get(j, i).as_f64() {
                    return Err(param(format!("asymmetric weights at ({i}, {j})")));
                }
                row += w;
                col += self.get(j, i).as_f64();
            }
            if (row - 1.0).abs() > tol || (col - 1.0).abs() > tol {
                return Err(param(format!("row/column {i} sums to {row}/{col}")));
            }
        }
        Ok(())
    }
}

fn from_rationals<T: Scalar>(n: usize, weights: &[BigRational]) -> GossipMatrix<T> {
    GossipMatrix {
        n,
        weights: weights.iter().map(|r| T::lit(r.to_f64().expect("weight in range"))).collect(),
    }
}

/// `w_ij = 1/3` for `i = j` or `{i, j}` an edge; requires every degree to be 2.
pub fn ring_gossip_weights<T: Scalar>(topology: &Topology) -> Result<GossipMatrix<T>> {
    if !topology.is_ring() {
        return Err(shape("ring weights need a connected graph with every degree equal to 2"));
    }
    let n = topology.n();
    let third = BigRational::new(BigInt::one(), BigInt::from(3));
    let mut w = vec![BigRational::zero(); n * n];
    for i in 0..n {
        w[i * n + i] = third.clone();
        for &j in topology.neighbors(i) {
            w[i * n + j] = third.clone();
        }
    }
    Ok(from_rationals(n, &w))
}

/// Metropolis–Hastings weights: `w_ij = 1 / (1 + max(deg_i, deg_j))` on edges,
/// diagonal absorbs the remainder. Computed in exact rationals then rounded
/// once, so a ring reproduces [`ring_gossip_weights`] bit for bit.
pub fn metropolis_weights<T: Scalar>(topology: &Topology) -> Result<GossipMatrix<T>> {
    if !validate_connected(topology) {
        return Err(param("metropolis weights need a connected topology"));
    }
    let n = topology.n();
    let mut w = vec![BigRational::zero(); n * n];
    for &(a, b) in topology.edges() {
        let m = 1 + topology.degree(a).max(topology.degree(b));
        let v = BigRational::new(BigInt::one(), BigInt::from(m));
        w[a * n + b] = v.clone();
        w[b * n + a] = v;
    }
    for i in 0..n {
        let off: BigRational = topology.neighbors(i).iter().map(|&j| w[i * n + j].clone()).sum();
        w[i * n + i] = BigRational::one() - off;
    }
    Ok(from_rationals(n, &w))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ring(n: usize) -> Topology {
        build_topology(&TopologyKind::Ring, n, 0).unwrap()
    }

    #[test]
    fn ring_has_n_edges_degree_two() {
        let t = ring(10);
        assert_eq!(t.edges().len(), 10);
        assert!((0..10).all(|i| t.degree(i) == 2));
    }

    #[test]
    fn grid_three_by_three() {
        let t = build_topology(&TopologyKind::Grid { rows: 3, cols: 3 }, 9, 0).unwrap();
        assert_eq!(t.edges().len(), 12);
        for corner in [0, 2, 6, 8] {
            assert_eq!(t.degree(corner), 2);
        }
        assert_eq!(t.degree(4), 4);
    }

    #[test]
    fn grid_bad_dims_rejected() {
        let err = build_topology(&TopologyKind::Grid { rows: 2, cols: 3 }, 9, 0).unwrap_err();
        assert!(matches!(err, Error::Parameter(_)));
    }

    #[test]
    fn n_below_two_rejected() {
        assert!(matches!(build_topology(&TopologyKind::Ring, 1, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn erdos_renyi_probability_checked() {
        assert!(build_topology(&TopologyKind::ErdosRenyi { p: 0.0 }, 5, 0).is_err());
        assert!(build_topology(&TopologyKind::ErdosRenyi { p: 1.5 }, 5, 0).is_err());
    }

    #[test]
    fn erdos_renyi_seed_seven_fixture() {
        let t = build_topology(&TopologyKind::ErdosRenyi { p: 0.3 }, 10, 7).unwrap();
        let expected = [
            (0, 1), (0, 2), (0, 7), (1, 3), (1, 6), (2, 3), (2, 5), (2, 8),
            (2, 9), (3, 4), (3, 7), (3, 8), (5, 7), (5, 8), (8, 9),
        ];
        assert_eq!(t.edges(), &expected);
        assert!(validate_connected(&t));
    }

    #[test]
    fn tree_is_balanced_binary() {
        let t = build_topology(&TopologyKind::Tree, 7, 0).unwrap();
        assert_eq!(t.edges().len(), 6);
        assert_eq!(t.neighbors(0), &[1, 2]);
        assert_eq!(t.neighbors(1), &[0, 3, 4]);
        assert_eq!(t.neighbors(6), &[2]);
    }

    #[test]
    fn exponential_hops() {
        let t = build_topology(&TopologyKind::Exponential, 8, 0).unwrap();
        // hops 1, 2, 4 both directions; +4 and -4 coincide
        assert_eq!(t.neighbors(0), &[1, 2, 4, 6, 7]);
    }

    #[test]
    fn connectivity_checks() {
        assert!(validate_connected(&ring(5)));
        let two_triangles =
            Topology::from_edges_unchecked(6, [(0, 1), (1, 2), (2, 0), (3, 4), (4, 5), (5, 3)]).unwrap();
        assert!(!validate_connected(&two_triangles));
        let isolated = Topology::from_edges_unchecked(3, [(0, 1)]).unwrap();
        assert!(!validate_connected(&isolated));
        assert!(Topology::from_edges(3, [(0, 1)]).is_err());
    }

    #[test]
    fn self_loop_rejected() {
        assert!(Topology::from_edges_unchecked(3, [(1, 1)]).is_err());
    }

    #[test]
    fn ring_weights_thirds() {
        let t = ring(10);
        let w: GossipMatrix<f64> = ring_gossip_weights(&t).unwrap();
        for i in 0..10 {
            let nz: Vec<f64> = w.row(i).iter().copied().filter(|&v| v != 0.0).collect();
            assert_eq!(nz, vec![1.0 / 3.0; 3]);
            assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        w.validate(&t, 1e-12).unwrap();
    }

    #[test]
    fn ring_weights_triangle_full() {
        let w: GossipMatrix<f64> = ring_gossip_weights(&ring(3)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(w.get(i, j), 1.0 / 3.0);
            }
        }
    }

    #[test]
    fn ring_weights_sparse_and_shape_error() {
        let w: GossipMatrix<f64> = ring_gossip_weights(&ring(4)).unwrap();
        assert_eq!(w.get(1, 3), 0.0);
        let tree = build_topology(&TopologyKind::Tree, 4, 0).unwrap();
        assert!(matches!(ring_gossip_weights::<f64>(&tree), Err(Error::Shape(_))));
    }

    #[test]
    fn metropolis_matches_ring_exactly() {
        let t = ring(10);
        let a: GossipMatrix<f64> = metropolis_weights(&t).unwrap();
        let b: GossipMatrix<f64> = ring_gossip_weights(&t).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn metropolis_star() {
        let star = Topology::from_edges(4, [(0, 1), (0, 2), (0, 3)]).unwrap();
        let w: GossipMatrix<f64> = metropolis_weights(&star).unwrap();
        assert_eq!(w.get(0, 0), 0.25);
        for j in 1..4 {
            assert_eq!(w.get(0, j), 0.25);
            assert_eq!(w.get(j, j), 0.75);
        }
        w.validate(&star, 1e-12).unwrap();
    }

    #[test]
    fn edge_list_roundtrip() {
        let t = build_topology(&TopologyKind::Grid { rows: 2, cols: 3 }, 6, 0).unwrap();
        let text = t.to_edge_list();
        assert!(text.starts_with("n=6\n"));
        assert_eq!(Topology::parse_edge_list(&text).unwrap(), t);
        assert!(Topology::parse_edge_list("n=3\n0 1\n").is_err());
        assert!(Topology::parse_edge_list("nodes 3\n").is_err());
    }

    #[test]
    fn slot_bookkeeping_consistent() {
        let t = build_topology(&TopologyKind::Exponential, 6, 0).unwrap();
        for i in 0..t.n() {
            for (s, &j) in t.neighbors(i).iter().enumerate() {
                let back = t.back_slot(i, s);
                assert_eq!(t.neighbors(j)[back], i);
                assert_eq!(t.edge_index(i, s), t.edge_index(j, back));
            }
        }
    }
}
