use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::lstm::{HiddenBank, LstmModuleParams, ModuleKind, Tensor, HIDDEN};
use crate::error::{param, shape, Result};
use crate::graph::{GossipMatrix, Topology};
use crate::scalar::Scalar;
use crate::seeds::derive_seed;

/// The `(φ_M, φ_S, φ_U)` triple owned by one node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeModules<T> {
    pub m: LstmModuleParams<T>,
    pub s: LstmModuleParams<T>,
    pub u: LstmModuleParams<T>,
}

impl<T: Scalar> NodeModules<T> {
    pub fn get(&self, kind: ModuleKind) -> &LstmModuleParams<T> {
        match kind {
            ModuleKind::M => &self.m,
            ModuleKind::S => &self.s,
            ModuleKind::U => &self.u,
        }
    }

    pub fn get_mut(&mut self, kind: ModuleKind) -> &mut LstmModuleParams<T> {
        match kind {
            ModuleKind::M => &mut self.m,
            ModuleKind::S => &mut self.s,
            ModuleKind::U => &mut self.u,
        }
    }
}

/// Learnable parameters of a MiLoDo network: one module triple per node.
#[derive(Debug, Clone, PartialEq)]
pub struct MiLoDoParams<T> {
    nodes: Vec<NodeModules<T>>,
}

impl<T: Scalar> MiLoDoParams<T> {
    /// All-zero parameters sized for `topology` with the given hidden width.
    pub fn zeros(topology: &Topology, hidden: usize) -> Self {
        let nodes = (0..topology.n())
            .map(|i| {
                let deg = topology.degree(i);
                let make = |k: ModuleKind| {
                    let (a, b) = k.dims(deg);
                    LstmModuleParams::zeros(a, hidden, b, k.activation())
                };
                NodeModules { m: make(ModuleKind::M), s: make(ModuleKind::S), u: make(ModuleKind::U) }
            })
            .collect();
        Self { nodes }
    }

    pub fn from_nodes(nodes: Vec<NodeModules<T>>) -> Self {
        Self { nodes }
    }

    pub fn zeros_like(&self) -> Self {
        let nodes = self
            .nodes
            .iter()
            .map(|n| NodeModules { m: n.m.zeros_like(), s: n.s.zeros_like(), u: n.u.zeros_like() })
            .collect();
        Self { nodes }
    }

    pub fn n(&self) -> usize {
        self.nodes.len()
    }

    pub fn hidden(&self) -> usize {
        self.nodes.first().map_or(HIDDEN, |n| n.m.hidden())
    }

    pub fn node(&self, i: usize) -> &NodeModules<T> {
        &self.nodes[i]
    }

    pub fn node_mut(&mut self, i: usize) -> &mut NodeModules<T> {
        &mut self.nodes[i]
    }

    pub fn nodes(&self) -> &[NodeModules<T>] {
        &self.nodes
    }

    pub fn module(&self, i: usize, kind: ModuleKind) -> &LstmModuleParams<T> {
        self.nodes[i].get(kind)
    }

    pub fn module_mut(&mut self, i: usize, kind: ModuleKind) -> &mut LstmModuleParams<T> {
        self.nodes[i].get_mut(kind)
    }

    /// Modules in serialization order: node-major, then `M, S, U`.
    pub fn modules(&self) -> impl Iterator<Item = &LstmModuleParams<T>> {
        self.nodes.iter().flat_map(|n| [&n.m, &n.s, &n.u])
    }

    pub fn modules_mut(&mut self) -> impl Iterator<Item = &mut LstmModuleParams<T>> {
        self.nodes.iter_mut().flat_map(|n| [&mut n.m, &mut n.s, &mut n.u])
    }

    pub fn num_params(&self) -> usize {
        self.modules().map(|m| m.as_slice().len()).sum()
    }

    pub fn to_flat(&self) -> Vec<T> {
        self.modules().flat_map(|m| m.as_slice().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(shape(format!("flat buffer of {} values, expected {}", flat.len(), self.num_params())));
        }
        let mut off = 0;
        for m in self.modules_mut() {
            let s = m.as_mut_slice();
            s.copy_from_slice(&flat[off..off + s.len()]);
            off += s.len();
        }
        Ok(())
    }

    /// Reads the parameter at a flat index.
    pub fn get_flat(&self, mut idx: usize) -> T {
        for m in self.modules() {
            let len = m.as_slice().len();
            if idx < len {
                return m.as_slice()[idx];
            }
            idx -= len;
        }
        panic!("flat index out of range")
    }

    /// Mutable access to the parameter at a flat index.
    pub fn flat_mut(&mut self, mut idx: usize) -> &mut T {
        for m in self.modules_mut() {
            let len = m.as_slice().len();
            if idx < len {
                return &mut m.as_mut_slice()[idx];
            }
            idx -= len;
        }
        panic!("flat index out of range")
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.n() == other.n()
            && self.modules().zip(other.modules()).all(|(a, b)| {
                a.in_dim() == b.in_dim() && a.out_dim() == b.out_dim() && a.hidden() == b.hidden()
            })
    }

    /// Accumulates `other` into `self`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if !self.same_layout(other) {
            return Err(shape("parameter layouts differ"));
        }
        for (a, b) in self.modules_mut().zip(other.modules()) {
            for (x, &y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for m in self.modules_mut() {
            m.as_mut_slice().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.modules().all(|m| m.as_slice().iter().all(|v| v.is_finite()))
    }

    /// Checks node count and neighbor-indexed module dimensions against `topology`.
    pub fn check_topology(&self, topology: &Topology) -> Result<()> {
        if self.n() != topology.n() {
            return Err(shape(format!("parameters for {} nodes, topology has {}", self.n(), topology.n())));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            for k in ModuleKind::ALL {
                let (a, b) = k.dims(topology.degree(i));
                let m = node.get(k);
                if m.in_dim() != a || m.out_dim() != b || m.activation() != k.activation() {
                    return Err(shape(format!(
                        "node {i} module {k:?} is {}→{}, topology needs {a}→{b}",
                        m.in_dim(),
                        m.out_dim()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> MiLoDoParams<U> {
        MiLoDoParams {
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeModules { m: n.m.cast(), s: n.s.cast(), u: n.u.cast() })
                .collect(),
        }
    }
}

/// Uniform `±1/√fan_in` initialization, deterministic in `seed`.
pub fn init_random<T: Scalar>(topology: &Topology, seed: u64) -> MiLoDoParams<T> {
    let mut params = MiLoDoParams::zeros(topology, HIDDEN);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for m in params.modules_mut() {
        for t in Tensor::ALL {
            let bound = 1.0 / (m.fan_in(t) as f64).sqrt();
            for v in m.tensor_mut(t) {
                *v = T::lit(rng.random_range(-bound..bound));
            }
        }
    }
    params
}

/// Random initialization followed by overwriting every final affine layer:
/// weights to zero, biases to `γ` (φ_M), `ln(w_ij / 2γ)` (φ_S) and
/// `w_ij / 2` (φ_U), so the modules emit constant Exact-Diffusion weights.
pub fn init_special<T: Scalar>(
    topology: &Topology,
    gossip: &GossipMatrix<T>,
    gamma: f64,
    seed: u64,
) -> Result<MiLoDoParams<T>> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(param(format!("special init needs gamma > 0, got {gamma}")));
    }
    if gossip.n() != topology.n() {
        return Err(shape("gossip matrix and topology disagree on node count"));
    }
    let mut params = init_random::<T>(topology, seed);
    for i in 0..topology.n() {
        let weights: Vec<f64> = topology.neighbors(i).iter().map(|&j| gossip.get(i, j).as_f64()).collect();
        if let Some(&w) = weights.iter().find(|w| !(**w > 0.0)) {
            return Err(param(format!("edge weight {w} at node {i} is not positive")));
        }
        let node = params.node_mut(i);
        node.m.tensor_mut(Tensor::Mlp2Weight).fill(T::zero());
        node.m.tensor_mut(Tensor::Mlp2Bias).fill(T::lit(gamma));
        node.s.tensor_mut(Tensor::Mlp2Weight).fill(T::zero());
        node.u.tensor_mut(Tensor::Mlp2Weight).fill(T::zero());
        for (slot, &w) in weights.iter().enumerate() {
            node.s.tensor_mut(Tensor::Mlp2Bias)[slot] = T::lit((w / (2.0 * gamma)).ln());
            node.u.tensor_mut(Tensor::Mlp2Bias)[slot] = T::lit(w / 2.0);
        }
    }
    Ok(params)
}

/// Standard-normal hidden bank for `(node, module)`, deterministic in `seed`.
pub fn random_bank<T: Scalar>(d: usize, hidden: usize, seed: u64, node: usize, kind: ModuleKind) -> HiddenBank<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[node as u64, kind.index() as u64]));
    let mut draw = |len: usize| -> Vec<T> {
        (0..len)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                T::lit(z)
            })
            .collect()
    };
    let h = draw(d * hidden);
    let c = draw(d * hidden);
    HiddenBank { d, hidden, h, c }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_topology, ring_gossip_weights, TopologyKind};
    use crate::neuro::lstm::module_forward;

    fn ring(n: usize) -> Topology {
        build_topology(&TopologyKind::Ring, n, 0).unwrap()
    }

    #[test]
    fn random_init_is_seeded_and_bounded() {
        let t = ring(5);
        let a = init_random::<f64>(&t, 3);
        assert_eq!(a, init_random::<f64>(&t, 3));
        assert_ne!(a, init_random::<f64>(&t, 4));
        for m in a.modules() {
            for k in Tensor::ALL {
                let b = 1.0 / (m.fan_in(k) as f64).sqrt();
                assert!(m.tensor(k).iter().all(|v| v.abs() <= b));
            }
        }
        a.check_topology(&t).unwrap();
    }

    #[test]
    fn special_biases_for_ring() {
        let t = ring(10);
        let w = ring_gossip_weights::<f64>(&t).unwrap();
        let p = init_special(&t, &w, 0.03, 1).unwrap();
        let node = p.node(4);
        assert_eq!(node.m.tensor(Tensor::Mlp2Bias), &[0.03]);
        for &b in node.s.tensor(Tensor::Mlp2Bias) {
            assert!((b - 1.7148).abs() < 1e-4);
            assert!((b - (1.0f64 / 3.0 / 0.06).ln()).abs() < 1e-15);
        }
        for &b in node.u.tensor(Tensor::Mlp2Bias) {
            assert!((b - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn special_outputs_are_constant() {
        let t = ring(10);
        let w = ring_gossip_weights::<f64>(&t).unwrap();
        let p = init_special(&t, &w, 0.03, 9).unwrap();
        let d = 6;
        let bank = random_bank::<f64>(d, HIDDEN, 2, 0, ModuleKind::M);
        let inputs: Vec<f64> = (0..2 * d).map(|k| (k as f64 - 5.0) * 3.7).collect();
        let out = module_forward(&p.node(0).m, &inputs, &bank).unwrap();
        assert!(out.outputs().iter().all(|&v| v == 0.03));
        let out = module_forward(&p.node(0).s, &inputs, &bank).unwrap();
        assert!(out.outputs().iter().all(|&v| (v - 1.0 / 3.0 / 0.06).abs() < 1e-12));
        let out = module_forward(&p.node(0).u, &inputs, &bank).unwrap();
        assert!(out.outputs().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn special_rejects_bad_inputs() {
        let t = ring(4);
        let w = ring_gossip_weights::<f64>(&t).unwrap();
        assert!(init_special(&t, &w, 0.0, 0).is_err());
        assert!(init_special(&t, &w, -1.0, 0).is_err());
        let mut dense: Vec<f64> = (0..16).map(|k| w.get(k / 4, k % 4)).collect();
        dense[1] = 0.0;
        let zero_edge = GossipMatrix::from_dense(4, dense).unwrap();
        assert!(init_special(&t, &zero_edge, 0.03, 0).is_err());
    }

    #[test]
    fn flat_round_trip() {
        let t = ring(3);
        let a = init_random::<f64>(&t, 1);
        let mut b = a.zeros_like();
        b.set_flat(&a.to_flat()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.get_flat(17), a.to_flat()[17]);
    }
}
