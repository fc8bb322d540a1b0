//! The MiLoDo rollout engine.
//!
//! One iteration, synchronously for every node `i`:
//!
//! ```text
//! p_i   = φ_M(∇f_i(x_i), y_i)
//! z_i'  = prox_{λ‖·‖₁, Diag(p_i)⁻¹}(x_i − p_i ⊙ (∇f_i(x_i) + y_i))
//! p̃_ij  = φ_S(z_i' − z_j' : j ∈ N(i)),   p2_ij = φ_U(z_i' − z_j' : j ∈ N(i))
//! p1_ij = (p̃_ij + p̃_ji) / 2
//! y_i'  = y_i + Σ_j p1_ij ⊙ (z_i' − z_j')
//! x_i'  = z_i' − Σ_j p2_ij ⊙ (z_i' − z_j')
//! ```
//!
//! New states go to a fresh buffer, so every read sees the previous iterate.

mod backward;

use std::fmt;

pub use backward::{iteration_backward, StateAdjoint};

use crate::error::{param, shape, Error, Result};
use crate::graph::Topology;
use crate::metrics::{IterationRecord, MetricsRecorder};
use crate::neuro::{module_forward, random_bank, HiddenBank, MiLoDoParams, ModuleKind, ModuleTape};
use crate::problems::{Optimizee, SolutionOracle};
use crate::linalg::all_finite;
use crate::scalar::{cast_slice, Scalar};

/// Per-node optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeState<T> {
    pub x: Vec<T>,
    pub y: Vec<T>,
    pub z: Vec<T>,
    /// hidden banks of `φ_M`, `φ_S`, `φ_U`
    pub banks: [HiddenBank<T>; 3],
}

impl<T: Scalar> NodeState<T> {
    pub fn bank(&self, kind: ModuleKind) -> &HiddenBank<T> {
        &self.banks[kind.index()]
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.x) && all_finite(&self.y) && all_finite(&self.z) && self.banks.iter().all(|b| b.is_finite())
    }
}

/// Zero primal/dual variables with standard-normal hidden banks seeded per
/// `(node, module)`.
pub fn fresh_states<T: Scalar>(n: usize, d: usize, hidden: usize, seed: u64) -> Vec<NodeState<T>> {
    (0..n)
        .map(|i| NodeState {
            x: vec![T::zero(); d],
            y: vec![T::zero(); d],
            z: vec![T::zero(); d],
            banks: ModuleKind::ALL.map(|k| random_bank(d, hidden, seed, i, k)),
        })
        .collect()
}

/// How the per-edge dual weight is formed from the two endpoint outputs of φ_S.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DualCoupling {
    /// `(p̃_ij + p̃_ji) / 2`, computed once per edge
    #[default]
    Symmetrized,
    /// each endpoint uses its own `p̃_ij`; breaks dual conservation, kept as a
    /// negative control for the invariant checks
    Unsymmetrized,
}

/// Saved forward values of one node within one iteration.
#[derive(Debug, Clone)]
pub struct NodeTape<T> {
    pub x_in: Vec<T>,
    pub y_in: Vec<T>,
    pub g: Vec<T>,
    pub p: Vec<T>,
    pub v: Vec<T>,
    pub z: Vec<T>,
    /// `d × deg`: `z_i' − z_j'` per ascending neighbor slot
    pub delta: Vec<T>,
    pub p_tilde: Vec<T>,
    pub p1: Vec<T>,
    pub p2: Vec<T>,
    pub(crate) modules: [ModuleTape<T>; 3],
}

/// Forward record of one full iteration.
#[derive(Debug, Clone)]
pub struct IterationTape<T> {
    pub nodes: Vec<NodeTape<T>>,
    pub coupling: DualCoupling,
    pub lambda: T,
}

impl<T: Scalar> IterationTape<T> {
    /// Distance of the recorded point to the nearest non-differentiable kink
    /// (ReLUs inside the modules and active soft thresholds).
    pub fn kink_margin(&self) -> f64 {
        let mut m = f64::INFINITY;
        for nt in &self.nodes {
            for k in ModuleKind::ALL {
                m = m.min(nt.modules[k.index()].relu_margin(k.activation()));
            }
            for (&v, &p) in nt.v.iter().zip(&nt.p) {
                let t = self.lambda * p;
                if t > T::zero() {
                    m = m.min((v.abs() - t).abs().as_f64());
                }
            }
        }
        m
    }

    /// Feeds every branch decision (ReLU on/off, soft-threshold active) into `sink`.
    pub fn branch_pattern(&self, sink: &mut impl FnMut(bool)) {
        for nt in &self.nodes {
            for k in ModuleKind::ALL {
                nt.modules[k.index()].relu_pattern(k.activation(), sink);
            }
            for (&v, &p) in nt.v.iter().zip(&nt.p) {
                sink(v.abs() > self.lambda * p);
            }
        }
    }
}

fn check_inputs<T: Scalar>(
    states: &[NodeState<T>],
    params: &MiLoDoParams<T>,
    opt: &Optimizee<T>,
    topology: &Topology,
) -> Result<()> {
    params.check_topology(topology)?;
    if opt.n() != topology.n() || states.len() != topology.n() {
        return Err(shape(format!(
            "topology has {} nodes, optimizee {}, states {}",
            topology.n(),
            opt.n(),
            states.len()
        )));
    }
    let (d, h) = (opt.d(), params.hidden());
    for (i, s) in states.iter().enumerate() {
        if s.x.len() != d || s.y.len() != d || s.z.len() != d || s.banks.iter().any(|b| b.d != d || b.hidden != h) {
            return Err(shape(format!("state of node {i} does not match d={d}, hidden={h}")));
        }
    }
    Ok(())
}

/// One synchronous MiLoDo iteration (index `k`, used in divergence reports).
pub fn milodo_iteration<T: Scalar>(
    states: &[NodeState<T>],
    params: &MiLoDoParams<T>,
    opt: &Optimizee<T>,
    topology: &Topology,
    k: usize,
) -> Result<Vec<NodeState<T>>> {
    milodo_iteration_with(states, params, opt, topology, k, DualCoupling::Symmetrized, false).map(|(s, _)| s)
}

/// [`milodo_iteration`] with a selectable dual coupling and optional tape.
pub fn milodo_iteration_with<T: Scalar>(
    states: &[NodeState<T>],
    params: &MiLoDoParams<T>,
    opt: &Optimizee<T>,
    topology: &Topology,
    k: usize,
    coupling: DualCoupling,
    record: bool,
) -> Result<(Vec<NodeState<T>>, Option<IterationTape<T>>)> {
    check_inputs(states, params, opt, topology)?;
    let n = topology.n();
    let d = opt.d();
    let lambda = opt.lambda();

    // (a)–(b): local preconditioned proximal step
    let mut local = Vec::with_capacity(n);
    for (i, s) in states.iter().enumerate() {
        let g = opt.local_gradient_unchecked(i, &s.x);
        let m_in: Vec<T> = g.iter().zip(&s.y).flat_map(|(&gl, &yl)| [gl, yl]).collect();
        let m_tape = module_forward(&params.node(i).m, &m_in, s.bank(ModuleKind::M))?;
        let p = m_tape.outputs().to_vec();
        let v: Vec<T> = (0..d).map(|l| s.x[l] - p[l] * (g[l] + s.y[l])).collect();
        let z: Vec<T> = v.iter().zip(&p).map(|(&vl, &pl)| crate::problems::soft_threshold(vl, lambda * pl)).collect();
        local.push((g, p, v, z, m_tape));
    }

    // (c): exchange z, evaluate φ_S and φ_U on the differences
    let mut mixing = Vec::with_capacity(n);
    for i in 0..n {
        let nbrs = topology.neighbors(i);
        let deg = nbrs.len();
        let zi = &local[i].3;
        let mut delta = vec![T::zero(); d * deg];
        for l in 0..d {
            for (s, &j) in nbrs.iter().enumerate() {
                delta[l * deg + s] = zi[l] - local[j].3[l];
            }
        }
        let s_tape = module_forward(&params.node(i).s, &delta, states[i].bank(ModuleKind::S))?;
        let u_tape = module_forward(&params.node(i).u, &delta, states[i].bank(ModuleKind::U))?;
        mixing.push((delta, s_tape, u_tape));
    }

    // (d): exchange p̃ per edge
    let mut p1: Vec<Vec<T>> = (0..n).map(|i| vec![T::zero(); d * topology.degree(i)]).collect();
    match coupling {
        DualCoupling::Symmetrized => {
            let half = T::lit(0.5);
            for &(i, j) in topology.edges() {
                let si = topology.neighbors(i).binary_search(&j).expect("edge listed in adjacency");
                let sj = topology.back_slot(i, si);
                let (di, dj) = (topology.degree(i), topology.degree(j));
                for l in 0..d {
                    let w = (mixing[i].1.outputs()[l * di + si] + mixing[j].1.outputs()[l * dj + sj]) * half;
                    p1[i][l * di + si] = w;
                    p1[j][l * dj + sj] = w;
                }
            }
        }
        DualCoupling::Unsymmetrized => {
            for (i, row) in p1.iter_mut().enumerate() {
                row.copy_from_slice(mixing[i].1.outputs());
            }
        }
    }

    // (e)–(f): dual ascent and primal mixing
    let mut next = Vec::with_capacity(n);
    let mut tapes = Vec::with_capacity(if record { n } else { 0 });
    for (i, ((g, p, v, z, m_tape), (delta, s_tape, u_tape))) in local.into_iter().zip(mixing).enumerate() {
        let deg = topology.degree(i);
        let p2 = u_tape.outputs();
        let mut y = states[i].y.clone();
        let mut x = z.clone();
        for l in 0..d {
            for s in 0..deg {
                let e = l * deg + s;
                y[l] += p1[i][e] * delta[e];
                x[l] -= p2[e] * delta[e];
            }
        }
        let state = NodeState {
            x,
            y,
            z: z.clone(),
            banks: [m_tape.next_bank(), s_tape.next_bank(), u_tape.next_bank()],
        };
        if !state.is_finite() {
            return Err(Error::Divergence { iteration: k, node: i });
        }
        next.push(state);
        if record {
            tapes.push(NodeTape {
                x_in: states[i].x.clone(),
                y_in: states[i].y.clone(),
                g,
                p,
                v,
                z,
                delta,
                p_tilde: s_tape.outputs().to_vec(),
                p1: std::mem::take(&mut p1[i]),
                p2: p2.to_vec(),
                modules: [m_tape, s_tape, u_tape],
            });
        }
    }
    let tape = record.then(|| IterationTape { nodes: tapes, coupling, lambda });
    Ok((next, tape))
}

/// Smallest and largest value observed in each weight stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightBounds {
    /// `p_i` from φ_M
    pub m: (f64, f64),
    /// symmetrized `p1_ij`
    pub s: (f64, f64),
    /// `p2_ij` from φ_U
    pub u: (f64, f64),
}

impl Default for WeightBounds {
    fn default() -> Self {
        let e = (f64::INFINITY, f64::NEG_INFINITY);
        Self { m: e, s: e, u: e }
    }
}

impl WeightBounds {
    fn absorb<T: Scalar>(&mut self, tape: &IterationTape<T>) {
        let upd = |b: &mut (f64, f64), v: &[T]| {
            for &x in v {
                b.0 = b.0.min(x.as_f64());
                b.1 = b.1.max(x.as_f64());
            }
        };
        for nt in &tape.nodes {
            upd(&mut self.m, &nt.p);
            upd(&mut self.s, &nt.p1);
            upd(&mut self.u, &nt.p2);
        }
    }
}

#[derive(Debug, Clone)]
pub struct RolloutConfig<'a> {
    pub iterations: usize,
    /// seed of the hidden-state banks
    pub seed: u64,
    pub record_metrics: bool,
    pub oracle: Option<&'a SolutionOracle>,
    pub timing: bool,
    pub coupling: DualCoupling,
}

impl<'a> RolloutConfig<'a> {
    pub fn new(iterations: usize, seed: u64) -> Self {
        Self { iterations, seed, record_metrics: true, oracle: None, timing: false, coupling: DualCoupling::Symmetrized }
    }

    pub fn with_oracle(mut self, oracle: &'a SolutionOracle) -> Self {
        self.oracle = Some(oracle);
        self
    }
}

#[derive(Debug, Clone)]
pub struct RolloutResult<T> {
    /// last finite states (the initial states if the first iteration diverged)
    pub states: Vec<NodeState<T>>,
    pub records: Vec<IterationRecord>,
    pub iterations_done: usize,
    /// divergence that cut the run short, if any
    pub diverged: Option<Error>,
    pub weight_bounds: WeightBounds,
}

/// Runs MiLoDo from `x = y = z = 0`. A divergence ends the run early and is
/// reported in the result alongside the records gathered so far.
pub fn rollout<T: Scalar>(
    opt: &Optimizee<T>,
    topology: &Topology,
    params: &MiLoDoParams<T>,
    cfg: &RolloutConfig<'_>,
) -> Result<RolloutResult<T>> {
    let states = fresh_states(opt.n(), opt.d(), params.hidden(), cfg.seed);
    rollout_from(opt, topology, params, states, cfg)
}

/// [`rollout`] from caller-supplied initial states.
pub fn rollout_from<T: Scalar>(
    opt: &Optimizee<T>,
    topology: &Topology,
    params: &MiLoDoParams<T>,
    mut states: Vec<NodeState<T>>,
    cfg: &RolloutConfig<'_>,
) -> Result<RolloutResult<T>> {
    if cfg.iterations == 0 {
        return Err(param("a rollout needs at least one iteration"));
    }
    let recorder = MetricsRecorder::new(opt, cfg.oracle, cfg.timing);
    let mut records = Vec::with_capacity(if cfg.record_metrics { cfg.iterations } else { 0 });
    let mut bounds = WeightBounds::default();
    for k in 1..=cfg.iterations {
        match milodo_iteration_with(&states, params, opt, topology, k, cfg.coupling, true) {
            Ok((next, tape)) => {
                bounds.absorb(&tape.expect("tape requested"));
                states = next;
            }
            Err(e @ Error::Divergence { .. }) => {
                return Ok(RolloutResult {
                    states,
                    records,
                    iterations_done: k - 1,
                    diverged: Some(e),
                    weight_bounds: bounds,
                })
            }
            Err(e) => return Err(e),
        }
        if cfg.record_metrics {
            let xs: Vec<Vec<T>> = states.iter().map(|s| s.x.clone()).collect();
            records.push(recorder.record(k, &xs)?);
        }
    }
    Ok(RolloutResult { states, records, iterations_done: cfg.iterations, diverged: None, weight_bounds: bounds })
}

/// The consensual optimal state: `x_i = z_i = x★`, `y_i = −∇f_i(x★) − g★`
/// with `g★ = −(1/n) Σ_i ∇f_i(x★)`. Hidden banks are seeded by `seed`.
pub fn fixed_point_state<T: Scalar>(
    opt: &Optimizee<T>,
    hidden: usize,
    oracle: &SolutionOracle,
    seed: u64,
) -> Result<Vec<NodeState<T>>> {
    if !(oracle.tolerance <= 1e-8) {
        return Err(param(format!("oracle tolerance {:e} is looser than 1e-8", oracle.tolerance)));
    }
    if oracle.x_star.len() != opt.d() {
        return Err(shape("oracle dimension does not match the optimizee"));
    }
    let x_star: Vec<T> = cast_slice(&oracle.x_star);
    let grads: Vec<Vec<T>> = (0..opt.n()).map(|i| opt.local_gradient_unchecked(i, &x_star)).collect();
    let g_star: Vec<T> = (0..opt.d())
        .map(|l| -grads.iter().map(|g| g[l]).sum::<T>() / T::lit(opt.n() as f64))
        .collect();
    let mut states = fresh_states(opt.n(), opt.d(), hidden, seed);
    for (s, g) in states.iter_mut().zip(&grads) {
        s.x = x_star.clone();
        s.z = x_star.clone();
        s.y = g.iter().zip(&g_star).map(|(&gi, &gs)| -gi - gs).collect();
    }
    Ok(states)
}

/// Largest ∞-norm change of any `x`, `y`, `z` over one iteration started at
/// [`fixed_point_state`].
pub fn fixed_point_residual<T: Scalar>(
    opt: &Optimizee<T>,
    topology: &Topology,
    params: &MiLoDoParams<T>,
    oracle: &SolutionOracle,
) -> Result<f64> {
    let states = fixed_point_state(opt, params.hidden(), oracle, 0)?;
    let next = milodo_iteration(&states, params, opt, topology, 1)?;
    Ok(max_state_change(&states, &next))
}

/// Largest ∞-norm difference between two state lists over `x`, `y`, `z`.
pub fn max_state_change<T: Scalar>(a: &[NodeState<T>], b: &[NodeState<T>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(s, t)| {
            [(&s.x, &t.x), (&s.y, &t.y), (&s.z, &t.z)]
                .into_iter()
                .flat_map(|(u, v)| u.iter().zip(v.iter()).map(|(&p, &q)| (p - q).abs().as_f64()))
        })
        .fold(0.0, f64::max)
}

/// Coordinate-wise `Σ_i y_i`.
pub fn dual_sum<T: Scalar>(states: &[NodeState<T>]) -> Vec<T> {
    let d = states.first().map_or(0, |s| s.y.len());
    (0..d).map(|l| states.iter().map(|s| s.y[l]).sum()).collect()
}

impl fmt::Display for DualCoupling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DualCoupling::Symmetrized => "symmetrized",
            DualCoupling::Unsymmetrized => "unsymmetrized",
        })
    }
}
