//! Reverse pass of one MiLoDo iteration.

use super::{DualCoupling, IterationTape};
use crate::error::{Error, Result};
use crate::graph::Topology;
use crate::neuro::{module_backward, HiddenBank, MiLoDoParams, ModuleKind};
use crate::problems::Optimizee;
use crate::scalar::Scalar;

/// Adjoints of the carried state: `x`, `y` and the three hidden banks per node.
/// `z` carries no adjoint since the next iteration recomputes it.
#[derive(Debug, Clone, PartialEq)]
pub struct StateAdjoint<T> {
    pub x: Vec<Vec<T>>,
    pub y: Vec<Vec<T>>,
    pub banks: Vec<[HiddenBank<T>; 3]>,
}

impl<T: Scalar> StateAdjoint<T> {
    pub fn zeros(n: usize, d: usize, hidden: usize) -> Self {
        Self {
            x: vec![vec![T::zero(); d]; n],
            y: vec![vec![T::zero(); d]; n],
            banks: (0..n).map(|_| std::array::from_fn(|_| HiddenBank::zeros(d, hidden))).collect(),
        }
    }
}

/// Propagates `out` (adjoints of the iteration's outputs) back to its inputs,
/// accumulating parameter gradients into `grads`.
///
/// The soft threshold uses its almost-everywhere derivative: the `v` branch
/// passes the adjoint when `|v| > λp` (or the threshold is zero), and the `p`
/// branch only when `|v| > λp`.
pub fn iteration_backward<T: Scalar>(
    tape: &IterationTape<T>,
    params: &MiLoDoParams<T>,
    opt: &Optimizee<T>,
    topology: &Topology,
    out: &StateAdjoint<T>,
    grads: &mut MiLoDoParams<T>,
) -> Result<StateAdjoint<T>> {
    let n = topology.n();
    let d = opt.d();
    if tape.nodes.len() != n || out.x.len() != n || out.y.len() != n || out.banks.len() != n {
        return Err(Error::Internal("iteration tape does not match the topology".into()));
    }
    if !params.same_layout(grads) {
        return Err(Error::Internal("gradient accumulator layout differs from parameters".into()));
    }
    let half = T::lit(0.5);
    let lambda = tape.lambda;

    // (f) x' = z' − Σ p2 δ   and   (e) y' = y + Σ p1 δ
    let mut a_z: Vec<Vec<T>> = out.x.clone();
    let mut a_y: Vec<Vec<T>> = out.y.clone();
    let mut a_delta = Vec::with_capacity(n);
    let mut a_p1 = Vec::with_capacity(n);
    let mut a_p2 = Vec::with_capacity(n);
    for (i, nt) in tape.nodes.iter().enumerate() {
        let deg = topology.degree(i);
        let mut ad = vec![T::zero(); d * deg];
        let mut ap1 = vec![T::zero(); d * deg];
        let mut ap2 = vec![T::zero(); d * deg];
        for l in 0..d {
            let (ax, ay) = (out.x[i][l], out.y[i][l]);
            for s in 0..deg {
                let e = l * deg + s;
                ap2[e] = -ax * nt.delta[e];
                ap1[e] = ay * nt.delta[e];
                ad[e] = ay * nt.p1[e] - ax * nt.p2[e];
            }
        }
        a_delta.push(ad);
        a_p1.push(ap1);
        a_p2.push(ap2);
    }

    // (d) p1_ij = (p̃_ij + p̃_ji) / 2
    let mut a_tilde: Vec<Vec<T>> = (0..n).map(|i| vec![T::zero(); d * topology.degree(i)]).collect();
    match tape.coupling {
        DualCoupling::Symmetrized => {
            for i in 0..n {
                let di = topology.degree(i);
                for (s, &j) in topology.neighbors(i).iter().enumerate() {
                    let t = topology.back_slot(i, s);
                    let dj = topology.degree(j);
                    for l in 0..d {
                        let g = a_p1[i][l * di + s] * half;
                        a_tilde[i][l * di + s] += g;
                        a_tilde[j][l * dj + t] += g;
                    }
                }
            }
        }
        DualCoupling::Unsymmetrized => a_tilde.clone_from(&a_p1),
    }

    // (c) φ_S and φ_U on δ_i, then δ_ij = z_i' − z_j'
    let mut banks_in: Vec<[HiddenBank<T>; 3]> = Vec::with_capacity(n);
    for (i, nt) in tape.nodes.iter().enumerate() {
        let mut node_banks: [HiddenBank<T>; 3] = std::array::from_fn(|_| HiddenBank::zeros(0, 0));
        for (kind, upstream) in [(ModuleKind::S, &a_tilde[i]), (ModuleKind::U, &a_p2[i])] {
            let k = kind.index();
            let ob = &out.banks[i][k];
            let adj = module_backward(
                params.module(i, kind),
                &nt.modules[k],
                upstream,
                Some(&ob.h),
                Some(&ob.c),
                grads.module_mut(i, kind),
            )?;
            for (a, b) in a_delta[i].iter_mut().zip(&adj.d_input) {
                *a += *b;
            }
            node_banks[k] = HiddenBank { d, hidden: ob.hidden, h: adj.d_h_prev, c: adj.d_c_prev };
        }
        banks_in.push(node_banks);
    }
    for i in 0..n {
        let deg = topology.degree(i);
        for (s, &j) in topology.neighbors(i).iter().enumerate() {
            for l in 0..d {
                let g = a_delta[i][l * deg + s];
                a_z[i][l] += g;
                a_z[j][l] -= g;
            }
        }
    }

    // (b) z' = soft(v, λp), v = x − p(g + y);  (a) p = φ_M(g, y), g = ∇f_i(x)
    let mut a_x = Vec::with_capacity(n);
    for (i, nt) in tape.nodes.iter().enumerate() {
        let mut ax = vec![T::zero(); d];
        let mut ag = vec![T::zero(); d];
        let mut ap = vec![T::zero(); d];
        for l in 0..d {
            let (v, p) = (nt.v[l], nt.p[l]);
            let t = lambda * p;
            let above = v.abs() > t;
            let av = if above || t == T::zero() { a_z[i][l] } else { T::zero() };
            if above && lambda != T::zero() {
                ap[l] = -lambda * v.signum() * a_z[i][l];
            }
            ax[l] = av;
            ap[l] -= av * (nt.g[l] + nt.y_in[l]);
            ag[l] = -av * p;
            a_y[i][l] -= av * p;
        }
        let k = ModuleKind::M.index();
        let ob = &out.banks[i][k];
        let adj = module_backward(
            params.module(i, ModuleKind::M),
            &nt.modules[k],
            &ap,
            Some(&ob.h),
            Some(&ob.c),
            grads.module_mut(i, ModuleKind::M),
        )?;
        for l in 0..d {
            ag[l] += adj.d_input[2 * l];
            a_y[i][l] += adj.d_input[2 * l + 1];
        }
        banks_in[i][k] = HiddenBank { d, hidden: ob.hidden, h: adj.d_h_prev, c: adj.d_c_prev };
        let hv = opt.local_hvp_unchecked(i, &nt.x_in, &ag);
        for (a, h) in ax.iter_mut().zip(hv) {
            *a += h;
        }
        a_x.push(ax);
    }
    Ok(StateAdjoint { x: a_x, y: a_y, banks: banks_in })
}
