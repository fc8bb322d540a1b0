//! Coordinate-wise LSTM module: one LSTM cell, a two-layer MLP with an
//! internal ReLU, and an output activation. The same weights are applied to
//! every coordinate independently; each coordinate owns its own hidden and
//! cell vectors.

use std::ops::Range;

use crate::error::{shape, Error, Result};
use crate::scalar::{cast_slice, Scalar};

/// Hidden width of the LSTM cell and of the MLP's inner layer.
pub const HIDDEN: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputActivation {
    Relu,
    Exp,
}

/// The three learnable maps of a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModuleKind {
    /// preconditioner of the local proximal-gradient step
    M,
    /// dual mixing weights (exp output, symmetrized per edge)
    S,
    /// primal mixing weights
    U,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 3] = [ModuleKind::M, ModuleKind::S, ModuleKind::U];

    pub fn index(self) -> usize {
        match self {
            ModuleKind::M => 0,
            ModuleKind::S => 1,
            ModuleKind::U => 2,
        }
    }

    pub fn activation(self) -> OutputActivation {
        match self {
            ModuleKind::S => OutputActivation::Exp,
            ModuleKind::M | ModuleKind::U => OutputActivation::Relu,
        }
    }

    /// `(in_dim, out_dim)` for a node of the given degree.
    pub fn dims(self, degree: usize) -> (usize, usize) {
        match self {
            ModuleKind::M => (2, 1),
            ModuleKind::S | ModuleKind::U => (degree, degree),
        }
    }
}

/// Parameter tensors in declaration (and serialization) order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tensor {
    GateInput,
    GateHidden,
    GateBias,
    Mlp1Weight,
    Mlp1Bias,
    Mlp2Weight,
    Mlp2Bias,
}

impl Tensor {
    pub const ALL: [Tensor; 7] = [
        Tensor::GateInput,
        Tensor::GateHidden,
        Tensor::GateBias,
        Tensor::Mlp1Weight,
        Tensor::Mlp1Bias,
        Tensor::Mlp2Weight,
        Tensor::Mlp2Bias,
    ];
}

/// Weights of one coordinate-wise LSTM module, stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmModuleParams<T> {
    in_dim: usize,
    hidden: usize,
    out_dim: usize,
    activation: OutputActivation,
    data: Vec<T>,
}

impl<T: Scalar> LstmModuleParams<T> {
    pub fn zeros(in_dim: usize, hidden: usize, out_dim: usize, activation: OutputActivation) -> Self {
        let len = Self::layout_len(in_dim, hidden, out_dim);
        Self { in_dim, hidden, out_dim, activation, data: vec![T::zero(); len] }
    }

    pub fn from_data(
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        activation: OutputActivation,
        data: Vec<T>,
    ) -> Result<Self> {
        if data.len() != Self::layout_len(in_dim, hidden, out_dim) {
            return Err(shape(format!("module buffer of {} values does not match dims", data.len())));
        }
        Ok(Self { in_dim, hidden, out_dim, activation, data })
    }

    fn layout_len(in_dim: usize, h: usize, out: usize) -> usize {
        4 * h * in_dim + 4 * h * h + 4 * h + h * h + h + out * h + out
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.in_dim, self.hidden, self.out_dim, self.activation)
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    #[inline]
    pub fn hidden(&self) -> usize {
        self.hidden
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    #[inline]
    pub fn activation(&self) -> OutputActivation {
        self.activation
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn range(&self, t: Tensor) -> Range<usize> {
        let (i, h, o) = (self.in_dim, self.hidden, self.out_dim);
        let sizes = [4 * h * i, 4 * h * h, 4 * h, h * h, h, o * h, o];
        let idx = Tensor::ALL.iter().position(|&x| x == t).expect("tensor listed");
        let start: usize = sizes[..idx].iter().sum();
        start..start + sizes[idx]
    }

    /// Fan-in used by the uniform initializer of each tensor.
    pub fn fan_in(&self, t: Tensor) -> usize {
        match t {
            Tensor::GateInput | Tensor::GateHidden | Tensor::GateBias => self.in_dim + self.hidden,
            _ => self.hidden,
        }
    }

    pub fn tensor(&self, t: Tensor) -> &[T] {
        &self.data[self.range(t)]
    }

    pub fn tensor_mut(&mut self, t: Tensor) -> &mut [T] {
        let r = self.range(t);
        &mut self.data[r]
    }

    pub fn cast<U: Scalar>(&self) -> LstmModuleParams<U> {
        LstmModuleParams {
            in_dim: self.in_dim,
            hidden: self.hidden,
            out_dim: self.out_dim,
            activation: self.activation,
            data: cast_slice(&self.data),
        }
    }

    fn same_layout(&self, other: &Self) -> bool {
        self.in_dim == other.in_dim && self.hidden == other.hidden && self.out_dim == other.out_dim
    }
}

/// Per-coordinate hidden and cell vectors, `d × hidden` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenBank<T> {
    pub d: usize,
    pub hidden: usize,
    pub h: Vec<T>,
    pub c: Vec<T>,
}

impl<T: Scalar> HiddenBank<T> {
    pub fn zeros(d: usize, hidden: usize) -> Self {
        Self { d, hidden, h: vec![T::zero(); d * hidden], c: vec![T::zero(); d * hidden] }
    }

    pub fn is_finite(&self) -> bool {
        self.h.iter().chain(&self.c).all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> HiddenBank<U> {
        HiddenBank { d: self.d, hidden: self.hidden, h: cast_slice(&self.h), c: cast_slice(&self.c) }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(t: T) -> T {
    if t >= T::zero() {
        T::one() / (T::one() + (-t).exp())
    } else {
        let e = t.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn relu<T: Scalar>(t: T) -> T {
    if t > T::zero() {
        t
    } else {
        T::zero()
    }
}

/// `out = W x + b` with `W` of shape `out.len() × x.len()`.
pub(crate) fn affine<T: Scalar>(w: &[T], b: &[T], x: &[T], out: &mut [T]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        *o = row.iter().zip(x).fold(b[r], |acc, (&wi, &xi)| acc + wi * xi);
    }
}

/// Reverse of [`affine`]: accumulates `dW += d_out xᵀ`, `db += d_out`, `dx += Wᵀ d_out`.
pub(crate) fn affine_backward<T: Scalar>(
    w: &[T],
    x: &[T],
    d_out: &[T],
    d_w: &mut [T],
    d_b: &mut [T],
    d_x: &mut [T],
) {
    let cols = x.len();
    for (r, &g) in d_out.iter().enumerate() {
        if g == T::zero() {
            continue;
        }
        d_b[r] += g;
        let row = &w[r * cols..(r + 1) * cols];
        let drow = &mut d_w[r * cols..(r + 1) * cols];
        for k in 0..cols {
            drow[k] += g * x[k];
            d_x[k] += g * row[k];
        }
    }
}

/// Saved activations of one module application across `d` coordinates.
#[derive(Debug, Clone)]
pub struct ModuleTape<T> {
    d: usize,
    in_dim: usize,
    hidden: usize,
    out_dim: usize,
    input: Vec<T>,
    h_prev: Vec<T>,
    c_prev: Vec<T>,
    gates: Vec<T>,
    c_new: Vec<T>,
    tanh_c: Vec<T>,
    h_new: Vec<T>,
    a1: Vec<T>,
    a2: Vec<T>,
    out: Vec<T>,
}

impl<T: Scalar> ModuleTape<T> {
    /// Module outputs, `d × out_dim` row-major.
    pub fn outputs(&self) -> &[T] {
        &self.out
    }

    pub fn next_bank(&self) -> HiddenBank<T> {
        HiddenBank { d: self.d, hidden: self.hidden, h: self.h_new.clone(), c: self.c_new.clone() }
    }

    /// Smallest distance of any ReLU pre-activation to its kink.
    pub fn relu_margin(&self, activation: OutputActivation) -> f64 {
        let inner = self.a1.iter().fold(f64::INFINITY, |m, v| m.min(v.as_f64().abs()));
        match activation {
            OutputActivation::Relu => self.a2.iter().fold(inner, |m, v| m.min(v.as_f64().abs())),
            OutputActivation::Exp => inner,
        }
    }

    /// Feeds the on/off pattern of every ReLU into `sink`.
    pub(crate) fn relu_pattern(&self, activation: OutputActivation, sink: &mut impl FnMut(bool)) {
        self.a1.iter().for_each(|v| sink(*v > T::zero()));
        if activation == OutputActivation::Relu {
            self.a2.iter().for_each(|v| sink(*v > T::zero()));
        }
    }
}

/// Adjoints with respect to a module's inputs and incoming hidden bank.
#[derive(Debug, Clone)]
pub struct ModuleAdjoint<T> {
    pub d_input: Vec<T>,
    pub d_h_prev: Vec<T>,
    pub d_c_prev: Vec<T>,
}

struct CellScratch<'a, T> {
    gates: &'a mut [T],
    c_new: &'a mut [T],
    tanh_c: &'a mut [T],
    h_new: &'a mut [T],
}

fn cell_kernel<T: Scalar>(p: &LstmModuleParams<T>, x: &[T], h: &[T], c: &[T], s: CellScratch<'_, T>) {
    let hd = p.hidden;
    let w_ih = p.tensor(Tensor::GateInput);
    let w_hh = p.tensor(Tensor::GateHidden);
    let bias = p.tensor(Tensor::GateBias);
    for r in 0..4 * hd {
        let mut z = bias[r];
        let wi = &w_ih[r * p.in_dim..(r + 1) * p.in_dim];
        for k in 0..p.in_dim {
            z += wi[k] * x[k];
        }
        let wh = &w_hh[r * hd..(r + 1) * hd];
        for k in 0..hd {
            z += wh[k] * h[k];
        }
        s.gates[r] = if (2 * hd..3 * hd).contains(&r) { z.tanh() } else { sigmoid(z) };
    }
    for k in 0..hd {
        let (ig, fg, gg, og) = (s.gates[k], s.gates[hd + k], s.gates[2 * hd + k], s.gates[3 * hd + k]);
        s.c_new[k] = fg * c[k] + ig * gg;
        s.tanh_c[k] = s.c_new[k].tanh();
        s.h_new[k] = og * s.tanh_c[k];
    }
}

/// Single LSTM cell step on one coordinate: gates `i, f, o` via sigmoid,
/// candidate via tanh, `c' = f⊙c + i⊙g`, `h' = o⊙tanh(c')`.
pub fn lstm_cell_forward<T: Scalar>(
    params: &LstmModuleParams<T>,
    input: &[T],
    h: &[T],
    c: &[T],
) -> Result<(Vec<T>, Vec<T>)> {
    let hd = params.hidden;
    if input.len() != params.in_dim || h.len() != hd || c.len() != hd {
        return Err(shape(format!(
            "cell expects input {} and state {hd}, got {}/{}/{}",
            params.in_dim,
            input.len(),
            h.len(),
            c.len()
        )));
    }
    let mut gates = vec![T::zero(); 4 * hd];
    let mut c_new = vec![T::zero(); hd];
    let mut tanh_c = vec![T::zero(); hd];
    let mut h_new = vec![T::zero(); hd];
    cell_kernel(
        params,
        input,
        h,
        c,
        CellScratch { gates: &mut gates, c_new: &mut c_new, tanh_c: &mut tanh_c, h_new: &mut h_new },
    );
    Ok((h_new, c_new))
}

/// Applies the module independently to each of the `d` coordinates.
///
/// `inputs` is `d × in_dim` row-major; the returned tape exposes the
/// `d × out_dim` outputs and the advanced hidden bank.
pub fn module_forward<T: Scalar>(
    params: &LstmModuleParams<T>,
    inputs: &[T],
    bank: &HiddenBank<T>,
) -> Result<ModuleTape<T>> {
    let (d, hd, ind, outd) = (bank.d, params.hidden, params.in_dim, params.out_dim);
    if bank.hidden != hd {
        return Err(shape(format!("hidden bank width {} vs module width {hd}", bank.hidden)));
    }
    if inputs.len() != d * ind {
        return Err(shape(format!("module expects {d}x{ind} inputs, got {} values", inputs.len())));
    }
    let mut t = ModuleTape {
        d,
        in_dim: ind,
        hidden: hd,
        out_dim: outd,
        input: inputs.to_vec(),
        h_prev: bank.h.clone(),
        c_prev: bank.c.clone(),
        gates: vec![T::zero(); d * 4 * hd],
        c_new: vec![T::zero(); d * hd],
        tanh_c: vec![T::zero(); d * hd],
        h_new: vec![T::zero(); d * hd],
        a1: vec![T::zero(); d * hd],
        a2: vec![T::zero(); d * outd],
        out: vec![T::zero(); d * outd],
    };
    let (w1, b1) = (params.tensor(Tensor::Mlp1Weight), params.tensor(Tensor::Mlp1Bias));
    let (w2, b2) = (params.tensor(Tensor::Mlp2Weight), params.tensor(Tensor::Mlp2Bias));
    let mut r1 = vec![T::zero(); hd];
    for l in 0..d {
        let hs = l * hd..(l + 1) * hd;
        cell_kernel(
            params,
            &inputs[l * ind..(l + 1) * ind],
            &bank.h[hs.clone()],
            &bank.c[hs.clone()],
            CellScratch {
                gates: &mut t.gates[l * 4 * hd..(l + 1) * 4 * hd],
                c_new: &mut t.c_new[hs.clone()],
                tanh_c: &mut t.tanh_c[hs.clone()],
                h_new: &mut t.h_new[hs.clone()],
            },
        );
        affine(w1, b1, &t.h_new[hs.clone()], &mut t.a1[hs.clone()]);
        for (r, &a) in r1.iter_mut().zip(&t.a1[hs]) {
            *r = relu(a);
        }
        let os = l * outd..(l + 1) * outd;
        affine(w2, b2, &r1, &mut t.a2[os.clone()]);
        for k in os {
            t.out[k] = match params.activation {
                OutputActivation::Relu => relu(t.a2[k]),
                OutputActivation::Exp => t.a2[k].exp(),
            };
        }
    }
    Ok(t)
}

/// Reverse pass of [`module_forward`]. Parameter gradients accumulate into
/// `grads`; `d_h_next`/`d_c_next` are adjoints of the advanced hidden bank
/// (absent at the end of a segment). ReLU uses derivative 0 at 0.
pub fn module_backward<T: Scalar>(
    params: &LstmModuleParams<T>,
    tape: &ModuleTape<T>,
    d_out: &[T],
    d_h_next: Option<&[T]>,
    d_c_next: Option<&[T]>,
    grads: &mut LstmModuleParams<T>,
) -> Result<ModuleAdjoint<T>> {
    let (d, hd, ind, outd) = (tape.d, tape.hidden, tape.in_dim, tape.out_dim);
    if params.hidden != hd || params.in_dim != ind || params.out_dim != outd || !params.same_layout(grads) {
        return Err(Error::Internal("tape recorded with a different module layout".into()));
    }
    if d_out.len() != d * outd
        || d_h_next.is_some_and(|v| v.len() != d * hd)
        || d_c_next.is_some_and(|v| v.len() != d * hd)
    {
        return Err(Error::Internal("upstream adjoint shape does not match tape".into()));
    }

    let mut adj = ModuleAdjoint {
        d_input: vec![T::zero(); d * ind],
        d_h_prev: vec![T::zero(); d * hd],
        d_c_prev: vec![T::zero(); d * hd],
    };
    let ranges = Tensor::ALL.map(|t| params.range(t));
    let w_ih = &params.data[ranges[0].clone()];
    let w_hh = &params.data[ranges[1].clone()];
    let w1 = &params.data[ranges[3].clone()];
    let w2 = &params.data[ranges[5].clone()];

    let mut d_a2 = vec![T::zero(); outd];
    let mut r1 = vec![T::zero(); hd];
    let mut d_r1 = vec![T::zero(); hd];
    let mut d_a1 = vec![T::zero(); hd];
    let mut d_h = vec![T::zero(); hd];
    let mut d_z = vec![T::zero(); 4 * hd];

    for l in 0..d {
        let hs = l * hd..(l + 1) * hd;
        let os = l * outd..(l + 1) * outd;
        for (k, idx) in os.clone().enumerate() {
            d_a2[k] = match params.activation {
                OutputActivation::Relu if tape.a2[idx] > T::zero() => d_out[idx],
                OutputActivation::Relu => T::zero(),
                OutputActivation::Exp => d_out[idx] * tape.out[idx],
            };
        }
        for (r, &a) in r1.iter_mut().zip(&tape.a1[hs.clone()]) {
            *r = relu(a);
        }
        d_r1.iter_mut().for_each(|v| *v = T::zero());
        {
            let g = &mut grads.data;
            let (gw2, rest) = g[ranges[5].start..].split_at_mut(ranges[5].len());
            let gb2 = &mut rest[..ranges[6].len()];
            affine_backward(w2, &r1, &d_a2, gw2, gb2, &mut d_r1);
        }
        for k in 0..hd {
            d_a1[k] = if tape.a1[l * hd + k] > T::zero() { d_r1[k] } else { T::zero() };
        }
        match d_h_next {
            Some(v) => d_h.copy_from_slice(&v[hs.clone()]),
            None => d_h.iter_mut().for_each(|x| *x = T::zero()),
        }
        {
            let g = &mut grads.data;
            let (gw1, rest) = g[ranges[3].start..].split_at_mut(ranges[3].len());
            let gb1 = &mut rest[..ranges[4].len()];
            affine_backward(w1, &tape.h_new[hs.clone()], &d_a1, gw1, gb1, &mut d_h);
        }

        let gates = &tape.gates[l * 4 * hd..(l + 1) * 4 * hd];
        for k in 0..hd {
            let (ig, fg, gg, og) = (gates[k], gates[hd + k], gates[2 * hd + k], gates[3 * hd + k]);
            let tc = tape.tanh_c[l * hd + k];
            let dc_in = d_c_next.map_or(T::zero(), |v| v[l * hd + k]);
            let d_o = d_h[k] * tc;
            let d_c = dc_in + d_h[k] * og * (T::one() - tc * tc);
            let d_i = d_c * gg;
            let d_g = d_c * ig;
            let d_f = d_c * tape.c_prev[l * hd + k];
            adj.d_c_prev[l * hd + k] = d_c * fg;
            d_z[k] = d_i * ig * (T::one() - ig);
            d_z[hd + k] = d_f * fg * (T::one() - fg);
            d_z[2 * hd + k] = d_g * (T::one() - gg * gg);
            d_z[3 * hd + k] = d_o * og * (T::one() - og);
        }

        let x = &tape.input[l * ind..(l + 1) * ind];
        let hp = &tape.h_prev[hs.clone()];
        let g = &mut grads.data;
        for r in 0..4 * hd {
            let dz = d_z[r];
            if dz == T::zero() {
                continue;
            }
            g[ranges[2].start + r] += dz;
            let wi = &w_ih[r * ind..(r + 1) * ind];
            for k in 0..ind {
                g[ranges[0].start + r * ind + k] += dz * x[k];
                adj.d_input[l * ind + k] += dz * wi[k];
            }
            let wh = &w_hh[r * hd..(r + 1) * hd];
            for k in 0..hd {
                g[ranges[1].start + r * hd + k] += dz * hp[k];
                adj.d_h_prev[l * hd + k] += dz * wh[k];
            }
        }
    }
    Ok(adj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_module(seed: u64, in_dim: usize, out_dim: usize, act: OutputActivation) -> LstmModuleParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = LstmModuleParams::zeros(in_dim, HIDDEN, out_dim, act);
        p.as_mut_slice().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        p
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_cell_stays_zero() {
        let p = LstmModuleParams::<f64>::zeros(2, HIDDEN, 1, OutputActivation::Relu);
        let (h, c) = lstm_cell_forward(&p, &[0.4, -2.0], &[0.3; HIDDEN], &[0.0; HIDDEN]).unwrap();
        assert!(h.iter().chain(&c).all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_forget_gate_keeps_cell() {
        let mut p = LstmModuleParams::<f64>::zeros(2, HIDDEN, 1, OutputActivation::Relu);
        p.tensor_mut(Tensor::GateBias)[HIDDEN..2 * HIDDEN].iter_mut().for_each(|b| *b = 10.0);
        let (_, c) = lstm_cell_forward(&p, &[1.0, 1.0], &[0.0; HIDDEN], &[1.0; HIDDEN]).unwrap();
        assert!(c.iter().all(|&v| (v - 1.0).abs() < 1e-4));
    }

    /// Straightforward scalar LSTM written from the textbook gate equations.
    fn reference_cell(p: &LstmModuleParams<f64>, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let hd = p.hidden();
        let wi = p.tensor(Tensor::GateInput);
        let wh = p.tensor(Tensor::GateHidden);
        let b = p.tensor(Tensor::GateBias);
        let pre = |r: usize| -> f64 {
            let mut s = b[r];
            for k in 0..x.len() {
                s += wi[r * x.len() + k] * x[k];
            }
            for k in 0..hd {
                s += wh[r * hd + k] * h[k];
            }
            s
        };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut h2 = vec![0.0; hd];
        let mut c2 = vec![0.0; hd];
        for k in 0..hd {
            let i = sig(pre(k));
            let f = sig(pre(hd + k));
            let g = pre(2 * hd + k).tanh();
            let o = sig(pre(3 * hd + k));
            c2[k] = f * c[k] + i * g;
            h2[k] = o * c2[k].tanh();
        }
        (h2, c2)
    }

    #[test]
    fn cell_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for seed in 0..10 {
            let p = random_module(seed, 3, 3, OutputActivation::Exp);
            let x = random_vec(&mut rng, 3);
            let h = random_vec(&mut rng, HIDDEN);
            let c = random_vec(&mut rng, HIDDEN);
            let (h1, c1) = lstm_cell_forward(&p, &x, &h, &c).unwrap();
            let (h2, c2) = reference_cell(&p, &x, &h, &c);
            for k in 0..HIDDEN {
                assert!((h1[k] - h2[k]).abs() < 1e-12);
                assert!((c1[k] - c2[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cell_shape_error() {
        let p = LstmModuleParams::<f64>::zeros(2, HIDDEN, 1, OutputActivation::Relu);
        assert!(matches!(lstm_cell_forward(&p, &[0.0], &[0.0; HIDDEN], &[0.0; HIDDEN]), Err(Error::Shape(_))));
    }

    #[test]
    fn exp_outputs_positive() {
        let p = random_module(3, 2, 2, OutputActivation::Exp);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bank = HiddenBank { d: 4, hidden: HIDDEN, h: random_vec(&mut rng, 80), c: random_vec(&mut rng, 80) };
        let inputs: Vec<f64> = random_vec(&mut rng, 8).iter().map(|v| v * 50.0).collect();
        let tape = module_forward(&p, &inputs, &bank).unwrap();
        assert!(tape.outputs().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn affine_backward_is_least_squares_gradient() {
        // loss = ½‖Xw − y‖² summed over rows; gradient must be Xᵀ(Xw − y)
        let x = [[1.0, 2.0], [0.5, -1.0], [3.0, 0.0]];
        let y = [1.0, 0.0, -2.0];
        let w = [0.3, -0.7];
        let mut gw = [0.0f64; 2];
        let mut gb = [0.0; 1];
        for (row, &target) in x.iter().zip(&y) {
            let mut out = [0.0];
            affine(&w, &[0.0], row, &mut out);
            let mut dx = [0.0; 2];
            affine_backward(&w, row, &[out[0] - target], &mut gw, &mut gb, &mut dx);
        }
        let mut expected = [0.0f64; 2];
        for (row, &target) in x.iter().zip(&y) {
            let r = row[0] * w[0] + row[1] * w[1] - target;
            expected[0] += row[0] * r;
            expected[1] += row[1] * r;
        }
        assert!((gw[0] - expected[0]).abs() < 1e-14 && (gw[1] - expected[1]).abs() < 1e-14);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let p = random_module(1, 2, 2, OutputActivation::Relu);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bank = HiddenBank { d: 3, hidden: HIDDEN, h: random_vec(&mut rng, 60), c: random_vec(&mut rng, 60) };
        let tape = module_forward(&p, &random_vec(&mut rng, 6), &bank).unwrap();
        let mut g = p.zeros_like();
        let adj = module_backward(&p, &tape, &[0.0; 6], None, None, &mut g).unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
        assert!(adj.d_input.iter().chain(&adj.d_h_prev).chain(&adj.d_c_prev).all(|&v| v == 0.0));
    }

    #[test]
    fn module_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for (act, seed) in [(OutputActivation::Exp, 4u64), (OutputActivation::Relu, 9)] {
            let p = random_module(seed, 2, 2, act);
            let d = 3;
            let bank = HiddenBank { d, hidden: HIDDEN, h: random_vec(&mut rng, d * HIDDEN), c: random_vec(&mut rng, d * HIDDEN) };
            let inputs = random_vec(&mut rng, d * 2);
            let w_out = random_vec(&mut rng, d * 2);
            let w_h = random_vec(&mut rng, d * HIDDEN);
            let w_c = random_vec(&mut rng, d * HIDDEN);
            // scalar probe: linear functional of outputs and next bank
            let probe = |p: &LstmModuleParams<f64>, inputs: &[f64], bank: &HiddenBank<f64>| -> f64 {
                let t = module_forward(p, inputs, bank).unwrap();
                let nb = t.next_bank();
                t.outputs().iter().zip(&w_out).map(|(a, b)| a * b).sum::<f64>()
                    + nb.h.iter().zip(&w_h).map(|(a, b)| a * b).sum::<f64>()
                    + nb.c.iter().zip(&w_c).map(|(a, b)| a * b).sum::<f64>()
            };
            let tape = module_forward(&p, &inputs, &bank).unwrap();
            assert!(tape.relu_margin(act) > 1e-4, "draw too close to a kink");
            let mut g = p.zeros_like();
            let adj = module_backward(&p, &tape, &w_out, Some(&w_h), Some(&w_c), &mut g).unwrap();
            let eps = 1e-6;
            for idx in (0..p.as_slice().len()).step_by(7) {
                let mut plus = p.clone();
                plus.as_mut_slice()[idx] += eps;
                let mut minus = p.clone();
                minus.as_mut_slice()[idx] -= eps;
                let fd = (probe(&plus, &inputs, &bank) - probe(&minus, &inputs, &bank)) / (2.0 * eps);
                let an = g.as_slice()[idx];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "param {idx}: fd {fd} vs {an}");
            }
            for idx in 0..inputs.len() {
                let mut plus = inputs.clone();
                plus[idx] += eps;
                let mut minus = inputs.clone();
                minus[idx] -= eps;
                let fd = (probe(&p, &plus, &bank) - probe(&p, &minus, &bank)) / (2.0 * eps);
                assert!((fd - adj.d_input[idx]).abs() <= 1e-6 * (1.0 + fd.abs()));
            }
            for idx in (0..d * HIDDEN).step_by(5) {
                let mut plus = bank.clone();
                plus.c[idx] += eps;
                let mut minus = bank.clone();
                minus.c[idx] -= eps;
                let fd = (probe(&p, &inputs, &plus) - probe(&p, &inputs, &minus)) / (2.0 * eps);
                assert!((fd - adj.d_c_prev[idx]).abs() <= 1e-6 * (1.0 + fd.abs()));
                let mut plus = bank.clone();
                plus.h[idx] += eps;
                let mut minus = bank.clone();
                minus.h[idx] -= eps;
                let fd = (probe(&p, &inputs, &plus) - probe(&p, &inputs, &minus)) / (2.0 * eps);
                assert!((fd - adj.d_h_prev[idx]).abs() <= 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn coordinates_are_equivariant() {
        let p = random_module(8, 2, 2, OutputActivation::Exp);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = 4;
        let bank = HiddenBank { d, hidden: HIDDEN, h: random_vec(&mut rng, d * HIDDEN), c: random_vec(&mut rng, d * HIDDEN) };
        let inputs = random_vec(&mut rng, d * 2);
        let perm = [2usize, 0, 3, 1];
        let permute = |v: &[f64], w: usize| -> Vec<f64> { perm.iter().flat_map(|&l| v[l * w..(l + 1) * w].to_vec()).collect() };
        let pb = HiddenBank { d, hidden: HIDDEN, h: permute(&bank.h, HIDDEN), c: permute(&bank.c, HIDDEN) };
        let a = module_forward(&p, &inputs, &bank).unwrap();
        let b = module_forward(&p, &permute(&inputs, 2), &pb).unwrap();
        assert_eq!(permute(a.outputs(), 2), b.outputs().to_vec());
        assert_eq!(permute(&a.next_bank().h, HIDDEN), b.next_bank().h);
    }
}
