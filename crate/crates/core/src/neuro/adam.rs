use super::params::MiLoDoParams;
use crate::error::{param, shape, Result};
use crate::scalar::Scalar;

/// Adam moments and hyperparameters for a [`MiLoDoParams`] tree.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: MiLoDoParams<T>,
    pub v: MiLoDoParams<T>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    /// Fresh state with `(β₁, β₂) = (0.9, 0.999)` and `ε = 1e-8`.
    pub fn new(like: &MiLoDoParams<T>, lr: f64) -> Self {
        Self { m: like.zeros_like(), v: like.zeros_like(), t: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn cast<U: Scalar>(&self) -> AdamState<U> {
        AdamState {
            m: self.m.cast(),
            v: self.v.cast(),
            t: self.t,
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// One bias-corrected Adam update. A non-finite gradient is rejected
/// before anything is modified.
pub fn adam_step<T: Scalar>(params: &mut MiLoDoParams<T>, grads: &MiLoDoParams<T>, state: &mut AdamState<T>) -> Result<()> {
    if !params.same_layout(grads) || !params.same_layout(&state.m) {
        return Err(shape("adam: parameter, gradient and moment layouts differ"));
    }
    if !grads.is_finite() {
        return Err(param("adam: non-finite gradient"));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::lit(state.beta1), T::lit(state.beta2));
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    let (lr, eps) = (T::lit(state.lr), T::lit(state.eps));
    let modules = params.modules_mut().zip(grads.modules()).zip(state.m.modules_mut().zip(state.v.modules_mut()));
    for ((p, g), (m, v)) in modules {
        let slices = p.as_mut_slice().iter_mut().zip(g.as_slice());
        for ((p, &g), (m, v)) in slices.zip(m.as_mut_slice().iter_mut().zip(v.as_mut_slice().iter_mut())) {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_topology, TopologyKind};
    use crate::neuro::params::init_random;

    #[test]
    fn first_step_moves_by_lr_sign() {
        let t = build_topology(&TopologyKind::Ring, 3, 0).unwrap();
        let mut p = init_random::<f64>(&t, 0);
        let before = p.clone();
        let mut g = p.zeros_like();
        let flat: Vec<f64> = (0..g.num_params()).map(|k| if k % 2 == 0 { 0.37 } else { -2.5 }).collect();
        g.set_flat(&flat).unwrap();
        let mut s = AdamState::new(&p, 1e-3);
        adam_step(&mut p, &g, &mut s).unwrap();
        for (k, (a, b)) in p.to_flat().iter().zip(before.to_flat()).enumerate() {
            let expected = -1e-3 * flat[k].signum();
            assert!((a - b - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn quadratic_matches_hand_stepped_adam() {
        // f(θ) = ½ a θ² per coordinate, stepped by hand in plain arithmetic
        let t = build_topology(&TopologyKind::Ring, 3, 0).unwrap();
        let mut p = init_random::<f64>(&t, 4);
        let start = p.to_flat();
        let a = 2.5;
        let mut s = AdamState::new(&p, 0.1);
        for _ in 0..3 {
            let mut g = p.zeros_like();
            g.set_flat(&p.to_flat().iter().map(|th| a * th).collect::<Vec<_>>()).unwrap();
            adam_step(&mut p, &g, &mut s).unwrap();
        }
        for (k, &th0) in start.iter().enumerate() {
            let (mut th, mut m, mut v) = (th0, 0.0f64, 0.0f64);
            for step in 1..=3 {
                let g = a * th;
                m = 0.9 * m + 0.1 * g;
                v = 0.999 * v + 0.001 * g * g;
                let mh = m / (1.0 - 0.9f64.powi(step));
                let vh = v / (1.0 - 0.999f64.powi(step));
                th -= 0.1 * mh / (vh.sqrt() + 1e-8);
            }
            assert!((p.get_flat(k) - th).abs() < 1e-12, "coordinate {k}");
        }
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let t = build_topology(&TopologyKind::Ring, 3, 0).unwrap();
        let mut p = init_random::<f64>(&t, 0);
        let before = p.clone();
        let g = p.zeros_like();
        let mut s = AdamState::new(&p, 1e-2);
        for _ in 0..5 {
            adam_step(&mut p, &g, &mut s).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let t = build_topology(&TopologyKind::Ring, 3, 0).unwrap();
        let mut p = init_random::<f64>(&t, 0);
        let mut g = p.zeros_like();
        *g.flat_mut(3) = f64::NAN;
        let mut s = AdamState::new(&p, 1e-2);
        assert!(adam_step(&mut p, &g, &mut s).is_err());
        assert_eq!(s.t, 0);
    }
}
