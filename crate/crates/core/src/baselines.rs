//! Handcrafted decentralized proximal algorithms: Prox-DGD, Prox-ATC,
//! PG-EXTRA and Prox-ED. Every neighbor aggregation goes through one of two
//! mixing forms; the difference form keeps the all-equal subspace invariant
//! even when the stored weights are rounded.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{param, shape, Error, Result};
use crate::graph::{GossipMatrix, Topology};
use crate::linalg::all_finite;
use crate::metrics::{IterationRecord, MetricsRecorder};
use crate::problems::{soft_threshold, Optimizee, ProblemKind, ProblemShape, SolutionOracle};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    ProxDgd,
    ProxAtc,
    PgExtra,
    ProxEd,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [Algorithm::ProxEd, Algorithm::PgExtra, Algorithm::ProxAtc, Algorithm::ProxDgd];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::ProxDgd => "prox-dgd",
            Algorithm::ProxAtc => "prox-atc",
            Algorithm::PgExtra => "pg-extra",
            Algorithm::ProxEd => "prox-ed",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| param(format!("unknown algorithm `{s}`")))
    }
}

/// How `W x` is evaluated at node `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixingForm {
    /// `x_i − Σ_{j∈N(i)} w_ij (x_i − x_j)`
    #[default]
    Robust,
    /// `Σ_{j∈N(i)∪{i}} w_ij x_j`
    Direct,
}

/// Neighbor aggregation over an `n × d` stack of vectors.
struct Mixer<'a, T> {
    w: &'a GossipMatrix<T>,
    topology: &'a Topology,
    form: MixingForm,
}

impl<T: Scalar> Mixer<'_, T> {
    /// `Σ_j w_ij (v_i − v_j)`, or `v_i − Σ_j w_ij v_j` in direct form.
    fn disagreement(&self, v: &[Vec<T>], i: usize) -> Vec<T> {
        let d = v[i].len();
        match self.form {
            MixingForm::Robust => {
                let mut out = vec![T::zero(); d];
                for &j in self.topology.neighbors(i) {
                    let w = self.w.get(i, j);
                    for l in 0..d {
                        out[l] += w * (v[i][l] - v[j][l]);
                    }
                }
                out
            }
            MixingForm::Direct => {
                let wv = self.weighted_sum(v, i);
                (0..d).map(|l| v[i][l] - wv[l]).collect()
            }
        }
    }

    fn weighted_sum(&self, v: &[Vec<T>], i: usize) -> Vec<T> {
        let d = v[i].len();
        let mut out: Vec<T> = v[i].iter().map(|&x| self.w.get(i, i) * x).collect();
        for &j in self.topology.neighbors(i) {
            let w = self.w.get(i, j);
            for l in 0..d {
                out[l] += w * v[j][l];
            }
        }
        out
    }

    /// `(W v)_i`.
    fn mix(&self, v: &[Vec<T>], i: usize) -> Vec<T> {
        match self.form {
            MixingForm::Robust => {
                let dis = self.disagreement(v, i);
                v[i].iter().zip(dis).map(|(&a, b)| a - b).collect()
            }
            MixingForm::Direct => self.weighted_sum(v, i),
        }
    }

    /// `(((I + W)/2) v)_i`.
    fn half_mix(&self, v: &[Vec<T>], i: usize) -> Vec<T> {
        let half = T::lit(0.5);
        match self.form {
            MixingForm::Robust => {
                let dis = self.disagreement(v, i);
                v[i].iter().zip(dis).map(|(&a, b)| a - half * b).collect()
            }
            MixingForm::Direct => {
                let wv = self.weighted_sum(v, i);
                v[i].iter().zip(wv).map(|(&a, b)| half * a + half * b).collect()
            }
        }
    }
}

/// Evaluates `W x` for every node in the difference form.
pub fn gossip_mix_robust<T: Scalar>(values: &[Vec<T>], gossip: &GossipMatrix<T>, topology: &Topology) -> Vec<Vec<T>> {
    let m = Mixer { w: gossip, topology, form: MixingForm::Robust };
    (0..values.len()).map(|i| m.mix(values, i)).collect()
}

/// Evaluates `W x` for every node as a plain weighted sum.
pub fn gossip_mix_direct<T: Scalar>(values: &[Vec<T>], gossip: &GossipMatrix<T>, topology: &Topology) -> Vec<Vec<T>> {
    let m = Mixer { w: gossip, topology, form: MixingForm::Direct };
    (0..values.len()).map(|i| m.mix(values, i)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineConfig<T> {
    pub algorithm: Algorithm,
    pub gossip: GossipMatrix<T>,
    pub gamma: f64,
    pub iterations: usize,
    pub mixing: MixingForm,
}

impl<T: Scalar> BaselineConfig<T> {
    pub fn new(algorithm: Algorithm, gossip: GossipMatrix<T>, gamma: f64, iterations: usize) -> Self {
        Self { algorithm, gossip, gamma, iterations, mixing: MixingForm::Robust }
    }

    pub fn validate(&self, topology: &Topology) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(param(format!("step size must be positive, got {}", self.gamma)));
        }
        let tol = if T::BITS == 32 { 1e-6 } else { 1e-12 };
        self.gossip.validate(topology, tol)
    }
}

/// Per-node vectors of the baseline recursions; fields an algorithm does not
/// use stay zero. `k` counts completed iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineState<T> {
    pub k: usize,
    pub x: Vec<Vec<T>>,
    pub z: Vec<Vec<T>>,
    pub y: Vec<Vec<T>>,
    pub y_tilde: Vec<Vec<T>>,
    pub z_tilde: Vec<Vec<T>>,
    /// `x^{k−1}` (PG-EXTRA)
    pub x_prev: Vec<Vec<T>>,
}

impl<T: Scalar> BaselineState<T> {
    pub fn zeros(n: usize, d: usize) -> Self {
        let z = vec![vec![T::zero(); d]; n];
        Self { k: 0, x: z.clone(), z: z.clone(), y: z.clone(), y_tilde: z.clone(), z_tilde: z.clone(), x_prev: z }
    }

    fn check_finite(&self) -> Result<()> {
        for i in 0..self.x.len() {
            let fields = [&self.x, &self.z, &self.y, &self.y_tilde, &self.z_tilde];
            if fields.iter().any(|f| !all_finite(&f[i])) {
                return Err(Error::Divergence { iteration: self.k, node: i });
            }
        }
        Ok(())
    }
}

fn prox<T: Scalar>(v: &[T], gamma: T, lambda: T) -> Vec<T> {
    v.iter().map(|&x| soft_threshold(x, gamma * lambda)).collect()
}

fn check_state<T: Scalar>(state: &BaselineState<T>, opt: &Optimizee<T>, topology: &Topology) -> Result<()> {
    if opt.n() != topology.n() || state.x.len() != opt.n() || state.x.iter().any(|x| x.len() != opt.d()) {
        return Err(shape("baseline state does not match the optimizee and topology"));
    }
    Ok(())
}

fn mixer<'a, T: Scalar>(cfg: &'a BaselineConfig<T>, topology: &'a Topology) -> Mixer<'a, T> {
    Mixer { w: &cfg.gossip, topology, form: cfg.mixing }
}

fn finish<T: Scalar>(mut next: BaselineState<T>, k: usize) -> Result<BaselineState<T>> {
    next.k = k + 1;
    next.check_finite()?;
    Ok(next)
}

/// `z = x − γ∇f(x)`;  `x = prox_{γr}((W z)_i)`.
pub fn prox_dgd_step<T: Scalar>(
    state: &BaselineState<T>,
    opt: &Optimizee<T>,
    topology: &Topology,
    cfg: &BaselineConfig<T>,
) -> Result<BaselineState<T>> {
    check_state(state, opt, topology)?;
    let (g, lam) = (T::lit(cfg.gamma), opt.lambda());
    let m = mixer(cfg, topology);
    let mut next = state.clone();
    next.z = (0..opt.n()).map(|i| grad_step(opt, i, &state.x[i], g)).collect();
    next.x = (0..opt.n()).map(|i| prox(&m.mix(&next.z, i), g, lam)).collect();
    finish(next, state.k)
}

/// `z = x − γ∇f(x)`; `z̃ = ỹ − z + z_prev`; `y = 2ỹ − z̃ + Σw(z̃_i − z̃_j)`;
/// `ỹ = (W y)_i`; `x = prox_{γr}(ỹ)`.
pub fn prox_atc_step<T: Scalar>(
    state: &BaselineState<T>,
    opt: &Optimizee<T>,
    topology: &Topology,
    cfg: &BaselineConfig<T>,
) -> Result<BaselineState<T>> {
    check_state(state, opt, topology)?;
    let (g, lam, two) = (T::lit(cfg.gamma), opt.lambda(), T::lit(2.0));
    let (n, d) = (opt.n(), opt.d());
    let m = mixer(cfg, topology);
    let mut next = state.clone();
    next.z = (0..n).map(|i| grad_step(opt, i, &state.x[i], g)).collect();
    next.z_tilde = (0..n)
        .map(|i| (0..d).map(|l| state.y_tilde[i][l] - next.z[i][l] + state.z[i][l]).collect())
        .collect();
    next.y = (0..n)
        .map(|i| {
            let dis = m.disagreement(&next.z_tilde, i);
            (0..d).map(|l| two * state.y_tilde[i][l] - next.z_tilde[i][l] + dis[l]).collect()
        })
        .collect();
    next.y_tilde = (0..n).map(|i| m.mix(&next.y, i)).collect();
    next.x = (0..n).map(|i| prox(&next.y_tilde[i], g, lam)).collect();
    finish(next, state.k)
}

/// `z = (W x)_i − γ∇f(x)`; `z̃ = z` at `k = 0`, otherwise
/// `z̃ = z + z̃_prev − x^{k−1} + ½Σw(x^{k−1}_i − x^{k−1}_j) + γ∇f(x^{k−1})`;
/// `x = prox_{γr}(z̃)`.
pub fn pg_extra_step<T: Scalar>(
    state: &BaselineState<T>,
    opt: &Optimizee<T>,
    topology: &Topology,
    cfg: &BaselineConfig<T>,
) -> Result<BaselineState<T>> {
    check_state(state, opt, topology)?;
    let (g, lam, half) = (T::lit(cfg.gamma), opt.lambda(), T::lit(0.5));
    let (n, d) = (opt.n(), opt.d());
    let m = mixer(cfg, topology);
    let mut next = state.clone();
    next.z = (0..n)
        .map(|i| {
            let wx = m.mix(&state.x, i);
            let grad = opt.local_gradient_unchecked(i, &state.x[i]);
            (0..d).map(|l| wx[l] - g * grad[l]).collect()
        })
        .collect();
    next.z_tilde = if state.k == 0 {
        next.z.clone()
    } else {
        (0..n)
            .map(|i| {
                let dis = m.disagreement(&state.x_prev, i);
                let grad = opt.local_gradient_unchecked(i, &state.x_prev[i]);
                (0..d)
                    .map(|l| {
                        next.z[i][l] + state.z_tilde[i][l] - state.x_prev[i][l] + half * dis[l] + g * grad[l]
                    })
                    .collect()
            })
            .collect()
    };
    next.x_prev = state.x.clone();
    next.x = (0..n).map(|i| prox(&next.z_tilde[i], g, lam)).collect();
    finish(next, state.k)
}

/// `z = x − γ∇f(x)`; `y = ỹ + z − z_prev`; `ỹ = y − ½Σw(y_i − y_j)`;
/// `x = prox_{γr}(ỹ)`.
pub fn prox_ed_step<T: Scalar>(
    state: &BaselineState<T>,
    opt: &Optimizee<T>,
    topology: &Topology,
    cfg: &BaselineConfig<T>,
) -> Result<BaselineState<T>> {
    check_state(state, opt, topology)?;
    let (g, lam) = (T::lit(cfg.gamma), opt.lambda());
    let (n, d) = (opt.n(), opt.d());
    let m = mixer(cfg, topology);
    let mut next = state.clone();
    next.z = (0..n).map(|i| grad_step(opt, i, &state.x[i], g)).collect();
    next.y = (0..n)
        .map(|i| (0..d).map(|l| state.y_tilde[i][l] + next.z[i][l] - state.z[i][l]).collect())
        .collect();
    next.y_tilde = (0..n).map(|i| m.half_mix(&next.y, i)).collect();
    next.x = (0..n).map(|i| prox(&next.y_tilde[i], g, lam)).collect();
    finish(next, state.k)
}

fn grad_step<T: Scalar>(opt: &Optimizee<T>, i: usize, x: &[T], gamma: T) -> Vec<T> {
    let grad = opt.local_gradient_unchecked(i, x);
    x.iter().zip(grad).map(|(&a, b)| a - gamma * b).collect()
}

pub fn baseline_step<T: Scalar>(
    state: &BaselineState<T>,
    opt: &Optimizee<T>,
    topology: &Topology,
    cfg: &BaselineConfig<T>,
) -> Result<BaselineState<T>> {
    match cfg.algorithm {
        Algorithm::ProxDgd => prox_dgd_step(state, opt, topology, cfg),
        Algorithm::ProxAtc => prox_atc_step(state, opt, topology, cfg),
        Algorithm::PgExtra => pg_extra_step(state, opt, topology, cfg),
        Algorithm::ProxEd => prox_ed_step(state, opt, topology, cfg),
    }
}

#[derive(Debug, Clone)]
pub struct BaselineRun<T> {
    /// last finite state
    pub state: BaselineState<T>,
    pub records: Vec<IterationRecord>,
    pub diverged: Option<Error>,
}

/// Runs `cfg.iterations` steps from the all-zero state, recording metrics
/// after each. A divergence ends the run early and is reported in the result.
pub fn run_baseline<T: Scalar>(
    opt: &Optimizee<T>,
    topology: &Topology,
    cfg: &BaselineConfig<T>,
    oracle: Option<&SolutionOracle>,
    timing: bool,
) -> Result<BaselineRun<T>> {
    cfg.validate(topology)?;
    if cfg.iterations == 0 {
        return Err(param("a baseline run needs at least one iteration"));
    }
    let recorder = MetricsRecorder::new(opt, oracle, timing);
    let mut state = BaselineState::zeros(opt.n(), opt.d());
    let mut records = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        match baseline_step(&state, opt, topology, cfg) {
            Ok(next) => state = next,
            Err(e @ Error::Divergence { .. }) => return Ok(BaselineRun { state, records, diverged: Some(e) }),
            Err(e) => return Err(e),
        }
        records.push(recorder.record(state.k, &state.x)?);
    }
    Ok(BaselineRun { state, records, diverged: None })
}

/// Hand-tuned step sizes `(Prox-ED, PG-EXTRA, Prox-ATC, Prox-DGD)` per problem shape.
const TUNED_STEPS: [(ProblemKind, (usize, usize, usize, f64), [f64; 4]); 7] = [
    (ProblemKind::Lasso, (10, 300, 10, 0.1), [0.03, 0.02, 0.025, 0.04]),
    (ProblemKind::Lasso, (10, 30000, 1000, 0.1), [0.03, 0.02, 0.025, 0.04]),
    (ProblemKind::Lasso, (10, 200, 10, 0.1), [0.05, 0.04, 0.045, 0.05]),
    (ProblemKind::Lasso, (10, 20000, 1000, 0.1), [0.05, 0.04, 0.045, 0.05]),
    (ProblemKind::Lasso, (10, 15000, 1000, 0.0), [0.08, 0.05, 0.085, 0.09]),
    (ProblemKind::Logistic, (10, 50, 100, 0.1), [1.0, 0.8, 0.4, 1.0]),
    (ProblemKind::Logistic, (10, 14, 100, 0.1), [1.9, 1.7, 1.8, 2.0]),
];

/// Default step size for a known problem shape, if one has been tuned.
///
/// The LASSO entries were tuned for the per-sample average `(1/2N)‖A_i x − b_i‖²`;
/// since `f_i` here omits the `1/N`, they are divided by `N`.
pub fn default_gamma(kind: ProblemKind, shape: ProblemShape, algorithm: Algorithm) -> Option<f64> {
    let col = match algorithm {
        Algorithm::ProxEd => 0,
        Algorithm::PgExtra => 1,
        Algorithm::ProxAtc => 2,
        Algorithm::ProxDgd => 3,
    };
    TUNED_STEPS
        .iter()
        .find(|(k, (n, d, s, l), _)| {
            *k == kind && *n == shape.n && *d == shape.d && *s == shape.samples && *l == shape.lambda
        })
        .map(|(_, _, g)| match kind {
            ProblemKind::Lasso => g[col] / shape.samples as f64,
            ProblemKind::Logistic => g[col],
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_topology, ring_gossip_weights, TopologyKind};

    #[test]
    fn robust_mix_hand_example() {
        let t = build_topology(&TopologyKind::Ring, 3, 0).unwrap();
        let w = ring_gossip_weights::<f64>(&t).unwrap();
        let out = gossip_mix_robust(&[vec![0.0], vec![3.0], vec![6.0]], &w, &t);
        for v in out {
            assert!((v[0] - 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn robust_mix_keeps_consensus_under_noise() {
        let t = build_topology(&TopologyKind::Ring, 5, 0).unwrap();
        let w = ring_gossip_weights::<f64>(&t).unwrap();
        let mut dense: Vec<f64> = (0..25).map(|k| w.get(k / 5, k % 5)).collect();
        dense.iter_mut().enumerate().for_each(|(k, v)| *v *= 1.0 + 1e-3 * (k as f64).sin());
        let noisy = GossipMatrix::from_dense(5, dense).unwrap();
        let vals = vec![vec![1.25, -7.5]; 5];
        assert_eq!(gossip_mix_robust(&vals, &noisy, &t), vals);
        assert_ne!(gossip_mix_direct(&vals, &noisy, &t), vals);
    }

    #[test]
    fn table_lookup() {
        let s = ProblemShape::new(10, 300, 10, 0.1);
        assert_eq!(default_gamma(ProblemKind::Lasso, s, Algorithm::ProxEd), Some(0.03 / 10.0));
        assert_eq!(default_gamma(ProblemKind::Lasso, s, Algorithm::ProxDgd), Some(0.04 / 10.0));
        let big = ProblemShape::new(10, 30000, 1000, 0.1);
        assert_eq!(default_gamma(ProblemKind::Lasso, big, Algorithm::PgExtra), Some(0.02 / 1000.0));
        assert_eq!(default_gamma(ProblemKind::Logistic, s, Algorithm::ProxEd), None);
        let s = ProblemShape::new(10, 14, 100, 0.1);
        assert_eq!(default_gamma(ProblemKind::Logistic, s, Algorithm::ProxAtc), Some(1.8));
    }

    #[test]
    fn algorithm_names_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(a.name().parse::<Algorithm>().unwrap(), a);
        }
        assert!("prox-foo".parse::<Algorithm>().is_err());
    }
}
