//! Decentralized optimizees (LASSO and ℓ1-regularized logistic regression),
//! their local oracles, the weighted ℓ1 proximal map, and a centralized
//! reference solver used for optimality-gap metrics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{param, shape, Error, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::linalg::{axpy, norm1, norm2, norm_inf, power_iteration, Mat};
use crate::scalar::{cast_slice, Scalar};

/// Size descriptor `(n, d, N, λ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProblemShape {
    /// node count
    pub n: usize,
    /// feature dimension
    pub d: usize,
    /// samples held by each node
    pub samples: usize,
    /// ℓ1 coefficient
    pub lambda: f64,
}

impl ProblemShape {
    pub fn new(n: usize, d: usize, samples: usize, lambda: f64) -> Self {
        Self { n, d, samples, lambda }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 || self.samples == 0 {
            return Err(param(format!("shape {self} has a zero dimension")));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(param(format!("lambda must be finite and nonnegative, got {}", self.lambda)));
        }
        Ok(())
    }
}

impl std::fmt::Display for ProblemShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.d, self.samples, self.lambda)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemKind {
    Lasso,
    Logistic,
}

impl std::fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ProblemKind::Lasso => "lasso",
            ProblemKind::Logistic => "logistic",
        })
    }
}

/// Data held privately by one node.
#[derive(Debug, Clone, PartialEq)]
pub struct Shard<T> {
    pub a: Mat<T>,
    pub b: Vec<T>,
}

/// One decentralized problem instance:
/// `min_x (1/n) Σ_i f_i(x) + λ‖x‖₁`.
///
/// LASSO uses `f_i(x) = ½‖A_i x − b_i‖²`; logistic regression uses the
/// per-sample average of the cross-entropy loss with labels in `{0, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizee<T> {
    shape: ProblemShape,
    kind: ProblemKind,
    seed: u64,
    planted: Vec<T>,
    shards: Vec<Shard<T>>,
}

#[inline]
fn sigmoid<T: Scalar>(t: T) -> T {
    if t >= T::zero() {
        T::one() / (T::one() + (-t).exp())
    } else {
        let e = t.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^t)` without overflow.
#[inline]
fn softplus<T: Scalar>(t: T) -> T {
    t.max(T::zero()) + (-t.abs()).exp().ln_1p()
}

impl<T: Scalar> Optimizee<T> {
    /// Assembles an instance from explicit shards.
    pub fn from_shards(kind: ProblemKind, lambda: f64, shards: Vec<Shard<T>>, seed: u64) -> Result<Self> {
        let first = shards.first().ok_or_else(|| param("optimizee needs at least one shard"))?;
        let (samples, d) = (first.a.rows(), first.a.cols());
        for (i, s) in shards.iter().enumerate() {
            if s.a.rows() != samples || s.a.cols() != d || s.b.len() != samples {
                return Err(shape(format!("shard {i} does not match {samples}x{d}")));
            }
            if kind == ProblemKind::Logistic && s.b.iter().any(|&v| v != T::zero() && v != T::one()) {
                return Err(param(format!("shard {i} has a logistic label outside {{0, 1}}")));
            }
        }
        let shape = ProblemShape::new(shards.len(), d, samples, lambda);
        shape.validate()?;
        Ok(Self { shape, kind, seed, planted: vec![T::zero(); d], shards })
    }

    #[inline]
    pub fn shape(&self) -> ProblemShape {
        self.shape
    }

    #[inline]
    pub fn kind(&self) -> ProblemKind {
        self.kind
    }

    #[inline]
    pub fn seed(&self) -> u64 {
        self.seed
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.shape.n
    }

    #[inline]
    pub fn d(&self) -> usize {
        self.shape.d
    }

    #[inline]
    pub fn lambda(&self) -> T {
        T::lit(self.shape.lambda)
    }

    /// Sparse coefficient vector the data was generated from.
    pub fn planted(&self) -> &[T] {
        &self.planted
    }

    pub fn shards(&self) -> &[Shard<T>] {
        &self.shards
    }

    pub fn shard(&self, i: usize) -> &Shard<T> {
        &self.shards[i]
    }

    /// Same instance with a different ℓ1 coefficient.
    pub fn with_lambda(mut self, lambda: f64) -> Result<Self> {
        self.shape.lambda = lambda;
        self.shape.validate()?;
        Ok(self)
    }

    /// Same instance rounded to another precision.
    pub fn cast<U: Scalar>(&self) -> Optimizee<U> {
        Optimizee {
            shape: self.shape,
            kind: self.kind,
            seed: self.seed,
            planted: cast_slice(&self.planted),
            shards: self.shards.iter().map(|s| Shard { a: s.a.cast(), b: cast_slice(&s.b) }).collect(),
        }
    }

    fn check(&self, i: usize, x: &[T]) -> Result<()> {
        if i >= self.n() {
            return Err(param(format!("node {i} out of range for n={}", self.n())));
        }
        if x.len() != self.d() {
            return Err(shape(format!("vector has length {}, expected d={}", x.len(), self.d())));
        }
        Ok(())
    }

    /// `f_i(x)`.
    pub fn local_loss(&self, i: usize, x: &[T]) -> Result<T> {
        self.check(i, x)?;
        Ok(self.local_loss_unchecked(i, x))
    }

    pub(crate) fn local_loss_unchecked(&self, i: usize, x: &[T]) -> T {
        let s = &self.shards[i];
        let ax = s.a.matvec(x);
        match self.kind {
            ProblemKind::Lasso => {
                let half = T::lit(0.5);
                ax.iter().zip(&s.b).map(|(&p, &b)| (p - b) * (p - b)).sum::<T>() * half
            }
            ProblemKind::Logistic => {
                let total: T = ax.iter().zip(&s.b).map(|(&t, &b)| softplus(t) - b * t).sum();
                total / T::lit(s.b.len() as f64)
            }
        }
    }

    /// `∇f_i(x)`.
    pub fn local_gradient(&self, i: usize, x: &[T]) -> Result<Vec<T>> {
        self.check(i, x)?;
        Ok(self.local_gradient_unchecked(i, x))
    }

    pub(crate) fn local_gradient_unchecked(&self, i: usize, x: &[T]) -> Vec<T> {
        let s = &self.shards[i];
        let ax = s.a.matvec(x);
        match self.kind {
            ProblemKind::Lasso => {
                let r: Vec<T> = ax.iter().zip(&s.b).map(|(&p, &b)| p - b).collect();
                s.a.t_matvec(&r)
            }
            ProblemKind::Logistic => {
                let inv = T::one() / T::lit(s.b.len() as f64);
                let r: Vec<T> = ax.iter().zip(&s.b).map(|(&t, &b)| (sigmoid(t) - b) * inv).collect();
                s.a.t_matvec(&r)
            }
        }
    }

    /// Hessian-vector product `∇²f_i(x) v`.
    pub fn local_hvp(&self, i: usize, x: &[T], v: &[T]) -> Result<Vec<T>> {
        self.check(i, x)?;
        self.check(i, v)?;
        Ok(self.local_hvp_unchecked(i, x, v))
    }

    pub(crate) fn local_hvp_unchecked(&self, i: usize, x: &[T], v: &[T]) -> Vec<T> {
        let s = &self.shards[i];
        let av = s.a.matvec(v);
        match self.kind {
            ProblemKind::Lasso => s.a.t_matvec(&av),
            ProblemKind::Logistic => {
                let ax = s.a.matvec(x);
                let inv = T::one() / T::lit(s.b.len() as f64);
                let w: Vec<T> = ax
                    .iter()
                    .zip(&av)
                    .map(|(&t, &q)| {
                        let sg = sigmoid(t);
                        sg * (T::one() - sg) * q * inv
                    })
                    .collect();
                s.a.t_matvec(&w)
            }
        }
    }

    /// Smooth part `(1/n) Σ_i f_i(x)`.
    pub fn smooth_objective(&self, x: &[T]) -> T {
        let total: T = (0..self.n()).map(|i| self.local_loss_unchecked(i, x)).sum();
        total / T::lit(self.n() as f64)
    }

    /// `(1/n) Σ_i ∇f_i(x)`.
    pub fn smooth_gradient(&self, x: &[T]) -> Vec<T> {
        let mut g = vec![T::zero(); self.d()];
        for i in 0..self.n() {
            axpy(T::one(), &self.local_gradient_unchecked(i, x), &mut g);
        }
        let inv = T::one() / T::lit(self.n() as f64);
        g.iter_mut().for_each(|v| *v *= inv);
        g
    }

    /// Upper bound on the Lipschitz constant of the smooth gradient.
    pub fn smoothness(&self) -> T {
        let n = self.n();
        let curvature = match self.kind {
            ProblemKind::Lasso => T::one() / T::lit(n as f64),
            ProblemKind::Logistic => T::one() / T::lit((4 * n * self.shape.samples) as f64),
        };
        let lmax = power_iteration(
            self.d(),
            |v| {
                let mut out = vec![T::zero(); v.len()];
                for s in &self.shards {
                    axpy(T::one(), &s.a.t_matvec(&s.a.matvec(v)), &mut out);
                }
                out
            },
            5000,
        );
        lmax * curvature
    }
}

/// `(1/n) Σ_i f_i(x) + λ‖x‖₁`.
pub fn global_objective<T: Scalar>(opt: &Optimizee<T>, x: &[T]) -> Result<T> {
    if x.len() != opt.d() {
        return Err(shape(format!("vector has length {}, expected d={}", x.len(), opt.d())));
    }
    Ok(opt.smooth_objective(x) + opt.lambda() * norm1(x))
}

/// Scalar soft threshold `sign(v)·max(|v| − t, 0)`.
#[inline]
pub fn soft_threshold<T: Scalar>(v: T, t: T) -> T {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        T::zero()
    }
}

/// Proximal map of `λ‖·‖₁` in the metric `Diag(p)⁻¹`:
/// `argmin_y λ‖y‖₁ + ½‖y − v‖²_{Diag(p)⁻¹}`, a coordinate-wise soft threshold at `λ p_l`.
pub fn prox_l1_weighted<T: Scalar>(v: &[T], p: &[T], lambda: T) -> Result<Vec<T>> {
    if v.len() != p.len() {
        return Err(shape(format!("prox input length {} vs weight length {}", v.len(), p.len())));
    }
    if let Some(bad) = p.iter().position(|&w| !(w > T::zero())) {
        return Err(param(format!("prox weight p[{bad}] = {} is not positive", p[bad])));
    }
    if !(lambda >= T::zero()) {
        return Err(param(format!("lambda must be nonnegative, got {lambda}")));
    }
    Ok(v.iter().zip(p).map(|(&vi, &pi)| soft_threshold(vi, lambda * pi)).collect())
}

/// Accurate reference solution for gap metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionOracle {
    pub x_star: Vec<f64>,
    pub objective_star: f64,
    /// Fixed-point residual actually reached.
    pub tolerance: f64,
    pub iterations: usize,
}

/// FISTA iterate trace recorded by [`centralized_solve_traced`].
#[derive(Debug, Clone, Default)]
pub struct SolveTrace {
    pub objectives: Vec<f64>,
    pub restarts: Vec<usize>,
}

/// Solves the centralized composite problem by FISTA with adaptive restart,
/// step `1/L`, stopping when `‖x − prox(x − ∇f(x)/L)‖∞ ≤ tol`.
pub fn centralized_solve(opt: &Optimizee<f64>, tol: f64, max_iters: usize) -> Result<SolutionOracle> {
    centralized_solve_traced(opt, tol, max_iters, None)
}

pub fn centralized_solve_traced(
    opt: &Optimizee<f64>,
    tol: f64,
    max_iters: usize,
    mut trace: Option<&mut SolveTrace>,
) -> Result<SolutionOracle> {
    if !(tol > 0.0) {
        return Err(param(format!("oracle tolerance must be positive, got {tol}")));
    }
    let d = opt.d();
    let lambda = opt.shape().lambda;
    // slight inflation guards against power-iteration underestimates
    let lip = opt.smoothness() * 1.0001;
    let step = if lip > 0.0 { 1.0 / lip } else { 1.0 };
    let prox_step = |v: &[f64]| -> Vec<f64> {
        let g = opt.smooth_gradient(v);
        v.iter().zip(&g).map(|(&vi, &gi)| soft_threshold(vi - step * gi, step * lambda)).collect()
    };
    let residual = |x: &[f64]| -> f64 {
        let px = prox_step(x);
        x.iter().zip(&px).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    };

    let mut x = vec![0.0; d];
    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut res = residual(&x);
    let mut iters = 0;
    while res > tol {
        if iters >= max_iters {
            return Err(Error::Convergence { iterations: iters, residual: res });
        }
        let x_next = prox_step(&y);
        // gradient-mapping restart: momentum direction disagrees with progress
        let restart = y
            .iter()
            .zip(&x_next)
            .zip(&x)
            .map(|((&yi, &xn), &xo)| (yi - xn) * (xn - xo))
            .sum::<f64>()
            > 0.0;
        if restart {
            t = 1.0;
            y = x_next.clone();
            if let Some(tr) = trace.as_deref_mut() {
                tr.restarts.push(iters);
            }
        } else {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let beta = (t - 1.0) / t_next;
            y = x_next.iter().zip(&x).map(|(&xn, &xo)| xn + beta * (xn - xo)).collect();
            t = t_next;
        }
        x = x_next;
        iters += 1;
        res = residual(&x);
        if let Some(tr) = trace.as_deref_mut() {
            tr.objectives.push(global_objective(opt, &x)?);
        }
    }
    let objective_star = global_objective(opt, &x)?;
    Ok(SolutionOracle { x_star: x, objective_star, tolerance: res, iterations: iters })
}

/// `(1/n) Σ_i ‖x_i − x̄‖₂`.
pub fn consensus_error<T: Scalar>(states: &[Vec<T>]) -> Result<T> {
    let first = states.first().ok_or_else(|| param("consensus error of an empty list"))?;
    let d = first.len();
    if states.iter().any(|s| s.len() != d) {
        return Err(shape("consensus error over vectors of different lengths"));
    }
    let mean = average(states);
    let total: T = states
        .iter()
        .map(|s| norm2(&s.iter().zip(&mean).map(|(&a, &b)| a - b).collect::<Vec<_>>()))
        .sum();
    Ok(total / T::lit(states.len() as f64))
}

/// Coordinate-wise mean of equal-length vectors.
pub fn average<T: Scalar>(states: &[Vec<T>]) -> Vec<T> {
    let d = states.first().map_or(0, Vec::len);
    let mut mean = vec![T::zero(); d];
    for s in states {
        axpy(T::one(), s, &mut mean);
    }
    let inv = T::one() / T::lit(states.len() as f64);
    mean.iter_mut().for_each(|v| *v *= inv);
    mean
}

/// `F(x) − F★`, clamped to zero when the deficit is within the oracle's accuracy.
pub fn optimality_gap(opt: &Optimizee<f64>, oracle: &SolutionOracle, x: &[f64]) -> Result<f64> {
    let gap = global_objective(opt, x)? - oracle.objective_star;
    let slack = oracle.tolerance * (1.0 + norm_inf(&opt.smooth_gradient(&oracle.x_star)) + opt.shape().lambda)
        + 4.0 * f64::EPSILON * oracle.objective_star.abs();
    Ok(if gap < 0.0 && gap >= -slack { 0.0 } else { gap })
}

fn planted_sparse(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let mut x: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let zeroed = (3 * d).div_ceil(4);
    let mut order: Vec<usize> = (0..d).collect();
    // stable sort keeps the lower index first among equal magnitudes
    order.sort_by(|&a, &b| x[a].abs().total_cmp(&x[b].abs()));
    for &i in order.iter().take(zeroed) {
        x[i] = 0.0;
    }
    x
}

fn stacked_normal(rng: &mut ChaCha8Rng, rows: usize, d: usize) -> Vec<f64> {
    (0..rows * d).map(|_| StandardNormal.sample(rng)).collect()
}

fn split_rows(shape: &ProblemShape, a: &[f64], b: Vec<f64>) -> Vec<Shard<f64>> {
    let (rows, d) = (shape.samples, shape.d);
    (0..shape.n)
        .map(|i| Shard {
            a: Mat::from_row_major(rows, d, a[i * rows * d..(i + 1) * rows * d].to_vec()),
            b: b[i * rows..(i + 1) * rows].to_vec(),
        })
        .collect()
}

/// Noise scale on synthetic LASSO observations.
pub const LASSO_NOISE: f64 = 0.1;

/// Synthetic LASSO: stacked `A` and planted `x★` standard normal (in that
/// stream order), the `⌈0.75 d⌉` smallest-magnitude entries of `x★` zeroed,
/// `b = A x★ + 0.1 z`, rows dealt evenly to nodes.
pub fn gen_lasso(shape: ProblemShape, seed: u64) -> Result<Optimizee<f64>> {
    shape.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = shape.n * shape.samples;
    let a = stacked_normal(&mut rng, rows, shape.d);
    let planted = planted_sparse(&mut rng, shape.d);
    let b: Vec<f64> = (0..rows)
        .map(|r| {
            let z: f64 = StandardNormal.sample(&mut rng);
            let row = &a[r * shape.d..(r + 1) * shape.d];
            row.iter().zip(&planted).map(|(p, q)| p * q).sum::<f64>() + LASSO_NOISE * z
        })
        .collect();
    let shards = split_rows(&shape, &a, b);
    Ok(Optimizee { shape, kind: ProblemKind::Lasso, seed, planted, shards })
}

/// Synthetic logistic regression: data as in [`gen_lasso`], labels
/// `b_j = 1` iff `a_j·x★ ≥ 0`.
pub fn gen_logistic(shape: ProblemShape, seed: u64) -> Result<Optimizee<f64>> {
    shape.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = shape.n * shape.samples;
    let a = stacked_normal(&mut rng, rows, shape.d);
    let planted = planted_sparse(&mut rng, shape.d);
    let b = labels_for(&a, &planted, shape.d);
    let shards = split_rows(&shape, &a, b);
    Ok(Optimizee { shape, kind: ProblemKind::Logistic, seed, planted, shards })
}

fn labels_for(a: &[f64], x: &[f64], d: usize) -> Vec<f64> {
    a.chunks(d)
        .map(|row| {
            let t: f64 = row.iter().zip(x).map(|(p, q)| p * q).sum();
            if t >= 0.0 {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

pub fn generate(kind: ProblemKind, shape: ProblemShape, seed: u64) -> Result<Optimizee<f64>> {
    match kind {
        ProblemKind::Lasso => gen_lasso(shape, seed),
        ProblemKind::Logistic => gen_logistic(shape, seed),
    }
}

const PROBLEM_MAGIC: &[u8; 8] = b"MLDOPROB";
const PROBLEM_VERSION: u32 = 1;

impl Optimizee<f64> {
    /// Binary layout: magic, version, kind, shape, seed, planted vector, then
    /// each shard's row-major `A_i` followed by `b_i`, all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new(PROBLEM_MAGIC, PROBLEM_VERSION);
        w.u8(match self.kind {
            ProblemKind::Lasso => 0,
            ProblemKind::Logistic => 1,
        });
        w.u64(self.shape.n as u64);
        w.u64(self.shape.d as u64);
        w.u64(self.shape.samples as u64);
        w.f64(self.shape.lambda);
        w.u64(self.seed);
        w.f64s(&self.planted);
        for s in &self.shards {
            w.f64s(s.a.as_slice());
            w.f64s(&s.b);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, PROBLEM_MAGIC, PROBLEM_VERSION)?;
        let kind = match r.u8()? {
            0 => ProblemKind::Lasso,
            1 => ProblemKind::Logistic,
            k => return Err(Error::Format(format!("unknown problem kind tag {k}"))),
        };
        let shape = ProblemShape::new(r.usize()?, r.usize()?, r.usize()?, r.f64()?);
        shape.validate()?;
        let seed = r.u64()?;
        let planted = r.f64s(shape.d)?;
        let mut shards = Vec::with_capacity(shape.n);
        for _ in 0..shape.n {
            let a = Mat::from_row_major(shape.samples, shape.d, r.f64s(shape.samples * shape.d)?);
            let b = r.f64s(shape.samples)?;
            shards.push(Shard { a, b });
        }
        r.expect_end()?;
        Ok(Self { shape, kind, seed, planted, shards })
    }
}
