//! Truncated-BPTT training of MiLoDo parameters.
//!
//! A rollout of `K` iterations is cut into `K / K_T` segments. Each segment is
//! run with a tape, its averaged loss is differentiated back to the
//! parameters, and one Adam step is taken. States crossing a segment boundary
//! are carried forward without gradient.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::graph::{GossipMatrix, Topology};
use crate::linalg::norm1;
use crate::milodo::{fresh_states, iteration_backward, milodo_iteration_with, DualCoupling, IterationTape, NodeState, StateAdjoint};
use crate::neuro::{adam_step, init_random, init_special, AdamState, MiLoDoParams};
use crate::problems::{average, Optimizee};
use crate::scalar::Scalar;
use crate::seeds::derive_seed;

/// One curriculum stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    /// truncation length
    pub k_t: usize,
    /// rollout length
    pub k: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_t == 0 || self.k == 0 || self.k % self.k_t != 0 {
            return Err(param(format!("K_T={} must be positive and divide K={}", self.k_t, self.k)));
        }
        if self.batch_size == 0 {
            return Err(param("batch size must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(param(format!("learning rate must be finite and nonnegative, got {}", self.lr)));
        }
        Ok(())
    }

    pub fn segments(&self) -> usize {
        self.k / self.k_t
    }
}

/// The five-stage curriculum: `(K_T, K)` of `(5,10)`, `(10,20)`, `(20,40)`,
/// `(40,80)`, `(20,100)` with decaying learning rates, batch size 32.
pub fn default_schedule() -> Vec<StageConfig> {
    [(5, 10, 5e-4, 20), (10, 20, 1e-4, 10), (20, 40, 5e-5, 10), (40, 80, 1e-5, 10), (20, 100, 1e-5, 5)]
        .into_iter()
        .map(|(k_t, k, lr, epochs)| StageConfig { k_t, k, lr, epochs, batch_size: 32 })
        .collect()
}

/// Objective averaged along the trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// `f(x̄) + r(x̄)`
    #[default]
    Composite,
    /// `f(x̄)` only
    Smooth,
}

/// Batch mean of per-instance trajectory means.
pub fn rollout_loss(batch: &[Vec<f64>]) -> Result<f64> {
    if batch.is_empty() || batch.iter().any(Vec::is_empty) {
        return Err(param("loss over an empty segment"));
    }
    let total: f64 = batch.iter().map(|s| s.iter().sum::<f64>() / s.len() as f64).sum();
    let loss = total / batch.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Divergence { iteration: 0, node: 0 });
    }
    Ok(loss)
}

fn objective_at<T: Scalar>(opt: &Optimizee<T>, xbar: &[T], mode: LossMode) -> T {
    let f = opt.smooth_objective(xbar);
    match mode {
        LossMode::Composite => f + opt.lambda() * norm1(xbar),
        LossMode::Smooth => f,
    }
}

fn objective_grad<T: Scalar>(opt: &Optimizee<T>, xbar: &[T], mode: LossMode) -> Vec<T> {
    let mut g = opt.smooth_gradient(xbar);
    if mode == LossMode::Composite {
        let lam = opt.lambda();
        for (gl, &x) in g.iter_mut().zip(xbar) {
            if x > T::zero() {
                *gl += lam;
            } else if x < T::zero() {
                *gl -= lam;
            }
        }
    }
    g
}

/// Result of differentiating one instance's segment.
#[derive(Debug, Clone)]
pub struct SegmentGradient<T> {
    /// `(1/K_T) Σ_k F(x̄^k)` over the segment
    pub loss: f64,
    pub grads: MiLoDoParams<T>,
    /// detached states after the segment
    pub states: Vec<NodeState<T>>,
    /// distance to the nearest non-differentiable point along the segment
    pub kink_margin: f64,
    /// hash of every branch decision taken along the segment
    pub branch_signature: u64,
}

/// Runs `k_t` taped iterations from `states` and back-propagates the segment
/// loss to the parameters. `first_k` numbers the first iteration for
/// divergence reports.
#[allow(clippy::too_many_arguments)]
pub fn segment_gradient<T: Scalar>(
    opt: &Optimizee<T>,
    topology: &Topology,
    params: &MiLoDoParams<T>,
    states: Vec<NodeState<T>>,
    k_t: usize,
    first_k: usize,
    mode: LossMode,
    coupling: DualCoupling,
) -> Result<SegmentGradient<T>> {
    if k_t == 0 {
        return Err(param("segment length must be positive"));
    }
    let n = topology.n();
    let scale = T::one() / (T::lit(k_t as f64) * T::lit(n as f64));
    let mut tapes: Vec<IterationTape<T>> = Vec::with_capacity(k_t);
    let mut xbars = Vec::with_capacity(k_t);
    let mut cur = states;
    let mut loss = T::zero();
    let mut margin = f64::INFINITY;
    let mut sig: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |b: bool| {
        sig ^= b as u64 + 1;
        sig = sig.wrapping_mul(0x100_0000_01b3);
    };
    for step in 0..k_t {
        let (next, tape) = milodo_iteration_with(&cur, params, opt, topology, first_k + step, coupling, true)?;
        let tape = tape.expect("tape requested");
        margin = margin.min(tape.kink_margin());
        tape.branch_pattern(&mut feed);
        let xs: Vec<Vec<T>> = next.iter().map(|s| s.x.clone()).collect();
        let xbar = average(&xs);
        loss += objective_at(opt, &xbar, mode);
        if mode == LossMode::Composite && opt.lambda() > T::zero() {
            for &x in &xbar {
                margin = margin.min(x.abs().as_f64());
                feed(x > T::zero());
                feed(x < T::zero());
            }
        }
        tapes.push(tape);
        xbars.push(xbar);
        cur = next;
    }
    let loss = (loss / T::lit(k_t as f64)).as_f64();
    if !loss.is_finite() {
        return Err(Error::Divergence { iteration: first_k + k_t - 1, node: 0 });
    }

    let mut grads = params.zeros_like();
    let mut adj = StateAdjoint::zeros(n, opt.d(), params.hidden());
    for (tape, xbar) in tapes.iter().zip(&xbars).rev() {
        let g = objective_grad(opt, xbar, mode);
        for ax in adj.x.iter_mut() {
            for (a, &gl) in ax.iter_mut().zip(&g) {
                *a += gl * scale;
            }
        }
        adj = iteration_backward(tape, params, opt, topology, &adj, &mut grads)?;
    }
    if !grads.is_finite() {
        return Err(Error::Divergence { iteration: first_k, node: 0 });
    }
    Ok(SegmentGradient { loss, grads, states: cur, kink_margin: margin, branch_signature: sig })
}

/// Outcome of one segment over a batch.
#[derive(Debug, Clone)]
pub struct BatchSegment<T> {
    /// mean loss over instances that stayed finite (`NaN` if none did)
    pub loss: f64,
    /// mean gradient over instances that stayed finite
    pub grads: MiLoDoParams<T>,
    pub nan_instances: usize,
}

/// One segment on every instance of a batch, in parallel. Instances whose
/// segment turns non-finite are dropped from the average and restart from
/// fresh states seeded by `reset_seeds[b]`. Reduction order is fixed.
#[allow(clippy::too_many_arguments)]
pub fn bptt_segment<T: Scalar>(
    batch: &[&Optimizee<T>],
    topology: &Topology,
    params: &MiLoDoParams<T>,
    carried: &mut [Vec<NodeState<T>>],
    reset_seeds: &[u64],
    k_t: usize,
    first_k: usize,
    mode: LossMode,
) -> Result<BatchSegment<T>> {
    if batch.len() != carried.len() || batch.len() != reset_seeds.len() || batch.is_empty() {
        return Err(param("batch, carried states and seeds must have the same nonzero length"));
    }
    let outcomes: Vec<Result<SegmentGradient<T>>> = batch
        .par_iter()
        .zip(carried.par_iter())
        .map(|(opt, st)| segment_gradient(opt, topology, params, st.clone(), k_t, first_k, mode, DualCoupling::Symmetrized))
        .collect();
    let mut grads = params.zeros_like();
    let mut losses = Vec::new();
    let mut nan = 0;
    for (b, out) in outcomes.into_iter().enumerate() {
        match out {
            Ok(seg) => {
                grads.add_assign(&seg.grads)?;
                losses.push(seg.loss);
                carried[b] = seg.states;
            }
            Err(Error::Divergence { .. }) => {
                nan += 1;
                let opt = batch[b];
                carried[b] = fresh_states(opt.n(), opt.d(), params.hidden(), reset_seeds[b]);
            }
            Err(e) => return Err(e),
        }
    }
    let loss = if losses.is_empty() {
        f64::NAN
    } else {
        grads.scale(T::one() / T::lit(losses.len() as f64));
        losses.iter().sum::<f64>() / losses.len() as f64
    };
    Ok(BatchSegment { loss, grads, nan_instances: nan })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainOptions {
    pub loss: LossMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: StageConfig,
    /// mean segment loss per completed epoch
    pub epoch_losses: Vec<f64>,
    pub segments: usize,
    pub nan_segments: usize,
    pub wall_ms: f64,
    /// reason the stage stopped early
    pub aborted: Option<String>,
}

/// Trains `params` in place for one stage. Each epoch shuffles the training
/// set, and every batch runs `K / K_T` consecutive segments from fresh states,
/// taking one Adam step per segment. More than half of an epoch's segments
/// turning non-finite aborts the stage.
pub fn train_stage<T: Scalar>(
    train: &[Optimizee<T>],
    topology: &Topology,
    params: &mut MiLoDoParams<T>,
    stage: &StageConfig,
    stage_index: usize,
    adam: &mut AdamState<T>,
    seed: u64,
    opts: &TrainOptions,
) -> Result<StageReport> {
    stage.validate()?;
    if train.is_empty() {
        return Err(param("empty training set"));
    }
    let start = Instant::now();
    let mut report = StageReport {
        stage: *stage,
        epoch_losses: Vec::with_capacity(stage.epochs),
        segments: 0,
        nan_segments: 0,
        wall_ms: 0.0,
        aborted: None,
    };
    let si = stage_index as u64;
    for epoch in 0..stage.epochs {
        let ep = epoch as u64;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[si, ep])));
        let (mut loss_sum, mut loss_count, mut seg_total, mut seg_nan) = (0.0, 0usize, 0usize, 0usize);
        for chunk in order.chunks(stage.batch_size) {
            let batch: Vec<&Optimizee<T>> = chunk.iter().map(|&b| &train[b]).collect();
            let seeds: Vec<u64> = chunk.iter().map(|&b| derive_seed(seed, &[si, ep, b as u64])).collect();
            let mut carried: Vec<Vec<NodeState<T>>> = batch
                .iter()
                .zip(&seeds)
                .map(|(o, &s)| fresh_states(o.n(), o.d(), params.hidden(), s))
                .collect();
            for seg in 0..stage.segments() {
                let reset: Vec<u64> = seeds.iter().map(|&s| derive_seed(s, &[seg as u64 + 1])).collect();
                let out =
                    bptt_segment(&batch, topology, params, &mut carried, &reset, stage.k_t, seg * stage.k_t + 1, opts.loss)?;
                seg_total += batch.len();
                seg_nan += out.nan_instances;
                if out.nan_instances < batch.len() {
                    loss_sum += out.loss * (batch.len() - out.nan_instances) as f64;
                    loss_count += batch.len() - out.nan_instances;
                    adam_step(params, &out.grads, adam)?;
                }
            }
        }
        report.segments += seg_total;
        report.nan_segments += seg_nan;
        if 2 * seg_nan > seg_total {
            report.aborted = Some(format!("epoch {epoch}: {seg_nan} of {seg_total} segments diverged"));
            break;
        }
        report.epoch_losses.push(if loss_count > 0 { loss_sum / loss_count as f64 } else { f64::NAN });
    }
    report.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(report)
}

/// Starting point of a training run.
#[derive(Debug, Clone, PartialEq)]
pub enum InitMode<T> {
    Random,
    /// Exact-Diffusion-equivalent parameters for the given gossip matrix and step
    Special { gossip: GossipMatrix<T>, gamma: f64 },
}

pub fn initial_params<T: Scalar>(topology: &Topology, init: &InitMode<T>, seed: u64) -> Result<MiLoDoParams<T>> {
    match init {
        InitMode::Random => Ok(init_random(topology, seed)),
        InitMode::Special { gossip, gamma } => init_special(topology, gossip, *gamma, seed),
    }
}

#[derive(Debug, Clone)]
pub struct TrainingRun<T> {
    /// parameters after the last completed stage
    pub params: MiLoDoParams<T>,
    /// parameters after each completed stage
    pub stage_params: Vec<MiLoDoParams<T>>,
    pub reports: Vec<StageReport>,
    /// set when a stage aborted; later stages were not run
    pub aborted: Option<String>,
}

/// Runs every stage in order with a fresh Adam state each, carrying the
/// parameters forward. `on_stage` sees each completed stage (for
/// checkpointing). An aborted stage ends the run; the returned parameters
/// are those of the last completed stage.
#[allow(clippy::too_many_arguments)]
pub fn multi_stage_train<T: Scalar>(
    train: &[Optimizee<T>],
    topology: &Topology,
    init: MiLoDoParams<T>,
    stages: &[StageConfig],
    seed: u64,
    opts: &TrainOptions,
    mut on_stage: impl FnMut(usize, &MiLoDoParams<T>, &AdamState<T>, &StageReport) -> Result<()>,
) -> Result<TrainingRun<T>> {
    if train.is_empty() {
        return Err(param("empty training set"));
    }
    for s in stages {
        s.validate()?;
    }
    init.check_topology(topology)?;
    let mut run = TrainingRun { params: init, stage_params: Vec::new(), reports: Vec::new(), aborted: None };
    for (idx, stage) in stages.iter().enumerate() {
        let mut candidate = run.params.clone();
        let mut adam = AdamState::new(&candidate, stage.lr);
        let report = train_stage(train, topology, &mut candidate, stage, idx, &mut adam, seed, opts)?;
        if let Some(reason) = &report.aborted {
            run.aborted = Some(format!("stage {}: {reason}", idx + 1));
            run.reports.push(report);
            break;
        }
        on_stage(idx, &candidate, &adam, &report)?;
        run.stage_params.push(candidate.clone());
        run.params = candidate;
        run.reports.push(report);
    }
    Ok(run)
}
