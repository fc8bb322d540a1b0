//! Per-iteration metrics shared by MiLoDo rollouts and the baselines.
//! All metrics are evaluated in `f64` on an upcast copy of the optimizee.

use std::time::Instant;

use crate::error::Result;
use crate::linalg::norm1;
use crate::problems::{average, consensus_error, global_objective, optimality_gap, Optimizee, SolutionOracle};
use crate::scalar::{cast_slice, Scalar};

/// Metrics after iteration `k` (1-based).
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub k: usize,
    /// `f(x̄) + r(x̄)` with `x̄ = (1/n) Σ_i x_i`
    pub loss: f64,
    /// `f_i(x̄) + r(x̄)` per node; their mean is `loss`
    pub local_losses: Vec<f64>,
    /// `(1/n) Σ_i ‖x_i − x̄‖₂`
    pub consensus_error: f64,
    pub gap: Option<f64>,
    /// milliseconds since the run started; zero unless timing is enabled
    pub wall_ms: f64,
}

pub struct MetricsRecorder<'a> {
    opt: Optimizee<f64>,
    oracle: Option<&'a SolutionOracle>,
    timing: bool,
    start: Instant,
}

impl<'a> MetricsRecorder<'a> {
    pub fn new<T: Scalar>(opt: &Optimizee<T>, oracle: Option<&'a SolutionOracle>, timing: bool) -> Self {
        Self { opt: opt.cast(), oracle, timing, start: Instant::now() }
    }

    /// Restarts the wall clock.
    pub fn restart_clock(&mut self) {
        self.start = Instant::now();
    }

    pub fn record<T: Scalar>(&self, k: usize, xs: &[Vec<T>]) -> Result<IterationRecord> {
        let xs: Vec<Vec<f64>> = xs.iter().map(|x| cast_slice(x)).collect();
        let xbar = average(&xs);
        let reg = self.opt.shape().lambda * norm1(&xbar);
        let local_losses = (0..self.opt.n())
            .map(|i| Ok(self.opt.local_loss(i, &xbar)? + reg))
            .collect::<Result<Vec<f64>>>()?;
        let loss = global_objective(&self.opt, &xbar)?;
        let gap = self.oracle.map(|o| optimality_gap(&self.opt, o, &xbar)).transpose()?;
        Ok(IterationRecord {
            k,
            loss,
            local_losses,
            consensus_error: consensus_error(&xs)?,
            gap,
            wall_ms: if self.timing { self.start.elapsed().as_secs_f64() * 1e3 } else { 0.0 },
        })
    }
}
