use std::time::Instant;

use milodo::baselines::{baseline_step, Algorithm, BaselineConfig, BaselineState};
use milodo::graph::{ring_gossip_weights, Topology, TopologyKind};
use milodo::milodo::{
    dual_sum, fixed_point_residual, fresh_states, milodo_iteration, milodo_iteration_with, DualCoupling,
};
use milodo::neuro::{init_special, MiLoDoParams, Tensor, HIDDEN};
use milodo::problems::{centralized_solve, gen_lasso, ProblemShape};
use milodo::seeds::derive_seed;
use milodo::training::{segment_gradient, LossMode};
use milodo::{Gossip64, Optimizee64, Params64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;
use crate::error::CliResult;
use crate::setup::{gossip, topology};

pub const FIXED_POINT_TOL: f64 = 1e-8;
pub const CONSERVATION_TOL: f64 = 1e-9;
pub const CONSERVATION_ITERS: usize = 1000;
pub const REDUCTION_TOL: f64 = 1e-9;
pub const REDUCTION_ITERS: usize = 50;
pub const REDUCTION_GAMMA: f64 = 0.05;
pub const FD_TOL: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;
pub const FD_DRAWS: usize = 24;
pub const FD_SEGMENT: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn below(name: &'static str, value: f64, tolerance: f64, detail: String) -> Self {
        Self { name, value, tolerance, passed: value < tolerance, detail }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {:<14} {:.3e} (tol {:.0e}) {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            self.tolerance,
            self.detail
        )
    }
}

/// Options for the property checks.
#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    /// dual coupling used by the conservation check
    pub coupling: DualCoupling,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { coupling: DualCoupling::Symmetrized }
    }
}

fn check_problem(cfg: &ExperimentConfig, n: usize, lambda: f64, tag: u64) -> CliResult<Optimizee64> {
    Ok(gen_lasso(ProblemShape::new(n, 10, 5, lambda), derive_seed(cfg.seed, &[3, tag]))?)
}

/// One special-init iteration from the consensual optimum must leave it in place.
pub fn check_fixed_point(cfg: &ExperimentConfig, t: &Topology, w: &Gossip64) -> CliResult<CheckResult> {
    let start = Instant::now();
    let opt = check_problem(cfg, t.n(), 0.1, 0)?;
    let oracle = centralized_solve(&opt, 1e-12, 1_000_000)?;
    let params = init_special(t, w, REDUCTION_GAMMA, cfg.seed)?;
    let r = fixed_point_residual(&opt, t, &params, &oracle)?;
    let ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(CheckResult::below("fixed-point", r, FIXED_POINT_TOL, format!("max state change, {ms:.0} ms")))
}

/// `Σ_i y_i` stays zero along a rollout whose edge weights vary and are
/// not symmetric before averaging.
pub fn check_conservation(
    cfg: &ExperimentConfig,
    t: &Topology,
    w: &Gossip64,
    coupling: DualCoupling,
) -> CliResult<CheckResult> {
    let opt = check_problem(cfg, t.n(), 0.1, 1)?;
    let params = perturbed_special(t, w, derive_seed(cfg.seed, &[3, 1]))?;
    let mut states = fresh_states(t.n(), opt.d(), params.hidden(), cfg.seed);
    let mut worst = 0.0f64;
    for k in 1..=CONSERVATION_ITERS {
        states = milodo_iteration_with(&states, &params, &opt, t, k, coupling, false)?.0;
        worst = dual_sum(&states).iter().fold(worst, |m, v| m.max(v.abs()));
    }
    Ok(CheckResult::below(
        "conservation",
        worst,
        CONSERVATION_TOL,
        format!("max |sum_i y_i| over {CONSERVATION_ITERS} iterations, {coupling} coupling"),
    ))
}

/// Special-init MiLoDo tracks Prox-ED step for step when `λ = 0`.
pub fn check_ed_reduction(cfg: &ExperimentConfig, t: &Topology, w: &Gossip64) -> CliResult<CheckResult> {
    let opt = check_problem(cfg, t.n(), 0.0, 2)?;
    let params = init_special(t, w, REDUCTION_GAMMA, cfg.seed)?;
    let bc = BaselineConfig::new(Algorithm::ProxEd, w.clone(), REDUCTION_GAMMA, REDUCTION_ITERS);
    let mut states = fresh_states(t.n(), opt.d(), params.hidden(), cfg.seed);
    let mut ed = BaselineState::zeros(t.n(), opt.d());
    let mut worst = 0.0f64;
    for k in 1..=REDUCTION_ITERS {
        states = milodo_iteration(&states, &params, &opt, t, k)?;
        ed = baseline_step(&ed, &opt, t, &bc)?;
        for (s, x) in states.iter().zip(&ed.x) {
            worst = s.x.iter().zip(x).fold(worst, |m, (a, b)| m.max((a - b).abs()));
        }
    }
    Ok(CheckResult::below(
        "ed-reduction",
        worst,
        REDUCTION_TOL,
        format!("max |x_milodo - x_ed| over {REDUCTION_ITERS} iterations, gamma {REDUCTION_GAMMA}"),
    ))
}

/// Special init with small random final layers, so every parameter matters.
fn perturbed_special(t: &Topology, w: &Gossip64, seed: u64) -> CliResult<Params64> {
    let mut p: MiLoDoParams<f64> = init_special(t, w, REDUCTION_GAMMA, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[4]));
    for m in p.modules_mut() {
        for v in m.tensor_mut(Tensor::Mlp2Weight) {
            *v = rng.random_range(-0.05..0.05);
        }
    }
    Ok(p)
}

/// Central differences against the analytic segment gradient on a 3-node
/// ring with `d = 2`, skipping draws whose perturbation flips a branch.
pub fn check_gradient(cfg: &ExperimentConfig) -> CliResult<CheckResult> {
    let t = milodo::graph::build_topology(&TopologyKind::Ring, 3, 0)?;
    let w: Gossip64 = ring_gossip_weights(&t)?;
    let opt = gen_lasso(ProblemShape::new(3, 2, 4, 0.1), derive_seed(cfg.seed, &[3, 3]))?;
    let params = perturbed_special(&t, &w, cfg.seed)?;
    let states = fresh_states::<f64>(3, 2, HIDDEN, cfg.seed);
    let run = |p: &Params64| {
        segment_gradient(&opt, &t, p, states.clone(), FD_SEGMENT, 1, LossMode::Composite, DualCoupling::Symmetrized)
    };
    let base = run(&params)?;
    let flat = base.grads.to_flat();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[5]));
    let (mut worst, mut checked, mut tries) = (0.0f64, 0usize, 0usize);
    while checked < FD_DRAWS && tries < 20 * FD_DRAWS {
        tries += 1;
        let idx = rng.random_range(0..flat.len());
        let mut plus = params.clone();
        *plus.flat_mut(idx) += FD_STEP;
        let mut minus = params.clone();
        *minus.flat_mut(idx) -= FD_STEP;
        let (p, m) = (run(&plus)?, run(&minus)?);
        if p.branch_signature != base.branch_signature || m.branch_signature != base.branch_signature {
            continue;
        }
        let fd = (p.loss - m.loss) / (2.0 * FD_STEP);
        worst = worst.max((fd - flat[idx]).abs() / fd.abs().max(flat[idx].abs()).max(1e-6));
        checked += 1;
    }
    let mut r = CheckResult::below(
        "gradient-fd",
        worst,
        FD_TOL,
        format!("max relative error over {checked} parameters ({} near kinks skipped)", tries - checked),
    );
    r.passed &= checked >= FD_DRAWS;
    Ok(r)
}

/// Runs every property check against the configured topology.
pub fn cmd_verify(cfg: &ExperimentConfig, opts: VerifyOptions) -> CliResult<Vec<CheckResult>> {
    cfg.validate()?;
    let (plan, _) = cfg.data.plans()?;
    let t = topology(cfg, plan.groups[0].0.n)?;
    let w = gossip::<f64>(cfg, &t)?;
    Ok(vec![
        check_fixed_point(cfg, &t, &w)?,
        check_conservation(cfg, &t, &w, opts.coupling)?,
        check_ed_reduction(cfg, &t, &w)?,
        check_gradient(cfg)?,
    ])
}
