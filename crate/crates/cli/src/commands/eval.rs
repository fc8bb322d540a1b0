use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use milodo::baselines::{default_gamma, run_baseline, BaselineConfig};
use milodo::metrics::IterationRecord;
use milodo::milodo::{rollout, RolloutConfig};
use milodo::neuro::decode_checkpoint;
use milodo::problems::{centralized_solve, SolutionOracle};
use milodo::seeds::derive_seed;
use milodo::{Optimizee64, Precision, Scalar};
use rayon::prelude::*;

use crate::config::{ExperimentConfig, MethodSpec};
use crate::data::{load_split, Split};
use crate::error::{CliError, CliResult};
use crate::plot::render_log_plot;
use crate::setup::{gossip, topology};

pub const METRICS_CSV: &str = "metrics.csv";
pub const STOPPING_CSV: &str = "stopping.csv";
pub const CSV_HEADER: &str = "method,iter,loss,gap,consensus_error,wall_ms";

/// Seed of the hidden-state banks for the `k`-th held-out rollout.
pub fn eval_hidden_seed(seed: u64, k: usize) -> u64 {
    derive_seed(seed, &[2, k as u64])
}

/// One method's run on one instance.
#[derive(Debug, Clone)]
pub struct InstanceRun {
    pub records: Vec<IterationRecord>,
    pub diverged: bool,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub iter: usize,
    pub loss: f64,
    pub gap: f64,
    pub consensus_error: f64,
    pub wall_ms: f64,
}

/// Instance-averaged metrics of one method.
#[derive(Debug, Clone)]
pub struct MethodCurve {
    pub label: String,
    pub rows: Vec<CurveRow>,
    pub diverged_runs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StopRow {
    pub label: String,
    pub time_per_iter_ms: f64,
    /// mean over the instances that reached the target
    pub iterations: Option<f64>,
    pub reached: usize,
}

#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub out_dir: PathBuf,
    pub instances: usize,
    pub curves: Vec<MethodCurve>,
    pub stopping: Option<Vec<StopRow>>,
}

/// Averages per-instance records, truncating every curve at the shortest run.
pub fn average_runs(label: &str, runs: &[InstanceRun]) -> MethodCurve {
    let len = runs.iter().map(|r| r.records.len()).min().unwrap_or(0);
    let m = runs.len() as f64;
    let rows = (0..len)
        .map(|k| {
            let mean = |f: &dyn Fn(&IterationRecord) -> f64| runs.iter().map(|r| f(&r.records[k])).sum::<f64>() / m;
            CurveRow {
                iter: k + 1,
                loss: mean(&|r| r.loss),
                gap: mean(&|r| r.gap.unwrap_or(f64::NAN)),
                consensus_error: mean(&|r| r.consensus_error),
                wall_ms: mean(&|r| r.wall_ms),
            }
        })
        .collect();
    MethodCurve { label: label.to_string(), rows, diverged_runs: runs.iter().filter(|r| r.diverged).count() }
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// The metrics CSV: `#` comment lines, a header, then one row per method and iteration.
pub fn render_csv(curves: &[MethodCurve], instances: usize) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# mean over {instances} held-out instances; gap is the absolute gap F(x_bar) - F_star");
    for c in curves.iter().filter(|c| c.diverged_runs > 0) {
        let _ = writeln!(
            s,
            "# {}: {} of {instances} runs diverged; curve truncated at iteration {}",
            c.label,
            c.diverged_runs,
            c.rows.len()
        );
    }
    let _ = writeln!(s, "{CSV_HEADER}");
    for c in curves {
        for r in &c.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                c.label,
                r.iter,
                num(r.loss),
                num(r.gap),
                num(r.consensus_error),
                num(r.wall_ms)
            );
        }
    }
    s
}

pub fn stopping_rows(label: &str, runs: &[InstanceRun], target: f64) -> StopRow {
    let done: usize = runs.iter().map(|r| r.records.len()).sum();
    let total: f64 = runs.iter().map(|r| r.elapsed_ms).sum();
    let hits: Vec<usize> = runs
        .iter()
        .filter_map(|r| r.records.iter().find(|rec| rec.gap.is_some_and(|g| g <= target)).map(|rec| rec.k))
        .collect();
    StopRow {
        label: label.to_string(),
        time_per_iter_ms: if done > 0 { total / done as f64 } else { f64::NAN },
        iterations: (!hits.is_empty()).then(|| hits.iter().sum::<usize>() as f64 / hits.len() as f64),
        reached: hits.len(),
    }
}

pub fn render_stopping(rows: &[StopRow], target: f64, instances: usize) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# iterations until the gap first reaches {target:e}; timings are wall clock");
    let _ = writeln!(s, "method,time_per_iter_ms,iterations,total_ms,reached_of_{instances}");
    for r in rows {
        let (iters, total) = match r.iterations {
            Some(i) => (num(i), num(i * r.time_per_iter_ms)),
            None => ("NaN".to_string(), "NaN".to_string()),
        };
        let _ = writeln!(s, "{},{},{iters},{total},{}", r.label, num(r.time_per_iter_ms), r.reached);
    }
    s
}

/// Runs every configured method on the held-out split and writes
/// `metrics.csv`, `gap.svg`, `consensus.svg` and, with `stop_gap`, `stopping.csv`.
pub fn cmd_eval(cfg: &ExperimentConfig) -> CliResult<EvalSummary> {
    cfg.validate()?;
    if cfg.eval.methods.is_empty() {
        return Err(CliError::Config("eval.methods is empty".into()));
    }
    let test = load_split(&cfg.data_dir(), Split::Test, cfg.eval.instances)?;
    let oracles = test
        .par_iter()
        .map(|o| centralized_solve(o, cfg.eval.oracle_tol, cfg.eval.oracle_max_iters))
        .collect::<Result<Vec<_>, _>>()?;
    let per_method = match cfg.precision {
        Precision::F64 => run_methods::<f64>(cfg, &test, &oracles)?,
        Precision::F32 => run_methods::<f32>(cfg, &test, &oracles)?,
    };
    let curves: Vec<MethodCurve> = per_method.iter().map(|(label, runs)| average_runs(label, runs)).collect();

    let out = cfg.out_dir();
    fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    let csv = render_csv(&curves, test.len());
    let write = |name: &str, text: &str| {
        let path = out.join(name);
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    };
    write(METRICS_CSV, &csv)?;
    write("gap.svg", &render_log_plot(&csv, "gap").map_err(CliError::Failure)?)?;
    write("consensus.svg", &render_log_plot(&csv, "consensus_error").map_err(CliError::Failure)?)?;
    let stopping = cfg.eval.stop_gap.map(|target| {
        let rows: Vec<StopRow> = per_method.iter().map(|(label, runs)| stopping_rows(label, runs, target)).collect();
        (render_stopping(&rows, target, test.len()), rows)
    });
    if let Some((text, _)) = &stopping {
        write(STOPPING_CSV, text)?;
    }
    Ok(EvalSummary { out_dir: out, instances: test.len(), curves, stopping: stopping.map(|s| s.1) })
}

fn run_methods<T: Scalar>(
    cfg: &ExperimentConfig,
    test: &[Optimizee64],
    oracles: &[SolutionOracle],
) -> CliResult<Vec<(String, Vec<InstanceRun>)>> {
    let t = topology(cfg, test[0].n())?;
    let w = gossip::<T>(cfg, &t)?;
    let cast: Vec<_> = test.iter().map(|o| o.cast::<T>()).collect();
    let k_eval = cfg.eval.iterations;
    let timing = cfg.eval.timing;
    let mut out = Vec::new();
    for method in &cfg.eval.methods {
        let runs: Vec<InstanceRun> = match (method, method.baseline()) {
            (MethodSpec::Milodo { checkpoint, .. }, _) => {
                let path = cfg.resolve(checkpoint);
                let bytes = fs::read(&path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                let (params, _) = decode_checkpoint::<T>(&bytes)?;
                params.check_topology(&t)?;
                cast.par_iter()
                    .zip(oracles)
                    .enumerate()
                    .map(|(k, (opt, oracle))| {
                        let mut rc = RolloutConfig::new(k_eval, eval_hidden_seed(cfg.seed, k)).with_oracle(oracle);
                        rc.timing = timing;
                        let start = Instant::now();
                        let r = rollout(opt, &t, &params, &rc)?;
                        let elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
                        Ok(InstanceRun { records: r.records, diverged: r.diverged.is_some(), elapsed_ms })
                    })
                    .collect::<CliResult<_>>()?
            }
            (_, Some((alg, gamma, mixing))) => cast
                .par_iter()
                .zip(oracles)
                .map(|(opt, oracle)| {
                    let gamma = gamma.or_else(|| default_gamma(opt.kind(), opt.shape(), alg)).ok_or_else(|| {
                        CliError::Config(format!("{}: no tuned step for this shape; set gamma", method.label()))
                    })?;
                    let mut bc = BaselineConfig::new(alg, w.clone(), gamma, k_eval);
                    bc.mixing = mixing;
                    let start = Instant::now();
                    let r = run_baseline(opt, &t, &bc, Some(oracle), timing)?;
                    let elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
                    Ok(InstanceRun { records: r.records, diverged: r.diverged.is_some(), elapsed_ms })
                })
                .collect::<CliResult<_>>()?,
            _ => unreachable!("every non-MiLoDo method is a baseline"),
        };
        out.push((method.label(), runs));
    }
    Ok(out)
}
