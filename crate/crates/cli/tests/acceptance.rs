//! Acceptance suite: one PASS/FAIL line per criterion, each with its runtime budget.
//! Exits nonzero if any criterion fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use milodo::baselines::{baseline_step, run_baseline, Algorithm, BaselineConfig, BaselineState, MixingForm};
use milodo::graph::{build_topology, ring_gossip_weights, Topology, TopologyKind};
use milodo::milodo::{dual_sum, fixed_point_residual, fresh_states, milodo_iteration, rollout, RolloutConfig};
use milodo::neuro::{decode_checkpoint, init_random, init_special, Tensor, HIDDEN};
use milodo::problems::{centralized_solve, gen_lasso, ProblemShape, SolutionOracle};
use milodo::seeds::derive_seed;
use milodo::training::{segment_gradient, LossMode};
use milodo::{Gossip64, Optimizee64, Params64};
use milodo_cli::commands::eval::{cmd_eval, eval_hidden_seed, METRICS_CSV};
use milodo_cli::commands::train::{cmd_train, FINAL_CHECKPOINT};
use milodo_cli::config::ExperimentConfig;
use milodo_cli::data::{cmd_gen_data, load_split, Split};
use milodo_cli::plot::parse_series;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<(bool, String), String>;

const DESK: (usize, usize, usize, f64) = (4, 10, 5, 0.1);
const ED_GAMMA: f64 = 0.055;
const PG_EXTRA_GAMMA: f64 = 0.035;
const DESK_INIT_GAMMA: f64 = 0.07;

fn ring(n: usize) -> (Topology, Gossip64) {
    let t = build_topology(&TopologyKind::Ring, n, 0).unwrap();
    let w = ring_gossip_weights(&t).unwrap();
    (t, w)
}

fn desk(lambda: f64, seed: u64) -> Optimizee64 {
    gen_lasso(ProblemShape::new(DESK.0, DESK.1, DESK.2, lambda), seed).unwrap()
}

fn oracle(opt: &Optimizee64) -> SolutionOracle {
    centralized_solve(opt, 1e-12, 1_000_000).unwrap()
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn fixed_point() -> Outcome {
    let (t, w) = ring(4);
    let opt = desk(DESK.3, 7);
    let params = init_special(&t, &w, ED_GAMMA, 7).map_err(e)?;
    let r = fixed_point_residual(&opt, &t, &params, &oracle(&opt)).map_err(e)?;
    Ok((r < 1e-8, format!("one-iteration residual {r:.3e} < 1e-8")))
}

fn conservation() -> Outcome {
    let (t, _) = ring(4);
    let opt = desk(DESK.3, 7);
    // random-init seed 3: the first whose rollout stays bounded for 1000 iterations
    let params: Params64 = init_random(&t, 3);
    let mut states = fresh_states(4, DESK.1, params.hidden(), 7);
    let mut worst = 0.0f64;
    for k in 1..=1000 {
        states = milodo_iteration(&states, &params, &opt, &t, k).map_err(e)?;
        worst = dual_sum(&states).iter().fold(worst, |m, v| m.max(v.abs()));
    }
    Ok((worst <= 1e-9, format!("max |sum_i y_i| over 1000 iterations {worst:.3e} <= 1e-9")))
}

fn ed_reduction() -> Outcome {
    let (t, w) = ring(4);
    let opt = desk(0.0, 7);
    let params = init_special(&t, &w, ED_GAMMA, 7).map_err(e)?;
    let cfg = BaselineConfig::new(Algorithm::ProxEd, w, ED_GAMMA, 50);
    let mut states = fresh_states(4, DESK.1, params.hidden(), 7);
    let mut ed = BaselineState::zeros(4, DESK.1);
    let mut worst = 0.0f64;
    for k in 1..=50 {
        states = milodo_iteration(&states, &params, &opt, &t, k).map_err(e)?;
        ed = baseline_step(&ed, &opt, &t, &cfg).map_err(e)?;
        for (s, x) in states.iter().zip(&ed.x) {
            worst = s.x.iter().zip(x).fold(worst, |m, (a, b)| m.max((a - b).abs()));
        }
    }
    Ok((worst <= 1e-9, format!("max coordinate deviation from Prox-ED over 50 iterations {worst:.3e} <= 1e-9")))
}

fn gradient_check() -> Outcome {
    let (t, w) = ring(3);
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut counted, mut excluded, mut worst) = (0usize, 0usize, 0.0f64);
    for draw in 0..200u64 {
        if counted >= 24 {
            break;
        }
        let opt = gen_lasso(ProblemShape::new(3, 2, 4, 0.1), derive_seed(4, &[draw])).map_err(e)?;
        let mut params = init_special(&t, &w, 0.05, draw).map_err(e)?;
        for m in params.modules_mut() {
            for v in m.tensor_mut(Tensor::Mlp2Weight) {
                *v = rng.random_range(-0.05..0.05);
            }
        }
        let states = fresh_states::<f64>(3, 2, HIDDEN, draw);
        let seg = |p: &Params64| {
            segment_gradient(&opt, &t, p, states.clone(), 5, 1, LossMode::Composite, Default::default())
        };
        let base = seg(&params).map_err(e)?;
        let idx = rng.random_range(0..params.num_params());
        let mut plus = params.clone();
        *plus.flat_mut(idx) += h;
        let mut minus = params.clone();
        *minus.flat_mut(idx) -= h;
        let (p, m) = (seg(&plus).map_err(e)?, seg(&minus).map_err(e)?);
        let near_kink = [&base, &p, &m].iter().any(|s| s.kink_margin < 1e-6)
            || p.branch_signature != base.branch_signature
            || m.branch_signature != base.branch_signature;
        if near_kink {
            excluded += 1;
            continue;
        }
        let fd = (p.loss - m.loss) / (2.0 * h);
        let an = base.grads.get_flat(idx);
        worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
        counted += 1;
    }
    Ok((
        counted >= 20 && worst < 1e-4,
        format!("max relative error {worst:.3e} < 1e-4 over {counted} draws ({excluded} near a kink excluded)"),
    ))
}

fn first_converged(alg: Algorithm, gamma: f64) -> Result<Option<usize>, String> {
    let (t, w) = ring(4);
    let opt = desk(DESK.3, 7);
    let o = oracle(&opt);
    let run = run_baseline(&opt, &t, &BaselineConfig::new(alg, w, gamma, 10_000), Some(&o), false).map_err(e)?;
    Ok(run.records.iter().find(|r| r.gap.is_some_and(|g| g < 1e-6) && r.consensus_error < 1e-6).map(|r| r.k))
}

fn baseline_convergence() -> Outcome {
    let ed = first_converged(Algorithm::ProxEd, ED_GAMMA)?;
    let pg = first_converged(Algorithm::PgExtra, PG_EXTRA_GAMMA)?;
    Ok((
        ed.is_some() && pg.is_some(),
        format!("gap and consensus < 1e-6 at iteration Prox-ED {ed:?} (gamma {ED_GAMMA}), PG-EXTRA {pg:?} (gamma {PG_EXTRA_GAMMA})"),
    ))
}

fn robustness_ordering() -> Outcome {
    let (t, w) = ring(10);
    let opt = gen_lasso(ProblemShape::new(10, 50, 10, 0.0), 7).map_err(e)?;
    let o = oracle(&opt);
    let o32 = opt.cast::<f32>();
    let w32 = w.cast::<f32>();
    let gap = |mixing| -> Result<f64, String> {
        let mut cfg = BaselineConfig::new(Algorithm::ProxEd, w32.clone(), 0.02, 50_000);
        cfg.mixing = mixing;
        let run = run_baseline(&o32, &t, &cfg, Some(&o), false).map_err(e)?;
        if run.diverged.is_some() {
            return Err(format!("{mixing:?} run diverged"));
        }
        Ok(run.records.last().and_then(|r| r.gap).unwrap_or(f64::NAN))
    };
    let (robust, direct) = (gap(MixingForm::Robust)?, gap(MixingForm::Direct)?);
    Ok((robust < direct, format!("final gap after 50000 f32 iterations: robust {robust:.3e} < direct {direct:.3e}")))
}

fn write_config(dir: &Path, body: &str) -> ExperimentConfig {
    let path = dir.join("experiment.toml");
    fs::write(&path, body).unwrap();
    ExperimentConfig::load(&path).unwrap()
}

fn desk_config(dir: &Path) -> ExperimentConfig {
    write_config(
        dir,
        &format!(
            r#"schema_version = 1
seed = 7
out = "out"

[data]
preset = "desk"

[train]
gamma = {DESK_INIT_GAMMA}

[eval]
iterations = 100
methods = [
  {{ method = "milodo", checkpoint = "out/checkpoints/final.ckpt" }},
  {{ method = "prox-ed", gamma = {ED_GAMMA} }},
]
"#
        ),
    )
}

fn loss_at(csv: &str, method: &str, iter: usize) -> Result<f64, String> {
    let series = parse_series(csv, "loss")?;
    let s = series.iter().find(|s| s.0 == method).ok_or(format!("no {method} rows"))?;
    s.1.iter().find(|p| p.0 as usize == iter).map(|p| p.1).ok_or(format!("{method} has no iteration {iter}"))
}

fn training_efficacy(dir: &Path) -> Outcome {
    let cfg = desk_config(dir);
    cmd_gen_data(&cfg).map_err(e)?;
    cmd_train(&cfg).map_err(e)?;
    cmd_eval(&cfg).map_err(e)?;
    let csv = fs::read_to_string(cfg.out_dir().join(METRICS_CSV)).map_err(e)?;
    let (trained, ed) = (loss_at(&csv, "milodo", 100)?, loss_at(&csv, "prox-ed", 100)?);
    Ok((
        trained <= ed,
        format!("mean loss at iteration 100 over 32 held-out: trained {trained:.10e} <= Prox-ED {ed:.10e}"),
    ))
}

fn long_horizon(dir: &Path) -> Outcome {
    let cfg = desk_config(dir);
    let bytes = fs::read(cfg.checkpoint_dir().join(FINAL_CHECKPOINT)).map_err(|err| format!("no trained checkpoint: {err}"))?;
    let (params, _) = decode_checkpoint::<f64>(&bytes).map_err(e)?;
    let (t, _) = ring(4);
    let test = load_split(&cfg.data_dir(), Split::Test, Some(4)).map_err(e)?;
    let mut finals = Vec::new();
    for (k, opt) in test.iter().enumerate() {
        let o = oracle(opt);
        let run = rollout(opt, &t, &params, &RolloutConfig::new(10_000, eval_hidden_seed(7, k)).with_oracle(&o))
            .map_err(e)?;
        if run.diverged.is_some() || run.records.len() != 10_000 {
            return Ok((false, format!("instance {k} diverged after {} iterations", run.records.len())));
        }
        let finite = run.records.iter().all(|r| r.loss.is_finite() && r.consensus_error.is_finite());
        let mut best = f64::INFINITY;
        let mut monotone = true;
        for r in &run.records {
            let g = r.gap.unwrap_or(f64::NAN);
            if !g.is_finite() {
                monotone = false;
            }
            let next = best.min(g);
            monotone &= next <= best;
            best = next;
        }
        if !(finite && monotone) {
            return Ok((false, format!("instance {k}: non-finite metrics or increasing best gap")));
        }
        finals.push(best);
    }
    let finals: Vec<String> = finals.iter().map(|g| format!("{g:.2e}")).collect();
    Ok((true, format!("10000 iterations on 4 held-out instances, no NaN; best gaps [{}]", finals.join(", "))))
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism(dir: &Path) -> Outcome {
    let body = r#"schema_version = 1
seed = 5
threads = 1
precision = "f64"
out = "run"

[train]
gamma = 0.05
stages = [
  { k_t = 2, k = 4, lr = 5e-4, epochs = 2, batch_size = 4 },
  { k_t = 3, k = 6, lr = 1e-4, epochs = 1, batch_size = 4 },
]

[eval]
iterations = 60
methods = [
  { method = "milodo", checkpoint = "run/checkpoints/final.ckpt" },
  { method = "prox-ed", gamma = 0.05 },
  { method = "pg-extra", gamma = 0.03 },
]
"#;
    let mut trees = Vec::new();
    for rep in ["a", "b"] {
        let sub = dir.join(rep);
        fs::create_dir_all(&sub).map_err(e)?;
        let cfg = write_config(&sub, body);
        cmd_gen_data(&cfg).map_err(e)?;
        cmd_train(&cfg).map_err(e)?;
        cmd_eval(&cfg).map_err(e)?;
        let root = cfg.out_dir();
        let files = files_under(&root);
        let contents: Vec<Vec<u8>> = files.iter().map(|f| fs::read(root.join(f)).unwrap()).collect();
        trees.push((files, contents));
    }
    let same = trees[0] == trees[1];
    let ckpts = trees[0].0.iter().filter(|f| f.extension().is_some_and(|x| x == "ckpt")).count();
    Ok((same, format!("{} output files ({ckpts} checkpoints, metrics.csv) byte-identical across reruns", trees[0].0.len())))
}

/// Re-derives an instance from its seed: `A` then `x★` standard normal,
/// the `⌈0.75 d⌉` smallest `|x★|` zeroed, `b = A x★ + 0.1 z`.
fn generator_fidelity() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    for (n, d, samples, seed) in [(4, 10, 5, 7u64), (10, 50, 10, 11), (3, 7, 4, 1), (2, 1, 3, 9)] {
        let opt = gen_lasso(ProblemShape::new(n, d, samples, 0.1), seed).map_err(e)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = n * samples;
        let a: Vec<f64> = (0..rows * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let raw: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let z: Vec<f64> = (0..rows).map(|_| StandardNormal.sample(&mut rng)).collect();
        let zero_count = (3 * d + 3) / 4;
        let mut by_mag: Vec<usize> = (0..d).collect();
        by_mag.sort_by(|&i, &j| raw[i].abs().partial_cmp(&raw[j].abs()).unwrap());
        let mut x_star = raw.clone();
        for &i in &by_mag[..zero_count] {
            x_star[i] = 0.0;
        }
        let zeros = opt.planted().iter().filter(|v| **v == 0.0).count();
        ok &= zeros == zero_count && opt.planted() == x_star.as_slice();
        let mut worst_noise = 0.0f64;
        for i in 0..n {
            let shard = opt.shard(i);
            for r in 0..samples {
                let g = i * samples + r;
                let row = &a[g * d..(g + 1) * d];
                ok &= (0..d).all(|c| shard.a.get(r, c) == row[c]);
                let clean: f64 = row.iter().zip(&x_star).map(|(p, q)| p * q).sum();
                ok &= (shard.b[r] - (clean + 0.1 * z[g])).abs() <= 1e-12;
                worst_noise = worst_noise.max(((shard.b[r] - clean) / z[g] - 0.1).abs());
            }
        }
        ok &= worst_noise < 1e-9;
        notes.push(format!("d={d}: {zeros}/{zero_count} zeroed, noise scale err {worst_noise:.1e}"));
    }
    Ok((ok, notes.join("; ")))
}

fn main() -> ExitCode {
    let work = tempfile::tempdir().expect("temp dir");
    let desk_dir = work.path().join("desk");
    let det_dir = work.path().join("determinism");
    fs::create_dir_all(&desk_dir).unwrap();
    let criteria: Vec<(&str, u64, Box<dyn Fn() -> Outcome>)> = vec![
        ("fixed-point optimality", 1, Box::new(fixed_point)),
        ("dual conservation", 10, Box::new(conservation)),
        ("reduction to Exact-Diffusion", 5, Box::new(ed_reduction)),
        ("gradient correctness", 60, Box::new(gradient_check)),
        ("baseline convergence", 60, Box::new(baseline_convergence)),
        ("robustness ordering", 120, Box::new(robustness_ordering)),
        ("desk-scale training efficacy", 1800, Box::new(|| training_efficacy(&desk_dir))),
        ("long-horizon stability", 300, Box::new(|| long_horizon(&desk_dir))),
        ("determinism", 600, Box::new(|| determinism(&det_dir))),
        ("generator fidelity", 10, Box::new(generator_fidelity)),
    ];
    let mut failed = 0;
    for (i, (name, budget, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = check();
        let elapsed = start.elapsed();
        let in_budget = elapsed <= Duration::from_secs(*budget);
        let (passed, detail) = match outcome {
            Ok((p, d)) => (p && in_budget, d),
            Err(err) => (false, format!("error: {err}")),
        };
        failed += usize::from(!passed);
        println!(
            "criterion {:>2} {} {name}: {detail} [{:.2} s, budget {budget} s]",
            i + 1,
            if passed { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
