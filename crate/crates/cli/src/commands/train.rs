use std::fs;
use std::path::{Path, PathBuf};

use milodo::baselines::{default_gamma, Algorithm};
use milodo::neuro::encode_checkpoint;
use milodo::training::{initial_params, multi_stage_train, InitMode, StageReport, TrainOptions};
use milodo::{Precision, Scalar};
use serde::Serialize;

use crate::config::{ExperimentConfig, InitChoice};
use crate::data::{load_split, Split};
use crate::error::{CliError, CliResult};
use crate::setup::{gossip, topology};

pub const INIT_CHECKPOINT: &str = "init.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const TRAIN_REPORT: &str = "train_report.toml";

pub fn stage_checkpoint(idx: usize) -> String {
    format!("stage_{}.ckpt", idx + 1)
}

#[derive(Debug, Clone, Serialize)]
struct StageRow {
    stage: usize,
    k_t: usize,
    k: usize,
    lr: f64,
    epochs: usize,
    batch_size: usize,
    epoch_losses: Vec<f64>,
    segments: usize,
    nan_segments: usize,
    aborted: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
struct ReportFile {
    seed: u64,
    precision: Precision,
    init: InitChoice,
    gamma: Option<f64>,
    train_instances: usize,
    aborted: Option<String>,
    stages: Vec<StageRow>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub checkpoint_dir: PathBuf,
    pub stages_completed: usize,
    pub reports: Vec<StageReport>,
    pub aborted: Option<String>,
}

fn write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Special-init step: the configured one, else the tuned Prox-ED step for the training shape.
pub fn init_gamma(cfg: &ExperimentConfig) -> CliResult<f64> {
    if let Some(g) = cfg.train.gamma {
        return Ok(g);
    }
    let (plan, _) = cfg.data.plans()?;
    let shape = plan.groups[0].0;
    if plan.groups.len() == 1 {
        if let Some(g) = default_gamma(plan.kind, shape, Algorithm::ProxEd) {
            return Ok(g);
        }
    }
    Err(CliError::Config("no tuned step for this training set; set train.gamma".into()))
}

/// Trains from the configured init through every stage, writing a checkpoint
/// per completed stage plus `init.ckpt`, `final.ckpt` and a loss report.
/// An aborted stage is a failure; the checkpoints of earlier stages remain.
pub fn cmd_train(cfg: &ExperimentConfig) -> CliResult<TrainSummary> {
    cfg.validate()?;
    match cfg.precision {
        Precision::F64 => train_as::<f64>(cfg),
        Precision::F32 => train_as::<f32>(cfg),
    }
}

fn train_as<T: Scalar>(cfg: &ExperimentConfig) -> CliResult<TrainSummary> {
    let data = load_split(&cfg.data_dir(), Split::Train, None)?;
    let train: Vec<_> = data.iter().map(|o| o.cast::<T>()).collect();
    let t = topology(cfg, train[0].n())?;
    let (init_mode, gamma) = match cfg.train.init {
        InitChoice::Special => {
            let g = init_gamma(cfg)?;
            (InitMode::Special { gossip: gossip::<T>(cfg, &t)?, gamma: g }, Some(g))
        }
        InitChoice::Random => (InitMode::Random, None),
    };
    let init = initial_params(&t, &init_mode, cfg.seed)?;
    let dir = cfg.checkpoint_dir();
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    write(&dir.join(INIT_CHECKPOINT), &encode_checkpoint(&init, None))?;

    let stages = cfg.train.schedule();
    let opts = TrainOptions { loss: cfg.train.loss };
    let run = multi_stage_train(&train, &t, init, &stages, cfg.seed, &opts, |idx, params, adam, report| {
        eprintln!(
            "stage {}: K_T={} K={} final epoch loss {:?} ({:.0} ms)",
            idx + 1,
            report.stage.k_t,
            report.stage.k,
            report.epoch_losses.last(),
            report.wall_ms
        );
        write(&dir.join(stage_checkpoint(idx)), &encode_checkpoint(params, Some(adam)))
            .map_err(|e| milodo::Error::Io(e.to_string()))
    })?;
    write(&dir.join(FINAL_CHECKPOINT), &encode_checkpoint(&run.params, None))?;

    let report = ReportFile {
        seed: cfg.seed,
        precision: cfg.precision,
        init: cfg.train.init,
        gamma,
        train_instances: train.len(),
        aborted: run.aborted.clone(),
        stages: run
            .reports
            .iter()
            .enumerate()
            .map(|(i, r)| StageRow {
                stage: i + 1,
                k_t: r.stage.k_t,
                k: r.stage.k,
                lr: r.stage.lr,
                epochs: r.stage.epochs,
                batch_size: r.stage.batch_size,
                epoch_losses: r.epoch_losses.clone(),
                segments: r.segments,
                nan_segments: r.nan_segments,
                aborted: r.aborted.clone(),
            })
            .collect(),
    };
    let text = toml::to_string(&report).map_err(|e| CliError::Failure(format!("train report: {e}")))?;
    write(&dir.join(TRAIN_REPORT), text.as_bytes())?;

    let summary = TrainSummary {
        checkpoint_dir: dir,
        stages_completed: run.stage_params.len(),
        reports: run.reports,
        aborted: run.aborted,
    };
    match &summary.aborted {
        Some(reason) => Err(CliError::Failure(format!("training aborted: {reason}"))),
        None => Ok(summary),
    }
}
