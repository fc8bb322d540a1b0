//! Versioned TOML experiment configuration.

use std::path::{Path, PathBuf};

use milodo::baselines::{Algorithm, MixingForm};
use milodo::graph::TopologyKind;
use milodo::problems::{ProblemKind, ProblemShape};
use milodo::training::{default_schedule, LossMode, StageConfig};
use milodo::Precision;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default = "default_threads")]
    pub threads: usize,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub topology: TopologyConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// directory relative paths are resolved against; set when loading from a file
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_seed() -> u64 {
    7
}

fn default_threads() -> usize {
    1
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 512 × LASSO(10,300,10,0.1)
    Specialized,
    /// 64 × LASSO(10,500,N,0.1) for N = 5, 10, …, 100
    Meta,
    /// 128 × LASSO(4,10,5,0.1)
    Desk,
    /// 8 × LASSO(4,6,3,0.1)
    #[default]
    Smoke,
    /// `kind`, `shape`, `count` from the config
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeSpec {
    pub n: usize,
    pub d: usize,
    pub samples: usize,
    pub lambda: f64,
}

impl From<ShapeSpec> for ProblemShape {
    fn from(s: ShapeSpec) -> Self {
        ProblemShape::new(s.n, s.d, s.samples, s.lambda)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub preset: Preset,
    pub kind: Option<ProblemKind>,
    pub shape: Option<ShapeSpec>,
    /// training instances (custom preset)
    pub count: Option<usize>,
    /// held-out instances; defaults to 32 (4 for smoke)
    pub test_count: Option<usize>,
    /// held-out shape; defaults to the training shape (N = 50 for meta)
    pub test_shape: Option<ShapeSpec>,
    /// dataset directory; defaults to `<out>/data`
    pub dir: Option<PathBuf>,
}

/// One generated split: instances of one kind, listed shape by shape.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan {
    pub kind: ProblemKind,
    pub groups: Vec<(ProblemShape, usize)>,
}

impl SplitPlan {
    pub fn len(&self) -> usize {
        self.groups.iter().map(|g| g.1).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Shape of the `k`-th instance.
    pub fn shape_of(&self, mut k: usize) -> Option<ProblemShape> {
        for &(shape, count) in &self.groups {
            if k < count {
                return Some(shape);
            }
            k -= count;
        }
        None
    }
}

impl DataConfig {
    /// Training and held-out plans for the configured preset.
    pub fn plans(&self) -> CliResult<(SplitPlan, SplitPlan)> {
        let lasso = |n, d, s, l| ProblemShape::new(n, d, s, l);
        let (kind, train, default_test, default_test_count): (_, Vec<(ProblemShape, usize)>, _, _) = match self.preset {
            Preset::Specialized => {
                let s = lasso(10, 300, 10, 0.1);
                (ProblemKind::Lasso, vec![(s, 512)], s, 32)
            }
            Preset::Meta => {
                let groups = (1..=20).map(|m| (lasso(10, 500, 5 * m, 0.1), 64)).collect();
                (ProblemKind::Lasso, groups, lasso(10, 500, 50, 0.1), 32)
            }
            Preset::Desk => {
                let s = lasso(4, 10, 5, 0.1);
                (ProblemKind::Lasso, vec![(s, 128)], s, 32)
            }
            Preset::Smoke => {
                let s = lasso(4, 6, 3, 0.1);
                (ProblemKind::Lasso, vec![(s, 8)], s, 4)
            }
            Preset::Custom => {
                let shape: ProblemShape =
                    self.shape.ok_or_else(|| CliError::Config("custom preset needs data.shape".into()))?.into();
                let count = self.count.ok_or_else(|| CliError::Config("custom preset needs data.count".into()))?;
                (self.kind.unwrap_or(ProblemKind::Lasso), vec![(shape, count)], shape, 32)
            }
        };
        if self.preset != Preset::Custom && (self.shape.is_some() || self.count.is_some() || self.kind.is_some()) {
            return Err(CliError::Config("data.kind, data.shape and data.count apply to the custom preset only".into()));
        }
        let test_shape = self.test_shape.map(ProblemShape::from).unwrap_or(default_test);
        let test = SplitPlan { kind, groups: vec![(test_shape, self.test_count.unwrap_or(default_test_count))] };
        let train = SplitPlan { kind, groups: train };
        for (shape, count) in train.groups.iter().chain(&test.groups) {
            shape.validate().map_err(|e| CliError::Config(e.to_string()))?;
            if *count == 0 {
                return Err(CliError::Config("instance counts must be positive".into()));
            }
        }
        if train.groups.iter().chain(&test.groups).any(|g| g.0.n != train.groups[0].0.n) {
            return Err(CliError::Config("all instances must share the node count".into()));
        }
        Ok((train, test))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightRule {
    /// `1/3` on a ring, Metropolis otherwise
    #[default]
    Auto,
    Ring,
    Metropolis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyConfig {
    #[serde(flatten)]
    pub kind: TopologyKind,
    #[serde(default)]
    pub weights: WeightRule,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        Self { kind: TopologyKind::Ring, weights: WeightRule::Auto }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitChoice {
    #[default]
    Special,
    Random,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub init: InitChoice,
    /// special-init step; defaults to the tuned Prox-ED step for the training shape
    pub gamma: Option<f64>,
    /// defaults to the five-stage curriculum
    pub stages: Option<Vec<StageConfig>>,
    /// replaces the epoch count of every stage
    pub epochs_override: Option<usize>,
    #[serde(default)]
    pub loss: LossMode,
    /// checkpoint directory; defaults to `<out>/checkpoints`
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn schedule(&self) -> Vec<StageConfig> {
        let mut stages = self.stages.clone().unwrap_or_else(default_schedule);
        if let Some(e) = self.epochs_override {
            for s in &mut stages {
                s.epochs = e;
            }
        }
        stages
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MethodSpec {
    Milodo {
        checkpoint: PathBuf,
        label: Option<String>,
    },
    ProxEd {
        gamma: Option<f64>,
        #[serde(default)]
        mixing: MixingForm,
        label: Option<String>,
    },
    PgExtra {
        gamma: Option<f64>,
        #[serde(default)]
        mixing: MixingForm,
        label: Option<String>,
    },
    ProxAtc {
        gamma: Option<f64>,
        #[serde(default)]
        mixing: MixingForm,
        label: Option<String>,
    },
    ProxDgd {
        gamma: Option<f64>,
        #[serde(default)]
        mixing: MixingForm,
        label: Option<String>,
    },
}

impl MethodSpec {
    pub fn baseline(&self) -> Option<(Algorithm, Option<f64>, MixingForm)> {
        match *self {
            MethodSpec::Milodo { .. } => None,
            MethodSpec::ProxEd { gamma, mixing, .. } => Some((Algorithm::ProxEd, gamma, mixing)),
            MethodSpec::PgExtra { gamma, mixing, .. } => Some((Algorithm::PgExtra, gamma, mixing)),
            MethodSpec::ProxAtc { gamma, mixing, .. } => Some((Algorithm::ProxAtc, gamma, mixing)),
            MethodSpec::ProxDgd { gamma, mixing, .. } => Some((Algorithm::ProxDgd, gamma, mixing)),
        }
    }

    pub fn label(&self) -> String {
        let custom = match self {
            MethodSpec::Milodo { label, .. }
            | MethodSpec::ProxEd { label, .. }
            | MethodSpec::PgExtra { label, .. }
            | MethodSpec::ProxAtc { label, .. }
            | MethodSpec::ProxDgd { label, .. } => label.clone(),
        };
        custom.unwrap_or_else(|| match self.baseline() {
            None => "milodo".to_string(),
            Some((alg, _, MixingForm::Robust)) => alg.name().to_string(),
            Some((alg, _, MixingForm::Direct)) => format!("{}-direct", alg.name()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_k_eval")]
    pub iterations: usize,
    /// held-out instances to average over (at most the split size)
    pub instances: Option<usize>,
    #[serde(default = "default_oracle_tol")]
    pub oracle_tol: f64,
    #[serde(default = "default_oracle_iters")]
    pub oracle_max_iters: usize,
    #[serde(default)]
    pub methods: Vec<MethodSpec>,
    /// run each instance until this gap is reached and write a stopping-condition table
    pub stop_gap: Option<f64>,
    /// record wall-clock time in the CSV (breaks byte-identical reruns)
    #[serde(default)]
    pub timing: bool,
}

fn default_k_eval() -> usize {
    100
}

fn default_oracle_tol() -> f64 {
    1e-12
}

fn default_oracle_iters() -> usize {
    1_000_000
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iterations: default_k_eval(),
            instances: None,
            oracle_tol: default_oracle_tol(),
            oracle_max_iters: default_oracle_iters(),
            methods: Vec::new(),
            stop_gap: None,
            timing: false,
        }
    }
}

impl ExperimentConfig {
    /// Defaults for every section.
    pub fn new() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: default_seed(),
            precision: Precision::F64,
            threads: default_threads(),
            out: default_out(),
            data: DataConfig::default(),
            topology: TopologyConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            base_dir: PathBuf::from("."),
        }
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.out)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data.dir.as_deref().map(|d| self.resolve(d)).unwrap_or_else(|| self.out_dir().join("data"))
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.train
            .checkpoint_dir
            .as_deref()
            .map(|d| self.resolve(d))
            .unwrap_or_else(|| self.out_dir().join("checkpoints"))
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.threads == 0 {
            return Err(CliError::Config("threads must be at least 1".into()));
        }
        self.data.plans()?;
        if self.eval.iterations == 0 {
            return Err(CliError::Config("eval.iterations must be at least 1".into()));
        }
        if !(self.eval.oracle_tol > 0.0) {
            return Err(CliError::Config("eval.oracle_tol must be positive".into()));
        }
        if let Some(g) = self.eval.stop_gap {
            if !(g > 0.0) {
                return Err(CliError::Config("eval.stop_gap must be positive".into()));
            }
        }
        for s in self.train.schedule() {
            s.validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        if let Some(g) = self.train.gamma {
            if !(g > 0.0 && g.is_finite()) {
                return Err(CliError::Config("train.gamma must be positive".into()));
            }
        }
        let mut labels = std::collections::BTreeSet::new();
        for m in &self.eval.methods {
            if !labels.insert(m.label()) {
                return Err(CliError::Config(format!("duplicate method label `{}`", m.label())));
            }
            if let Some((_, Some(g), _)) = m.baseline() {
                if !(g > 0.0 && g.is_finite()) {
                    return Err(CliError::Config(format!("{}: gamma must be positive", m.label())));
                }
            }
        }
        Ok(())
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = ExperimentConfig::parse("schema_version = 1").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.data.preset, Preset::Smoke);
        assert_eq!(cfg.topology.kind, TopologyKind::Ring);
        assert_eq!(cfg.train.schedule(), default_schedule());
        assert_eq!(cfg.eval.oracle_tol, 1e-12);
    }

    #[test]
    fn wrong_schema_and_unknown_keys_rejected() {
        assert!(ExperimentConfig::parse("schema_version = 2").is_err());
        assert!(ExperimentConfig::parse("schema_version = 1\nbogus = 3").is_err());
        assert!(ExperimentConfig::parse("seed = 3").is_err());
    }

    #[test]
    fn full_config_round_trips() {
        let text = r#"
schema_version = 1
seed = 11
precision = "f32"
out = "runs/a"

[data]
preset = "custom"
kind = "logistic"
shape = { n = 5, d = 8, samples = 4, lambda = 0.05 }
count = 12
test_count = 3

[topology]
kind = "erdos_renyi"
p = 0.5
weights = "metropolis"

[train]
init = "random"
epochs_override = 0
stages = [{ k_t = 2, k = 4, lr = 1e-3, epochs = 3, batch_size = 4 }]

[eval]
iterations = 50
stop_gap = 1e-6
methods = [
  { method = "milodo", checkpoint = "ckpt/final.ckpt" },
  { method = "prox-ed", gamma = 0.03, mixing = "direct" },
  { method = "pg-extra" },
]
"#;
        let cfg = ExperimentConfig::parse(text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.precision, Precision::F32);
        assert_eq!(cfg.topology.kind, TopologyKind::ErdosRenyi { p: 0.5 });
        assert_eq!(cfg.train.schedule()[0].epochs, 0);
        assert_eq!(cfg.eval.methods[1].label(), "prox-ed-direct");
        assert_eq!(cfg.eval.methods[2].baseline(), Some((Algorithm::PgExtra, None, MixingForm::Robust)));
        let (train, test) = cfg.data.plans().unwrap();
        assert_eq!((train.kind, train.len(), test.len()), (ProblemKind::Logistic, 12, 3));
        assert_eq!(ExperimentConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn preset_plans() {
        let plans = |p| DataConfig { preset: p, ..DataConfig::default() }.plans().unwrap();
        let (train, test) = plans(Preset::Specialized);
        assert_eq!((train.len(), test.len()), (512, 32));
        let (train, _) = plans(Preset::Meta);
        assert_eq!(train.len(), 1280);
        assert_eq!(train.groups.len(), 20);
        assert_eq!(train.shape_of(0).unwrap().samples, 5);
        assert_eq!(train.shape_of(1279).unwrap().samples, 100);
        assert_eq!(train.shape_of(1280), None);
        let (train, test) = plans(Preset::Desk);
        assert_eq!((train.len(), test.len()), (128, 32));
    }

    #[test]
    fn invalid_values_rejected() {
        for bad in [
            "schema_version = 1\nthreads = 0",
            "schema_version = 1\n[eval]\niterations = 0",
            "schema_version = 1\n[data]\npreset = \"custom\"",
            "schema_version = 1\n[data]\ncount = 3",
            "schema_version = 1\n[train]\ngamma = -1.0",
            "schema_version = 1\n[train]\nstages = [{ k_t = 3, k = 10, lr = 1e-3, epochs = 1, batch_size = 4 }]",
            "schema_version = 1\n[eval]\nmethods = [{ method = \"prox-ed\", gamma = 0.0 }]",
            "schema_version = 1\n[eval]\nmethods = [{ method = \"prox-ed\" }, { method = \"prox-ed\" }]",
        ] {
            let parsed = ExperimentConfig::parse(bad);
            assert!(parsed.is_err() || parsed.unwrap().validate().is_err(), "{bad}");
        }
    }
}
