//! Flat TOML run configurations, one struct per subcommand.

use std::path::{Path, PathBuf};

use amdkd_core::bench::Normalization;
use amdkd_core::distill::{Ablation, DistillConfig, TeacherMode, TrajectorySource};
use amdkd_core::eval::DecodeSpec;
use amdkd_core::instancegen::{DistributionKind, DistributionSpec};
use amdkd_core::problems::ProblemKind;
use amdkd_core::training::{BaselineMode, TrainConfig};
use amdkd_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Overrides `output_dir` of every config.
pub const OUT_DIR_ENV: &str = "AMDKD_OUT_DIR";

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
}

pub fn to_toml<T: Serialize>(config: &T) -> Result<String> {
    toml::to_string(config).map_err(|e| Error::Config(e.to_string()))
}

/// Distribution names as written in configs (`uniform`, `cluster`, ...).
mod kinds {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[DistributionKind], s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|k| k.name()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<DistributionKind>, D::Error> {
        Vec::<String>::deserialize(d)?
            .iter()
            .map(|s| s.parse().map_err(serde::de::Error::custom))
            .collect()
    }
}

mod kind {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &DistributionKind, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(v.name())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<DistributionKind, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

fn all_distributions() -> Vec<DistributionKind> {
    DistributionKind::ALL.to_vec()
}

fn exemplars() -> Vec<DistributionKind> {
    DistributionKind::EXEMPLARS.to_vec()
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn yes() -> bool {
    true
}

fn clip(value: f64) -> Option<f64> {
    (value != 0.0).then_some(value)
}

/// Seed of the `count` instances of one distribution in a generated set.
pub fn dataset_seed(seed: u64, kind: DistributionKind) -> u64 {
    use rand::Rng;
    let salt = DistributionKind::ALL.iter().position(|&k| k == kind).expect("listed kind") as u64;
    amdkd_core::rng::RngStream::derive(seed, 0xDA7A_0000 + salt).gen()
}

/// Settings shared by every subcommand.
pub trait RunConfig: Serialize {
    fn seed_mut(&mut self) -> &mut u64;
    fn output_dir_mut(&mut self) -> &mut PathBuf;
    fn validate(&self) -> Result<()>;
}

macro_rules! run_config {
    ($t:ty) => {
        impl RunConfig for $t {
            fn seed_mut(&mut self) -> &mut u64 {
                &mut self.seed
            }
            fn output_dir_mut(&mut self) -> &mut PathBuf {
                &mut self.output_dir
            }
            fn validate(&self) -> Result<()> {
                self.check()
            }
        }
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    pub problem: ProblemKind,
    pub n: usize,
    #[serde(default = "all_distributions", with = "kinds")]
    pub distributions: Vec<DistributionKind>,
    /// Instances per distribution.
    pub count: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
}

impl GenerateConfig {
    fn check(&self) -> Result<()> {
        if self.n == 0 || self.count == 0 || self.distributions.is_empty() {
            return Err(Error::Config("n, count and distributions must be nonempty".into()));
        }
        Ok(())
    }
}
run_config!(GenerateConfig);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveConfig {
    /// Instance file written by `generate`.
    pub instances: PathBuf,
    /// Existing reference cache to extend.
    #[serde(default)]
    pub references: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
}

impl SolveConfig {
    fn check(&self) -> Result<()> {
        Ok(())
    }
}
run_config!(SolveConfig);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainTeacherConfig {
    pub problem: ProblemKind,
    pub n: usize,
    #[serde(with = "kind")]
    pub distribution: DistributionKind,
    #[serde(default = "TrainTeacherConfig::embed_dim")]
    pub embed_dim: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    #[serde(default = "TrainTeacherConfig::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "TrainTeacherConfig::baseline_mode")]
    pub baseline_mode: BaselineMode,
    #[serde(default)]
    pub starts: Option<usize>,
    /// Global gradient-norm clip; 0 disables clipping.
    #[serde(default = "TrainTeacherConfig::grad_clip")]
    pub grad_clip: f64,
    #[serde(default)]
    pub init_seed: Option<u64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
}

impl TrainTeacherConfig {
    fn embed_dim() -> usize {
        32
    }
    fn learning_rate() -> f64 {
        1e-4
    }
    fn baseline_mode() -> BaselineMode {
        BaselineMode::SharedMultistart
    }
    fn grad_clip() -> f64 {
        1.0
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut c = TrainConfig::new(self.problem, self.n, DistributionSpec::new(self.distribution));
        c.embed_dim = self.embed_dim;
        c.epochs = self.epochs;
        c.steps_per_epoch = self.steps_per_epoch;
        c.batch_size = self.batch_size;
        c.learning_rate = self.learning_rate;
        c.baseline_mode = self.baseline_mode;
        c.starts = self.starts;
        c.grad_clip = clip(self.grad_clip);
        c.init_seed = self.init_seed;
        c.seed = self.seed;
        c
    }

    fn check(&self) -> Result<()> {
        self.train_config().validate()
    }
}
run_config!(TrainTeacherConfig);

/// Used by both `distill` and `ablate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillRunConfig {
    pub problem: ProblemKind,
    pub n: usize,
    #[serde(default = "exemplars", with = "kinds")]
    pub exemplars: Vec<DistributionKind>,
    /// Teacher checkpoints, one per exemplar, in the same order.
    pub teachers: Vec<PathBuf>,
    #[serde(default = "DistillRunConfig::student_dim")]
    pub student_dim: usize,
    #[serde(default = "DistillRunConfig::alpha")]
    pub alpha: f64,
    pub epochs: usize,
    #[serde(default = "DistillRunConfig::adaptive_start")]
    pub adaptive_start: usize,
    #[serde(default = "yes")]
    pub adaptive: bool,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    #[serde(default = "TrainTeacherConfig::learning_rate")]
    pub learning_rate: f64,
    #[serde(default)]
    pub starts: Option<usize>,
    /// Global gradient-norm clip; 0 disables clipping.
    #[serde(default = "TrainTeacherConfig::grad_clip")]
    pub grad_clip: f64,
    #[serde(default = "DistillRunConfig::validation_size")]
    pub validation_size: usize,
    #[serde(default = "DistillRunConfig::validation_seed")]
    pub validation_seed: u64,
    #[serde(default = "DecodeSpec::multistart")]
    pub validation_decode: DecodeSpec,
    #[serde(default = "DistillRunConfig::trajectory_source")]
    pub trajectory_source: TrajectorySource,
    #[serde(default = "DistillRunConfig::teacher_mode")]
    pub teacher_mode: TeacherMode,
    #[serde(default)]
    pub early_stop_eval: bool,
    /// Reference cache for the validation sets; missing entries are solved.
    #[serde(default)]
    pub references: Option<PathBuf>,
    /// Required by `ablate`, rejected by `distill`.
    #[serde(default)]
    pub ablation: Option<Ablation>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
}

impl DistillRunConfig {
    fn student_dim() -> usize {
        16
    }
    fn alpha() -> f64 {
        0.5
    }
    fn adaptive_start() -> usize {
        1
    }
    fn validation_size() -> usize {
        1000
    }
    fn validation_seed() -> u64 {
        12345
    }
    fn trajectory_source() -> TrajectorySource {
        TrajectorySource::OnPolicy
    }
    fn teacher_mode() -> TeacherMode {
        TeacherMode::SingleSelected
    }

    pub fn distill_config(&self) -> DistillConfig {
        let specs = self.exemplars.iter().map(|&k| DistributionSpec::new(k)).collect();
        let mut c = DistillConfig::new(self.problem, self.n, specs);
        c.student_dim = self.student_dim;
        c.alpha = self.alpha;
        c.epochs = self.epochs;
        c.adaptive_start = self.adaptive_start;
        c.adaptive = self.adaptive;
        c.steps_per_epoch = self.steps_per_epoch;
        c.batch_size = self.batch_size;
        c.learning_rate = self.learning_rate;
        c.starts = self.starts;
        c.grad_clip = clip(self.grad_clip);
        c.validation_size = self.validation_size;
        c.validation_seed = self.validation_seed;
        c.validation_decode = self.validation_decode;
        c.trajectory_source = self.trajectory_source;
        c.teacher_mode = self.teacher_mode;
        c.early_stop_eval = self.early_stop_eval;
        c.seed = self.seed;
        c
    }

    fn check(&self) -> Result<()> {
        if self.teachers.len() != self.exemplars.len() {
            return Err(Error::Config(format!(
                "{} teachers for {} exemplars",
                self.teachers.len(),
                self.exemplars.len()
            )));
        }
        self.distill_config().validate()
    }
}
run_config!(DistillRunConfig);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    pub problem: ProblemKind,
    pub n: usize,
    /// Policy checkpoints to evaluate.
    pub models: Vec<PathBuf>,
    /// Row labels of the gap table; defaults to the checkpoint file stems.
    #[serde(default)]
    pub model_names: Option<Vec<String>>,
    /// Instance file from `generate`; when absent, `count` instances per
    /// distribution are generated exactly as `generate` would.
    #[serde(default)]
    pub instances: Option<PathBuf>,
    #[serde(default = "all_distributions", with = "kinds")]
    pub distributions: Vec<DistributionKind>,
    #[serde(default = "EvaluateConfig::count")]
    pub count: usize,
    #[serde(default = "DecodeSpec::greedy")]
    pub decode: DecodeSpec,
    /// Reference cache; instances missing from it are skipped.
    #[serde(default)]
    pub references: Option<PathBuf>,
    /// Solve missing references instead of skipping them.
    #[serde(default)]
    pub solve_missing: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
}

impl EvaluateConfig {
    fn count() -> usize {
        1000
    }

    pub fn names(&self) -> Vec<String> {
        self.model_names.clone().unwrap_or_else(|| {
            self.models
                .iter()
                .map(|p| p.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned()))
                .collect()
        })
    }

    fn check(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::Config("models must list at least one checkpoint".into()));
        }
        if self.names().len() != self.models.len() {
            return Err(Error::Config("model_names must match models".into()));
        }
        if self.instances.is_none() && (self.count == 0 || self.distributions.is_empty()) {
            return Err(Error::Config("count and distributions must be nonempty".into()));
        }
        Ok(())
    }
}
run_config!(EvaluateConfig);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParseBenchConfig {
    /// TSPLIB (`.tsp`) and CVRPLIB (`.vrp`) files.
    pub files: Vec<PathBuf>,
    /// Run the classical heuristic on every instance.
    #[serde(default = "yes")]
    pub solve: bool,
    /// Optional policy checkpoint evaluated on matching instances.
    #[serde(default)]
    pub model: Option<PathBuf>,
    #[serde(default = "DecodeSpec::greedy")]
    pub decode: DecodeSpec,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
}

impl ParseBenchConfig {
    fn check(&self) -> Result<()> {
        if self.files.is_empty() {
            return Err(Error::Config("files must list at least one benchmark".into()));
        }
        Ok(())
    }
}
run_config!(ParseBenchConfig);
