//! TOML experiment configuration. Unknown keys are rejected everywhere.

use std::path::Path;

use fedxfer::federation::{Algorithm, BatchMode, LrSchedule, Optimizer, RoundConfig};
use fedxfer::models::Activation;
use fedxfer::seed::{self, Stream};
use fedxfer::{ModelSpec, ShiftSpec};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every random stream is derived from it.
    pub seed: u64,
    pub rounds: usize,
    /// Early stop after this many rounds without improvement.
    #[serde(default)]
    pub patience: Option<usize>,
    pub model: ModelConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub shift: ShiftConfig,
    pub partition: PartitionConfig,
    pub training: TrainingConfig,
    #[serde(default)]
    pub transfer: TransferConfig,
    #[serde(default)]
    pub bounds: BoundsConfig,
    #[serde(default)]
    pub compare: CompareConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKindName {
    LinearRegression,
    Logistic,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKindName,
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "yes")]
    pub bias: bool,
    /// Defaults to the start of the last layer (0 for linear models).
    #[serde(default)]
    pub split_index: Option<usize>,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub num_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub separation: f64,
    /// Share of the target domain held out for evaluation.
    #[serde(default = "default_test_fraction")]
    pub target_test_fraction: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftConfig {
    #[serde(default)]
    pub rotation: f64,
    #[serde(default)]
    pub translation: Vec<f64>,
    #[serde(default)]
    pub label_noise: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeName {
    LabelSubset,
    Dirichlet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub scheme: SchemeName,
    pub clients: usize,
    #[serde(default)]
    pub classes_per_client: Option<usize>,
    #[serde(default)]
    pub concentration: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LrConfig {
    Fixed {
        lr: f64,
    },
    StepDecay {
        initial: f64,
        factor: f64,
        period: usize,
    },
    /// `factor / alpha` with the certified smoothness constant.
    Relative {
        factor: f64,
    },
    /// Bound-minimizing rate from each round's statistics.
    Optimal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerName {
    Gd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub algorithm: Algorithm,
    #[serde(default = "one")]
    pub participation: f64,
    #[serde(default)]
    pub std_subset_fraction: f64,
    #[serde(default)]
    pub xi: f64,
    pub lr: LrConfig,
    #[serde(default = "one_usize")]
    pub local_steps: usize,
    /// Full batch when absent.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerName,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferConfig {
    #[serde(default = "default_finetune_lr")]
    pub lr: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            lr: default_finetune_lr(),
            epochs: default_epochs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsConfig {
    #[serde(default = "yes")]
    pub round_ub: bool,
    #[serde(default = "yes")]
    pub telescoped: bool,
    /// Target-side checks (lemma1-full, theorem2, theorem1); these run the
    /// discrepancy estimators.
    #[serde(default)]
    pub target: bool,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default = "default_ascent_steps")]
    pub ascent_steps: usize,
    #[serde(default = "default_radius")]
    pub radius: f64,
    #[serde(default = "default_head_budget")]
    pub head_budget: usize,
}

impl Default for BoundsConfig {
    fn default() -> Self {
        Self {
            round_ub: true,
            telescoped: true,
            target: false,
            restarts: default_restarts(),
            ascent_steps: default_ascent_steps(),
            radius: default_radius(),
            head_budget: default_head_budget(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    #[serde(default = "default_algorithms")]
    pub algorithms: Vec<Algorithm>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Inclusive round window for the averaged statistics.
    #[serde(default = "default_window")]
    pub window: [usize; 2],
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            algorithms: default_algorithms(),
            seeds: default_seeds(),
            window: default_window(),
        }
    }
}

fn yes() -> bool {
    true
}
fn one() -> f64 {
    1.0
}
fn one_usize() -> usize {
    1
}
fn default_activation() -> Activation {
    Activation::Tanh
}
fn default_init_scale() -> f64 {
    0.1
}
fn default_test_fraction() -> f64 {
    0.5
}
fn default_optimizer() -> OptimizerName {
    OptimizerName::Gd
}
fn default_finetune_lr() -> f64 {
    0.1
}
fn default_epochs() -> usize {
    100
}
fn default_restarts() -> usize {
    4
}
fn default_ascent_steps() -> usize {
    100
}
fn default_radius() -> f64 {
    5.0
}
fn default_head_budget() -> usize {
    2000
}
fn default_algorithms() -> Vec<Algorithm> {
    vec![Algorithm::FedAvg, Algorithm::FedGtst, Algorithm::FedIirLite]
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}
fn default_window() -> [usize; 2] {
    [10, 100]
}

/// Seeds for every random stream of one run. Data-side streams come from the
/// config's master seed; run-side streams from `run_seed`, so comparisons over
/// several run seeds share one dataset and partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub data: u64,
    pub shift: u64,
    pub partition: u64,
    pub split: u64,
    pub init: u64,
    pub federation: u64,
}

impl Seeds {
    pub fn new(master: u64, run_seed: u64) -> Self {
        Self {
            data: seed::derive(master, Stream::Data, 0),
            shift: seed::derive(master, Stream::Shift, 0),
            partition: seed::derive(master, Stream::Partition, 0),
            split: seed::derive(master, Stream::Split, 0),
            init: seed::derive(run_seed, Stream::Init, 0),
            federation: seed::derive(run_seed, Stream::Participation, 0),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn seeds(&self) -> Seeds {
        Seeds::new(self.seed, self.seed)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Config(m.to_string()));
        if self.rounds == 0 {
            return bad("rounds must be >= 1");
        }
        if self.data.num_classes == 0 || self.data.dim == 0 || self.data.samples_per_class == 0 {
            return bad("data sizes must be positive");
        }
        if !(self.data.separation >= 0.0) {
            return bad("data.separation must be >= 0");
        }
        if !(self.data.target_test_fraction > 0.0 && self.data.target_test_fraction < 1.0) {
            return bad("data.target_test_fraction must be in (0, 1)");
        }
        if self.partition.clients == 0 {
            return bad("partition.clients must be >= 1");
        }
        match self.partition.scheme {
            SchemeName::LabelSubset => match self.partition.classes_per_client {
                Some(c) if c >= 1 && c <= self.data.num_classes => {}
                _ => return bad("label-subset needs 1 <= partition.classes_per_client <= data.num_classes"),
            },
            SchemeName::Dirichlet => match self.partition.concentration {
                Some(a) if a > 0.0 && a.is_finite() => {}
                _ => return bad("dirichlet needs partition.concentration > 0"),
            },
        }
        if self.model.kind == ModelKindName::Mlp && self.model.hidden.is_empty() {
            return bad("mlp needs at least one hidden layer");
        }
        if !(self.model.init_scale >= 0.0) {
            return bad("model.init_scale must be >= 0");
        }
        if !(self.transfer.lr >= 0.0) {
            return bad("transfer.lr must be >= 0");
        }
        let [lo, hi] = self.compare.window;
        if lo == 0 || lo > hi {
            return bad("compare.window must satisfy 1 <= start <= end");
        }
        if self.compare.seeds.is_empty() || self.compare.algorithms.is_empty() {
            return bad("compare needs at least one seed and one algorithm");
        }
        if self.training.lr == LrConfig::Optimal
            && (self.training.optimizer != OptimizerName::Gd || self.training.local_steps != 1)
        {
            return bad("the optimal learning-rate schedule requires gd with one local step");
        }
        self.model_spec()?
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.shift_spec()
            .validate(self.data.dim)
            .map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(b) = self.training.batch_size {
            if b == 0 {
                return bad("training.batch_size must be >= 1");
            }
        }
        // Everything except the smoothness-dependent rate can be checked now.
        self.round_config(1.0)?;
        Ok(())
    }

    pub fn model_spec(&self) -> Result<ModelSpec, CliError> {
        let (d, c) = (self.data.dim, self.data.num_classes);
        let mut spec = match self.model.kind {
            ModelKindName::LinearRegression => ModelSpec::linear_regression(d),
            ModelKindName::Logistic => ModelSpec::logistic(d, c),
            ModelKindName::Mlp => ModelSpec::mlp(d, self.model.hidden.clone(), c, self.model.activation),
        };
        if !self.model.bias {
            spec = spec.without_bias();
        }
        if let Some(s) = self.model.split_index {
            spec = spec.with_split(s);
        }
        Ok(spec)
    }

    pub fn shift_spec(&self) -> ShiftSpec {
        ShiftSpec {
            rotation: self.shift.rotation,
            translation: self.shift.translation.clone(),
            label_noise: self.shift.label_noise,
            seed: self.seeds().shift,
        }
    }

    /// The round configuration, resolving relative and optimal learning rates
    /// against the smoothness constant `alpha`.
    pub fn round_config(&self, alpha: f64) -> Result<RoundConfig, CliError> {
        let t = &self.training;
        let lr_schedule = match t.lr {
            LrConfig::Fixed { lr } => LrSchedule::Fixed { lr },
            LrConfig::StepDecay {
                initial,
                factor,
                period,
            } => LrSchedule::StepDecay {
                initial,
                factor,
                period,
            },
            LrConfig::Relative { factor } => LrSchedule::Fixed { lr: factor / alpha },
            LrConfig::Optimal => LrSchedule::OptimalFromStats { alpha },
        };
        let config = RoundConfig {
            algorithm: t.algorithm,
            participation: t.participation,
            std_subset_fraction: t.std_subset_fraction,
            xi: t.xi,
            lr_schedule,
            local_steps: t.local_steps,
            batch_mode: t
                .batch_size
                .map_or(BatchMode::FullBatch, |size| BatchMode::Minibatch { size }),
            optimizer: match t.optimizer {
                OptimizerName::Gd => Optimizer::Gd,
                OptimizerName::Adam => Optimizer::adam(),
            },
        };
        config.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
seed = 3
rounds = 5
[model]
kind = "logistic"
[data]
num_classes = 3
dim = 2
samples_per_class = 10
separation = 2.0
[partition]
scheme = "label-subset"
clients = 3
classes_per_client = 1
[training]
algorithm = "fedgtst"
xi = 0.1
lr = { kind = "fixed", lr = 0.1 }
"#;

    #[test]
    fn parses_minimal() {
        let c = ExperimentConfig::parse(BASE).unwrap();
        assert_eq!(c.training.algorithm, Algorithm::FedGtst);
        assert_eq!(c.transfer.epochs, 100);
        assert_eq!(c.model_spec().unwrap().total_dim(), 9);
    }

    #[test]
    fn rejects_unknown_keys() {
        let text = BASE.replace("separation = 2.0", "separation = 2.0\nseperation = 1.0");
        assert!(matches!(ExperimentConfig::parse(&text), Err(CliError::Config(_))));
    }

    #[test]
    fn rejects_bad_fractions() {
        let text = BASE.replace("xi = 0.1", "xi = 0.1\nparticipation = 1.5");
        assert!(ExperimentConfig::parse(&text).is_err());
    }

    #[test]
    fn run_seed_only_moves_run_streams() {
        let a = Seeds::new(1, 1);
        let b = Seeds::new(1, 2);
        assert_eq!((a.data, a.partition, a.split), (b.data, b.partition, b.split));
        assert_ne!(a.init, b.init);
        assert_ne!(a.federation, b.federation);
    }
}
