//! Hierarchical multi-task domain-adversarial model, its training objectives
//! and the baseline configurations.
//!
//! Tasks are split into easy ones, predicted from the task-shared features,
//! and hard ones, predicted from an extra task-specific extractor stacked on
//! the shared features. A task-shared domain classifier and one classifier
//! per hard task sit behind gradient reversal layers.

mod divergence;
mod model;
mod objective;
mod train;

#[cfg(test)]
mod tests;

pub use divergence::divergence_proxy;
pub use model::{build_model, load_model, save_model, ArchConfig, ConvLayer, HierModel, ModelSpec};
pub use objective::{adaptive_weights, domain_losses, objective_weights, task_losses, DomainLosses};
pub use train::{
    domain_accuracy, predict_classes, predict_target, shared_features, train, write_history_csv, EpochRecord,
    Prediction, TargetMetrics, TrainOutput,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Hard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub n_classes: usize,
    pub difficulty: Difficulty,
}

impl TaskSpec {
    pub fn new(name: impl Into<String>, n_classes: usize, difficulty: Difficulty) -> Self {
        Self { name: name.into(), n_classes, difficulty }
    }

    /// Location (4 classes, class 0 undamaged) as easy, severity (5 classes) as hard.
    pub fn bhm() -> Vec<TaskSpec> {
        vec![TaskSpec::new("location", 4, Difficulty::Easy), TaskSpec::new("severity", 5, Difficulty::Hard)]
    }
}

/// Easy when the source accuracy reaches the threshold, hard otherwise.
pub fn split_by_accuracy(source_accuracy: &[f64], threshold: f64) -> Vec<Difficulty> {
    source_accuracy
        .iter()
        .map(|&p| if p >= threshold { Difficulty::Easy } else { Difficulty::Hard })
        .collect()
}

/// How per-task domain divergences are combined into the adversarial term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Only the task with the largest divergence (smallest domain loss).
    HardMax,
    Average,
    /// Log-sum-exp of the divergences, giving softmax weights.
    SoftMax,
    /// Supervised learning on the source only.
    NoAdaptation,
}

/// How tasks share the task-shared extractor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// One extractor shared by every task.
    MultiTask,
    /// One extractor and domain classifier per task, trained side by side.
    Independent,
    /// One extractor per task, trained one task after the other; later tasks
    /// see the one-hot predictions of earlier ones.
    Sequential,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Baseline {
    #[serde(rename = "mcnn")]
    Mcnn,
    #[serde(rename = "iud")]
    Iud,
    #[serde(rename = "sud")]
    Sud,
    #[serde(rename = "mud")]
    Mud,
    #[serde(rename = "hiermud_a")]
    HierMudA,
    #[serde(rename = "hiermud")]
    HierMud,
}

impl Baseline {
    pub const ALL: [Baseline; 6] =
        [Baseline::Mcnn, Baseline::Iud, Baseline::Sud, Baseline::Mud, Baseline::HierMudA, Baseline::HierMud];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::Mcnn => "MCNN",
            Baseline::Iud => "iUD",
            Baseline::Sud => "sUD",
            Baseline::Mud => "MUD",
            Baseline::HierMudA => "HierMUD-a",
            Baseline::HierMud => "HierMUD",
        }
    }

    pub fn parse(s: &str) -> Option<Baseline> {
        let key = s.to_ascii_lowercase().replace(['-', '_'], "");
        Baseline::ALL.into_iter().find(|b| b.name().to_ascii_lowercase().replace('-', "") == key)
    }

    /// (objective, mode, hierarchy).
    pub fn settings(self) -> (Objective, Mode, bool) {
        match self {
            Baseline::Mcnn => (Objective::NoAdaptation, Mode::MultiTask, false),
            Baseline::Iud => (Objective::SoftMax, Mode::Independent, false),
            Baseline::Sud => (Objective::SoftMax, Mode::Sequential, false),
            Baseline::Mud => (Objective::Average, Mode::MultiTask, false),
            Baseline::HierMudA => (Objective::Average, Mode::MultiTask, true),
            Baseline::HierMud => (Objective::SoftMax, Mode::MultiTask, true),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub objective: Objective,
    pub mode: Mode,
    pub hierarchy: bool,
    /// λ_m per task; empty means 1 for every task.
    pub task_lambdas: Vec<f64>,
    pub lambda_d0: f64,
    pub lambda_dm: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Target metrics every this many epochs when target labels are supplied; 0 for the last epoch only.
    pub eval_every: usize,
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::baseline(Baseline::HierMud)
    }
}

impl TrainConfig {
    pub fn baseline(b: Baseline) -> Self {
        let (objective, mode, hierarchy) = b.settings();
        Self {
            objective,
            mode,
            hierarchy,
            task_lambdas: Vec::new(),
            lambda_d0: 0.1,
            lambda_dm: 0.1,
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 300,
            seed: 0,
            eval_every: 50,
            arch: ArchConfig::standard(),
        }
    }

    pub fn task_lambda(&self, m: usize) -> f64 {
        self.task_lambdas.get(m).copied().unwrap_or(1.0)
    }

    pub fn adapts(&self) -> bool {
        self.objective != Objective::NoAdaptation
    }

    pub fn validate(&self, tasks: &[TaskSpec]) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if tasks.is_empty() {
            return bad("at least one task is required".into());
        }
        if let Some(t) = tasks.iter().find(|t| t.n_classes < 2) {
            return bad(format!("task {} needs at least 2 classes", t.name));
        }
        if !self.task_lambdas.is_empty() && self.task_lambdas.len() != tasks.len() {
            return bad(format!("{} task lambdas for {} tasks", self.task_lambdas.len(), tasks.len()));
        }
        let lambdas = self.task_lambdas.iter().chain([&self.lambda_d0, &self.lambda_dm]);
        if lambdas.into_iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return bad("lambdas must be finite and non-negative".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch size and epochs must be positive".into());
        }
        self.arch.flatten_size().map(|_| ())
    }
}
