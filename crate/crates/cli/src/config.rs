//! Run configuration: a TOML file with `data`, `train`, `sweep` and `report`
//! sections, every field optional.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vbi_transfer::hiermud::{ArchConfig, Baseline, TrainConfig};
use vbi_transfer::preprocess::StftConfig;
use vbi_transfer::sim::ExperimentGrid;
use vbi_transfer::validate::{SearchSpace, DEFAULT_FOLDS};
use vbi_transfer::{Error, Result};

/// Dataset root used when the config names none.
pub const DATA_ROOT_ENV: &str = "VBI_DATA_ROOT";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Seeds data generation, augmentation, training and fold splits.
    pub seed: u64,
    pub data: DataSection,
    pub train: TrainSection,
    pub sweep: SweepSection,
    pub report: ReportSection,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridPreset {
    /// Two bridges, three vehicles, 30 trials per cell.
    Full,
    /// Two bridges, one vehicle, 10 trials per cell.
    #[default]
    Reduced,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Dataset directory; falls back to `$VBI_DATA_ROOT`, then `data`.
    pub root: Option<PathBuf>,
    /// Dataset holding the target bridge, when it is not `root`.
    pub target_root: Option<PathBuf>,
    pub grid: GridPreset,
    /// Vehicle index kept by the reduced grid.
    pub vehicle: usize,
    pub trials_per_cell: Option<usize>,
    pub source: String,
    pub target: String,
    /// Restricts both domains to one vehicle.
    pub vehicle_id: Option<String>,
    /// Augmented copies per source or target trial.
    pub augmentations: usize,
    pub stft: StftConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            root: None,
            target_root: None,
            grid: GridPreset::Reduced,
            vehicle: 1,
            trials_per_cell: None,
            source: "B1".into(),
            target: "B2".into(),
            vehicle_id: None,
            augmentations: 2,
            stft: StftConfig::default(),
        }
    }
}

impl DataSection {
    pub fn root(&self) -> PathBuf {
        self.root
            .clone()
            .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data"))
    }

    pub fn target_root(&self) -> PathBuf {
        self.target_root.clone().unwrap_or_else(|| self.root())
    }

    pub fn grid(&self, seed: u64) -> ExperimentGrid {
        let mut g = match self.grid {
            GridPreset::Full => ExperimentGrid::full(seed),
            GridPreset::Reduced => ExperimentGrid::reduced(seed, self.vehicle, 10),
        };
        if let Some(t) = self.trials_per_cell {
            g.trials_per_cell = t;
        }
        g
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchPreset {
    Standard,
    Compact,
}

/// A named architecture or a full layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArchSpec {
    Preset(ArchPreset),
    Custom(ArchConfig),
}

impl ArchSpec {
    pub fn resolve(&self) -> ArchConfig {
        match self {
            ArchSpec::Preset(ArchPreset::Standard) => ArchConfig::standard(),
            ArchSpec::Preset(ArchPreset::Compact) => ArchConfig::compact(),
            ArchSpec::Custom(a) => a.clone(),
        }
    }
}

/// A baseline preset plus overrides of its hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub baseline: Baseline,
    pub arch: Option<ArchSpec>,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub lambda_d0: Option<f64>,
    pub lambda_dm: Option<f64>,
    pub task_lambdas: Option<Vec<f64>>,
    pub eval_every: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            baseline: Baseline::HierMud,
            arch: None,
            epochs: None,
            learning_rate: None,
            batch_size: None,
            lambda_d0: None,
            lambda_dm: None,
            task_lambdas: None,
            eval_every: None,
        }
    }
}

impl TrainSection {
    pub fn resolve(&self, seed: u64) -> TrainConfig {
        let mut c = TrainConfig::baseline(self.baseline);
        c.seed = seed;
        if let Some(a) = &self.arch {
            c.arch = a.resolve();
        }
        c.epochs = self.epochs.unwrap_or(c.epochs);
        c.learning_rate = self.learning_rate.unwrap_or(c.learning_rate);
        c.batch_size = self.batch_size.unwrap_or(c.batch_size);
        c.lambda_d0 = self.lambda_d0.unwrap_or(c.lambda_d0);
        c.lambda_dm = self.lambda_dm.unwrap_or(c.lambda_dm);
        c.task_lambdas = self.task_lambdas.clone().unwrap_or(c.task_lambdas);
        c.eval_every = self.eval_every.unwrap_or(c.eval_every);
        c
    }
}

/// Hyperparameter grid; an empty list keeps the train section's value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub folds: usize,
    pub learning_rates: Vec<f64>,
    pub lambda_d0: Vec<f64>,
    pub lambda_dm: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub archs: Vec<ArchSpec>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            folds: DEFAULT_FOLDS,
            learning_rates: Vec::new(),
            lambda_d0: vec![0.01, 0.1, 1.0],
            lambda_dm: vec![0.01, 0.1, 1.0],
            batch_sizes: Vec::new(),
            archs: Vec::new(),
        }
    }
}

impl SweepSection {
    pub fn space(&self, base: TrainConfig) -> SearchSpace {
        fn or<T: Clone>(list: &[T], fallback: T) -> Vec<T> {
            if list.is_empty() {
                vec![fallback]
            } else {
                list.to_vec()
            }
        }
        SearchSpace {
            learning_rates: or(&self.learning_rates, base.learning_rate),
            lambda_d0: or(&self.lambda_d0, base.lambda_d0),
            lambda_dm: or(&self.lambda_dm, base.lambda_dm),
            batch_sizes: or(&self.batch_sizes, base.batch_size),
            archs: if self.archs.is_empty() { vec![base.arch.clone()] } else { self.archs.iter().map(ArchSpec::resolve).collect() },
            base,
        }
    }
}

/// Which evaluations a report must contain; empty lists expect nothing.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    /// Metric CSV files, or directories searched for `metrics.csv`.
    pub inputs: Vec<PathBuf>,
    /// Method names as printed, e.g. `HierMUD`.
    pub methods: Vec<String>,
    pub seeds: Vec<u64>,
    /// Column names as printed, e.g. `V2 B1->B2`.
    pub columns: Vec<String>,
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text)?;
        cfg.data.stft.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use vbi_transfer::hiermud::{Mode, Objective};

    #[test]
    fn empty_config_is_the_default() {
        assert_eq!(Config::parse("").unwrap(), Config::default());
    }

    #[test]
    fn train_section_overrides_the_preset() {
        let cfg = Config::parse("seed = 4\n[train]\nbaseline = \"mcnn\"\narch = \"compact\"\nepochs = 7\nlambda_d0 = 0.5\n").unwrap();
        let t = cfg.train.resolve(cfg.seed);
        assert_eq!((t.objective, t.mode, t.hierarchy), (Objective::NoAdaptation, Mode::MultiTask, false));
        assert_eq!(t.arch, ArchConfig::compact());
        assert_eq!((t.epochs, t.lambda_d0, t.seed), (7, 0.5, 4));
        assert_eq!(t.learning_rate, TrainConfig::baseline(Baseline::Mcnn).learning_rate);
    }

    #[test]
    fn custom_architecture_parses() {
        let cfg = Config::parse(
            "[train.arch]\ninput = [1, 8, 8]\nconvs = [{ filters = 2, kernel = 3 }]\npool = 2\nhidden = 4\n",
        )
        .unwrap();
        assert_eq!(cfg.train.resolve(0).arch.flatten_size().unwrap(), 18);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(matches!(Config::parse("[train]\nepoch = 3\n"), Err(Error::Toml(_))));
        assert!(matches!(Config::parse("[data.stft]\nwindow_len = 0\n"), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn config_round_trips_through_toml() {
        let mut cfg = Config::default();
        cfg.train.arch = Some(ArchSpec::Preset(ArchPreset::Compact));
        cfg.sweep.archs = vec![ArchSpec::Custom(ArchConfig::compact())];
        assert_eq!(Config::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn sweep_lists_fall_back_to_the_base() {
        let base = TrainConfig::default();
        let space = SweepSection { lambda_d0: vec![], ..SweepSection::default() }.space(base.clone());
        assert_eq!(space.lambda_d0, vec![base.lambda_d0]);
        assert_eq!(space.lambda_dm.len(), 3);
        assert_eq!(space.candidates().len(), 3);
    }

    #[test]
    fn full_grid_has_the_lab_trial_count() {
        let data = DataSection { grid: GridPreset::Full, ..DataSection::default() };
        assert_eq!(data.grid(0).n_trials(), 2340);
    }
}
