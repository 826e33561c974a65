use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::passage::{simulate_passage_with, SimOptions};
use super::{record, BridgeConfig, DamageState, SignalRecord, VehicleConfig, CHANNEL_NAMES, LB_TO_KG};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
const TRIAL_DIR: &str = "trials";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedBridge {
    pub id: String,
    pub config: BridgeConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedVehicle {
    pub id: String,
    pub config: VehicleConfig,
}

/// Full factorial design: bridges × vehicles × (locations × severities + 1
/// undamaged cell) × trials per cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentGrid {
    pub bridges: Vec<NamedBridge>,
    pub vehicles: Vec<NamedVehicle>,
    /// Attached-mass positions as fractions of each span.
    pub damage_locations: Vec<f64>,
    /// Attached masses, kg.
    pub severities: Vec<f64>,
    pub trials_per_cell: usize,
    pub sample_rate_hz: f64,
    pub seed: u64,
    #[serde(default)]
    pub options: SimOptions,
}

impl ExperimentGrid {
    pub const QUARTER_POINTS: [f64; 3] = [0.25, 0.5, 0.75];
    pub const SEVERITIES_LB: [f64; 4] = [0.5, 1.0, 1.5, 2.0];

    pub fn canonical_bridges() -> Vec<NamedBridge> {
        vec![
            NamedBridge { id: "B1".into(), config: BridgeConfig::b1() },
            NamedBridge { id: "B2".into(), config: BridgeConfig::b2() },
        ]
    }

    pub fn canonical_vehicles() -> Vec<NamedVehicle> {
        let span = BridgeConfig::b1().length;
        VehicleConfig::lab_fleet(span)
            .into_iter()
            .enumerate()
            .map(|(i, config)| NamedVehicle { id: format!("V{}", i + 1), config })
            .collect()
    }

    /// Two lab bridges, three vehicles, quarter-span damage at four masses,
    /// 30 trials per cell.
    pub fn full(seed: u64) -> Self {
        Self {
            bridges: Self::canonical_bridges(),
            vehicles: Self::canonical_vehicles(),
            damage_locations: Self::QUARTER_POINTS.to_vec(),
            severities: Self::SEVERITIES_LB.iter().map(|lb| lb * LB_TO_KG).collect(),
            trials_per_cell: 30,
            sample_rate_hz: 1600.0,
            seed,
            options: SimOptions::default(),
        }
    }

    /// Both bridges, one vehicle, `trials_per_cell` trials.
    pub fn reduced(seed: u64, vehicle: usize, trials_per_cell: usize) -> Self {
        let mut g = Self::full(seed);
        g.vehicles = vec![g.vehicles.swap_remove(vehicle.min(2))];
        g.trials_per_cell = trials_per_cell;
        g
    }

    pub fn cells(&self) -> usize {
        self.damage_locations.len() * self.severities.len() + 1
    }

    pub fn n_trials(&self) -> usize {
        self.bridges.len() * self.vehicles.len() * self.cells() * self.trials_per_cell
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("experiment grid: {m}")));
        if self.bridges.is_empty() || self.vehicles.is_empty() || self.trials_per_cell == 0 {
            return bad("needs at least one bridge, one vehicle and one trial per cell");
        }
        if self.damage_locations.iter().any(|&f| !(f > 0.0 && f < 1.0)) {
            return bad("damage locations must be strict fractions of the span");
        }
        if self.severities.iter().any(|&q| !(q > 0.0)) {
            return bad("severities must be positive masses");
        }
        if self.damage_locations.len() > 255 || self.severities.len() > 255 || self.bridges.len() > 256 {
            return bad("class labels must fit in a byte");
        }
        let mut ids: Vec<&str> = self.bridges.iter().map(|b| b.id.as_str()).chain(self.vehicles.iter().map(|v| v.id.as_str())).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return bad("bridge and vehicle ids must be unique");
        }
        for b in &self.bridges {
            b.config.validate()?;
            for v in &self.vehicles {
                v.config.validate(&b.config)?;
            }
        }
        self.options.validate()
    }

    /// Trials in manifest order: bridge, vehicle, cell (undamaged first, then
    /// location-major), trial.
    pub fn trials(&self) -> Vec<TrialSpec> {
        let mut out = Vec::with_capacity(self.n_trials());
        for (bi, b) in self.bridges.iter().enumerate() {
            for v in &self.vehicles {
                let mut cells = vec![DamageState::undamaged()];
                for (li, frac) in self.damage_locations.iter().enumerate() {
                    for (si, q) in self.severities.iter().enumerate() {
                        cells.push(DamageState::new(*q, frac * b.config.length, li as u8 + 1, si as u8 + 1));
                    }
                }
                for damage in cells {
                    for _ in 0..self.trials_per_cell {
                        let trial_id = out.len() as u64;
                        out.push(TrialSpec {
                            trial_id,
                            bridge: bi,
                            vehicle_id: v.id.clone(),
                            damage: damage.clone(),
                            seed: trial_seed(self.seed, trial_id),
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct TrialSpec {
    pub trial_id: u64,
    pub bridge: usize,
    pub vehicle_id: String,
    pub damage: DamageState,
    pub seed: u64,
}

fn trial_seed(grid_seed: u64, trial_id: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(grid_seed);
    rng.set_stream(trial_id);
    rng.next_u64()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub trial_id: u64,
    pub file: String,
    pub bridge_id: String,
    pub vehicle_id: String,
    pub domain_tag: u8,
    pub damage: DamageState,
    pub n_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub channel_names: Vec<String>,
    pub grid: ExperimentGrid,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn n_trials(&self) -> usize {
        self.entries.len()
    }

    pub fn n_channel_records(&self) -> usize {
        self.entries.len() * self.channel_names.len()
    }

    /// Loads one trial's signals from a dataset rooted at `dir`.
    pub fn load(&self, dir: &Path, entry: &ManifestEntry) -> Result<SignalRecord> {
        let path = dir.join(&entry.file);
        let (channels, sample_rate_hz) = record::read_channels(fs::File::open(&path).map_err(|e| {
            Error::MissingData(format!("{}: {e}", path.display()))
        })?)?;
        let channels: [Vec<f64>; 4] = channels
            .try_into()
            .map_err(|_| Error::format("trial record", format!("{} does not hold 4 channels", path.display())))?;
        Ok(SignalRecord {
            channels,
            sample_rate_hz,
            damage: entry.damage.clone(),
            bridge_id: entry.bridge_id.clone(),
            vehicle_id: entry.vehicle_id.clone(),
            trial_id: entry.trial_id,
            domain_tag: entry.domain_tag,
        })
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::MissingData(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// Simulates every trial of `grid` into `out_dir` and writes the manifest last.
pub fn dataset_generate(grid: &ExperimentGrid, out_dir: &Path, force: bool) -> Result<Manifest> {
    grid.validate()?;
    let manifest_path = out_dir.join(MANIFEST_FILE);
    if manifest_path.exists() {
        if !force {
            return Err(Error::AlreadyExists(manifest_path));
        }
        fs::remove_file(&manifest_path)?;
    }
    let trial_dir = out_dir.join(TRIAL_DIR);
    if trial_dir.exists() && force {
        fs::remove_dir_all(&trial_dir)?;
    }
    fs::create_dir_all(&trial_dir)?;

    let specs = grid.trials();
    let entries = specs
        .par_iter()
        .map(|spec| -> Result<ManifestEntry> {
            let bridge = &grid.bridges[spec.bridge];
            let vehicle = &grid.vehicles.iter().find(|v| v.id == spec.vehicle_id).expect("vehicle from grid").config;
            let rec = simulate_passage_with(&bridge.config, vehicle, &spec.damage, grid.sample_rate_hz, spec.seed, &grid.options)?;
            let rel: PathBuf = [TRIAL_DIR, &format!("trial_{:06}.vbi", spec.trial_id)].iter().collect();
            let mut buf = Vec::new();
            record::write_channels(&mut buf, &rec.channels, rec.sample_rate_hz)?;
            fs::write(out_dir.join(&rel), buf)?;
            Ok(ManifestEntry {
                trial_id: spec.trial_id,
                file: rel.to_string_lossy().replace('\\', "/"),
                bridge_id: bridge.id.clone(),
                vehicle_id: spec.vehicle_id.clone(),
                domain_tag: spec.bridge as u8,
                damage: spec.damage.clone(),
                n_samples: rec.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = Manifest {
        format_version: 1,
        channel_names: CHANNEL_NAMES.iter().map(|s| s.to_string()).collect(),
        grid: grid.clone(),
        entries,
    };
    let tmp = out_dir.join(format!("{MANIFEST_FILE}.tmp"));
    fs::write(&tmp, serde_json::to_string_pretty(&manifest)?)?;
    fs::rename(&tmp, &manifest_path)?;
    log::info!("wrote {} trials to {}", manifest.n_trials(), out_dir.display());
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_grid_has_the_expected_size() {
        let g = ExperimentGrid::full(0);
        assert_eq!(g.cells(), 13);
        assert_eq!(g.n_trials(), 2340);
        assert_eq!(g.trials().len(), 2340);
        assert_eq!(g.n_trials() * CHANNEL_NAMES.len(), 9360);
    }

    #[test]
    fn grid_size_arithmetic() {
        let mut g = ExperimentGrid::full(0);
        g.bridges.truncate(1);
        g.vehicles.truncate(1);
        g.damage_locations.clear();
        g.trials_per_cell = 1;
        assert_eq!(g.n_trials(), 1);
        assert!(!g.trials()[0].damage.is_damaged());

        g.damage_locations = vec![0.25, 0.5];
        g.severities.truncate(2);
        g.trials_per_cell = 5;
        assert_eq!(g.n_trials(), 25);
    }

    #[test]
    fn labels_and_seeds_follow_the_grid() {
        let g = ExperimentGrid::reduced(9, 1, 2);
        let t = g.trials();
        assert_eq!(t.len(), 2 * 13 * 2);
        assert!(t.iter().take(2).all(|s| s.damage.location_class == 0));
        let last_b1 = &t[25];
        assert_eq!((last_b1.bridge, last_b1.damage.location_class, last_b1.damage.severity_class), (0, 3, 4));
        assert_eq!(t[26].bridge, 1);
        let mut seeds: Vec<u64> = t.iter().map(|s| s.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), t.len());
    }
}
