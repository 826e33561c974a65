use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{timed, CheckResult, SuiteOptions};
use crate::data::{DomainData, LabeledSet, UnlabeledSet};
use crate::error::Result;
use crate::evalrep::{report_table, BhmScores, RunMetric};
use crate::hiermud::{
    domain_accuracy, predict_target, save_model, shared_features, train, ArchConfig, Baseline, ConvLayer, Difficulty,
    TaskSpec, TrainConfig,
};
use crate::preprocess::StftConfig;
use crate::sim::{dataset_generate, read_manifest, ExperimentGrid, Manifest, MANIFEST_FILE};
use crate::validate::{reverse_validate, source_validate, DEFAULT_FOLDS};

const DATA_SEED: u64 = 1;
const VEHICLE: usize = 1;
const TRIALS_PER_CELL: usize = 10;
const AUGMENTATIONS: usize = 2;

/// Reduced two-bridge grid, generated under `work_dir` unless an identical
/// one is already there.
pub fn reduced_dataset(work_dir: &Path) -> Result<(Manifest, PathBuf)> {
    let grid = ExperimentGrid::reduced(DATA_SEED, VEHICLE, TRIALS_PER_CELL);
    let dir = work_dir.join("reduced");
    if dir.join(MANIFEST_FILE).exists() {
        if let Ok(m) = read_manifest(&dir) {
            if m.grid == grid {
                return Ok((m, dir));
            }
        }
    }
    fs::create_dir_all(&dir)?;
    Ok((dataset_generate(&grid, &dir, true)?, dir))
}

/// Training settings shared by the self-domain and transfer checks.
fn compact_config(b: Baseline, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        arch: ArchConfig::compact(),
        learning_rate: 0.05,
        batch_size: 32,
        epochs,
        seed,
        eval_every: 0,
        ..TrainConfig::baseline(b)
    }
}

/// Every `stride`-th sample, i.e. the originals of an augmented set.
fn originals(set: &LabeledSet, stride: usize) -> LabeledSet {
    set.subset(&(0..set.len()).step_by(stride).collect::<Vec<_>>())
}

pub fn self_domain_check(opts: &SuiteOptions) -> CheckResult {
    timed(6, "self-domain sanity", || {
        let (manifest, dir) = reduced_dataset(&opts.work_dir)?;
        let b1 = DomainData::load(&manifest, &dir, "B1", None, AUGMENTATIONS, DATA_SEED, &StftConfig::default())?;
        // Whole trials go to one of four roles so augmented copies never straddle a split.
        let part = |r: u64| b1.set.subset(&b1.where_trial(|t| t % 4 == r));
        let (source, target) = (part(0), part(1).without_labels());
        let (held_source, held_target) = (part(2).without_labels(), part(3).without_labels());
        let mut accs = Vec::new();
        for seed in 0..3 {
            let cfg = compact_config(Baseline::HierMud, opts.epochs(200), seed);
            let out = train(&TaskSpec::bhm(), &source, &target, &cfg, None)?;
            let fs = shared_features(&out.model, &out.store, 0, &held_source)?;
            let ft = shared_features(&out.model, &out.store, 0, &held_target)?;
            accs.push(domain_accuracy(&out.model, &out.store, 0, &fs, &ft)?);
        }
        let passed = accs.iter().all(|a| (0.45..=0.55).contains(a));
        Ok((passed, format!("held-out shared domain accuracy per seed {accs:.3?}, required in [0.45, 0.55]")))
    })
}

#[derive(Clone, Debug)]
pub struct TransferConfig {
    pub methods: Vec<Baseline>,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    /// Wall-time limit of the whole benchmark, seconds.
    pub budget_s: f64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self { methods: vec![Baseline::Mcnn, Baseline::Mud, Baseline::HierMud], seeds: vec![0, 1, 2], epochs: 600, budget_s: 45.0 * 60.0 }
    }
}

#[derive(Clone, Debug)]
pub struct TransferSummary {
    pub runs: Vec<RunMetric>,
    /// Rendered result table.
    pub table: String,
}

fn mean_of(runs: &[RunMetric], task: &str, method: Baseline) -> f64 {
    let v: Vec<f64> = runs.iter().filter(|r| r.task == task && r.method == method.name()).map(|r| r.value).collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Head-to-head transfer between the two reduced-grid bridges.
pub fn transfer_benchmark(opts: &SuiteOptions, tc: &TransferConfig) -> (CheckResult, TransferSummary) {
    let mut summary = TransferSummary { runs: Vec::new(), table: String::new() };
    let result = timed(7, "transfer benchmark", || {
        let start = Instant::now();
        let (manifest, dir) = reduced_dataset(&opts.work_dir)?;
        let load = |id: &str| DomainData::load(&manifest, &dir, id, None, AUGMENTATIONS, DATA_SEED, &StftConfig::default());
        let bridges = [("B1", load("B1")?), ("B2", load("B2")?)];
        let vehicle = manifest.grid.vehicles[0].id.clone();
        let tasks = TaskSpec::bhm();
        for (s, t) in [(0, 1), (1, 0)] {
            let source = &bridges[s].1.set;
            let target = bridges[t].1.set.without_labels();
            let eval = originals(&bridges[t].1.set, AUGMENTATIONS + 1);
            for &method in &tc.methods {
                for &seed in &tc.seeds {
                    let timer = Instant::now();
                    let cfg = compact_config(method, opts.epochs(tc.epochs), seed);
                    let out = train(&tasks, source, &target, &cfg, None)?;
                    let scores = BhmScores::score(&predict_target(&out.model, &out.store, &eval.without_labels())?, &eval);
                    log::info!(
                        "{} {}->{} seed {seed}: {:?} in {:.0} s",
                        method.name(),
                        bridges[s].0,
                        bridges[t].0,
                        scores,
                        timer.elapsed().as_secs_f64()
                    );
                    for (task, value) in BhmScores::TASKS.iter().zip(scores.values()) {
                        summary.runs.push(RunMetric {
                            task: task.to_string(),
                            method: method.name().into(),
                            source: bridges[s].0.into(),
                            target: bridges[t].0.into(),
                            vehicle: vehicle.clone(),
                            seed,
                            value,
                        });
                    }
                }
            }
        }
        let seconds = start.elapsed().as_secs_f64();
        summary.table = report_table(&summary.runs)?.text;
        let runs = &summary.runs;
        let hier_loc = mean_of(runs, "localization", Baseline::HierMud);
        let loc_gap = hier_loc - mean_of(runs, "localization", Baseline::Mcnn);
        let sev_gap = mean_of(runs, "quantification", Baseline::HierMud) - mean_of(runs, "quantification", Baseline::Mud);
        let f1 = mean_of(runs, "detection", Baseline::HierMud);
        let checks = [loc_gap >= 0.10, sev_gap >= 0.10, hier_loc >= 0.75, f1 >= 0.85, seconds <= tc.budget_s];
        Ok((
            checks.iter().all(|&c| c),
            format!(
                "HierMUD-MCNN localization {loc_gap:+.3} (>= 0.10: {}); HierMUD-MUD quantification {sev_gap:+.3} (>= 0.10: {}); \
                 HierMUD localization {hier_loc:.3} (>= 0.75: {}); HierMUD detection F1 {f1:.3} (>= 0.85: {}); \
                 {seconds:.0} s (<= {:.0} s: {})",
                checks[0], checks[1], checks[2], checks[3], tc.budget_s, checks[4]
            ),
        ))
    });
    (result, summary)
}

fn dir_bytes(dir: &Path) -> Result<Vec<(PathBuf, Vec<u8>)>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).expect("below root").to_path_buf(), fs::read(&path)?));
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn determinism_check(opts: &SuiteOptions) -> CheckResult {
    timed(9, "determinism", || {
        let root = opts.work_dir.join("determinism");
        let mut grid = ExperimentGrid::reduced(7, 0, 1);
        grid.bridges.truncate(1);
        let (a, b) = (root.join("data_a"), root.join("data_b"));
        for d in [&a, &b] {
            fs::create_dir_all(d)?;
            dataset_generate(&grid, d, true)?;
        }
        let (da, db) = (dir_bytes(&a)?, dir_bytes(&b)?);
        let data_same = !da.is_empty() && da == db;

        let manifest = read_manifest(&a)?;
        let data = DomainData::load(&manifest, &a, "B1", None, 1, 7, &StftConfig::default())?;
        let cfg = TrainConfig { batch_size: 8, ..compact_config(Baseline::HierMud, 10, 3) };
        let mut ckpts = Vec::new();
        for run in ["model_a", "model_b"] {
            let out = train(&TaskSpec::bhm(), &data.set, &data.set.without_labels(), &cfg, None)?;
            let d = root.join(run);
            save_model(&d, &out.model, &out.store)?;
            ckpts.push(dir_bytes(&d)?);
        }
        let model_same = !ckpts[0].is_empty() && ckpts[0] == ckpts[1];
        Ok((
            data_same && model_same,
            format!("gen-data repeat identical over {} files: {data_same}; train repeat identical checkpoints: {model_same}", da.len()),
        ))
    })
}

/// Images whose bright column band encodes a location class and whose
/// brightness encodes a severity class, with class 0 of both meaning intact.
pub fn template_set(n: usize, seed: u64) -> LabeledSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut x, mut loc, mut sev) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n {
        let cell = rng.random_range(0..13);
        let (l, s) = if cell == 0 { (0, 0) } else { (1 + (cell - 1) / 4, 1 + (cell - 1) % 4) };
        let img: Vec<f32> = (0..64)
            .map(|p| {
                let col = p % 8;
                let band = l > 0 && col / 2 == l;
                rng.random_range(-0.3..0.3f32) + if band { 0.6 * s as f32 } else { 0.0 }
            })
            .collect();
        x.push(img);
        loc.push(l);
        sev.push(s);
    }
    LabeledSet::new(x, vec![loc, sev], [1, 8, 8]).expect("consistent sizes")
}

pub fn template_config(seed: u64) -> TrainConfig {
    TrainConfig {
        arch: ArchConfig { input: [1, 8, 8], convs: vec![ConvLayer { filters: 4, kernel: 3 }], pool: 2, hidden: 16 },
        learning_rate: 0.03,
        batch_size: 16,
        epochs: 1200,
        seed,
        eval_every: 0,
        ..TrainConfig::baseline(Baseline::HierMud)
    }
}

pub fn reverse_validation_check(opts: &SuiteOptions) -> CheckResult {
    timed(10, "reverse validation", || {
        let tasks = vec![TaskSpec::new("location", 4, Difficulty::Easy), TaskSpec::new("severity", 5, Difficulty::Hard)];
        let cfg = TrainConfig { epochs: opts.epochs(1200), ..template_config(0) };
        let source = template_set(520, 10);
        let target = template_set(520, 11);

        // Target labels cannot reach reverse_validate; scrambling them changes nothing.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let scrambled: Vec<Vec<usize>> =
            (0..2).map(|m| (0..target.len()).map(|_| rng.random_range(0..tasks[m].n_classes)).collect()).collect();
        let relabeled = target.without_labels().with_labels(scrambled)?;
        let small = TrainConfig { epochs: 20, ..cfg.clone() };
        let a = reverse_validate(&tasks, &source, &target.without_labels(), &small, 3, 5)?;
        let b = reverse_validate(&tasks, &source, &relabeled.without_labels(), &small, 3, 5)?;
        let fold_scores = |r: &crate::validate::ReverseScore| r.folds.iter().map(|f| f.score()).collect::<Vec<_>>();
        let blind = a.mean == b.mean && fold_scores(&a) == fold_scores(&b);

        let target: UnlabeledSet = target.without_labels();
        let reverse = reverse_validate(&tasks, &source, &target, &cfg, DEFAULT_FOLDS, 5)?.mean;
        let direct = source_validate(&tasks, &source, &target, &cfg, DEFAULT_FOLDS, 5)?;
        let close = (reverse - direct).abs() <= 0.05;
        Ok((
            blind && close,
            format!("scrambled target labels leave the score unchanged: {blind}; self-domain reverse {reverse:.3} vs direct {direct:.3} (within 0.05: {close})"),
        ))
    })
}
