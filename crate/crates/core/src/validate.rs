//! Unsupervised hyperparameter selection by reverse validation.
//!
//! Per fold, a forward model is trained on the labeled source and unlabeled
//! target training splits and pseudo-labels the target split. A reverse model
//! is then trained with the pseudo-labeled target as its source and the source
//! split as its unlabeled target, and scored on the held-out source split.
//! Target labels never enter: the target arrives as an [`UnlabeledSet`].

use std::collections::BTreeSet;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledSet, UnlabeledSet};
use crate::error::{Error, Result};
use crate::evalrep::accuracy;
use crate::hiermud::{predict_classes, train, ArchConfig, TaskSpec, TrainConfig};

pub const DEFAULT_FOLDS: usize = 10;

/// Splits `0..n` into `folds` parts after a seeded shuffle; the first
/// `n % folds` parts get one extra index.
pub fn fold_partition(n: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 || folds > n {
        return Err(Error::InvalidConfig(format!("{folds} folds over {n} samples")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / folds, n % folds);
    let mut out = Vec::with_capacity(folds);
    let mut start = 0;
    for k in 0..folds {
        let len = base + usize::from(k < extra);
        out.push(idx[start..start + len].to_vec());
        start += len;
    }
    Ok(out)
}

fn complement(n: usize, fold: &[usize]) -> Vec<usize> {
    let skip: BTreeSet<usize> = fold.iter().copied().collect();
    (0..n).filter(|i| !skip.contains(i)).collect()
}

/// Independent seed for stream `k` of `seed`.
fn derive(seed: u64, k: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k.wrapping_add(1 << 48));
    rng.next_u64()
}

#[derive(Clone, Debug, PartialEq)]
pub enum FoldOutcome {
    Scored(f64),
    /// Forward or reverse training hit the divergence guard; counts as 0.
    Diverged,
    /// The training split misses a class seen in the full source set.
    Skipped(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    pub outcome: FoldOutcome,
    pub seconds: f64,
}

impl FoldResult {
    pub fn score(&self) -> Option<f64> {
        match self.outcome {
            FoldOutcome::Scored(s) => Some(s),
            FoldOutcome::Diverged => Some(0.0),
            FoldOutcome::Skipped(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReverseScore {
    /// Mean over folds that were not skipped.
    pub mean: f64,
    pub folds: Vec<FoldResult>,
}

/// Mean task accuracy of a model trained on `train_set` (adapting to
/// `target`) on `held_out`.
fn trained_accuracy(tasks: &[TaskSpec], train_set: &LabeledSet, target: &UnlabeledSet, cfg: &TrainConfig, held_out: &LabeledSet) -> Result<Option<f64>> {
    let out = match train(tasks, train_set, target, cfg, None) {
        Ok(out) => out,
        Err(Error::Diverged { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let classes = predict_classes(&out.model, &out.store, &held_out.without_labels())?;
    let mean = (0..tasks.len()).map(|m| accuracy(&classes[m], held_out.labels(m))).sum::<f64>() / tasks.len() as f64;
    Ok(Some(mean))
}

fn missing_class(tasks: &[TaskSpec], full: &LabeledSet, part: &LabeledSet) -> Option<String> {
    (0..tasks.len()).find_map(|m| {
        let all: BTreeSet<usize> = full.labels(m).iter().copied().collect();
        let seen: BTreeSet<usize> = part.labels(m).iter().copied().collect();
        let gone: Vec<&usize> = all.difference(&seen).collect();
        (!gone.is_empty()).then(|| format!("task {} classes {gone:?} absent from the training split", tasks[m].name))
    })
}

/// Reverse-validation score of `cfg`, the mean over folds of the reverse
/// model's mean task accuracy on the held-out source split. The reverse
/// model trains for half the forward epochs (at least one).
pub fn reverse_validate(
    tasks: &[TaskSpec],
    source: &LabeledSet,
    target: &UnlabeledSet,
    cfg: &TrainConfig,
    folds: usize,
    seed: u64,
) -> Result<ReverseScore> {
    cfg.validate(tasks)?;
    let source_folds = fold_partition(source.len(), folds, derive(seed, 0))?;
    let target_folds = fold_partition(target.len(), folds, derive(seed, 1))?;
    let mut results = Vec::with_capacity(folds);
    for k in 0..folds {
        let timer = Instant::now();
        let held_out = source.subset(&source_folds[k]);
        let s_train = source.subset(&complement(source.len(), &source_folds[k]));
        let t_train = target.subset(&complement(target.len(), &target_folds[k]));
        let outcome = if let Some(why) = missing_class(tasks, source, &s_train) {
            log::warn!("fold {k} skipped: {why}");
            FoldOutcome::Skipped(why)
        } else {
            let forward_cfg = TrainConfig { seed: derive(seed, 2 + 2 * k as u64), ..cfg.clone() };
            match train(tasks, &s_train, &t_train, &forward_cfg, None) {
                Err(Error::Diverged { .. }) => FoldOutcome::Diverged,
                Err(e) => return Err(e),
                Ok(forward) => {
                    let pseudo = predict_classes(&forward.model, &forward.store, &t_train)?;
                    let reverse_source = t_train.with_labels(pseudo)?;
                    let reverse_cfg = TrainConfig {
                        seed: derive(seed, 3 + 2 * k as u64),
                        epochs: (cfg.epochs / 2).max(1),
                        ..cfg.clone()
                    };
                    match trained_accuracy(tasks, &reverse_source, &s_train.without_labels(), &reverse_cfg, &held_out)? {
                        Some(s) => FoldOutcome::Scored(s),
                        None => FoldOutcome::Diverged,
                    }
                }
            }
        };
        results.push(FoldResult { fold: k, outcome, seconds: timer.elapsed().as_secs_f64() });
    }
    let scores: Vec<f64> = results.iter().filter_map(FoldResult::score).collect();
    if scores.is_empty() {
        return Err(Error::MissingData("every fold was skipped".into()));
    }
    Ok(ReverseScore { mean: scores.iter().sum::<f64>() / scores.len() as f64, folds: results })
}

/// Mean task accuracy on held-out source folds of a model trained on the
/// remaining source data; the supervised reference for reverse scores.
pub fn source_validate(
    tasks: &[TaskSpec],
    source: &LabeledSet,
    target: &UnlabeledSet,
    cfg: &TrainConfig,
    folds: usize,
    seed: u64,
) -> Result<f64> {
    let source_folds = fold_partition(source.len(), folds, derive(seed, 0))?;
    let target_folds = fold_partition(target.len(), folds, derive(seed, 1))?;
    let mut scores = Vec::new();
    for k in 0..folds {
        let s_train = source.subset(&complement(source.len(), &source_folds[k]));
        if missing_class(tasks, source, &s_train).is_some() {
            continue;
        }
        let t_train = target.subset(&complement(target.len(), &target_folds[k]));
        let fold_cfg = TrainConfig { seed: derive(seed, 2 + 2 * k as u64), ..cfg.clone() };
        scores.push(trained_accuracy(tasks, &s_train, &t_train, &fold_cfg, &source.subset(&source_folds[k]))?.unwrap_or(0.0));
    }
    if scores.is_empty() {
        return Err(Error::MissingData("every fold was skipped".into()));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Grid over training hyperparameters; every other setting comes from `base`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSpace {
    pub base: TrainConfig,
    pub learning_rates: Vec<f64>,
    pub lambda_d0: Vec<f64>,
    pub lambda_dm: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub archs: Vec<ArchConfig>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        let base = TrainConfig::default();
        Self {
            learning_rates: vec![base.learning_rate],
            lambda_d0: vec![0.01, 0.1, 1.0],
            lambda_dm: vec![0.01, 0.1, 1.0],
            batch_sizes: vec![base.batch_size],
            archs: vec![base.arch.clone()],
            base,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub id: String,
    pub cfg: TrainConfig,
}

impl SearchSpace {
    /// A space holding only `cfg`.
    pub fn single(cfg: TrainConfig) -> Self {
        Self {
            learning_rates: vec![cfg.learning_rate],
            lambda_d0: vec![cfg.lambda_d0],
            lambda_dm: vec![cfg.lambda_dm],
            batch_sizes: vec![cfg.batch_size],
            archs: vec![cfg.arch.clone()],
            base: cfg,
        }
    }

    /// Grid points in a fixed order: architecture, batch size, μ, λ_D0, λ_Dm.
    pub fn candidates(&self) -> Vec<Candidate> {
        let mut out = Vec::new();
        for arch in &self.archs {
            for &batch_size in &self.batch_sizes {
                for &learning_rate in &self.learning_rates {
                    for &lambda_d0 in &self.lambda_d0 {
                        for &lambda_dm in &self.lambda_dm {
                            let cfg = TrainConfig { arch: arch.clone(), batch_size, learning_rate, lambda_d0, lambda_dm, ..self.base.clone() };
                            out.push(Candidate { id: format!("c{:03}", out.len()), cfg });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct Selection {
    pub best: Candidate,
    pub scores: Vec<(Candidate, ReverseScore)>,
}

/// Candidate with the highest reverse score; ties go to the smallest λ_D0,
/// then the smallest μ, then grid order. Up to `jobs` candidates run at once.
pub fn select(
    space: &SearchSpace,
    tasks: &[TaskSpec],
    source: &LabeledSet,
    target: &UnlabeledSet,
    folds: usize,
    seed: u64,
    jobs: usize,
) -> Result<Selection> {
    let candidates = space.candidates();
    if candidates.is_empty() {
        return Err(Error::InvalidConfig("empty search space".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let scores: Vec<ReverseScore> = pool.install(|| {
        candidates
            .par_iter()
            .map(|c| reverse_validate(tasks, source, target, &c.cfg, folds, seed))
            .collect::<Result<_>>()
    })?;
    let best = (0..candidates.len())
        .min_by(|&a, &b| {
            let (ca, cb) = (&candidates[a].cfg, &candidates[b].cfg);
            scores[b]
                .mean
                .total_cmp(&scores[a].mean)
                .then(ca.lambda_d0.total_cmp(&cb.lambda_d0))
                .then(ca.learning_rate.total_cmp(&cb.learning_rate))
                .then(a.cmp(&b))
        })
        .expect("non-empty");
    Ok(Selection { best: candidates[best].clone(), scores: candidates.into_iter().zip(scores).collect() })
}

/// Columns: cfg_id, fold, reverse_score (empty when skipped), wall_time_s.
pub fn write_sweep_csv<W: Write>(w: W, scores: &[(Candidate, ReverseScore)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["cfg_id", "fold", "reverse_score", "wall_time_s"])?;
    for (c, s) in scores {
        for f in &s.folds {
            let score = f.score().map_or_else(String::new, |v| format!("{v:.6}"));
            out.write_record([c.id.clone(), f.fold.to_string(), score, format!("{:.3}", f.seconds)])?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hiermud::{Baseline, ConvLayer, Difficulty};
    use rand::Rng;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            arch: ArchConfig { input: [1, 6, 6], convs: vec![ConvLayer { filters: 2, kernel: 3 }], pool: 2, hidden: 8 },
            batch_size: 8,
            epochs: 30,
            learning_rate: 0.1,
            eval_every: 0,
            ..TrainConfig::baseline(Baseline::Mud)
        }
    }

    /// Two classes told apart by the sign of the image mean.
    fn blobs(n: usize, seed: u64) -> LabeledSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let x = labels
            .iter()
            .map(|&y| (0..36).map(|_| rng.random_range(-0.5..0.5f32) + if y == 1 { 1.0 } else { -1.0 }).collect())
            .collect();
        LabeledSet::new(x, vec![labels], [1, 6, 6]).unwrap()
    }

    fn one_task() -> Vec<TaskSpec> {
        vec![TaskSpec::new("sign", 2, Difficulty::Easy)]
    }

    #[test]
    fn folds_cover_every_index_once() {
        let f = fold_partition(390, 10, 7).unwrap();
        assert!(f.iter().all(|k| k.len() == 39));
        let mut all: Vec<usize> = f.concat();
        all.sort_unstable();
        assert_eq!(all, (0..390).collect::<Vec<_>>());
        assert_eq!(f, fold_partition(390, 10, 7).unwrap());
        assert_ne!(f, fold_partition(390, 10, 8).unwrap());
        let uneven = fold_partition(23, 5, 1).unwrap();
        assert_eq!(uneven.iter().map(Vec::len).collect::<Vec<_>>(), vec![5, 5, 5, 4, 4]);
        assert!(fold_partition(3, 10, 0).is_err());
    }

    #[test]
    fn self_domain_reverse_score_tracks_source_accuracy() {
        let source = blobs(60, 1);
        let target = blobs(60, 2).without_labels();
        let r = reverse_validate(&one_task(), &source, &target, &tiny_cfg(), 5, 3).unwrap();
        let direct = source_validate(&one_task(), &source, &target, &tiny_cfg(), 5, 3).unwrap();
        assert!(direct > 0.9, "direct {direct}");
        assert!((r.mean - direct).abs() <= 0.05, "reverse {} vs direct {direct}", r.mean);
    }

    /// Four classes with labels unrelated to the pixels.
    fn noise(n: usize, seed: u64) -> LabeledSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = (0..n).map(|_| (0..36).map(|_| rng.random_range(-1.0..1.0f32)).collect()).collect();
        LabeledSet::new(x, vec![(0..n).map(|i| i % 4).collect()], [1, 6, 6]).unwrap()
    }

    #[test]
    fn divergent_candidate_scores_zero_and_loses() {
        let tasks = vec![TaskSpec::new("noise", 4, Difficulty::Easy)];
        let source = noise(40, 1);
        let target = noise(40, 2).without_labels();
        let bad = TrainConfig { learning_rate: 1e3, ..tiny_cfg() };
        let r = reverse_validate(&tasks, &source, &target, &bad, 4, 0).unwrap();
        assert!(r.folds.iter().all(|f| f.outcome == FoldOutcome::Diverged), "{:?}", r.folds);
        assert_eq!(r.mean, 0.0);

        let space = SearchSpace { learning_rates: vec![1e3, 0.1], ..SearchSpace::single(tiny_cfg()) };
        let s = select(&space, &tasks, &source, &target, 4, 0, 1).unwrap();
        assert_eq!(s.best.cfg.learning_rate, 0.1);
        assert!(s.scores[1].1.mean > 0.0);
    }

    #[test]
    fn selection_is_reproducible_and_breaks_ties() {
        let source = blobs(40, 1);
        let target = blobs(40, 2).without_labels();
        let single = select(&SearchSpace::single(tiny_cfg()), &one_task(), &source, &target, 4, 0, 1).unwrap();
        assert_eq!(single.best.cfg, tiny_cfg());

        let space = SearchSpace { lambda_d0: vec![0.1, 0.01], learning_rates: vec![0.1, 0.05], ..SearchSpace::single(tiny_cfg()) };
        let a = select(&space, &one_task(), &source, &target, 4, 0, 2).unwrap();
        let b = select(&space, &one_task(), &source, &target, 4, 0, 1).unwrap();
        assert_eq!(a.best, b.best);
        let means = |s: &Selection| s.scores.iter().map(|x| x.1.mean).collect::<Vec<_>>();
        assert_eq!(means(&a), means(&b));
        let top = means(&a).into_iter().fold(f64::NEG_INFINITY, f64::max);
        let tied: Vec<&Candidate> = a.scores.iter().filter(|x| x.1.mean == top).map(|x| &x.0).collect();
        let min_l = tied.iter().map(|c| c.cfg.lambda_d0).fold(f64::INFINITY, f64::min);
        assert_eq!(a.best.cfg.lambda_d0, min_l);

        let mut buf = Vec::new();
        write_sweep_csv(&mut buf, &a.scores).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 4 * 4);
    }

    #[test]
    fn fold_missing_a_class_is_skipped() {
        // One sample of class 1: the fold holding it out leaves none to train on.
        let base = blobs(12, 1);
        let mut labels = vec![0; 12];
        labels[5] = 1;
        let source = base.without_labels().with_labels(vec![labels]).unwrap();
        let cfg = TrainConfig { epochs: 2, ..tiny_cfg() };
        let r = reverse_validate(&one_task(), &source, &blobs(12, 2).without_labels(), &cfg, 3, 0).unwrap();
        assert_eq!(r.folds.iter().filter(|f| matches!(f.outcome, FoldOutcome::Skipped(_))).count(), 1);
    }
}
