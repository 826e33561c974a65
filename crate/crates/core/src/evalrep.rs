//! Metrics and result tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{LabeledSet, LOCATION, SEVERITY};
use crate::error::Result;
use crate::hiermud::Prediction;

/// z-value of a two-sided 95% normal interval.
pub const Z95: f64 = 1.96;

/// Fraction of positions where prediction and label agree; 0 for empty input.
pub fn accuracy<T: PartialEq>(predictions: &[T], labels: &[T]) -> f64 {
    assert_eq!(predictions.len(), labels.len(), "predictions and labels differ in length");
    if labels.is_empty() {
        return 0.0;
    }
    predictions.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

/// F1 on the positive class; 0 when precision and recall are both undefined.
pub fn f1_binary(predictions: &[bool], labels: &[bool]) -> f64 {
    assert_eq!(predictions.len(), labels.len(), "predictions and labels differ in length");
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
}

/// Target metrics of the bridge health monitoring tasks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BhmScores {
    pub detection_f1: f64,
    pub localization: f64,
    pub quantification: f64,
}

impl BhmScores {
    pub const TASKS: [&'static str; 3] = ["detection", "localization", "quantification"];

    /// Scores predictions against `[location, severity]` labels.
    pub fn score(predictions: &[Prediction], labels: &LabeledSet) -> Self {
        let (loc, sev) = (labels.labels(LOCATION), labels.labels(SEVERITY));
        let detected: Vec<bool> = predictions.iter().map(|p| p.detected).collect();
        let damaged: Vec<bool> = loc.iter().map(|&l| l > 0).collect();
        let pl: Vec<usize> = predictions.iter().map(|p| p.location).collect();
        let ps: Vec<usize> = predictions.iter().map(|p| p.severity).collect();
        Self { detection_f1: f1_binary(&detected, &damaged), localization: accuracy(&pl, loc), quantification: accuracy(&ps, sev) }
    }

    pub fn values(&self) -> [f64; 3] {
        [self.detection_f1, self.localization, self.quantification]
    }
}

/// One metric from one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetric {
    pub task: String,
    pub method: String,
    pub source: String,
    pub target: String,
    pub vehicle: String,
    pub seed: u64,
    pub value: f64,
}

impl RunMetric {
    pub fn column(&self) -> String {
        format!("{} {}->{}", self.vehicle, self.source, self.target)
    }
}

/// Mean and 95% half-width over seeds for one (task, method, column).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub task: String,
    pub method: String,
    /// `"{vehicle} {source}->{target}"`, or `"overall"`.
    pub column: String,
    pub mean: f64,
    pub half_width: f64,
    pub runs: usize,
    pub best: bool,
}

/// `(mean, 1.96·s/√n)` with the sample standard deviation; half-width 0 for one value.
pub fn mean_ci(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, 0.0);
    }
    // Identical values are exact; summing them can drift by an ulp.
    if values.iter().all(|&v| v == values[0]) {
        return (values[0], 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Z95 * (var / n).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub rows: Vec<MetricsRow>,
    pub text: String,
    pub csv: String,
}

/// Groups runs by task then method, one column per (vehicle, direction)
/// plus an overall column. The overall value of a seed is its mean over the
/// columns it has; its interval is taken over those per-seed means. The best
/// mean in each (task, column) is flagged.
pub fn report_table(runs: &[RunMetric]) -> Result<Report> {
    let columns: BTreeSet<String> = runs.iter().map(RunMetric::column).collect();
    let mut groups: BTreeMap<(String, String), BTreeMap<String, Vec<(u64, f64)>>> = BTreeMap::new();
    for r in runs {
        groups
            .entry((r.task.clone(), r.method.clone()))
            .or_default()
            .entry(r.column())
            .or_default()
            .push((r.seed, r.value));
    }
    let mut rows = Vec::new();
    for ((task, method), cols) in &groups {
        let mut per_seed: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for (col, vals) in cols {
            let values: Vec<f64> = vals.iter().map(|v| v.1).collect();
            let (mean, half_width) = mean_ci(&values);
            rows.push(MetricsRow { task: task.clone(), method: method.clone(), column: col.clone(), mean, half_width, runs: values.len(), best: false });
            for &(seed, v) in vals {
                per_seed.entry(seed).or_default().push(v);
            }
        }
        let seed_means: Vec<f64> = per_seed.values().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
        let (mean, half_width) = mean_ci(&seed_means);
        let n: usize = cols.values().map(Vec::len).sum();
        rows.push(MetricsRow { task: task.clone(), method: method.clone(), column: "overall".into(), mean, half_width, runs: n, best: false });
    }
    let mut best: BTreeMap<(String, String), f64> = BTreeMap::new();
    for r in &rows {
        let b = best.entry((r.task.clone(), r.column.clone())).or_insert(f64::NEG_INFINITY);
        *b = b.max(r.mean);
    }
    for r in &mut rows {
        r.best = best[&(r.task.clone(), r.column.clone())] == r.mean;
    }

    let mut all_columns: Vec<String> = columns.into_iter().collect();
    all_columns.push("overall".into());
    let cell = |r: Option<&MetricsRow>| match r {
        Some(r) => format!("{:.3} ({:.3}){}", r.mean, r.half_width, if r.best { "*" } else { "" }),
        None => "-".into(),
    };
    let mut table: Vec<Vec<String>> = vec![["task", "method"].iter().map(|s| s.to_string()).chain(all_columns.iter().cloned()).collect()];
    for (task, method) in groups.keys() {
        let mut line = vec![task.clone(), method.clone()];
        for c in &all_columns {
            line.push(cell(rows.iter().find(|r| &r.task == task && &r.method == method && &r.column == c)));
        }
        table.push(line);
    }
    let widths: Vec<usize> = (0..table[0].len()).map(|j| table.iter().map(|l| l[j].chars().count()).max().unwrap_or(0)).collect();
    let mut text = String::new();
    for line in &table {
        let cells: Vec<String> = line.iter().zip(&widths).map(|(c, &w)| format!("{c:<w$}")).collect();
        writeln!(text, "{}", cells.join("  ").trim_end()).expect("writing to a string");
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r)?;
    }
    let csv = String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv writer emits utf-8");
    Ok(Report { rows, text, csv })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn run(method: &str, seed: u64, value: f64) -> RunMetric {
        RunMetric {
            task: "localization".into(),
            method: method.into(),
            source: "B1".into(),
            target: "B2".into(),
            vehicle: "V1".into(),
            seed,
            value,
        }
    }

    #[test]
    fn f1_cases() {
        assert_eq!(f1_binary(&[true, false, true], &[true, false, true]), 1.0);
        assert_eq!(f1_binary(&[false; 4], &[true, false, true, false]), 0.0);
        assert_eq!(f1_binary(&[false; 3], &[false; 3]), 0.0);
        // TP=8, FP=2, FN=4: precision 0.8, recall 2/3.
        let mut p = vec![true; 10];
        let mut l = vec![true; 8];
        l.extend([false, false]);
        p.extend([false; 4]);
        l.extend([true; 4]);
        let (pr, rc) = (0.8, 2.0 / 3.0);
        assert!((f1_binary(&p, &l) - 2.0 * pr * rc / (pr + rc)).abs() < 1e-12);
        assert!((f1_binary(&p, &l) - 0.7273).abs() < 1e-4);
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]), 0.0);
        assert_eq!(accuracy(&[1, 2, 3, 4, 5], &[1, 2, 3, 0, 0]), 0.6);
    }

    #[test]
    fn single_run_and_identical_seeds_have_zero_width() {
        let r = report_table(&[run("HierMUD", 0, 0.8)]).unwrap();
        assert!(r.rows.iter().all(|row| row.half_width == 0.0));
        let same: Vec<_> = (0..10).map(|s| run("HierMUD", s, 0.7)).collect();
        let r = report_table(&same).unwrap();
        assert!(r.rows.iter().all(|row| row.half_width == 0.0 && (row.mean - 0.7).abs() < 1e-12));
    }

    #[test]
    fn interval_matches_closed_form() {
        let values = [0.61, 0.72, 0.55, 0.80, 0.67, 0.70, 0.59, 0.75, 0.64, 0.69];
        let runs: Vec<_> = values.iter().enumerate().map(|(s, &v)| run("MUD", s as u64, v)).collect();
        let r = report_table(&runs).unwrap();
        let mean = values.iter().sum::<f64>() / 10.0;
        let s = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 9.0).sqrt();
        for row in &r.rows {
            assert!((row.half_width - 1.96 * s / 10f64.sqrt()).abs() < 1e-6);
        }
    }

    #[test]
    fn best_method_is_flagged_per_column() {
        let runs = [run("MCNN", 0, 0.4), run("HierMUD", 0, 0.9)];
        let r = report_table(&runs).unwrap();
        for row in &r.rows {
            assert_eq!(row.best, row.method == "HierMUD");
        }
        assert!(r.text.contains("0.900 (0.000)*"));
        assert!(r.csv.starts_with("task,method,column,mean,half_width,runs,best"));
    }

    #[test]
    fn overall_averages_columns_per_seed() {
        let mut b = run("MUD", 0, 0.2);
        b.target = "B1".into();
        b.source = "B2".into();
        let r = report_table(&[run("MUD", 0, 0.6), b]).unwrap();
        let overall = r.rows.iter().find(|x| x.column == "overall").unwrap();
        assert!((overall.mean - 0.4).abs() < 1e-12);
        assert_eq!(overall.runs, 2);
    }

    proptest! {
        #[test]
        fn metrics_ignore_sample_order(pairs in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..50), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = pairs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let split = |v: &[(bool, bool)]| v.iter().copied().unzip::<bool, bool, Vec<_>, Vec<_>>();
            let (p, l) = split(&pairs);
            let (ps, ls) = split(&shuffled);
            prop_assert_eq!(f1_binary(&p, &l), f1_binary(&ps, &ls));
            prop_assert_eq!(accuracy(&p, &l), accuracy(&ps, &ls));
        }

        #[test]
        fn report_is_deterministic(values in proptest::collection::vec(0.0f64..1.0, 1..12)) {
            let runs: Vec<_> = values.iter().enumerate().map(|(s, &v)| run("iUD", s as u64, v)).collect();
            let a = report_table(&runs).unwrap();
            let b = report_table(&runs).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
