//! Self-check suite: the invariants and oracles the library is held to,
//! runnable from the command line and from the acceptance test target.

mod oracles;
mod training;

use std::path::PathBuf;
use std::time::Instant;

pub use oracles::{
    adaptive_weight_check, divergence_proxy_check, error_propagation_check, gradient_check, grl_check, physics_check,
};
pub use training::{
    determinism_check, reverse_validation_check, self_domain_check, transfer_benchmark, TransferConfig, TransferSummary,
};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub criterion: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CheckResult {
    pub fn line(&self) -> String {
        format!(
            "{} [{}] {}: {} ({:.1} s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.criterion,
            self.name,
            self.detail,
            self.seconds
        )
    }
}

/// Runs `f` and stamps the result with its wall time.
pub(crate) fn timed(criterion: u8, name: &'static str, f: impl FnOnce() -> crate::Result<(bool, String)>) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckResult { criterion, name, passed, detail, seconds: start.elapsed().as_secs_f64() }
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    /// Scratch directory for generated datasets and checkpoints.
    pub work_dir: PathBuf,
    /// Multiplies every training epoch count in the suite.
    pub epoch_scale: f64,
    /// Include the multi-run transfer benchmark.
    pub transfer: bool,
}

impl SuiteOptions {
    pub fn epochs(&self, base: usize) -> usize {
        ((base as f64 * self.epoch_scale).round() as usize).max(1)
    }
}

/// Runs every check in criterion order, calling `report` as each finishes.
pub fn run_suite(opts: &SuiteOptions, mut report: impl FnMut(&CheckResult)) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let mut push = |r: CheckResult| {
        report(&r);
        out.push(r);
    };
    push(gradient_check());
    push(grl_check());
    push(adaptive_weight_check());
    push(physics_check());
    push(error_propagation_check());
    push(self_domain_check(opts));
    if opts.transfer {
        push(transfer_benchmark(opts, &TransferConfig::default()).0);
    }
    push(divergence_proxy_check());
    push(determinism_check(opts));
    push(reverse_validation_check(opts));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_oracles_pass() {
        for r in [gradient_check(), grl_check(), adaptive_weight_check(), divergence_proxy_check()] {
            assert!(r.passed, "{}", r.line());
        }
    }

    #[test]
    fn error_propagation_reports_the_computed_example() {
        let r = error_propagation_check();
        assert!(r.detail.contains("midspan 0.100000 (= sigma_d: true)"), "{}", r.detail);
        assert!(r.detail.contains("worked example 0.254311"), "{}", r.detail);
        assert!(r.line().starts_with(if r.passed { "PASS [5]" } else { "FAIL [5]" }));
    }

    #[test]
    fn template_labels_follow_the_damage_encoding() {
        let set = training::template_set(200, 1);
        let (loc, sev) = (set.labels(0), set.labels(1));
        assert!(loc.iter().zip(sev).all(|(&l, &s)| (l == 0) == (s == 0) && l < 4 && s < 5));
        assert_eq!(set.shape(), [1, 8, 8]);
    }

    #[test]
    fn epoch_scale_never_reaches_zero() {
        let opts = SuiteOptions { work_dir: PathBuf::new(), epoch_scale: 0.001, transfer: false };
        assert_eq!(opts.epochs(600), 1);
        assert_eq!(SuiteOptions { epoch_scale: 0.5, ..opts }.epochs(600), 300);
    }
}
