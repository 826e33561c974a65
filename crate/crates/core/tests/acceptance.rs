//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Environment:
//! - `VBI_ACCEPTANCE_SCALE` multiplies every training epoch count (default 1).
//! - `VBI_ACCEPTANCE_SKIP_TRANSFER=1` leaves out the transfer benchmark.
//! - `VBI_ACCEPTANCE_DIR` holds generated data (default under cargo's target tmpdir).
//! - `VBI_ACCEPTANCE_STRICT=1` exits nonzero when any criterion fails.

use std::path::PathBuf;
use std::process::ExitCode;

use vbi_transfer::check::{run_suite, SuiteOptions};

fn env_flag(name: &str) -> bool {
    std::env::var(name).is_ok_and(|v| v == "1" || v.eq_ignore_ascii_case("true"))
}

fn main() -> ExitCode {
    let _ = env_logger::builder().is_test(true).try_init();
    let epoch_scale = std::env::var("VBI_ACCEPTANCE_SCALE").ok().and_then(|v| v.parse().ok()).unwrap_or(1.0);
    let work_dir = std::env::var_os("VBI_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance"));
    let opts = SuiteOptions { work_dir, epoch_scale, transfer: !env_flag("VBI_ACCEPTANCE_SKIP_TRANSFER") };
    println!("acceptance: epoch scale {epoch_scale}, work dir {}", opts.work_dir.display());
    let results = run_suite(&opts, |r| println!("{}", r.line()));
    let failed: Vec<u8> = results.iter().filter(|r| !r.passed).map(|r| r.criterion).collect();
    println!("acceptance: {} passed, {} failed {failed:?}", results.len() - failed.len(), failed.len());
    if !failed.is_empty() && env_flag("VBI_ACCEPTANCE_STRICT") {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
