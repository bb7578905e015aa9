//! Runs every acceptance criterion and prints one PASS/FAIL line each.
//! Exits non-zero when any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use gibbs_geometry::acceptance::{run_criterion, CRITERIA};

fn main() -> ExitCode {
    let only: Option<usize> = std::env::var("ACCEPTANCE_CRITERION").ok().and_then(|v| v.parse().ok());
    let mut failed = Vec::new();
    for (id, _) in CRITERIA {
        if only.is_some_and(|o| o != id) {
            continue;
        }
        let start = Instant::now();
        let outcome = run_criterion(id).expect("known criterion");
        println!("{outcome}");
        println!("    ({:.1} s)", start.elapsed().as_secs_f64());
        if !outcome.passed {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {failed:?}");
        ExitCode::FAILURE
    }
}
