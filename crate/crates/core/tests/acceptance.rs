//! Acceptance run: every end-to-end criterion at full size, one line each.
//!
//! Set `MBCBF_ACCEPTANCE_SCALE=quick` for a reduced smoke run.

use std::process::ExitCode;

use mbcbf_core::verify::{run_all, VerifyScale};

fn main() -> ExitCode {
    let quick = std::env::var("MBCBF_ACCEPTANCE_SCALE").is_ok_and(|s| s == "quick");
    let scale = if quick { VerifyScale::quick() } else { VerifyScale::full() };
    println!("acceptance ({} scale)", if quick { "quick" } else { "full" });
    let results = run_all(&scale, None, |r| println!("{}", r.line()));
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
