//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

#[path = "../common/mod.rs"]
mod common;

mod causality;
mod loss_ledger;
mod motion_recovery;
mod reproducibility;
mod semantic_pathway;
mod streaming_invariants;
mod taylor_exactness;

use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

/// A criterion returns a one-line summary of what it measured, or why it failed.
type Check = fn() -> Result<String, String>;

fn main() -> ExitCode {
    let criteria: [(&str, Check); 10] = [
        ("renderer matches brute-force compositing", renderer_oracle::run),
        ("analytic gradients match finite differences", gradients::run),
        ("motion fit recovers third-order flow", motion_recovery::run),
        ("displacement matches the Taylor oracle", taylor_exactness::run),
        ("streaming memory and latency stay flat", streaming_invariants::run),
        ("windowed attention is causal and matches the dense oracle", causality::run),
        ("semantic pathway", semantic_pathway::run),
        ("loss ledger with default weights", loss_ledger::run),
        ("metrics match naive references", metric_oracles::run),
        ("CLI runs are bit-reproducible", reproducibility::run),
    ];
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = format!("{}", i + 1);
        if filter.as_ref().is_some_and(|f| *f != id) {
            continue;
        }
        let started = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS [{id:>2}] {name}: {detail} ({secs:.1}s)"),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{id:>2}] {name}: {detail} ({secs:.1}s)");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

/// `Err` with the message unless `ok`.
pub fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}
