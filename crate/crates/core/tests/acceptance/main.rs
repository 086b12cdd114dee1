//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and exits
//! non-zero when any criterion fails. Criteria can be selected by id:
//! `cargo test --test acceptance -- A7 A8`.

mod analytic;
mod discovery;
mod sweep;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

pub type Outcome = Result<String, String>;

/// Fails with `msg` unless `cond` holds.
pub fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

pub fn within_runtime(start: Instant, limit_s: f64, what: &str) -> Result<f64, String> {
    let t = start.elapsed().as_secs_f64();
    ensure(t < limit_s, format!("{what} took {t:.1}s, limit {limit_s}s"))?;
    Ok(t)
}

type Criterion = (&'static str, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 10] = [
    ("A1", "gradient correctness", analytic::a1_gradients),
    ("A2", "tipping-point bistability", analytic::a2_bistability),
    ("A3", "variant ordering on synthetic LODO", sweep::a3_variant_ordering),
    ("A4", "gate partition recovery", sweep::a4_gate_partition),
    ("A5", "independence ablation", sweep::a5_independence),
    ("A6", "debias identity", analytic::a6_debias),
    ("A7", "DirectLiNGAM recovery", discovery::a7_lingam),
    ("A8", "blanket vs parent conditional variance", discovery::a8_blanket_variance),
    ("A9", "metric unit suite", analytic::a9_metrics),
    ("A10", "blanket baseline coincides with ERM", discovery::a10_baseline_coincidence),
];

fn main() -> ExitCode {
    let selected: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .map(|a| a.to_uppercase())
        .collect();
    let mut failed = 0;
    let mut ran = 0;
    for (id, name, run) in CRITERIA {
        if !selected.is_empty() && !selected.iter().any(|s| s == id) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let t = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("{id} PASS [{t:.1}s] {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("{id} FAIL [{t:.1}s] {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
