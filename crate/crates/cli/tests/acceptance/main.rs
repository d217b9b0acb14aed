//! Acceptance harness: one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_CRITERIA=1,2,5` restricts the run to the listed criteria.
//! The process fails only when a property criterion (1-5) fails; the
//! quantitative criteria (6-10) are reported without affecting the exit code.

mod props;
mod quant;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: String) -> Self {
        Self { pass, detail }
    }
}

fn selected() -> Vec<usize> {
    match std::env::var("ACCEPTANCE_CRITERIA") {
        Ok(s) if !s.trim().is_empty() => s
            .split(',')
            .filter_map(|x| x.trim().parse().ok())
            .collect(),
        _ => (1..=10).collect(),
    }
}

fn main() -> ExitCode {
    // `cargo test` passes harness flags such as `--list`; the suite only runs.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut runs = quant::Runs::default();
    let names = [
        "gradient suite",
        "rim structural invariants",
        "two-timescale partition",
        "oracle equivalence",
        "environment",
        "trainability",
        "sample-efficiency direction",
        "deactivation ablation",
        "zero-shot direction",
        "slowLR direction",
    ];
    let mut property_failed = false;
    let mut lines = Vec::new();
    for id in selected() {
        if !(1..=10).contains(&id) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| match id {
            1 => props::gradients(),
            2 => props::structure(),
            3 => props::partitions(),
            4 => props::oracles(),
            5 => props::environment(),
            6 => quant::trainability(&mut runs),
            7 => quant::sample_efficiency(&mut runs),
            8 => quant::deactivation(&mut runs),
            9 => quant::zero_shot(&mut runs),
            _ => quant::slow_lr(&mut runs),
        }));
        let out = result.unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::new(false, format!("panicked: {msg}"))
        });
        if id <= 5 && !out.pass {
            property_failed = true;
        }
        let line = format!(
            "criterion {id:>2} {:<28} {} ({:.1}s) {}",
            names[id - 1],
            if out.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            out.detail
        );
        println!("{line}");
        lines.push(line);
    }
    println!("\nsummary");
    for l in &lines {
        println!("{l}");
    }
    if property_failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
