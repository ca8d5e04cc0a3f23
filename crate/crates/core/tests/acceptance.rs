//! The thirteen acceptance criteria at their stated tolerances, one line per
//! criterion. Exits non-zero if any fails.

use neurogrow::verify::{registry, run_invariant_suite, Fault};

fn main() {
    let seed = std::env::var("ACCEPTANCE_SEED").ok().and_then(|s| s.parse().ok()).unwrap_or(0);
    let report = run_invariant_suite(seed, None, Fault::None);
    let mut failed = 0;
    for criterion in 1..=13u8 {
        let names: Vec<&str> = registry().iter().filter(|c| c.criterion == Some(criterion)).map(|c| c.name).collect();
        assert!(!names.is_empty(), "criterion {criterion} has no check");
        for name in names {
            let r = report.get(name).expect("suite ran every check");
            let status = if r.passed { "PASS" } else { "FAIL" };
            failed += usize::from(!r.passed);
            println!("{status} criterion {criterion:>2} {name}: measured {:.3e}, tolerance {:.3e} ({})", r.measured, r.tolerance, r.notes);
        }
    }
    println!("acceptance seed {seed}: {} of 13 criteria failed", failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
