//! Invariant suite: every check draws fresh seeded instances, compares a
//! measured number with a tolerance from [`tol`], and reports both.

mod algebra;
mod dynamics;
pub mod oracles;
mod runs;

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use dynamics::discriminating_network;
pub use oracles::{fd_goals, oracle_least_squares, oracle_neuron_objective, oracle_rank_k, row_space_basis};
pub use runs::{desk_config, greedy_regression_run, greedy_step_config, GreedyTrace};

/// Every tolerance used by the suite.
pub mod tol {
    pub const PENROSE_REL: f64 = 1e-8;
    pub const PROJECTOR: f64 = 1e-8;
    pub const SVD_REPEAT: f64 = 0.0;
    pub const GENEIG_VALUE_REL: f64 = 1e-8;
    pub const GENEIG_COLLINEAR: f64 = 1e-8;
    pub const GENEIG_CONTRIBUTION_REL: f64 = 1e-7;
    pub const FD_REL: f64 = 1e-5;
    pub const FD_QUADRATIC_REL: f64 = 1e-9;
    pub const CACHE_REPEAT: f64 = 0.0;
    pub const UNFOLD: f64 = 1e-10;
    pub const ZERO_NEURON: f64 = 0.0;
    pub const LSQ_ORACLE_REL: f64 = 1e-9;
    /// Perturbed candidates may tie the optimum up to rounding.
    pub const LSQ_PERTURB_SLACK: f64 = 1e-12;
    pub const NORMAL_EQUATIONS: f64 = 1e-8;
    pub const FC_EXACT_REL: f64 = 1e-8;
    pub const FC_SECONDS: f64 = 10.0;
    pub const ORTHOGONALITY: f64 = 1e-8;
    pub const SCALAR_PRODUCT: f64 = 1e-8;
    pub const LOCAL_INVERTIBILITY: f64 = 1e-8;
    pub const TRACE_INEQUALITY: f64 = 1e-10;
    pub const EQUI_NORM: f64 = 1e-8;
    pub const CONV_BOUND: f64 = 1e-8;
    pub const SLOPE_REL: f64 = 0.02;
    pub const SEQUENTIAL_RATIO: f64 = 3.5;
    pub const AMPLITUDE_SLACK: f64 = 0.0;
    pub const GREEDY_MSE: f64 = 1e-4;
    pub const GREEDY_MAX_ADDITIONS: usize = 20;
    pub const GREEDY_SECONDS: f64 = 30.0;
    pub const OVERFIT_LOSS: f64 = 1e-10;
    pub const DISCRIMINATING_TINY: f64 = 1e-10;
    pub const DISCRIMINATING_GRADMAX: f64 = 0.1;
    pub const RANDOM_STD_REL: f64 = 0.1;
    pub const DESK_ACCURACY: f64 = 0.95;
    pub const DESK_SECONDS: f64 = 60.0;
}

/// Which side of the tolerance passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bound {
    AtMost,
    AtLeast,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    /// Acceptance criterion backed by this check, if any.
    pub criterion: Option<u8>,
    pub passed: bool,
    pub measured: f64,
    pub tolerance: f64,
    pub bound: Bound,
    pub notes: String,
}

impl CheckResult {
    fn new(measured: f64, tolerance: f64, bound: Bound, notes: String) -> Self {
        // NaN never passes
        let passed = match bound {
            Bound::AtMost => measured <= tolerance,
            Bound::AtLeast => measured >= tolerance,
        };
        CheckResult { name: "", criterion: None, passed, measured, tolerance, bound, notes }
    }

    pub fn at_most(measured: f64, tolerance: f64, notes: impl Into<String>) -> Self {
        Self::new(measured, tolerance, Bound::AtMost, notes.into())
    }

    pub fn at_least(measured: f64, tolerance: f64, notes: impl Into<String>) -> Self {
        Self::new(measured, tolerance, Bound::AtLeast, notes.into())
    }

    /// A check that could not run at all.
    pub fn error(err: impl std::fmt::Display) -> Self {
        Self::new(f64::NAN, f64::NAN, Bound::AtMost, format!("error: {err}"))
    }

    /// Combine sub-results: passes only if all do; reports the first failure
    /// or the last entry.
    pub fn all(parts: Vec<CheckResult>) -> Self {
        let fail = parts.iter().find(|p| !p.passed).cloned();
        let notes = parts.iter().map(|p| p.notes.as_str()).filter(|s| !s.is_empty()).collect::<Vec<_>>().join("; ");
        let mut r = fail.unwrap_or_else(|| parts.last().cloned().unwrap_or_else(|| CheckResult::error("no sub-checks")));
        r.notes = notes;
        r
    }

    pub fn line(&self) -> String {
        let op = match self.bound {
            Bound::AtMost => "<=",
            Bound::AtLeast => ">=",
        };
        let crit = self.criterion.map_or(String::new(), |c| format!("[{c}] "));
        format!(
            "{} {crit}{}: measured {:.3e} {op} {:.3e}{}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.tolerance,
            if self.notes.is_empty() { String::new() } else { format!(" ({})", self.notes) }
        )
    }
}

/// Mutations that some checks must catch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    /// Negate the fan-out of the first optimal neuron before it is scored.
    FlipNeuronSign,
}

/// What a check receives.
#[derive(Debug, Clone, Copy)]
pub struct Ctx {
    pub seed: u64,
    pub fault: Fault,
}

impl Ctx {
    /// Independent generator for sub-stream `k` of this check.
    pub fn rng(&self, k: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(k);
        r
    }
}

pub struct Check {
    pub name: &'static str,
    pub criterion: Option<u8>,
    pub run: fn(&Ctx) -> CheckResult,
}

macro_rules! checks {
    ($($name:literal $crit:expr => $f:path),* $(,)?) => {
        &[$(Check { name: $name, criterion: $crit, run: $f }),*]
    };
}

/// Every registered check, in report order.
pub fn registry() -> &'static [Check] {
    checks![
        "pinv_penrose" None => algebra::pinv_penrose,
        "inv_sqrt_projector" None => algebra::inv_sqrt_projector,
        "svd_determinism" None => algebra::svd_determinism,
        "geneig_vectors" None => algebra::geneig_vectors,
        "fc_exactness" Some(1) => algebra::fc_exactness,
        "best_update_optimality" Some(2) => algebra::best_update_optimality,
        "normal_equations" None => algebra::normal_equations,
        "geneig_cross_path" Some(3) => algebra::geneig_cross_path,
        "contribution_orthogonality" None => algebra::contribution_orthogonality,
        "scalar_product_value" None => algebra::scalar_product_value,
        "local_invertibility" None => algebra::local_invertibility,
        "trace_inequality" None => algebra::trace_inequality,
        "equi_norm" None => algebra::equi_norm,
        "conv_bound" Some(7) => algebra::conv_bound,
        "goal_finite_difference" Some(4) => dynamics::goal_finite_difference,
        "goal_quadratic_exact" None => dynamics::goal_quadratic_exact,
        "cache_determinism" None => dynamics::cache_determinism,
        "unfold_equivalence" None => dynamics::unfold_equivalence,
        "zero_neuron_identity" None => dynamics::zero_neuron_identity,
        "gradmax_function_preserving" None => dynamics::gradmax_function_preserving,
        "growth_bookkeeping" None => dynamics::growth_bookkeeping,
        "amplitude_never_increases" None => dynamics::amplitude_never_increases,
        "first_order_slope" Some(5) => dynamics::first_order_slope,
        "sequential_vs_simultaneous" Some(6) => dynamics::sequential_vs_simultaneous,
        "discriminating_instance" Some(10) => dynamics::discriminating_instance,
        "random_direction_statistic" Some(11) => dynamics::random_direction_statistic,
        "greedy_regression" Some(8) => runs::greedy_regression,
        "overfit_construction" Some(9) => runs::overfit_construction,
        "classification_desk_run" Some(12) => runs::classification_desk_run,
        "schedules_and_formats" Some(13) => runs::schedules_and_formats,
        "log_schema" None => runs::log_schema,
    ]
}

/// Run one registered check.
pub fn run_check(name: &str, seed: u64, fault: Fault) -> Option<CheckResult> {
    registry().iter().find(|c| c.name == name).map(|c| execute(c, &Ctx { seed, fault }))
}

fn execute(c: &Check, ctx: &Ctx) -> CheckResult {
    let mut r = (c.run)(ctx);
    r.name = c.name;
    r.criterion = c.criterion;
    r
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationReport {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
}

impl VerificationReport {
    pub fn passed(&self) -> usize {
        self.checks.iter().filter(|c| c.passed).count()
    }

    pub fn failed(&self) -> usize {
        self.checks.len() - self.passed()
    }

    pub fn all_passed(&self) -> bool {
        self.failed() == 0
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let _ = writeln!(s, "{}", c.line());
        }
        let _ = writeln!(s, "seed {}: {} passed, {} failed", self.seed, self.passed(), self.failed());
        s
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let write = |w: &mut csv::Writer<Vec<u8>>| -> csv::Result<()> {
            w.write_record(["name", "criterion", "status", "measured", "bound", "tolerance", "notes"])?;
            for c in &self.checks {
                w.write_record([
                    c.name.to_string(),
                    c.criterion.map_or(String::new(), |x| x.to_string()),
                    if c.passed { "pass" } else { "fail" }.to_string(),
                    c.measured.to_string(),
                    match c.bound {
                        Bound::AtMost => "at_most",
                        Bound::AtLeast => "at_least",
                    }
                    .to_string(),
                    c.tolerance.to_string(),
                    c.notes.clone(),
                ])?;
            }
            Ok(())
        };
        write(&mut w).expect("writing to memory");
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }
}

/// Run every check whose name contains `filter` (all when `None`), on up to
/// `GROW_WORKERS` threads. The report keeps registry order.
pub fn run_invariant_suite(seed: u64, filter: Option<&str>, fault: Fault) -> VerificationReport {
    let selected: Vec<&Check> = registry().iter().filter(|c| filter.is_none_or(|f| c.name.contains(f))).collect();
    let ctx = Ctx { seed, fault };
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<CheckResult>>> = selected.iter().map(|_| Mutex::new(None)).collect();
    let workers = crate::harness::worker_count().min(selected.len()).max(1);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= selected.len() {
                    break;
                }
                *slots[i].lock().expect("no poisoned slot") = Some(execute(selected[i], &ctx));
            });
        }
    });
    VerificationReport {
        seed,
        checks: slots.into_iter().map(|m| m.into_inner().expect("no poisoned slot").expect("every slot filled")).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut names: Vec<_> = registry().iter().map(|c| c.name).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), registry().len());
    }

    #[test]
    fn nan_never_passes() {
        assert!(!CheckResult::at_most(f64::NAN, 1.0, "").passed);
        assert!(!CheckResult::at_least(f64::NAN, 1.0, "").passed);
    }
}
