//! Acceptance suite: one PASS, WARN or FAIL line per criterion.
//!
//! Criteria 1 to 6 and the oracle half of 10 run in-process in a few
//! seconds. The rest drive the `unimlip` binary at desk scale
//! (`configs/desk.toml`), which takes about three and a half hours on one
//! core. Those artifacts live under the target directory and are reused
//! only while the binary and the desk config are byte-identical to the ones
//! that produced them; any rebuild with changed code starts over.

mod desk;
mod properties;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

pub enum Outcome {
    Pass(String),
    Warn(String),
    Fail(String),
}

impl Outcome {
    /// `Pass` when `ok`, otherwise `Fail`, with the same detail.
    pub fn check(ok: bool, detail: String) -> Self {
        if ok {
            Outcome::Pass(detail)
        } else {
            Outcome::Fail(detail)
        }
    }
}

fn panic_text(e: Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<String>()
        .cloned()
        .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "panicked".into())
}

/// Runs `f`, turning a panic into a failure.
pub fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| Outcome::Fail(panic_text(e)))
}

fn main() -> ExitCode {
    // `cargo test` passes harness flags; a name filter that excludes this
    // target skips it.
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return ExitCode::SUCCESS;
    }
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }

    let started = Instant::now();
    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (1, "loss oracles", guarded(properties::loss_oracles)),
        (2, "gradient checks", guarded(properties::gradient_checks)),
        (3, "trivial values", guarded(properties::trivial_values)),
        (4, "batch-norm freeze", guarded(properties::bn_freeze)),
        (5, "perturbation statistics", guarded(properties::perturbation_statistics)),
        (6, "masking statistics", guarded(properties::masking_statistics)),
    ];
    let oracles = guarded(properties::eval_oracles);
    for (n, _, outcome) in &results {
        eprintln!("acceptance: criterion {n} {}", tag(outcome));
    }
    eprintln!("acceptance: criterion 10 oracles {}", tag(&oracles));

    let desk = catch_unwind(AssertUnwindSafe(desk::Desk::prepare)).map_err(panic_text);
    let with_desk = |f: fn(&desk::Desk) -> Outcome| match &desk {
        Ok(d) => guarded(|| f(d)),
        Err(e) => Outcome::Fail(format!("desk-scale runs failed: {e}")),
    };
    results.push((7, "end-to-end learning signal", with_desk(desk::learning_signal)));
    results.push((8, "batch-norm ablation ordering", with_desk(desk::bn_ablation)));
    results.push((9, "objective ablation", with_desk(desk::objective_ablation)));
    let vqa = with_desk(desk::vqa_comparison);
    results.push((10, "retrieval, probe and VQA oracles", merge(oracles, vqa)));
    results.push((11, "reproducibility", with_desk(desk::reproducibility)));
    results.sort_by_key(|r| r.0);

    if let Ok(d) = &desk {
        println!("\n{}", d.ablation_table);
    }
    let mut failed = 0;
    for (n, title, outcome) in &results {
        let (Outcome::Pass(detail) | Outcome::Warn(detail) | Outcome::Fail(detail)) = outcome;
        if matches!(outcome, Outcome::Fail(_)) {
            failed += 1;
        }
        println!("criterion {n:>2}  {}  {title}: {detail}", tag(outcome));
    }
    println!(
        "acceptance: {} of {} criteria met ({:.0} s)",
        results.len() - failed,
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn tag(o: &Outcome) -> &'static str {
    match o {
        Outcome::Pass(_) => "PASS",
        Outcome::Warn(_) => "WARN",
        Outcome::Fail(_) => "FAIL",
    }
}

/// Joins two partial outcomes of one criterion; the worse one decides.
fn merge(a: Outcome, b: Outcome) -> Outcome {
    let rank = |o: &Outcome| match o {
        Outcome::Pass(_) => 0,
        Outcome::Warn(_) => 1,
        Outcome::Fail(_) => 2,
    };
    let text = |o: &Outcome| match o {
        Outcome::Pass(d) | Outcome::Warn(d) | Outcome::Fail(d) => d.clone(),
    };
    let detail = format!("{}; {}", text(&a), text(&b));
    match rank(&a).max(rank(&b)) {
        0 => Outcome::Pass(detail),
        1 => Outcome::Warn(detail),
        _ => Outcome::Fail(detail),
    }
}
