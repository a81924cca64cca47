//! Acceptance run: every criterion prints one PASS/FAIL line; the process
//! exits non-zero if any fails.
//!
//! `PARTSEG_ACCEPT_ONLY=a,b` restricts the run to the named criteria (the
//! desk-scale checks share one training run).

mod contracts;
mod desk;
mod gradients;
mod util;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

type Check = Result<String, String>;

struct Outcome {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn run(name: &'static str, f: impl FnOnce() -> Check) -> Outcome {
    let t = Instant::now();
    let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let (passed, detail) = match res {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    let o = Outcome { name, passed, detail: format!("{detail} [{:.1}s]", t.elapsed().as_secs_f64()) };
    println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
    o
}

fn main() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let only: Option<Vec<String>> =
        std::env::var("PARTSEG_ACCEPT_ONLY").ok().map(|s| s.split(',').map(|p| p.trim().to_string()).collect());
    let wanted = |n: &str| only.as_ref().is_none_or(|o| o.iter().any(|x| x == n));

    let mut outcomes = Vec::new();
    let unit: [(&'static str, fn() -> Check); 6] = [
        ("gradient-suite", gradients::gradient_suite),
        ("loss-identities", gradients::loss_identities),
        ("triplane-fidelity", contracts::triplane_fidelity),
        ("film-contracts", contracts::film_contracts),
        ("full-segmentation-contracts", contracts::full_segmentation_contracts),
        ("pipeline-contracts", contracts::pipeline_contracts),
    ];
    for (name, f) in unit {
        if wanted(name) {
            outcomes.push(run(name, f));
        }
    }

    let desk_names = ["desk-end-to-end", "scale-sweep-direction", "determinism"];
    if desk_names.iter().any(|n| wanted(n)) {
        let t = Instant::now();
        let run_result = catch_unwind(AssertUnwindSafe(desk::DeskRun::execute));
        let desk = match run_result {
            Ok(Ok(d)) => Ok(d),
            Ok(Err(e)) => Err(e),
            Err(_) => Err("desk run panicked".to_string()),
        };
        println!("desk run finished in {:.1} min", t.elapsed().as_secs_f64() / 60.0);
        let checks: [(&'static str, fn(&desk::DeskRun) -> Check); 3] =
            [("desk-end-to-end", desk::end_to_end), ("scale-sweep-direction", desk::sweep_direction), ("determinism", desk::determinism)];
        for (name, f) in checks {
            if wanted(name) {
                outcomes.push(run(name, || desk.as_ref().map_err(|e| format!("desk run failed: {e}")).and_then(f)));
            }
        }
    }

    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name).collect();
    println!("acceptance: {} of {} criteria passed", outcomes.len() - failed.len(), outcomes.len());
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
