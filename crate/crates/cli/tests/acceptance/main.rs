//! End-to-end acceptance checks, one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_ONLY=2,5` restricts the run to the listed criteria.

mod desk;
mod grads;
mod oracles;
mod repro;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

/// `Ok(detail)` on success, `Err(detail)` on failure.
pub type Outcome = Result<String, String>;

pub fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct Criterion {
    id: u32,
    name: &'static str,
    run: fn(&mut desk::Shared) -> Outcome,
}

const CRITERIA: &[Criterion] = &[
    Criterion {
        id: 1,
        name: "shape contract",
        run: |_| oracles::shape_contract(),
    },
    Criterion {
        id: 2,
        name: "gradient suite",
        run: |_| grads::suite(),
    },
    Criterion {
        id: 3,
        name: "dsnt oracle",
        run: |_| oracles::dsnt(),
    },
    Criterion {
        id: 4,
        name: "distance-map oracle",
        run: |_| oracles::distance_map(),
    },
    Criterion {
        id: 5,
        name: "dijkstra oracle",
        run: |_| oracles::dijkstra(),
    },
    Criterion {
        id: 6,
        name: "loss examples",
        run: |_| oracles::losses(),
    },
    Criterion {
        id: 7,
        name: "single-clip overfit",
        run: |_| desk::overfit(),
    },
    Criterion {
        id: 8,
        name: "variant ordering",
        run: desk::ordering,
    },
    Criterion {
        id: 9,
        name: "regularizer ablation",
        run: desk::ablation,
    },
    Criterion {
        id: 10,
        name: "contour contract",
        run: oracles::contour_contract,
    },
    Criterion {
        id: 11,
        name: "reproducibility",
        run: |_| repro::cli_rerun(),
    },
    Criterion {
        id: 12,
        name: "reference improvement arithmetic",
        run: |_| oracles::reference_table(),
    },
];

fn selected() -> Option<Vec<u32>> {
    let v = std::env::var("ACCEPTANCE_ONLY").ok()?;
    Some(v.split(',').filter_map(|s| s.trim().parse().ok()).collect())
}

fn main() -> ExitCode {
    let only = selected();
    let mut shared = desk::Shared::default();
    let mut failed = 0;
    for c in CRITERIA {
        if only.as_ref().is_some_and(|o| !o.contains(&c.id)) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| (c.run)(&mut shared))).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t0.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {:>2} {} ({secs:.1}s): {detail}", c.id, c.name);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
