//! Acceptance suite. Each criterion prints one `criterion N: PASS|FAIL` line
//! followed by its measurements; the process exits non-zero if any fails.
//!
//! `ACCEPTANCE_ONLY=1,2,8` restricts the run to the listed criteria.

mod cli_chain;
mod gradients;
mod oracles;
mod training;

use std::time::Instant;

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

type Criterion = (u32, &'static str, fn(&mut training::Shared) -> Outcome);

fn selected() -> Option<Vec<u32>> {
    let v = std::env::var("ACCEPTANCE_ONLY").ok()?;
    Some(v.split(',').filter_map(|s| s.trim().parse().ok()).collect())
}

fn main() {
    let criteria: [Criterion; 9] = [
        (1, "loss gradients", gradients::criterion),
        (2, "degradation oracles", oracles::degradation),
        (3, "convex upsampling", oracles::convex),
        (4, "scale estimation trend", training::scale_trend),
        (5, "consistency ablation", training::consistency_ablation),
        (6, "restoration quality", training::restoration_quality),
        (7, "homogeneity ablation", training::homogeneity_ablation),
        (8, "metric closed forms", oracles::metrics),
        (9, "end-to-end cli", cli_chain::criterion),
    ];
    let only = selected();
    let mut shared = training::Shared::new();
    let mut failed = Vec::new();
    for (n, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let t = Instant::now();
        let out = run(&mut shared);
        let verdict = if out.pass { "PASS" } else { "FAIL" };
        println!("criterion {n}: {verdict}  {name} ({:.1}s)", t.elapsed().as_secs_f64());
        for line in out.detail.lines() {
            println!("    {line}");
        }
        if !out.pass {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
