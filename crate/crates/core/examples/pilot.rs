//! Pilot runs used to fix the pre-registered acceptance thresholds.
//!
//! `cargo run --release -p brlhf-core --example pilot -- <dim> <budget> <seeds> <brlhf|pbo|both> [key=value ...]`

use std::time::Instant;

use brlhf_core::harness::{apply_overrides, run, Method, RunConfig};
use brlhf_core::math::lower_median;
use brlhf_core::oracle::ProblemSpec;
use rayon::prelude::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let dim: usize = args.get(1).map_or(2, |s| s.parse().unwrap());
    let budget: usize = args.get(2).map_or(300, |s| s.parse().unwrap());
    let seeds: u64 = args.get(3).map_or(5, |s| s.parse().unwrap());
    let methods = match args.get(4).map(String::as_str) {
        Some("brlhf") => vec![Method::Brlhf],
        Some("pbo") => vec![Method::Pbo],
        _ => vec![Method::Brlhf, Method::Pbo],
    };
    let sets: Vec<String> = args.iter().skip(5).cloned().collect();
    for method in methods {
        let t0 = Instant::now();
        let errors: Vec<f64> = (1..=seeds)
            .into_par_iter()
            .map(|seed| {
                let mut cfg = RunConfig::new(method, ProblemSpec::rosenbrock(dim), seed);
                cfg.budget = Some(budget);
                let mut doc = serde_json::to_value(&cfg).unwrap();
                apply_overrides(&mut doc, &sets).unwrap();
                let cfg = RunConfig::from_value(doc).unwrap();
                let r = run(&cfg).expect("run failed");
                let e = r.final_abs_error().unwrap_or(f64::NAN);
                println!("{method:?} d={dim} seed={seed} final_abs_error={e:.6} status={:?}", r.status);
                e
            })
            .collect();
        println!(
            "{method:?} d={dim} Q={budget} median_final_abs_error={:.6} wall_secs={:.1}",
            lower_median(&errors),
            t0.elapsed().as_secs_f64()
        );
    }
}
