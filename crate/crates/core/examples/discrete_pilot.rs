//! Pilot for the discrete active-versus-random comparison.
//!
//! Set `PILOT_SEED_OFFSET` to draw seeds disjoint from the acceptance seeds.
//!
//! `cargo run --release -p brlhf-core --example discrete_pilot -- <seeds> [key=value ...]`

use brlhf_core::discrete::{compare_selection, DiscreteConfig};
use brlhf_core::harness::apply_overrides;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).map_or(5, |s| s.parse().unwrap());
    let mut doc = serde_json::to_value(DiscreteConfig::default()).unwrap();
    apply_overrides(&mut doc, &args[2.min(args.len())..]).unwrap();
    let cfg: DiscreteConfig = serde_json::from_value(doc).unwrap();
    let offset: u64 = std::env::var("PILOT_SEED_OFFSET").map_or(0, |v| v.parse().unwrap());
    let seeds: Vec<u64> = (offset + 1..=offset + seeds).collect();
    let cmp = compare_selection(&cfg, &seeds).unwrap();
    for (a, r) in cmp.active.iter().zip(&cmp.random) {
        println!("seed={} active={:?} random={:?}", a.seed, a.pairs_to_target, r.pairs_to_target);
    }
    if std::env::var("PILOT_CURVE").is_ok() {
        for n in [5usize, 10, 20, 40, 80, 160, 320] {
            let at = |rs: &[brlhf_core::discrete::DiscreteRun]| {
                let v: Vec<f64> = rs
                    .iter()
                    .filter_map(|r| r.accuracies.get(n.saturating_sub(cfg.initial_pairs)).copied())
                    .collect();
                v.iter().sum::<f64>() / v.len().max(1) as f64
            };
            println!("pairs={n} mean_acc active={:.3} random={:.3}", at(&cmp.active), at(&cmp.random));
        }
    }
    println!(
        "median_active={} median_random={} ratio={:.3}",
        cmp.median_active,
        cmp.median_random,
        cmp.ratio()
    );
}
