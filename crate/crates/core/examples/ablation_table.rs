//! Trains every ablation row under one seed and prints a comparison table.
//!
//!     cargo run --release --example ablation_table -- 300

use asl::dataset::{generate_synthetic, CorpusSplit, SyntheticConfig};
use asl::trainer::{ablate, TrainConfig};

fn main() -> asl::Result<()> {
    let iterations = std::env::args().nth(1).map_or(200, |s| s.parse().expect("iteration count"));
    let corpus = generate_synthetic(&SyntheticConfig::default())?;
    let split = CorpusSplit::leading(&corpus, 12)?;
    let cfg = TrainConfig {
        max_iterations: iterations,
        train_q_per_class: Some(1),
        eval_tasks: 100,
        channels: 16,
        ..TrainConfig::default()
    };
    println!("{:<18} {:>9} {:>8} {:>8}", "variant", "accuracy", "ci95", "mae");
    for (name, r) in ablate(&cfg, &corpus, &split)? {
        let mae = r.attr_mae.map_or("-".to_string(), |m| format!("{m:.3}"));
        println!(
            "{:<18} {:>8.2}% {:>7.2}% {:>8}",
            name,
            100.0 * r.mean_accuracy.unwrap_or(f64::NAN),
            100.0 * r.ci95.unwrap_or(f64::NAN),
            mae
        );
    }
    Ok(())
}
