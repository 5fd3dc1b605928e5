//! Trains briefly, saves a checkpoint, reloads it and confirms that the
//! restored model evaluates identically.
//!
//!     cargo run --release --example checkpoint_roundtrip

use asl::checkpoint::Checkpoint;
use asl::dataset::{generate_synthetic, CorpusSplit, SyntheticConfig};
use asl::trainer::{evaluate, train, EvalOptions, TrainConfig};

fn main() -> asl::Result<()> {
    let corpus = generate_synthetic(&SyntheticConfig::default())?;
    let split = CorpusSplit::leading(&corpus, 12)?;
    let cfg = TrainConfig {
        max_iterations: 50,
        train_q_per_class: Some(1),
        eval_tasks: 50,
        channels: 16,
        ..TrainConfig::default()
    };
    let (params, _) = train(&cfg, &corpus, &split)?;
    let path = std::env::temp_dir().join("asl_example_checkpoint.bin");
    Checkpoint {
        params: params.clone(),
        alpha: cfg.alpha,
    }
    .save(&path)?;
    let restored = Checkpoint::load(&path)?;
    println!(
        "{} bytes, checksum {:016x} -> {:016x}",
        std::fs::metadata(&path)?.len(),
        params.checksum(),
        restored.params.checksum()
    );
    let opts = EvalOptions::from_config(&cfg);
    let before = evaluate(&params, &corpus, &split, &opts)?;
    let after = evaluate(&restored.params, &corpus, &split, &opts)?;
    println!("accuracy before {:.4}, after {:.4}", before.mean_accuracy, after.mean_accuracy);
    assert_eq!(before.task_accuracies, after.task_accuracies);
    Ok(())
}
