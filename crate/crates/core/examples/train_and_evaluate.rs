//! Episodic training followed by test-class evaluation with a 95% interval.
//!
//!     cargo run --release --example train_and_evaluate -- 500

use asl::dataset::{generate_synthetic, CorpusSplit, SyntheticConfig};
use asl::trainer::{evaluate, train, EvalOptions, TrainConfig};

fn main() -> asl::Result<()> {
    let iterations = std::env::args().nth(1).map_or(300, |s| s.parse().expect("iteration count"));
    let corpus = generate_synthetic(&SyntheticConfig::default())?;
    let split = CorpusSplit::leading(&corpus, 12)?;
    let cfg = TrainConfig {
        max_iterations: iterations,
        eval_tasks: 200,
        ..TrainConfig::default()
    };
    let (params, report) = train(&cfg, &corpus, &split)?;
    for r in report.loss_history.iter().step_by((iterations / 10).max(1)) {
        println!("iter {:5}  cls {:.4}  attr {:.4}  total {:.4}", r.iteration, r.cls, r.attr, r.total);
    }
    println!("trained {} parameters in {:.1}s", params.parameter_count(), report.train_seconds);

    let eval = evaluate(&params, &corpus, &split, &EvalOptions::from_config(&cfg))?;
    println!(
        "{}-way {}-shot accuracy {:.2}% ± {:.2}% over {} tasks",
        cfg.n_way,
        cfg.m_shot,
        100.0 * eval.mean_accuracy,
        100.0 * eval.ci95,
        cfg.eval_tasks
    );
    if let Some(mae) = eval.attr_mae {
        println!("query attribute MAE {mae:.3}");
    }
    Ok(())
}
