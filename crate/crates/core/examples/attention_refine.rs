//! Runs the untrained model on one episode and prints the predicted
//! attributes, channel gates and spatial gates it produces.
//!
//!     cargo run --release --example attention_refine

use asl::backbone::Mode;
use asl::dataset::{generate_synthetic, sample_episode, CorpusSplit, SyntheticConfig};
use asl::model::{forward_episode, EpisodeBatch, LossConfig, ModelParams};
use asl::seed::stream_rng;
use asl::trainer::TrainConfig;
use asl::Graph;

fn row(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join(" ")
}

fn main() -> asl::Result<()> {
    let corpus = generate_synthetic(&SyntheticConfig::default())?;
    let split = CorpusSplit::leading(&corpus, 12)?;
    let cfg = TrainConfig {
        channels: 8,
        ..TrainConfig::default()
    };
    let params = ModelParams::init(cfg.model_config(&corpus), 1)?;
    let ep = sample_episode(&split.train(), 3, 1, 1, &mut stream_rng(1, "example"))?;
    let batch = EpisodeBatch::from_episode(&corpus, &ep, false)?;

    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let out = forward_episode(&mut g, &params, &vars, &batch, Mode::Train, LossConfig::default())?;
    let a = corpus.num_attributes;
    let predicted = g.value(out.predicted.expect("predictor enabled"));
    let mc = g.value(out.refined.channel_map.expect("channel attention enabled"));
    let ms = g.value(out.refined.spatial_map.expect("spatial attention enabled"));
    let hw = ms.len() / batch.len();
    for i in 0..batch.len() {
        let role = if i < batch.support_count() { "support" } else { "query" };
        println!("{role} {i}");
        println!("  attributes {}", row(&batch.attributes.data()[i * a..(i + 1) * a]));
        println!("  predicted  {}", row(&predicted.data()[i * a..(i + 1) * a]));
        println!("  M_c        {}", row(&mc.data()[i * cfg.channels..(i + 1) * cfg.channels]));
        println!("  M_s        {}", row(&ms.data()[i * hw..(i + 1) * hw]));
    }
    println!("probabilities {}", row(g.value(out.probs).data()));
    println!(
        "loss {:.4} = cls {:.4} + attr {:.4}",
        g.value(out.loss).item(),
        g.value(out.loss_cls).item(),
        g.value(out.loss_attr.expect("predictor enabled")).item()
    );
    Ok(())
}
