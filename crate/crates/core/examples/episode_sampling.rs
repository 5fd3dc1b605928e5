//! Splits classes into disjoint train and test pools and draws N-way M-shot
//! episodes from each.
//!
//!     cargo run --example episode_sampling

use asl::dataset::{generate_synthetic, sample_episode, CorpusSplit, SyntheticConfig};
use asl::seed::stream_rng;

fn main() -> asl::Result<()> {
    let corpus = generate_synthetic(&SyntheticConfig::default())?;
    let split = CorpusSplit::leading(&corpus, 12)?;
    println!("train classes {:?}", split.train_classes);
    println!("test classes  {:?}", split.test_classes);

    let mut rng = stream_rng(7, "example");
    for (name, pool) in [("train", split.train()), ("test", split.test())] {
        let ep = sample_episode(&pool, 5, 1, 3, &mut rng)?;
        println!("{name} episode: classes {:?}", ep.class_map);
        println!("  support {:?} labels {:?}", ep.support, ep.support_labels);
        println!("  query   {:?} labels {:?}", ep.query, ep.query_labels);
    }
    Ok(())
}
