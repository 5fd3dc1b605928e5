//! Shared fixtures: a tiny synthetic corpus and an independent prototype
//! network trainer used as the reference for the no-attention ablation.
#![allow(dead_code)]

pub mod grad;
pub mod oracles;

use asl::backbone::{BackboneParams, Mode};
use asl::dataset::{generate_synthetic, sample_episode, Corpus, CorpusSplit, SyntheticConfig};
use asl::ops::PoolMode;
use asl::model::{classify, compute_prototypes, loss_cls, EpisodeBatch, Reduction};
use asl::optim::{AdamConfig, AdamState};
use asl::seed::{derive_seed, stream_rng};
use asl::trainer::TrainConfig;
use asl::Graph;

pub fn tiny_corpus() -> (Corpus, CorpusSplit) {
    let corpus = generate_synthetic(&SyntheticConfig {
        num_classes: 10,
        samples_per_class: 6,
        num_attributes: 4,
        image_size: 16,
        seed: 3,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let split = CorpusSplit::leading(&corpus, 5).unwrap();
    (corpus, split)
}

pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        n_way: 3,
        m_shot: 1,
        q_per_class: 2,
        max_iterations: 6,
        eval_tasks: 4,
        channels: 4,
        kernel_sizes: vec![3, 5],
        seed: 11,
        ..TrainConfig::default()
    }
}

/// Backbone, mean pooling, prototypes and summed negative log likelihood,
/// trained with Adam on the same episode stream as the full trainer.
pub fn plain_protonets(config: &TrainConfig, corpus: &Corpus, split: &CorpusSplit) -> (BackboneParams, Vec<f64>) {
    let init = derive_seed(config.seed, "init");
    let mut backbone = BackboneParams::init(corpus.image_shape[2], config.channels, &mut stream_rng(init, "init/backbone"));
    let shapes: Vec<Vec<usize>> = backbone
        .blocks
        .iter()
        .flat_map(|b| [&b.kernel, &b.bias, &b.gamma, &b.beta].map(|t| t.shape().to_vec()))
        .collect();
    let refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let mut adam = AdamState::new(
        AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        },
        &refs,
    );
    let mut rng = stream_rng(config.seed, "train/episodes");
    let queries = config.train_q_per_class.unwrap_or(config.q_per_class);
    let mut losses = Vec::new();
    for _ in 0..config.max_iterations {
        let ep = sample_episode(&split.train(), config.n_way, config.m_shot, queries, &mut rng).unwrap();
        let batch = EpisodeBatch::from_episode(corpus, &ep, false).unwrap();
        let mut g = Graph::new();
        let vars = backbone.bind(&mut g);
        let images = g.constant(batch.images.clone());
        let (features, stats) = backbone.encode(&mut g, &vars, images, Mode::Train).unwrap();
        let pooled = g.global_pool(features, PoolMode::Avg).unwrap();
        let emb = g.reshape(pooled, &[batch.len(), config.channels]).unwrap();
        let s = batch.support_count();
        let support = g.slice_rows(emb, 0, s).unwrap();
        let query = g.slice_rows(emb, s, batch.len()).unwrap();
        let protos = compute_prototypes(&mut g, support, &batch.support_labels, batch.n_way).unwrap();
        let probs = classify(&mut g, query, protos).unwrap();
        let loss = loss_cls(&mut g, probs, &batch.query_labels, Reduction::Sum).unwrap();
        losses.push(g.value(loss).item());
        let grads = g.backward(loss).unwrap();
        let grads: Vec<_> = vars
            .iter()
            .flat_map(|v| [v.kernel, v.bias, v.gamma, v.beta])
            .map(|v| grads.get(v))
            .collect();
        let mut params: Vec<_> = backbone
            .blocks
            .iter_mut()
            .flat_map(|b| [&mut b.kernel, &mut b.bias, &mut b.gamma, &mut b.beta])
            .collect();
        adam.step(&mut params, &grads, config.learning_rate).unwrap();
        backbone.update_running(&stats);
    }
    (backbone, losses)
}
