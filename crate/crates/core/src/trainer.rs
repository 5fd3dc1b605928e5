//! Episodic training, evaluation with 95% confidence intervals, and the
//! ablation runner.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::Mode;
use crate::dataset::{sample_episode, ClassPool, Corpus, CorpusSplit, Episode};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{forward_episode, Ablation, EpisodeBatch, LossConfig, ModelConfig, ModelParams, Reduction};
use crate::optim::{AdamConfig, AdamState};
use crate::seed::{derive_seed, stream_rng};
use crate::tensor::Tensor;

/// Multiplies the learning rate by `factor` every `every` iterations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepDecay {
    pub every: usize,
    pub factor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub n_way: usize,
    pub m_shot: usize,
    pub q_per_class: usize,
    /// Queries per class in training episodes; `None` uses `q_per_class`.
    pub train_q_per_class: Option<usize>,
    pub alpha: f64,
    pub learning_rate: f64,
    pub lr_decay: Option<StepDecay>,
    pub max_iterations: usize,
    pub eval_tasks: usize,
    pub seed: u64,
    pub channels: usize,
    pub kernel_sizes: Vec<usize>,
    pub ablation: Ablation,
    pub reduction: Reduction,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_way: 5,
            m_shot: 1,
            q_per_class: 15,
            train_q_per_class: Some(1),
            alpha: 1.0,
            learning_rate: 1e-3,
            lr_decay: None,
            max_iterations: 5_000,
            eval_tasks: 2_000,
            seed: 0,
            channels: 32,
            kernel_sizes: vec![3, 5, 7, 9],
            ablation: Ablation::default(),
            reduction: Reduction::Sum,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 {
            return Err(Error::Config(format!("n_way must be at least 2, got {}", self.n_way)));
        }
        if self.m_shot < 1 {
            return Err(Error::Config("m_shot must be at least 1".into()));
        }
        if self.q_per_class < 1 || self.train_q_per_class == Some(0) {
            return Err(Error::Config("episodes need at least one query per class".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be finite and ≥ 0, got {}", self.alpha)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.learning_rate)));
        }
        if self.channels == 0 {
            return Err(Error::Config("channels must be positive".into()));
        }
        self.ablation.validate()?;
        if !self.ablation.no_psam && self.kernel_sizes.is_empty() {
            return Err(Error::Config("kernel set is empty but pyramid spatial attention is on".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, corpus: &Corpus) -> ModelConfig {
        ModelConfig {
            image_shape: corpus.image_shape,
            channels: self.channels,
            num_attributes: corpus.num_attributes,
            kernel_sizes: self.kernel_sizes.clone(),
            ablation: self.ablation,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            reduction: self.reduction,
        }
    }

    fn learning_rate_at(&self, iteration: usize) -> f64 {
        match self.lr_decay {
            Some(StepDecay { every, factor }) if every > 0 => {
                self.learning_rate * factor.powi((iteration / every) as i32)
            }
            _ => self.learning_rate,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub cls: f64,
    pub attr: f64,
    pub total: f64,
}

/// Outcome of training and/or evaluating one configuration. `C` is the
/// echoed configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport<C = TrainConfig> {
    pub config: C,
    pub loss_history: Vec<LossRecord>,
    pub mean_accuracy: Option<f64>,
    pub ci95: Option<f64>,
    /// Mean absolute error of predicted query attributes.
    pub attr_mae: Option<f64>,
    pub eval_tasks: usize,
    pub train_seconds: f64,
    pub eval_seconds: f64,
    pub wall_clock_seconds: f64,
}

impl<C> MetricsReport<C> {
    pub fn empty(config: C) -> Self {
        Self {
            config,
            loss_history: Vec::new(),
            mean_accuracy: None,
            ci95: None,
            attr_mae: None,
            eval_tasks: 0,
            train_seconds: 0.0,
            eval_seconds: 0.0,
            wall_clock_seconds: 0.0,
        }
    }

    pub fn with_evaluation(mut self, eval: &Evaluation) -> Self {
        self.mean_accuracy = Some(eval.mean_accuracy);
        self.ci95 = Some(eval.ci95);
        self.attr_mae = eval.attr_mae;
        self.eval_tasks = eval.task_accuracies.len();
        self.eval_seconds = eval.seconds;
        self.wall_clock_seconds = self.train_seconds + self.eval_seconds;
        self
    }

    /// Same metrics with a different configuration echo.
    pub fn with_config<D>(self, config: D) -> MetricsReport<D> {
        MetricsReport {
            config,
            loss_history: self.loss_history,
            mean_accuracy: self.mean_accuracy,
            ci95: self.ci95,
            attr_mae: self.attr_mae,
            eval_tasks: self.eval_tasks,
            train_seconds: self.train_seconds,
            eval_seconds: self.eval_seconds,
            wall_clock_seconds: self.wall_clock_seconds,
        }
    }
}

/// Trains a fresh model with one episode per Adam step.
pub fn train(config: &TrainConfig, corpus: &Corpus, split: &CorpusSplit) -> Result<(ModelParams, MetricsReport)> {
    let mut params = ModelParams::init(config.model_config(corpus), derive_seed(config.seed, "init"))?;
    let report = train_from(config, corpus, split, &mut params)?;
    Ok((params, report))
}

/// Continues training `params` in place.
pub fn train_from(
    config: &TrainConfig,
    corpus: &Corpus,
    split: &CorpusSplit,
    params: &mut ModelParams,
) -> Result<MetricsReport> {
    config.validate()?;
    let start = Instant::now();
    let shapes: Vec<Vec<usize>> = params
        .named_trainable()
        .iter()
        .map(|(_, t)| t.shape().to_vec())
        .collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let mut adam = AdamState::new(
        AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        },
        &shape_refs,
    );
    let mut rng = stream_rng(config.seed, "train/episodes");
    let queries = config.train_q_per_class.unwrap_or(config.q_per_class);
    let mut report = MetricsReport::empty(config.clone());
    for iteration in 0..config.max_iterations {
        let episode = sample_episode(&split.train(), config.n_way, config.m_shot, queries, &mut rng)?;
        let batch = EpisodeBatch::from_episode(corpus, &episode, config.ablation.zero_attributes)?;
        let mut g = Graph::new();
        let vars = params.bind(&mut g);
        let out = forward_episode(&mut g, params, &vars, &batch, Mode::Train, config.loss_config())?;
        let record = LossRecord {
            iteration,
            cls: g.value(out.loss_cls).item(),
            attr: out.loss_attr.map_or(0.0, |v| g.value(v).item()),
            total: g.value(out.loss).item(),
        };
        if !(record.total.is_finite() && record.cls.is_finite() && record.attr.is_finite()) {
            return Err(Error::NonFinite {
                iteration,
                detail: format!("cls={} attr={} total={}", record.cls, record.attr, record.total),
            });
        }
        let grads = g.backward(out.loss)?;
        let grads: Vec<Option<Tensor>> = vars.leaves.iter().map(|&v| grads.get(v)).collect();
        adam.step(&mut params.trainable_mut(), &grads, config.learning_rate_at(iteration))?;
        params.backbone.update_running(&out.stats);
        report.loss_history.push(record);
    }
    report.train_seconds = start.elapsed().as_secs_f64();
    report.wall_clock_seconds = report.train_seconds;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub tasks: usize,
    pub n_way: usize,
    pub m_shot: usize,
    pub q_per_class: usize,
    pub seed: u64,
}

impl EvalOptions {
    pub fn from_config(config: &TrainConfig) -> Self {
        Self {
            tasks: config.eval_tasks,
            n_way: config.n_way,
            m_shot: config.m_shot,
            q_per_class: config.q_per_class,
            seed: config.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub mean_accuracy: f64,
    pub ci95: f64,
    pub attr_mae: Option<f64>,
    pub task_accuracies: Vec<f64>,
    pub seconds: f64,
}

/// Per-task predictions: `[Q][N]` probabilities and optionally `[Q,A]`
/// predicted query attributes.
pub struct TaskPrediction {
    pub probs: Vec<Vec<f64>>,
    pub query_attributes: Option<Tensor>,
}

/// Mean and 95% half-width `1.96·s/√T` (sample standard deviation).
pub fn mean_ci95(values: &[f64]) -> Result<(f64, f64)> {
    let t = values.len();
    if t < 2 {
        return Err(Error::Config(format!("a confidence interval needs at least 2 tasks, got {t}")));
    }
    let mean = values.iter().sum::<f64>() / t as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (t - 1) as f64;
    Ok((mean, 1.96 * var.sqrt() / (t as f64).sqrt()))
}

/// Index of the largest entry, first one on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Evaluates an arbitrary predictor over `opts.tasks` episodes drawn from
/// `pool`. Episodes are sampled sequentially from the seed, scored in
/// parallel and reduced in task order.
pub fn evaluate_with<F>(
    corpus: &Corpus,
    pool: &ClassPool<'_>,
    opts: &EvalOptions,
    zero_attributes: bool,
    predict: F,
) -> Result<Evaluation>
where
    F: Fn(&EpisodeBatch) -> Result<TaskPrediction> + Sync,
{
    if opts.tasks < 2 {
        return Err(Error::Config(format!("evaluation needs at least 2 tasks, got {}", opts.tasks)));
    }
    let start = Instant::now();
    let mut rng = stream_rng(opts.seed, "eval/episodes");
    let episodes: Vec<Episode> = (0..opts.tasks)
        .map(|_| sample_episode(pool, opts.n_way, opts.m_shot, opts.q_per_class, &mut rng))
        .collect::<Result<_>>()?;
    let per_task: Vec<(f64, Option<(f64, usize)>)> = episodes
        .par_iter()
        .map(|ep| -> Result<_> {
            let batch = EpisodeBatch::from_episode(corpus, ep, zero_attributes)?;
            let pred = predict(&batch)?;
            let correct = pred
                .probs
                .iter()
                .zip(&ep.query_labels)
                .filter(|(p, &y)| argmax(p) == y)
                .count();
            let acc = correct as f64 / ep.query_labels.len() as f64;
            let mae = pred.query_attributes.map(|qa| {
                let truth: Vec<f64> = ep
                    .query
                    .iter()
                    .flat_map(|&i| corpus.samples[i].attributes.values().iter().copied())
                    .collect();
                let err: f64 = qa.data().iter().zip(&truth).map(|(a, b)| (a - b).abs()).sum();
                (err, truth.len())
            });
            Ok((acc, mae))
        })
        .collect::<Result<_>>()?;
    let task_accuracies: Vec<f64> = per_task.iter().map(|(a, _)| *a).collect();
    let (mean_accuracy, ci95) = mean_ci95(&task_accuracies)?;
    let attr_mae = if per_task.iter().all(|(_, m)| m.is_some()) {
        let (err, n) = per_task
            .iter()
            .filter_map(|(_, m)| *m)
            .fold((0.0, 0usize), |(e, n), (de, dn)| (e + de, n + dn));
        Some(err / n as f64)
    } else {
        None
    };
    Ok(Evaluation {
        mean_accuracy,
        ci95,
        attr_mae,
        task_accuracies,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Model predictions for one batch with frozen normalisation statistics.
pub fn predict(params: &ModelParams, batch: &EpisodeBatch) -> Result<TaskPrediction> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let out = forward_episode(&mut g, params, &vars, batch, Mode::Eval, LossConfig::default())?;
    let probs = g.value(out.probs);
    let n = probs.last_dim();
    let s = batch.support_count();
    let query_attributes = match out.predicted {
        Some(p) => Some(g.value(p).row_range(s, batch.len())?),
        None => None,
    };
    Ok(TaskPrediction {
        probs: probs.data().chunks(n).map(<[f64]>::to_vec).collect(),
        query_attributes,
    })
}

/// Top-1 accuracy of `params` on episodes from the test classes.
pub fn evaluate(params: &ModelParams, corpus: &Corpus, split: &CorpusSplit, opts: &EvalOptions) -> Result<Evaluation> {
    evaluate_with(
        corpus,
        &split.test(),
        opts,
        params.config.ablation.zero_attributes,
        |batch| predict(params, batch),
    )
}

/// Train then evaluate.
pub fn run_experiment(
    config: &TrainConfig,
    corpus: &Corpus,
    split: &CorpusSplit,
) -> Result<(ModelParams, MetricsReport)> {
    let (params, report) = train(config, corpus, split)?;
    let eval = evaluate(&params, corpus, split, &EvalOptions::from_config(config))?;
    Ok((params, report.with_evaluation(&eval)))
}

/// The ablation rows compared against the full model.
pub fn ablation_variants() -> Vec<(&'static str, Ablation)> {
    vec![
        ("full", Ablation::default()),
        (
            "w/o VAP",
            Ablation {
                no_vap: true,
                ..Ablation::default()
            },
        ),
        (
            "w/o CAM",
            Ablation {
                no_cam: true,
                ..Ablation::default()
            },
        ),
        (
            "w/o PSAM",
            Ablation {
                no_psam: true,
                ..Ablation::default()
            },
        ),
        ("w/o VAP & AVAM", Ablation::protonets()),
        (
            "all-0 attributes",
            Ablation {
                zero_attributes: true,
                ..Ablation::default()
            },
        ),
        (
            "no attributes",
            Ablation {
                no_attributes: true,
                ..Ablation::default()
            },
        ),
    ]
}

/// Trains and evaluates every ablation row with otherwise identical settings.
pub fn ablate(config: &TrainConfig, corpus: &Corpus, split: &CorpusSplit) -> Result<Vec<(String, MetricsReport)>> {
    config.validate()?;
    ablation_variants()
        .into_iter()
        .map(|(name, ablation)| {
            let cfg = TrainConfig {
                ablation,
                ..config.clone()
            };
            run_experiment(&cfg, corpus, split).map(|(_, r)| (name.to_string(), r))
        })
        .collect()
}
