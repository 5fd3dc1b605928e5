//! Attribute-guided refinement and prototype classification.
//!
//! Pipeline for one episode (support rows first, then queries):
//!
//! 1. encode every image to a feature map `F_v`;
//! 2. predict attributes `â = σ(GAP(F_v)·W + b)` for every sample;
//! 3. refine: `F = [F_v ; a]`, `F_c = M_c(F) ⊙ F_v`, `F' = [F_c ; a]`,
//!    `F_f = M_s(F') ⊙ F_c`, where support rows use dataset attributes and
//!    query rows use `â`;
//! 4. pool `F_f` to vectors, average support vectors per class into
//!    prototypes and classify queries by a softmax over negative squared
//!    distances;
//! 5. `L = L_cls + α·L_attr`.

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneParams, BatchStats, BlockVars, Mode};
use crate::dataset::{Corpus, Episode};
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::PoolMode;
use crate::seed::stream_rng;
use crate::tensor::{he_uniform, Tensor};

/// Floor applied inside the log of the classification loss.
pub const PROB_FLOOR: f64 = 1e-12;

/// Ablation switches; all off is the full model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// No attribute predictor: queries are refined with zero attributes and
    /// the attribute loss is dropped.
    pub no_vap: bool,
    pub no_cam: bool,
    pub no_psam: bool,
    /// Every dataset attribute vector is replaced by zeros.
    pub zero_attributes: bool,
    /// Attention sees visual features only; no attribute predictor.
    pub no_attributes: bool,
}

impl Ablation {
    pub const NAMES: [&'static str; 5] = ["no_vap", "no_cam", "no_psam", "zero_attributes", "no_attributes"];

    /// Parses a comma separated flag list such as `no_vap,no_cam`.
    pub fn parse(list: &str) -> Result<Self> {
        let mut a = Self::default();
        for flag in list.split(',').map(str::trim).filter(|f| !f.is_empty()) {
            match flag {
                "no_vap" => a.no_vap = true,
                "no_cam" => a.no_cam = true,
                "no_psam" => a.no_psam = true,
                "zero_attributes" => a.zero_attributes = true,
                "no_attributes" => a.no_attributes = true,
                other => return Err(Error::Config(format!("unknown ablation flag {other:?}"))),
            }
        }
        Ok(a)
    }

    /// Plain prototype classifier: no predictor, no attention.
    pub fn protonets() -> Self {
        Self {
            no_vap: true,
            no_cam: true,
            no_psam: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.no_attributes && self.zero_attributes {
            return Err(Error::Config("no_attributes and zero_attributes are contradictory".into()));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        let on: Vec<&str> = [
            (self.no_vap, "no_vap"),
            (self.no_cam, "no_cam"),
            (self.no_psam, "no_psam"),
            (self.zero_attributes, "zero_attributes"),
            (self.no_attributes, "no_attributes"),
        ]
        .iter()
        .filter(|(b, _)| *b)
        .map(|(_, n)| *n)
        .collect();
        if on.is_empty() {
            "full".into()
        } else {
            on.join("+")
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// `[H, W, C]` of input images.
    pub image_shape: [usize; 3],
    /// Feature channels `C` of the encoder.
    pub channels: usize,
    pub num_attributes: usize,
    pub kernel_sizes: Vec<usize>,
    #[serde(default)]
    pub ablation: Ablation,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.ablation.validate()?;
        if self.channels == 0 || self.num_attributes == 0 {
            return Err(Error::Config("channels and num_attributes must be positive".into()));
        }
        if self.uses_psam() && self.kernel_sizes.is_empty() {
            return Err(Error::Config("pyramid spatial attention needs at least one kernel size".into()));
        }
        if let Some(k) = self.kernel_sizes.iter().find(|k| *k % 2 == 0) {
            return Err(Error::Config(format!("kernel size {k} is not odd")));
        }
        Ok(())
    }

    pub fn uses_vap(&self) -> bool {
        !self.ablation.no_vap && !self.ablation.no_attributes
    }

    pub fn uses_cam(&self) -> bool {
        !self.ablation.no_cam
    }

    pub fn uses_psam(&self) -> bool {
        !self.ablation.no_psam
    }

    /// Number of attribute channels appended to attention inputs.
    pub fn attention_attributes(&self) -> usize {
        if self.ablation.no_attributes {
            0
        } else {
            self.num_attributes
        }
    }

    fn feeds_attention(&self) -> bool {
        (self.uses_cam() || self.uses_psam()) && self.attention_attributes() > 0
    }
}

/// Attribute predictor head: `C → A` affine map then sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct VapParams {
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Shared one-layer MLP `(C+A) → C` applied to both pooled branches.
#[derive(Clone, Debug, PartialEq)]
pub struct CamParams {
    pub weights: Tensor,
    pub bias: Tensor,
}

/// One `K×K×2×1` kernel and bias per pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct PsamParams {
    pub levels: Vec<PsamLevel>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PsamLevel {
    pub size: usize,
    pub kernel: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct AffineVars {
    pub weights: Var,
    pub bias: Var,
}

#[derive(Clone, Debug)]
pub struct PsamVars {
    pub levels: Vec<AffineVars>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub backbone: BackboneParams,
    pub vap: Option<VapParams>,
    pub cam: Option<CamParams>,
    pub psam: Option<PsamParams>,
}

/// Graph handles for every trainable tensor, in [`ModelParams::named_trainable`] order.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub backbone: Vec<BlockVars>,
    pub vap: Option<AffineVars>,
    pub cam: Option<AffineVars>,
    pub psam: Option<PsamVars>,
    pub leaves: Vec<Var>,
}

impl ModelParams {
    /// Fan-in scaled uniform weights, zero biases. Each submodule draws from
    /// its own stream of `seed`, so ablations share the surviving weights.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let [_, _, cin] = config.image_shape;
        let c = config.channels;
        let a = config.num_attributes;
        let backbone = BackboneParams::init(cin, c, &mut stream_rng(seed, "init/backbone"));
        let vap = config.uses_vap().then(|| VapParams {
            weights: he_uniform(&[c, a], c, &mut stream_rng(seed, "init/vap")),
            bias: Tensor::zeros(&[a]),
        });
        let width = c + config.attention_attributes();
        let cam = config.uses_cam().then(|| CamParams {
            weights: he_uniform(&[width, c], width, &mut stream_rng(seed, "init/cam")),
            bias: Tensor::zeros(&[c]),
        });
        let psam = config.uses_psam().then(|| PsamParams {
            levels: config
                .kernel_sizes
                .iter()
                .map(|&k| PsamLevel {
                    size: k,
                    kernel: he_uniform(&[k, k, 2, 1], k * k * 2, &mut stream_rng(seed, &format!("init/psam/{k}"))),
                    bias: Tensor::zeros(&[1]),
                })
                .collect(),
        });
        Ok(Self {
            config,
            backbone,
            vap,
            cam,
            psam,
        })
    }

    pub fn named_trainable(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.backbone.blocks.iter().enumerate() {
            out.push((format!("backbone.{i}.kernel"), &b.kernel));
            out.push((format!("backbone.{i}.bias"), &b.bias));
            out.push((format!("backbone.{i}.gamma"), &b.gamma));
            out.push((format!("backbone.{i}.beta"), &b.beta));
        }
        if let Some(v) = &self.vap {
            out.push(("vap.weights".into(), &v.weights));
            out.push(("vap.bias".into(), &v.bias));
        }
        if let Some(c) = &self.cam {
            out.push(("cam.weights".into(), &c.weights));
            out.push(("cam.bias".into(), &c.bias));
        }
        if let Some(p) = &self.psam {
            for l in &p.levels {
                out.push((format!("psam.{}.kernel", l.size), &l.kernel));
                out.push((format!("psam.{}.bias", l.size), &l.bias));
            }
        }
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in &mut self.backbone.blocks {
            out.push(&mut b.kernel);
            out.push(&mut b.bias);
            out.push(&mut b.gamma);
            out.push(&mut b.beta);
        }
        if let Some(v) = &mut self.vap {
            out.push(&mut v.weights);
            out.push(&mut v.bias);
        }
        if let Some(c) = &mut self.cam {
            out.push(&mut c.weights);
            out.push(&mut c.bias);
        }
        if let Some(p) = &mut self.psam {
            for l in &mut p.levels {
                out.push(&mut l.kernel);
                out.push(&mut l.bias);
            }
        }
        out
    }

    /// Non-trainable state (normalisation running statistics).
    pub fn named_buffers(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.backbone.blocks.iter().enumerate() {
            out.push((format!("backbone.{i}.running_mean"), &b.running_mean));
            out.push((format!("backbone.{i}.running_var"), &b.running_var));
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in &mut self.backbone.blocks {
            out.push(&mut b.running_mean);
            out.push(&mut b.running_var);
        }
        out
    }

    /// Trainable tensors followed by buffers, matching the order of
    /// [`named_trainable`](Self::named_trainable) then [`named_buffers`](Self::named_buffers).
    pub fn state_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        let mut buffers = Vec::new();
        for b in &mut self.backbone.blocks {
            out.extend([&mut b.kernel, &mut b.bias, &mut b.gamma, &mut b.beta]);
            buffers.extend([&mut b.running_mean, &mut b.running_var]);
        }
        if let Some(v) = &mut self.vap {
            out.extend([&mut v.weights, &mut v.bias]);
        }
        if let Some(c) = &mut self.cam {
            out.extend([&mut c.weights, &mut c.bias]);
        }
        if let Some(p) = &mut self.psam {
            for l in &mut p.levels {
                out.extend([&mut l.kernel, &mut l.bias]);
            }
        }
        out.extend(buffers);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_trainable().iter().map(|(_, t)| t.len()).sum()
    }

    /// FNV-1a over the bit patterns of every parameter and buffer.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, t) in self.named_trainable().into_iter().chain(self.named_buffers()) {
            for v in t.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn bind(&self, g: &mut Graph) -> ModelVars {
        let leaves: Vec<Var> = self
            .named_trainable()
            .into_iter()
            .map(|(_, t)| g.param(t.clone()))
            .collect();
        let mut it = leaves.iter().copied();
        let mut next = || it.next().expect("one leaf per trainable tensor");
        let backbone = (0..self.backbone.blocks.len())
            .map(|_| BlockVars {
                kernel: next(),
                bias: next(),
                gamma: next(),
                beta: next(),
            })
            .collect();
        let mut affine = || AffineVars {
            weights: next(),
            bias: next(),
        };
        let vap = self.vap.as_ref().map(|_| affine());
        let cam = self.cam.as_ref().map(|_| affine());
        let psam = self.psam.as_ref().map(|p| PsamVars {
            levels: p.levels.iter().map(|_| affine()).collect(),
        });
        ModelVars {
            backbone,
            vap,
            cam,
            psam,
            leaves,
        }
    }
}

// ---------------------------------------------------------------------------
// Building blocks
// ---------------------------------------------------------------------------

fn pooled_rows(g: &mut Graph, x: Var, mode: PoolMode) -> Result<Var> {
    let pooled = g.global_pool(x, mode)?;
    let s = g.shape(pooled).to_vec();
    let (b, c) = (s[0], s[s.len() - 1]);
    g.reshape(pooled, &[b, c])
}

/// `â = σ(GAP(F_v)·W + b)`, one row per sample: `[B,H,W,C] → [B,A]`.
pub fn predict_attributes(g: &mut Graph, features: Var, vap: &AffineVars) -> Result<Var> {
    let pooled = pooled_rows(g, features, PoolMode::Avg)?;
    let z = g.linear(pooled, vap.weights, vap.bias)?;
    Ok(g.sigmoid(z))
}

/// `M_c = σ(MLP(GAP(F)) + MLP(GMP(F)))` with one shared layer; `[B,1,1,C]`.
pub fn channel_attention(g: &mut Graph, hybrid: Var, cam: &AffineVars) -> Result<Var> {
    let width = *g.shape(hybrid).last().unwrap();
    let expect = g.shape(cam.weights)[0];
    if width != expect {
        return shape_err(format!("channel attention input has {width} channels, expected {expect}"));
    }
    let b = g.shape(hybrid)[0];
    let avg = pooled_rows(g, hybrid, PoolMode::Avg)?;
    let max = pooled_rows(g, hybrid, PoolMode::Max)?;
    let za = g.linear(avg, cam.weights, cam.bias)?;
    let zm = g.linear(max, cam.weights, cam.bias)?;
    let z = g.add(za, zm)?;
    let m = g.sigmoid(z);
    let c = g.shape(m)[1];
    g.reshape(m, &[b, 1, 1, c])
}

/// `M_s = σ(Σ_i Conv_{K_i}([AvgPool_c(F'); MaxPool_c(F')]))`; `[B,H,W,1]`.
pub fn pyramid_spatial_attention(g: &mut Graph, hybrid: Var, psam: &PsamVars) -> Result<Var> {
    if psam.levels.is_empty() {
        return Err(Error::Config("pyramid spatial attention has no kernels".into()));
    }
    let avg = g.channel_pool(hybrid, PoolMode::Avg)?;
    let max = g.channel_pool(hybrid, PoolMode::Max)?;
    let pooled = g.concat_channels(&[avg, max])?;
    let mut total: Option<Var> = None;
    for level in &psam.levels {
        let map = g.conv2d(pooled, level.weights, Some(level.bias))?;
        total = Some(match total {
            None => map,
            Some(t) => g.add(t, map)?,
        });
    }
    Ok(g.sigmoid(total.expect("nonempty")))
}

/// Intermediate maps of one refinement.
#[derive(Clone, Copy, Debug)]
pub struct Refined {
    pub channel_refined: Var,
    pub refined: Var,
    pub channel_map: Option<Var>,
    pub spatial_map: Option<Var>,
}

/// Two-stage attribute-guided refinement of `[B,H,W,C]` features with
/// `[B,A]` attributes (or none). Missing attention stages pass features
/// through unchanged.
pub fn refine(
    g: &mut Graph,
    visual: Var,
    attributes: Option<Var>,
    cam: Option<&AffineVars>,
    psam: Option<&PsamVars>,
) -> Result<Refined> {
    let hybrid = match attributes {
        Some(a) => g.broadcast_concat(visual, a)?,
        None => visual,
    };
    let (channel_refined, channel_map) = match cam {
        Some(cam) => {
            let m = channel_attention(g, hybrid, cam)?;
            (g.mul(visual, m)?, Some(m))
        }
        None => (visual, None),
    };
    let (refined, spatial_map) = match psam {
        Some(psam) => {
            let hybrid2 = match attributes {
                Some(a) => g.broadcast_concat(channel_refined, a)?,
                None => channel_refined,
            };
            let m = pyramid_spatial_attention(g, hybrid2, psam)?;
            (g.mul(channel_refined, m)?, Some(m))
        }
        None => (channel_refined, None),
    };
    Ok(Refined {
        channel_refined,
        refined,
        channel_map,
        spatial_map,
    })
}

/// Per-class mean of support vectors `[S,C]` → prototypes `[N,C]`.
pub fn compute_prototypes(g: &mut Graph, support: Var, labels: &[usize], n_way: usize) -> Result<Var> {
    let s = g.shape(support)[0];
    if labels.len() != s {
        return shape_err(format!("{} labels for {s} support vectors", labels.len()));
    }
    let mut counts = vec![0usize; n_way];
    for &l in labels {
        if l >= n_way {
            return Err(Error::Contract(format!("support label {l} outside 0..{n_way}")));
        }
        counts[l] += 1;
    }
    if let Some(n) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Contract(format!("class {n} has no support samples")));
    }
    let avg = Tensor::from_fn(&[n_way, s], |i| {
        let (n, j) = (i / s, i % s);
        if labels[j] == n {
            1.0 / counts[n] as f64
        } else {
            0.0
        }
    });
    let avg = g.constant(avg);
    g.matmul(avg, support)
}

/// `p(n | q) = softmax_n(−‖q − p_n‖²)`: `[Q,C] × [N,C] → [Q,N]`.
pub fn classify(g: &mut Graph, queries: Var, prototypes: Var) -> Result<Var> {
    let logits = g.neg_sq_dist(queries, prototypes)?;
    Ok(g.softmax(logits))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

/// `−Σ_j log p(y_j | q_j)` (or its mean over queries).
pub fn loss_cls(g: &mut Graph, probs: Var, labels: &[usize], reduction: Reduction) -> Result<Var> {
    let scale = match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / labels.len().max(1) as f64,
    };
    g.nll(probs, labels, PROB_FLOOR, scale)
}

/// Mean squared error over every sample and attribute.
pub fn loss_attr(g: &mut Graph, predicted: Var, observed: Var) -> Result<Var> {
    let diff = g.sub(predicted, observed)?;
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

/// `L_cls + α·L_attr`.
pub fn loss_total(g: &mut Graph, cls: Var, attr: Option<Var>, alpha: f64) -> Result<Var> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("attribute loss weight must be a finite α ≥ 0, got {alpha}")));
    }
    match attr {
        Some(a) => {
            let weighted = g.scale(a, alpha);
            g.add(cls, weighted)
        }
        None => Ok(cls),
    }
}

// ---------------------------------------------------------------------------
// Episode forward pass
// ---------------------------------------------------------------------------

/// Dense inputs of one episode: support rows first, then queries.
#[derive(Clone, Debug)]
pub struct EpisodeBatch {
    pub images: Tensor,
    /// `[B, A]` dataset attributes (zeroed under `zero_attributes`).
    pub attributes: Tensor,
    pub n_way: usize,
    pub support_labels: Vec<usize>,
    pub query_labels: Vec<usize>,
}

impl EpisodeBatch {
    pub fn from_episode(corpus: &Corpus, episode: &Episode, zero_attributes: bool) -> Result<Self> {
        let ids: Vec<usize> = episode.support.iter().chain(&episode.query).copied().collect();
        let images: Vec<&Tensor> = ids.iter().map(|&i| &corpus.samples[i].image).collect();
        let a = corpus.num_attributes;
        let mut attrs = Vec::with_capacity(ids.len() * a);
        for &i in &ids {
            if zero_attributes {
                attrs.extend(std::iter::repeat_n(0.0, a));
            } else {
                attrs.extend_from_slice(corpus.samples[i].attributes.values());
            }
        }
        Ok(Self {
            images: Tensor::stack(&images)?,
            attributes: Tensor::new(&[ids.len(), a], attrs)?,
            n_way: episode.n_way,
            support_labels: episode.support_labels.clone(),
            query_labels: episode.query_labels.clone(),
        })
    }

    pub fn support_count(&self) -> usize {
        self.support_labels.len()
    }

    pub fn len(&self) -> usize {
        self.support_labels.len() + self.query_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            reduction: Reduction::Sum,
        }
    }
}

pub struct EpisodeOutput {
    pub loss: Var,
    pub loss_cls: Var,
    pub loss_attr: Option<Var>,
    /// `[Q, N]` class probabilities.
    pub probs: Var,
    /// `[B, A]` predicted attributes, when the predictor is enabled.
    pub predicted: Option<Var>,
    pub refined: Refined,
    pub stats: Vec<BatchStats>,
}

/// Runs the whole model on one episode.
pub fn forward_episode(
    g: &mut Graph,
    params: &ModelParams,
    vars: &ModelVars,
    batch: &EpisodeBatch,
    mode: Mode,
    loss: LossConfig,
) -> Result<EpisodeOutput> {
    let cfg = &params.config;
    let a = cfg.num_attributes;
    if batch.attributes.last_dim() != a {
        return shape_err(format!("episode has {} attributes, model expects {a}", batch.attributes.last_dim()));
    }
    let s = batch.support_count();
    let b = batch.len();
    let images = g.constant(batch.images.clone());
    let (visual, stats) = params.backbone.encode(g, &vars.backbone, images, mode)?;

    let predicted = match &vars.vap {
        Some(vap) => Some(predict_attributes(g, visual, vap)?),
        None => None,
    };

    let attention_attrs = if cfg.feeds_attention() {
        let support = g.constant(batch.attributes.row_range(0, s)?);
        let query = match predicted {
            Some(p) => g.slice_rows(p, s, b)?,
            None => g.constant(Tensor::zeros(&[b - s, a])),
        };
        Some(g.concat_rows(&[support, query])?)
    } else {
        None
    };

    let refined = refine(g, visual, attention_attrs, vars.cam.as_ref(), vars.psam.as_ref())?;
    let embeddings = pooled_rows(g, refined.refined, PoolMode::Avg)?;
    let support = g.slice_rows(embeddings, 0, s)?;
    let queries = g.slice_rows(embeddings, s, b)?;
    let protos = compute_prototypes(g, support, &batch.support_labels, batch.n_way)?;
    let probs = classify(g, queries, protos)?;
    let cls = loss_cls(g, probs, &batch.query_labels, loss.reduction)?;
    let attr = match predicted {
        Some(p) => {
            let target = g.constant(batch.attributes.clone());
            Some(loss_attr(g, p, target)?)
        }
        None => None,
    };
    let total = loss_total(g, cls, attr, loss.alpha)?;
    Ok(EpisodeOutput {
        loss: total,
        loss_cls: cls,
        loss_attr: attr,
        probs,
        predicted,
        refined,
        stats,
    })
}
