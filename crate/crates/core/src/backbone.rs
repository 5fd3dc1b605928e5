//! Four-block convolutional encoder: each block is a 3×3 same-padded
//! convolution, per-channel batch normalisation, ReLU and 2×2 max pooling.

use rand::Rng;

use crate::error::{shape_err, Result};
pub use crate::graph::BatchStats;
use crate::graph::{Graph, Var};
use crate::tensor::{he_uniform, Tensor};

pub const BLOCKS: usize = 4;
pub const KERNEL: usize = 3;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Whether normalisation uses batch statistics or the frozen running ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub blocks: Vec<ConvBlock>,
}

#[derive(Clone, Debug)]
pub struct BlockVars {
    pub kernel: Var,
    pub bias: Var,
    pub gamma: Var,
    pub beta: Var,
}

impl BackboneParams {
    pub fn init(in_channels: usize, channels: usize, rng: &mut impl Rng) -> Self {
        let blocks = (0..BLOCKS)
            .map(|i| {
                let cin = if i == 0 { in_channels } else { channels };
                ConvBlock {
                    kernel: he_uniform(&[KERNEL, KERNEL, cin, channels], KERNEL * KERNEL * cin, rng),
                    bias: Tensor::zeros(&[channels]),
                    gamma: Tensor::full(&[channels], 1.0),
                    beta: Tensor::zeros(&[channels]),
                    running_mean: Tensor::zeros(&[channels]),
                    running_var: Tensor::full(&[channels], 1.0),
                }
            })
            .collect();
        Self { blocks }
    }

    pub fn channels(&self) -> usize {
        self.blocks[0].kernel.shape()[3]
    }

    /// Spatial extent of the feature map for a square input of `size`.
    pub fn output_extent(size: usize) -> usize {
        size >> BLOCKS
    }

    pub fn bind(&self, g: &mut Graph) -> Vec<BlockVars> {
        self.blocks
            .iter()
            .map(|b| BlockVars {
                kernel: g.param(b.kernel.clone()),
                bias: g.param(b.bias.clone()),
                gamma: g.param(b.gamma.clone()),
                beta: g.param(b.beta.clone()),
            })
            .collect()
    }

    /// Folds one training batch's statistics into the running estimates.
    pub fn update_running(&mut self, stats: &[BatchStats]) {
        for (block, s) in self.blocks.iter_mut().zip(stats) {
            let unbias = if s.count > 1 {
                s.count as f64 / (s.count - 1) as f64
            } else {
                1.0
            };
            for (r, m) in block.running_mean.data_mut().iter_mut().zip(&s.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            for (r, v) in block.running_var.data_mut().iter_mut().zip(&s.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
            }
        }
    }

    /// Maps `[B,H,W,3]` images to `[B,H/16,W/16,C]` features. In training
    /// mode also returns each block's batch statistics.
    pub fn encode(
        &self,
        g: &mut Graph,
        vars: &[BlockVars],
        images: Var,
        mode: Mode,
    ) -> Result<(Var, Vec<BatchStats>)> {
        let shape = g.shape(images).to_vec();
        let div = 1 << BLOCKS;
        if shape.len() != 4 || shape[1] % div != 0 || shape[2] % div != 0 {
            return shape_err(format!(
                "encoder input {shape:?} must be B×H×W×C with H and W divisible by {div}"
            ));
        }
        let mut x = images;
        let mut stats = Vec::with_capacity(BLOCKS);
        for (block, v) in self.blocks.iter().zip(vars) {
            let conv = g.conv2d(x, v.kernel, Some(v.bias))?;
            let normed = match mode {
                Mode::Train => {
                    let (y, s) = g.batch_norm(conv, v.gamma, v.beta, BN_EPS)?;
                    stats.push(s);
                    y
                }
                Mode::Eval => {
                    let c = block.gamma.len();
                    let scale: Vec<f64> = (0..c)
                        .map(|i| block.gamma.data()[i] / (block.running_var.data()[i] + BN_EPS).sqrt())
                        .collect();
                    let shift: Vec<f64> = (0..c)
                        .map(|i| block.beta.data()[i] - block.running_mean.data()[i] * scale[i])
                        .collect();
                    let s = g.constant(Tensor::new(&[c], scale)?);
                    let t = g.constant(Tensor::new(&[c], shift)?);
                    let y = g.mul(conv, s)?;
                    g.add(y, t)?
                }
            };
            let act = g.relu(normed);
            x = g.max_pool2(act)?;
        }
        Ok((x, stats))
    }
}
