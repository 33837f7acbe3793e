use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{BatchNorm, ParamBuilder};
use crate::autodiff::{Graph, PaddingMode, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParameterStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub filters: usize,
}

/// One CNN branch: a first (wide, strided) convolution followed by a pool,
/// then a stack of narrow convolutions followed by a second pool. Every
/// convolution is followed by batch normalization and a rectifier.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchConfig {
    pub first: ConvSpec,
    pub first_pool: usize,
    pub rest: Vec<ConvSpec>,
    pub last_pool: usize,
}

fn out_len(len: usize, window: usize, stride: usize, padding: PaddingMode) -> Option<usize> {
    match padding {
        PaddingMode::Same => Some(len.div_ceil(stride)),
        PaddingMode::Valid => (len >= window).then(|| (len - window) / stride + 1),
    }
}

impl BranchConfig {
    fn layers(&self) -> impl Iterator<Item = &ConvSpec> {
        core::iter::once(&self.first).chain(self.rest.iter())
    }

    /// Flattened output size for an epoch of `epoch_len` samples.
    pub fn output_dim(&self, epoch_len: usize, padding: PaddingMode) -> Option<usize> {
        let mut t = out_len(epoch_len, self.first.kernel, self.first.stride, padding)?;
        t = out_len(t, self.first_pool, self.first_pool, padding)?;
        for c in &self.rest {
            t = out_len(t, c.kernel, c.stride, padding)?;
        }
        t = out_len(t, self.last_pool, self.last_pool, padding)?;
        let filters = self.rest.last().unwrap_or(&self.first).filters;
        (t > 0).then_some(t * filters)
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    kernel: ParamId,
    stride: usize,
    filters: usize,
    bn: BatchNorm,
}

#[derive(Clone, Debug)]
pub struct CnnBranch {
    config: BranchConfig,
    blocks: Vec<ConvBlock>,
}

impl CnnBranch {
    pub fn new(
        b: &mut ParamBuilder<'_>,
        local: &str,
        in_channels: usize,
        config: &BranchConfig,
    ) -> Self {
        let mut c_in = in_channels;
        let blocks = config
            .layers()
            .enumerate()
            .map(|(i, spec)| {
                let kernel = b.glorot(
                    &format!("{local}.conv{i}.kernel"),
                    &[spec.kernel, c_in, spec.filters],
                    spec.kernel * c_in,
                    spec.kernel * spec.filters,
                );
                let bn = BatchNorm::new(b, &format!("{local}.conv{i}.bn"), spec.filters, 1.0, true);
                c_in = spec.filters;
                ConvBlock {
                    kernel,
                    stride: spec.stride,
                    filters: spec.filters,
                    bn,
                }
            })
            .collect();
        Self {
            config: config.clone(),
            blocks,
        }
    }

    /// `x [N, T, C] -> [N, D]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        x: Var,
        padding: PaddingMode,
    ) -> Result<Var> {
        let mut h = x;
        for (i, block) in self.blocks.iter().enumerate() {
            let k = g.param(store, block.kernel);
            h = g.conv1d(h, k, block.stride, padding)?;
            let s = g.shape(h).to_vec();
            let rows = g.reshape(h, &[s[0] * s[1], s[2]]);
            let rows = block.bn.forward(g, store, rows)?;
            let rows = g.relu(rows);
            h = g.reshape(rows, &s);
            if i == 0 {
                let p = self.config.first_pool;
                h = g.maxpool1d(h, p, p, padding)?;
            }
        }
        let p = self.config.last_pool;
        h = g.maxpool1d(h, p, p, padding)?;
        let s = g.shape(h).to_vec();
        debug_assert_eq!(s[2], self.blocks.last().map(|b| b.filters).unwrap_or(0));
        Ok(g.reshape(h, &[s[0], s[1] * s[2]]))
    }
}

/// Parallel CNN branches whose flattened outputs are concatenated into one
/// epoch feature vector.
#[derive(Clone, Debug)]
pub struct CnnBranchPair {
    pub branches: Vec<CnnBranch>,
    pub padding: PaddingMode,
}

impl CnnBranchPair {
    pub fn new(
        b: &mut ParamBuilder<'_>,
        in_channels: usize,
        configs: &[BranchConfig],
        padding: PaddingMode,
    ) -> Self {
        let branches = configs
            .iter()
            .enumerate()
            .map(|(i, c)| CnnBranch::new(b, &format!("cnn.branch{i}"), in_channels, c))
            .collect();
        Self { branches, padding }
    }

    /// Smallest accepted epoch length: the widest first-layer kernel.
    pub fn min_epoch_len(&self) -> usize {
        self.branches
            .iter()
            .map(|b| b.config.first.kernel)
            .max()
            .unwrap_or(1)
    }

    pub fn output_dim(&self, epoch_len: usize) -> Option<usize> {
        self.branches
            .iter()
            .map(|b| b.config.output_dim(epoch_len, self.padding))
            .sum()
    }

    /// `raw [N, n, C] -> x [N, D]`.
    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, raw: Var) -> Result<Var> {
        let len = g.shape(raw)[1];
        if len < self.min_epoch_len() {
            return Err(Error::ShapeMismatch(format!(
                "epoch of {len} samples is shorter than the first-layer receptive field {}",
                self.min_epoch_len()
            )));
        }
        let outs = self
            .branches
            .iter()
            .map(|b| b.forward(g, store, raw, self.padding))
            .collect::<Result<Vec<_>>>()?;
        Ok(if outs.len() == 1 {
            outs[0]
        } else {
            g.concat(&outs, 1)
        })
    }
}
