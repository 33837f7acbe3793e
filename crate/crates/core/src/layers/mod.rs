//! Neural building blocks: learnable filterbank, GRU/LSTM cells and their
//! bidirectional wrapper, additive attention pooling, two-branch CNN, and the
//! fully-connected pieces used for outputs, residuals and the shared head.
//!
//! Layers only hold [`ParamId`]s; values live in a [`ParameterStore`] and
//! forward passes record onto a [`Graph`].

mod cnn;
mod rnn;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Group, ParamId, ParamKind, ParameterStore};

pub use cnn::{BranchConfig, CnnBranch, CnnBranchPair, ConvSpec};
pub use rnn::{BiRnn, CellKind, GruCell, LstmCell, RecurrentBn, RnnCell, RnnState};

/// Epsilon added to variances inside batch normalization.
pub const BN_EPS: f64 = 1e-5;

/// Registers parameters with a common name prefix and group.
#[derive(Debug)]
pub struct ParamBuilder<'a> {
    store: &'a mut ParameterStore,
    rng: &'a mut ChaCha8Rng,
    zero_init: bool,
    prefix: String,
    group: Group,
}

impl<'a> ParamBuilder<'a> {
    /// With `zero_init` every learnable weight starts at zero.
    pub fn new(store: &'a mut ParameterStore, rng: &'a mut ChaCha8Rng, zero_init: bool) -> Self {
        Self {
            store,
            rng,
            zero_init,
            prefix: String::new(),
            group: Group::Epb,
        }
    }

    pub fn scope(&mut self, prefix: &str, group: Group) -> &mut Self {
        self.prefix = String::from(prefix);
        self.group = group;
        self
    }

    fn name(&self, local: &str) -> String {
        if self.prefix.is_empty() {
            String::from(local)
        } else {
            format!("{}.{}", self.prefix, local)
        }
    }

    /// Glorot-uniform matrix-like weight.
    pub fn glorot(
        &mut self,
        local: &str,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let value = if self.zero_init {
            vec![0.0; n]
        } else {
            let limit = Float::sqrt(6.0 / (fan_in + fan_out) as f64);
            (0..n)
                .map(|_| self.rng.random_range(-limit..limit))
                .collect()
        };
        let name = self.name(local);
        self.store
            .add(&name, shape, self.group, ParamKind::Learnable, value)
    }

    /// Learnable tensor filled with `fill` (or zero under zero-init).
    pub fn filled(&mut self, local: &str, shape: &[usize], fill: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let v = if self.zero_init { 0.0 } else { fill };
        let name = self.name(local);
        self.store
            .add(&name, shape, self.group, ParamKind::Learnable, vec![v; n])
    }

    /// Learnable tensor with explicit initial values (ignored under zero-init).
    pub fn values(&mut self, local: &str, shape: &[usize], value: Vec<f64>) -> ParamId {
        let value = if self.zero_init {
            vec![0.0; value.len()]
        } else {
            value
        };
        let name = self.name(local);
        self.store
            .add(&name, shape, self.group, ParamKind::Learnable, value)
    }

    /// Running mean (zeros) and running variance (ones) accumulators.
    pub fn running_stats(&mut self, local: &str, n: usize) -> (ParamId, ParamId) {
        let m = self.name(&format!("{local}.running_mean"));
        let v = self.name(&format!("{local}.running_var"));
        (
            self.store
                .add(&m, &[n], self.group, ParamKind::RunningMean, vec![0.0; n]),
            self.store
                .add(&v, &[n], self.group, ParamKind::RunningVar, vec![1.0; n]),
        )
    }
}

/// Affine map `x W + b` over the last axis of a `[N, in]` input.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        b: &mut ParamBuilder<'_>,
        local: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let weight = b.glorot(
            &format!("{local}.weight"),
            &[in_dim, out_dim],
            in_dim,
            out_dim,
        );
        let bias = bias.then(|| b.filled(&format!("{local}.bias"), &[out_dim], 0.0));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(Error::ShapeMismatch(format!(
                "linear layer expects [N, {}], got {:?}",
                self.in_dim, shape
            )));
        }
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w);
        Ok(match self.bias {
            Some(bias) => {
                let bv = g.param(store, bias);
                g.add_bias(y, bv)
            }
            None => y,
        })
    }
}

/// Batch normalization over the feature columns of `[N, F]`.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: Option<ParamId>,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(
        b: &mut ParamBuilder<'_>,
        local: &str,
        n: usize,
        gamma_init: f64,
        with_beta: bool,
    ) -> Self {
        let gamma = b.filled(&format!("{local}.gamma"), &[n], gamma_init);
        let beta = with_beta.then(|| b.filled(&format!("{local}.beta"), &[n], 0.0));
        let (running_mean, running_var) = b.running_stats(local, n);
        Self {
            gamma,
            beta,
            running_mean,
            running_var,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = self.beta.map(|b| g.param(store, b));
        g.batch_norm(
            store,
            x,
            gamma,
            beta,
            (self.running_mean, self.running_var),
            BN_EPS,
        )
    }
}

/// One learnable non-negative filterbank per input channel, applied along the
/// frequency axis of a time-frequency image. Non-negativity is enforced by a
/// sigmoid on the stored weights.
#[derive(Clone, Debug)]
pub struct FilterbankLayer {
    pub weights: Vec<ParamId>,
    pub n_freq: usize,
    pub n_filters: usize,
}

impl FilterbankLayer {
    pub fn new(
        b: &mut ParamBuilder<'_>,
        n_channels: usize,
        n_freq: usize,
        n_filters: usize,
    ) -> Self {
        let weights = (0..n_channels)
            .map(|c| {
                b.glorot(
                    &format!("filterbank.{c}"),
                    &[n_freq, n_filters],
                    n_freq,
                    n_filters,
                )
            })
            .collect();
        Self {
            weights,
            n_freq,
            n_filters,
        }
    }

    /// `image [N, T, F, C] -> [N, T, M * C]`, channel-major along the last
    /// axis (filters of channel 0 first).
    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, image: Var) -> Result<Var> {
        let shape = g.shape(image).to_vec();
        let c = self.weights.len();
        if shape.len() != 4 || shape[2] != self.n_freq || shape[3] != c {
            return Err(Error::ShapeMismatch(format!(
                "filterbank expects [N, T, {}, {}], got {:?}",
                self.n_freq, c, shape
            )));
        }
        let (n, t) = (shape[0], shape[1]);
        let mut outs = Vec::with_capacity(c);
        for (ch, &wid) in self.weights.iter().enumerate() {
            let plane = if c == 1 {
                image
            } else {
                g.slice(image, 3, ch, 1)
            };
            let rows = g.reshape(plane, &[n * t, self.n_freq]);
            let raw = g.param(store, wid);
            let w = g.sigmoid(raw);
            outs.push(g.matmul(rows, w));
        }
        let y = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat(&outs, 1)
        };
        Ok(g.reshape(y, &[n, t, self.n_filters * c]))
    }
}

/// Additive attention over time: `a_t = softmax_t(tanh(h_t W + b) · u)`,
/// output `Σ_t a_t h_t`.
#[derive(Clone, Debug)]
pub struct AttentionPool {
    pub proj: Linear,
    pub context: ParamId,
    pub attention_size: usize,
}

impl AttentionPool {
    pub fn new(
        b: &mut ParamBuilder<'_>,
        local: &str,
        in_dim: usize,
        attention_size: usize,
    ) -> Self {
        let proj = Linear::new(b, &format!("{local}.proj"), in_dim, attention_size, true);
        let context = b.glorot(
            &format!("{local}.context"),
            &[attention_size, 1],
            attention_size,
            1,
        );
        Self {
            proj,
            context,
            attention_size,
        }
    }

    /// `h [N, T, D] -> ([N, D], weights [N, T])`.
    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, h: Var) -> Result<(Var, Var)> {
        let shape = g.shape(h).to_vec();
        if shape.len() != 3 || shape[2] != self.proj.in_dim {
            return Err(Error::ShapeMismatch(format!("attention input {shape:?}")));
        }
        let (n, t, d) = (shape[0], shape[1], shape[2]);
        let rows = g.reshape(h, &[n * t, d]);
        let p = self.proj.forward(g, store, rows)?;
        let p = g.tanh(p);
        let u = g.param(store, self.context);
        let scores = g.matmul(p, u);
        let scores = g.reshape(scores, &[n, t]);
        let weights = g.softmax(scores);
        let weighted = g.mul_prefix(h, weights);
        Ok((g.sum_axis(weighted, 1), weights))
    }
}

/// Splits `[N, T, D]` into `T` tensors of shape `[N, D]`.
pub fn unstack_time(g: &mut Graph, x: Var) -> Vec<Var> {
    let shape = g.shape(x).to_vec();
    let (n, t, d) = (shape[0], shape[1], shape[2]);
    (0..t)
        .map(|i| {
            let s = g.slice(x, 1, i, 1);
            g.reshape(s, &[n, d])
        })
        .collect()
}

/// Stacks `T` tensors of shape `[N, D]` into `[N, T, D]`.
pub fn stack_time(g: &mut Graph, xs: &[Var]) -> Var {
    let parts: Vec<Var> = xs
        .iter()
        .map(|&v| {
            let s = g.shape(v).to_vec();
            g.reshape(v, &[s[0], 1, s[1]])
        })
        .collect();
    if parts.len() == 1 {
        parts[0]
    } else {
        g.concat(&parts, 1)
    }
}

/// Output of a bidirectional layer: `o_l = W [h_b(l) ⊕ h_f(l)] + b`
/// for every position, as one `[N * L, out]` matrix (row `n * L + l`).
pub fn birnn_output(
    g: &mut Graph,
    store: &ParameterStore,
    hf: &[Var],
    hb: &[Var],
    out: &Linear,
) -> Result<Var> {
    let joined = concat_directions(g, hf, hb)?;
    let shape = g.shape(joined).to_vec();
    let rows = g.reshape(joined, &[shape[0] * shape[1], shape[2]]);
    out.forward(g, store, rows)
}

/// `[N, L, 2H]` with the backward state first at every position.
pub fn concat_directions(g: &mut Graph, hf: &[Var], hb: &[Var]) -> Result<Var> {
    if hf.is_empty() || hf.len() != hb.len() {
        return Err(Error::ShapeMismatch(format!(
            "direction lengths {} and {}",
            hf.len(),
            hb.len()
        )));
    }
    let f = stack_time(g, hf);
    let b = stack_time(g, hb);
    Ok(g.concat(&[b, f], 2))
}

/// `o + FC(x)` with one FC shared by every position. `None` disables the
/// residual path.
pub fn residual_combine(
    g: &mut Graph,
    store: &ParameterStore,
    x: Var,
    o: Var,
    fc: Option<&Linear>,
) -> Result<Var> {
    let Some(fc) = fc else { return Ok(o) };
    let o_dim = g.shape(o).get(1).copied();
    if o_dim != Some(fc.out_dim) {
        return Err(Error::ShapeMismatch(format!(
            "residual FC produces {} features but the sequence output has {:?}",
            fc.out_dim, o_dim
        )));
    }
    let r = fc.forward(g, store, x)?;
    Ok(g.add(o, r))
}

/// Shared classification head: the same weights at every sequence index.
pub fn shared_softmax(g: &mut Graph, store: &ParameterStore, o: Var, head: &Linear) -> Result<Var> {
    let logits = head.forward(g, store, o)?;
    Ok(g.softmax(logits))
}

#[cfg(test)]
mod tests;
