//! The two sequence-to-sequence networks and the sequence loss.
//!
//! Both networks share one layout. The EPB maps every epoch of a sequence to a
//! feature vector `x_l` with the same weights at every index. A biRNN then
//! produces `o_l = W_ho [h_b(l) ⊕ h_f(l)] + b_o`, optionally plus a residual
//! FC of `x_l`, and one softmax head classifies every position.
//!
//! * SeqSleepNet+ reads normalized log-power images `[T, F, C]`. Its EPB is
//!   a filterbank per channel, a biGRU over frames and attention pooling, and
//!   its SPB is a biGRU without residual.
//! * DeepSleepNet+ reads raw epochs `[n, C]`. Its EPB is a two-branch CNN and
//!   its SPB two stacked biLSTMs with a residual FC.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mode, PaddingMode, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{
    birnn_output, concat_directions, residual_combine, shared_softmax, unstack_time, AttentionPool,
    BiRnn, BranchConfig, CellKind, CnnBranchPair, ConvSpec, FilterbankLayer, Linear, ParamBuilder,
    RecurrentBn,
};
use crate::params::{Group, ParameterStore};
use crate::N_CLASSES;

/// Probabilities are floored at this value before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    SeqSleepNetPlus,
    DeepSleepNetPlus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeqSleepNetConfig {
    pub n_frames: usize,
    pub n_freq: usize,
    pub n_filters: usize,
    pub epb_hidden: usize,
    pub attention_size: usize,
    pub spb_hidden: usize,
    /// Size of `o_l`.
    pub output_size: usize,
    pub recurrent_bn: RecurrentBn,
}

impl Default for SeqSleepNetConfig {
    fn default() -> Self {
        Self {
            n_frames: 29,
            n_freq: 129,
            n_filters: 32,
            epb_hidden: 64,
            attention_size: 64,
            spb_hidden: 64,
            output_size: 128,
            recurrent_bn: RecurrentBn::PreActivation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeepSleepNetConfig {
    pub epoch_samples: usize,
    pub branches: Vec<BranchConfig>,
    pub padding: PaddingMode,
    pub spb_hidden: usize,
    pub spb_layers: usize,
    /// Size of `o_l` and of the residual FC.
    pub output_size: usize,
}

impl Default for DeepSleepNetConfig {
    fn default() -> Self {
        let conv = |kernel, stride, filters| ConvSpec {
            kernel,
            stride,
            filters,
        };
        Self {
            epoch_samples: 3000,
            branches: vec![
                BranchConfig {
                    first: conv(50, 6, 64),
                    first_pool: 8,
                    rest: vec![conv(8, 1, 128); 3],
                    last_pool: 4,
                },
                BranchConfig {
                    first: conv(400, 50, 64),
                    first_pool: 4,
                    rest: vec![conv(6, 1, 128); 3],
                    last_pool: 2,
                },
            ],
            padding: PaddingMode::Same,
            spb_hidden: 512,
            spb_layers: 2,
            output_size: 1024,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Sequence length `L`.
    pub seq_len: usize,
    pub n_channels: usize,
    #[serde(default = "default_n_classes")]
    pub n_classes: usize,
    pub residual_enabled: bool,
    /// L2 coefficient `λ`.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Dropout rate at the EPB and SPB outputs.
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default)]
    pub seqsleepnet: SeqSleepNetConfig,
    #[serde(default)]
    pub deepsleepnet: DeepSleepNetConfig,
}

fn default_n_classes() -> usize {
    N_CLASSES
}

fn default_lambda() -> f64 {
    1e-3
}

fn default_dropout() -> f64 {
    0.25
}

impl ModelConfig {
    pub fn seqsleepnet_plus(n_channels: usize) -> Self {
        Self {
            kind: ModelKind::SeqSleepNetPlus,
            seq_len: 20,
            n_channels,
            n_classes: N_CLASSES,
            residual_enabled: false,
            lambda: default_lambda(),
            dropout: default_dropout(),
            seqsleepnet: SeqSleepNetConfig::default(),
            deepsleepnet: DeepSleepNetConfig::default(),
        }
    }

    pub fn deepsleepnet_plus(n_channels: usize) -> Self {
        Self {
            kind: ModelKind::DeepSleepNetPlus,
            residual_enabled: true,
            ..Self::seqsleepnet_plus(n_channels)
        }
    }

    /// Small variant for desk-scale experiments: hidden sizes of 8, short
    /// sequences, few filters. Input shapes stay at their full-size defaults.
    pub fn tiny(kind: ModelKind, n_channels: usize, seq_len: usize) -> Self {
        let mut c = match kind {
            ModelKind::SeqSleepNetPlus => Self::seqsleepnet_plus(n_channels),
            ModelKind::DeepSleepNetPlus => Self::deepsleepnet_plus(n_channels),
        };
        c.seq_len = seq_len;
        c.seqsleepnet = SeqSleepNetConfig {
            n_filters: 8,
            epb_hidden: 8,
            attention_size: 8,
            spb_hidden: 8,
            output_size: 8,
            ..SeqSleepNetConfig::default()
        };
        let conv = |kernel, stride, filters| ConvSpec {
            kernel,
            stride,
            filters,
        };
        c.deepsleepnet = DeepSleepNetConfig {
            branches: vec![
                BranchConfig {
                    first: conv(50, 6, 4),
                    first_pool: 8,
                    rest: vec![conv(8, 1, 4)],
                    last_pool: 4,
                },
                BranchConfig {
                    first: conv(400, 50, 4),
                    first_pool: 4,
                    rest: vec![conv(6, 1, 4)],
                    last_pool: 2,
                },
            ],
            spb_hidden: 8,
            spb_layers: 2,
            output_size: 8,
            ..DeepSleepNetConfig::default()
        };
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: alloc::string::String| Err(Error::InvalidConfig(msg));
        if self.seq_len == 0 || self.n_channels == 0 {
            return bad(format!(
                "sequence length {} and channel count {} must be positive",
                self.seq_len, self.n_channels
            ));
        }
        if self.n_classes != N_CLASSES {
            return bad(format!(
                "n_classes must be {N_CLASSES}, got {}",
                self.n_classes
            ));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        match self.kind {
            ModelKind::SeqSleepNetPlus => {
                if self.residual_enabled {
                    return bad("SeqSleepNetPlus has no residual connection".into());
                }
                let s = &self.seqsleepnet;
                let sizes = [
                    s.n_frames,
                    s.n_freq,
                    s.n_filters,
                    s.epb_hidden,
                    s.attention_size,
                    s.spb_hidden,
                    s.output_size,
                ];
                if sizes.contains(&0) {
                    return bad(format!("SeqSleepNetPlus sizes must be positive: {s:?}"));
                }
            }
            ModelKind::DeepSleepNetPlus => {
                if !self.residual_enabled {
                    return bad("DeepSleepNetPlus requires the residual connection".into());
                }
                let d = &self.deepsleepnet;
                if d.branches.is_empty()
                    || d.spb_layers == 0
                    || d.spb_hidden == 0
                    || d.output_size == 0
                {
                    return bad(
                        "DeepSleepNetPlus needs branches, SPB layers and positive sizes".into(),
                    );
                }
                let degenerate = d.branches.iter().any(|b| {
                    let convs = core::iter::once(&b.first).chain(&b.rest);
                    b.first_pool == 0
                        || b.last_pool == 0
                        || convs
                            .clone()
                            .any(|c| c.kernel == 0 || c.stride == 0 || c.filters == 0)
                        || b.output_dim(d.epoch_samples, d.padding).is_none()
                });
                if degenerate {
                    return bad(format!(
                        "a CNN branch is degenerate or produces no output for {} samples",
                        d.epoch_samples
                    ));
                }
            }
        }
        Ok(())
    }

    /// Shape of one epoch of input: `[T, F, C]` or `[n, C]`.
    pub fn epoch_shape(&self) -> Vec<usize> {
        match self.kind {
            ModelKind::SeqSleepNetPlus => vec![
                self.seqsleepnet.n_frames,
                self.seqsleepnet.n_freq,
                self.n_channels,
            ],
            ModelKind::DeepSleepNetPlus => vec![self.deepsleepnet.epoch_samples, self.n_channels],
        }
    }

    /// Size of the epoch feature vector `x_l`.
    pub fn epoch_feature_dim(&self) -> usize {
        match self.kind {
            ModelKind::SeqSleepNetPlus => 2 * self.seqsleepnet.epb_hidden,
            ModelKind::DeepSleepNetPlus => {
                let d = &self.deepsleepnet;
                d.branches
                    .iter()
                    .filter_map(|b| b.output_dim(d.epoch_samples, d.padding))
                    .sum()
            }
        }
    }

    fn output_size(&self) -> usize {
        match self.kind {
            ModelKind::SeqSleepNetPlus => self.seqsleepnet.output_size,
            ModelKind::DeepSleepNetPlus => self.deepsleepnet.output_size,
        }
    }
}

#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
enum Epb {
    Seq {
        filterbank: FilterbankLayer,
        rnn: BiRnn,
        attention: AttentionPool,
    },
    Deep {
        cnn: CnnBranchPair,
    },
}

#[derive(Clone, Debug)]
struct Spb {
    rnns: Vec<BiRnn>,
    output: Linear,
    residual: Option<Linear>,
}

/// Intermediate quantities of one forward pass; rows are ordered `b·L + l`.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `x_l`, `[B·L, D]`.
    pub features: Var,
    /// `o_l` after the residual and dropout, `[B·L, O]`.
    pub outputs: Var,
    /// `ŷ_l`, `[B·L, 5]`.
    pub probs: Var,
}

/// A built network: its configuration, its parameters and the layer wiring.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParameterStore,
    epb: Epb,
    spb: Spb,
    head: Linear,
}

impl Model {
    /// Builds a model with seeded Glorot initialization.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        build_model(config, seed, false)
    }

    /// Builds a model whose learnable weights are all zero.
    pub fn zeroed(config: &ModelConfig) -> Result<Self> {
        build_model(config, 0, true)
    }

    /// Rebuilds the wiring for `config` and loads parameter values from `store`.
    pub fn from_store(config: &ModelConfig, store: &ParameterStore) -> Result<Self> {
        let mut m = build_model(config, 0, true)?;
        m.store.load_values_from(store)?;
        Ok(m)
    }

    /// Evaluates the network on `input` of shape `[B, L, ..epoch_shape]`.
    pub fn forward(&self, g: &mut Graph, input: &Tensor) -> Result<ForwardOutput> {
        let (b, l) = self.check_input(input)?;
        let rows = b * l;
        let x_in = g.constant(input.clone());
        let p = self.config.dropout;
        let store = &self.store;

        let x = match &self.epb {
            Epb::Seq {
                filterbank,
                rnn,
                attention,
            } => {
                let mut shape = vec![rows];
                shape.extend_from_slice(&input.shape()[2..]);
                let images = g.reshape(x_in, &shape);
                let fb = filterbank.forward(g, store, images)?;
                let frames = unstack_time(g, fb);
                let (hf, hb) = rnn.forward(g, store, &frames)?;
                let h = concat_directions(g, &hf, &hb)?;
                attention.forward(g, store, h)?.0
            }
            Epb::Deep { cnn } => {
                let s = input.shape();
                let raw = g.reshape(x_in, &[rows, s[2], s[3]]);
                cnn.forward(g, store, raw)?
            }
        };
        let x = g.dropout(x, p);
        let d = g.shape(x)[1];

        let seq = g.reshape(x, &[b, l, d]);
        let mut steps = unstack_time(g, seq);
        let (last, inner) = self.spb.rnns.split_last().expect("at least one SPB layer");
        for rnn in inner {
            let (hf, hb) = rnn.forward(g, store, &steps)?;
            steps = hb
                .iter()
                .zip(&hf)
                .map(|(&bk, &fw)| g.concat(&[bk, fw], 1))
                .collect();
        }
        let (hf, hb) = last.forward(g, store, &steps)?;
        let o = birnn_output(g, store, &hf, &hb, &self.spb.output)?;
        let o = residual_combine(g, store, x, o, self.spb.residual.as_ref())?;
        let o = g.dropout(o, p);
        let probs = shared_softmax(g, store, o, &self.head)?;
        Ok(ForwardOutput {
            features: x,
            outputs: o,
            probs,
        })
    }

    /// Eval-mode class posteriors, one 5-vector per `(b, l)` in row order.
    pub fn predict(&self, input: &Tensor) -> Result<Vec<[f64; N_CLASSES]>> {
        let mut g = Graph::new(Mode::Eval, 0);
        let out = self.forward(&mut g, input)?;
        Ok(g.value(out.probs)
            .data()
            .chunks_exact(N_CLASSES)
            .map(|c| {
                let mut p = [0.0; N_CLASSES];
                p.copy_from_slice(c);
                p
            })
            .collect())
    }

    fn check_input(&self, input: &Tensor) -> Result<(usize, usize)> {
        let s = input.shape();
        let epoch = self.config.epoch_shape();
        if s.len() != 2 + epoch.len() || s[2..] != epoch[..] || s[0] == 0 || s[1] == 0 {
            return Err(Error::ShapeMismatch(format!(
                "model input must be [B, L, {epoch:?}], got {s:?}"
            )));
        }
        Ok((s[0], s[1]))
    }
}

/// Builds the parameter store and wiring for `config`. With `zero_init`
/// every learnable weight starts at zero (the head then emits uniform
/// posteriors).
pub fn build_model(config: &ModelConfig, seed: u64, zero_init: bool) -> Result<Model> {
    config.validate()?;
    let mut store = ParameterStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = ParamBuilder::new(&mut store, &mut rng, zero_init);
    let c = config.n_channels;
    let feat = config.epoch_feature_dim();
    let out = config.output_size();

    let (epb, spb) = match config.kind {
        ModelKind::SeqSleepNetPlus => {
            let s = &config.seqsleepnet;
            b.scope("epb", Group::Epb);
            let filterbank = FilterbankLayer::new(&mut b, c, s.n_freq, s.n_filters);
            let rnn = BiRnn::new(
                &mut b,
                "birnn",
                CellKind::Gru,
                s.n_filters * c,
                s.epb_hidden,
                s.recurrent_bn,
            );
            let attention =
                AttentionPool::new(&mut b, "attention", 2 * s.epb_hidden, s.attention_size);
            b.scope("spb", Group::Spb);
            let spb_rnn = BiRnn::new(
                &mut b,
                "birnn",
                CellKind::Gru,
                feat,
                s.spb_hidden,
                s.recurrent_bn,
            );
            let output = Linear::new(&mut b, "output", 2 * s.spb_hidden, out, true);
            (
                Epb::Seq {
                    filterbank,
                    rnn,
                    attention,
                },
                Spb {
                    rnns: vec![spb_rnn],
                    output,
                    residual: None,
                },
            )
        }
        ModelKind::DeepSleepNetPlus => {
            let d = &config.deepsleepnet;
            b.scope("epb", Group::Epb);
            let cnn = CnnBranchPair::new(&mut b, c, &d.branches, d.padding);
            b.scope("spb", Group::Spb);
            let rnns = (0..d.spb_layers)
                .map(|i| {
                    let input = if i == 0 { feat } else { 2 * d.spb_hidden };
                    BiRnn::new(
                        &mut b,
                        &format!("bilstm{i}"),
                        CellKind::Lstm,
                        input,
                        d.spb_hidden,
                        RecurrentBn::Off,
                    )
                })
                .collect();
            let output = Linear::new(&mut b, "output", 2 * d.spb_hidden, out, true);
            let residual = Some(Linear::new(&mut b, "residual", feat, out, true));
            (
                Epb::Deep { cnn },
                Spb {
                    rnns,
                    output,
                    residual,
                },
            )
        }
    };
    b.scope("softmax", Group::Softmax);
    let head = Linear::new(&mut b, "head", out, N_CLASSES, true);
    Ok(Model {
        config: config.clone(),
        store,
        epb,
        spb,
        head,
    })
}

fn one_hot_targets(targets: &[usize], rows: usize, seq_len: usize) -> Result<Tensor> {
    if targets.len() != rows {
        return Err(Error::ShapeMismatch(format!(
            "{} targets for {rows} posterior rows",
            targets.len()
        )));
    }
    if seq_len == 0 || !rows.is_multiple_of(seq_len) {
        return Err(Error::ShapeMismatch(format!(
            "{rows} rows do not form sequences of length {seq_len}"
        )));
    }
    let mut y = vec![0.0; rows * N_CLASSES];
    for (r, &t) in targets.iter().enumerate() {
        if t >= N_CLASSES {
            return Err(Error::InvalidArgument(format!(
                "target class {t} at row {r}"
            )));
        }
        y[r * N_CLASSES + t] = 1.0;
    }
    Tensor::new(&[rows, N_CLASSES], y)
}

/// Sequence classification loss on the tape:
/// `E = -(1/L) Σ_n Σ_l y_l·log ŷ_l + (λ/2)‖θ‖²`, where `θ` covers every
/// learnable parameter of `store` (running statistics excluded). With
/// `batch_mean` the data term is also divided by the number of sequences.
pub fn sequence_loss(
    g: &mut Graph,
    store: &ParameterStore,
    probs: Var,
    targets: &[usize],
    seq_len: usize,
    lambda: f64,
    batch_mean: bool,
) -> Result<Var> {
    let shape = g.shape(probs).to_vec();
    if shape.len() != 2 || shape[1] != N_CLASSES {
        return Err(Error::ShapeMismatch(format!(
            "posteriors must be [R, 5], got {shape:?}"
        )));
    }
    let y = one_hot_targets(targets, shape[0], seq_len)?;
    let n_seq = shape[0] / seq_len;
    let y = g.constant(y);
    let lp = g.log_floor(probs, LOG_FLOOR);
    let picked = g.mul(lp, y);
    let total = g.sum(picked);
    let denom = if batch_mean {
        (seq_len * n_seq) as f64
    } else {
        seq_len as f64
    };
    let data = g.scale(total, -1.0 / denom);
    if lambda == 0.0 {
        return Ok(data);
    }
    let squares: Vec<Var> = store
        .iter()
        .filter(|(_, p)| p.is_learnable())
        .map(|(id, _)| {
            let v = g.param(store, id);
            let flat = g.reshape(v, &[g.shape(v).iter().product()]);
            g.sum_squares(flat)
        })
        .collect();
    let mut reg = squares[0];
    for &s in &squares[1..] {
        reg = g.add(reg, s);
    }
    let reg = g.scale(reg, lambda / 2.0);
    Ok(g.add(data, reg))
}

/// The same loss evaluated directly on plain numbers. `probs` holds one
/// 5-vector per row, rows ordered `n·L + l`; `sq_norm` is `‖θ‖²`.
pub fn sequence_loss_value(
    probs: &[f64],
    targets: &[usize],
    seq_len: usize,
    sq_norm: f64,
    lambda: f64,
    batch_mean: bool,
) -> Result<f64> {
    if !probs.len().is_multiple_of(N_CLASSES) {
        return Err(Error::ShapeMismatch(format!(
            "{} posterior values",
            probs.len()
        )));
    }
    let rows = probs.len() / N_CLASSES;
    one_hot_targets(targets, rows, seq_len)?;
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(r, &t)| libm::log(probs[r * N_CLASSES + t].max(LOG_FLOOR)))
        .sum();
    let denom = if batch_mean {
        rows as f64
    } else {
        seq_len as f64
    };
    Ok(-total / denom + 0.5 * lambda * sq_norm)
}
