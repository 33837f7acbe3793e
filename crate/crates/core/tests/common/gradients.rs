//! Gradient-check suites: reports per primitive, layer and model, shared by
//! the gradient tests and the acceptance run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seqsleep_core::autodiff::{Graph, Mode, PaddingMode, Tensor, Var};
use seqsleep_core::layers::*;
use seqsleep_core::models::{sequence_loss, Model, ModelConfig, ModelKind};
use seqsleep_core::params::{Group, ParameterStore};

use super::{check, rand_tensor, FdReport};

pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;

pub type Suite = Vec<(String, FdReport)>;

/// Every primitive and layer suite.
pub fn all_primitives() -> Suite {
    let mut out = elementwise_and_matrix_ops();
    out.extend(structural_ops());
    out.extend(convolution_and_pooling());
    out.extend(dense_layers());
    out.extend(recurrent_layers());
    out.extend(cnn_branches());
    out
}

fn inputs(seed: u64, shapes: &[&[usize]]) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes
        .iter()
        .map(|s| rand_tensor(&mut rng, s, 1.0))
        .collect()
}

fn op(out: &mut Suite, name: &str, shapes: &[&[usize]], f: impl Fn(&mut Graph, &[Var]) -> Var) {
    let store = ParameterStore::new();
    let r = check(
        &store,
        &inputs(name.len() as u64, shapes),
        Mode::Train,
        400,
        |g, _, v| Ok(f(g, v)),
    );
    out.push((name.to_string(), r));
}

pub fn elementwise_and_matrix_ops() -> Suite {
    let mut out = Suite::new();
    op(&mut out, "matmul", &[&[3, 4], &[4, 2]], |g, v| {
        g.matmul(v[0], v[1])
    });
    op(&mut out, "add", &[&[3, 4], &[3, 4]], |g, v| {
        g.add(v[0], v[1])
    });
    op(&mut out, "sub", &[&[3, 4], &[3, 4]], |g, v| {
        g.sub(v[0], v[1])
    });
    op(&mut out, "mul", &[&[3, 4], &[3, 4]], |g, v| {
        g.mul(v[0], v[1])
    });
    op(&mut out, "add_bias", &[&[3, 4], &[4]], |g, v| {
        g.add_bias(v[0], v[1])
    });
    op(&mut out, "mul_prefix", &[&[2, 3, 4], &[2, 3]], |g, v| {
        g.mul_prefix(v[0], v[1])
    });
    op(&mut out, "scale", &[&[5]], |g, v| g.scale(v[0], -2.5));
    op(&mut out, "sigmoid", &[&[3, 4]], |g, v| g.sigmoid(v[0]));
    op(&mut out, "tanh", &[&[3, 4]], |g, v| g.tanh(v[0]));
    op(&mut out, "relu", &[&[3, 4]], |g, v| g.relu(v[0]));
    op(&mut out, "softmax", &[&[3, 5]], |g, v| g.softmax(v[0]));
    op(&mut out, "log_floor", &[&[3, 5]], |g, v| {
        let p = g.softmax(v[0]);
        g.log_floor(p, 1e-12)
    });
    op(&mut out, "sum_squares", &[&[3, 4]], |g, v| {
        g.sum_squares(v[0])
    });
    op(&mut out, "sum_axis", &[&[2, 3, 4]], |g, v| {
        g.sum_axis(v[0], 1)
    });
    out
}

pub fn structural_ops() -> Suite {
    let mut out = Suite::new();
    op(&mut out, "concat", &[&[2, 3], &[2, 2]], |g, v| {
        g.concat(&[v[0], v[1]], 1)
    });
    op(&mut out, "slice", &[&[2, 5, 3]], |g, v| {
        g.slice(v[0], 1, 1, 3)
    });
    op(&mut out, "reshape", &[&[2, 6]], |g, v| {
        g.reshape(v[0], &[3, 4])
    });
    op(&mut out, "transpose", &[&[2, 5]], |g, v| g.transpose(v[0]));
    op(&mut out, "dropout", &[&[4, 6]], |g, v| g.dropout(v[0], 0.3));
    out
}

pub fn convolution_and_pooling() -> Suite {
    let mut out = Suite::new();
    for padding in [PaddingMode::Valid, PaddingMode::Same] {
        for stride in [1, 2, 3] {
            op(&mut out, "conv1d", &[&[2, 11, 2], &[4, 2, 3]], |g, v| {
                g.conv1d(v[0], v[1], stride, padding).unwrap()
            });
            op(&mut out, "maxpool1d", &[&[2, 11, 3]], |g, v| {
                g.maxpool1d(v[0], 3, stride, padding).unwrap()
            });
        }
    }
    out
}

fn layer_check(
    out: &mut Suite,
    name: &str,
    shapes: &[&[usize]],
    build: impl FnOnce(
        &mut ParamBuilder<'_>,
    )
        -> Box<dyn Fn(&mut Graph, &ParameterStore, &[Var]) -> seqsleep_core::Result<Var>>,
) {
    let mut store = ParameterStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f = {
        let mut b = ParamBuilder::new(&mut store, &mut rng, false);
        b.scope("layer", Group::Epb);
        build(&mut b)
    };
    let r = check(&store, &inputs(11, shapes), Mode::Train, 300, f);
    out.push((name.to_string(), r));
}

pub fn dense_layers() -> Suite {
    let mut out = Suite::new();
    layer_check(&mut out, "linear", &[&[4, 3]], |b| {
        let l = Linear::new(b, "fc", 3, 2, true);
        Box::new(move |g, s, v| l.forward(g, s, v[0]))
    });
    layer_check(&mut out, "batch_norm", &[&[6, 3]], |b| {
        let l = BatchNorm::new(b, "bn", 3, 0.7, true);
        Box::new(move |g, s, v| l.forward(g, s, v[0]))
    });
    layer_check(&mut out, "filterbank", &[&[2, 3, 6, 2]], |b| {
        let l = FilterbankLayer::new(b, 2, 6, 3);
        Box::new(move |g, s, v| l.forward(g, s, v[0]))
    });
    layer_check(&mut out, "attention", &[&[2, 4, 3]], |b| {
        let l = AttentionPool::new(b, "att", 3, 4);
        Box::new(move |g, s, v| Ok(l.forward(g, s, v[0])?.0))
    });
    layer_check(&mut out, "residual_and_head", &[&[4, 3], &[4, 2]], |b| {
        let fc = Linear::new(b, "res", 3, 2, true);
        let head = Linear::new(b, "head", 2, 5, true);
        Box::new(move |g, s, v| {
            let o = residual_combine(g, s, v[0], v[1], Some(&fc))?;
            shared_softmax(g, s, o, &head)
        })
    });
    out
}

pub fn recurrent_layers() -> Suite {
    let mut out = Suite::new();
    for bn in [RecurrentBn::Off, RecurrentBn::PreActivation] {
        layer_check(&mut out, "gru", &[&[3, 4], &[3, 2]], |b| {
            let cell = GruCell::new(b, "gru", 4, 2, bn);
            Box::new(move |g, s, v| {
                let h = cell.step(g, s, v[0], Some(v[1]))?;
                cell.step(g, s, v[0], Some(h))
            })
        });
    }
    layer_check(&mut out, "lstm", &[&[3, 4], &[3, 2], &[3, 2]], |b| {
        let cell = LstmCell::new(b, "lstm", 4, 2);
        Box::new(move |g, s, v| {
            let (h, c) = cell.step(g, s, v[0], Some((v[1], v[2])))?;
            let (h, c) = cell.step(g, s, v[0], Some((h, c)))?;
            Ok(g.concat(&[h, c], 1))
        })
    });
    for kind in [CellKind::Gru, CellKind::Lstm] {
        layer_check(&mut out, "birnn", &[&[2, 3, 3]], |b| {
            let rnn = BiRnn::new(b, "bi", kind, 3, 2, RecurrentBn::PreActivation);
            let out = Linear::new(b, "out", 4, 3, true);
            Box::new(move |g, s, v| {
                let xs = unstack_time(g, v[0]);
                let (hf, hb) = rnn.forward(g, s, &xs)?;
                birnn_output(g, s, &hf, &hb, &out)
            })
        });
    }
    out
}

pub fn cnn_branches() -> Suite {
    let mut out = Suite::new();
    let conv = |kernel, stride, filters| ConvSpec {
        kernel,
        stride,
        filters,
    };
    let configs = vec![
        BranchConfig {
            first: conv(5, 2, 3),
            first_pool: 2,
            rest: vec![conv(3, 1, 2)],
            last_pool: 2,
        },
        BranchConfig {
            first: conv(9, 3, 2),
            first_pool: 2,
            rest: vec![conv(2, 1, 2)],
            last_pool: 1,
        },
    ];
    for padding in [PaddingMode::Same, PaddingMode::Valid] {
        let cfgs = configs.clone();
        layer_check(&mut out, "cnn", &[&[3, 40, 2]], move |b| {
            let pair = CnnBranchPair::new(b, 2, &cfgs, padding);
            Box::new(move |g, s, v| pair.forward(g, s, v[0]))
        });
    }
    out
}

/// Full forward pass plus the regularized sequence loss of a tiny model.
pub fn model_report(
    kind: ModelKind,
    channels: usize,
    seq_len: usize,
    max_elems: usize,
) -> FdReport {
    let mut cfg = ModelConfig::tiny(kind, channels, seq_len);
    cfg.seqsleepnet.n_frames = 5;
    cfg.seqsleepnet.n_freq = 9;
    let model = Model::build(&cfg, 3).unwrap();
    let batch = 2;
    let mut shape = vec![batch, seq_len];
    shape.extend(cfg.epoch_shape());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &shape, 1.0);
    let targets: Vec<usize> = (0..batch * seq_len).map(|i| (i * 3) % 5).collect();
    check(&model.store, &[], Mode::Train, max_elems, |g, st, _| {
        let m = Model::from_store(&cfg, st)?;
        let out = m.forward(g, &x)?;
        sequence_loss(g, st, out.probs, &targets, seq_len, cfg.lambda, true)
    })
}
