use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{Mode, PaddingMode, Tensor};

fn builder_store(seed: u64) -> (ParameterStore, ChaCha8Rng) {
    (ParameterStore::new(), ChaCha8Rng::seed_from_u64(seed))
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn filterbank_selects_bins_with_one_hot_weights() {
    let (mut store, mut rng) = builder_store(0);
    let fb = {
        let mut b = ParamBuilder::new(&mut store, &mut rng, false);
        FilterbankLayer::new(&mut b, 1, 4, 2)
    };
    // sigmoid(±1000) is exactly 1 / 0 in f64, so the effective matrix is one-hot.
    store.get_mut(fb.weights[0]).value = vec![-1e3, -1e3, 1e3, -1e3, -1e3, 1e3, -1e3, -1e3];
    let img: Vec<f64> = (0..12).map(|v| v as f64).collect();
    let mut g = Graph::new(Mode::Eval, 0);
    let x = g.constant(Tensor::new(&[1, 3, 4, 1], img.clone()).unwrap());
    let y = fb.forward(&mut g, &store, x).unwrap();
    assert_eq!(g.shape(y), &[1, 3, 2]);
    for t in 0..3 {
        assert_eq!(g.value(y).data()[t * 2], img[t * 4 + 1]);
        assert_eq!(g.value(y).data()[t * 2 + 1], img[t * 4 + 2]);
    }
}

#[test]
fn filterbank_equal_weights_scale_row_sums() {
    let (mut store, mut rng) = builder_store(0);
    let fb = {
        let mut b = ParamBuilder::new(&mut store, &mut rng, false);
        FilterbankLayer::new(&mut b, 1, 5, 3)
    };
    store.get_mut(fb.weights[0]).value = vec![0.0; 15];
    let mut g = Graph::new(Mode::Eval, 0);
    let x = g.constant(rand_tensor(&mut rng, &[2, 4, 5, 1]));
    let y = fb.forward(&mut g, &store, x).unwrap();
    for (row, out) in g.value(x).data().chunks(5).zip(g.value(y).data().chunks(3)) {
        let s: f64 = row.iter().sum();
        for o in out {
            assert!((o - 0.5 * s).abs() < 1e-12);
        }
    }
    let bad = g.constant(Tensor::zeros(&[1, 4, 6, 1]));
    assert!(fb.forward(&mut g, &store, bad).is_err());
}

#[test]
fn zero_gru_stays_at_zero() {
    let (mut store, mut rng) = builder_store(0);
    let birnn = {
        let mut b = ParamBuilder::new(&mut store, &mut rng, true);
        BiRnn::new(&mut b, "rnn", CellKind::Gru, 3, 4, RecurrentBn::Off)
    };
    let mut g = Graph::new(Mode::Eval, 0);
    let xs: Vec<Var> = (0..5).map(|_| g.constant(Tensor::zeros(&[2, 3]))).collect();
    let (hf, hb) = birnn.forward(&mut g, &store, &xs).unwrap();
    for v in hf.iter().chain(&hb) {
        assert!(g.value(*v).data().iter().all(|&a| a == 0.0));
    }
    assert!(birnn.forward(&mut g, &store, &[]).is_err());
}

fn shared_birnn(kind: CellKind, seed: u64) -> (ParameterStore, BiRnn) {
    let (mut store, mut rng) = builder_store(seed);
    let cell = {
        let mut b = ParamBuilder::new(&mut store, &mut rng, false);
        RnnCell::new(&mut b, "cell", kind, 3, 4, RecurrentBn::Off)
    };
    (
        store,
        BiRnn {
            forward: cell.clone(),
            backward: cell,
        },
    )
}

#[test]
fn single_step_directions_agree_with_shared_cells() {
    for kind in [CellKind::Gru, CellKind::Lstm] {
        let (store, birnn) = shared_birnn(kind, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new(Mode::Eval, 0);
        let x = g.constant(rand_tensor(&mut rng, &[2, 3]));
        let (hf, hb) = birnn.forward(&mut g, &store, &[x]).unwrap();
        assert_eq!(g.value(hf[0]), g.value(hb[0]));
    }
}

#[test]
fn reversing_input_swaps_directions() {
    for kind in [CellKind::Gru, CellKind::Lstm] {
        let (store, birnn) = shared_birnn(kind, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new(Mode::Eval, 0);
        let xs: Vec<Var> = (0..6)
            .map(|_| g.constant(rand_tensor(&mut rng, &[2, 3])))
            .collect();
        let rev: Vec<Var> = xs.iter().rev().copied().collect();
        let (hf, hb) = birnn.forward(&mut g, &store, &xs).unwrap();
        let (hf_r, hb_r) = birnn.forward(&mut g, &store, &rev).unwrap();
        let n = xs.len();
        for l in 0..n {
            assert_eq!(g.value(hf_r[l]), g.value(hb[n - 1 - l]));
            assert_eq!(g.value(hb_r[l]), g.value(hf[n - 1 - l]));
        }
        // The forward state at l only depends on x_1..x_l; check against a
        // direct step-by-step recomputation.
        let mut state = None;
        for l in 0..n {
            let s = birnn.forward.step(&mut g, &store, xs[l], state).unwrap();
            assert_eq!(g.value(s.hidden), g.value(hf[l]));
            state = Some(s);
        }
    }
}

#[test]
fn birnn_output_cases() {
    let (mut store, mut rng) = builder_store(1);
    let out = {
        let mut b = ParamBuilder::new(&mut store, &mut rng, false);
        Linear::new(&mut b, "out", 4, 4, true)
    };
    let hf_t: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut rng, &[2, 2])).collect();
    let hb_t: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut rng, &[2, 2])).collect();
    let run = |store: &ParameterStore| {
        let mut g = Graph::new(Mode::Eval, 0);
        let hf: Vec<Var> = hf_t.iter().map(|t| g.constant(t.clone())).collect();
        let hb: Vec<Var> = hb_t.iter().map(|t| g.constant(t.clone())).collect();
        let o = birnn_output(&mut g, store, &hf, &hb, &out).unwrap();
        g.value(o).data().to_vec()
    };

    store.get_mut(out.weight).value = vec![0.0; 16];
    store.get_mut(out.bias.unwrap()).value = vec![1.0, 2.0, 3.0, 4.0];
    for row in run(&store).chunks(4) {
        assert_eq!(row, &[1.0, 2.0, 3.0, 4.0]);
    }

    let mut eye = vec![0.0; 16];
    (0..4).for_each(|i| eye[i * 5] = 1.0);
    store.get_mut(out.weight).value = eye;
    store.get_mut(out.bias.unwrap()).value = vec![0.0; 4];
    let vals = run(&store);
    for n in 0..2 {
        for l in 0..3 {
            let row = &vals[(n * 3 + l) * 4..][..4];
            assert_eq!(&row[..2], &hb_t[l].data()[n * 2..n * 2 + 2]);
            assert_eq!(&row[2..], &hf_t[l].data()[n * 2..n * 2 + 2]);
        }
    }

    let w: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
    let bias: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    store.get_mut(out.weight).value = w.clone();
    store.get_mut(out.bias.unwrap()).value = bias.clone();
    let vals = run(&store);
    for n in 0..2 {
        for l in 0..3 {
            let mut cat = hb_t[l].data()[n * 2..n * 2 + 2].to_vec();
            cat.extend_from_slice(&hf_t[l].data()[n * 2..n * 2 + 2]);
            for j in 0..4 {
                let expect: f64 = bias[j] + (0..4).map(|i| cat[i] * w[i * 4 + j]).sum::<f64>();
                assert!((vals[(n * 3 + l) * 4 + j] - expect).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn attention_cases() {
    let (mut store, mut rng) = builder_store(2);
    let att = {
        let mut b = ParamBuilder::new(&mut store, &mut rng, true);
        AttentionPool::new(&mut b, "att", 3, 4)
    };
    let mut g = Graph::new(Mode::Eval, 0);
    let h = g.constant(rand_tensor(&mut rng, &[2, 5, 3]));
    let (pooled, _) = att.forward(&mut g, &store, h).unwrap();
    let hv = g.value(h).data().to_vec();
    for n in 0..2 {
        for d in 0..3 {
            let mean: f64 = (0..5).map(|t| hv[(n * 5 + t) * 3 + d]).sum::<f64>() / 5.0;
            assert!((g.value(pooled).data()[n * 3 + d] - mean).abs() < 1e-12);
        }
    }

    let (mut store, mut rng) = builder_store(3);
    let att = {
        let mut b = ParamBuilder::new(&mut store, &mut rng, false);
        AttentionPool::new(&mut b, "att", 3, 4)
    };
    let h1 = g.constant(rand_tensor(&mut rng, &[2, 1, 3]));
    let (pooled, _) = att.forward(&mut g, &store, h1).unwrap();
    for (a, b) in g.value(pooled).data().iter().zip(g.value(h1).data()) {
        assert!((a - b).abs() < 1e-15);
    }
    for _ in 0..20 {
        let h = g.constant(rand_tensor(&mut rng, &[3, 7, 3]));
        let (_, w) = att.forward(&mut g, &store, h).unwrap();
        for row in g.value(w).data().chunks(7) {
            assert!(row.iter().all(|&a| a >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

fn default_branches() -> Vec<BranchConfig> {
    vec![
        BranchConfig {
            first: ConvSpec {
                kernel: 50,
                stride: 6,
                filters: 64,
            },
            first_pool: 8,
            rest: vec![
                ConvSpec {
                    kernel: 8,
                    stride: 1,
                    filters: 128
                };
                3
            ],
            last_pool: 4,
        },
        BranchConfig {
            first: ConvSpec {
                kernel: 400,
                stride: 50,
                filters: 64,
            },
            first_pool: 4,
            rest: vec![
                ConvSpec {
                    kernel: 6,
                    stride: 1,
                    filters: 128
                };
                3
            ],
            last_pool: 2,
        },
    ]
}

#[test]
fn cnn_default_output_dim() {
    // Shape arithmetic by hand: 3000/6 = 500 -> /8 = 63 -> /4 = 16 frames x 128,
    // and 3000/50 = 60 -> /4 = 15 -> /2 = 8 frames x 128.
    let cfg = default_branches();
    assert_eq!(cfg[0].output_dim(3000, PaddingMode::Same), Some(16 * 128));
    assert_eq!(cfg[1].output_dim(3000, PaddingMode::Same), Some(8 * 128));
}

#[test]
fn cnn_forward_shapes_and_determinism() {
    let small = vec![
        BranchConfig {
            first: ConvSpec {
                kernel: 5,
                stride: 2,
                filters: 3,
            },
            first_pool: 2,
            rest: vec![ConvSpec {
                kernel: 3,
                stride: 1,
                filters: 4,
            }],
            last_pool: 2,
        },
        BranchConfig {
            first: ConvSpec {
                kernel: 9,
                stride: 4,
                filters: 3,
            },
            first_pool: 2,
            rest: vec![ConvSpec {
                kernel: 2,
                stride: 1,
                filters: 2,
            }],
            last_pool: 2,
        },
    ];
    let (mut store, mut rng) = builder_store(4);
    let pair = {
        let mut b = ParamBuilder::new(&mut store, &mut rng, false);
        CnnBranchPair::new(&mut b, 2, &small, PaddingMode::Same)
    };
    let mut g = Graph::new(Mode::Eval, 0);
    let one = rand_tensor(&mut rng, &[1, 60, 2]);
    let mut two = one.data().to_vec();
    two.extend_from_slice(one.data());
    let x = g.constant(Tensor::new(&[2, 60, 2], two).unwrap());
    let y = pair.forward(&mut g, &store, x).unwrap();
    let d = pair.output_dim(60).unwrap();
    assert_eq!(g.shape(y), &[2, d]);
    let v = g.value(y).data();
    assert_eq!(&v[..d], &v[d..]);

    let short = g.constant(Tensor::zeros(&[1, 8, 2]));
    assert!(pair.forward(&mut g, &store, short).is_err());
}

#[test]
fn residual_and_head() {
    let (mut store, mut rng) = builder_store(5);
    let (fc, head) = {
        let mut b = ParamBuilder::new(&mut store, &mut rng, false);
        (
            Linear::new(&mut b, "res", 3, 4, true),
            Linear::new(&mut b, "head", 4, 5, true),
        )
    };
    let mut g = Graph::new(Mode::Eval, 0);
    let x = g.constant(rand_tensor(&mut rng, &[6, 3]));
    let o = g.constant(rand_tensor(&mut rng, &[6, 4]));

    assert_eq!(residual_combine(&mut g, &store, x, o, None).unwrap(), o);
    store.get_mut(fc.weight).value = vec![0.0; 12];
    store.get_mut(fc.bias.unwrap()).value = vec![0.5; 4];
    let (xt, ot) = (g.value(x).clone(), g.value(o).clone());
    let mut g = Graph::new(Mode::Eval, 0);
    let x = g.constant(xt);
    let o = g.constant(ot);
    let r = residual_combine(&mut g, &store, x, o, Some(&fc)).unwrap();
    for (a, b) in g.value(r).data().iter().zip(g.value(o).data()) {
        assert_eq!(*a, b + 0.5);
    }
    let wide = g.constant(rand_tensor(&mut rng, &[6, 5]));
    assert!(residual_combine(&mut g, &store, x, wide, Some(&fc)).is_err());

    let p = shared_softmax(&mut g, &store, o, &head).unwrap();
    for row in g.value(p).data().chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    // Permuting rows permutes outputs identically.
    let ov = g.value(o).data().to_vec();
    let mut perm = Vec::new();
    for r in [3, 0, 5, 1, 4, 2] {
        perm.extend_from_slice(&ov[r * 4..r * 4 + 4]);
    }
    let op = g.constant(Tensor::new(&[6, 4], perm).unwrap());
    let pp = shared_softmax(&mut g, &store, op, &head).unwrap();
    let pv = g.value(p).data().to_vec();
    for (i, r) in [3, 0, 5, 1, 4, 2].into_iter().enumerate() {
        assert_eq!(&g.value(pp).data()[i * 5..i * 5 + 5], &pv[r * 5..r * 5 + 5]);
    }

    store.get_mut(head.weight).value = vec![0.0; 20];
    store.get_mut(head.bias.unwrap()).value = vec![0.0; 5];
    let mut g = Graph::new(Mode::Eval, 0);
    let o = g.constant(Tensor::new(&[6, 4], ov).unwrap());
    let p = shared_softmax(&mut g, &store, o, &head).unwrap();
    assert!(g.value(p).data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
}
