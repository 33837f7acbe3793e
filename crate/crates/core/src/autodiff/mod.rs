//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a tape: every op evaluates its forward value eagerly and
//! appends a node recording its inputs. [`Graph::backward`] walks the tape in
//! exact reverse order and accumulates gradients additively, so a value used
//! twice (tied weights, `x * x`) receives the sum of both contributions.
//!
//! Parameters enter the tape through [`Graph::param`], which binds a
//! [`ParamId`] of a [`ParameterStore`] to a leaf. Binding the same parameter
//! twice returns the same leaf.

mod ops;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParameterStore};

pub use ops::{same_padding, PaddingMode};

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} holds {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_parts(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; shape.iter().product()])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Whether the graph is built for training (batch statistics, active dropout)
/// or evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics observed by a training-mode batch-normalization op.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStatUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    MulPrefix(Var, Var),
    Scale(Var, f64),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Transpose(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    LogFloor(Var, f64),
    Dropout {
        input: Var,
        mask: Vec<f64>,
    },
    Sum(Var),
    SumAxis {
        input: Var,
        axis: usize,
    },
    SumSquares(Var),
    Conv1d {
        input: Var,
        kernel: Var,
        stride: usize,
        pad_left: usize,
    },
    MaxPool1d {
        input: Var,
        argmax: Vec<usize>,
    },
    BatchNormTrain {
        input: Var,
        gamma: Var,
        beta: Option<Var>,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        input: Var,
        gamma: Var,
        beta: Option<Var>,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of recorded operations.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
    rng: ChaCha8Rng,
    bindings: Vec<Option<Var>>,
    bound: Vec<(ParamId, Var)>,
    stat_updates: Vec<RunningStatUpdate>,
    check_finite: bool,
    non_finite: Option<String>,
}

impl Graph {
    /// Creates an empty tape. `seed` drives dropout masks.
    pub fn new(mode: Mode, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            bindings: Vec::new(),
            bound: Vec::new(),
            stat_updates: Vec::new(),
            check_finite: cfg!(debug_assertions),
            non_finite: None,
        }
    }

    /// Enables or disables the non-finite trap (on by default in debug builds).
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that participates in differentiation.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true, "input")
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// Binds a stored parameter to a leaf, reusing the leaf on repeated calls.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        if let Some(Some(v)) = self.bindings.get(id.0) {
            return *v;
        }
        let p = store.get(id);
        let requires_grad = p.is_learnable();
        let value = Tensor::from_parts(p.shape.clone(), p.value.clone());
        let v = self.push(value, Op::Leaf, requires_grad, "param");
        if self.bindings.len() <= id.0 {
            self.bindings.resize(id.0 + 1, None);
        }
        self.bindings[id.0] = Some(v);
        self.bound.push((id, v));
        v
    }

    /// Running-statistics updates recorded by training-mode batch norms,
    /// averaged per accumulator when one accumulator is shared across several
    /// applications (recurrent batch norm over time steps).
    pub fn running_stat_updates(&self) -> Vec<RunningStatUpdate> {
        let mut merged: Vec<(RunningStatUpdate, usize)> = Vec::new();
        for u in &self.stat_updates {
            if let Some((m, n)) = merged.iter_mut().find(|(m, _)| m.mean == u.mean) {
                for (a, b) in m.batch_mean.iter_mut().zip(&u.batch_mean) {
                    *a += b;
                }
                for (a, b) in m.batch_var.iter_mut().zip(&u.batch_var) {
                    *a += b;
                }
                *n += 1;
            } else {
                merged.push((u.clone(), 1));
            }
        }
        merged
            .into_iter()
            .map(|(mut m, n)| {
                let inv = 1.0 / n as f64;
                m.batch_mean.iter_mut().for_each(|v| *v *= inv);
                m.batch_var.iter_mut().for_each(|v| *v *= inv);
                m
            })
            .collect()
    }

    pub(crate) fn push_stat_update(&mut self, update: RunningStatUpdate) {
        self.stat_updates.push(update);
    }

    pub(crate) fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &str) -> Var {
        if self.check_finite && self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some(String::from(name));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if let Some(op) = &self.non_finite {
            return Err(Error::NonFinite(op.clone()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for g in grads.iter().flatten() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(String::from("backward")));
            }
        }
        Ok(Gradients { grads })
    }

    /// Adds the gradients of every bound learnable parameter into the store.
    pub fn accumulate_into(&self, grads: &Gradients, store: &mut ParameterStore) {
        for &(id, v) in &self.bound {
            if let Some(g) = grads.get(v) {
                let p = store.get_mut(id);
                for (a, b) in p.grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k) = (av.shape[0], av.shape[1]);
                let n = bv.shape[1];
                if let Some(da) = slot(grads, nodes, *a) {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for c in 0..k {
                            let brow = &bv.data[c * n..(c + 1) * n];
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += grow[j] * brow[j];
                            }
                            da[r * k + c] += acc;
                        }
                    }
                }
                if let Some(db) = slot(grads, nodes, *b) {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for c in 0..k {
                            let a_rc = av.data[r * k + c];
                            if a_rc == 0.0 {
                                continue;
                            }
                            let drow = &mut db[c * n..(c + 1) * n];
                            for j in 0..n {
                                drow[j] += a_rc * grow[j];
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = slot(grads, nodes, *a) {
                    add_into(da, g);
                }
                if let Some(db) = slot(grads, nodes, *b) {
                    add_into(db, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = slot(grads, nodes, *a) {
                    add_into(da, g);
                }
                if let Some(db) = slot(grads, nodes, *b) {
                    for (d, gv) in db.iter_mut().zip(g) {
                        *d -= gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if let Some(da) = slot(grads, nodes, a) {
                    for ((d, gv), bv) in da.iter_mut().zip(g).zip(&nodes[b.0].value.data) {
                        *d += gv * bv;
                    }
                }
                if let Some(db) = slot(grads, nodes, b) {
                    for ((d, gv), av) in db.iter_mut().zip(g).zip(&nodes[a.0].value.data) {
                        *d += gv * av;
                    }
                }
            }
            Op::AddBias(x, b) => {
                if let Some(dx) = slot(grads, nodes, *x) {
                    add_into(dx, g);
                }
                if let Some(db) = slot(grads, nodes, *b) {
                    let n = db.len();
                    for row in g.chunks_exact(n) {
                        add_into(db, row);
                    }
                }
            }
            Op::MulPrefix(x, s) => {
                let (x, s) = (*x, *s);
                let sv = &nodes[s.0].value.data;
                let inner = out.numel() / sv.len();
                if let Some(dx) = slot(grads, nodes, x) {
                    for (p, &sp) in sv.iter().enumerate() {
                        for j in p * inner..(p + 1) * inner {
                            dx[j] += g[j] * sp;
                        }
                    }
                }
                if let Some(ds) = slot(grads, nodes, s) {
                    let xv = &nodes[x.0].value.data;
                    for (p, d) in ds.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for j in p * inner..(p + 1) * inner {
                            acc += g[j] * xv[j];
                        }
                        *d += acc;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(dx) = slot(grads, nodes, *x) {
                    for (d, gv) in dx.iter_mut().zip(g) {
                        *d += c * gv;
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, inner_out) = split_dims(&out.shape, *axis);
                let mut offset = 0;
                for v in inputs {
                    let chunk = nodes[v.0].value.shape[*axis] * inner_out;
                    if let Some(dv) = slot(grads, nodes, *v) {
                        for o in 0..outer {
                            let src = &g[o * out.shape[*axis] * inner_out + offset..][..chunk];
                            add_into(&mut dv[o * chunk..(o + 1) * chunk], src);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Slice { input, axis, start } => {
                let in_shape = &nodes[input.0].value.shape;
                let (outer, inner) = split_dims(in_shape, *axis);
                let len = out.shape[*axis];
                if let Some(dx) = slot(grads, nodes, *input) {
                    for o in 0..outer {
                        let dst = o * in_shape[*axis] * inner + start * inner;
                        add_into(
                            &mut dx[dst..dst + len * inner],
                            &g[o * len * inner..(o + 1) * len * inner],
                        );
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = slot(grads, nodes, *x) {
                    add_into(dx, g);
                }
            }
            Op::Transpose(x) => {
                let (m, n) = (out.shape[1], out.shape[0]);
                if let Some(dx) = slot(grads, nodes, *x) {
                    for r in 0..m {
                        for c in 0..n {
                            dx[r * n + c] += g[c * m + r];
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(dx) = slot(grads, nodes, *x) {
                    for ((d, gv), y) in dx.iter_mut().zip(g).zip(&out.data) {
                        *d += gv * y * (1.0 - y);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(dx) = slot(grads, nodes, *x) {
                    for ((d, gv), y) in dx.iter_mut().zip(g).zip(&out.data) {
                        *d += gv * (1.0 - y * y);
                    }
                }
            }
            Op::Relu(x) => {
                let x = *x;
                if let Some(dx) = slot(grads, nodes, x) {
                    for ((d, gv), xv) in dx.iter_mut().zip(g).zip(&nodes[x.0].value.data) {
                        if *xv > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let n = *out.shape.last().unwrap();
                if let Some(dx) = slot(grads, nodes, *x) {
                    for ((drow, grow), yrow) in dx
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(out.data.chunks_exact(n))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            drow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::LogFloor(x, floor) => {
                let x = *x;
                if let Some(dx) = slot(grads, nodes, x) {
                    for ((d, gv), xv) in dx.iter_mut().zip(g).zip(&nodes[x.0].value.data) {
                        if *xv > *floor {
                            *d += gv / xv;
                        }
                    }
                }
            }
            Op::Dropout { input, mask } => {
                if let Some(dx) = slot(grads, nodes, *input) {
                    for ((d, gv), m) in dx.iter_mut().zip(g).zip(mask) {
                        *d += gv * m;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = slot(grads, nodes, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::SumAxis { input, axis } => {
                let in_shape = &nodes[input.0].value.shape;
                let (outer, inner) = split_dims(in_shape, *axis);
                let len = in_shape[*axis];
                if let Some(dx) = slot(grads, nodes, *input) {
                    for o in 0..outer {
                        let grow = &g[o * inner..(o + 1) * inner];
                        for a in 0..len {
                            add_into(&mut dx[(o * len + a) * inner..][..inner], grow);
                        }
                    }
                }
            }
            Op::SumSquares(x) => {
                let x = *x;
                if let Some(dx) = slot(grads, nodes, x) {
                    for (d, xv) in dx.iter_mut().zip(&nodes[x.0].value.data) {
                        *d += 2.0 * xv * g[0];
                    }
                }
            }
            Op::Conv1d {
                input,
                kernel,
                stride,
                pad_left,
            } => {
                let (input, kernel) = (*input, *kernel);
                let xv = &nodes[input.0].value;
                let wv = &nodes[kernel.0].value;
                let geom =
                    ops::ConvGeom::new(xv.shape(), wv.shape(), *stride, *pad_left, out.shape[1]);
                if let Some(dx) = slot(grads, nodes, input) {
                    ops::conv1d_backward_input(&geom, g, &wv.data, dx);
                }
                if let Some(dw) = slot(grads, nodes, kernel) {
                    ops::conv1d_backward_kernel(&geom, g, &nodes[input.0].value.data, dw);
                }
            }
            Op::MaxPool1d { input, argmax } => {
                if let Some(dx) = slot(grads, nodes, *input) {
                    for (gv, &src) in g.iter().zip(argmax) {
                        if src != usize::MAX {
                            dx[src] += gv;
                        }
                    }
                }
            }
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let f = inv_std.len();
                let n = xhat.len() / f;
                let mut sum_g = vec![0.0; f];
                let mut sum_gx = vec![0.0; f];
                for (grow, xrow) in g.chunks_exact(f).zip(xhat.chunks_exact(f)) {
                    for j in 0..f {
                        sum_g[j] += grow[j];
                        sum_gx[j] += grow[j] * xrow[j];
                    }
                }
                let gam = &nodes[gamma.0].value.data;
                if let Some(dx) = slot(grads, nodes, *input) {
                    let nf = n as f64;
                    for ((drow, grow), xrow) in dx
                        .chunks_exact_mut(f)
                        .zip(g.chunks_exact(f))
                        .zip(xhat.chunks_exact(f))
                    {
                        for j in 0..f {
                            drow[j] += gam[j] * inv_std[j] / nf
                                * (nf * grow[j] - sum_g[j] - xrow[j] * sum_gx[j]);
                        }
                    }
                }
                if let Some(dg) = slot(grads, nodes, *gamma) {
                    add_into(dg, &sum_gx);
                }
                if let Some(b) = beta {
                    if let Some(db) = slot(grads, nodes, *b) {
                        add_into(db, &sum_g);
                    }
                }
            }
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let f = inv_std.len();
                let input = *input;
                let gam = &nodes[gamma.0].value.data;
                if let Some(dx) = slot(grads, nodes, input) {
                    for (drow, grow) in dx.chunks_exact_mut(f).zip(g.chunks_exact(f)) {
                        for j in 0..f {
                            drow[j] += grow[j] * gam[j] * inv_std[j];
                        }
                    }
                }
                if let Some(dg) = slot(grads, nodes, *gamma) {
                    let xv = &nodes[input.0].value.data;
                    for (grow, xrow) in g.chunks_exact(f).zip(xv.chunks_exact(f)) {
                        for j in 0..f {
                            dg[j] += grow[j] * (xrow[j] - mean[j]) * inv_std[j];
                        }
                    }
                }
                if let Some(b) = beta {
                    if let Some(db) = slot(grads, nodes, *b) {
                        for grow in g.chunks_exact(f) {
                            add_into(db, grow);
                        }
                    }
                }
            }
        }
    }
}

/// Gradients produced by one reverse pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` requires one and the
    /// loss depends on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn split_dims(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
}
