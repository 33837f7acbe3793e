use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{split_dims, Graph, Op, RunningStatUpdate, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParameterStore};

/// Padding rule for convolution and pooling along time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaddingMode {
    /// Output length `ceil(len / stride)`; padding split with the extra
    /// element on the right.
    Same,
    /// No padding; windows must fit entirely inside the input.
    Valid,
}

/// Output length and left padding of a `same`-padded window.
pub fn same_padding(len: usize, window: usize, stride: usize) -> (usize, usize) {
    let out = len.div_ceil(stride);
    let total = ((out.saturating_sub(1)) * stride + window).saturating_sub(len);
    (out, total / 2)
}

fn window_geometry(
    len: usize,
    window: usize,
    stride: usize,
    padding: PaddingMode,
) -> Option<(usize, usize)> {
    match padding {
        PaddingMode::Same => Some(same_padding(len, window, stride)),
        PaddingMode::Valid => (len >= window).then(|| ((len - window) / stride + 1, 0)),
    }
}

pub(crate) struct ConvGeom {
    n: usize,
    t_in: usize,
    c_in: usize,
    k: usize,
    c_out: usize,
    t_out: usize,
    stride: usize,
    pad_left: usize,
}

impl ConvGeom {
    pub(crate) fn new(
        x: &[usize],
        w: &[usize],
        stride: usize,
        pad_left: usize,
        t_out: usize,
    ) -> Self {
        Self {
            n: x[0],
            t_in: x[1],
            c_in: x[2],
            k: w[0],
            c_out: w[2],
            t_out,
            stride,
            pad_left,
        }
    }

    /// Input time index touched by output `o` at tap `k`, if inside the signal.
    #[inline]
    fn tap(&self, o: usize, k: usize) -> Option<usize> {
        let t = (o * self.stride + k).checked_sub(self.pad_left)?;
        (t < self.t_in).then_some(t)
    }
}

fn conv1d_forward(geom: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
    let ConvGeom {
        n,
        t_in,
        c_in,
        k: kw,
        c_out,
        t_out,
        ..
    } = *geom;
    let mut y = vec![0.0; n * t_out * c_out];
    for b in 0..n {
        for o in 0..t_out {
            let yrow = &mut y[(b * t_out + o) * c_out..][..c_out];
            for k in 0..kw {
                let Some(t) = geom.tap(o, k) else { continue };
                let xrow = &x[(b * t_in + t) * c_in..][..c_in];
                for (ci, &xv) in xrow.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let wrow = &w[(k * c_in + ci) * c_out..][..c_out];
                    for (yv, wv) in yrow.iter_mut().zip(wrow) {
                        *yv += xv * wv;
                    }
                }
            }
        }
    }
    y
}

pub(crate) fn conv1d_backward_input(geom: &ConvGeom, g: &[f64], w: &[f64], dx: &mut [f64]) {
    let ConvGeom {
        n,
        t_in,
        c_in,
        k: kw,
        c_out,
        t_out,
        ..
    } = *geom;
    for b in 0..n {
        for o in 0..t_out {
            let grow = &g[(b * t_out + o) * c_out..][..c_out];
            for k in 0..kw {
                let Some(t) = geom.tap(o, k) else { continue };
                let dxrow = &mut dx[(b * t_in + t) * c_in..][..c_in];
                for (ci, d) in dxrow.iter_mut().enumerate() {
                    let wrow = &w[(k * c_in + ci) * c_out..][..c_out];
                    *d += grow.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
    }
}

pub(crate) fn conv1d_backward_kernel(geom: &ConvGeom, g: &[f64], x: &[f64], dw: &mut [f64]) {
    let ConvGeom {
        n,
        t_in,
        c_in,
        k: kw,
        c_out,
        t_out,
        ..
    } = *geom;
    for b in 0..n {
        for o in 0..t_out {
            let grow = &g[(b * t_out + o) * c_out..][..c_out];
            for k in 0..kw {
                let Some(t) = geom.tap(o, k) else { continue };
                let xrow = &x[(b * t_in + t) * c_in..][..c_in];
                for (ci, &xv) in xrow.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let dwrow = &mut dw[(k * c_in + ci) * c_out..][..c_out];
                    for (d, gv) in dwrow.iter_mut().zip(grow) {
                        *d += xv * gv;
                    }
                }
            }
        }
    }
}

fn map_unary(g: &Graph, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
    let v = g.value(x);
    Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect())
}

impl Graph {
    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert!(
            av.shape().len() == 2 && bv.shape().len() == 2 && av.shape()[1] == bv.shape()[0],
            "matmul shapes {:?} x {:?}",
            av.shape(),
            bv.shape()
        );
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let orow = &mut out[r * n..(r + 1) * n];
            for c in 0..k {
                let a_rc = av.data()[r * k + c];
                if a_rc == 0.0 {
                    continue;
                }
                let brow = &bv.data()[c * n..(c + 1) * n];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a_rc * b;
                }
            }
        }
        let rg = self.any_grad(&[a, b]);
        self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul(a, b),
            rg,
            "matmul",
        )
    }

    fn zip_same(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op, name: &str) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "{name} operands differ in shape");
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.any_grad(&[a, b]);
        self.push(t, op, rg, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    /// Adds a bias over the trailing dimension: `x[..., n] + b[n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        let n = bv.numel();
        assert_eq!(xv.shape().last().copied(), Some(n), "bias length mismatch");
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (d, bb) in row.iter_mut().zip(bv.data()) {
                *d += bb;
            }
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.any_grad(&[x, b]);
        self.push(t, Op::AddBias(x, b), rg, "add_bias")
    }

    /// Multiplies `x` by `s` broadcast over trailing dimensions; the shape of
    /// `s` must be a prefix of the shape of `x`.
    pub fn mul_prefix(&mut self, x: Var, s: Var) -> Var {
        let (xv, sv) = (self.value(x), self.value(s));
        assert!(
            xv.shape().starts_with(sv.shape()),
            "mul_prefix: {:?} is not a prefix of {:?}",
            sv.shape(),
            xv.shape()
        );
        let inner = xv.numel() / sv.numel().max(1);
        let mut data = xv.data().to_vec();
        for (chunk, sp) in data.chunks_exact_mut(inner).zip(sv.data()) {
            chunk.iter_mut().for_each(|d| *d *= sp);
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.any_grad(&[x, s]);
        self.push(t, Op::MulPrefix(x, s), rg, "mul_prefix")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = map_unary(self, x, |a| a * c);
        let rg = self.any_grad(&[x]);
        self.push(t, Op::Scale(x, c), rg, "scale")
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Var {
        assert!(!inputs.is_empty(), "concat of nothing");
        let first = self.shape(inputs[0]).to_vec();
        let mut shape = first.clone();
        shape[axis] = 0;
        for &v in inputs {
            let s = self.shape(v);
            assert!(
                s.len() == first.len()
                    && s.iter()
                        .enumerate()
                        .all(|(i, &d)| i == axis || d == first[i]),
                "concat shapes {:?} vs {:?}",
                s,
                first
            );
            shape[axis] += s[axis];
        }
        let (outer, inner) = split_dims(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let vv = self.value(v);
                let chunk = vv.shape()[axis] * inner;
                data.extend_from_slice(&vv.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = self.any_grad(inputs);
        self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
            "concat",
        )
    }

    /// `len` consecutive entries along `axis`, starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let in_shape = xv.shape().to_vec();
        assert!(start + len <= in_shape[axis], "slice out of range");
        let (outer, inner) = split_dims(&in_shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * in_shape[axis] * inner + start * inner;
            data.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let mut shape = in_shape;
        shape[axis] = len;
        let rg = self.any_grad(&[x]);
        self.push(
            Tensor::from_parts(shape, data),
            Op::Slice {
                input: x,
                axis,
                start,
            },
            rg,
            "slice",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let xv = self.value(x);
        assert_eq!(
            xv.numel(),
            shape.iter().product::<usize>(),
            "reshape {:?} -> {:?}",
            xv.shape(),
            shape
        );
        let t = Tensor::from_parts(shape.to_vec(), xv.data().to_vec());
        let rg = self.any_grad(&[x]);
        self.push(t, Op::Reshape(x), rg, "reshape")
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape().len(), 2, "transpose expects a matrix");
        let (m, n) = (xv.shape()[0], xv.shape()[1]);
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                data[c * m + r] = xv.data()[r * n + c];
            }
        }
        let rg = self.any_grad(&[x]);
        self.push(
            Tensor::from_parts(vec![n, m], data),
            Op::Transpose(x),
            rg,
            "transpose",
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = map_unary(self, x, sigmoid);
        let rg = self.any_grad(&[x]);
        self.push(t, Op::Sigmoid(x), rg, "sigmoid")
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = map_unary(self, x, Float::tanh);
        let rg = self.any_grad(&[x]);
        self.push(t, Op::Tanh(x), rg, "tanh")
    }

    /// Rectifier; the subgradient at zero is zero.
    pub fn relu(&mut self, x: Var) -> Var {
        let t = map_unary(self, x, |a| if a > 0.0 { a } else { 0.0 });
        let rg = self.any_grad(&[x]);
        self.push(t, Op::Relu(x), rg, "relu")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = *xv.shape().last().expect("softmax of a scalar");
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.any_grad(&[x]);
        self.push(t, Op::Softmax(x), rg, "softmax")
    }

    /// `ln(max(x, floor))`.
    pub fn log_floor(&mut self, x: Var, floor: f64) -> Var {
        let t = map_unary(self, x, |a| Float::ln(if a > floor { a } else { floor }));
        let rg = self.any_grad(&[x]);
        self.push(t, Op::LogFloor(x, floor), rg, "log")
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1 / (1 - p)`; identity in
    /// evaluation mode.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        assert!(
            (0.0..1.0).contains(&p),
            "dropout probability {p} outside [0, 1)"
        );
        if !self.is_train() || p == 0.0 {
            return x;
        }
        let n = self.value(x).numel();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if self.rng().random::<f64>() < p {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.any_grad(&[x]);
        self.push(t, Op::Dropout { input: x, mask }, rg, "dropout")
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg, "sum")
    }

    /// Sum over one axis, which is removed from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Var {
        let xv = self.value(x);
        let in_shape = xv.shape().to_vec();
        let (outer, inner) = split_dims(&in_shape, axis);
        let len = in_shape[axis];
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut data[o * inner..(o + 1) * inner];
            for a in 0..len {
                let src = &xv.data()[(o * len + a) * inner..][..inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = in_shape;
        shape.remove(axis);
        let rg = self.any_grad(&[x]);
        self.push(
            Tensor::from_parts(shape, data),
            Op::SumAxis { input: x, axis },
            rg,
            "sum_axis",
        )
    }

    /// `sum(x^2)` as a scalar.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|a| a * a).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::SumSquares(x), rg, "sum_squares")
    }

    /// Channels-last 1-D convolution: `x [N, T, C_in]`, `kernel [K, C_in, C_out]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        kernel: Var,
        stride: usize,
        padding: PaddingMode,
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if xs.len() != 3 || ws.len() != 3 || xs[2] != ws[1] || stride == 0 {
            return Err(Error::ShapeMismatch(format!(
                "conv1d input {xs:?} with kernel {ws:?}, stride {stride}"
            )));
        }
        let (t_out, pad_left) =
            window_geometry(xs[1], ws[0], stride, padding).ok_or_else(|| {
                Error::ShapeMismatch(format!(
                    "conv1d window {} longer than input {}",
                    ws[0], xs[1]
                ))
            })?;
        let geom = ConvGeom::new(&xs, &ws, stride, pad_left, t_out);
        let y = conv1d_forward(&geom, self.value(x).data(), self.value(kernel).data());
        let rg = self.any_grad(&[x, kernel]);
        Ok(self.push(
            Tensor::from_parts(vec![xs[0], t_out, ws[2]], y),
            Op::Conv1d {
                input: x,
                kernel,
                stride,
                pad_left,
            },
            rg,
            "conv1d",
        ))
    }

    /// Channels-last max pooling over time, `x [N, T, C]`. Padding positions
    /// never win; ties go to the earliest position.
    pub fn maxpool1d(
        &mut self,
        x: Var,
        size: usize,
        stride: usize,
        padding: PaddingMode,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || size == 0 || stride == 0 {
            return Err(Error::ShapeMismatch(format!("maxpool1d input {xs:?}")));
        }
        let (n, t_in, c) = (xs[0], xs[1], xs[2]);
        let (t_out, pad_left) = window_geometry(t_in, size, stride, padding).ok_or_else(|| {
            Error::ShapeMismatch(format!("pool window {size} longer than input {t_in}"))
        })?;
        let xv = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; n * t_out * c];
        let mut argmax = vec![usize::MAX; n * t_out * c];
        for b in 0..n {
            for o in 0..t_out {
                for k in 0..size {
                    let Some(t) = (o * stride + k).checked_sub(pad_left) else {
                        continue;
                    };
                    if t >= t_in {
                        continue;
                    }
                    for ch in 0..c {
                        let src = (b * t_in + t) * c + ch;
                        let dst = (b * t_out + o) * c + ch;
                        if argmax[dst] == usize::MAX || xv[src] > out[dst] {
                            out[dst] = xv[src];
                            argmax[dst] = src;
                        }
                    }
                }
            }
        }
        for (o, a) in out.iter_mut().zip(&argmax) {
            if *a == usize::MAX {
                *o = 0.0;
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![n, t_out, c], out),
            Op::MaxPool1d { input: x, argmax },
            rg,
            "maxpool1d",
        ))
    }

    /// Batch normalization of `x [N, F]` over rows.
    ///
    /// Training mode normalizes with the batch statistics (biased variance)
    /// and records them for the running accumulators `stats`; evaluation mode
    /// normalizes with the stored running statistics. `beta` may be omitted
    /// when a separate bias follows.
    pub fn batch_norm(
        &mut self,
        store: &ParameterStore,
        x: Var,
        gamma: Var,
        beta: Option<Var>,
        stats: (ParamId, ParamId),
        eps: f64,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || self.value(gamma).numel() != xs[1] {
            return Err(Error::ShapeMismatch(format!("batch_norm input {xs:?}")));
        }
        let (n, f) = (xs[0], xs[1]);
        let gam = self.value(gamma).data().to_vec();
        let bet = beta.map(|b| self.value(b).data().to_vec());
        let xv = self.value(x).data().to_vec();
        let mut rg_inputs = vec![x, gamma];
        rg_inputs.extend(beta);
        let rg = self.any_grad(&rg_inputs);
        let affine = |j: usize, xh: f64| gam[j] * xh + bet.as_ref().map_or(0.0, |b| b[j]);
        if self.is_train() {
            if n < 2 {
                return Err(Error::InvalidArgument(format!(
                    "batch normalization in training mode needs at least 2 rows, got {n}"
                )));
            }
            let mut mean = vec![0.0; f];
            for row in xv.chunks_exact(f) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            let mut var = vec![0.0; f];
            for row in xv.chunks_exact(f) {
                for j in 0..f {
                    let d = row[j] - mean[j];
                    var[j] += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v /= n as f64);
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / Float::sqrt(v + eps)).collect();
            let mut xhat = vec![0.0; n * f];
            let mut out = vec![0.0; n * f];
            for (r, row) in xv.chunks_exact(f).enumerate() {
                for j in 0..f {
                    let h = (row[j] - mean[j]) * inv_std[j];
                    xhat[r * f + j] = h;
                    out[r * f + j] = affine(j, h);
                }
            }
            self.push_stat_update(RunningStatUpdate {
                mean: stats.0,
                var: stats.1,
                batch_mean: mean,
                batch_var: var,
            });
            Ok(self.push(
                Tensor::from_parts(xs, out),
                Op::BatchNormTrain {
                    input: x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                },
                rg,
                "batch_norm",
            ))
        } else {
            let mean = store.get(stats.0).value.clone();
            let inv_std: Vec<f64> = store
                .get(stats.1)
                .value
                .iter()
                .map(|v| 1.0 / Float::sqrt(v + eps))
                .collect();
            let mut out = vec![0.0; n * f];
            for (r, row) in xv.chunks_exact(f).enumerate() {
                for j in 0..f {
                    out[r * f + j] = affine(j, (row[j] - mean[j]) * inv_std[j]);
                }
            }
            Ok(self.push(
                Tensor::from_parts(xs, out),
                Op::BatchNormEval {
                    input: x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                },
                rg,
                "batch_norm",
            ))
        }
    }
}

pub(crate) fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + Float::exp(-a))
    } else {
        let e = Float::exp(a);
        e / (1.0 + e)
    }
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = Float::exp(*v - max);
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}
