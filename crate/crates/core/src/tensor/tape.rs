//! Reverse-mode differentiation over a linear record of executed ops.
//!
//! Every op appends a node holding its output value. A node requires a
//! gradient when any of its inputs does, so frozen subgraphs cost nothing
//! on the way back: `backward` only produces contributions for inputs that
//! asked for them, and leaves created with `requires_grad = false` never
//! receive a gradient buffer.

use super::kernels::{self, ConvGeom, LerpAxis};
use super::value::{strides_of, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    Sigmoid(Var),
    Gelu(Var),
    Pow(Var, f64),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    IndexSelect { x: Var, axis: usize, indices: Vec<usize> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    Resize { x: Var, ys: LerpAxis, xs: LerpAxis },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, invstd: Vec<f64>, batch_stats: bool },
    Linear { x: Var, w: Var, b: Option<Var> },
    Bmm(Var, Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, invstd: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
    op: Op,
}

/// Batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased per-channel variance, for running-average updates.
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, _) => Some(y),
            (_, 1) => Some(x),
            _ => None,
        })
        .collect()
}

fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let strides = strides_of(shape);
    shape.iter().zip(out).zip(strides).map(|((&s, &o), st)| if s == 1 && o != 1 { 0 } else { st }).collect()
}

fn expand(t: &Tensor, out: &[usize]) -> Tensor {
    if t.shape() == out {
        return t.clone();
    }
    let strides = broadcast_strides(t.shape(), out);
    let src = t.data();
    let mut data = vec![0.0; out.iter().product()];
    kernels::for_each_strided(out, &strides, |flat, off| data[flat] = src[off]);
    Tensor::new(out.to_vec(), data).expect("expand shape")
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to(g: Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g;
    }
    let strides = broadcast_strides(shape, g.shape());
    let mut data = vec![0.0; shape.iter().product()];
    let src = g.data();
    kernels::for_each_strided(g.shape(), &strides, |flat, off| data[off] += src[flat]);
    Tensor::new(shape.to_vec(), data).expect("reduce shape")
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node together with its saved activations.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.nodes.shrink_to_fit();
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

    /// Gradient accumulated by the last [`Tape::backward`], if any.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, requires_grad, grad: None, op });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(x).map(f);
        let rg = self.any_grad(&[x]);
        self.push(value, rg, op)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let value = if sa == sb {
            self.value(a).zip_map(self.value(b), f)
        } else {
            let out = broadcast_shape(&sa, &sb).unwrap_or_else(|| panic!("cannot broadcast {sa:?} with {sb:?}"));
            expand(self.value(a), &out).zip_map(&expand(self.value(b), &out), f)
        };
        let rg = self.any_grad(&[a, b]);
        self.push(value, rg, op)
    }

    /// Elementwise sum with size-1 broadcasting between equal-rank operands.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.unary(x, Op::Scale(x, k), |v| v * k)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Offset(x), |v| v + c)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), |v| gelu(v).0)
    }

    /// `x^p` for non-negative `x`; the derivative at zero is taken as 0.
    pub fn pow(&mut self, x: Var, p: f64) -> Var {
        self.unary(x, Op::Pow(x, p), move |v| if v > 0.0 { v.powf(p) } else { 0.0 })
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.any_grad(&[x]);
        self.push(value, rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).mean());
        let rg = self.any_grad(&[x]);
        self.push(value, rg, Op::Mean(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshape(shape.to_vec()).unwrap_or_else(|e| panic!("{e}"));
        let rg = self.any_grad(&[x]);
        self.push(value, rg, Op::Reshape(x))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Var {
        let src = self.value(x);
        assert_eq!(axes.len(), src.ndim(), "permute rank mismatch");
        let value = permute_tensor(src, axes);
        let rg = self.any_grad(&[x]);
        self.push(value, rg, Op::Permute(x, axes.to_vec()))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Var {
        assert!(!xs.is_empty(), "concat of nothing");
        let first = self.shape(xs[0]).to_vec();
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &v in xs {
            let s = self.shape(v);
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (d, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(d == axis || a == b, "concat: {s:?} vs {first:?} on axis {axis}");
            }
            out_shape[axis] += s[axis];
        }
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let value = Tensor::new(out_shape, data).expect("concat");
        let rg = self.any_grad(xs);
        self.push(value, rg, Op::Concat(xs.to_vec(), axis))
    }

    /// Keeps `[start, end)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Var {
        let src = self.value(x);
        assert!(start < end && end <= src.shape()[axis], "slice out of range");
        let (outer, len, inner) = split_axis(src.shape(), axis);
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * len * inner;
            data.extend_from_slice(&src.data()[base + start * inner..base + end * inner]);
        }
        let mut shape = src.shape().to_vec();
        shape[axis] = end - start;
        let value = Tensor::new(shape, data).expect("slice");
        let rg = self.any_grad(&[x]);
        self.push(value, rg, Op::Slice { x, axis, start })
    }

    /// Gathers `indices` (repeats allowed) along `axis`.
    pub fn index_select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Var {
        let src = self.value(x);
        let (outer, len, inner) = split_axis(src.shape(), axis);
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                assert!(i < len, "index {i} out of range {len}");
                let at = (o * len + i) * inner;
                data.extend_from_slice(&src.data()[at..at + inner]);
            }
        }
        let mut shape = src.shape().to_vec();
        shape[axis] = indices.len();
        let value = Tensor::new(shape, data).expect("index_select");
        let rg = self.any_grad(&[x]);
        self.push(value, rg, Op::IndexSelect { x, axis, indices: indices.to_vec() })
    }

    /// 2-D convolution of `[N,C,H,W]` with weights `[O,C,k,k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be [N,C,H,W], got {xs:?}");
        assert_eq!(ws.len(), 4, "conv2d weight must be [O,C,k,k]");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch: input {xs:?}, weight {ws:?}");
        assert_eq!(ws[2], ws[3], "square kernels only");
        let geom = ConvGeom { channels: xs[1], height: xs[2], width: xs[3], kernel: ws[2], stride, pad };
        let (n, o) = (xs[0], ws[0]);
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let plane = ho * wo;
        let rows = geom.col_rows();
        let mut out = vec![0.0; n * o * plane];
        let mut col = if geom.is_pointwise() { Vec::new() } else { vec![0.0; rows * plane] };
        {
            let input = self.value(x).data();
            let weight = self.value(w).data();
            let in_size = xs[1] * xs[2] * xs[3];
            for s in 0..n {
                let img = &input[s * in_size..(s + 1) * in_size];
                let cols: &[f64] = if geom.is_pointwise() {
                    img
                } else {
                    kernels::im2col(img, &geom, &mut col);
                    &col
                };
                kernels::gemm(
                    o,
                    rows,
                    plane,
                    1.0,
                    weight,
                    (rows, 1),
                    cols,
                    (plane, 1),
                    0.0,
                    &mut out[s * o * plane..(s + 1) * o * plane],
                    (plane, 1),
                );
            }
            if let Some(b) = b {
                let bias = self.value(b).data();
                assert_eq!(bias.len(), o, "conv2d bias length");
                for (chunk, i) in out.chunks_exact_mut(plane).zip((0..o).cycle()) {
                    chunk.iter_mut().for_each(|v| *v += bias[i]);
                }
            }
        }
        let value = Tensor::new(vec![n, o, ho, wo], out).expect("conv2d");
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        self.push(value, rg, Op::Conv2d { x, w, b, geom })
    }

    /// 2×2 max pooling with stride 2 over the last two axes (floor sizing).
    pub fn max_pool2d(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let s = src.shape();
        let r = s.len();
        assert!(r >= 2, "max_pool2d needs spatial axes");
        let (h, w) = (s[r - 2], s[r - 1]);
        let (ho, wo) = (h / 2, w / 2);
        let planes: usize = s[..r - 2].iter().product();
        let mut out = Vec::with_capacity(planes * ho * wo);
        let mut argmax = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let at = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src.data()[at] > src.data()[best] {
                            best = at;
                        }
                    }
                    out.push(src.data()[best]);
                    argmax.push(best);
                }
            }
        }
        let mut shape = s.to_vec();
        shape[r - 2] = ho;
        shape[r - 1] = wo;
        let value = Tensor::new(shape, out).expect("max_pool2d");
        let rg = self.any_grad(&[x]);
        self.push(value, rg, Op::MaxPool2d { x, argmax })
    }

    /// Corner-aligned bilinear resize of the last two axes.
    pub fn resize(&mut self, x: Var, height: usize, width: usize) -> Var {
        assert!(height > 0 && width > 0, "resize to an empty extent");
        let src = self.value(x);
        let s = src.shape();
        let r = s.len();
        let (h, w) = (s[r - 2], s[r - 1]);
        let ys = LerpAxis::new(h, height);
        let xs = LerpAxis::new(w, width);
        let planes: usize = s[..r - 2].iter().product();
        let mut out = vec![0.0; planes * height * width];
        for p in 0..planes {
            kernels::resize_plane(
                &src.data()[p * h * w..(p + 1) * h * w],
                w,
                &ys,
                &xs,
                &mut out[p * height * width..(p + 1) * height * width],
            );
        }
        let mut shape = s.to_vec();
        shape[r - 2] = height;
        shape[r - 1] = width;
        let value = Tensor::new(shape, out).expect("resize");
        let rg = self.any_grad(&[x]);
        self.push(value, rg, Op::Resize { x, ys, xs })
    }

    /// Batch norm over `[N,C,H,W]` using the statistics of this batch.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> (Var, BatchStats) {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "batch_norm expects [N,C,H,W]");
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let count = (n * plane) as f64;
        let data = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut acc = 0.0;
            for sample in 0..n {
                let at = (sample * c + ch) * plane;
                acc += data[at..at + plane].iter().sum::<f64>();
            }
            mean[ch] = acc / count;
            let mut sq = 0.0;
            for sample in 0..n {
                let at = (sample * c + ch) * plane;
                sq += data[at..at + plane].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
            var[ch] = sq / count;
        }
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
        let unbiased = if count > 1.0 { var.iter().map(|v| v * count / (count - 1.0)).collect() } else { var.clone() };
        let out = self.batch_norm_apply(x, gamma, beta, mean.clone(), invstd, true);
        (out, BatchStats { mean, var: unbiased })
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64]) -> Var {
        let invstd = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
        self.batch_norm_apply(x, gamma, beta, mean.to_vec(), invstd, false)
    }

    fn batch_norm_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        invstd: Vec<f64>,
        batch_stats: bool,
    ) -> Var {
        let s = self.shape(x).to_vec();
        let (c, plane) = (s[1], s[2] * s[3]);
        assert_eq!(self.value(gamma).numel(), c, "batch_norm gamma length");
        assert_eq!(self.value(beta).numel(), c, "batch_norm beta length");
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = self.value(x).data().to_vec();
        for (i, chunk) in out.chunks_exact_mut(plane).enumerate() {
            let ch = i % c;
            for v in chunk {
                *v = g[ch] * (*v - mean[ch]) * invstd[ch] + b[ch];
            }
        }
        let value = Tensor::new(s, out).expect("batch_norm");
        let rg = self.any_grad(&[x, gamma, beta]);
        self.push(value, rg, Op::BatchNorm { x, gamma, beta, mean, invstd, batch_stats })
    }

    /// `x·wᵀ + b` over the last axis of `x`; `w` is `[O,K]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let k = *xs.last().expect("linear input rank");
        assert_eq!(ws.len(), 2, "linear weight must be [O,K]");
        assert_eq!(ws[1], k, "linear: input {xs:?} vs weight {ws:?}");
        let (m, o) = (self.value(x).numel() / k.max(1), ws[0]);
        let mut out = vec![0.0; m * o];
        kernels::gemm(m, k, o, 1.0, self.value(x).data(), (k, 1), self.value(w).data(), (1, k), 0.0, &mut out, (o, 1));
        if let Some(b) = b {
            let bias = self.value(b).data();
            assert_eq!(bias.len(), o, "linear bias length");
            for row in out.chunks_exact_mut(o) {
                row.iter_mut().zip(bias).for_each(|(v, bb)| *v += bb);
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = o;
        let value = Tensor::new(shape, out).expect("linear");
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        self.push(value, rg, Op::Linear { x, w, b })
    }

    /// Batched matrix product `[.., M, K] × [.., K, N]` with equal leading axes.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let r = sa.len();
        assert!(r >= 2 && sb.len() == r, "bmm rank mismatch {sa:?} {sb:?}");
        assert_eq!(sa[..r - 2], sb[..r - 2], "bmm batch axes differ");
        assert_eq!(sa[r - 1], sb[r - 2], "bmm inner extent {sa:?} {sb:?}");
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            kernels::gemm(
                m,
                k,
                n,
                1.0,
                &da[i * m * k..(i + 1) * m * k],
                (k, 1),
                &db[i * k * n..(i + 1) * k * n],
                (n, 1),
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
                (n, 1),
            );
        }
        let mut shape = sa;
        shape[r - 1] = n;
        let value = Tensor::new(shape, out).expect("bmm");
        let rg = self.any_grad(&[a, b]);
        self.push(value, rg, Op::Bmm(a, b))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let d = *src.shape().last().expect("softmax rank");
        let mut out = src.data().to_vec();
        for row in out.chunks_exact_mut(d) {
            softmax_in_place(row);
        }
        let value = Tensor::new(src.shape().to_vec(), out).expect("softmax");
        let rg = self.any_grad(&[x]);
        self.push(value, rg, Op::Softmax(x))
    }

    /// Layer norm over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let src = self.value(x);
        let d = *src.shape().last().expect("layer_norm rank");
        assert_eq!(self.value(gamma).numel(), d, "layer_norm gamma length");
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = src.numel() / d;
        let mut out = src.data().to_vec();
        let mut mean = Vec::with_capacity(rows);
        let mut invstd = Vec::with_capacity(rows);
        for row in out.chunks_exact_mut(d) {
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mu) * is * g[j] + b[j];
            }
            mean.push(mu);
            invstd.push(is);
        }
        let value = Tensor::new(src.shape().to_vec(), out).expect("layer_norm");
        let rg = self.any_grad(&[x, gamma, beta]);
        self.push(value, rg, Op::LayerNorm { x, gamma, beta, mean, invstd })
    }

    /// Mean softmax cross-entropy of `[N,K]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let src = self.value(logits);
        assert_eq!(src.ndim(), 2, "cross_entropy expects [N,K] logits");
        let (n, k) = (src.shape()[0], src.shape()[1]);
        assert_eq!(targets.len(), n, "cross_entropy target count");
        let mut probs = src.data().to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_exact_mut(k).zip(targets) {
            assert!(t < k, "target {t} out of range {k}");
            let lse = log_sum_exp(row);
            loss += lse - row[t];
            softmax_in_place(row);
        }
        let value = Tensor::scalar(loss / n as f64);
        let rg = self.any_grad(&[logits]);
        self.push(value, rg, Op::CrossEntropy { logits, targets: targets.to_vec(), probs })
    }

    /// Per-channel `(x − mean[c]) / std[c]` on `[N,C,H,W]`.
    pub fn standardize(&mut self, x: Var, mean: &[f64], std: &[f64]) -> Var {
        let c = mean.len();
        let shift = self.constant(Tensor::new([1, c, 1, 1], mean.to_vec()).expect("mean"));
        let inv = self.constant(Tensor::new([1, c, 1, 1], std.iter().map(|s| 1.0 / s).collect()).expect("std"));
        let centered = self.sub(x, shift);
        self.mul(centered, inv)
    }

    /// Populates gradients of every node that depends on a gradient leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::Gradient(format!("loss must be scalar, got shape {:?}", root.value.shape())));
        }
        if !root.requires_grad {
            return Err(Error::Gradient("loss does not depend on any parameter".into()));
        }
        if !root.value.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let seed = Tensor::ones(self.nodes[loss.0].value.shape().to_vec());
        self.nodes[loss.0].grad = Some(seed);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, dv) in contributions {
                debug_assert_eq!(dv.shape(), self.nodes[v.0].value.shape(), "grad shape for {:?}", self.nodes[i].op);
                let slot = &mut self.nodes[v.0].grad;
                match slot {
                    Some(acc) => acc.data_mut().iter_mut().zip(dv.data()).for_each(|(a, b)| *a += b),
                    None => *slot = Some(dv),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let out = &self.nodes[i].value;
        let mut res = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        res.push((v, reduce_to(g.clone(), self.shape(v))));
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    res.push((*a, reduce_to(g.clone(), self.shape(*a))));
                }
                if self.needs(*b) {
                    res.push((*b, reduce_to(g.map(|v| -v), self.shape(*b))));
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let other = expand(self.value(b), g.shape());
                    res.push((a, reduce_to(g.zip_map(&other, |x, y| x * y), self.shape(a))));
                }
                if self.needs(b) {
                    let other = expand(self.value(a), g.shape());
                    res.push((b, reduce_to(g.zip_map(&other, |x, y| x * y), self.shape(b))));
                }
            }
            Op::Scale(x, k) => {
                let k = *k;
                res.push((*x, g.map(|v| v * k)));
            }
            Op::Offset(x) => res.push((*x, g.clone())),
            Op::Relu(x) => res.push((*x, g.zip_map(out, |gv, y| if y > 0.0 { gv } else { 0.0 }))),
            Op::Sigmoid(x) => res.push((*x, g.zip_map(out, |gv, y| gv * y * (1.0 - y)))),
            Op::Gelu(x) => res.push((*x, g.zip_map(self.value(*x), |gv, xv| gv * gelu(xv).1))),
            Op::Pow(x, p) => {
                let p = *p;
                res.push((
                    *x,
                    g.zip_map(self.value(*x), |gv, xv| if xv > 0.0 { gv * p * xv.powf(p - 1.0) } else { 0.0 }),
                ));
            }
            Op::Sum(x) => res.push((*x, Tensor::full(self.shape(*x).to_vec(), g.item()))),
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                res.push((*x, Tensor::full(self.shape(*x).to_vec(), g.item() / n)));
            }
            Op::Reshape(x) => res.push((*x, g.clone().reshape(self.shape(*x).to_vec()).expect("reshape grad"))),
            Op::Permute(x, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                res.push((*x, permute_tensor(g, &inverse)));
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = split_axis(g.shape(), *axis);
                let mut at = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis];
                    if self.needs(v) {
                        let mut data = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + at) * inner;
                            data.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        res.push((v, Tensor::new(self.shape(v).to_vec(), data).expect("concat grad")));
                    }
                    at += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = self.shape(*x).to_vec();
                let (outer, len, inner) = split_axis(&shape, *axis);
                let taken = g.shape()[*axis];
                let mut data = vec![0.0; shape.iter().product()];
                for o in 0..outer {
                    let dst = (o * len + start) * inner;
                    let src = o * taken * inner;
                    data[dst..dst + taken * inner].copy_from_slice(&g.data()[src..src + taken * inner]);
                }
                res.push((*x, Tensor::new(shape, data).expect("slice grad")));
            }
            Op::IndexSelect { x, axis, indices } => {
                let shape = self.shape(*x).to_vec();
                let (outer, len, inner) = split_axis(&shape, *axis);
                let mut data = vec![0.0; shape.iter().product()];
                for o in 0..outer {
                    for (j, &idx) in indices.iter().enumerate() {
                        let src = (o * indices.len() + j) * inner;
                        let dst = (o * len + idx) * inner;
                        for t in 0..inner {
                            data[dst + t] += g.data()[src + t];
                        }
                    }
                }
                res.push((*x, Tensor::new(shape, data).expect("index_select grad")));
            }
            Op::Conv2d { x, w, b, geom } => self.conv2d_backward(*x, *w, *b, geom, g, &mut res),
            Op::MaxPool2d { x, argmax } => {
                let mut data = vec![0.0; self.value(*x).numel()];
                for (&at, &gv) in argmax.iter().zip(g.data()) {
                    data[at] += gv;
                }
                res.push((*x, Tensor::new(self.shape(*x).to_vec(), data).expect("pool grad")));
            }
            Op::Resize { x, ys, xs } => {
                let shape = self.shape(*x).to_vec();
                let r = shape.len();
                let (h, w) = (shape[r - 2], shape[r - 1]);
                let (ho, wo) = (ys.lo.len(), xs.lo.len());
                let planes = shape[..r - 2].iter().product::<usize>();
                let mut data = vec![0.0; planes * h * w];
                for p in 0..planes {
                    kernels::resize_plane_backward(
                        &g.data()[p * ho * wo..(p + 1) * ho * wo],
                        w,
                        ys,
                        xs,
                        &mut data[p * h * w..(p + 1) * h * w],
                    );
                }
                res.push((*x, Tensor::new(shape, data).expect("resize grad")));
            }
            Op::BatchNorm { x, gamma, beta, mean, invstd, batch_stats } => {
                self.batch_norm_backward(*x, *gamma, *beta, mean, invstd, *batch_stats, g, &mut res)
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let k = *xs.last().unwrap();
                let o = self.shape(*w)[0];
                let m = self.value(*x).numel() / k.max(1);
                if self.needs(*x) {
                    let mut dx = vec![0.0; m * k];
                    kernels::gemm(m, o, k, 1.0, g.data(), (o, 1), self.value(*w).data(), (k, 1), 0.0, &mut dx, (k, 1));
                    res.push((*x, Tensor::new(xs.to_vec(), dx).expect("linear dx")));
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; o * k];
                    kernels::gemm(o, m, k, 1.0, g.data(), (1, o), self.value(*x).data(), (k, 1), 0.0, &mut dw, (k, 1));
                    res.push((*w, Tensor::new(vec![o, k], dw).expect("linear dw")));
                }
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    let mut db = vec![0.0; o];
                    for row in g.data().chunks_exact(o) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    res.push((b, Tensor::new(vec![o], db).expect("linear db")));
                }
            }
            Op::Bmm(a, b) => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let r = sa.len();
                let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
                let batch: usize = sa[..r - 2].iter().product();
                let gd = g.data();
                if self.needs(*a) {
                    let bd = self.value(*b).data();
                    let mut da = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        kernels::gemm(
                            m,
                            n,
                            k,
                            1.0,
                            &gd[i * m * n..(i + 1) * m * n],
                            (n, 1),
                            &bd[i * k * n..(i + 1) * k * n],
                            (1, n),
                            0.0,
                            &mut da[i * m * k..(i + 1) * m * k],
                            (k, 1),
                        );
                    }
                    res.push((*a, Tensor::new(sa.to_vec(), da).expect("bmm da")));
                }
                if self.needs(*b) {
                    let ad = self.value(*a).data();
                    let mut db = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        kernels::gemm(
                            k,
                            m,
                            n,
                            1.0,
                            &ad[i * m * k..(i + 1) * m * k],
                            (1, k),
                            &gd[i * m * n..(i + 1) * m * n],
                            (n, 1),
                            0.0,
                            &mut db[i * k * n..(i + 1) * k * n],
                            (n, 1),
                        );
                    }
                    res.push((*b, Tensor::new(sb.to_vec(), db).expect("bmm db")));
                }
            }
            Op::Softmax(x) => {
                let d = *out.shape().last().unwrap();
                let mut dx = vec![0.0; out.numel()];
                for ((dst, y), gv) in
                    dx.chunks_exact_mut(d).zip(out.data().chunks_exact(d)).zip(g.data().chunks_exact(d))
                {
                    let dot: f64 = y.iter().zip(gv).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dst[j] = y[j] * (gv[j] - dot);
                    }
                }
                res.push((*x, Tensor::new(out.shape().to_vec(), dx).expect("softmax grad")));
            }
            Op::LayerNorm { x, gamma, beta, mean, invstd } => {
                let xv = self.value(*x);
                let d = *xv.shape().last().unwrap();
                let gam = self.value(*gamma).data();
                let mut dx = vec![0.0; xv.numel()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for (r, ((dst, xr), gr)) in
                    dx.chunks_exact_mut(d).zip(xv.data().chunks_exact(d)).zip(g.data().chunks_exact(d)).enumerate()
                {
                    let (mu, is) = (mean[r], invstd[r]);
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for j in 0..d {
                        let xhat = (xr[j] - mu) * is;
                        let gh = gr[j] * gam[j];
                        sum_g += gh;
                        sum_gx += gh * xhat;
                        dgamma[j] += gr[j] * xhat;
                        dbeta[j] += gr[j];
                    }
                    for j in 0..d {
                        let xhat = (xr[j] - mu) * is;
                        dst[j] = is / d as f64 * (d as f64 * gr[j] * gam[j] - sum_g - xhat * sum_gx);
                    }
                }
                if self.needs(*x) {
                    res.push((*x, Tensor::new(xv.shape().to_vec(), dx).expect("ln dx")));
                }
                if self.needs(*gamma) {
                    res.push((*gamma, Tensor::new(self.shape(*gamma).to_vec(), dgamma).expect("ln dgamma")));
                }
                if self.needs(*beta) {
                    res.push((*beta, Tensor::new(self.shape(*beta).to_vec(), dbeta).expect("ln dbeta")));
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let k = self.shape(*logits)[1];
                let n = targets.len() as f64;
                let scale = g.item() / n;
                let mut d = probs.clone();
                for (row, &t) in d.chunks_exact_mut(k).zip(targets) {
                    row[t] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                res.push((*logits, Tensor::new(self.shape(*logits).to_vec(), d).expect("ce grad")));
            }
        }
        res.retain(|(v, _)| self.needs(*v));
        res
    }

    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        g: &Tensor,
        res: &mut Vec<(Var, Tensor)>,
    ) {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (n, o) = (xs[0], ws[0]);
        let plane = geom.out_height() * geom.out_width();
        let rows = geom.col_rows();
        let in_size = xs[1] * xs[2] * xs[3];
        let weight = self.value(w).data();
        let input = self.value(x).data();
        let gd = g.data();
        let mut col = vec![0.0; rows * plane];
        if self.needs(x) {
            let mut dx = vec![0.0; n * in_size];
            for s in 0..n {
                let gs = &gd[s * o * plane..(s + 1) * o * plane];
                let dst = &mut dx[s * in_size..(s + 1) * in_size];
                if geom.is_pointwise() {
                    kernels::gemm(rows, o, plane, 1.0, weight, (1, rows), gs, (plane, 1), 0.0, dst, (plane, 1));
                } else {
                    kernels::gemm(rows, o, plane, 1.0, weight, (1, rows), gs, (plane, 1), 0.0, &mut col, (plane, 1));
                    kernels::col2im(&col, geom, dst);
                }
            }
            res.push((x, Tensor::new(xs.clone(), dx).expect("conv dx")));
        }
        if self.needs(w) {
            let mut dw = vec![0.0; o * rows];
            for s in 0..n {
                let img = &input[s * in_size..(s + 1) * in_size];
                let cols: &[f64] = if geom.is_pointwise() {
                    img
                } else {
                    kernels::im2col(img, geom, &mut col);
                    &col
                };
                let gs = &gd[s * o * plane..(s + 1) * o * plane];
                kernels::gemm(o, plane, rows, 1.0, gs, (plane, 1), cols, (1, plane), 1.0, &mut dw, (rows, 1));
            }
            res.push((w, Tensor::new(ws, dw).expect("conv dw")));
        }
        if let Some(b) = b.filter(|b| self.needs(*b)) {
            let mut db = vec![0.0; o];
            for (chunk, i) in gd.chunks_exact(plane).zip((0..o).cycle()) {
                db[i] += chunk.iter().sum::<f64>();
            }
            res.push((b, Tensor::new(vec![o], db).expect("conv db")));
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        invstd: &[f64],
        batch_stats: bool,
        g: &Tensor,
        res: &mut Vec<(Var, Tensor)>,
    ) {
        let xv = self.value(x);
        let s = xv.shape();
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let count = (n * plane) as f64;
        let gam = self.value(gamma).data();
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for (i, (xc, gc)) in xv.data().chunks_exact(plane).zip(g.data().chunks_exact(plane)).enumerate() {
            let ch = i % c;
            for (xi, gi) in xc.iter().zip(gc) {
                dgamma[ch] += gi * (xi - mean[ch]) * invstd[ch];
                dbeta[ch] += gi;
            }
        }
        if self.needs(x) {
            let mut dx = vec![0.0; xv.numel()];
            for (i, ((dst, xc), gc)) in dx
                .chunks_exact_mut(plane)
                .zip(xv.data().chunks_exact(plane))
                .zip(g.data().chunks_exact(plane))
                .enumerate()
            {
                let ch = i % c;
                let k = gam[ch] * invstd[ch];
                for j in 0..plane {
                    dst[j] = if batch_stats {
                        let xhat = (xc[j] - mean[ch]) * invstd[ch];
                        k / count * (count * gc[j] - dbeta[ch] - xhat * dgamma[ch])
                    } else {
                        k * gc[j]
                    };
                }
            }
            res.push((x, Tensor::new(s.to_vec(), dx).expect("bn dx")));
        }
        if self.needs(gamma) {
            res.push((gamma, Tensor::new(self.shape(gamma).to_vec(), dgamma).expect("bn dgamma")));
        }
        if self.needs(beta) {
            res.push((beta, Tensor::new(self.shape(beta).to_vec(), dbeta).expect("bn dbeta")));
        }
    }
}

fn permute_tensor(src: &Tensor, axes: &[usize]) -> Tensor {
    let in_strides = src.strides();
    let out_shape: Vec<usize> = axes.iter().map(|&a| src.shape()[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut data = vec![0.0; src.numel()];
    let s = src.data();
    kernels::for_each_strided(&out_shape, &strides, |flat, off| data[flat] = s[off]);
    Tensor::new(out_shape, data).expect("permute")
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}
