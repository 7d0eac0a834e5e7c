//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! The tape records every operation of a forward pass; `backward` walks it in
//! reverse and accumulates gradients for all leaves created with
//! `requires_grad`. All tensors are `ArrayD<f64>`; matrix ops expect 2-D
//! operands and image ops expect (C, H, W).

use ndarray::{Array2, ArrayD, Ix2, IxDyn};

pub type Tensor = ArrayD<f64>;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    /// (n, m) matrix plus a length-m row vector broadcast over rows.
    AddRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Ln(usize),
    Clamp(usize, f64, f64),
    SoftmaxRows(usize),
    Transpose(usize),
    ConcatRows(Vec<usize>),
    SliceRows(usize, usize, usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize, usize),
    /// Row gather; indices may repeat (embedding lookup).
    GatherRows(usize, Vec<usize>),
    /// Column-wise maximum of a 2-D matrix -> (1, m). Argmax rows cached.
    ColMax(usize, Vec<usize>),
    /// Sum of all entries -> (1, 1).
    SumAll(usize),
    /// y = x / sum(x), sum cached.
    NormalizeSum(usize, f64),
    /// (n, m) token matrix -> (n, n) with a_ij = exp(-||x_i - x_j||_2).
    PairExpNegDist(usize),
    /// Divide each row by its sum.
    RowNormalize(usize),
    /// input (C, H, W), kernel (O, C, kh, kw) -> (O, H', W'), zero padding.
    Conv2d {
        input: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    /// (C, H, W) + per-channel bias (C).
    AddChan(usize, usize),
    /// Per-channel normalization over the spatial extent with learned scale
    /// and shift (batch norm with a single instance in the batch).
    ChannelNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
    },
    /// Nearest-neighbour upsample of (C, H, W) by an integer factor.
    Upsample(usize, usize),
    /// Zero insertion between pixels (stride) plus trailing zero rows/cols
    /// (extra); the expansion step of a strided transposed convolution.
    ZeroInsert(usize, usize, usize),
    /// Symmetric (edge-inclusive mirror) padding of (C, H, W).
    ReflectPad(usize, usize),
    Reshape(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn as2(t: &Tensor) -> ndarray::ArrayView2<'_, f64> {
    t.view()
        .into_dimensionality::<Ix2>()
        .expect("expected a 2-D tensor")
}

fn to2(t: &Tensor) -> Array2<f64> {
    as2(t).to_owned()
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "scalar() on a non-scalar var");
        *t.iter().next().unwrap()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let va = as2(self.value(a));
        let vb = as2(self.value(b));
        assert_eq!(va.ncols(), vb.nrows(), "matmul shape mismatch");
        let out = va.dot(&vb).into_dyn();
        let g = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a.0, b.0), g)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "elementwise shape mismatch"
        );
        let mut out = self.value(a).clone();
        out.zip_mut_with(self.value(b), |x, &y| *x = f(*x, y));
        let g = self.ng(a) || self.ng(b);
        self.push(out, op, g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a.0, b.0))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let m = as2(self.value(a)).ncols();
        assert_eq!(self.value(row).len(), m, "bias length mismatch");
        let rowv: Vec<f64> = self.value(row).iter().copied().collect();
        let mut out = to2(self.value(a));
        for mut r in out.rows_mut() {
            for (x, b) in r.iter_mut().zip(&rowv) {
                *x += b;
            }
        }
        let g = self.ng(a) || self.ng(row);
        self.push(out.into_dyn(), Op::AddRow(a.0, row.0), g)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).mapv(f);
        let g = self.ng(a);
        self.push(out, op, g)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a.0, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a.0))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a.0))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a.0, lo, hi))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = as2(self.value(a));
        let mut out = v.to_owned();
        for mut row in out.rows_mut() {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let g = self.ng(a);
        self.push(out.into_dyn(), Op::SoftmaxRows(a.0), g)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = as2(self.value(a)).t().to_owned().into_dyn();
        let g = self.ng(a);
        self.push(out, Op::Transpose(a.0), g)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| as2(self.value(*v))).collect();
        let out = ndarray::concatenate(ndarray::Axis(0), &views).expect("concat_rows");
        let g = parts.iter().any(|v| self.ng(*v));
        self.push(
            out.into_dyn(),
            Op::ConcatRows(parts.iter().map(|v| v.0).collect()),
            g,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| as2(self.value(*v))).collect();
        let out = ndarray::concatenate(ndarray::Axis(1), &views).expect("concat_cols");
        let g = parts.iter().any(|v| self.ng(*v));
        self.push(
            out.into_dyn(),
            Op::ConcatCols(parts.iter().map(|v| v.0).collect()),
            g,
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = as2(self.value(a));
        assert!(start <= end && end <= v.nrows());
        let out = v.slice(ndarray::s![start..end, ..]).to_owned().into_dyn();
        let g = self.ng(a);
        self.push(out, Op::SliceRows(a.0, start, end), g)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = as2(self.value(a));
        assert!(start <= end && end <= v.ncols());
        let out = v.slice(ndarray::s![.., start..end]).to_owned().into_dyn();
        let g = self.ng(a);
        self.push(out, Op::SliceCols(a.0, start, end), g)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let v = as2(self.value(a));
        let mut out = Array2::<f64>::zeros((idx.len(), v.ncols()));
        for (i, &r) in idx.iter().enumerate() {
            out.row_mut(i).assign(&v.row(r));
        }
        let g = self.ng(a);
        self.push(out.into_dyn(), Op::GatherRows(a.0, idx.to_vec()), g)
    }

    pub fn col_max(&mut self, a: Var) -> Var {
        let v = as2(self.value(a));
        let mut out = Array2::<f64>::zeros((1, v.ncols()));
        let mut arg = vec![0usize; v.ncols()];
        for c in 0..v.ncols() {
            let mut best = f64::NEG_INFINITY;
            for r in 0..v.nrows() {
                if v[[r, c]] > best {
                    best = v[[r, c]];
                    arg[c] = r;
                }
            }
            out[[0, c]] = best;
        }
        let g = self.ng(a);
        self.push(out.into_dyn(), Op::ColMax(a.0, arg), g)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let g = self.ng(a);
        self.push(
            Tensor::from_elem(IxDyn(&[1, 1]), s),
            Op::SumAll(a.0),
            g,
        )
    }

    pub fn normalize_sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        assert!(s != 0.0, "normalize_sum of all-zero tensor");
        let out = self.value(a).mapv(|x| x / s);
        let g = self.ng(a);
        self.push(out, Op::NormalizeSum(a.0, s), g)
    }

    pub fn pair_exp_neg_dist(&mut self, a: Var) -> Var {
        let v = as2(self.value(a));
        let n = v.nrows();
        let mut out = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            out[[i, i]] = 1.0;
            for j in (i + 1)..n {
                let mut d2 = 0.0;
                for c in 0..v.ncols() {
                    let diff = v[[i, c]] - v[[j, c]];
                    d2 += diff * diff;
                }
                let w = (-d2.sqrt()).exp();
                out[[i, j]] = w;
                out[[j, i]] = w;
            }
        }
        let g = self.ng(a);
        self.push(out.into_dyn(), Op::PairExpNegDist(a.0), g)
    }

    pub fn row_normalize(&mut self, a: Var) -> Var {
        let v = as2(self.value(a));
        let mut out = v.to_owned();
        for mut row in out.rows_mut() {
            let s: f64 = row.sum();
            assert!(s != 0.0, "row_normalize with zero row sum");
            row.mapv_inplace(|x| x / s);
        }
        let g = self.ng(a);
        self.push(out.into_dyn(), Op::RowNormalize(a.0), g)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Var {
        let out = conv2d_forward(self.value(input), self.value(kernel), stride, pad);
        let g = self.ng(input) || self.ng(kernel);
        self.push(
            out,
            Op::Conv2d {
                input: input.0,
                kernel: kernel.0,
                stride,
                pad,
            },
            g,
        )
    }

    pub fn add_chan(&mut self, a: Var, bias: Var) -> Var {
        let v = self.value(a);
        assert_eq!(v.ndim(), 3);
        let c = v.shape()[0];
        assert_eq!(self.value(bias).len(), c);
        let bv: Vec<f64> = self.value(bias).iter().copied().collect();
        let mut out = v.clone();
        for (ch, mut plane) in out.outer_iter_mut().enumerate() {
            plane.mapv_inplace(|x| x + bv[ch]);
        }
        let g = self.ng(a) || self.ng(bias);
        self.push(out, Op::AddChan(a.0, bias.0), g)
    }

    pub fn channel_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let v = self.value(x);
        assert_eq!(v.ndim(), 3);
        let c = v.shape()[0];
        assert_eq!(self.value(gamma).len(), c);
        assert_eq!(self.value(beta).len(), c);
        let gv: Vec<f64> = self.value(gamma).iter().copied().collect();
        let bv: Vec<f64> = self.value(beta).iter().copied().collect();
        let mut out = v.clone();
        for (ch, mut plane) in out.outer_iter_mut().enumerate() {
            let n = plane.len() as f64;
            let mu = plane.sum() / n;
            let var = plane.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            plane.mapv_inplace(|x| gv[ch] * (x - mu) * inv + bv[ch]);
        }
        let g = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::ChannelNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
            },
            g,
        )
    }

    pub fn upsample_nearest(&mut self, a: Var, factor: usize) -> Var {
        let v = self.value(a);
        assert_eq!(v.ndim(), 3);
        let (c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        let mut out = Tensor::zeros(IxDyn(&[c, h * factor, w * factor]));
        for ch in 0..c {
            for y in 0..h * factor {
                for x in 0..w * factor {
                    out[[ch, y, x]] = v[[ch, y / factor, x / factor]];
                }
            }
        }
        let g = self.ng(a);
        self.push(out, Op::Upsample(a.0, factor), g)
    }

    pub fn zero_insert(&mut self, a: Var, stride: usize, extra: usize) -> Var {
        let v = self.value(a);
        assert_eq!(v.ndim(), 3);
        let (c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        let oh = (h - 1) * stride + 1 + extra;
        let ow = (w - 1) * stride + 1 + extra;
        let mut out = Tensor::zeros(IxDyn(&[c, oh, ow]));
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[[ch, y * stride, x * stride]] = v[[ch, y, x]];
                }
            }
        }
        let g = self.ng(a);
        self.push(out, Op::ZeroInsert(a.0, stride, extra), g)
    }

    pub fn reflect_pad(&mut self, a: Var, p: usize) -> Var {
        let v = self.value(a);
        assert_eq!(v.ndim(), 3);
        let (c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        let mut out = Tensor::zeros(IxDyn(&[c, h + 2 * p, w + 2 * p]));
        for ch in 0..c {
            for y in 0..h + 2 * p {
                for x in 0..w + 2 * p {
                    out[[ch, y, x]] = v[[ch, mirror(y, p, h), mirror(x, p, w)]];
                }
            }
        }
        let g = self.ng(a);
        self.push(out, Op::ReflectPad(a.0, p), g)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a);
        assert_eq!(v.len(), shape.iter().product::<usize>());
        // Copy in logical order so non-contiguous inputs (e.g. transposes)
        // reshape correctly.
        let out = Tensor::from_shape_vec(IxDyn(shape), v.iter().cloned().collect())
            .expect("reshape");
        let g = self.ng(a);
        self.push(out, Op::Reshape(a.0), g)
    }

    /// Gradient of `root` (a 1x1 scalar) w.r.t. every node; entries are None
    /// for nodes that do not require a gradient.
    pub fn backward(&self, root: Var) -> Vec<Option<Tensor>> {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::from_elem(self.value(root).raw_dim(), 1.0));
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.accumulate(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        grads
    }

    fn acc(&self, grads: &mut Vec<Option<Tensor>>, idx: usize, delta: Tensor) {
        if !self.nodes[idx].needs_grad {
            return;
        }
        match &mut grads[idx] {
            Some(g) => *g += &delta,
            // Stored gradients must be standard layout so callers can read
            // them as flat slices; transpose backward produces views with
            // reversed strides.
            slot @ None => {
                let d = if delta.is_standard_layout() {
                    delta
                } else {
                    delta.as_standard_layout().into_owned()
                };
                *slot = Some(d);
            }
        }
    }

    #[allow(clippy::too_many_lines)]
    fn accumulate(&self, i: usize, gy: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let va = as2(&self.nodes[*a].value);
                let vb = as2(&self.nodes[*b].value);
                let g = as2(gy);
                if self.nodes[*a].needs_grad {
                    self.acc(grads, *a, g.dot(&vb.t()).into_dyn());
                }
                if self.nodes[*b].needs_grad {
                    self.acc(grads, *b, va.t().dot(&g).into_dyn());
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, gy.clone());
                self.acc(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, gy.clone());
                self.acc(grads, *b, gy.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.nodes[*a].needs_grad {
                    let mut d = gy.clone();
                    d.zip_mut_with(&self.nodes[*b].value, |x, &y| *x *= y);
                    self.acc(grads, *a, d);
                }
                if self.nodes[*b].needs_grad {
                    let mut d = gy.clone();
                    d.zip_mut_with(&self.nodes[*a].value, |x, &y| *x *= y);
                    self.acc(grads, *b, d);
                }
            }
            Op::Div(a, b) => {
                if self.nodes[*a].needs_grad {
                    let mut d = gy.clone();
                    d.zip_mut_with(&self.nodes[*b].value, |x, &y| *x /= y);
                    self.acc(grads, *a, d);
                }
                if self.nodes[*b].needs_grad {
                    let mut d = gy.clone();
                    d.zip_mut_with(&self.nodes[*a].value, |x, &y| *x *= y);
                    d.zip_mut_with(&self.nodes[*b].value, |x, &y| *x = -*x / (y * y));
                    self.acc(grads, *b, d);
                }
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, gy.clone());
                if self.nodes[*row].needs_grad {
                    let g = as2(gy);
                    let summed = g.sum_axis(ndarray::Axis(0));
                    let shape = self.nodes[*row].value.raw_dim();
                    let d = summed.into_dyn().into_shape_with_order(shape).unwrap();
                    self.acc(grads, *row, d);
                }
            }
            Op::Scale(a, c) => self.acc(grads, *a, gy.mapv(|x| x * c)),
            Op::AddScalar(a) => self.acc(grads, *a, gy.clone()),
            Op::Relu(a) => {
                let mut d = gy.clone();
                d.zip_mut_with(&self.nodes[*a].value, |x, &v| {
                    if v <= 0.0 {
                        *x = 0.0;
                    }
                });
                self.acc(grads, *a, d);
            }
            Op::Tanh(a) => {
                let mut d = gy.clone();
                d.zip_mut_with(&self.nodes[i].value, |x, &y| *x *= 1.0 - y * y);
                self.acc(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = gy.clone();
                d.zip_mut_with(&self.nodes[i].value, |x, &y| *x *= y * (1.0 - y));
                self.acc(grads, *a, d);
            }
            Op::Exp(a) => {
                let mut d = gy.clone();
                d.zip_mut_with(&self.nodes[i].value, |x, &y| *x *= y);
                self.acc(grads, *a, d);
            }
            Op::Ln(a) => {
                let mut d = gy.clone();
                d.zip_mut_with(&self.nodes[*a].value, |x, &v| *x /= v);
                self.acc(grads, *a, d);
            }
            Op::Clamp(a, lo, hi) => {
                let mut d = gy.clone();
                d.zip_mut_with(&self.nodes[*a].value, |x, &v| {
                    if v < *lo || v > *hi {
                        *x = 0.0;
                    }
                });
                self.acc(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let y = as2(&self.nodes[i].value);
                let g = as2(gy);
                let mut d = g.to_owned();
                for r in 0..y.nrows() {
                    let dot: f64 = (0..y.ncols()).map(|c| g[[r, c]] * y[[r, c]]).sum();
                    for c in 0..y.ncols() {
                        d[[r, c]] = y[[r, c]] * (g[[r, c]] - dot);
                    }
                }
                self.acc(grads, *a, d.into_dyn());
            }
            Op::Transpose(a) => {
                self.acc(grads, *a, as2(gy).t().to_owned().into_dyn());
            }
            Op::ConcatRows(parts) => {
                let g = as2(gy);
                let mut r0 = 0;
                for &p in parts {
                    let n = as2(&self.nodes[p].value).nrows();
                    if self.nodes[p].needs_grad {
                        let d = g.slice(ndarray::s![r0..r0 + n, ..]).to_owned().into_dyn();
                        self.acc(grads, p, d);
                    }
                    r0 += n;
                }
            }
            Op::ConcatCols(parts) => {
                let g = as2(gy);
                let mut c0 = 0;
                for &p in parts {
                    let n = as2(&self.nodes[p].value).ncols();
                    if self.nodes[p].needs_grad {
                        let d = g.slice(ndarray::s![.., c0..c0 + n]).to_owned().into_dyn();
                        self.acc(grads, p, d);
                    }
                    c0 += n;
                }
            }
            Op::SliceRows(a, start, _end) => {
                let shape = self.nodes[*a].value.raw_dim();
                let mut d = Tensor::zeros(shape);
                {
                    let mut d2 = d.view_mut().into_dimensionality::<Ix2>().unwrap();
                    let g = as2(gy);
                    d2.slice_mut(ndarray::s![*start..*start + g.nrows(), ..])
                        .assign(&g);
                }
                self.acc(grads, *a, d);
            }
            Op::SliceCols(a, start, _end) => {
                let shape = self.nodes[*a].value.raw_dim();
                let mut d = Tensor::zeros(shape);
                {
                    let mut d2 = d.view_mut().into_dimensionality::<Ix2>().unwrap();
                    let g = as2(gy);
                    d2.slice_mut(ndarray::s![.., *start..*start + g.ncols()])
                        .assign(&g);
                }
                self.acc(grads, *a, d);
            }
            Op::GatherRows(a, idx) => {
                let shape = self.nodes[*a].value.raw_dim();
                let mut d = Tensor::zeros(shape);
                {
                    let mut d2 = d.view_mut().into_dimensionality::<Ix2>().unwrap();
                    let g = as2(gy);
                    for (i_out, &r) in idx.iter().enumerate() {
                        let mut dst = d2.row_mut(r);
                        dst += &g.row(i_out);
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::ColMax(a, arg) => {
                let shape = self.nodes[*a].value.raw_dim();
                let mut d = Tensor::zeros(shape);
                {
                    let mut d2 = d.view_mut().into_dimensionality::<Ix2>().unwrap();
                    let g = as2(gy);
                    for (c, &r) in arg.iter().enumerate() {
                        d2[[r, c]] = g[[0, c]];
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::SumAll(a) => {
                let g0 = *gy.iter().next().unwrap();
                let shape = self.nodes[*a].value.raw_dim();
                self.acc(grads, *a, Tensor::from_elem(shape, g0));
            }
            Op::NormalizeSum(a, s) => {
                let y = &self.nodes[i].value;
                let dot: f64 = gy.iter().zip(y.iter()).map(|(g, v)| g * v).sum();
                let mut d = gy.clone();
                d.zip_mut_with(y, |x, _| *x -= dot);
                d.mapv_inplace(|x| x / s);
                self.acc(grads, *a, d);
            }
            Op::PairExpNegDist(a) => {
                let x = as2(&self.nodes[*a].value);
                let y = as2(&self.nodes[i].value);
                let g = as2(gy);
                let n = x.nrows();
                let m = x.ncols();
                let mut d = Array2::<f64>::zeros((n, m));
                for p in 0..n {
                    for q in 0..n {
                        if p == q {
                            continue;
                        }
                        let mut dist = 0.0;
                        for c in 0..m {
                            let diff = x[[p, c]] - x[[q, c]];
                            dist += diff * diff;
                        }
                        let dist = dist.sqrt();
                        if dist < 1e-12 {
                            continue;
                        }
                        // d a_pq / d x_p = -a_pq (x_p - x_q) / dist
                        let coef = -g[[p, q]] * y[[p, q]] / dist;
                        for c in 0..m {
                            let diff = x[[p, c]] - x[[q, c]];
                            d[[p, c]] += coef * diff;
                            d[[q, c]] -= coef * diff;
                        }
                    }
                }
                self.acc(grads, *a, d.into_dyn());
            }
            Op::RowNormalize(a) => {
                let x = as2(&self.nodes[*a].value);
                let y = as2(&self.nodes[i].value);
                let g = as2(gy);
                let mut d = Array2::<f64>::zeros((x.nrows(), x.ncols()));
                for r in 0..x.nrows() {
                    let s: f64 = x.row(r).sum();
                    let dot: f64 = (0..x.ncols()).map(|c| g[[r, c]] * y[[r, c]]).sum();
                    for c in 0..x.ncols() {
                        d[[r, c]] = (g[[r, c]] - dot) / s;
                    }
                }
                self.acc(grads, *a, d.into_dyn());
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            } => {
                let (din, dker) = conv2d_backward(
                    &self.nodes[*input].value,
                    &self.nodes[*kernel].value,
                    gy,
                    *stride,
                    *pad,
                    self.nodes[*input].needs_grad,
                    self.nodes[*kernel].needs_grad,
                );
                if let Some(d) = din {
                    self.acc(grads, *input, d);
                }
                if let Some(d) = dker {
                    self.acc(grads, *kernel, d);
                }
            }
            Op::AddChan(a, bias) => {
                self.acc(grads, *a, gy.clone());
                if self.nodes[*bias].needs_grad {
                    let c = gy.shape()[0];
                    let mut d = Tensor::zeros(self.nodes[*bias].value.raw_dim());
                    for ch in 0..c {
                        d[ch] = gy.index_axis(ndarray::Axis(0), ch).sum();
                    }
                    self.acc(grads, *bias, d);
                }
            }
            Op::ChannelNorm { x, gamma, beta, eps } => {
                let xv = &self.nodes[*x].value;
                let gv: Vec<f64> = self.nodes[*gamma].value.iter().copied().collect();
                let c = xv.shape()[0];
                let mut dx = Tensor::zeros(xv.raw_dim());
                let mut dgamma = Tensor::zeros(self.nodes[*gamma].value.raw_dim());
                let mut dbeta = Tensor::zeros(self.nodes[*beta].value.raw_dim());
                for ch in 0..c {
                    let plane = xv.index_axis(ndarray::Axis(0), ch);
                    let gplane = gy.index_axis(ndarray::Axis(0), ch);
                    let n = plane.len() as f64;
                    let mu = plane.sum() / n;
                    let var = plane.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = plane.iter().map(|v| (v - mu) * inv).collect();
                    let dy: Vec<f64> = gplane.iter().copied().collect();
                    dgamma[ch] = dy.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    dbeta[ch] = dy.iter().sum();
                    let mean_dy = dbeta[ch] / n;
                    let mean_dyxhat = dgamma[ch] / n;
                    let mut dplane = dx.index_axis_mut(ndarray::Axis(0), ch);
                    for (k, slot) in dplane.iter_mut().enumerate() {
                        *slot = gv[ch] * inv * (dy[k] - mean_dy - xhat[k] * mean_dyxhat);
                    }
                }
                self.acc(grads, *x, dx);
                if self.nodes[*gamma].needs_grad {
                    self.acc(grads, *gamma, dgamma);
                }
                if self.nodes[*beta].needs_grad {
                    self.acc(grads, *beta, dbeta);
                }
            }
            Op::Upsample(a, factor) => {
                let src = &self.nodes[*a].value;
                let (c, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2]);
                let mut d = Tensor::zeros(src.raw_dim());
                for ch in 0..c {
                    for y in 0..h * factor {
                        for x in 0..w * factor {
                            d[[ch, y / factor, x / factor]] += gy[[ch, y, x]];
                        }
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::ZeroInsert(a, stride, _extra) => {
                let src = &self.nodes[*a].value;
                let (c, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2]);
                let mut d = Tensor::zeros(src.raw_dim());
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            d[[ch, y, x]] = gy[[ch, y * stride, x * stride]];
                        }
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::ReflectPad(a, p) => {
                let src = &self.nodes[*a].value;
                let (c, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2]);
                let mut d = Tensor::zeros(src.raw_dim());
                for ch in 0..c {
                    for y in 0..h + 2 * p {
                        for x in 0..w + 2 * p {
                            d[[ch, mirror(y, *p, h), mirror(x, *p, w)]] += gy[[ch, y, x]];
                        }
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::Reshape(a) => {
                let shape = self.nodes[*a].value.raw_dim();
                let d = Tensor::from_shape_vec(shape, gy.iter().cloned().collect()).unwrap();
                self.acc(grads, *a, d);
            }
        }
    }
}

/// Mirror index for symmetric padding: positions -1 and `n` map to 0 and n-1.
fn mirror(i: usize, p: usize, n: usize) -> usize {
    let i = i as i64 - p as i64;
    let n = n as i64;
    let m = if i < 0 {
        -i - 1
    } else if i >= n {
        2 * n - 1 - i
    } else {
        i
    };
    m.clamp(0, n - 1) as usize
}

fn conv_out_dim(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// im2col: (C,H,W) input to a (OH*OW, C*kh*kw) patch matrix.
fn im2col(input: &Tensor, kh: usize, kw: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    // Flat-slice copies per kernel row; dynamic-dim indexing here dominates
    // decoder runtime otherwise.
    let standard = input.as_standard_layout();
    let src = standard.as_slice().expect("standard layout");
    let mut cols = Array2::<f64>::zeros((oh * ow, c * kh * kw));
    let dst = cols.as_slice_mut().expect("freshly allocated");
    let row_w = c * kh * kw;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = oy * ow + ox;
            let base = row * row_w;
            for ch in 0..c {
                for dy in 0..kh {
                    let iy = (oy * stride + dy) as i64 - pad as i64;
                    let col0 = base + (ch * kh + dy) * kw;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    let src_row = (ch * h + iy as usize) * w;
                    let ix0 = ox as i64 * stride as i64 - pad as i64;
                    let dx_lo = (-ix0).max(0) as usize;
                    let dx_hi = kw.min((w as i64 - ix0).max(0) as usize);
                    if dx_lo < dx_hi {
                        let s0 = (ix0 + dx_lo as i64) as usize;
                        dst[col0 + dx_lo..col0 + dx_hi]
                            .copy_from_slice(&src[src_row + s0..src_row + s0 + dx_hi - dx_lo]);
                    }
                }
            }
        }
    }
    cols
}

fn conv2d_forward(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Tensor {
    assert_eq!(input.ndim(), 3);
    assert_eq!(kernel.ndim(), 4);
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (o, kc, kh, kw) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    assert_eq!(c, kc, "conv2d channel mismatch");
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    let cols = im2col(input, kh, kw, stride, pad);
    let kmat = kernel
        .view()
        .into_shape_with_order((o, kc * kh * kw))
        .unwrap();
    let out_mat = cols.dot(&kmat.t()); // (OH*OW, O)
    let transposed = out_mat.t().as_standard_layout().into_owned(); // (O, OH*OW)
    let (flat, _) = transposed.into_raw_vec_and_offset();
    Tensor::from_shape_vec(IxDyn(&[o, oh, ow]), flat).expect("conv output shape")
}

fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    gy: &Tensor,
    stride: usize,
    pad: usize,
    want_dinput: bool,
    want_dkernel: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (o, _, kh, kw) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    let (oh, ow) = (gy.shape()[1], gy.shape()[2]);
    let gy_std = gy.as_standard_layout();
    let gmat = ndarray::ArrayView2::from_shape((o, oh * ow), gy_std.as_slice().unwrap())
        .unwrap()
        .t()
        .as_standard_layout()
        .into_owned();
    let dkernel = if want_dkernel {
        let cols = im2col(input, kh, kw, stride, pad);
        let dk = gmat.t().dot(&cols); // (O, C*kh*kw)
        Some(
            dk.into_shape_with_order(IxDyn(&[o, c, kh, kw]))
                .unwrap(),
        )
    } else {
        None
    };
    let dinput = if want_dinput {
        let kmat = kernel
            .view()
            .into_shape_with_order((o, c * kh * kw))
            .unwrap();
        let dcols = gmat.dot(&kmat); // (OH*OW, C*kh*kw)
        let dsrc = dcols.as_slice().expect("dot output is standard layout");
        let mut din = Tensor::zeros(IxDyn(&[c, h, w]));
        let dflat = din.as_slice_mut().expect("freshly allocated");
        let row_w = c * kh * kw;
        for oy in 0..oh {
            for ox in 0..ow {
                let base = (oy * ow + ox) * row_w;
                for ch in 0..c {
                    for dy in 0..kh {
                        let iy = (oy * stride + dy) as i64 - pad as i64;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        let col0 = base + (ch * kh + dy) * kw;
                        let dst_row = (ch * h + iy as usize) * w;
                        let ix0 = ox as i64 * stride as i64 - pad as i64;
                        let dx_lo = (-ix0).max(0) as usize;
                        let dx_hi = kw.min((w as i64 - ix0).max(0) as usize);
                        let d0 = (ix0 + dx_lo as i64) as usize;
                        for k in 0..dx_hi.saturating_sub(dx_lo) {
                            dflat[dst_row + d0 + k] += dsrc[col0 + dx_lo + k];
                        }
                    }
                }
            }
        }
        Some(din)
    } else {
        None
    };
    (dinput, dkernel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    /// Central finite differences of `f` w.r.t. leaf `idx` of the freshly
    /// rebuilt graph, compared against the tape gradient.
    fn check_grad(
        build: &dyn Fn(&mut Tape, &[Tensor]) -> Var,
        leaves: &[Tensor],
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let root = build(&mut tape, leaves);
        let grads = tape.backward(root);
        let step = 1e-5;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads[li].as_ref().expect("missing gradient").clone();
            for flat in 0..leaf.len() {
                let mut plus = leaves.to_vec();
                let mut minus = leaves.to_vec();
                plus[li].as_slice_mut().unwrap()[flat] += step;
                minus[li].as_slice_mut().unwrap()[flat] -= step;
                let mut tp = Tape::new();
                let rp = build(&mut tp, &plus);
                let mut tm = Tape::new();
                let rm = build(&mut tm, &minus);
                let fd = (tp.scalar(rp) - tm.scalar(rm)) / (2.0 * step);
                let an = analytic.as_slice().unwrap()[flat];
                let denom = an.abs().max(fd.abs()).max(1.0);
                assert!(
                    (an - fd).abs() / denom < tol,
                    "leaf {li} flat {flat}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn matmul_bias_activation_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let leaves = vec![
            rand_tensor(&mut rng, &[3, 4]),
            rand_tensor(&mut rng, &[4, 5]),
            rand_tensor(&mut rng, &[5]),
        ];
        check_grad(
            &|t, l| {
                let a = t.leaf(l[0].clone(), true);
                let b = t.leaf(l[1].clone(), true);
                let bias = t.leaf(l[2].clone(), true);
                let x = t.matmul(a, b);
                let x = t.add_row(x, bias);
                let x = t.tanh(x);
                let x = t.sigmoid(x);
                t.sum_all(x)
            },
            &leaves,
            1e-6,
        );
    }

    #[test]
    fn softmax_and_slicing() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let leaves = vec![rand_tensor(&mut rng, &[4, 6])];
        check_grad(
            &|t, l| {
                let a = t.leaf(l[0].clone(), true);
                let s = t.softmax_rows(a);
                let top = t.slice_rows(s, 0, 2);
                let bottom = t.slice_rows(s, 2, 4);
                let prod = t.mul(top, bottom);
                let left = t.slice_cols(prod, 0, 3);
                let right = t.slice_cols(prod, 3, 6);
                let cat = t.concat_cols(&[left, right]);
                let e = t.exp(cat);
                t.sum_all(e)
            },
            &leaves,
            1e-6,
        );
    }

    #[test]
    fn gather_colmax_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let leaves = vec![rand_tensor(&mut rng, &[5, 4])];
        check_grad(
            &|t, l| {
                let a = t.leaf(l[0].clone(), true);
                let g = t.gather_rows(a, &[0, 2, 2, 4]);
                let m = t.col_max(g);
                let e = t.exp(m);
                let n = t.normalize_sum(e);
                let lg = t.ln(n);
                let s = t.sum_all(lg);
                t.scale(s, -1.0)
            },
            &leaves,
            1e-6,
        );
    }

    #[test]
    fn adjacency_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let leaves = vec![rand_tensor(&mut rng, &[5, 3])];
        check_grad(
            &|t, l| {
                let a = t.leaf(l[0].clone(), true);
                let pre = t.pair_exp_neg_dist(a);
                let norm = t.row_normalize(pre);
                let s = t.matmul(norm, a);
                let s = t.relu(s);
                t.sum_all(s)
            },
            &leaves,
            1e-5,
        );
    }

    #[test]
    fn conv_and_norm_stack() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let leaves = vec![
            rand_tensor(&mut rng, &[2, 5, 5]),
            rand_tensor(&mut rng, &[3, 2, 3, 3]),
            rand_tensor(&mut rng, &[3]),
            rand_tensor(&mut rng, &[3]),
            rand_tensor(&mut rng, &[3]),
        ];
        check_grad(
            &|t, l| {
                let x = t.leaf(l[0].clone(), true);
                let k = t.leaf(l[1].clone(), true);
                let b = t.leaf(l[2].clone(), true);
                let gamma = t.leaf(l[3].clone(), true);
                let beta = t.leaf(l[4].clone(), true);
                let y = t.conv2d(x, k, 1, 1);
                let y = t.add_chan(y, b);
                let y = t.channel_norm(y, gamma, beta, 1e-5);
                let y = t.tanh(y);
                t.sum_all(y)
            },
            &leaves,
            1e-5,
        );
    }

    #[test]
    fn deconv_path_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let leaves = vec![
            rand_tensor(&mut rng, &[2, 3, 3]),
            rand_tensor(&mut rng, &[1, 2, 5, 5]),
        ];
        check_grad(
            &|t, l| {
                let x = t.leaf(l[0].clone(), true);
                let k = t.leaf(l[1].clone(), true);
                let up = t.upsample_nearest(x, 2);
                let z = t.zero_insert(up, 2, 1);
                let p = t.reflect_pad(z, 1);
                let y = t.conv2d(p, k, 1, 0);
                let y = t.sigmoid(y);
                t.sum_all(y)
            },
            &leaves,
            1e-5,
        );
    }

    #[test]
    fn strided_conv_matches_manual() {
        // 1x1 stride-2 conv is spatial subsampling plus a channel mix.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, &[2, 4, 4]);
        let k = rand_tensor(&mut rng, &[3, 2, 1, 1]);
        let y = conv2d_forward(&x, &k, 2, 0);
        assert_eq!(y.shape(), &[3, 2, 2]);
        for oy in 0..2 {
            for ox in 0..2 {
                for o in 0..3 {
                    let manual: f64 =
                        (0..2).map(|c| k[[o, c, 0, 0]] * x[[c, oy * 2, ox * 2]]).sum();
                    assert!((y[[o, oy, ox]] - manual).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn reshape_transpose_roundtrip_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let leaves = vec![rand_tensor(&mut rng, &[4, 6])];
        check_grad(
            &|t, l| {
                let a = t.leaf(l[0].clone(), true);
                let tr = t.transpose(a);
                let r = t.reshape(tr, &[2, 3, 4]);
                let e = t.exp(r);
                t.sum_all(e)
            },
            &leaves,
            1e-6,
        );
    }

    #[test]
    fn clamp_div_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut a = rand_tensor(&mut rng, &[3, 3]);
        a.mapv_inplace(|x| x + 2.0); // keep away from clamp edges and zero
        let b = rand_tensor(&mut rng, &[3, 3]).mapv(|x| x + 3.0);
        check_grad(
            &|t, l| {
                let a = t.leaf(l[0].clone(), true);
                let b = t.leaf(l[1].clone(), true);
                let c = t.clamp(a, 0.5, 10.0);
                let d = t.div(c, b);
                let s = t.sub(d, a);
                let m = t.mul(s, b);
                t.sum_all(m)
            },
            &[a, b],
            1e-6,
        );
    }
}
