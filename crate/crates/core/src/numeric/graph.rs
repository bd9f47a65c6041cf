//! Define-by-run reverse-mode autodiff.
//!
//! A [`Graph`] records every operation applied during one forward pass as a
//! node in topological order. [`Graph::backward`] walks the nodes in reverse
//! and accumulates gradients, summing contributions from every consumer.
//! Graphs are cheap to build and are thrown away after each step.

use crate::error::{Error, Result};
use crate::numeric::kernels;
use crate::numeric::tensor::{ParamId, ParamSet, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    Concat(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Gather { x: Var, idx: Vec<usize> },
    Embedding { table: Var, idx: Vec<usize> },
    RepeatRows(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        pad: usize,
        cols: Vec<f64>,
    },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    Clamp { x: Var, lo: f64, hi: f64 },
    Minimum(Var, Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    param: Option<ParamId>,
    requires_grad: bool,
}

/// Operation record for a single forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    no_grad: bool,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        Some((&c, rest)) => (rest.iter().product(), c),
        None => (1, 1),
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Graph that never records gradients; parameters enter as constants.
    pub fn inference() -> Self {
        Self {
            no_grad: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = !self.no_grad && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            param: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.constant_raw(t.shape().to_vec(), t.data().to_vec())
    }

    pub fn constant_raw(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Var {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            param: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Loads a parameter as a differentiable leaf.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        let t = params.get(id);
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            param: Some(id),
            requires_grad: !self.no_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.value(a),
            (k, 1),
            self.value(b),
            (n, 1),
            &mut out,
            0.0,
        );
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::InvalidShape {
                op: "transpose",
                shape: s.to_vec(),
                reason: "expected a 2-d tensor",
            });
        }
        let (r, c) = (s[0], s[1]);
        let x = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        Ok(self.push(vec![c, r], out, Op::Transpose(a), &[a]))
    }

    /// Elementwise sum of equal shapes, or `[.., n] + [n]` broadcast over rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b));
        if sa == sb {
            let out = self
                .value(a)
                .iter()
                .zip(self.value(b))
                .map(|(x, y)| x + y)
                .collect();
            return Ok(self.push(sa, out, Op::Add(a, b), &[a, b]));
        }
        let (_, cols) = rows_cols(&sa);
        if sb.len() == 1 && sb[0] == cols {
            let bv = self.value(b);
            let out = self
                .value(a)
                .iter()
                .enumerate()
                .map(|(i, x)| x + bv[i % cols])
                .collect();
            return Ok(self.push(sa, out, Op::AddRow(a, b), &[a, b]));
        }
        Err(mismatch("add", &sa, sb))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, |a, b| Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, |a, b| Op::Mul(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("minimum", a, b, f64::min, |a, b| Op::Minimum(a, b))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(Var, Var) -> Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch(name, sa, sb));
        }
        let shape = sa.to_vec();
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        Ok(self.push(shape, out, op(a, b), &[a, b]))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let shape = self.shape(a).to_vec();
        let out = self.value(a).iter().map(|x| f(*x)).collect();
        self.push(shape, out, op, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Log(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, |x| x.clamp(lo, hi), Op::Clamp { x: a, lo, hi })
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let (rows, cols) = rows_cols(&shape);
        let x = self.value(a);
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            softmax_row(&x[r * cols..(r + 1) * cols], &mut out[r * cols..(r + 1) * cols]);
        }
        self.push(shape, out, Op::Softmax(a), &[a])
    }

    /// Log-softmax over the last dimension. Entries equal to `-inf` are
    /// excluded from the normalizer and stay at `-inf`.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let (rows, cols) = rows_cols(&shape);
        let x = self.value(a);
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            log_softmax_row(&x[r * cols..(r + 1) * cols], &mut out[r * cols..(r + 1) * cols]);
        }
        self.push(shape, out, Op::LogSoftmax(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.iter().sum::<f64>() / x.len() as f64;
        self.push(vec![1], vec![s], Op::Mean(a), &[a])
    }

    /// Sum over the last dimension: `[r, c] -> [r]`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let (rows, cols) = rows_cols(self.shape(a));
        let x = self.value(a);
        let out = (0..rows)
            .map(|r| x[r * cols..(r + 1) * cols].iter().sum())
            .collect();
        self.push(vec![rows], out, Op::RowSum(a), &[a])
    }

    /// Concatenates 2-d tensors along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if first.len() != 2 {
            return Err(Error::InvalidShape {
                op: "concat",
                shape: first,
                reason: "expected 2-d tensors",
            });
        }
        let rows = first[0];
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != 2 || s[0] != rows {
                return Err(mismatch("concat", &first, s));
            }
            total += s[1];
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                let c = self.shape(*p)[1];
                out.extend_from_slice(&self.value(*p)[r * c..(r + 1) * c]);
            }
        }
        Ok(self.push(vec![rows, total], out, Op::Concat(parts.to_vec()), parts))
    }

    /// Stacks tensors along the first dimension.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            let s = self.shape(*p);
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(mismatch("concat_rows", &first, s));
            }
            rows += s[0];
            out.extend_from_slice(self.value(*p));
        }
        let mut shape = first;
        shape[0] = rows;
        Ok(self.push(shape, out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Columns `start..start + len` of a 2-d tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || start + len > s[1] {
            return Err(mismatch("slice_cols", s, &[start, len]));
        }
        let (rows, cols) = (s[0], s[1]);
        let x = self.value(a);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&x[r * cols + start..r * cols + start + len]);
        }
        Ok(self.push(vec![rows, len], out, Op::SliceCols { x: a, start }, &[a]))
    }

    /// Picks column `idx[r]` from each row: `[r, c] -> [r]`.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || s[0] != idx.len() || idx.iter().any(|&i| i >= s[1]) {
            return Err(mismatch("gather", s, &[idx.len()]));
        }
        let cols = s[1];
        let x = self.value(a);
        let out = idx.iter().enumerate().map(|(r, &i)| x[r * cols + i]).collect();
        Ok(self.push(
            vec![idx.len()],
            out,
            Op::Gather {
                x: a,
                idx: idx.to_vec(),
            },
            &[a],
        ))
    }

    /// Row lookup into a `[vocab, dim]` table.
    pub fn embedding(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 || idx.iter().any(|&i| i >= s[0]) {
            return Err(mismatch("embedding", s, &[idx.len()]));
        }
        let dim = s[1];
        let t = self.value(table);
        let mut out = Vec::with_capacity(idx.len() * dim);
        for &i in idx {
            out.extend_from_slice(&t[i * dim..(i + 1) * dim]);
        }
        Ok(self.push(
            vec![idx.len(), dim],
            out,
            Op::Embedding {
                table,
                idx: idx.to_vec(),
            },
            &[table],
        ))
    }

    /// Repeats a `[1, c]` (or `[c]`) row `n` times.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let s = self.shape(a);
        let cols = match s {
            [c] | [1, c] => *c,
            _ => {
                return Err(Error::InvalidShape {
                    op: "repeat_rows",
                    shape: s.to_vec(),
                    reason: "expected a single row",
                })
            }
        };
        let row = self.value(a).to_vec();
        let mut out = Vec::with_capacity(n * cols);
        for _ in 0..n {
            out.extend_from_slice(&row);
        }
        Ok(self.push(vec![n, cols], out, Op::RepeatRows(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(a);
        if s.iter().product::<usize>() != shape.iter().product::<usize>() {
            return Err(mismatch("reshape", s, shape));
        }
        let out = self.value(a).to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Reshape(a), &[a]))
    }

    /// Stride-1 2-d convolution over `[n, c, h, w]` with weight `[o, c, k, k]`,
    /// bias `[o]` and symmetric zero padding, via im2col + gemm.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] {
            return Err(mismatch("conv2d", sx, sw));
        }
        if sb != [sw[0]] {
            return Err(mismatch("conv2d", sw, sb));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, k) = (sw[0], sw[2]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(mismatch("conv2d", sx, sw));
        }
        let geom = kernels::ConvGeom {
            c,
            h,
            w: wd,
            k,
            pad,
        };
        let (ho, wo) = geom.out_hw();
        let ckk = c * k * k;
        let hw = ho * wo;
        let keep_cols = !self.no_grad
            && (self.nodes[w.0].requires_grad || self.nodes[x.0].requires_grad);
        let mut cols = if keep_cols {
            vec![0.0; n * ckk * hw]
        } else {
            Vec::new()
        };
        let mut scratch = if keep_cols { Vec::new() } else { vec![0.0; ckk * hw] };
        let mut out = vec![0.0; n * o * hw];
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[b.0].value;
        for i in 0..n {
            let img = &xv[i * c * h * wd..(i + 1) * c * h * wd];
            let col: &mut [f64] = if keep_cols {
                &mut cols[i * ckk * hw..(i + 1) * ckk * hw]
            } else {
                &mut scratch
            };
            kernels::im2col(img, &geom, col);
            let dst = &mut out[i * o * hw..(i + 1) * o * hw];
            for (oc, row) in dst.chunks_mut(hw).enumerate() {
                row.iter_mut().for_each(|v| *v = bv[oc]);
            }
            kernels::gemm(o, ckk, hw, wv, (ckk, 1), col, (hw, 1), dst, 1.0);
        }
        Ok(self.push(
            vec![n, o, ho, wo],
            out,
            Op::Conv2d {
                x,
                w,
                b,
                pad,
                cols,
            },
            &[x, w, b],
        ))
    }

    /// 2×2 max pooling with stride 2 over `[n, c, h, w]`; h and w must be even.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::InvalidShape {
                op: "max_pool2",
                shape: s.to_vec(),
                reason: "expected [n, c, h, w] with even h and w",
            });
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let cands = [
                        base + 2 * i * w + 2 * j,
                        base + 2 * i * w + 2 * j + 1,
                        base + (2 * i + 1) * w + 2 * j,
                        base + (2 * i + 1) * w + 2 * j + 1,
                    ];
                    let mut best = cands[0];
                    for &cand in &cands[1..] {
                        if xv[cand] > xv[best] {
                            best = cand;
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        Ok(self.push(
            vec![n, c, ho, wo],
            out,
            Op::MaxPool2 { x, argmax },
            &[x],
        ))
    }

    /// Scales each row of a 2-d tensor to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (rows, cols) = rows_cols(&shape);
        let x = self.value(a);
        let mut norms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(x.len());
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::OutOfRange(format!(
                    "l2_normalize_rows: row {r} has norm {norm}"
                )));
            }
            norms.push(norm);
            out.extend(row.iter().map(|v| v / norm));
        }
        Ok(self.push(shape, out, Op::L2NormalizeRows { x: a, norms }, &[a]))
    }

    // ----------------------------------------------------------- backward

    /// Populates gradients of `loss` with respect to every node that
    /// requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(nodes, grads, node, &g);
            grads[i] = Some(g);
        }
        Ok(())
    }

    /// Writes accumulated parameter gradients into `params`. Parameters not
    /// reached by the last backward pass get a zero gradient.
    pub fn write_param_grads(&self, params: &mut ParamSet) {
        for id in params.ids().collect::<Vec<_>>() {
            let n = params.get(id).numel();
            params
                .get_mut(id)
                .set_grad(vec![0.0; n])
                .expect("same length");
        }
        for (i, node) in self.nodes.iter().enumerate() {
            let (Some(pid), Some(Some(g))) = (node.param, self.grads.get(i)) else {
                continue;
            };
            let dst = params.get_mut(pid).grad_mut().expect("initialized above");
            for (d, s) in dst.iter_mut().zip(g) {
                *d += s;
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_row(x: &[f64], out: &mut [f64]) {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        s += *o;
    }
    out.iter_mut().for_each(|o| *o /= s);
}

pub(crate) fn log_softmax_row(x: &[f64], out: &mut [f64]) {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = x.iter().map(|v| (v - m).exp()).sum();
    let lse = m + s.ln();
    for (o, v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let len = nodes[v.0].value.len();
    let g = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(g);
}

fn backprop(nodes: &[Node], grads: &mut [Option<Vec<f64>>], node: &Node, g: &[f64]) {
    let y = &node.value;
    let val = |v: Var| &nodes[v.0].value;
    let shp = |v: Var| &nodes[v.0].shape;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (shp(*a)[0], shp(*a)[1]);
            let n = shp(*b)[1];
            // dA = G B^T, dB = A^T G
            accumulate(grads, nodes, *a, |ga| {
                kernels::gemm(m, n, k, g, (n, 1), val(*b), (1, n), ga, 1.0)
            });
            accumulate(grads, nodes, *b, |gb| {
                kernels::gemm(k, m, n, val(*a), (1, k), g, (n, 1), gb, 1.0)
            });
        }
        Op::Transpose(a) => {
            let (r, c) = (shp(*a)[0], shp(*a)[1]);
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            });
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, |ga| add_into(ga, g));
            accumulate(grads, nodes, *b, |gb| add_into(gb, g));
        }
        Op::AddRow(a, b) => {
            accumulate(grads, nodes, *a, |ga| add_into(ga, g));
            let cols = shp(*b)[0];
            accumulate(grads, nodes, *b, |gb| {
                for (i, gi) in g.iter().enumerate() {
                    gb[i % cols] += gi;
                }
            });
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, |ga| add_into(ga, g));
            accumulate(grads, nodes, *b, |gb| {
                gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s)
            });
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * bv[i];
                }
            });
            accumulate(grads, nodes, *b, |gb| {
                for i in 0..g.len() {
                    gb[i] += g[i] * av[i];
                }
            });
        }
        Op::Minimum(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            // ties route to the first operand
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..g.len() {
                    if av[i] <= bv[i] {
                        ga[i] += g[i];
                    }
                }
            });
            accumulate(grads, nodes, *b, |gb| {
                for i in 0..g.len() {
                    if av[i] > bv[i] {
                        gb[i] += g[i];
                    }
                }
            });
        }
        Op::Scale(a, c) => accumulate(grads, nodes, *a, |ga| {
            ga.iter_mut().zip(g).for_each(|(d, s)| *d += s * c)
        }),
        Op::Tanh(a) => accumulate(grads, nodes, *a, |ga| {
            for i in 0..g.len() {
                ga[i] += g[i] * (1.0 - y[i] * y[i]);
            }
        }),
        Op::Sigmoid(a) => accumulate(grads, nodes, *a, |ga| {
            for i in 0..g.len() {
                ga[i] += g[i] * y[i] * (1.0 - y[i]);
            }
        }),
        Op::Relu(a) => {
            let x = val(*a);
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..g.len() {
                    if x[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            })
        }
        Op::Exp(a) => accumulate(grads, nodes, *a, |ga| {
            for i in 0..g.len() {
                ga[i] += g[i] * y[i];
            }
        }),
        Op::Log(a) => {
            let x = val(*a);
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] / x[i];
                }
            })
        }
        Op::Clamp { x, lo, hi } => {
            let xv = val(*x);
            accumulate(grads, nodes, *x, |ga| {
                for i in 0..g.len() {
                    if xv[i] >= *lo && xv[i] <= *hi {
                        ga[i] += g[i];
                    }
                }
            })
        }
        Op::Softmax(a) => {
            let (rows, cols) = rows_cols(&node.shape);
            accumulate(grads, nodes, *a, |ga| {
                for r in 0..rows {
                    let s = r * cols..(r + 1) * cols;
                    let dot: f64 = g[s.clone()].iter().zip(&y[s.clone()]).map(|(a, b)| a * b).sum();
                    for i in s {
                        ga[i] += y[i] * (g[i] - dot);
                    }
                }
            })
        }
        Op::LogSoftmax(a) => {
            let (rows, cols) = rows_cols(&node.shape);
            accumulate(grads, nodes, *a, |ga| {
                for r in 0..rows {
                    let s = r * cols..(r + 1) * cols;
                    let gsum: f64 = g[s.clone()].iter().sum();
                    for i in s {
                        // exp(-inf) == 0 keeps masked entries out of the gradient
                        ga[i] += g[i] - y[i].exp() * gsum;
                    }
                }
            })
        }
        Op::Sum(a) => accumulate(grads, nodes, *a, |ga| ga.iter_mut().for_each(|d| *d += g[0])),
        Op::Mean(a) => {
            let n = val(*a).len() as f64;
            accumulate(grads, nodes, *a, |ga| ga.iter_mut().for_each(|d| *d += g[0] / n))
        }
        Op::RowSum(a) => {
            let (_, cols) = rows_cols(shp(*a));
            accumulate(grads, nodes, *a, |ga| {
                for (i, d) in ga.iter_mut().enumerate() {
                    *d += g[i / cols];
                }
            })
        }
        Op::Concat(parts) => {
            let rows = node.shape[0];
            let total = node.shape[1];
            let mut off = 0;
            for p in parts {
                let c = shp(*p)[1];
                accumulate(grads, nodes, *p, |gp| {
                    for r in 0..rows {
                        for j in 0..c {
                            gp[r * c + j] += g[r * total + off + j];
                        }
                    }
                });
                off += c;
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for p in parts {
                let len = val(*p).len();
                accumulate(grads, nodes, *p, |gp| add_into(gp, &g[off..off + len]));
                off += len;
            }
        }
        Op::SliceCols { x, start } => {
            let cols = shp(*x)[1];
            let (rows, len) = (node.shape[0], node.shape[1]);
            accumulate(grads, nodes, *x, |gx| {
                for r in 0..rows {
                    for j in 0..len {
                        gx[r * cols + start + j] += g[r * len + j];
                    }
                }
            })
        }
        Op::Gather { x, idx } => {
            let cols = shp(*x)[1];
            accumulate(grads, nodes, *x, |gx| {
                for (r, &i) in idx.iter().enumerate() {
                    gx[r * cols + i] += g[r];
                }
            })
        }
        Op::Embedding { table, idx } => {
            let dim = shp(*table)[1];
            accumulate(grads, nodes, *table, |gt| {
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..dim {
                        gt[i * dim + j] += g[r * dim + j];
                    }
                }
            })
        }
        Op::RepeatRows(a) => {
            let cols = node.shape[1];
            accumulate(grads, nodes, *a, |ga| {
                for (i, gi) in g.iter().enumerate() {
                    ga[i % cols] += gi;
                }
            })
        }
        Op::Reshape(a) => accumulate(grads, nodes, *a, |ga| add_into(ga, g)),
        Op::Conv2d { x, w, b, pad, cols } => {
            let (sx, sw) = (shp(*x), shp(*w));
            let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
            let (o, k) = (sw[0], sw[2]);
            let geom = kernels::ConvGeom {
                c,
                h,
                w: wd,
                k,
                pad: *pad,
            };
            let (ho, wo) = geom.out_hw();
            let (ckk, hw) = (c * k * k, ho * wo);
            accumulate(grads, nodes, *b, |gb| {
                for i in 0..n {
                    for oc in 0..o {
                        let base = (i * o + oc) * hw;
                        gb[oc] += g[base..base + hw].iter().sum::<f64>();
                    }
                }
            });
            accumulate(grads, nodes, *w, |gw| {
                for i in 0..n {
                    let col = &cols[i * ckk * hw..(i + 1) * ckk * hw];
                    let gi = &g[i * o * hw..(i + 1) * o * hw];
                    // dW += G_i col_i^T
                    kernels::gemm(o, hw, ckk, gi, (hw, 1), col, (1, hw), gw, 1.0);
                }
            });
            let wv = val(*w);
            accumulate(grads, nodes, *x, |gx| {
                let mut dcol = vec![0.0; ckk * hw];
                for i in 0..n {
                    let gi = &g[i * o * hw..(i + 1) * o * hw];
                    // dcol = W^T G_i
                    kernels::gemm(ckk, o, hw, wv, (1, ckk), gi, (hw, 1), &mut dcol, 0.0);
                    kernels::col2im(
                        &dcol,
                        &geom,
                        &mut gx[i * c * h * wd..(i + 1) * c * h * wd],
                    );
                }
            });
        }
        Op::MaxPool2 { x, argmax } => accumulate(grads, nodes, *x, |gx| {
            for (i, &src) in argmax.iter().enumerate() {
                gx[src] += g[i];
            }
        }),
        Op::L2NormalizeRows { x, norms } => {
            let (rows, cols) = rows_cols(&node.shape);
            accumulate(grads, nodes, *x, |gx| {
                for r in 0..rows {
                    let s = r * cols..(r + 1) * cols;
                    let dot: f64 = g[s.clone()].iter().zip(&y[s.clone()]).map(|(a, b)| a * b).sum();
                    for i in s {
                        gx[i] += (g[i] - y[i] * dot) / norms[r];
                    }
                }
            })
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_t(g: &mut Graph, shape: &[usize], data: &[f64]) -> Var {
        g.constant_raw(shape.to_vec(), data.to_vec())
    }

    fn param(p: &mut ParamSet, name: &str, shape: &[usize], data: &[f64]) -> ParamId {
        p.add(name, Tensor::new(shape.to_vec(), data.to_vec()).unwrap())
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = vec_t(&mut g, &[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let i = vec_t(&mut g, &[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let y = g.matmul(a, i).unwrap();
        assert_eq!(g.value(y), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = vec_t(&mut g, &[2, 3], &[0.0; 6]);
        let b = vec_t(&mut g, &[2, 3], &[0.0; 6]);
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_uniform_and_tanh_zero() {
        let mut g = Graph::new();
        let x = vec_t(&mut g, &[4], &[0.0; 4]);
        let s = g.softmax(x);
        assert_eq!(g.value(s), &[0.25; 4]);
        let t = g.tanh(x);
        assert_eq!(g.value(t), &[0.0; 4]);
    }

    #[test]
    fn sum_and_mean_grads() {
        let mut p = ParamSet::new();
        let id = param(&mut p, "x", &[3], &[1.0, -2.0, 5.0]);
        let mut g = Graph::new();
        let x = g.param(&p, id);
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let id = param(&mut p, "y", &[4], &[1.0, 2.0, 3.0, 4.0]);
        let mut g = Graph::new();
        let x = g.param(&p, id);
        let l = g.mean(x);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn tanh_grad_at_zero() {
        let mut p = ParamSet::new();
        let id = param(&mut p, "w", &[1], &[0.0]);
        let mut g = Graph::new();
        let w = g.param(&p, id);
        let t = g.tanh(w);
        let l = g.sum(t);
        g.backward(l).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = vec_t(&mut g, &[2], &[1.0, 2.0]);
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        // l = sum(x * 3) + sum(tanh(x)) -> dl/dx = 3 + (1 - tanh^2)
        let mut p = ParamSet::new();
        let id = param(&mut p, "x", &[2], &[0.3, -0.7]);
        let mut g = Graph::new();
        let x = g.param(&p, id);
        let a = g.scale(x, 3.0);
        let b = g.tanh(x);
        let sa = g.sum(a);
        let sb = g.sum(b);
        let l = g.add(sa, sb).unwrap();
        g.backward(l).unwrap();
        let gx = g.grad(x).unwrap();
        for (i, v) in [0.3f64, -0.7].iter().enumerate() {
            let want = 3.0 + 1.0 - v.tanh().powi(2);
            assert!((gx[i] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn unreachable_params_get_zero_grad() {
        let mut p = ParamSet::new();
        let a = param(&mut p, "a", &[2], &[1.0, 2.0]);
        let b = param(&mut p, "b", &[2], &[1.0, 2.0]);
        let mut g = Graph::new();
        let x = g.param(&p, a);
        let _unused = g.param(&p, b);
        let l = g.sum(x);
        g.backward(l).unwrap();
        g.write_param_grads(&mut p);
        assert_eq!(p.get(a).grad().unwrap(), &[1.0, 1.0]);
        assert_eq!(p.get(b).grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn masked_log_softmax_excludes_neg_inf() {
        let mut g = Graph::new();
        let x = vec_t(&mut g, &[1, 3], &[f64::NEG_INFINITY, 0.0, 0.0]);
        let y = g.log_softmax(x);
        let v = g.value(y);
        assert_eq!(v[0], f64::NEG_INFINITY);
        assert!((v[1] - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut g = Graph::new();
        let x = vec_t(&mut g, &[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = vec_t(&mut g, &[1, 1, 3, 3], &k);
        let b = vec_t(&mut g, &[1], &[0.5]);
        let y = g.conv2d(x, w, b, 1).unwrap();
        let want: Vec<f64> = (1..=9).map(|v| v as f64 + 0.5).collect();
        assert_eq!(g.value(y), want.as_slice());
    }

    #[test]
    fn max_pool_picks_max() {
        let mut g = Graph::new();
        let x = vec_t(&mut g, &[1, 1, 2, 4], &[1., 5., 2., 0., 3., 4., 9., 1.]);
        let y = g.max_pool2(x).unwrap();
        assert_eq!(g.value(y), &[5.0, 9.0]);
    }
}
