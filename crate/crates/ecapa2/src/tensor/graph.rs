//! Tape-based reverse-mode autodiff.
//!
//! A [`Graph`] owns a flat list of nodes; every op appends one node holding
//! its output buffer plus enough bookkeeping to replay the chain rule.
//! [`Graph::backward`] walks the tape in reverse, propagating gradients with
//! a fixed, sequential accumulation order so repeated runs are bit-identical.
//! Gradients of leaf nodes persist on the tape (and accumulate across
//! backward calls) until [`Graph::zero_grads`] clears them.

use super::kernels::{self, Conv1dGeom, Conv2dGeom};
use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Neg(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    MaxAxis(Var, Vec<usize>),
    Softmax(Var, usize),
    Reshape(Var),
    BroadcastTo(Var),
    Concat(Vec<Var>, usize),
    SliceAxis(Var, usize, usize),
    Matmul(Var, Var),
    MatmulNt(Var, Var),
    Pick(Var, Vec<usize>),
    ScatterCols(Var, Vec<usize>),
    Conv1d(Var, Var, Conv1dGeom),
    Conv2d(Var, Var, Conv2dGeom),
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Reverse-mode autodiff tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for d in (0..shape.len()).rev() {
        strides[d] = acc;
        acc *= shape[d];
    }
    strides
}

/// Right-aligned broadcast of two shapes; each aligned pair of dims must be
/// equal or contain a 1.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let ad = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let bd = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        if ad == bd || ad == 1 || bd == 1 {
            out[i] = ad.max(bd);
        } else {
            return Err(shape_err(format!("cannot broadcast {a:?} with {b:?}")));
        }
    }
    Ok(out)
}

/// Per-output-dim strides for reading `src` under broadcasting to `out`;
/// broadcast dims contribute stride 0.
fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let src_strides = row_major_strides(src);
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    for i in 0..rank {
        if i + src.len() >= rank {
            let sd = i + src.len() - rank;
            strides[i] = if src[sd] == 1 { 0 } else { src_strides[sd] };
        }
    }
    strides
}

/// Iterate linear offsets of a broadcast operand over every cell of the
/// output shape, in output row-major order.
struct BcastIter {
    out_shape: Vec<usize>,
    idx: Vec<usize>,
    strides_a: Vec<usize>,
    strides_b: Vec<usize>,
    off_a: usize,
    off_b: usize,
    remaining: usize,
    first: bool,
}

impl BcastIter {
    fn new(a: &[usize], b: &[usize], out: &[usize]) -> Self {
        let numel: usize = out.iter().product();
        BcastIter {
            out_shape: out.to_vec(),
            idx: vec![0; out.len()],
            strides_a: broadcast_strides(a, out),
            strides_b: broadcast_strides(b, out),
            off_a: 0,
            off_b: 0,
            remaining: numel,
            first: true,
        }
    }

    fn next(&mut self) -> Option<(usize, usize)> {
        if self.remaining == 0 {
            return None;
        }
        if self.first {
            self.first = false;
            self.remaining -= 1;
            return Some((0, 0));
        }
        for d in (0..self.out_shape.len()).rev() {
            self.idx[d] += 1;
            self.off_a += self.strides_a[d];
            self.off_b += self.strides_b[d];
            if self.idx[d] < self.out_shape[d] {
                self.remaining -= 1;
                return Some((self.off_a, self.off_b));
            }
            self.off_a -= self.strides_a[d] * self.out_shape[d];
            self.off_b -= self.strides_b[d] * self.out_shape[d];
            self.idx[d] = 0;
        }
        None
    }
}

/// Decompose a shape around `axis` into (outer, len, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(shape_err(format!("axis {axis} out of range for shape {shape:?}")));
    }
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    Ok((outer, len, inner))
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Copy a tensor onto the tape as a leaf.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push_unchecked(Op::Leaf, t.shape.clone(), t.data.clone(), t.requires_grad)
    }

    /// Leaf from a raw buffer.
    pub fn leaf_from(&mut self, data: &[f64], shape: &[usize], requires_grad: bool) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(shape_err(format!(
                "leaf buffer of {} values does not fill shape {shape:?}",
                data.len()
            )));
        }
        Ok(self.push_unchecked(Op::Leaf, shape.to_vec(), data.to_vec(), requires_grad))
    }

    /// Non-differentiable scalar constant.
    pub fn scalar(&mut self, value: f64) -> Var {
        self.push_unchecked(Op::Leaf, vec![], vec![value], false)
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Scalar value of a rank-0 or single-element node.
    pub fn value(&self, v: Var) -> Result<f64> {
        let n = &self.nodes[v.0];
        if n.data.len() != 1 {
            return Err(shape_err(format!("value() on non-scalar shape {:?}", n.shape)));
        }
        Ok(n.data[0])
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in self.nodes.iter_mut() {
            n.grad = None;
        }
    }

    fn push_unchecked(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, rg: bool) -> Var {
        self.nodes.push(Node { op, shape, data, requires_grad: rg, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, rg: bool, what: &str) -> Result<Var> {
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{what} produced {bad}")));
        }
        Ok(self.push_unchecked(op, shape, data, rg))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(Var, Var) -> Op,
        what: &str,
    ) -> Result<Var> {
        let (sa, sb) = (self.nodes[a.0].shape.clone(), self.nodes[b.0].shape.clone());
        let out_shape = broadcast_shape(&sa, &sb)?;
        let numel: usize = out_shape.iter().product();
        let mut out = Vec::with_capacity(numel);
        if sa == sb {
            let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
            out.extend(da.iter().zip(db).map(|(&x, &y)| f(x, y)));
        } else {
            let mut it = BcastIter::new(&sa, &sb, &out_shape);
            while let Some((ia, ib)) = it.next() {
                out.push(f(self.nodes[a.0].data[ia], self.nodes[b.0].data[ib]));
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(op(a, b), out_shape, out, rg, what)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div, "div")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| x + c).collect();
        let rg = self.rg(a);
        self.push(Op::AddScalar(a), shape, data, rg, "add_scalar")
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| x * c).collect();
        let rg = self.rg(a);
        self.push(Op::MulScalar(a, c), shape, data, rg, "mul_scalar")
    }

    fn unary(
        &mut self,
        a: Var,
        f: impl Fn(f64) -> f64,
        op: impl Fn(Var) -> Op,
        what: &str,
    ) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        self.push(op(a), shape, data, rg, what)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu, "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid, "sigmoid")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::tanh, Op::Tanh, "tanh")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp, "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::ln, Op::Log, "log")
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::sqrt, Op::Sqrt, "sqrt")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| -x, Op::Neg, "neg")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let rg = self.rg(a);
        self.push(Op::Sum(a), vec![], vec![s], rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].data.len();
        if n == 0 {
            return Err(shape_err("mean of empty tensor".to_string()));
        }
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let rg = self.rg(a);
        self.push(Op::Mean(a), vec![], vec![s / n as f64], rg, "mean")
    }

    /// Sum along one axis; the axis is removed from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        let (outer, len, inner) = axis_split(&shape, axis)?;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += self.nodes[a.0].data[base + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(a);
        self.push(Op::SumAxis(a, axis), out_shape, out, rg, "sum_axis")
    }

    /// Mean along one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = *self
            .nodes[a.0]
            .shape
            .get(axis)
            .ok_or_else(|| shape_err(format!("axis {axis} out of range")))?;
        if len == 0 {
            return Err(shape_err("mean over empty axis".to_string()));
        }
        let s = self.sum_axis(a, axis)?;
        let node = &self.nodes[s.0];
        let data: Vec<f64> = node.data.iter().map(|&x| x / len as f64).collect();
        let (shape, rg) = (node.shape.clone(), node.requires_grad);
        // Re-expressed as its own op so backward spreads g/len in one step.
        self.nodes.pop();
        self.push(Op::MeanAxis(a, axis), shape, data, rg, "mean_axis")
    }

    /// Maximum along one axis; ties resolve to the lowest index.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        let (outer, len, inner) = axis_split(&shape, axis)?;
        if len == 0 {
            return Err(shape_err("max over empty axis".to_string()));
        }
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    let v = self.nodes[a.0].data[base + i];
                    if v > out[o * inner + i] {
                        out[o * inner + i] = v;
                        arg[o * inner + i] = base + i;
                    }
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(a);
        self.push(Op::MaxAxis(a, arg), out_shape, out, rg, "max_axis")
    }

    /// Softmax along one axis, max-subtracted for stability.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        let (outer, len, inner) = axis_split(&shape, axis)?;
        if len == 0 {
            return Err(shape_err("softmax over empty axis".to_string()));
        }
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let mut hi = f64::NEG_INFINITY;
                for l in 0..len {
                    hi = hi.max(src[(o * len + l) * inner + i]);
                }
                let mut z = 0.0;
                for l in 0..len {
                    let e = (src[(o * len + l) * inner + i] - hi).exp();
                    out[(o * len + l) * inner + i] = e;
                    z += e;
                }
                for l in 0..len {
                    out[(o * len + l) * inner + i] /= z;
                }
            }
        }
        let rg = self.rg(a);
        self.push(Op::Softmax(a, axis), shape, out, rg, "softmax")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].data.len() {
            return Err(shape_err(format!(
                "reshape {:?} -> {shape:?} changes element count",
                self.nodes[a.0].shape
            )));
        }
        let data = self.nodes[a.0].data.clone();
        let rg = self.rg(a);
        self.push(Op::Reshape(a), shape.to_vec(), data, rg, "reshape")
    }

    /// Materialize a broadcast of `a` to `shape`.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let sa = self.nodes[a.0].shape.clone();
        let merged = broadcast_shape(&sa, shape)?;
        if merged != shape {
            return Err(shape_err(format!("cannot broadcast {sa:?} to {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        let mut out = Vec::with_capacity(numel);
        let mut it = BcastIter::new(&sa, shape, shape);
        while let Some((ia, _)) = it.next() {
            out.push(self.nodes[a.0].data[ia]);
        }
        let rg = self.rg(a);
        self.push(Op::BroadcastTo(a), shape.to_vec(), out, rg, "broadcast_to")
    }

    /// Concatenate along one axis; all other dims must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat of zero tensors".to_string()));
        }
        let first = self.nodes[parts[0].0].shape.clone();
        if axis >= first.len() {
            return Err(shape_err(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut total = 0usize;
        for p in parts {
            let s = &self.nodes[p.0].shape;
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(d, (x, y))| d != axis && x != y)
            {
                return Err(shape_err(format!("concat shape mismatch: {first:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_split(&out_shape, axis)?;
        let mut out = vec![0.0; outer * total * inner];
        let mut offset = 0usize;
        for p in parts {
            let len = self.nodes[p.0].shape[axis];
            for o in 0..outer {
                for l in 0..len {
                    let src = (o * len + l) * inner;
                    let dst = (o * total + offset + l) * inner;
                    out[dst..dst + inner]
                        .copy_from_slice(&self.nodes[p.0].data[src..src + inner]);
                }
            }
            offset += len;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Op::Concat(parts.to_vec(), axis), out_shape, out, rg, "concat")
    }

    /// Contiguous slice `[start, start + len)` along one axis.
    pub fn slice_axis(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        let (outer, full, inner) = axis_split(&shape, axis)?;
        if start + len > full {
            return Err(shape_err(format!(
                "slice [{start}, {}) exceeds axis {axis} of {shape:?}",
                start + len
            )));
        }
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = (o * full + start + l) * inner;
                let dst = (o * len + l) * inner;
                out[dst..dst + inner].copy_from_slice(&self.nodes[a.0].data[src..src + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(a);
        self.push(Op::SliceAxis(a, axis, start), out_shape, out, rg, "slice_axis")
    }

    /// `a[m,k] x b[k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.nodes[a.0].shape.clone(), self.nodes[b.0].shape.clone());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err(format!("matmul {sa:?} x {sb:?}")));
        }
        let out = kernels::matmul(&self.nodes[a.0].data, &self.nodes[b.0].data, sa[0], sa[1], sb[1]);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Matmul(a, b), vec![sa[0], sb[1]], out, rg, "matmul")
    }

    /// `a[m,k] x b[n,k]^T -> [m,n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.nodes[a.0].shape.clone(), self.nodes[b.0].shape.clone());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(shape_err(format!("matmul_nt {sa:?} x {sb:?}")));
        }
        let out =
            kernels::matmul_nt(&self.nodes[a.0].data, &self.nodes[b.0].data, sa[0], sa[1], sb[0]);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatmulNt(a, b), vec![sa[0], sb[0]], out, rg, "matmul_nt")
    }

    /// `out[i] = a[i, idx[i]]` for a rank-2 input.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        if shape.len() != 2 || idx.len() != shape[0] {
            return Err(shape_err(format!(
                "pick needs [R,C] input with R indices, got {shape:?} and {}",
                idx.len()
            )));
        }
        let cols = shape[1];
        if let Some(&bad) = idx.iter().find(|&&i| i >= cols) {
            return Err(shape_err(format!("pick index {bad} out of range for {cols} columns")));
        }
        let out: Vec<f64> =
            idx.iter().enumerate().map(|(r, &c)| self.nodes[a.0].data[r * cols + c]).collect();
        let rg = self.rg(a);
        self.push(Op::Pick(a, idx.to_vec()), vec![shape[0]], out, rg, "pick")
    }

    /// Inverse of [`Graph::pick`]: `out[i, idx[i]] = v[i]`, zero elsewhere.
    pub fn scatter_cols(&mut self, v: Var, idx: &[usize], cols: usize) -> Result<Var> {
        let shape = self.nodes[v.0].shape.clone();
        if shape.len() != 1 || idx.len() != shape[0] {
            return Err(shape_err(format!(
                "scatter_cols needs [R] input with R indices, got {shape:?} and {}",
                idx.len()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= cols) {
            return Err(shape_err(format!("scatter index {bad} out of range for {cols} columns")));
        }
        let rows = shape[0];
        let mut out = vec![0.0; rows * cols];
        for (r, &c) in idx.iter().enumerate() {
            out[r * cols + c] = self.nodes[v.0].data[r];
        }
        let rg = self.rg(v);
        self.push(Op::ScatterCols(v, idx.to_vec()), vec![rows, cols], out, rg, "scatter_cols")
    }

    /// 1-D convolution of `x[Cin,T]` with `kern[Cout,Cin,k]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        kern: Var,
        stride: usize,
        dilation: usize,
        padding: usize,
    ) -> Result<Var> {
        let (sx, sk) = (self.nodes[x.0].shape.clone(), self.nodes[kern.0].shape.clone());
        if sx.len() != 2 || sk.len() != 3 || sx[0] != sk[1] {
            return Err(shape_err(format!("conv1d input {sx:?} kernel {sk:?}")));
        }
        let geom = Conv1dGeom::new(sx[0], sx[1], sk[0], sk[2], stride, dilation, padding)?;
        let out = kernels::conv1d_forward(&self.nodes[x.0].data, &self.nodes[kern.0].data, &geom);
        let rg = self.rg(x) || self.rg(kern);
        let shape = vec![geom.c_out, geom.t_out];
        self.push(Op::Conv1d(x, kern, geom), shape, out, rg, "conv1d")
    }

    /// 2-D convolution of `x[Cin,F,T]` with `kern[Cout,Cin,kF,kT]`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        &mut self,
        x: Var,
        kern: Var,
        stride_f: usize,
        stride_t: usize,
        pad_f: usize,
        pad_t: usize,
    ) -> Result<Var> {
        let (sx, sk) = (self.nodes[x.0].shape.clone(), self.nodes[kern.0].shape.clone());
        if sx.len() != 3 || sk.len() != 4 || sx[0] != sk[1] {
            return Err(shape_err(format!("conv2d input {sx:?} kernel {sk:?}")));
        }
        let geom = Conv2dGeom::new(
            sx[0], sx[1], sx[2], sk[0], sk[2], sk[3], stride_f, stride_t, pad_f, pad_t,
        )?;
        let out = kernels::conv2d_forward(&self.nodes[x.0].data, &self.nodes[kern.0].data, &geom);
        let rg = self.rg(x) || self.rg(kern);
        let shape = vec![geom.c_out, geom.f_out, geom.t_out];
        self.push(Op::Conv2d(x, kern, geom), shape, out, rg, "conv2d")
    }

    /// `x[m,k] x w[out,k]^T + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let prod = self.matmul_nt(x, w)?;
        self.add(prod, b)
    }

    /// Training-mode batch norm over the non-channel axes of one example.
    ///
    /// Rank >= 2 input treats axis 0 as channels; rank 1 is a single
    /// implicit channel. Statistics are part of the graph, so gradients
    /// flow through them. Returns the batch stats for running-average
    /// bookkeeping.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BnStats)> {
        let orig = self.nodes[x.0].shape.clone();
        let (c, cols) = bn_layout(&orig)?;
        if self.nodes[gamma.0].data.len() != c || self.nodes[beta.0].data.len() != c {
            return Err(shape_err(format!(
                "batch norm scale/shift need {c} channels, got {} and {}",
                self.nodes[gamma.0].data.len(),
                self.nodes[beta.0].data.len()
            )));
        }
        let xr = self.reshape(x, &[c, cols])?;
        let mean = self.mean_axis(xr, 1)?;
        let mean_col = self.reshape(mean, &[c, 1])?;
        let centered = self.sub(xr, mean_col)?;
        let sq = self.mul(centered, centered)?;
        let var = self.mean_axis(sq, 1)?;
        let stats = BnStats { mean: self.data(mean).to_vec(), var: self.data(var).to_vec() };
        let var_col = self.reshape(var, &[c, 1])?;
        let shifted = self.add_scalar(var_col, eps)?;
        let std = self.sqrt(shifted)?;
        let norm = self.div(centered, std)?;
        let gamma_col = self.reshape(gamma, &[c, 1])?;
        let beta_col = self.reshape(beta, &[c, 1])?;
        let scaled = self.mul(norm, gamma_col)?;
        let out = self.add(scaled, beta_col)?;
        let out = self.reshape(out, &orig)?;
        Ok((out, stats))
    }

    /// Eval-mode batch norm using fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let orig = self.nodes[x.0].shape.clone();
        let (c, cols) = bn_layout(&orig)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(shape_err(format!(
                "running stats need {c} channels, got {} and {}",
                running_mean.len(),
                running_var.len()
            )));
        }
        let xr = self.reshape(x, &[c, cols])?;
        let rm = self.leaf_from(running_mean, &[c, 1], false)?;
        let denom: Vec<f64> = running_var.iter().map(|&v| (v + eps).sqrt()).collect();
        let rd = self.leaf_from(&denom, &[c, 1], false)?;
        let centered = self.sub(xr, rm)?;
        let norm = self.div(centered, rd)?;
        let gamma_col = self.reshape(gamma, &[c, 1])?;
        let beta_col = self.reshape(beta, &[c, 1])?;
        let scaled = self.mul(norm, gamma_col)?;
        let out = self.add(scaled, beta_col)?;
        self.reshape(out, &orig)
    }

    /// Backward from a scalar output, seeding with gradient 1.
    pub fn backward(&mut self, v: Var) -> Result<()> {
        if self.nodes[v.0].data.len() != 1 {
            return Err(shape_err(format!(
                "backward() needs a scalar output, got shape {:?}",
                self.nodes[v.0].shape
            )));
        }
        self.backward_seeded(v, &[1.0])
    }

    /// Backward from any node with an explicit seed gradient.
    pub fn backward_seeded(&mut self, v: Var, seed: &[f64]) -> Result<()> {
        if seed.len() != self.nodes[v.0].data.len() {
            return Err(shape_err(format!(
                "seed of {} values does not match output of {}",
                seed.len(),
                self.nodes[v.0].data.len()
            )));
        }
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=v.0).map(|_| None).collect();
        grads[v.0] = Some(seed.to_vec());
        for i in (0..=v.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                match self.nodes[i].grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                    None => self.nodes[i].grad = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn add_into(&self, grads: &mut [Option<Vec<f64>>], target: Var, contrib: impl FnOnce(&mut [f64])) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let slot = &mut grads[target.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.nodes[target.0].data.len()]);
        }
        contrib(slot.as_mut().unwrap());
    }

    fn propagate(&mut self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.bcast_binary_back(grads, i, g, a, b, |_, _, go| (go, go));
            }
            Op::Sub(a, b) => {
                self.bcast_binary_back(grads, i, g, a, b, |_, _, go| (go, -go));
            }
            Op::Mul(a, b) => {
                self.bcast_binary_back(grads, i, g, a, b, |av, bv, go| (go * bv, go * av));
            }
            Op::Div(a, b) => {
                self.bcast_binary_back(grads, i, g, a, b, |av, bv, go| {
                    (go / bv, -go * av / (bv * bv))
                });
            }
            Op::AddScalar(a) => {
                self.add_into(grads, a, |ga| ga.iter_mut().zip(g).for_each(|(x, v)| *x += v));
            }
            Op::MulScalar(a, c) => {
                self.add_into(grads, a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, v)| *x += v * c)
                });
            }
            Op::Relu(a) => {
                let src: Vec<f64> = self.nodes[a.0].data.clone();
                self.add_into(grads, a, |ga| {
                    for (j, v) in g.iter().enumerate() {
                        if src[j] > 0.0 {
                            ga[j] += v;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[i].data.clone();
                self.add_into(grads, a, |ga| {
                    for (j, v) in g.iter().enumerate() {
                        ga[j] += v * y[j] * (1.0 - y[j]);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = self.nodes[i].data.clone();
                self.add_into(grads, a, |ga| {
                    for (j, v) in g.iter().enumerate() {
                        ga[j] += v * (1.0 - y[j] * y[j]);
                    }
                });
            }
            Op::Exp(a) => {
                let y = self.nodes[i].data.clone();
                self.add_into(grads, a, |ga| {
                    for (j, v) in g.iter().enumerate() {
                        ga[j] += v * y[j];
                    }
                });
            }
            Op::Log(a) => {
                let src = self.nodes[a.0].data.clone();
                self.add_into(grads, a, |ga| {
                    for (j, v) in g.iter().enumerate() {
                        ga[j] += v / src[j];
                    }
                });
            }
            Op::Sqrt(a) => {
                let y = self.nodes[i].data.clone();
                self.add_into(grads, a, |ga| {
                    for (j, v) in g.iter().enumerate() {
                        ga[j] += v / (2.0 * y[j]);
                    }
                });
            }
            Op::Neg(a) => {
                self.add_into(grads, a, |ga| ga.iter_mut().zip(g).for_each(|(x, v)| *x -= v));
            }
            Op::Sum(a) => {
                let v = g[0];
                self.add_into(grads, a, |ga| ga.iter_mut().for_each(|x| *x += v));
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].data.len() as f64;
                let v = g[0] / n;
                self.add_into(grads, a, |ga| ga.iter_mut().for_each(|x| *x += v));
            }
            Op::SumAxis(a, axis) => {
                let shape = self.nodes[a.0].shape.clone();
                let (outer, len, inner) = axis_split(&shape, axis).unwrap();
                self.add_into(grads, a, |ga| {
                    for o in 0..outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            for k in 0..inner {
                                ga[base + k] += g[o * inner + k];
                            }
                        }
                    }
                });
            }
            Op::MeanAxis(a, axis) => {
                let shape = self.nodes[a.0].shape.clone();
                let (outer, len, inner) = axis_split(&shape, axis).unwrap();
                let scale = 1.0 / len as f64;
                self.add_into(grads, a, |ga| {
                    for o in 0..outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            for k in 0..inner {
                                ga[base + k] += g[o * inner + k] * scale;
                            }
                        }
                    }
                });
            }
            Op::MaxAxis(a, arg) => {
                self.add_into(grads, a, |ga| {
                    for (j, &src) in arg.iter().enumerate() {
                        ga[src] += g[j];
                    }
                });
            }
            Op::Softmax(a, axis) => {
                let y = self.nodes[i].data.clone();
                let shape = self.nodes[i].shape.clone();
                let (outer, len, inner) = axis_split(&shape, axis).unwrap();
                self.add_into(grads, a, |ga| {
                    for o in 0..outer {
                        for k in 0..inner {
                            let mut dot = 0.0;
                            for l in 0..len {
                                let j = (o * len + l) * inner + k;
                                dot += g[j] * y[j];
                            }
                            for l in 0..len {
                                let j = (o * len + l) * inner + k;
                                ga[j] += y[j] * (g[j] - dot);
                            }
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                self.add_into(grads, a, |ga| ga.iter_mut().zip(g).for_each(|(x, v)| *x += v));
            }
            Op::BroadcastTo(a) => {
                let sa = self.nodes[a.0].shape.clone();
                let out_shape = self.nodes[i].shape.clone();
                self.add_into(grads, a, |ga| {
                    let mut it = BcastIter::new(&sa, &out_shape, &out_shape);
                    let mut j = 0usize;
                    while let Some((ia, _)) = it.next() {
                        ga[ia] += g[j];
                        j += 1;
                    }
                });
            }
            Op::Concat(parts, axis) => {
                let out_shape = self.nodes[i].shape.clone();
                let (outer, total, inner) = axis_split(&out_shape, axis).unwrap();
                let mut offset = 0usize;
                for p in parts {
                    let len = self.nodes[p.0].shape[axis];
                    self.add_into(grads, p, |gp| {
                        for o in 0..outer {
                            for l in 0..len {
                                let src = (o * total + offset + l) * inner;
                                let dst = (o * len + l) * inner;
                                for k in 0..inner {
                                    gp[dst + k] += g[src + k];
                                }
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::SliceAxis(a, axis, start) => {
                let in_shape = self.nodes[a.0].shape.clone();
                let (outer, full, inner) = axis_split(&in_shape, axis).unwrap();
                let len = self.nodes[i].shape[axis];
                self.add_into(grads, a, |ga| {
                    for o in 0..outer {
                        for l in 0..len {
                            let dst = (o * full + start + l) * inner;
                            let src = (o * len + l) * inner;
                            for k in 0..inner {
                                ga[dst + k] += g[src + k];
                            }
                        }
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (m, k) = {
                    let s = &self.nodes[a.0].shape;
                    (s[0], s[1])
                };
                let n = self.nodes[b.0].shape[1];
                let bd = self.nodes[b.0].data.clone();
                let ad = self.nodes[a.0].data.clone();
                self.add_into(grads, a, |ga| {
                    let contrib = kernels::matmul_nt(g, &bd, m, n, k);
                    ga.iter_mut().zip(&contrib).for_each(|(x, v)| *x += v);
                });
                self.add_into(grads, b, |gb| {
                    let contrib = kernels::matmul_tn(&ad, g, m, k, n);
                    gb.iter_mut().zip(&contrib).for_each(|(x, v)| *x += v);
                });
            }
            Op::MatmulNt(a, b) => {
                let (m, p) = {
                    let s = &self.nodes[a.0].shape;
                    (s[0], s[1])
                };
                let q = self.nodes[b.0].shape[0];
                let bd = self.nodes[b.0].data.clone();
                let ad = self.nodes[a.0].data.clone();
                self.add_into(grads, a, |ga| {
                    let contrib = kernels::matmul(g, &bd, m, q, p);
                    ga.iter_mut().zip(&contrib).for_each(|(x, v)| *x += v);
                });
                self.add_into(grads, b, |gb| {
                    let contrib = kernels::matmul_tn(g, &ad, m, q, p);
                    gb.iter_mut().zip(&contrib).for_each(|(x, v)| *x += v);
                });
            }
            Op::Pick(a, idx) => {
                let cols = self.nodes[a.0].shape[1];
                self.add_into(grads, a, |ga| {
                    for (r, &c) in idx.iter().enumerate() {
                        ga[r * cols + c] += g[r];
                    }
                });
            }
            Op::ScatterCols(v, idx) => {
                let cols = self.nodes[i].shape[1];
                self.add_into(grads, v, |gv| {
                    for (r, &c) in idx.iter().enumerate() {
                        gv[r] += g[r * cols + c];
                    }
                });
            }
            Op::Conv1d(x, kern, geom) => {
                let xd = self.nodes[x.0].data.clone();
                let kd = self.nodes[kern.0].data.clone();
                let (gx, gk) = kernels::conv1d_backward(&xd, &kd, g, &geom);
                self.add_into(grads, x, |gxa| {
                    gxa.iter_mut().zip(&gx).for_each(|(x, v)| *x += v)
                });
                self.add_into(grads, kern, |gka| {
                    gka.iter_mut().zip(&gk).for_each(|(x, v)| *x += v)
                });
            }
            Op::Conv2d(x, kern, geom) => {
                let xd = self.nodes[x.0].data.clone();
                let kd = self.nodes[kern.0].data.clone();
                let (gx, gk) = kernels::conv2d_backward(&xd, &kd, g, &geom);
                self.add_into(grads, x, |gxa| {
                    gxa.iter_mut().zip(&gx).for_each(|(x, v)| *x += v)
                });
                self.add_into(grads, kern, |gka| {
                    gka.iter_mut().zip(&gk).for_each(|(x, v)| *x += v)
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn bcast_binary_back(
        &mut self,
        grads: &mut [Option<Vec<f64>>],
        i: usize,
        g: &[f64],
        a: Var,
        b: Var,
        f: impl Fn(f64, f64, f64) -> (f64, f64),
    ) {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        let out_shape = self.nodes[i].shape.clone();
        let need_a = self.nodes[a.0].requires_grad;
        let need_b = self.nodes[b.0].requires_grad;
        let ad = &self.nodes[a.0].data;
        let bd = &self.nodes[b.0].data;
        let mut ga = if need_a { Some(vec![0.0; ad.len()]) } else { None };
        let mut gb = if need_b { Some(vec![0.0; bd.len()]) } else { None };
        let mut it = BcastIter::new(&sa, &sb, &out_shape);
        let mut j = 0usize;
        while let Some((ia, ib)) = it.next() {
            let (da, db) = f(ad[ia], bd[ib], g[j]);
            if let Some(ga) = ga.as_mut() {
                ga[ia] += da;
            }
            if let Some(gb) = gb.as_mut() {
                gb[ib] += db;
            }
            j += 1;
        }
        if let Some(gav) = ga {
            self.add_into(grads, a, |acc| acc.iter_mut().zip(&gav).for_each(|(x, v)| *x += v));
        }
        if let Some(gbv) = gb {
            self.add_into(grads, b, |acc| acc.iter_mut().zip(&gbv).for_each(|(x, v)| *x += v));
        }
    }
}

/// Channel/column layout for batch norm: rank >= 2 uses axis 0 as channels,
/// rank 1 is one implicit channel over the whole vector.
fn bn_layout(shape: &[usize]) -> Result<(usize, usize)> {
    match shape.len() {
        0 => Err(shape_err("batch norm on scalar".to_string())),
        1 => Ok((1, shape[0])),
        _ => {
            let cols: usize = shape[1..].iter().product();
            Ok((shape[0], cols))
        }
    }
}
