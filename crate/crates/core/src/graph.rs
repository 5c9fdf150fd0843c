//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only arena of nodes. Every operation evaluates
//! eagerly and records its parents, so node indices are already a
//! topological order and [`Graph::backward`] is a single reverse sweep.
//! A fresh graph is built for every forward pass.
//!
//! Elementwise binary ops support leading-batch broadcasting only: after
//! dropping leading unit extents, one operand's shape must be a suffix of
//! the other's. `[n, d] + [1, d]`, `[n, d] + [d]` and `[n, 1] + [1]` are
//! accepted; `[n, d] + [n, 1]` is rejected.

use crate::error::{Error, Result};
use crate::scalar::{sigmoid, Scalar};
use crate::tensor::Tensor;

/// Smallest argument passed to `ln`; smaller inputs are clamped.
pub const LN_CLAMP: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug)]
enum UnaryKind {
    Tanh,
    Sigmoid,
    Relu,
    Exp,
    Ln,
    Scale(f64),
    Offset(f64),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(BinaryKind, Var, Var),
    Unary(UnaryKind, Var),
    Softmax(Var),
    Sum(Var),
    SumRows(Var),
    Transpose(Var),
    Concat(Var, Var),
    SliceCols { input: Var, start: usize },
    GatherRows { table: Var, ids: Vec<usize> },
    Pick { input: Var, idx: Vec<usize> },
    Reshape(Var),
    Conv2d { input: Var, weight: Var, bias: Var, stride: usize },
    SpatialMean(Var),
    ChannelAffine { input: Var, scale: Vec<f64> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    /// true when some leaf upstream requires a gradient
    tracked: bool,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
    param: Option<usize>,
}

/// Recorded computation. See the module docs.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    clamp_events: usize,
    backward_passes: usize,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn strip_leading_ones(shape: &[usize]) -> &[usize] {
    let first = shape.iter().position(|&d| d != 1).unwrap_or(shape.len());
    &shape[first..]
}

/// Output shape of a leading-batch broadcast, or `None` when incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a == b {
        return Some(a.to_vec());
    }
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    let (big, small) = if na >= nb { (a, b) } else { (b, a) };
    let (bs, ss) = (strip_leading_ones(big), strip_leading_ones(small));
    if ss.len() <= bs.len() && bs.ends_with(ss) {
        Some(big.to_vec())
    } else {
        None
    }
}

/// `out[m×p] += a[m×k] · b[k×p]`
fn gemm_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let orow = &mut out[i * p..(i + 1) * p];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == T::zero() {
                continue;
            }
            let brow = &b[kk * p..(kk + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×p] · b[k×p]ᵀ`
fn gemm_a_bt_acc<T: Scalar>(g: &[T], b: &[T], out: &mut [T], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let grow = &g[i * p..(i + 1) * p];
        for kk in 0..k {
            let brow = &b[kk * p..(kk + 1) * p];
            let s: T = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
            out[i * k + kk] += s;
        }
    }
}

/// `out[k×p] += a[m×k]ᵀ · g[m×p]`
fn gemm_at_b_acc<T: Scalar>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let grow = &g[i * p..(i + 1) * p];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[kk * p..(kk + 1) * p];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

fn add_into<T: Scalar>(slot: &mut Option<Vec<T>>, contribution: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contribution) {
                *a += c;
            }
        }
        None => *slot = Some(contribution),
    }
}

/// Sum a gradient of `full_len` elements back onto an operand that was
/// repeated by leading-batch broadcasting.
fn reduce_broadcast<T: Scalar>(grad: &[T], target_len: usize) -> Vec<T> {
    if grad.len() == target_len {
        return grad.to_vec();
    }
    let mut out = vec![T::zero(); target_len];
    for chunk in grad.chunks(target_len) {
        for (o, &g) in out.iter_mut().zip(chunk) {
            *o += g;
        }
    }
    out
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            clamp_events: 0,
            backward_passes: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of `ln` inputs clamped to [`LN_CLAMP`] so far.
    pub fn clamp_events(&self) -> usize {
        self.clamp_events
    }

    pub fn backward_passes(&self) -> usize {
        self.backward_passes
    }

    fn push(&mut self, value: Tensor<T>, op: Op, parents: &[Var]) -> Var {
        let tracked = parents.iter().any(|p| self.nodes[p.0].tracked);
        self.nodes.push(Node {
            value,
            op,
            tracked,
            requires_grad: false,
            grad: None,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool, param: Option<usize>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: requires_grad,
            requires_grad,
            grad: None,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false, None)
    }

    /// Leaf whose gradient is accumulated by [`Graph::backward`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true, None)
    }

    /// Leaf bound to parameter `id` of a [`crate::params::ParamStore`].
    pub fn param_leaf(&mut self, value: Tensor<T>, id: usize, requires_grad: bool) -> Var {
        self.push_leaf(value, requires_grad, Some(id))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// `(param id, gradient)` for every parameter leaf that received one.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &Tensor<T>)> {
        self.nodes
            .iter()
            .filter_map(|n| Some((n.param?, n.grad.as_ref()?)))
    }

    // ---- operations ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, p) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * p];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, p);
        let value = Tensor::new(vec![m, p], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let shape = broadcast_shape(self.shape(a), self.shape(b))
            .ok_or_else(|| Error::dim(name, self.shape(a), self.shape(b)))?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let numel: usize = shape.iter().product();
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let out = (0..numel)
            .map(|i| f(va[i % va.len()], vb[i % vb.len()]))
            .collect();
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Binary(kind, a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b, "mul")
    }

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Var {
        let src = self.value(a);
        let mut clamped = 0;
        let value = match kind {
            UnaryKind::Tanh => src.map(T::tanh),
            UnaryKind::Sigmoid => src.map(sigmoid),
            UnaryKind::Relu => src.map(|x| x.max(T::zero())),
            UnaryKind::Exp => src.map(T::exp),
            UnaryKind::Ln => {
                let floor = T::of(LN_CLAMP);
                clamped = src.data().iter().filter(|&&x| !(x >= floor)).count();
                src.map(|x| x.max(floor).ln())
            }
            UnaryKind::Scale(c) => {
                let c = T::of(c);
                src.map(|x| x * c)
            }
            UnaryKind::Offset(c) => {
                let c = T::of(c);
                src.map(|x| x + c)
            }
        };
        self.clamp_events += clamped;
        self.push(value, Op::Unary(kind, a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a)
    }

    /// Natural log with inputs clamped from below at [`LN_CLAMP`].
    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Ln, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(UnaryKind::Scale(c), a)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(UnaryKind::Offset(c), a)
    }

    /// Softmax over the last axis of every row, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        if src.data().iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let cols = src.cols();
        if cols == 0 {
            return Err(Error::dim("softmax", src.shape(), &[1]));
        }
        let mut out = src.data().to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        let value = Tensor::new(src.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Softmax(a), &[a]))
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over rows of a 2-D tensor: `[m×d] → [1×d]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        if src.shape().len() != 2 {
            return Err(Error::dim("sum_rows", src.shape(), &[0, 0]));
        }
        let d = src.cols();
        let mut out = vec![T::zero(); d];
        for r in 0..src.rows() {
            for (o, &x) in out.iter_mut().zip(src.row_slice(r)) {
                *o += x;
            }
        }
        let value = Tensor::new(vec![1, d], out)?;
        Ok(self.push(value, Op::SumRows(a), &[a]))
    }

    /// Mean over rows of a 2-D tensor: `[m×d] → [1×d]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let m = self.shape(a).first().copied().unwrap_or(0);
        if m == 0 {
            return Err(Error::contract("mean_rows of an empty matrix"));
        }
        let s = self.sum_rows(a)?;
        Ok(self.scale(s, 1.0 / m as f64))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        if src.shape().len() != 2 {
            return Err(Error::dim("transpose", src.shape(), &[0, 0]));
        }
        let (m, n) = (src.shape()[0], src.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src.data()[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    /// Concatenate along the last axis; all other extents must agree.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::dim("concat", sa, sb));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let (p, q) = (va.cols(), vb.cols());
        let rows: usize = sa[..sa.len() - 1].iter().product();
        let mut out = Vec::with_capacity(rows * (p + q));
        for r in 0..rows {
            out.extend_from_slice(&va.data()[r * p..(r + 1) * p]);
            out.extend_from_slice(&vb.data()[r * q..(r + 1) * q]);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().expect("non-empty shape") = p + q;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Concat(a, b), &[a, b]))
    }

    /// Columns `start..start+len` of every row.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let src = self.value(a);
        let cols = src.cols();
        if start + len > cols {
            return Err(Error::dim("slice_cols", src.shape(), &[start, len]));
        }
        let rows = src.rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src.row_slice(r)[start..start + len]);
        }
        let mut shape = src.shape().to_vec();
        *shape.last_mut().expect("non-empty shape") = len;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::SliceCols { input: a, start }, &[a]))
    }

    /// Row lookup `table[ids]`: `[v×d] → [k×d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let src = self.value(table);
        if src.shape().len() != 2 {
            return Err(Error::dim("gather_rows", src.shape(), &[0, 0]));
        }
        let size = src.shape()[0];
        if let Some(&bad) = ids.iter().find(|&&i| i >= size) {
            return Err(Error::Vocab { id: bad, size });
        }
        let mut out = Vec::with_capacity(ids.len() * src.cols());
        for &i in ids {
            out.extend_from_slice(src.row_slice(i));
        }
        let value = Tensor::new(vec![ids.len(), src.cols()], out)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Entries at flat indices, shape `[k]`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let src = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= src.numel()) {
            return Err(Error::dim("pick", src.shape(), &[bad]));
        }
        let value = Tensor::vector(idx.iter().map(|&i| src.data()[i]).collect());
        Ok(self.push(
            value,
            Op::Pick {
                input: a,
                idx: idx.to_vec(),
            },
            &[a],
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Valid (unpadded) 2-D convolution.
    ///
    /// `input [N×C×H×W]`, `weight [O×C×K×K]`, `bias [O]` → `[N×O×H'×W']`
    /// with `H' = (H − K) / stride + 1`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let (si, sw) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        if si.len() != 4 || sw.len() != 4 || si[1] != sw[1] || sw[2] != sw[3] || stride == 0 {
            return Err(Error::dim("conv2d", &si, &sw));
        }
        if self.value(bias).numel() != sw[0] {
            return Err(Error::dim("conv2d bias", &sw, self.shape(bias)));
        }
        let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (o, k) = (sw[0], sw[2]);
        if h < k || w < k {
            return Err(Error::dim("conv2d receptive field", &si, &sw));
        }
        let (ho, wo) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let b = self.value(bias).data();
        let mut out = vec![T::zero(); n * o * ho * wo];
        for ni in 0..n {
            for oi in 0..o {
                let plane = &mut out[(ni * o + oi) * ho * wo..(ni * o + oi + 1) * ho * wo];
                plane.iter_mut().for_each(|v| *v = b[oi]);
                for ci in 0..c {
                    let xin = &x[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = wt[((oi * c + ci) * k + ky) * k + kx];
                            for oy in 0..ho {
                                let xrow = &xin[(oy * stride + ky) * w..];
                                let prow = &mut plane[oy * wo..(oy + 1) * wo];
                                for (ox, pv) in prow.iter_mut().enumerate() {
                                    *pv += wv * xrow[ox * stride + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, o, ho, wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
            },
            &[input, weight, bias],
        ))
    }

    /// Global average pool: `[N×C×H×W] → [N×C]`.
    pub fn spatial_mean(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || s[2] * s[3] == 0 {
            return Err(Error::dim("spatial_mean", &s, &[0, 0, 0, 0]));
        }
        let area = s[2] * s[3];
        let inv = T::one() / T::of(area as f64);
        let out = self
            .value(a)
            .data()
            .chunks(area)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(vec![s[0], s[1]], out)?;
        Ok(self.push(value, Op::SpatialMean(a), &[a]))
    }

    /// Fixed per-channel affine map `x·scale[c] + shift[c]` over `[N×C×H×W]`.
    /// `scale` and `shift` are constants; only `x` receives a gradient.
    pub fn channel_affine(&mut self, a: Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || s[1] != scale.len() || s[1] != shift.len() {
            return Err(Error::dim("channel_affine", &s, &[scale.len()]));
        }
        let area = s[2] * s[3];
        let mut out = self.value(a).data().to_vec();
        for (pi, plane) in out.chunks_mut(area).enumerate() {
            let c = pi % s[1];
            let (m, b) = (T::of(scale[c]), T::of(shift[c]));
            plane.iter_mut().for_each(|v| *v = *v * m + b);
        }
        let value = Tensor::new(s, out)?;
        Ok(self.push(
            value,
            Op::ChannelAffine {
                input: a,
                scale: scale.to_vec(),
            },
            &[a],
        ))
    }

    // ---- backward ------------------------------------------------------

    /// Back-propagate from a scalar `loss`, adding `∂loss/∂leaf` into the
    /// gradient accumulator of every leaf that requires one. Repeated calls
    /// accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_passes += 1;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].tracked {
                continue;
            }
            self.propagate(idx, g, &mut grads)?;
        }
        Ok(())
    }

    fn send(&self, grads: &mut [Option<Vec<T>>], to: Var, g: Vec<T>) {
        if self.nodes[to.0].tracked {
            add_into(&mut grads[to.0], g);
        }
    }

    fn propagate(&mut self, idx: usize, g: Vec<T>, grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {
                let node = &mut self.nodes[idx];
                if node.requires_grad {
                    match &mut node.grad {
                        Some(acc) => {
                            for (a, x) in acc.data_mut().iter_mut().zip(g) {
                                *a += x;
                            }
                        }
                        None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (m, k, p) = (sa[0], sa[1], sb[1]);
                if self.nodes[a.0].tracked {
                    let mut ga = vec![T::zero(); m * k];
                    gemm_a_bt_acc(&g, self.value(b).data(), &mut ga, m, k, p);
                    self.send(grads, a, ga);
                }
                if self.nodes[b.0].tracked {
                    let mut gb = vec![T::zero(); k * p];
                    gemm_at_b_acc(self.value(a).data(), &g, &mut gb, m, k, p);
                    self.send(grads, b, gb);
                }
            }
            Op::Binary(kind, a, b) => {
                let (na, nb) = (self.value(a).numel(), self.value(b).numel());
                if self.nodes[a.0].tracked {
                    let full: Vec<T> = match kind {
                        BinaryKind::Add | BinaryKind::Sub => g.clone(),
                        BinaryKind::Mul => {
                            let vb = self.value(b).data();
                            g.iter().enumerate().map(|(i, &x)| x * vb[i % nb]).collect()
                        }
                    };
                    self.send(grads, a, reduce_broadcast(&full, na));
                }
                if self.nodes[b.0].tracked {
                    let full: Vec<T> = match kind {
                        BinaryKind::Add => g.clone(),
                        BinaryKind::Sub => g.iter().map(|&x| -x).collect(),
                        BinaryKind::Mul => {
                            let va = self.value(a).data();
                            g.iter().enumerate().map(|(i, &x)| x * va[i % na]).collect()
                        }
                    };
                    self.send(grads, b, reduce_broadcast(&full, nb));
                }
            }
            Op::Unary(kind, a) => {
                let y = self.nodes[idx].value.data();
                let x = self.value(a).data();
                let ga: Vec<T> = match kind {
                    UnaryKind::Tanh => g.iter().zip(y).map(|(&g, &y)| g * (T::one() - y * y)).collect(),
                    UnaryKind::Sigmoid => g.iter().zip(y).map(|(&g, &y)| g * y * (T::one() - y)).collect(),
                    UnaryKind::Relu => g
                        .iter()
                        .zip(x)
                        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                        .collect(),
                    UnaryKind::Exp => g.iter().zip(y).map(|(&g, &y)| g * y).collect(),
                    UnaryKind::Ln => {
                        let floor = T::of(LN_CLAMP);
                        g.iter()
                            .zip(x)
                            .map(|(&g, &x)| if x >= floor { g / x } else { T::zero() })
                            .collect()
                    }
                    UnaryKind::Scale(c) => {
                        let c = T::of(c);
                        g.iter().map(|&g| g * c).collect()
                    }
                    UnaryKind::Offset(_) => g,
                };
                self.send(grads, a, ga);
            }
            Op::Softmax(a) => {
                let y = &self.nodes[idx].value;
                let cols = y.cols();
                let mut ga = vec![T::zero(); g.len()];
                for ((gr, yr), out) in g.chunks(cols).zip(y.data().chunks(cols)).zip(ga.chunks_mut(cols)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((o, &gv), &yv) in out.iter_mut().zip(gr).zip(yr) {
                        *o = yv * (gv - dot);
                    }
                }
                self.send(grads, a, ga);
            }
            Op::Sum(a) => {
                let n = self.value(a).numel();
                self.send(grads, a, vec![g[0]; n]);
            }
            Op::SumRows(a) => {
                let m = self.value(a).rows();
                let mut ga = Vec::with_capacity(m * g.len());
                for _ in 0..m {
                    ga.extend_from_slice(&g);
                }
                self.send(grads, a, ga);
            }
            Op::Transpose(a) => {
                let s = self.shape(a);
                let (m, n) = (s[0], s[1]);
                let mut ga = vec![T::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] = g[j * m + i];
                    }
                }
                self.send(grads, a, ga);
            }
            Op::Concat(a, b) => {
                let (p, q) = (self.value(a).cols(), self.value(b).cols());
                let rows = self.value(a).rows();
                let mut ga = Vec::with_capacity(rows * p);
                let mut gb = Vec::with_capacity(rows * q);
                for r in 0..rows {
                    let row = &g[r * (p + q)..(r + 1) * (p + q)];
                    ga.extend_from_slice(&row[..p]);
                    gb.extend_from_slice(&row[p..]);
                }
                self.send(grads, a, ga);
                self.send(grads, b, gb);
            }
            Op::SliceCols { input, start } => {
                let src = self.value(input);
                let (rows, cols) = (src.rows(), src.cols());
                let len = self.nodes[idx].value.cols();
                let mut ga = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    ga[r * cols + start..r * cols + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.send(grads, input, ga);
            }
            Op::GatherRows { table, ids } => {
                let src = self.value(table);
                let d = src.cols();
                let mut gt = vec![T::zero(); src.numel()];
                for (k, &i) in ids.iter().enumerate() {
                    for (o, &x) in gt[i * d..(i + 1) * d].iter_mut().zip(&g[k * d..(k + 1) * d]) {
                        *o += x;
                    }
                }
                self.send(grads, table, gt);
            }
            Op::Pick { input, idx: picks } => {
                let mut ga = vec![T::zero(); self.value(input).numel()];
                for (&i, &x) in picks.iter().zip(&g) {
                    ga[i] += x;
                }
                self.send(grads, input, ga);
            }
            Op::Reshape(a) => self.send(grads, a, g),
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
            } => self.conv2d_backward(idx, &g, input, weight, bias, stride, grads),
            Op::SpatialMean(a) => {
                let s = self.shape(a);
                let area = s[2] * s[3];
                let inv = T::one() / T::of(area as f64);
                let mut ga = Vec::with_capacity(g.len() * area);
                for &x in &g {
                    ga.extend(std::iter::repeat_n(x * inv, area));
                }
                self.send(grads, a, ga);
            }
            Op::ChannelAffine { input, scale } => {
                let s = self.shape(input);
                let (c, area) = (s[1], s[2] * s[3]);
                let mut ga = g;
                for (pi, plane) in ga.chunks_mut(area).enumerate() {
                    let m = T::of(scale[pi % c]);
                    plane.iter_mut().for_each(|v| *v *= m);
                }
                self.send(grads, input, ga);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        idx: usize,
        g: &[T],
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        grads: &mut [Option<Vec<T>>],
    ) {
        let si = self.shape(input);
        let sw = self.shape(weight);
        let so = self.nodes[idx].value.shape();
        let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (o, k) = (sw[0], sw[2]);
        let (ho, wo) = (so[2], so[3]);
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let want_x = self.nodes[input.0].tracked;
        let want_w = self.nodes[weight.0].tracked;
        let mut gx = if want_x { vec![T::zero(); x.len()] } else { Vec::new() };
        let mut gw = if want_w { vec![T::zero(); wt.len()] } else { Vec::new() };
        let mut gb = vec![T::zero(); o];
        for ni in 0..n {
            for oi in 0..o {
                let gplane = &g[(ni * o + oi) * ho * wo..(ni * o + oi + 1) * ho * wo];
                gb[oi] += gplane.iter().copied().sum::<T>();
                for ci in 0..c {
                    let base = (ni * c + ci) * h * w;
                    for ky in 0..k {
                        for kx in 0..k {
                            let widx = ((oi * c + ci) * k + ky) * k + kx;
                            let wv = wt[widx];
                            let mut acc = T::zero();
                            for oy in 0..ho {
                                let row = base + (oy * stride + ky) * w + kx;
                                let grow = &gplane[oy * wo..(oy + 1) * wo];
                                for (ox, &gv) in grow.iter().enumerate() {
                                    let xi = row + ox * stride;
                                    if want_w {
                                        acc += gv * x[xi];
                                    }
                                    if want_x {
                                        gx[xi] += gv * wv;
                                    }
                                }
                            }
                            if want_w {
                                gw[widx] += acc;
                            }
                        }
                    }
                }
            }
        }
        if want_x {
            self.send(grads, input, gx);
        }
        if want_w {
            self.send(grads, weight, gw);
        }
        self.send(grads, bias, gb);
    }
}
