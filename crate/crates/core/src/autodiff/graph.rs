//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node to the tape. Nodes are stored in creation
//! order, which is a topological order, so `backward` is a single reverse
//! sweep over the tape.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Conv1d {
        x: Var,
        w: Var,
        padding: usize,
        groups: usize,
    },
    TransposeLast2(Var),
    Reshape(Var),
    LayerNorm {
        x: Var,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Silu(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    BroadcastTo(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// A dynamic computation graph. Single-threaded; build one per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `out_shape`, the flat index of the broadcast source.
fn broadcast_map(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - in_shape.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..in_shape.len()).rev() {
        strides[offset + i] = if in_shape[i] == 1 { 0 } else { s };
        s *= in_shape[i];
    }
    let n: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(n);
    if n == 0 {
        return map;
    }
    let (inner, inner_stride) = match rank {
        0 => (1, 0),
        _ => (out_shape[rank - 1], strides[rank - 1]),
    };
    let outer_rank = rank.saturating_sub(1);
    let mut idx = vec![0usize; outer_rank];
    let mut cur = 0usize;
    for _ in 0..n / inner {
        map.extend((0..inner).map(|j| cur + j * inner_stride));
        for d in (0..outer_rank).rev() {
            idx[d] += 1;
            cur += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            cur -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    map
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.as_ref().map(|g| {
            Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone())
                .expect("grad shape matches value")
        })
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Inputs are never needed for backward if nothing upstream wants a grad.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shapes(sa, sb)
            .ok_or_else(|| Error::shape(name, format!("{sa:?} vs {sb:?}")))?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_map(sa, &out_shape);
            let mb = broadcast_map(sb, &out_shape);
            ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect()
        };
        Tensor::new(out_shape, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", t, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let t = self.value(a).map(|v| v * k);
        self.push("scale", t, Op::Scale(a, k), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Result<Var> {
        let t = self.value(a).map(|v| v + k);
        self.push("add_scalar", t, Op::AddScalar(a), &[a])
    }

    /// `a: [..., m, k]` times `b: [k, n]` (shared) or `b: [..., k, n]` (batched).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", format!("need rank >= 2, got {sa:?} and {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let batched = sb.len() > 2;
        if kb != k || (batched && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let boff = if batched { bi * k * n } else { 0 };
            for i in 0..m {
                let arow = &da[(bi * m + i) * k..(bi * m + i + 1) * k];
                let orow = &mut out[(bi * m + i) * n..(bi * m + i + 1) * n];
                for (p, &av) in arow.iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &db[boff + p * n..boff + (p + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let t = Tensor::new(shape, out)?;
        self.push("matmul", t, Op::MatMul(a, b), &[a, b])
    }

    /// Channels-first grouped 1-D cross-correlation.
    ///
    /// `x: [batch, c_in, len]`, `w: [c_out, c_in / groups, kernel]`, zero padding
    /// of `padding` on both ends. Output length is `len + 2*padding - kernel + 1`.
    pub fn conv1d(&mut self, x: Var, w: Var, padding: usize, groups: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 3 || groups == 0 {
            return Err(Error::shape("conv1d", format!("x {sx:?}, w {sw:?}, groups {groups}")));
        }
        let (bsz, cin, len) = (sx[0], sx[1], sx[2]);
        let (cout, cpg, kernel) = (sw[0], sw[1], sw[2]);
        if cin % groups != 0 || cout % groups != 0 || cpg != cin / groups || len + 2 * padding < kernel {
            return Err(Error::shape(
                "conv1d",
                format!("x {sx:?}, w {sw:?}, padding {padding}, groups {groups}"),
            ));
        }
        let lout = len + 2 * padding - kernel + 1;
        let opg = cout / groups;
        let (dx, dw) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![0.0; bsz * cout * lout];
        for b in 0..bsz {
            for co in 0..cout {
                let g = co / opg;
                let orow = &mut out[(b * cout + co) * lout..(b * cout + co + 1) * lout];
                for ci in 0..cpg {
                    let xrow = &dx[(b * cin + g * cpg + ci) * len..(b * cin + g * cpg + ci + 1) * len];
                    let wrow = &dw[(co * cpg + ci) * kernel..(co * cpg + ci + 1) * kernel];
                    for (k, &wv) in wrow.iter().enumerate() {
                        for (t, o) in orow.iter_mut().enumerate() {
                            let src = t + k;
                            if src >= padding && src - padding < len {
                                *o += wv * xrow[src - padding];
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![bsz, cout, lout], out)?;
        self.push("conv1d", t, Op::Conv1d { x, w, padding, groups }, &[x, w])
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("transpose", format!("{s:?}")));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch: usize = s[..s.len() - 2].iter().product();
        let d = self.value(x).data();
        let mut out = vec![0.0; d.len()];
        for b in 0..batch {
            for i in 0..r {
                for j in 0..c {
                    out[b * r * c + j * r + i] = d[b * r * c + i * c + j];
                }
            }
        }
        let mut shape = s[..s.len() - 2].to_vec();
        shape.extend([c, r]);
        let t = Tensor::new(shape, out)?;
        self.push("transpose", t, Op::TransposeLast2(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push("reshape", t, Op::Reshape(x), &[x])
    }

    /// Normalizes over the last axis, without affine parameters.
    pub fn layernorm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| Error::shape("layernorm", "scalar input"))?;
        let data = self.value(x).data();
        let rows = data.len() / d.max(1);
        let mut out = vec![0.0; data.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &data[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            rstd.push(inv);
        }
        let t = Tensor::new(s, out)?;
        self.push("layernorm", t, Op::LayerNorm { x, rstd }, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(gelu);
        self.push("gelu", t, Op::Gelu(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v * sigmoid(v));
        self.push("silu", t, Op::Silu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.max(0.0));
        self.push("relu", t, Op::Relu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(f64::tanh);
        self.push("tanh", t, Op::Tanh(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(f64::exp);
        self.push("exp", t, Op::Exp(x), &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        let data = self.value(x).data();
        let mut out = vec![0.0; data.len()];
        for (orow, row) in out.chunks_mut(d).zip(data.chunks(d)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (o, v) in orow.iter_mut().zip(row) {
                *o = (v - max).exp();
                total += *o;
            }
            orow.iter_mut().for_each(|o| *o /= total);
        }
        let t = Tensor::new(s, out)?;
        self.push("softmax", t, Op::Softmax(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(x).data().iter().sum());
        self.push("sum", t, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor::scalar(v.data().iter().sum::<f64>() / v.numel() as f64);
        self.push("mean", t, Op::Mean(x), &[x])
    }

    /// Mean squared error over all elements of two equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape("mse", format!("{sa:?} vs {sb:?}")));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let n = da.len() as f64;
        let t = Tensor::scalar(da.iter().zip(db).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n);
        self.push("mse", t, Op::Mse(a, b), &[a, b])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} for shape {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", format!("{first:?} vs {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let width = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * width..(o + 1) * width]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        self.push("concat", t, Op::Concat { inputs: inputs.to_vec(), axis }, inputs)
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(Error::shape("slice", format!("{s:?} axis {axis} range {start}..{end}")));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * s[axis] * inner;
            out.extend_from_slice(&d[base + start * inner..base + end * inner]);
        }
        let mut shape = s.clone();
        shape[axis] = end - start;
        let t = Tensor::new(shape, out)?;
        self.push("slice", t, Op::Slice { x, axis, start }, &[x])
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        match broadcast_shapes(&s, shape) {
            Some(ref b) if b == shape => {}
            _ => return Err(Error::shape("broadcast", format!("{s:?} -> {shape:?}"))),
        }
        let map = broadcast_map(&s, shape);
        let d = self.value(x).data();
        let t = Tensor::new(shape.to_vec(), map.iter().map(|&i| d[i]).collect())?;
        self.push("broadcast", t, Op::BroadcastTo(x), &[x])
    }

    /// Reverse sweep from a scalar loss. Populates a gradient on every node
    /// that requires one, including leaves the loss does not depend on.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.consumed = true;
        for node in &mut self.nodes {
            if node.requires_grad {
                node.grad = Some(vec![0.0; node.value.numel()]);
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad || matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let g = self.nodes[idx].grad.take().expect("grad allocated");
            self.backward_node(idx, &g);
            self.nodes[idx].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [f64], &Graph)) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let mut buf = self.nodes[v.0].grad.take().expect("grad allocated");
        f(&mut buf, self);
        self.nodes[v.0].grad = Some(buf);
    }

    fn accumulate_broadcast(&mut self, v: Var, out_shape: &[usize], g: &[f64], factor: impl Fn(usize) -> f64) {
        let in_shape = self.shape(v).to_vec();
        self.accumulate(v, |buf, _| {
            if in_shape == out_shape {
                for (i, b) in buf.iter_mut().enumerate() {
                    *b += g[i] * factor(i);
                }
            } else {
                for (i, &j) in broadcast_map(&in_shape, out_shape).iter().enumerate() {
                    buf[j] += g[i] * factor(i);
                }
            }
        });
    }

    fn backward_node(&mut self, idx: usize, g: &[f64]) {
        let out_shape = self.nodes[idx].value.shape().to_vec();
        // Temporarily move the op out so we can borrow the graph mutably.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate_broadcast(*a, &out_shape, g, |_| 1.0);
                self.accumulate_broadcast(*b, &out_shape, g, |_| 1.0);
            }
            Op::Sub(a, b) => {
                self.accumulate_broadcast(*a, &out_shape, g, |_| 1.0);
                self.accumulate_broadcast(*b, &out_shape, g, |_| -1.0);
            }
            Op::Mul(a, b) => {
                let va = self.expand(*a, &out_shape);
                let vb = self.expand(*b, &out_shape);
                self.accumulate_broadcast(*a, &out_shape, g, |i| vb[i]);
                self.accumulate_broadcast(*b, &out_shape, g, |i| va[i]);
            }
            Op::Scale(a, k) => {
                let k = *k;
                self.accumulate(*a, |buf, _| buf.iter_mut().zip(g).for_each(|(b, gv)| *b += k * gv));
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                self.accumulate(*a, |buf, _| buf.iter_mut().zip(g).for_each(|(b, gv)| *b += gv));
            }
            Op::MatMul(a, b) => self.matmul_backward(*a, *b, g),
            Op::Conv1d { x, w, padding, groups } => self.conv1d_backward(*x, *w, *padding, *groups, g),
            Op::TransposeLast2(x) => {
                let s = self.shape(*x).to_vec();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                self.accumulate(*x, |buf, _| {
                    let batch = buf.len() / (r * c);
                    for bi in 0..batch {
                        for i in 0..r {
                            for j in 0..c {
                                buf[bi * r * c + i * c + j] += g[bi * r * c + j * r + i];
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, rstd } => {
                let d = *out_shape.last().unwrap();
                let y = self.nodes[idx].value.data().to_vec();
                self.accumulate(*x, |buf, _| {
                    for (r, &inv) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let yr = &y[r * d..(r + 1) * d];
                        let mg = gr.iter().sum::<f64>() / d as f64;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for k in 0..d {
                            buf[r * d + k] += inv * (gr[k] - mg - yr[k] * mgy);
                        }
                    }
                });
            }
            Op::Gelu(x) => self.unary_backward(*x, g, |v, _| gelu_grad(v), idx),
            Op::Silu(x) => self.unary_backward(
                *x,
                g,
                |v, _| {
                    let s = sigmoid(v);
                    s * (1.0 + v * (1.0 - s))
                },
                idx,
            ),
            Op::Relu(x) => self.unary_backward(*x, g, |v, _| if v > 0.0 { 1.0 } else { 0.0 }, idx),
            Op::Tanh(x) => self.unary_backward(*x, g, |_, y| 1.0 - y * y, idx),
            Op::Exp(x) => self.unary_backward(*x, g, |_, y| y, idx),
            Op::Softmax(x) => {
                let d = *out_shape.last().unwrap();
                let y = self.nodes[idx].value.data().to_vec();
                self.accumulate(*x, |buf, _| {
                    for r in 0..y.len() / d {
                        let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for k in 0..d {
                            buf[r * d + k] += yr[k] * (gr[k] - dot);
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = g[0];
                self.accumulate(*x, |buf, _| buf.iter_mut().for_each(|b| *b += g0));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                let g0 = g[0] / n;
                self.accumulate(*x, |buf, _| buf.iter_mut().for_each(|b| *b += g0));
            }
            Op::Mse(a, b) => {
                let da = self.value(*a).data().to_vec();
                let db = self.value(*b).data().to_vec();
                let k = 2.0 * g[0] / da.len() as f64;
                self.accumulate(*a, |buf, _| {
                    for i in 0..buf.len() {
                        buf[i] += k * (da[i] - db[i]);
                    }
                });
                self.accumulate(*b, |buf, _| {
                    for i in 0..buf.len() {
                        buf[i] -= k * (da[i] - db[i]);
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let width = self.shape(v)[*axis] * inner;
                    self.accumulate(v, |buf, _| {
                        for o in 0..outer {
                            for k in 0..width {
                                buf[o * width + k] += g[o * total + offset + k];
                            }
                        }
                    });
                    offset += width;
                }
            }
            Op::Slice { x, axis, start } => {
                let s = self.shape(*x).to_vec();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let width = out_shape[*axis] * inner;
                let (axis, start) = (*axis, *start);
                self.accumulate(*x, |buf, _| {
                    for o in 0..outer {
                        let base = o * s[axis] * inner + start * inner;
                        for k in 0..width {
                            buf[base + k] += g[o * width + k];
                        }
                    }
                });
            }
            Op::BroadcastTo(x) => self.accumulate_broadcast(*x, &out_shape, g, |_| 1.0),
        }
        self.nodes[idx].op = op;
    }

    fn expand(&self, v: Var, out_shape: &[usize]) -> Vec<f64> {
        let t = self.value(v);
        if t.shape() == out_shape {
            t.data().to_vec()
        } else {
            broadcast_map(t.shape(), out_shape)
                .into_iter()
                .map(|i| t.data()[i])
                .collect()
        }
    }

    fn unary_backward(&mut self, x: Var, g: &[f64], df: impl Fn(f64, f64) -> f64, out: usize) {
        let xs = self.value(x).data().to_vec();
        let ys = self.nodes[out].value.data().to_vec();
        self.accumulate(x, |buf, _| {
            for i in 0..buf.len() {
                buf[i] += g[i] * df(xs[i], ys[i]);
            }
        });
    }

    fn matmul_backward(&mut self, a: Var, b: Var, g: &[f64]) {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        let batched = sb.len() > 2;
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let da = self.value(a).data().to_vec();
        let db = self.value(b).data().to_vec();
        self.accumulate(a, |buf, _| {
            for bi in 0..batch {
                let boff = if batched { bi * k * n } else { 0 };
                for i in 0..m {
                    let grow = &g[(bi * m + i) * n..(bi * m + i + 1) * n];
                    for p in 0..k {
                        let brow = &db[boff + p * n..boff + (p + 1) * n];
                        buf[(bi * m + i) * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
        });
        self.accumulate(b, |buf, _| {
            for bi in 0..batch {
                let boff = if batched { bi * k * n } else { 0 };
                for i in 0..m {
                    let grow = &g[(bi * m + i) * n..(bi * m + i + 1) * n];
                    for p in 0..k {
                        let av = da[(bi * m + i) * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for (bv, gv) in buf[boff + p * n..boff + (p + 1) * n].iter_mut().zip(grow) {
                            *bv += av * gv;
                        }
                    }
                }
            }
        });
    }

    fn conv1d_backward(&mut self, x: Var, w: Var, padding: usize, groups: usize, g: &[f64]) {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let (bsz, cin, len) = (sx[0], sx[1], sx[2]);
        let (cout, cpg, kernel) = (sw[0], sw[1], sw[2]);
        let lout = len + 2 * padding - kernel + 1;
        let opg = cout / groups;
        let dx = self.value(x).data().to_vec();
        let dw = self.value(w).data().to_vec();
        self.accumulate(x, |buf, _| {
            for b in 0..bsz {
                for co in 0..cout {
                    let grp = co / opg;
                    let grow = &g[(b * cout + co) * lout..(b * cout + co + 1) * lout];
                    for ci in 0..cpg {
                        let xoff = (b * cin + grp * cpg + ci) * len;
                        let wrow = &dw[(co * cpg + ci) * kernel..(co * cpg + ci + 1) * kernel];
                        for (k, &wv) in wrow.iter().enumerate() {
                            for (t, &gv) in grow.iter().enumerate() {
                                let src = t + k;
                                if src >= padding && src - padding < len {
                                    buf[xoff + src - padding] += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        });
        self.accumulate(w, |buf, _| {
            for b in 0..bsz {
                for co in 0..cout {
                    let grp = co / opg;
                    let grow = &g[(b * cout + co) * lout..(b * cout + co + 1) * lout];
                    for ci in 0..cpg {
                        let xoff = (b * cin + grp * cpg + ci) * len;
                        for k in 0..kernel {
                            let mut acc = 0.0;
                            for (t, &gv) in grow.iter().enumerate() {
                                let src = t + k;
                                if src >= padding && src - padding < len {
                                    acc += gv * dx[xoff + src - padding];
                                }
                            }
                            buf[(co * cpg + ci) * kernel + k] += acc;
                        }
                    }
                }
            }
        });
    }
}
