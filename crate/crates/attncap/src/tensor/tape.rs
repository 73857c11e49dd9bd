//! Wengert tape: operations recorded in forward order, gradients computed by
//! replaying the list once in reverse.
//!
//! A tape and the tensors it references belong to one thread for the duration
//! of a forward+backward pass; distinct tapes run concurrently without shared
//! mutable state. Leaf values are shared with their owners (`Arc`), so binding
//! model parameters to a fresh tape per example is cheap.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
enum UnaryKind {
    Tanh,
    Sigmoid,
    Relu,
    Exp,
    Log,
    AddConst(f64),
    Scale(f64),
}

#[derive(Debug, Clone, Copy)]
enum ReduceKind {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// [m×k] · [k×n] → [m×n]
    Matmul(Var, Var),
    /// [m×k] · [k] → [m]
    Matvec(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    /// Hadamard product.
    Mul(Var, Var),
    /// [r×c] + [c], the vector added to every row.
    AddRows(Var, Var),
    Unary(Var, UnaryKind),
    SoftmaxLast(Var),
    Reduce(Var, ReduceKind, Option<usize>),
    /// 1-D concatenation.
    Concat(Vec<Var>),
    Reshape(Var),
    /// Row gather from a [V×d] table; backward scatters additively.
    EmbedRows(Var, Vec<usize>),
    Conv2d {
        input: Var,
        kernels: Var,
        bias: Var,
        pad: usize,
        stride: usize,
    },
    /// 2×2 window, stride 2. `argmax` holds the flat input index that won
    /// each window (first occurrence on ties).
    MaxPool2x2 {
        input: Var,
        argmax: Vec<usize>,
    },
    /// Mean of -ln softmax(logits_t)[target_t] over non-pad positions.
    CrossEntropyMasked {
        logits: Var,
        targets: Vec<usize>,
        pad_id: usize,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Reverse-mode tape. Nodes are stored in topological (construction) order;
/// backward walks them exactly once, last to first.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input tensor. Gradients flow to it iff `requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad();
        self.push(Op::Leaf, t, needs)
    }

    /// Register a tensor that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t.with_requires_grad(false), false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if any flowed there.
    /// Remove and return the gradient buffer of `v`, if one was computed.
    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads[v.0].take()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copy of a leaf's tensor with its gradient slot filled in.
    pub fn leaf_tensor(&self, v: Var) -> Tensor {
        let mut t = self.nodes[v.0].value.clone();
        if let Some(g) = self.grad(v) {
            t.set_grad(g.to_vec());
        }
        t
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ----- forward operations -------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a).values(), self.value(b).values());
        let mut out = vec![0.0; m * n];
        matmul_into(av, bv, &mut out, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul(a, b), Tensor::new(vec![m, n], out)?, needs))
    }

    pub fn matvec(&mut self, a: Var, x: Var) -> Result<Var> {
        let (sa, sx) = (self.shape(a), self.shape(x));
        if sa.len() != 2 || sx.len() != 1 || sa[1] != sx[0] {
            return Err(Error::ShapeMismatch {
                op: "matvec",
                lhs: sa.to_vec(),
                rhs: sx.to_vec(),
            });
        }
        let (m, k) = (sa[0], sa[1]);
        let (av, xv) = (self.value(a).values(), self.value(x).values());
        let out: Vec<f64> = (0..m)
            .map(|i| dot(&av[i * k..(i + 1) * k], xv))
            .collect();
        let needs = self.needs(a) || self.needs(x);
        Ok(self.push(Op::Matvec(a, x), Tensor::vector(out), needs))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (s[0], s[1]);
        let xv = self.value(x).values();
        let mut out = vec![0.0; r * c];
        transpose_into(xv, &mut out, r, c);
        let needs = self.needs(x);
        Ok(self.push(Op::Transpose(x), Tensor::new(vec![c, r], out)?, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), Tensor::new(shape, out)?, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), Tensor::new(shape, out)?, needs))
    }

    /// Add a length-c vector to every row of an [r×c] matrix.
    pub fn add_rows(&mut self, m: Var, v: Var) -> Result<Var> {
        let (sm, sv) = (self.shape(m), self.shape(v));
        if sm.len() != 2 || sv.len() != 1 || sm[1] != sv[0] {
            return Err(Error::ShapeMismatch {
                op: "add_rows",
                lhs: sm.to_vec(),
                rhs: sv.to_vec(),
            });
        }
        let (r, c) = (sm[0], sm[1]);
        let (mv, vv) = (self.value(m).values(), self.value(v).values());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = mv[i * c + j] + vv[j];
            }
        }
        let needs = self.needs(m) || self.needs(v);
        Ok(self.push(Op::AddRows(m, v), Tensor::new(vec![r, c], out)?, needs))
    }

    fn unary(&mut self, x: Var, kind: UnaryKind) -> Result<Var> {
        let xv = self.value(x).values();
        let out: Vec<f64> = match kind {
            UnaryKind::Tanh => xv.iter().map(|v| v.tanh()).collect(),
            UnaryKind::Sigmoid => xv.iter().map(|v| sigmoid(*v)).collect(),
            UnaryKind::Relu => xv.iter().map(|v| v.max(0.0)).collect(),
            UnaryKind::Exp => xv.iter().map(|v| v.exp()).collect(),
            UnaryKind::Log => {
                if let Some(i) = xv.iter().position(|v| *v <= 0.0) {
                    return Err(Error::Domain {
                        op: "log",
                        index: i,
                        value: xv[i],
                    });
                }
                xv.iter().map(|v| v.ln()).collect()
            }
            UnaryKind::AddConst(c) => xv.iter().map(|v| v + c).collect(),
            UnaryKind::Scale(c) => xv.iter().map(|v| v * c).collect(),
        };
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(Op::Unary(x, kind), Tensor::new(shape, out)?, needs))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Relu)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Log)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, UnaryKind::AddConst(c))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, UnaryKind::Scale(c))
    }

    /// Softmax over the last axis, max-subtracted for stability.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "softmax",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let n = *s.last().unwrap();
        let xv = self.value(x).values();
        let mut out = vec![0.0; xv.len()];
        for (xs, os) in xv.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            softmax_slice(xs, os);
        }
        let shape = s.to_vec();
        let needs = self.needs(x);
        Ok(self.push(Op::SoftmaxLast(x), Tensor::new(shape, out)?, needs))
    }

    fn reduce(&mut self, x: Var, kind: ReduceKind, axis: Option<usize>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if let Some(ax) = axis {
            if ax >= s.len() {
                return Err(Error::BadAxis {
                    axis: ax,
                    rank: s.len(),
                });
            }
        }
        let xv = self.value(x).values();
        let (out_shape, mut out) = match axis {
            None => (vec![], vec![xv.iter().sum::<f64>()]),
            Some(ax) => {
                let extent = s[ax];
                let outer: usize = s[..ax].iter().product();
                let inner: usize = s[ax + 1..].iter().product();
                let mut acc = vec![0.0; outer * inner];
                for o in 0..outer {
                    for j in 0..extent {
                        let base = (o * extent + j) * inner;
                        for i in 0..inner {
                            acc[o * inner + i] += xv[base + i];
                        }
                    }
                }
                let mut out_shape = s.clone();
                out_shape.remove(ax);
                (out_shape, acc)
            }
        };
        if matches!(kind, ReduceKind::Mean) {
            let count = match axis {
                None => xv.len(),
                Some(ax) => s[ax],
            } as f64;
            for v in &mut out {
                *v /= count;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Op::Reduce(x, kind, axis),
            Tensor::new(out_shape, out)?,
            needs,
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, ReduceKind::Sum, None)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, ReduceKind::Mean, None)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, ReduceKind::Sum, Some(axis))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, ReduceKind::Mean, Some(axis))
    }

    /// Concatenate 1-D tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat of zero tensors"));
        }
        let mut out = Vec::new();
        let mut needs = false;
        for &p in parts {
            if self.shape(p).len() != 1 {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: self.shape(p).to_vec(),
                    rhs: vec![],
                });
            }
            out.extend_from_slice(self.value(p).values());
            needs |= self.needs(p);
        }
        Ok(self.push(Op::Concat(parts.to_vec()), Tensor::vector(out), needs))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let data = self.value(x).share_data();
        let needs = self.needs(x);
        Ok(self.push(Op::Reshape(x), Tensor::from_shared(shape, data), needs))
    }

    /// Gather rows of a [V×d] table; `ids` may be empty (-> [0×d]).
    pub fn embed_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "embed_rows",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (v, d) = (s[0], s[1]);
        let tv = self.value(table).values();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::IndexOutOfRange { id, size: v });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            Op::EmbedRows(table, ids.to_vec()),
            Tensor::new(vec![ids.len(), d], out)?,
            needs,
        ))
    }

    /// Cross-correlation of [inC×H×W] with [outC×inC×kh×kw] kernels plus
    /// per-channel bias, zero padding `pad`, given stride.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernels: Var,
        bias: Var,
        pad: usize,
        stride: usize,
    ) -> Result<Var> {
        let (si, sk, sb) = (
            self.shape(input).to_vec(),
            self.shape(kernels).to_vec(),
            self.shape(bias).to_vec(),
        );
        if si.len() != 3 || sk.len() != 4 || sb.len() != 1 || si[0] != sk[1] || sb[0] != sk[0] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: si,
                rhs: sk,
            });
        }
        let (in_c, h, w) = (si[0], si[1], si[2]);
        let (out_c, kh, kw) = (sk[0], sk[2], sk[3]);
        let (oh, ow) = conv_out_extent(h, kh, pad, stride)
            .zip(conv_out_extent(w, kw, pad, stride))
            .ok_or(Error::ShapeMismatch {
                op: "conv2d spatial arithmetic",
                lhs: vec![h, w],
                rhs: vec![kh, kw],
            })?;
        let (iv, kv, bv) = (
            self.value(input).values(),
            self.value(kernels).values(),
            self.value(bias).values(),
        );
        // Accumulate kernel taps as shifted row operations so the inner loop
        // runs over contiguous output columns; per-element order stays
        // bias, then (ic, ky, kx).
        let mut out = vec![0.0; out_c * oh * ow];
        for oc in 0..out_c {
            out[oc * oh * ow..(oc + 1) * oh * ow].fill(bv[oc]);
            for ic in 0..in_c {
                for ky in 0..kh {
                    let k_row = ((oc * in_c + ic) * kh + ky) * kw;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        let in_row = (ic * h + iy as usize) * w;
                        let out_row = (oc * oh + oy) * ow;
                        for kx in 0..kw {
                            let k = kv[k_row + kx];
                            let (lo, hi) = conv_col_range(ow, w, kx, pad, stride);
                            if lo >= hi {
                                continue;
                            }
                            if stride == 1 {
                                let ix0 = in_row + lo + kx - pad;
                                let orow = &mut out[out_row + lo..out_row + hi];
                                let irow = &iv[ix0..ix0 + hi - lo];
                                for (o, x) in orow.iter_mut().zip(irow) {
                                    *o += k * x;
                                }
                            } else {
                                for ox in lo..hi {
                                    let ix = ox * stride + kx - pad;
                                    out[out_row + ox] += k * iv[in_row + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
        let needs = self.needs(input) || self.needs(kernels) || self.needs(bias);
        Ok(self.push(
            Op::Conv2d {
                input,
                kernels,
                bias,
                pad,
                stride,
            },
            Tensor::new(vec![out_c, oh, ow], out)?,
            needs,
        ))
    }

    /// Max pooling with a 2×2 window and stride 2; extents must be even.
    /// Backward routes the gradient to the first-in-row-major argmax.
    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(Error::ShapeMismatch {
                op: "maxpool2x2",
                lhs: s,
                rhs: vec![2, 2],
            });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).values();
        let mut out = vec![0.0; c * oh * ow];
        let mut argmax = vec![0usize; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = (ch * h + 2 * oy) * w + 2 * ox;
                    let mut best = xv[best_idx];
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = (ch * h + 2 * oy + dy) * w + 2 * ox + dx;
                            if xv[idx] > best {
                                best = xv[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[(ch * oh + oy) * ow + ox] = best;
                    argmax[(ch * oh + oy) * ow + ox] = best_idx;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Op::MaxPool2x2 { input: x, argmax },
            Tensor::new(vec![c, oh, ow], out)?,
            needs,
        ))
    }

    /// Mean over non-pad positions of -ln softmax(logits_t)[target_t].
    /// Positions whose target is `pad_id` contribute nothing to the value or
    /// the gradient.
    pub fn cross_entropy_masked(
        &mut self,
        logits: Var,
        targets: &[usize],
        pad_id: usize,
    ) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy_masked",
                lhs: s.to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let (t, v) = (s[0], s[1]);
        let lv = self.value(logits).values();
        let mut total = 0.0;
        let mut count = 0usize;
        for step in 0..t {
            let target = targets[step];
            if target == pad_id {
                continue;
            }
            if target >= v {
                return Err(Error::IndexOutOfRange { id: target, size: v });
            }
            let row = &lv[step * v..(step + 1) * v];
            total += log_sum_exp(row) - row[target];
            count += 1;
        }
        if count == 0 {
            return Err(Error::contract(
                "cross_entropy_masked: every position is padded",
            ));
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Op::CrossEntropyMasked {
                logits,
                targets: targets.to_vec(),
                pad_id,
            },
            Tensor::scalar(total / count as f64),
            needs,
        ))
    }

    // ----- backward -------------------------------------------------------

    /// Reverse sweep from a scalar loss. Gradients accumulate additively
    /// across fan-out; every `requires_grad` leaf ends up with a gradient
    /// (zeros if the loss does not depend on it).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g_out) = self.grads[idx].take() else {
                continue;
            };
            self.apply_backward(idx, &g_out);
            self.grads[idx] = Some(g_out);
        }

        for idx in 0..self.nodes.len() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() && self.grads[idx].is_none()
            {
                self.grads[idx] = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: &[f64]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += ci;
                }
            }
            None => self.grads[v.0] = Some(contribution.to_vec()),
        }
    }

    /// Like `accumulate`, but takes ownership so a freshly built contribution
    /// moves into an empty slot instead of being copied.
    fn accumulate_owned(&mut self, v: Var, contribution: Vec<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(&contribution) {
                    *gi += ci;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    /// Detach the gradient buffer of `v` (zeros if none yet) so a backward
    /// rule can add its contribution in place; `None` if no gradient is
    /// needed. The caller must store the buffer back with `put_grad`.
    fn take_grad_buffer(&mut self, v: Var, len: usize) -> Option<Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        Some(self.grads[v.0].take().unwrap_or_else(|| vec![0.0; len]))
    }

    fn put_grad(&mut self, v: Var, buffer: Vec<f64>) {
        self.grads[v.0] = Some(buffer);
    }

    fn apply_backward(&mut self, idx: usize, g_out: &[f64]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            &Op::Matmul(a, b) => {
                let sa = self.shape(a);
                let (m, k) = (sa[0], sa[1]);
                let n = self.shape(b)[1];
                if let Some(mut da) = self.take_grad_buffer(a, m * k) {
                    // dA[i,l] += sum_j dC[i,j] * B[l,j]
                    let bv = self.value(b).share_data();
                    for i in 0..m {
                        let grow = &g_out[i * n..(i + 1) * n];
                        for l in 0..k {
                            da[i * k + l] += dot(grow, &bv[l * n..(l + 1) * n]);
                        }
                    }
                    self.put_grad(a, da);
                }
                if let Some(mut db) = self.take_grad_buffer(b, k * n) {
                    // dB[l,j] += A[i,l] * dC[i,j]
                    let av = self.value(a).share_data();
                    for i in 0..m {
                        let grow = &g_out[i * n..(i + 1) * n];
                        for l in 0..k {
                            let a_il = av[i * k + l];
                            let brow = &mut db[l * n..(l + 1) * n];
                            for (o, g) in brow.iter_mut().zip(grow) {
                                *o += a_il * g;
                            }
                        }
                    }
                    self.put_grad(b, db);
                }
            }
            &Op::Matvec(a, x) => {
                let sa = self.shape(a);
                let (m, k) = (sa[0], sa[1]);
                if let Some(mut da) = self.take_grad_buffer(a, m * k) {
                    let xv = self.value(x).share_data();
                    for i in 0..m {
                        let gi = g_out[i];
                        let row = &mut da[i * k..(i + 1) * k];
                        for (o, xj) in row.iter_mut().zip(xv.iter()) {
                            *o += gi * xj;
                        }
                    }
                    self.put_grad(a, da);
                }
                if let Some(mut dx) = self.take_grad_buffer(x, k) {
                    let av = self.value(a).share_data();
                    for i in 0..m {
                        let gi = g_out[i];
                        let row = &av[i * k..(i + 1) * k];
                        for (o, aj) in dx.iter_mut().zip(row) {
                            *o += gi * aj;
                        }
                    }
                    self.put_grad(x, dx);
                }
            }
            &Op::Transpose(x) => {
                let s = self.shape(x);
                let (r, c) = (s[0], s[1]);
                // g_out is [c×r]; transpose it back to [r×c].
                let mut dx = vec![0.0; r * c];
                transpose_into(g_out, &mut dx, c, r);
                self.accumulate_owned(x, dx);
            }
            &Op::Add(a, b) => {
                self.accumulate(a, g_out);
                self.accumulate(b, g_out);
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    let bv = self.value(b).share_data();
                    let da: Vec<f64> = g_out.iter().zip(bv.iter()).map(|(g, v)| g * v).collect();
                    self.accumulate_owned(a, da);
                }
                if self.needs(b) {
                    let av = self.value(a).share_data();
                    let db: Vec<f64> = g_out.iter().zip(av.iter()).map(|(g, v)| g * v).collect();
                    self.accumulate_owned(b, db);
                }
            }
            &Op::AddRows(m, v) => {
                let c = self.shape(v)[0];
                self.accumulate(m, g_out);
                if let Some(mut dv) = self.take_grad_buffer(v, c) {
                    for row in g_out.chunks_exact(c) {
                        for (o, g) in dv.iter_mut().zip(row) {
                            *o += g;
                        }
                    }
                    self.put_grad(v, dv);
                }
            }
            &Op::Unary(x, kind) => {
                let dx: Vec<f64> = match kind {
                    UnaryKind::Tanh => {
                        let yv = self.nodes[idx].value.values();
                        g_out.iter().zip(yv).map(|(g, y)| g * (1.0 - y * y)).collect()
                    }
                    UnaryKind::Sigmoid => {
                        let yv = self.nodes[idx].value.values();
                        g_out.iter().zip(yv).map(|(g, y)| g * y * (1.0 - y)).collect()
                    }
                    UnaryKind::Relu => {
                        let xv = self.value(x).values();
                        g_out
                            .iter()
                            .zip(xv)
                            .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                            .collect()
                    }
                    UnaryKind::Exp => {
                        let yv = self.nodes[idx].value.values();
                        g_out.iter().zip(yv).map(|(g, y)| g * y).collect()
                    }
                    UnaryKind::Log => {
                        let xv = self.value(x).values();
                        g_out.iter().zip(xv).map(|(g, x)| g / x).collect()
                    }
                    UnaryKind::AddConst(_) => g_out.to_vec(),
                    UnaryKind::Scale(c) => g_out.iter().map(|g| g * c).collect(),
                };
                self.accumulate_owned(x, dx);
            }
            &Op::SoftmaxLast(x) => {
                let n = *self.shape(x).last().unwrap();
                let yv = self.nodes[idx].value.share_data();
                let mut dx = vec![0.0; yv.len()];
                for ((ys, gs), ds) in yv
                    .chunks_exact(n)
                    .zip(g_out.chunks_exact(n))
                    .zip(dx.chunks_exact_mut(n))
                {
                    let inner = dot(gs, ys);
                    for i in 0..n {
                        ds[i] = ys[i] * (gs[i] - inner);
                    }
                }
                self.accumulate_owned(x, dx);
            }
            &Op::Reduce(x, kind, axis) => {
                let s = self.shape(x).to_vec();
                let n = self.value(x).len();
                let mut dx = vec![0.0; n];
                match axis {
                    None => {
                        let g = match kind {
                            ReduceKind::Sum => g_out[0],
                            ReduceKind::Mean => g_out[0] / n as f64,
                        };
                        dx.fill(g);
                    }
                    Some(ax) => {
                        let extent = s[ax];
                        let outer: usize = s[..ax].iter().product();
                        let inner: usize = s[ax + 1..].iter().product();
                        let scale = match kind {
                            ReduceKind::Sum => 1.0,
                            ReduceKind::Mean => 1.0 / extent as f64,
                        };
                        for o in 0..outer {
                            for j in 0..extent {
                                let base = (o * extent + j) * inner;
                                for i in 0..inner {
                                    dx[base + i] = g_out[o * inner + i] * scale;
                                }
                            }
                        }
                    }
                }
                self.accumulate_owned(x, dx);
            }
            Op::Concat(parts) => {
                let parts = parts.clone();
                let mut offset = 0;
                for p in parts {
                    let len = self.value(p).len();
                    let slice = g_out[offset..offset + len].to_vec();
                    self.accumulate_owned(p, slice);
                    offset += len;
                }
            }
            &Op::Reshape(x) => {
                self.accumulate(x, g_out);
            }
            Op::EmbedRows(table, ids) => {
                let (table, ids) = (*table, ids.clone());
                let d = self.shape(table)[1];
                let table_len = self.value(table).len();
                if let Some(mut dt) = self.take_grad_buffer(table, table_len) {
                    for (row, &id) in ids.iter().enumerate() {
                        let src = &g_out[row * d..(row + 1) * d];
                        let dst = &mut dt[id * d..(id + 1) * d];
                        for (o, g) in dst.iter_mut().zip(src) {
                            *o += g;
                        }
                    }
                    self.put_grad(table, dt);
                }
            }
            &Op::Conv2d {
                input,
                kernels,
                bias,
                pad,
                stride,
            } => {
                let si = self.shape(input).to_vec();
                let sk = self.shape(kernels).to_vec();
                let (in_c, h, w) = (si[0], si[1], si[2]);
                let (out_c, kh, kw) = (sk[0], sk[2], sk[3]);
                let so = self.shape(Var(idx)).to_vec();
                let (oh, ow) = (so[1], so[2]);

                if self.needs(bias) {
                    let mut db = vec![0.0; out_c];
                    for oc in 0..out_c {
                        db[oc] = g_out[oc * oh * ow..(oc + 1) * oh * ow].iter().sum();
                    }
                    self.accumulate_owned(bias, db);
                }
                let needs_in = self.needs(input);
                let needs_k = self.needs(kernels);
                if needs_in || needs_k {
                    let iv = self.value(input).share_data();
                    let kv = self.value(kernels).share_data();
                    let mut di = self
                        .take_grad_buffer(input, iv.len())
                        .unwrap_or_else(|| vec![0.0; iv.len()]);
                    let mut dk = self
                        .take_grad_buffer(kernels, kv.len())
                        .unwrap_or_else(|| vec![0.0; kv.len()]);
                    if stride == 1 {
                        // Row-sliced form: per kernel tap, the gradient is a
                        // dot (for dk) or an axpy (for di) over a contiguous
                        // span of output columns.
                        for oc in 0..out_c {
                            for ic in 0..in_c {
                                for ky in 0..kh {
                                    let k_row = ((oc * in_c + ic) * kh + ky) * kw;
                                    for oy in 0..oh {
                                        let iy = (oy + ky) as isize - pad as isize;
                                        if iy < 0 || iy as usize >= h {
                                            continue;
                                        }
                                        let in_row = (ic * h + iy as usize) * w;
                                        let g_row = (oc * oh + oy) * ow;
                                        for kx in 0..kw {
                                            let (lo, hi) = conv_col_range(ow, w, kx, pad, 1);
                                            if lo >= hi {
                                                continue;
                                            }
                                            let ix0 = in_row + lo + kx - pad;
                                            let gs = &g_out[g_row + lo..g_row + hi];
                                            if needs_k {
                                                dk[k_row + kx] +=
                                                    dot(gs, &iv[ix0..ix0 + hi - lo]);
                                            }
                                            if needs_in {
                                                let k = kv[k_row + kx];
                                                let rows = &mut di[ix0..ix0 + hi - lo];
                                                for (o, g) in rows.iter_mut().zip(gs) {
                                                    *o += k * g;
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    } else {
                        for oc in 0..out_c {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let g = g_out[(oc * oh + oy) * ow + ox];
                                    for ic in 0..in_c {
                                        for ky in 0..kh {
                                            let iy = (oy * stride + ky) as isize - pad as isize;
                                            if iy < 0 || iy as usize >= h {
                                                continue;
                                            }
                                            let in_row = (ic * h + iy as usize) * w;
                                            let k_row = ((oc * in_c + ic) * kh + ky) * kw;
                                            for kx in 0..kw {
                                                let ix =
                                                    (ox * stride + kx) as isize - pad as isize;
                                                if ix < 0 || ix as usize >= w {
                                                    continue;
                                                }
                                                if needs_in {
                                                    di[in_row + ix as usize] += g * kv[k_row + kx];
                                                }
                                                if needs_k {
                                                    dk[k_row + kx] += g * iv[in_row + ix as usize];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if needs_in {
                        self.put_grad(input, di);
                    }
                    if needs_k {
                        self.put_grad(kernels, dk);
                    }
                }
            }
            Op::MaxPool2x2 { input, argmax } => {
                let (input, argmax) = (*input, argmax.clone());
                let mut dx = vec![0.0; self.value(input).len()];
                for (g, &src) in g_out.iter().zip(&argmax) {
                    dx[src] += g;
                }
                self.accumulate_owned(input, dx);
            }
            Op::CrossEntropyMasked {
                logits,
                targets,
                pad_id,
            } => {
                let (logits, targets, pad_id) = (*logits, targets.clone(), *pad_id);
                let s = self.shape(logits).to_vec();
                let (t, v) = (s[0], s[1]);
                let count = targets.iter().filter(|&&x| x != pad_id).count() as f64;
                let lv = self.value(logits).share_data();
                let g = g_out[0] / count;
                let mut dl = vec![0.0; t * v];
                for step in 0..t {
                    let target = targets[step];
                    if target == pad_id {
                        continue;
                    }
                    let row = &lv[step * v..(step + 1) * v];
                    let drow = &mut dl[step * v..(step + 1) * v];
                    softmax_slice(row, drow);
                    for p in drow.iter_mut() {
                        *p *= g;
                    }
                    drow[target] -= g;
                }
                self.accumulate_owned(logits, dl);
            }
        }
    }
}

// ----- shared kernels ------------------------------------------------------

/// Four independent accumulators let the reduction vectorize; a strict
/// left-to-right sum cannot. The fixed regrouping stays deterministic.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let split = a.len() / 4 * 4;
    let (a4, a_tail) = a.split_at(split);
    let (b4, b_tail) = b.split_at(split);
    let mut acc = [0.0f64; 4];
    for (pa, pb) in a4.chunks_exact(4).zip(b4.chunks_exact(4)) {
        acc[0] += pa[0] * pb[0];
        acc[1] += pa[1] * pb[1];
        acc[2] += pa[2] * pb[2];
        acc[3] += pa[3] * pb[3];
    }
    let tail: f64 = a_tail.iter().zip(b_tail).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &a_il) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for (o, &b_lj) in orow.iter_mut().zip(brow) {
                *o += a_il * b_lj;
            }
        }
    }
}

/// Output-column range [lo, hi) for which `ox * stride + kx - pad` lands
/// inside an input row of width `w`.
fn conv_col_range(ow: usize, w: usize, kx: usize, pad: usize, stride: usize) -> (usize, usize) {
    let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
    let hi = if w + pad > kx {
        ((w - 1 + pad - kx) / stride + 1).min(ow)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn transpose_into(x: &[f64], out: &mut [f64], r: usize, c: usize) {
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax_slice(x: &[f64], out: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Numerically stable softmax of a plain slice (value-level helper).
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    softmax_slice(x, &mut out);
    out
}

fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn conv_out_extent(input: usize, kernel: usize, pad: usize, stride: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || (padded - kernel) % stride != 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradient_check;

    fn t(shape: Vec<usize>, values: Vec<f64>) -> Tensor {
        Tensor::new(shape, values).unwrap()
    }

    #[test]
    fn matmul_identity_leaves_input_unchanged() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(vec![2, 2], vec![3.0, -1.0, 2.5, 7.0]));
        let eye = tape.leaf(t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let c = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.value(c).values(), tape.value(a).values());
    }

    #[test]
    fn matmul_hand_example() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(t(vec![2, 1], vec![1.0, 1.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).values(), &[3.0, 7.0]);
        assert_eq!(tape.shape(c), &[2, 1]);
    }

    #[test]
    fn matmul_zeros_annihilate() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(vec![3, 4]));
        let b = tape.leaf(t(vec![4, 2], (0..8).map(|v| v as f64).collect()));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[3, 2]);
        assert!(tape.value(c).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(Tensor::zeros(vec![2, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn elementwise_symmetry_points() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0]));
        let th = tape.tanh(x).unwrap();
        let sg = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(th).values(), &[0.0]);
        assert_eq!(tape.value(sg).values(), &[0.5]);
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-1.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).values(), &[0.0, 2.0]);
    }

    #[test]
    fn sigmoid_of_one_matches_independent_oracle() {
        // 1 / (1 + e^-1), evaluated without going through the tape path.
        let oracle = 1.0 / (1.0 + (-1.0f64).exp());
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0]));
        let y = tape.sigmoid(x).unwrap();
        assert!((tape.value(y).values()[0] - oracle).abs() < 1e-15);
        assert!((oracle - 0.731_058_578_630_004_9).abs() < 1e-12);
    }

    #[test]
    fn log_rejects_nonpositive_with_index() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 0.0, 2.0]));
        let err = tape.log(x).unwrap_err();
        match err {
            Error::Domain { index, .. } => assert_eq!(index, 1),
            other => panic!("expected domain error, got {other}"),
        }
    }

    #[test]
    fn softmax_uniform_and_shift_invariance() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        for v in tape.value(y).iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let big = tape.leaf(Tensor::vector(vec![1000.0, 1000.0]));
        let yb = tape.softmax(big).unwrap();
        assert_eq!(tape.value(yb).values(), &[0.5, 0.5]);

        let a = tape.leaf(Tensor::vector(vec![0.3, -1.2, 2.0]));
        let b = tape.add_const(a, 17.5).unwrap();
        let sa = tape.softmax(a).unwrap();
        let sb = tape.softmax(b).unwrap();
        for (u, v) in tape.value(sa).values().iter().zip(tape.value(sb).values()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_log_ratio_example() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0f64.ln(), 3.0f64.ln()]));
        let y = tape.softmax(x).unwrap();
        let v = tape.value(y).values();
        assert!((v[0] - 0.25).abs() < 1e-12);
        assert!((v[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_slices_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![3, 4], (0..12).map(|v| (v as f64).sin() * 8.0).collect()));
        let y = tape.softmax(x).unwrap();
        for row in tape.value(y).values().chunks_exact(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reduce_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = tape.sum_all(x).unwrap();
        assert_eq!(tape.value(s).item(), 6.0);

        let z = tape.leaf(Tensor::zeros(vec![4, 4]));
        let m = tape.mean_all(z).unwrap();
        assert_eq!(tape.value(m).item(), 0.0);

        let a = tape.leaf(t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let s0 = tape.sum_axis(a, 0).unwrap();
        assert_eq!(tape.value(s0).values(), &[4.0, 6.0]);

        match tape.sum_axis(a, 2).unwrap_err() {
            Error::BadAxis { axis, rank } => {
                assert_eq!(axis, 2);
                assert_eq!(rank, 2);
            }
            other => panic!("expected bad axis, got {other}"),
        }
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![2, 3], vec![0.5; 6]).with_requires_grad(true));
        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_square_at_three() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![3.0]).with_requires_grad(true));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_sigmoid_of_product() {
        // loss = sigmoid(w * x) at w = 0, x = 1: dloss/dw = sigma'(0) * x = 0.25.
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![0.0]).with_requires_grad(true));
        let x = tape.leaf(Tensor::vector(vec![1.0]));
        let wx = tape.mul(w, x).unwrap();
        let y = tape.sigmoid(wx).unwrap();
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        assert!((tape.grad(w).unwrap()[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn backward_fanout_is_exactly_two() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.5, -2.0]).with_requires_grad(true));
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).with_requires_grad(true));
        let y = tape.scale(x, 2.0).unwrap();
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn off_path_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0]).with_requires_grad(true));
        let unused = tape.leaf(Tensor::vector(vec![5.0, 6.0]).with_requires_grad(true));
        let loss = tape.sum_all(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(unused).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn leaf_tensor_carries_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![2.0]).with_requires_grad(true));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        let with_grad = tape.leaf_tensor(x);
        assert_eq!(with_grad.grad().unwrap(), &[4.0]);
    }

    #[test]
    fn embed_rows_gathers_and_scatters() {
        let mut tape = Tape::new();
        let table = tape.leaf(
            t(vec![4, 2], vec![0.0, 1.0, 10.0, 11.0, 20.0, 21.0, 30.0, 31.0])
                .with_requires_grad(true),
        );
        let picked = tape.embed_rows(table, &[3, 3]).unwrap();
        assert_eq!(tape.value(picked).values(), &[30.0, 31.0, 30.0, 31.0]);
        let loss = tape.sum_all(picked).unwrap();
        tape.backward(loss).unwrap();
        // Repeated id accumulates additively: row 3 sees gradient 2 per entry.
        let g = tape.grad(table).unwrap();
        assert_eq!(&g[6..8], &[2.0, 2.0]);
        assert!(g[..6].iter().all(|v| *v == 0.0));

        let empty = tape.embed_rows(table, &[]).unwrap();
        assert_eq!(tape.shape(empty), &[0, 2]);

        match tape.embed_rows(table, &[4]).unwrap_err() {
            Error::IndexOutOfRange { id, size } => {
                assert_eq!(id, 4);
                assert_eq!(size, 4);
            }
            other => panic!("expected index error, got {other}"),
        }
    }

    #[test]
    fn maxpool_takes_window_max_and_routes_to_first_tie() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).with_requires_grad(true));
        let y = tape.maxpool2x2(x).unwrap();
        assert_eq!(tape.value(y).values(), &[4.0]);

        let c = tape.leaf(t(vec![1, 2, 2], vec![7.0; 4]).with_requires_grad(true));
        let yc = tape.maxpool2x2(c).unwrap();
        assert_eq!(tape.value(yc).values(), &[7.0]);
        let loss = tape.sum_all(yc).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(c).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_rejects_odd_extent() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 3, 4]));
        assert!(tape.maxpool2x2(x).is_err());
    }

    #[test]
    fn conv2d_hand_examples() {
        let mut tape = Tape::new();
        // 1x1 kernel of value 1 reproduces the input.
        let img = tape.leaf(t(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let k1 = tape.leaf(t(vec![1, 1, 1, 1], vec![1.0]));
        let b0 = tape.leaf(Tensor::zeros(vec![1]));
        let y = tape.conv2d(img, k1, b0, 0, 1).unwrap();
        assert_eq!(tape.value(y).values(), &[1.0, 2.0, 3.0, 4.0]);

        // 2x2 all-ones kernel sums the window.
        let k2 = tape.leaf(t(vec![1, 1, 2, 2], vec![1.0; 4]));
        let y2 = tape.conv2d(img, k2, b0, 0, 1).unwrap();
        assert_eq!(tape.value(y2).values(), &[10.0]);

        // All-zero kernel with bias 7 yields a constant map.
        let kz = tape.leaf(Tensor::zeros(vec![1, 1, 2, 2]));
        let b7 = tape.leaf(Tensor::vector(vec![7.0]));
        let y3 = tape.conv2d(img, kz, b7, 0, 1).unwrap();
        assert_eq!(tape.value(y3).values(), &[7.0]);
    }

    #[test]
    fn conv2d_rejects_bad_spatial_arithmetic() {
        let mut tape = Tape::new();
        let img = tape.leaf(Tensor::zeros(vec![1, 5, 5]));
        let k = tape.leaf(Tensor::zeros(vec![1, 1, 2, 2]));
        let b = tape.leaf(Tensor::zeros(vec![1]));
        // (5 - 2) % 2 != 0: stride does not divide exactly.
        assert!(tape.conv2d(img, k, b, 0, 2).is_err());
    }

    #[test]
    fn cross_entropy_masked_contracts() {
        // Uniform logits, V = 4: loss is ln 4 per non-pad position.
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(vec![2, 4]));
        let loss = tape.cross_entropy_masked(logits, &[1, 0], 0).unwrap();
        assert!((tape.value(loss).item() - 4.0f64.ln()).abs() < 1e-15);

        // Appending pad positions leaves the loss bit-identical.
        let logits3 = tape.leaf(Tensor::zeros(vec![4, 4]));
        let loss3 = tape.cross_entropy_masked(logits3, &[1, 0, 0, 0], 0).unwrap();
        assert_eq!(tape.value(loss).item().to_bits(), tape.value(loss3).item().to_bits());

        // All-pad input is a contract error.
        let all_pad = tape.cross_entropy_masked(logits, &[0, 0], 0);
        assert!(all_pad.is_err());
    }

    #[test]
    fn cross_entropy_perfect_prediction_is_near_zero() {
        let mut tape = Tape::new();
        let mut vals = vec![-1e3; 5];
        vals[2] = 1e3;
        let logits = tape.leaf(t(vec![1, 5], vals));
        let loss = tape.cross_entropy_masked(logits, &[2], 0).unwrap();
        assert!(tape.value(loss).item().abs() < 1e-12);
    }

    #[test]
    fn gradient_check_covers_each_op() {
        let base = Tensor::new(
            vec![2, 3],
            vec![0.31, -0.84, 0.55, -0.12, 0.92, -0.47],
        )
        .unwrap();
        let cases: Vec<(&str, Box<dyn Fn(&mut Tape, Var) -> Result<Var>>)> = vec![
            ("tanh", Box::new(|t, x| { let y = t.tanh(x)?; t.sum_all(y) })),
            ("sigmoid", Box::new(|t, x| { let y = t.sigmoid(x)?; t.sum_all(y) })),
            ("exp", Box::new(|t, x| { let y = t.exp(x)?; t.sum_all(y) })),
            ("softmax", Box::new(|t, x| {
                let y = t.softmax(x)?;
                let sq = t.mul(y, y)?;
                t.sum_all(sq)
            })),
            ("matmul", Box::new(|t, x| {
                let w = t.constant(Tensor::new(vec![3, 2], vec![0.5, -1.0, 0.25, 0.75, -0.5, 1.5]).unwrap());
                let y = t.matmul(x, w)?;
                let z = t.tanh(y)?;
                t.sum_all(z)
            })),
            ("mean_axis", Box::new(|t, x| {
                let y = t.mean_axis(x, 1)?;
                let sq = t.mul(y, y)?;
                t.sum_all(sq)
            })),
            ("add_rows", Box::new(|t, x| {
                let v = t.constant(Tensor::vector(vec![0.2, -0.3, 0.4]));
                let y = t.add_rows(x, v)?;
                let z = t.sigmoid(y)?;
                t.sum_all(z)
            })),
        ];
        for (name, f) in cases {
            let err = gradient_check(f.as_ref(), &base, 1e-5).unwrap();
            assert!(err <= 1e-4, "{name}: relative error {err}");
        }
    }

    #[test]
    fn gradient_check_linear_is_exact() {
        let x = Tensor::vector(vec![0.4, -0.7, 1.1]);
        let err = gradient_check(|t, x| { let s = t.sum_all(x)?; Ok(s) }, &x, 1e-5).unwrap();
        assert!(err <= 1e-10, "linear FD should be exact, got {err}");
    }

    #[test]
    fn softmax_jacobian_at_uniform_point() {
        // Pick-first through softmax at [0, 0]: analytic gradient [0.25, -0.25].
        let x = Tensor::vector(vec![0.0, 0.0]);
        let mut tape = Tape::new();
        let leaf = tape.leaf(x.clone().with_requires_grad(true));
        let sm = tape.softmax(leaf).unwrap();
        let mask = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        let picked = tape.mul(sm, mask).unwrap();
        let loss = tape.sum_all(picked).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(leaf).unwrap();
        assert!((g[0] - 0.25).abs() < 1e-12);
        assert!((g[1] + 0.25).abs() < 1e-12);

        let err = gradient_check(
            |t, x| {
                let sm = t.softmax(x)?;
                let mask = t.constant(Tensor::vector(vec![1.0, 0.0]));
                let picked = t.mul(sm, mask)?;
                t.sum_all(picked)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4);
    }

    #[test]
    fn forward_ops_stay_finite() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![700.0, -700.0, 0.0]));
        let s = tape.softmax(x).unwrap();
        assert!(tape.value(s).all_finite());
        let sg = tape.sigmoid(x).unwrap();
        assert!(tape.value(sg).all_finite());
        let th = tape.tanh(x).unwrap();
        assert!(tape.value(th).all_finite());
    }
}
