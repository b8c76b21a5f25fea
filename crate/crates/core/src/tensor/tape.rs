//! Wengert tape: primitives are recorded in application order, and
//! [`Tape::backward`] replays them in reverse to accumulate gradients.

use super::{lit, Result, Scalar, Tensor, TensorError};

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

struct Node<S: Scalar> {
    value: Tensor<S>,
    requires_grad: bool,
    op: Op<S>,
}

enum Op<S: Scalar> {
    Leaf,
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: S },
    Conv1d { x: usize, w: usize, bias: usize, stride: usize, padding: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, mean: Vec<S>, rstd: Vec<S> },
    Gelu { x: usize },
    MaskedSoftmax { scores: usize },
    Embedding { table: usize, indices: Vec<usize> },
    CrossEntropyMasked { logits: usize, targets: Vec<Option<usize>> },
    L2Normalize { x: usize },
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    Reshape { x: usize },
    Mean { x: usize },
    Sum { x: usize },
    BceWithLogits { logits: usize, labels: Vec<f64> },
    GradReverse { x: usize, lambda: f64 },
    Detach,
}

/// Recording tape. All primitives validate shapes, reject non-finite
/// outputs, and append one node; `backward` walks the record once in
/// reverse. Single-owner: a tape is never shared between threads.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
    consumed: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a value as a graph leaf. `requires_grad` marks it as a
    /// gradient target for `backward`.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        Ok(self.push(value, requires_grad, Op::Leaf))
    }

    /// Insert a value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` target with respect to `v`, if any
    /// was accumulated.
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor<S>, requires_grad: bool, op: Op<S>) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn out(&mut self, op_name: &'static str, value: Tensor<S>, rg: bool, op: Op<S>) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        Ok(self.push(value, rg, op))
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    // ── primitives ──────────────────────────────────────────────────────

    /// 2-D matrix product with optional transposes on either operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (am, ak) = eff_dims(self.shape(a), ta, "matmul")?;
        let (bk, bn) = eff_dims(self.shape(b), tb, "matmul")?;
        if ak != bk {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!(
                    "inner dims differ: {:?}{} x {:?}{}",
                    self.shape(a),
                    if ta { "ᵀ" } else { "" },
                    self.shape(b),
                    if tb { "ᵀ" } else { "" }
                ),
            });
        }
        let data = matmul_raw(
            self.value(a).data(),
            self.value(b).data(),
            am,
            ak,
            bn,
            ta,
            tb,
        );
        let value = Tensor::new(vec![am, bn], data)?;
        let rg = self.rg(&[a.0, b.0]);
        self.out("matmul", value, rg, Op::MatMul { a: a.0, b: b.0, ta, tb })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Elementwise add; `b` may be a suffix shape of `a`, broadcast over
    /// the leading dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if !is_suffix(&bsh, &ash) {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                detail: format!("{:?} + {:?}", ash, bsh),
            });
        }
        let bn: usize = bsh.iter().product::<usize>().max(1);
        let mut data = self.value(a).data().to_vec();
        let bd = self.value(b).data();
        for (i, v) in data.iter_mut().enumerate() {
            *v = *v + bd[i % bn];
        }
        let value = Tensor::new(ash, data)?;
        let rg = self.rg(&[a.0, b.0]);
        self.out("add", value, rg, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "sub",
                detail: format!("{:?} - {:?}", self.shape(a), self.shape(b)),
            });
        }
        let bd = self.value(b).data();
        let data: Vec<S> =
            self.value(a).data().iter().zip(bd).map(|(&x, &y)| x - y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a.0, b.0]);
        self.out("sub", value, rg, Op::Sub { a: a.0, b: b.0 })
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                detail: format!("{:?} * {:?}", self.shape(a), self.shape(b)),
            });
        }
        let bd = self.value(b).data();
        let data: Vec<S> =
            self.value(a).data().iter().zip(bd).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a.0, b.0]);
        self.out("mul", value, rg, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = lit::<S>(c);
        let value = self.value(a).map(|v| v * c);
        let rg = self.rg(&[a.0]);
        self.out("scale", value, rg, Op::Scale { a: a.0, c })
    }

    /// 1-D convolution: x `[B, C_in, L]`, w `[C_out, C_in, k]`, bias `[C_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 3 || ws.len() != 3 || bs.len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                detail: format!("x {:?}, w {:?}, bias {:?}", xs, ws, bs),
            });
        }
        let (batch, c_in, len) = (xs[0], xs[1], xs[2]);
        let (c_out, wc_in, k) = (ws[0], ws[1], ws[2]);
        if wc_in != c_in || bs[0] != c_out || stride == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                detail: format!("x {:?} incompatible with w {:?} / bias {:?}", xs, ws, bs),
            });
        }
        if len + 2 * padding < k {
            return Err(TensorError::InvalidArg {
                op: "conv1d",
                detail: format!("kernel {} longer than padded input {}", k, len + 2 * padding),
            });
        }
        let out_len = (len + 2 * padding - k) / stride + 1;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(bias).data();
        let mut data = vec![S::zero(); batch * c_out * out_len];
        for b in 0..batch {
            for co in 0..c_out {
                for t in 0..out_len {
                    let mut acc = bd[co];
                    for ci in 0..c_in {
                        let xrow = &xd[(b * c_in + ci) * len..(b * c_in + ci + 1) * len];
                        let wrow = &wd[(co * c_in + ci) * k..(co * c_in + ci + 1) * k];
                        for (dk, &wv) in wrow.iter().enumerate() {
                            let src = t * stride + dk;
                            if src >= padding && src - padding < len {
                                acc += xrow[src - padding] * wv;
                            }
                        }
                    }
                    data[(b * c_out + co) * out_len + t] = acc;
                }
            }
        }
        let value = Tensor::new(vec![batch, c_out, out_len], data)?;
        let rg = self.rg(&[x.0, w.0, bias.0]);
        self.out("conv1d", value, rg, Op::Conv1d { x: x.0, w: w.0, bias: bias.0, stride, padding })
    }

    /// Layer normalization over the last dimension with learnable scale and
    /// shift. `eps` is fixed at 1e-5.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or(TensorError::ShapeMismatch {
            op: "layer_norm",
            detail: "rank-0 input".into(),
        })?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                detail: format!("x {:?}, gamma {:?}, beta {:?}", xs, self.shape(gamma), self.shape(beta)),
            });
        }
        let rows = self.value(x).numel() / d;
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut data = vec![S::zero(); xd.len()];
        let mut means = vec![S::zero(); rows];
        let mut rstds = vec![S::zero(); rows];
        let inv_d = lit::<S>(1.0 / d as f64);
        let eps = lit::<S>(EPS);
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mut mu = S::zero();
            for &v in row {
                mu += v;
            }
            mu = mu * inv_d;
            let mut var = S::zero();
            for &v in row {
                let c = v - mu;
                var += c * c;
            }
            var = var * inv_d;
            let rstd = (var + eps).sqrt().recip();
            means[r] = mu;
            rstds[r] = rstd;
            for j in 0..d {
                data[r * d + j] = (row[j] - mu) * rstd * gd[j] + bd[j];
            }
        }
        let value = Tensor::new(xs, data)?;
        let rg = self.rg(&[x.0, gamma.0, beta.0]);
        self.out(
            "layer_norm",
            value,
            rg,
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, mean: means, rstd: rstds },
        )
    }

    /// GELU activation (tanh approximation).
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| {
            let vf = v.to_f64_exact();
            lit::<S>(gelu_f64(vf))
        });
        let rg = self.rg(&[x.0]);
        self.out("gelu", value, rg, Op::Gelu { x: x.0 })
    }

    /// Softmax over the last dimension, restricted to positions where
    /// `mask` is nonzero. Rows with no allowed position produce zeros.
    /// The mask is data, not a gradient path.
    pub fn masked_softmax(&mut self, scores: Var, mask: Var) -> Result<Var> {
        if self.shape(scores) != self.shape(mask) {
            return Err(TensorError::ShapeMismatch {
                op: "masked_softmax",
                detail: format!("scores {:?}, mask {:?}", self.shape(scores), self.shape(mask)),
            });
        }
        if self.requires_grad(mask) {
            return Err(TensorError::InvalidArg {
                op: "masked_softmax",
                detail: "mask must not require gradients".into(),
            });
        }
        let xs = self.shape(scores).to_vec();
        let d = *xs.last().ok_or(TensorError::ShapeMismatch {
            op: "masked_softmax",
            detail: "rank-0 input".into(),
        })?;
        let rows = self.value(scores).numel() / d;
        let sd = self.value(scores).data();
        let md = self.value(mask).data();
        let half = lit::<S>(0.5);
        let mut data = vec![S::zero(); sd.len()];
        for r in 0..rows {
            let srow = &sd[r * d..(r + 1) * d];
            let mrow = &md[r * d..(r + 1) * d];
            let mut max = S::neg_infinity();
            for j in 0..d {
                if mrow[j] > half && srow[j] > max {
                    max = srow[j];
                }
            }
            if max == S::neg_infinity() {
                continue; // fully masked row stays all-zero
            }
            let mut sum = S::zero();
            for j in 0..d {
                if mrow[j] > half {
                    let e = (srow[j] - max).exp();
                    data[r * d + j] = e;
                    sum += e;
                }
            }
            let inv = sum.recip();
            for j in 0..d {
                data[r * d + j] = data[r * d + j] * inv;
            }
        }
        let value = Tensor::new(xs, data)?;
        let rg = self.rg(&[scores.0]);
        self.out("masked_softmax", value, rg, Op::MaskedSoftmax { scores: scores.0 })
    }

    /// Row gather: `table[indices[i], :]` stacked into `[n, D]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "embedding_lookup",
                detail: format!("table must be rank 2, got {:?}", ts),
            });
        }
        let (v, d) = (ts[0], ts[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(TensorError::InvalidArg {
                op: "embedding_lookup",
                detail: format!("index {} out of range for table of {} rows", bad, v),
            });
        }
        let td = self.value(table).data();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![indices.len(), d], data)?;
        let rg = self.rg(&[table.0]);
        self.out(
            "embedding_lookup",
            value,
            rg,
            Op::Embedding { table: table.0, indices: indices.to_vec() },
        )
    }

    /// Mean cross-entropy of `logits` `[R, V]` against integer targets,
    /// skipping positions whose target is `None`.
    pub fn cross_entropy_masked(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy_masked",
                detail: format!("logits {:?} vs {} targets", ls, targets.len()),
            });
        }
        let (rows, v) = (ls[0], ls[1]);
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(TensorError::InvalidArg {
                op: "cross_entropy_masked",
                detail: "every position is masked".into(),
            });
        }
        if let Some(&bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(TensorError::InvalidArg {
                op: "cross_entropy_masked",
                detail: format!("target {} out of range for {} classes", bad, v),
            });
        }
        let ld = self.value(logits).data();
        let mut total = S::zero();
        for r in 0..rows {
            if let Some(t) = targets[r] {
                let row = &ld[r * v..(r + 1) * v];
                total += log_sum_exp(row) - row[t];
            }
        }
        let value = Tensor::scalar(total * lit::<S>(1.0 / count as f64));
        let rg = self.rg(&[logits.0]);
        self.out(
            "cross_entropy_masked",
            value,
            rg,
            Op::CrossEntropyMasked { logits: logits.0, targets: targets.to_vec() },
        )
    }

    /// Normalize each row of the last dimension to unit Euclidean length.
    /// A zero-norm row is an error.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or(TensorError::ShapeMismatch {
            op: "l2_normalize",
            detail: "rank-0 input".into(),
        })?;
        let rows = self.value(x).numel() / d;
        let xd = self.value(x).data();
        let mut data = vec![S::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mut sq = S::zero();
            for &v in row {
                sq += v * v;
            }
            let norm = sq.sqrt();
            if norm.to_f64_exact() < 1e-30 {
                return Err(TensorError::ZeroNorm { op: "l2_normalize" });
            }
            for j in 0..d {
                data[r * d + j] = row[j] / norm;
            }
        }
        let value = Tensor::new(xs, data)?;
        let rg = self.rg(&[x.0]);
        self.out("l2_normalize", value, rg, Op::L2Normalize { x: x.0 })
    }

    /// Concatenate along `axis`; all other extents must match.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::InvalidArg { op: "concat", detail: "no inputs".into() });
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::InvalidArg {
                op: "concat",
                detail: format!("axis {} out of range for rank {}", axis, first.len()),
            });
        }
        let mut axis_total = 0;
        for &p in parts {
            let sh = self.shape(p);
            if sh.len() != first.len()
                || sh.iter().enumerate().any(|(i, &e)| i != axis && e != first[i])
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    detail: format!("{:?} vs {:?} on axis {}", first, sh, axis),
                });
            }
            axis_total += sh[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![S::zero(); outer * axis_total * inner];
        let mut offset = 0;
        for &p in parts {
            let e = self.shape(p)[axis];
            let pd = self.value(p).data();
            for o in 0..outer {
                let src = &pd[o * e * inner..(o + 1) * e * inner];
                let dst_start = (o * axis_total + offset) * inner;
                data[dst_start..dst_start + e * inner].copy_from_slice(src);
            }
            offset += e;
        }
        let value = Tensor::new(out_shape, data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        self.out("concat", value, rg, Op::Concat { inputs: ids, axis })
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || start + len > xs[axis] || len == 0 {
            return Err(TensorError::InvalidArg {
                op: "slice",
                detail: format!("[{}, {}+{}) out of {:?} on axis {}", start, start, len, xs, axis),
            });
        }
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let e = xs[axis];
        let xd = self.value(x).data();
        let mut data = vec![S::zero(); outer * len * inner];
        for o in 0..outer {
            let src_start = (o * e + start) * inner;
            data[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&xd[src_start..src_start + len * inner]);
        }
        let mut out_shape = xs;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, data)?;
        let rg = self.rg(&[x.0]);
        self.out("slice", value, rg, Op::Slice { x: x.0, axis, start })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.shape(x), shape),
            });
        }
        let value = Tensor::new(shape.to_vec(), self.value(x).data().to_vec())?;
        let rg = self.rg(&[x.0]);
        self.out("reshape", value, rg, Op::Reshape { x: x.0 })
    }

    /// Mean over all elements, producing a rank-0 scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(TensorError::InvalidArg { op: "mean", detail: "empty tensor".into() });
        }
        let total: S = self.value(x).data().iter().copied().sum();
        let value = Tensor::scalar(total * lit::<S>(1.0 / n as f64));
        let rg = self.rg(&[x.0]);
        self.out("mean", value, rg, Op::Mean { x: x.0 })
    }

    /// Sum over all elements, producing a rank-0 scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: S = self.value(x).data().iter().copied().sum();
        let value = Tensor::scalar(total);
        let rg = self.rg(&[x.0]);
        self.out("sum", value, rg, Op::Sum { x: x.0 })
    }

    /// Mean binary cross-entropy on logits against fixed labels in [0, 1].
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let n = self.value(logits).numel();
        if n != labels.len() || n == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "bce_with_logits",
                detail: format!("{} logits vs {} labels", n, labels.len()),
            });
        }
        if labels.iter().any(|&y| !(0.0..=1.0).contains(&y)) {
            return Err(TensorError::InvalidArg {
                op: "bce_with_logits",
                detail: "labels must lie in [0, 1]".into(),
            });
        }
        let ld = self.value(logits).data();
        let mut total = 0.0f64;
        for (i, &z) in ld.iter().enumerate() {
            let z = z.to_f64_exact();
            // max(z,0) - z*y + ln(1 + exp(-|z|)); stable for large |z|
            total += z.max(0.0) - z * labels[i] + (-z.abs()).exp().ln_1p();
        }
        let value = Tensor::scalar(lit::<S>(total / n as f64));
        let rg = self.rg(&[logits.0]);
        self.out(
            "bce_with_logits",
            value,
            rg,
            Op::BceWithLogits { logits: logits.0, labels: labels.to_vec() },
        )
    }

    /// Identity forward; backward multiplies the upstream gradient by
    /// `-lambda`. Rejects negative `lambda`.
    pub fn gradient_reverse(&mut self, x: Var, lambda: f64) -> Result<Var> {
        if lambda < 0.0 || !lambda.is_finite() {
            return Err(TensorError::InvalidArg {
                op: "gradient_reverse",
                detail: format!("lambda must be finite and >= 0, got {}", lambda),
            });
        }
        let value = self.value(x).clone();
        let rg = self.rg(&[x.0]);
        self.out("gradient_reverse", value, rg, Op::GradReverse { x: x.0, lambda })
    }

    /// Identity forward with no gradient path (the stop-gradient operator).
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).clone();
        let _ = x;
        self.out("detach", value, false, Op::Detach)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Accumulate `d loss / d leaf` for every gradient leaf reachable from
    /// the scalar `loss`. A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(TensorError::AlreadyConsumed);
        }
        let lnode = &self.nodes[loss.0];
        if lnode.value.numel() != 1 {
            return Err(TensorError::NotScalar {
                op: "backward",
                shape: lnode.value.shape().to_vec(),
            });
        }
        if !lnode.requires_grad {
            return Err(TensorError::DetachedGraph);
        }
        self.consumed = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), S::one()));

        let nodes = &self.nodes;
        let grads = &mut self.grads;
        for i in (0..=loss.0).rev() {
            if !nodes[i].requires_grad || grads[i].is_none() {
                continue;
            }
            let upstream = grads[i].take().unwrap();
            propagate(nodes, grads, i, &upstream);
            grads[i] = Some(upstream);
        }
        Ok(())
    }
}

/// Apply one node's vector-Jacobian product, accumulating into the grads
/// table. `nodes` is read-only; only `grads` is written.
fn propagate<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut [Option<Tensor<S>>],
    i: usize,
    g: &Tensor<S>,
) {
    macro_rules! grad_into {
        ($id:expr, $body:expr) => {
            if nodes[$id].requires_grad {
                if grads[$id].is_none() {
                    grads[$id] = Some(Tensor::zeros(nodes[$id].value.shape()));
                }
                let slot: &mut [S] = grads[$id].as_mut().unwrap().data_mut();
                #[allow(clippy::redundant_closure_call)]
                ($body)(slot);
            }
        };
    }

    let out_value = &nodes[i].value;
    let gd = g.data();

    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul { a, b, ta, tb } => {
            let (a, b, ta, tb) = (*a, *b, *ta, *tb);
            let (m, k) = eff_dims(nodes[a].value.shape(), ta, "matmul").expect("validated");
            let n = eff_dims(nodes[b].value.shape(), tb, "matmul").expect("validated").1;
            let ad = nodes[a].value.data();
            let bd = nodes[b].value.data();
            if nodes[a].requires_grad {
                // dA_eff = g @ B_effᵀ, then undo the transpose on store.
                let da_eff = matmul_raw(gd, bd, m, n, k, false, !tb);
                let da = if ta { transpose_raw(&da_eff, m, k) } else { da_eff };
                grad_into!(a, |dst: &mut [S]| axpy(dst, &da));
            }
            if nodes[b].requires_grad {
                let db_eff = matmul_raw(ad, gd, k, m, n, !ta, false);
                let db = if tb { transpose_raw(&db_eff, k, n) } else { db_eff };
                grad_into!(b, |dst: &mut [S]| axpy(dst, &db));
            }
        }
        Op::Add { a, b } => {
            let (a, b) = (*a, *b);
            grad_into!(a, |dst: &mut [S]| axpy(dst, gd));
            let bn = nodes[b].value.numel().max(1);
            grad_into!(b, |dst: &mut [S]| {
                for (i, &v) in gd.iter().enumerate() {
                    dst[i % bn] += v;
                }
            });
        }
        Op::Sub { a, b } => {
            let (a, b) = (*a, *b);
            grad_into!(a, |dst: &mut [S]| axpy(dst, gd));
            grad_into!(b, |dst: &mut [S]| {
                for (d, &v) in dst.iter_mut().zip(gd) {
                    *d -= v;
                }
            });
        }
        Op::Mul { a, b } => {
            let (a, b) = (*a, *b);
            let ad = nodes[a].value.data();
            let bd = nodes[b].value.data();
            grad_into!(a, |dst: &mut [S]| {
                for j in 0..dst.len() {
                    dst[j] += gd[j] * bd[j];
                }
            });
            grad_into!(b, |dst: &mut [S]| {
                for j in 0..dst.len() {
                    dst[j] += gd[j] * ad[j];
                }
            });
        }
        Op::Scale { a, c } => {
            let (a, c) = (*a, *c);
            grad_into!(a, |dst: &mut [S]| {
                for (d, &v) in dst.iter_mut().zip(gd) {
                    *d += v * c;
                }
            });
        }
        Op::Conv1d { x, w, bias, stride, padding } => {
            let (x, w, bias, stride, padding) = (*x, *w, *bias, *stride, *padding);
            let xs = nodes[x].value.shape();
            let ws = nodes[w].value.shape();
            let (batch, c_in, len) = (xs[0], xs[1], xs[2]);
            let (c_out, _, k) = (ws[0], ws[1], ws[2]);
            let out_len = out_value.shape()[2];
            let xd = nodes[x].value.data();
            let wd = nodes[w].value.data();
            grad_into!(x, |dst: &mut [S]| {
                for b in 0..batch {
                    for co in 0..c_out {
                        let grow = &gd[(b * c_out + co) * out_len..(b * c_out + co + 1) * out_len];
                        for ci in 0..c_in {
                            let wrow = &wd[(co * c_in + ci) * k..(co * c_in + ci + 1) * k];
                            let drow = &mut dst[(b * c_in + ci) * len..(b * c_in + ci + 1) * len];
                            for (t, &gv) in grow.iter().enumerate() {
                                for (dk, &wv) in wrow.iter().enumerate() {
                                    let src = t * stride + dk;
                                    if src >= padding && src - padding < len {
                                        drow[src - padding] += gv * wv;
                                    }
                                }
                            }
                        }
                    }
                }
            });
            grad_into!(w, |dst: &mut [S]| {
                for b in 0..batch {
                    for co in 0..c_out {
                        let grow = &gd[(b * c_out + co) * out_len..(b * c_out + co + 1) * out_len];
                        for ci in 0..c_in {
                            let xrow = &xd[(b * c_in + ci) * len..(b * c_in + ci + 1) * len];
                            let dwrow = &mut dst[(co * c_in + ci) * k..(co * c_in + ci + 1) * k];
                            for (t, &gv) in grow.iter().enumerate() {
                                for (dk, dw) in dwrow.iter_mut().enumerate() {
                                    let src = t * stride + dk;
                                    if src >= padding && src - padding < len {
                                        *dw += gv * xrow[src - padding];
                                    }
                                }
                            }
                        }
                    }
                }
            });
            grad_into!(bias, |dst: &mut [S]| {
                for b in 0..batch {
                    for co in 0..c_out {
                        let grow = &gd[(b * c_out + co) * out_len..(b * c_out + co + 1) * out_len];
                        let mut acc = S::zero();
                        for &gv in grow {
                            acc += gv;
                        }
                        dst[co] += acc;
                    }
                }
            });
        }
        Op::LayerNorm { x, gamma, beta, mean, rstd } => {
            let (x, gamma, beta) = (*x, *gamma, *beta);
            let d = *nodes[x].value.shape().last().unwrap();
            let rows = nodes[x].value.numel() / d;
            let xd = nodes[x].value.data();
            let gmd = nodes[gamma].value.data();
            let inv_d = lit::<S>(1.0 / d as f64);
            grad_into!(x, |dst: &mut [S]| {
                for r in 0..rows {
                    let xrow = &xd[r * d..(r + 1) * d];
                    let grow = &gd[r * d..(r + 1) * d];
                    let (mu, rs) = (mean[r], rstd[r]);
                    let mut m1 = S::zero();
                    let mut m2 = S::zero();
                    for j in 0..d {
                        let xhat = (xrow[j] - mu) * rs;
                        let dxhat = grow[j] * gmd[j];
                        m1 += dxhat;
                        m2 += dxhat * xhat;
                    }
                    m1 = m1 * inv_d;
                    m2 = m2 * inv_d;
                    let drow = &mut dst[r * d..(r + 1) * d];
                    for j in 0..d {
                        let xhat = (xrow[j] - mu) * rs;
                        let dxhat = grow[j] * gmd[j];
                        drow[j] += rs * (dxhat - m1 - xhat * m2);
                    }
                }
            });
            grad_into!(gamma, |dst: &mut [S]| {
                for r in 0..rows {
                    for j in 0..d {
                        let xhat = (xd[r * d + j] - mean[r]) * rstd[r];
                        dst[j] += gd[r * d + j] * xhat;
                    }
                }
            });
            grad_into!(beta, |dst: &mut [S]| {
                for r in 0..rows {
                    for j in 0..d {
                        dst[j] += gd[r * d + j];
                    }
                }
            });
        }
        Op::Gelu { x } => {
            let x = *x;
            let xd = nodes[x].value.data();
            grad_into!(x, |dst: &mut [S]| {
                for j in 0..dst.len() {
                    dst[j] += gd[j] * lit::<S>(gelu_grad_f64(xd[j].to_f64_exact()));
                }
            });
        }
        Op::MaskedSoftmax { scores } => {
            let scores = *scores;
            let d = *out_value.shape().last().unwrap();
            let rows = out_value.numel() / d;
            let yd = out_value.data();
            grad_into!(scores, |dst: &mut [S]| {
                for r in 0..rows {
                    let yrow = &yd[r * d..(r + 1) * d];
                    let grow = &gd[r * d..(r + 1) * d];
                    let mut dot = S::zero();
                    for j in 0..d {
                        dot += grow[j] * yrow[j];
                    }
                    let drow = &mut dst[r * d..(r + 1) * d];
                    for j in 0..d {
                        drow[j] += yrow[j] * (grow[j] - dot);
                    }
                }
            });
        }
        Op::Embedding { table, indices } => {
            let table = *table;
            let d = nodes[table].value.shape()[1];
            grad_into!(table, |dst: &mut [S]| {
                for (r, &idx) in indices.iter().enumerate() {
                    let grow = &gd[r * d..(r + 1) * d];
                    let drow = &mut dst[idx * d..(idx + 1) * d];
                    for j in 0..d {
                        drow[j] += grow[j];
                    }
                }
            });
        }
        Op::CrossEntropyMasked { logits, targets } => {
            let logits = *logits;
            let v = nodes[logits].value.shape()[1];
            let ld = nodes[logits].value.data();
            let gscalar = gd[0];
            grad_into!(logits, |dst: &mut [S]| {
                let count = targets.iter().filter(|t| t.is_some()).count();
                let scale = gscalar * lit::<S>(1.0 / count as f64);
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = t else { continue };
                    let row = &ld[r * v..(r + 1) * v];
                    let lse = log_sum_exp(row);
                    let drow = &mut dst[r * v..(r + 1) * v];
                    for j in 0..v {
                        let p = (row[j] - lse).exp();
                        let delta = if j == *t { S::one() } else { S::zero() };
                        drow[j] += (p - delta) * scale;
                    }
                }
            });
        }
        Op::L2Normalize { x } => {
            let x = *x;
            let d = *out_value.shape().last().unwrap();
            let rows = out_value.numel() / d;
            let xd = nodes[x].value.data();
            let yd = out_value.data();
            grad_into!(x, |dst: &mut [S]| {
                for r in 0..rows {
                    let xrow = &xd[r * d..(r + 1) * d];
                    let yrow = &yd[r * d..(r + 1) * d];
                    let grow = &gd[r * d..(r + 1) * d];
                    let mut sq = S::zero();
                    for &v in xrow {
                        sq += v * v;
                    }
                    let inv_norm = sq.sqrt().recip();
                    let mut dot = S::zero();
                    for j in 0..d {
                        dot += yrow[j] * grow[j];
                    }
                    let drow = &mut dst[r * d..(r + 1) * d];
                    for j in 0..d {
                        drow[j] += (grow[j] - yrow[j] * dot) * inv_norm;
                    }
                }
            });
        }
        Op::Concat { inputs, axis } => {
            let axis = *axis;
            let out_shape = out_value.shape();
            let outer: usize = out_shape[..axis].iter().product();
            let inner: usize = out_shape[axis + 1..].iter().product();
            let total = out_shape[axis];
            let mut offset = 0;
            for &id in inputs {
                let e = nodes[id].value.shape()[axis];
                let off = offset;
                grad_into!(id, |dst: &mut [S]| {
                    for o in 0..outer {
                        let src_start = (o * total + off) * inner;
                        let dst_start = o * e * inner;
                        for j in 0..e * inner {
                            dst[dst_start + j] += gd[src_start + j];
                        }
                    }
                });
                offset += e;
            }
        }
        Op::Slice { x, axis, start } => {
            let (x, axis, start) = (*x, *axis, *start);
            let xs = nodes[x].value.shape();
            let outer: usize = xs[..axis].iter().product();
            let inner: usize = xs[axis + 1..].iter().product();
            let e = xs[axis];
            let len = out_value.shape()[axis];
            grad_into!(x, |dst: &mut [S]| {
                for o in 0..outer {
                    let dst_start = (o * e + start) * inner;
                    let src_start = o * len * inner;
                    for j in 0..len * inner {
                        dst[dst_start + j] += gd[src_start + j];
                    }
                }
            });
        }
        Op::Reshape { x } => {
            let x = *x;
            grad_into!(x, |dst: &mut [S]| axpy(dst, gd));
        }
        Op::Mean { x } => {
            let x = *x;
            let n = nodes[x].value.numel();
            let gv = gd[0] * lit::<S>(1.0 / n as f64);
            grad_into!(x, |dst: &mut [S]| {
                for d in dst.iter_mut() {
                    *d += gv;
                }
            });
        }
        Op::Sum { x } => {
            let x = *x;
            let gv = gd[0];
            grad_into!(x, |dst: &mut [S]| {
                for d in dst.iter_mut() {
                    *d += gv;
                }
            });
        }
        Op::BceWithLogits { logits, labels } => {
            let logits = *logits;
            let ld = nodes[logits].value.data();
            let gscalar = gd[0];
            grad_into!(logits, |dst: &mut [S]| {
                let inv_n = lit::<S>(1.0 / labels.len() as f64);
                for j in 0..dst.len() {
                    let z = ld[j].to_f64_exact();
                    let sig = 1.0 / (1.0 + (-z).exp());
                    dst[j] += gscalar * inv_n * lit::<S>(sig - labels[j]);
                }
            });
        }
        Op::GradReverse { x, lambda } => {
            let (x, lambda) = (*x, *lambda);
            let neg = lit::<S>(-lambda);
            grad_into!(x, |dst: &mut [S]| {
                for (d, &v) in dst.iter_mut().zip(gd) {
                    *d += v * neg;
                }
            });
        }
        Op::Detach => {}
    }
}

// ── raw kernels ─────────────────────────────────────────────────────────

fn eff_dims(shape: &[usize], transpose: bool, op: &'static str) -> Result<(usize, usize)> {
    if shape.len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("expected rank 2, got {:?}", shape),
        });
    }
    Ok(if transpose { (shape[1], shape[0]) } else { (shape[0], shape[1]) })
}

fn is_suffix(suffix: &[usize], full: &[usize]) -> bool {
    suffix.len() <= full.len() && full[full.len() - suffix.len()..] == *suffix
}

fn axpy<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn transpose_raw<S: Scalar>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// `C[m,n] = A' @ B'` where `A'` is `a` optionally transposed to `[m,k]`
/// and `B'` is `b` optionally transposed to `[k,n]`.
pub(crate) fn matmul_raw<S: Scalar>(
    a: &[S],
    b: &[S],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let crow = &mut c[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = a[i * k + p];
                    let brow = &b[p * n..(p + 1) * n];
                    for j in 0..n {
                        crow[j] += av * brow[j];
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                let crow = &mut c[i * n..(i + 1) * n];
                for (j, cv) in crow.iter_mut().enumerate() {
                    let brow = &b[j * k..(j + 1) * k];
                    let mut acc = S::zero();
                    for p in 0..k {
                        acc += arow[p] * brow[p];
                    }
                    *cv += acc;
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let arow = &a[p * m..(p + 1) * m];
                let brow = &b[p * n..(p + 1) * n];
                for i in 0..m {
                    let av = arow[i];
                    let crow = &mut c[i * n..(i + 1) * n];
                    for j in 0..n {
                        crow[j] += av * brow[j];
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let brow = &b[j * k..(j + 1) * k];
                    let mut acc = S::zero();
                    for p in 0..k {
                        acc += a[p * m + i] * brow[p];
                    }
                    c[i * n + j] = acc;
                }
            }
        }
    }
    c
}

fn log_sum_exp<S: Scalar>(row: &[S]) -> S {
    let mut max = S::neg_infinity();
    for &v in row {
        if v > max {
            max = v;
        }
    }
    let mut sum = S::zero();
    for &v in row {
        sum += (v - max).exp();
    }
    max + sum.ln()
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_f64(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad_f64(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
