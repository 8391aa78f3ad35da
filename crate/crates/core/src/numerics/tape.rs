//! Dynamic reverse-mode tape.
//!
//! Every op appends a node whose inputs are earlier nodes, so the node vector
//! is already in topological order and `backward` is a single reverse sweep.
//! Nodes that do not depend on any `requires_grad` leaf are never given a
//! gradient buffer.

use super::kernels;
use super::tensor::{check_shape, Fnv64, Tensor};
use super::TensorError;

/// Layer-norm variance floor.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous run of rows `[start, start + len)` forming one sequence in a
/// packed batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Linear { x: Var, w: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: f64 },
    AddRowBias { a: Var, bias: Var, cols: usize },
    Relu { a: Var },
    Sigmoid { a: Var },
    SoftmaxRows { a: Var, cols: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, cols: usize, xhat: Vec<f64>, inv_std: Vec<f64>, floored: Vec<bool> },
    Gather { table: Var, ids: Vec<usize>, cols: usize },
    Attention { q: Var, k: Var, v: Var, heads: usize, segments: Vec<Segment>, key_mask: Vec<bool>, probs: Vec<f64> },
    SegmentMean { x: Var, segments: Vec<Segment>, mask: Vec<bool>, cols: usize },
    SegmentLast { x: Var, rows: Vec<usize>, cols: usize },
    Sum { a: Var },
    Mse { pred: Var, target: Var },
    Reshape { a: Var },
    Slice { a: Var, start: usize },
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to every `requires_grad` leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Copies the gradient of `var` into `tensor.grad`. Frozen tensors are
    /// left untouched.
    pub fn write_to(&self, var: Var, tensor: &mut Tensor) -> Result<(), TensorError> {
        if !tensor.requires_grad() {
            return Ok(());
        }
        match self.get(var) {
            Some(g) => tensor.set_grad(g.to_vec()),
            None => tensor.set_grad(vec![0.0; tensor.numel()]),
        }
    }

    /// Number of allocated gradient buffers.
    pub fn allocated(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    branches: Fnv64,
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

    /// Records a copy of `tensor`, tracking gradients iff the tensor does.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.nodes.push(Node {
            value: tensor.data().to_vec(),
            shape: tensor.shape().to_vec(),
            op: Op::Leaf,
            requires_grad: tensor.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: &Tensor) -> Var {
        self.nodes.push(Node { value: tensor.data().to_vec(), shape: tensor.shape().to_vec(), op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &[f64] {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        &self.nodes[var.0].shape
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn tensor(&self, var: Var) -> Tensor {
        let n = &self.nodes[var.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape values are validated on push")
    }

    /// Hash of every branch decision taken so far (relu signs, layer-norm
    /// floors). Two evaluations with equal signatures traversed the same
    /// piecewise-smooth region.
    pub fn branch_signature(&self) -> u64 {
        self.branches.finish()
    }

    fn push(&mut self, op_name: &'static str, value: Vec<f64>, shape: Vec<usize>, op: Op, inputs: &[Var]) -> Result<Var, TensorError> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(op_name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, shape, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, var: Var, op: &'static str) -> Result<(usize, usize), TensorError> {
        match self.nodes[var.0].shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(TensorError::ShapeMismatch { op, left: other.to_vec(), right: vec![] }),
        }
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::ShapeMismatch { op, left: self.shape(a).to_vec(), right: self.shape(b).to_vec() }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.value(a), self.value(b), &mut out, m, k, n);
        self.push("matmul", out, vec![m, n], Op::MatMul { a, b, m, k, n }, &[a, b])
    }

    /// `x · wᵀ` for `x: [m × k]`, `w: [n × k]` (weights stored out×in).
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims2(x, "linear")?;
        let (n, k2) = self.dims2(w, "linear")?;
        if k != k2 {
            return Err(self.mismatch("linear", x, w));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt(self.value(x), self.value(w), &mut out, m, k, n);
        self.push("linear", out, vec![m, n], Op::Linear { x, w, m, k, n }, &[x, w])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(op, a, b));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.push("add", out, self.shape(a).to_vec(), Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        self.push("sub", out, self.shape(a).to_vec(), Op::Sub { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        self.push("mul", out, self.shape(a).to_vec(), Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        let out = self.value(a).iter().map(|x| x * s).collect();
        self.push("scale", out, self.shape(a).to_vec(), Op::Scale { a, s }, &[a])
    }

    /// Adds `bias: [n]` to every row of `a: [m × n]`. The only broadcast supported.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let (_, n) = self.dims2(a, "add_row_bias")?;
        if self.value(bias).len() != n || self.shape(bias).len() != 1 {
            return Err(self.mismatch("add_row_bias", a, bias));
        }
        let b = self.value(bias);
        let out = self.value(a).chunks(n).flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y)).collect();
        self.push("add_row_bias", out, self.shape(a).to_vec(), Op::AddRowBias { a, bias, cols: n }, &[a, bias])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let mut sig = self.branches;
        let out = self
            .value(a)
            .iter()
            .map(|&x| {
                sig.write_bytes(&[u8::from(x > 0.0)]);
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            })
            .collect();
        self.branches = sig;
        self.push("relu", out, self.shape(a).to_vec(), Op::Relu { a }, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        self.push("sigmoid", out, self.shape(a).to_vec(), Op::Sigmoid { a }, &[a])
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let (_, n) = self.dims2(a, "softmax_rows")?;
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        self.push("softmax_rows", out, self.shape(a).to_vec(), Op::SoftmaxRows { a, cols: n }, &[a])
    }

    /// Per-row normalisation `(x − μ) / sqrt(max(σ², ε)) · gain + bias` with
    /// population variance and `ε = 1e-5`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
        let (m, n) = self.dims2(x, "layer_norm")?;
        if self.value(gain).len() != n {
            return Err(self.mismatch("layer_norm", x, gain));
        }
        if self.value(bias).len() != n {
            return Err(self.mismatch("layer_norm", x, bias));
        }
        let xs = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut floored = vec![false; m];
        let mut out = vec![0.0; m * n];
        let mut sig = self.branches;
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let floor = var < LAYER_NORM_EPS;
            sig.write_bytes(&[u8::from(floor)]);
            let s = 1.0 / var.max(LAYER_NORM_EPS).sqrt();
            inv_std[r] = s;
            floored[r] = floor;
            for c in 0..n {
                let h = (row[c] - mean) * s;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        self.branches = sig;
        self.push("layer_norm", out, vec![m, n], Op::LayerNorm { x, gain, bias, cols: n, xhat, inv_std, floored }, &[x, gain, bias])
    }

    /// Row lookup `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let (rows, cols) = self.dims2(table, "gather")?;
        if ids.is_empty() {
            return Err(TensorError::Empty("gather"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::IndexOutOfRange { index: bad, len: rows });
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&t[i * cols..(i + 1) * cols]);
        }
        self.push("gather", out, vec![ids.len(), cols], Op::Gather { table, ids: ids.to_vec(), cols }, &[table])
    }

    /// Multi-head causal self-attention over packed sequences.
    ///
    /// Row `i` of a segment attends to rows `j ≤ i` of the same segment with
    /// `key_mask[j]` set. A row with no admissible key gets a zero output.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[Segment],
        key_mask: &[bool],
    ) -> Result<Var, TensorError> {
        let (rows, d) = self.dims2(q, "attention")?;
        if self.shape(k) != [rows, d] {
            return Err(self.mismatch("attention", q, k));
        }
        if self.shape(v) != [rows, d] {
            return Err(self.mismatch("attention", q, v));
        }
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::InvalidShape(vec![d, heads]));
        }
        if key_mask.len() != rows || segments.iter().any(|s| s.start + s.len > rows) {
            return Err(TensorError::InvalidShape(vec![rows, key_mask.len()]));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![0.0; rows * d];
        let total: usize = segments.iter().map(|s| heads * s.len * s.len).sum();
        let mut probs = vec![0.0; total];
        let mut offset = 0;
        let mut scores = Vec::new();
        for seg in segments {
            let l = seg.len;
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..l {
                    let qi = seg.start + i;
                    let q_row = &qv[qi * d + cols.start..qi * d + cols.end];
                    scores.clear();
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let kj = seg.start + j;
                        if key_mask[kj] {
                            let s = kernels::dot(q_row, &kv[kj * d + cols.start..kj * d + cols.end]) * scale;
                            max = max.max(s);
                            scores.push((j, s));
                        }
                    }
                    if scores.is_empty() {
                        continue;
                    }
                    let mut z = 0.0;
                    for (_, s) in scores.iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let p_row = &mut probs[offset + (h * l + i) * l..offset + (h * l + i + 1) * l];
                    let out_row = &mut out[qi * d + cols.start..qi * d + cols.end];
                    for &(j, e) in &scores {
                        let p = e / z;
                        p_row[j] = p;
                        let kj = seg.start + j;
                        kernels::axpy(p, &vv[kj * d + cols.start..kj * d + cols.end], out_row);
                    }
                }
            }
            offset += heads * l * l;
        }
        self.push(
            "attention",
            out,
            vec![rows, d],
            Op::Attention { q, k, v, heads, segments: segments.to_vec(), key_mask: key_mask.to_vec(), probs },
            &[q, k, v],
        )
    }

    /// Mean over the rows of each segment whose mask bit is set; one output row per segment.
    pub fn segment_mean(&mut self, x: Var, segments: &[Segment], mask: &[bool]) -> Result<Var, TensorError> {
        let (rows, cols) = self.dims2(x, "segment_mean")?;
        if mask.len() != rows || segments.is_empty() {
            return Err(TensorError::InvalidShape(vec![rows, mask.len()]));
        }
        let xs = self.value(x);
        let mut out = vec![0.0; segments.len() * cols];
        for (b, seg) in segments.iter().enumerate() {
            let live: Vec<usize> = (seg.start..seg.start + seg.len).filter(|&r| mask[r]).collect();
            if live.is_empty() {
                return Err(TensorError::Empty("segment_mean: all positions masked"));
            }
            let o = &mut out[b * cols..(b + 1) * cols];
            for &r in &live {
                kernels::axpy(1.0, &xs[r * cols..(r + 1) * cols], o);
            }
            let inv = 1.0 / live.len() as f64;
            o.iter_mut().for_each(|v| *v *= inv);
        }
        self.push(
            "segment_mean",
            out,
            vec![segments.len(), cols],
            Op::SegmentMean { x, segments: segments.to_vec(), mask: mask.to_vec(), cols },
            &[x],
        )
    }

    /// Last unmasked row of each segment.
    pub fn segment_last(&mut self, x: Var, segments: &[Segment], mask: &[bool]) -> Result<Var, TensorError> {
        let (rows, cols) = self.dims2(x, "segment_last")?;
        if mask.len() != rows || segments.is_empty() {
            return Err(TensorError::InvalidShape(vec![rows, mask.len()]));
        }
        let mut picked = Vec::with_capacity(segments.len());
        for seg in segments {
            let r = (seg.start..seg.start + seg.len)
                .rev()
                .find(|&r| mask[r])
                .ok_or(TensorError::Empty("segment_last: all positions masked"))?;
            picked.push(r);
        }
        let xs = self.value(x);
        let out = picked.iter().flat_map(|&r| xs[r * cols..(r + 1) * cols].iter().copied()).collect();
        self.push("segment_last", out, vec![segments.len(), cols], Op::SegmentLast { x, rows: picked, cols }, &[x])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.value(a).iter().sum();
        self.push("sum", vec![s], vec![1], Op::Sum { a }, &[a])
    }

    /// Mean squared error between equal-length tensors.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var, TensorError> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.len() != t.len() {
            return Err(self.mismatch("mse_loss", pred, target));
        }
        if p.is_empty() {
            return Err(TensorError::Empty("mse_loss"));
        }
        let loss = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        self.push("mse_loss", vec![loss], vec![1], Op::Mse { pred, target }, &[pred, target])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let numel = check_shape(&shape)?;
        if numel != self.value(a).len() {
            return Err(TensorError::ShapeMismatch { op: "reshape", left: self.shape(a).to_vec(), right: shape });
        }
        let out = self.value(a).to_vec();
        self.push("reshape", out, shape, Op::Reshape { a }, &[a])
    }

    /// Contiguous flat range of `a` starting at `start`, viewed as `shape`.
    pub fn slice(&mut self, a: Var, start: usize, shape: Vec<usize>) -> Result<Var, TensorError> {
        let numel = check_shape(&shape)?;
        let src = self.value(a);
        if start + numel > src.len() {
            return Err(TensorError::IndexOutOfRange { index: start + numel, len: src.len() });
        }
        let out = src[start..start + numel].to_vec();
        self.push("slice", out, shape, Op::Slice { a, start }, &[a])
    }

    /// Reverse sweep from a scalar. Only `requires_grad` leaves keep their
    /// gradient in the result.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(TensorError::NotScalar(root.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !root.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        // Inputs may alias (mul(a, a)), so each update takes a fresh borrow.
        macro_rules! buf {
            ($v:expr) => {
                grads[$v.0].get_or_insert_with(|| vec![0.0; nodes[$v.0].value.len()])
            };
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                if wants(*a) {
                    kernels::matmul_nt(g, &nodes[b.0].value, buf!(a), *m, *n, *k);
                }
                if wants(*b) {
                    kernels::matmul_tn(&nodes[a.0].value, g, buf!(b), *m, *k, *n);
                }
            }
            Op::Linear { x, w, m, k, n } => {
                if wants(*x) {
                    kernels::matmul(g, &nodes[w.0].value, buf!(x), *m, *n, *k);
                }
                if wants(*w) {
                    kernels::matmul_tn(g, &nodes[x.0].value, buf!(w), *m, *n, *k);
                }
            }
            Op::Add { a, b } => {
                if wants(*a) {
                    kernels::axpy(1.0, g, buf!(a));
                }
                if wants(*b) {
                    kernels::axpy(1.0, g, buf!(b));
                }
            }
            Op::Sub { a, b } => {
                if wants(*a) {
                    kernels::axpy(1.0, g, buf!(a));
                }
                if wants(*b) {
                    kernels::axpy(-1.0, g, buf!(b));
                }
            }
            Op::Mul { a, b } => {
                if wants(*a) {
                    let bv = &nodes[b.0].value;
                    let da = buf!(a);
                    for i in 0..g.len() {
                        da[i] += g[i] * bv[i];
                    }
                }
                if wants(*b) {
                    let av = &nodes[a.0].value;
                    let db = buf!(b);
                    for i in 0..g.len() {
                        db[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale { a, s } => kernels::axpy(*s, g, buf!(a)),
            Op::AddRowBias { a, bias, cols } => {
                if wants(*a) {
                    kernels::axpy(1.0, g, buf!(a));
                }
                if wants(*bias) {
                    let db = buf!(bias);
                    for row in g.chunks(*cols) {
                        kernels::axpy(1.0, row, db);
                    }
                }
            }
            Op::Relu { a } => {
                let av = &nodes[a.0].value;
                let da = buf!(a);
                for i in 0..g.len() {
                    if av[i] > 0.0 {
                        da[i] += g[i];
                    }
                }
            }
            Op::Sigmoid { a } => {
                let y = &node.value;
                let da = buf!(a);
                for i in 0..g.len() {
                    da[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
            Op::SoftmaxRows { a, cols } => {
                let y = &node.value;
                let da = buf!(a);
                for (r, (gy, yy)) in g.chunks(*cols).zip(y.chunks(*cols)).enumerate() {
                    let t: f64 = gy.iter().zip(yy).map(|(a, b)| a * b).sum();
                    for c in 0..*cols {
                        da[r * cols + c] += yy[c] * (gy[c] - t);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, cols, xhat, inv_std, floored } => {
                let n = *cols;
                let gv = &nodes[gain.0].value;
                if wants(*gain) {
                    let dg = buf!(gain);
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            dg[c] += gr[c] * hr[c];
                        }
                    }
                }
                if wants(*bias) {
                    let db = buf!(bias);
                    for gr in g.chunks(n) {
                        kernels::axpy(1.0, gr, db);
                    }
                }
                if wants(*x) {
                    let dx = buf!(x);
                    let mut dh = vec![0.0; n];
                    for r in 0..inv_std.len() {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        for c in 0..n {
                            dh[c] = gr[c] * gv[c];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dh_h = if floored[r] { 0.0 } else { dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / n as f64 };
                        let s = inv_std[r];
                        for c in 0..n {
                            dx[r * n + c] += s * (dh[c] - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Gather { table, ids, cols } => {
                let dt = buf!(table);
                for (row, &i) in ids.iter().enumerate() {
                    kernels::axpy(1.0, &g[row * cols..(row + 1) * cols], &mut dt[i * cols..(i + 1) * cols]);
                }
            }
            Op::Attention { q, k, v, heads, segments, key_mask, probs } => {
                let d = nodes[q.0].shape[1];
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
                let rows = qv.len() / d;
                let mut dq = vec![0.0; rows * d];
                let mut dk = vec![0.0; rows * d];
                let mut dv = vec![0.0; rows * d];
                let mut dp = Vec::new();
                let mut offset = 0;
                for seg in segments {
                    let l = seg.len;
                    for h in 0..*heads {
                        let c0 = h * dh;
                        for i in 0..l {
                            let qi = seg.start + i;
                            let p_row = &probs[offset + (h * l + i) * l..offset + (h * l + i + 1) * l];
                            let g_row = &g[qi * d + c0..qi * d + c0 + dh];
                            dp.clear();
                            let mut t = 0.0;
                            for j in 0..=i {
                                let kj = seg.start + j;
                                if !key_mask[kj] || p_row[j] == 0.0 {
                                    dp.push(0.0);
                                    continue;
                                }
                                let p = p_row[j];
                                let dpj = kernels::dot(g_row, &vv[kj * d + c0..kj * d + c0 + dh]);
                                kernels::axpy(p, g_row, &mut dv[kj * d + c0..kj * d + c0 + dh]);
                                t += p * dpj;
                                dp.push(dpj);
                            }
                            for j in 0..=i {
                                let p = p_row[j];
                                if p == 0.0 {
                                    continue;
                                }
                                let kj = seg.start + j;
                                let ds = p * (dp[j] - t) * scale;
                                kernels::axpy(ds, &kv[kj * d + c0..kj * d + c0 + dh], &mut dq[qi * d + c0..qi * d + c0 + dh]);
                                kernels::axpy(ds, &qv[qi * d + c0..qi * d + c0 + dh], &mut dk[kj * d + c0..kj * d + c0 + dh]);
                            }
                        }
                    }
                    offset += heads * l * l;
                }
                if wants(*q) {
                    kernels::axpy(1.0, &dq, buf!(q));
                }
                if wants(*k) {
                    kernels::axpy(1.0, &dk, buf!(k));
                }
                if wants(*v) {
                    kernels::axpy(1.0, &dv, buf!(v));
                }
            }
            Op::SegmentMean { x, segments, mask, cols } => {
                let dx = buf!(x);
                for (b, seg) in segments.iter().enumerate() {
                    let count = (seg.start..seg.start + seg.len).filter(|&r| mask[r]).count();
                    let inv = 1.0 / count as f64;
                    let gr = &g[b * cols..(b + 1) * cols];
                    for r in seg.start..seg.start + seg.len {
                        if mask[r] {
                            kernels::axpy(inv, gr, &mut dx[r * cols..(r + 1) * cols]);
                        }
                    }
                }
            }
            Op::SegmentLast { x, rows, cols } => {
                let dx = buf!(x);
                for (b, &r) in rows.iter().enumerate() {
                    kernels::axpy(1.0, &g[b * cols..(b + 1) * cols], &mut dx[r * cols..(r + 1) * cols]);
                }
            }
            Op::Sum { a } => {
                let da = buf!(a);
                da.iter_mut().for_each(|v| *v += g[0]);
            }
            Op::Mse { pred, target } => {
                let (p, t) = (&nodes[pred.0].value, &nodes[target.0].value);
                let c = 2.0 * g[0] / p.len() as f64;
                if wants(*pred) {
                    let dp = buf!(pred);
                    for i in 0..p.len() {
                        dp[i] += c * (p[i] - t[i]);
                    }
                }
                if wants(*target) {
                    let dt = buf!(target);
                    for i in 0..p.len() {
                        dt[i] -= c * (p[i] - t[i]);
                    }
                }
            }
            Op::Reshape { a } => kernels::axpy(1.0, g, buf!(a)),
            Op::Slice { a, start } => {
                let da = buf!(a);
                kernels::axpy(1.0, g, &mut da[*start..*start + g.len()]);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}
