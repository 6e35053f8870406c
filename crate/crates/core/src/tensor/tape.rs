//! Wengert tape: forward ops append nodes, `backward` replays them in
//! reverse. Every op stores exactly what its backward rule needs, so each
//! rule below is a direct transcription of the textbook derivative.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{Mode, Tensor};

/// Index of a node within one tape.
pub type NodeId = usize;

/// How a node was produced. Inputs always have smaller ids than the output,
/// so the tape is topologically ordered by construction.
#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add { a: NodeId, b: NodeId },
    /// Adds a constant (mask, positional encoding); gradient passes through.
    AddConst { x: NodeId },
    /// Broadcast-adds a bias row vector over the rows of a matrix.
    AddBias { x: NodeId, bias: NodeId },
    Scale { x: NodeId, c: f64 },
    Mul { a: NodeId, b: NodeId },
    MatMul { a: NodeId, b: NodeId },
    Transpose { x: NodeId },
    Relu { x: NodeId },
    /// `mask` already folds in the 1/(1-p) survivor scaling.
    Dropout { x: NodeId, mask: Vec<f64> },
    Softmax { x: NodeId, axis: usize },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    /// Row gather from an embedding table.
    Embedding { table: NodeId, ids: Vec<usize> },
    SliceCols { x: NodeId, start: usize, len: usize },
    ConcatCols { parts: Vec<NodeId> },
    Sum { x: NodeId },
    /// Mean of -log softmax(logits)[t, target_t] over non-pad positions.
    CrossEntropy { logits: NodeId, targets: Vec<usize>, pad_id: usize },
}

struct Node {
    tensor: Tensor,
    op: Op,
    /// True when a gradient must flow to or through this node.
    track: bool,
}

/// Records a forward computation and computes gradients on demand.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. Its `requires_grad` flag decides whether
    /// `backward` will populate its gradient.
    pub fn leaf(&mut self, tensor: Tensor) -> NodeId {
        let track = tensor.requires_grad();
        self.push(tensor, Op::Leaf, track)
    }

    /// Records a non-differentiable input (features, probes, masks).
    pub fn constant(&mut self, tensor: Tensor) -> NodeId {
        self.push(tensor.with_requires_grad(false), Op::Leaf, false)
    }

    /// Records a trainable parameter (clones the tensor onto the tape).
    pub fn param(&mut self, tensor: &Tensor) -> NodeId {
        self.push(tensor.clone().with_requires_grad(true), Op::Leaf, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].tensor
    }

    /// Gradient of the last `backward` call w.r.t. node `id`, if populated.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id].tensor.grad()
    }

    fn push(&mut self, mut tensor: Tensor, op: Op, track: bool) -> NodeId {
        let id = self.nodes.len();
        tensor.set_node_id(id);
        let tensor = tensor.with_requires_grad(track);
        self.nodes.push(Node { tensor, op, track });
        id
    }

    fn tracked(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].track)
    }

    fn output(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value {bad} produced by {}",
                op_name(&op)
            )));
        }
        let track = self.tracked(inputs);
        let tensor = Tensor::new(shape, data)?;
        Ok(self.push(tensor, op, track))
    }

    fn shape2(&self, id: NodeId, what: &str) -> Result<(usize, usize)> {
        let s = self.value(id).shape();
        if s.len() != 2 {
            return Err(Error::Dimension(format!("{what} must be 2-d, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    // ── forward ops ─────────────────────────────────────────────────────

    /// Elementwise sum of two same-shaped tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Dimension(format!(
                "add: shapes {:?} and {:?} differ",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        self.output(ta.shape().to_vec(), data, Op::Add { a, b }, &[a, b])
    }

    /// Adds a constant tensor (not on the tape); gradient is the identity.
    pub fn add_const(&mut self, x: NodeId, c: &Tensor) -> Result<NodeId> {
        let tx = self.value(x);
        if tx.shape() != c.shape() {
            return Err(Error::Dimension(format!(
                "add_const: shapes {:?} and {:?} differ",
                tx.shape(),
                c.shape()
            )));
        }
        let data = tx.data().iter().zip(c.data()).map(|(a, b)| a + b).collect();
        self.output(tx.shape().to_vec(), data, Op::AddConst { x }, &[x])
    }

    /// `x[m×n] + bias[n]`, bias broadcast over rows.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.shape2(x, "add_bias input")?;
        let tb = self.value(bias);
        if tb.shape() != [n] {
            return Err(Error::Dimension(format!(
                "add_bias: bias shape {:?} does not match row width {n}",
                tb.shape()
            )));
        }
        let tx = self.value(x);
        let bias_data = self.value(bias).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        debug_assert_eq!(tx.numel(), m * n);
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += bias_data[j];
            }
        }
        self.output(vec![m, n], data, Op::AddBias { x, bias }, &[x, bias])
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * c).collect();
        self.output(tx.shape().to_vec(), data, Op::Scale { x, c }, &[x])
    }

    /// Elementwise product of two same-shaped tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Dimension(format!(
                "mul: shapes {:?} and {:?} differ",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        self.output(ta.shape().to_vec(), data, Op::Mul { a, b }, &[a, b])
    }

    /// Standard matrix product `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.shape2(a, "matmul lhs")?;
        let (k2, n) = self.shape2(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul: inner dimensions differ, lhs {:?} vs rhs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.output(vec![m, n], data, Op::MatMul { a, b }, &[a, b])
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.shape2(x, "transpose input")?;
        let src = self.value(x).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        self.output(vec![n, m], data, Op::Transpose { x }, &[x])
    }

    /// Elementwise max(0, x).
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v.max(0.0)).collect();
        self.output(tx.shape().to_vec(), data, Op::Relu { x }, &[x])
    }

    /// Inverted dropout: in train mode each element is zeroed with
    /// probability `p` and survivors scale by 1/(1-p); eval mode is the
    /// identity (the input node is returned unchanged).
    pub fn dropout(&mut self, x: NodeId, p: f64, mode: Mode, seed: u64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!("dropout p must be in [0, 1), got {p}")));
        }
        if mode == Mode::Eval {
            return Ok(x);
        }
        let tx = self.value(x);
        let mut rng = RngStream::seed_from(seed);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..tx.numel())
            .map(|_| if rng.next_f64() < p { 0.0 } else { keep })
            .collect();
        let data = tx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        self.output(tx.shape().to_vec(), data, Op::Dropout { x, mask }, &[x])
    }

    /// Exp-normalization along `axis` with max-subtraction stabilization.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let tx = self.value(x);
        if axis >= tx.rank() {
            return Err(Error::Parameter(format!(
                "softmax axis {axis} out of bounds for rank {}",
                tx.rank()
            )));
        }
        let shape = tx.shape().to_vec();
        let mut data = tx.data().to_vec();
        for_each_lane(&shape, axis, |lane| {
            let max = lane_max(&data, lane);
            let mut sum = 0.0;
            for &i in lane {
                data[i] = (data[i] - max).exp();
                sum += data[i];
            }
            for &i in lane {
                data[i] /= sum;
            }
        });
        self.output(shape, data, Op::Softmax { x, axis }, &[x])
    }

    /// Per-row standardization (population variance, eps inside the square
    /// root) followed by the affine map `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        if eps <= 0.0 {
            return Err(Error::Parameter(format!("layer_norm eps must be positive, got {eps}")));
        }
        let (t, d) = self.shape2(x, "layer_norm input")?;
        for (id, what) in [(gamma, "gamma"), (beta, "beta")] {
            let s = self.value(id).shape();
            if s != [d] {
                return Err(Error::Dimension(format!(
                    "layer_norm: {what} shape {s:?} does not match feature dim {d}"
                )));
            }
        }
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let src = self.value(x).data();
        let mut data = vec![0.0; t * d];
        for row in 0..t {
            let xs = &src[row * d..(row + 1) * d];
            let (mean, var) = mean_var(xs);
            let istd = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                data[row * d + j] = g[j] * (xs[j] - mean) * istd + b[j];
            }
        }
        self.output(vec![t, d], data, Op::LayerNorm { x, gamma, beta, eps }, &[x, gamma, beta])
    }

    /// Gathers rows `ids` from `table[V×d]` into a `[len(ids)×d]` tensor.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v, d) = self.shape2(table, "embedding table")?;
        if ids.is_empty() {
            return Err(Error::Contract("embedding lookup needs at least one id".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Vocab(format!("token id {bad} out of range for vocab size {v}")));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        self.output(
            vec![ids.len(), d],
            data,
            Op::Embedding { table, ids: ids.to_vec() },
            &[table],
        )
    }

    /// Columns `[start, start+len)` of a matrix.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.shape2(x, "slice_cols input")?;
        if len == 0 || start + len > n {
            return Err(Error::Dimension(format!(
                "slice_cols: columns [{start}, {}) out of range for width {n}",
                start + len
            )));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        self.output(vec![m, len], data, Op::SliceCols { x, start, len }, &[x])
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols needs at least one part".into()));
        }
        let (m, _) = self.shape2(parts[0], "concat_cols part")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mp, np) = self.shape2(p, "concat_cols part")?;
            if mp != m {
                return Err(Error::Dimension(format!(
                    "concat_cols: row counts differ ({m} vs {mp})"
                )));
            }
            widths.push(np);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[i * w..(i + 1) * w]);
            }
        }
        self.output(vec![m, total], data, Op::ConcatCols { parts: parts.to_vec() }, parts)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).data().iter().sum();
        self.output(vec![1], vec![s], Op::Sum { x }, &[x])
    }

    /// Mean over non-pad positions of `-log softmax(logits)[t, targets[t]]`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], pad_id: usize) -> Result<NodeId> {
        let (t, v) = self.shape2(logits, "cross_entropy logits")?;
        if targets.len() != t {
            return Err(Error::Dimension(format!(
                "cross_entropy: {} targets for {t} logit rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y != pad_id && y >= v) {
            return Err(Error::Vocab(format!("target id {bad} out of range for vocab size {v}")));
        }
        let n_active = targets.iter().filter(|&&y| y != pad_id).count();
        if n_active == 0 {
            return Err(Error::Contract("cross_entropy: every position is pad".into()));
        }
        let src = self.value(logits).data();
        let mut total = 0.0;
        for (row, &y) in targets.iter().enumerate() {
            if y == pad_id {
                continue;
            }
            let xs = &src[row * v..(row + 1) * v];
            total += log_sum_exp(xs) - xs[y];
        }
        let loss = total / n_active as f64;
        self.output(
            vec![1],
            vec![loss],
            Op::CrossEntropy { logits, targets: targets.to_vec(), pad_id },
            &[logits],
        )
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss node. Populates `grad` on every
    /// tracked tensor; fan-out accumulates additively. Each node is visited
    /// exactly once.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            let Some(gy) = grads[id].take() else { continue };
            if !self.nodes[id].track {
                continue;
            }
            self.apply_backward(id, &gy, &mut grads);
            self.nodes[id].tensor.set_grad(gy);
        }
        Ok(())
    }

    fn apply_backward(&self, id: NodeId, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |node: NodeId, update: &dyn Fn(&mut [f64])| {
            if !self.nodes[node].track {
                return;
            }
            let slot = grads[node]
                .get_or_insert_with(|| vec![0.0; self.nodes[node].tensor.numel()]);
            update(slot);
        };

        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                acc(*a, &|g| add_assign(g, gy));
                acc(*b, &|g| add_assign(g, gy));
            }
            Op::AddConst { x } => acc(*x, &|g| add_assign(g, gy)),
            Op::AddBias { x, bias } => {
                acc(*x, &|g| add_assign(g, gy));
                let n = self.value(*bias).numel();
                acc(*bias, &|g| {
                    for (i, v) in gy.iter().enumerate() {
                        g[i % n] += v;
                    }
                });
            }
            Op::Scale { x, c } => {
                let c = *c;
                acc(*x, &|g| {
                    for (gi, v) in g.iter_mut().zip(gy) {
                        *gi += c * v;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|g| {
                    for ((gi, v), o) in g.iter_mut().zip(gy).zip(db) {
                        *gi += v * o;
                    }
                });
                acc(*b, &|g| {
                    for ((gi, v), o) in g.iter_mut().zip(gy).zip(da) {
                        *gi += v * o;
                    }
                });
            }
            Op::MatMul { a, b } => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                // dA = dC · Bᵀ
                acc(*a, &|g| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += gy[i * n + j] * db[p * n + j];
                            }
                            g[i * k + p] += s;
                        }
                    }
                });
                // dB = Aᵀ · dC
                acc(*b, &|g| {
                    for p in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += da[i * k + p] * gy[i * n + j];
                            }
                            g[p * n + j] += s;
                        }
                    }
                    #[cfg(feature = "corrupt-backward")]
                    {
                        g[0] += 1e-3;
                    }
                });
            }
            Op::Transpose { x } => {
                let (m, n) = {
                    let s = self.value(*x).shape();
                    (s[0], s[1])
                };
                acc(*x, &|g| {
                    for i in 0..m {
                        for j in 0..n {
                            g[i * n + j] += gy[j * m + i];
                        }
                    }
                });
            }
            Op::Relu { x } => {
                let dx = self.value(*x).data();
                acc(*x, &|g| {
                    for ((gi, v), &xi) in g.iter_mut().zip(gy).zip(dx) {
                        if xi > 0.0 {
                            *gi += v;
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                acc(*x, &|g| {
                    for ((gi, v), m) in g.iter_mut().zip(gy).zip(mask) {
                        *gi += v * m;
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = self.value(id).data();
                let shape = self.value(id).shape().to_vec();
                let axis = *axis;
                acc(*x, &|g| {
                    for_each_lane(&shape, axis, |lane| {
                        let dot: f64 = lane.iter().map(|&i| gy[i] * y[i]).sum();
                        for &i in lane {
                            g[i] += y[i] * (gy[i] - dot);
                        }
                    });
                });
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (t, d) = {
                    let s = self.value(*x).shape();
                    (s[0], s[1])
                };
                let src = self.value(*x).data();
                let gvals = self.value(*gamma).data();
                let eps = *eps;
                acc(*beta, &|g| {
                    for row in 0..t {
                        for j in 0..d {
                            g[j] += gy[row * d + j];
                        }
                    }
                });
                acc(*gamma, &|g| {
                    for row in 0..t {
                        let xs = &src[row * d..(row + 1) * d];
                        let (mean, var) = mean_var(xs);
                        let istd = 1.0 / (var + eps).sqrt();
                        for j in 0..d {
                            g[j] += gy[row * d + j] * (xs[j] - mean) * istd;
                        }
                    }
                });
                acc(*x, &|g| {
                    for row in 0..t {
                        let xs = &src[row * d..(row + 1) * d];
                        let (mean, var) = mean_var(xs);
                        let istd = 1.0 / (var + eps).sqrt();
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..d {
                            let xhat = (xs[j] - mean) * istd;
                            let dxhat = gy[row * d + j] * gvals[j];
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * xhat;
                        }
                        mean_dxhat /= d as f64;
                        mean_dxhat_xhat /= d as f64;
                        for j in 0..d {
                            let xhat = (xs[j] - mean) * istd;
                            let dxhat = gy[row * d + j] * gvals[j];
                            g[row * d + j] += istd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).shape()[1];
                acc(*table, &|g| {
                    for (row, &i) in ids.iter().enumerate() {
                        for j in 0..d {
                            g[i * d + j] += gy[row * d + j];
                        }
                    }
                });
            }
            Op::SliceCols { x, start, len } => {
                let n = self.value(*x).shape()[1];
                let m = self.value(*x).shape()[0];
                let (start, len) = (*start, *len);
                acc(*x, &|g| {
                    for i in 0..m {
                        for j in 0..len {
                            g[i * n + start + j] += gy[i * len + j];
                        }
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let m = self.value(id).shape()[0];
                let total = self.value(id).shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    let off = offset;
                    acc(p, &|g| {
                        for i in 0..m {
                            for j in 0..w {
                                g[i * w + j] += gy[i * total + off + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Sum { x } => {
                acc(*x, &|g| {
                    for gi in g.iter_mut() {
                        *gi += gy[0];
                    }
                });
            }
            Op::CrossEntropy { logits, targets, pad_id } => {
                let v = self.value(*logits).shape()[1];
                let src = self.value(*logits).data();
                let n_active = targets.iter().filter(|&&y| y != *pad_id).count() as f64;
                acc(*logits, &|g| {
                    for (row, &y) in targets.iter().enumerate() {
                        if y == *pad_id {
                            continue;
                        }
                        let xs = &src[row * v..(row + 1) * v];
                        let lse = log_sum_exp(xs);
                        for j in 0..v {
                            let p = (xs[j] - lse).exp();
                            let indicator = if j == y { 1.0 } else { 0.0 };
                            g[row * v + j] += gy[0] * (p - indicator) / n_active;
                        }
                    }
                });
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add { .. } => "add",
        Op::AddConst { .. } => "add_const",
        Op::AddBias { .. } => "add_bias",
        Op::Scale { .. } => "scale",
        Op::Mul { .. } => "mul",
        Op::MatMul { .. } => "matmul",
        Op::Transpose { .. } => "transpose",
        Op::Relu { .. } => "relu",
        Op::Dropout { .. } => "dropout",
        Op::Softmax { .. } => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Embedding { .. } => "embedding",
        Op::SliceCols { .. } => "slice_cols",
        Op::ConcatCols { .. } => "concat_cols",
        Op::Sum { .. } => "sum",
        Op::CrossEntropy { .. } => "cross_entropy",
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

fn add_assign(g: &mut [f64], gy: &[f64]) {
    for (gi, v) in g.iter_mut().zip(gy) {
        *gi += v;
    }
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

fn lane_max(data: &[f64], lane: &[usize]) -> f64 {
    lane.iter().map(|&i| data[i]).fold(f64::NEG_INFINITY, f64::max)
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Visits every 1-d lane of `shape` along `axis`, passing flat indices.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(&[usize])) {
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut lane = vec![0usize; axis_len];
    for o in 0..outer {
        for i in 0..inner {
            for (j, slot) in lane.iter_mut().enumerate() {
                *slot = o * axis_len * inner + j * inner + i;
            }
            f(&lane);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, rows: usize, cols: usize, data: Vec<f64>) -> NodeId {
        tape.leaf(Tensor::matrix(rows, cols, data).unwrap().with_requires_grad(true))
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = leaf(&mut tape, 2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let b = leaf(&mut tape, 2, 2, vec![5.0, 6.0, 7.0, 8.0]);
        let c = tape.matmul(i2, b).unwrap();
        assert_eq!(tape.value(c).data(), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn matmul_hand_computed() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&mut tape, 2, 1, vec![1.0, 1.0]);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_zeros_annihilates() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3]).unwrap());
        let b = leaf(&mut tape, 3, 4, (0..12).map(|v| v as f64).collect());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 4]);
        assert!(tape.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3]).unwrap());
        let b = tape.leaf(Tensor::zeros(vec![4, 2]).unwrap());
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "got: {msg}");
    }

    #[test]
    fn softmax_symmetry_and_closed_form() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, 1, 2, vec![0.0, 0.0]);
        let s = tape.softmax(x, 1).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);

        let y = leaf(&mut tape, 1, 2, vec![1.0f64.ln(), 3.0f64.ln()]);
        let s2 = tape.softmax(y, 1).unwrap();
        let out = tape.value(s2).data();
        assert!((out[0] - 0.25).abs() < 1e-15);
        assert!((out[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_shift_invariance_and_normalization() {
        let mut rng = RngStream::seed_from(21);
        let mut tape = Tape::new();
        let vals: Vec<f64> = (0..12).map(|_| rng.uniform(-4.0, 4.0)).collect();
        let shifted: Vec<f64> = vals.iter().map(|v| v + 123.456).collect();
        let a = leaf(&mut tape, 3, 4, vals);
        let b = leaf(&mut tape, 3, 4, shifted);
        let sa = tape.softmax(a, 1).unwrap();
        let sb = tape.softmax(b, 1).unwrap();
        for (x, y) in tape.value(sa).data().iter().zip(tape.value(sb).data()) {
            assert!((x - y).abs() < 1e-12);
        }
        for row in 0..3 {
            let sum: f64 = tape.value(sa).data()[row * 4..(row + 1) * 4].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_axis_zero_normalizes_columns() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, 2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let s = tape.softmax(x, 0).unwrap();
        let out = tape.value(s).data();
        for col in 0..3 {
            let sum = out[col] + out[3 + col];
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zeroed() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, 1, 3, vec![5.0, 5.0, 5.0]);
        let gamma = tape.leaf(Tensor::ones(vec![3]).unwrap());
        let beta = tape.leaf(Tensor::zeros(vec![3]).unwrap());
        let y = tape.layer_norm(x, gamma, beta, 1e-9).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_two_point_row() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, 1, 2, vec![1.0, 3.0]);
        let gamma = tape.leaf(Tensor::ones(vec![2]).unwrap());
        let beta = tape.leaf(Tensor::zeros(vec![2]).unwrap());
        let y = tape.layer_norm(x, gamma, beta, 1e-30).unwrap();
        let out = tape.value(y).data();
        assert!((out[0] + 1.0).abs() < 1e-12);
        assert!((out[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_beta_dominates_when_gamma_zero() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, 2, 2, vec![0.3, -9.0, 4.0, 4.5]);
        let gamma = tape.leaf(Tensor::zeros(vec![2]).unwrap());
        let beta = tape.leaf(Tensor::vector(vec![2.0, 2.0]).unwrap());
        let y = tape.layer_norm(x, gamma, beta, 1e-9).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn layer_norm_standardizes_random_rows() {
        let mut rng = RngStream::seed_from(9);
        let mut tape = Tape::new();
        let x = leaf(&mut tape, 4, 8, (0..32).map(|_| rng.uniform(-3.0, 3.0)).collect());
        let gamma = tape.leaf(Tensor::ones(vec![8]).unwrap());
        let beta = tape.leaf(Tensor::zeros(vec![8]).unwrap());
        let y = tape.layer_norm(x, gamma, beta, 1e-9).unwrap();
        let out = tape.value(y).data();
        for row in 0..4 {
            let xs = &out[row * 8..(row + 1) * 8];
            let (mean, var) = mean_var(xs);
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, 1, 3, vec![-1.0, 0.0, 2.0]);
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn dropout_zero_p_is_exact_identity() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, 2, 2, vec![0.1, -0.2, 0.3, -0.4]);
        let y = tape.dropout(x, 0.0, Mode::Train, 99).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn dropout_eval_returns_input_node() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, 2, 2, vec![0.1, -0.2, 0.3, -0.4]);
        let y = tape.dropout(x, 0.7, Mode::Eval, 99).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_rejects_p_of_one() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, 1, 1, vec![1.0]);
        assert!(matches!(tape.dropout(x, 1.0, Mode::Train, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn dropout_monte_carlo_expectation() {
        // Mean over 1e5 seeded trials of dropout(ones, 0.5, train) must be
        // within [0.99, 1.01] elementwise.
        let trials = 100_000;
        let width = 8;
        let mut sums = vec![0.0; width];
        for seed in 0..trials {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::ones(vec![1, width]).unwrap());
            let y = tape.dropout(x, 0.5, Mode::Train, seed).unwrap();
            for (s, v) in sums.iter_mut().zip(tape.value(y).data()) {
                *s += v;
            }
        }
        for s in sums {
            let mean = s / trials as f64;
            assert!((0.99..=1.01).contains(&mean), "mean {mean} outside [0.99, 1.01]");
        }
    }

    #[test]
    fn backward_square_and_fanout() {
        // f(x) = x·x at x=3 → grad 6
        let mut tape = Tape::new();
        let x = leaf(&mut tape, 1, 1, vec![3.0]);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);

        // f(x, y) = x + x + y → grad_x = 2, grad_y = 1
        let mut tape = Tape::new();
        let x = leaf(&mut tape, 1, 1, vec![1.5]);
        let y = leaf(&mut tape, 1, 1, vec![-0.5]);
        let xx = tape.add(x, x).unwrap();
        let xxy = tape.add(xx, y).unwrap();
        let loss = tape.sum(xxy).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0]);
        assert_eq!(tape.grad(y).unwrap(), &[1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, 1, 2, vec![1.0, 2.0]);
        let y = tape.relu(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        // uniform logits over V=4 → loss = ln 4 for any targets
        let mut tape = Tape::new();
        let logits = leaf(&mut tape, 3, 4, vec![0.7; 12]);
        let loss = tape.cross_entropy(logits, &[0, 2, 3], usize::MAX).unwrap();
        assert!((tape.value(loss).data()[0] - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_ignores_pad_positions() {
        let pad = 0;
        let mut tape = Tape::new();
        let logits = leaf(&mut tape, 2, 3, vec![0.2, 1.1, -0.4, 9.0, 9.0, 9.0]);
        let l1 = tape.cross_entropy(logits, &[1, pad], pad).unwrap();
        let mut tape2 = Tape::new();
        let logits2 = leaf(&mut tape2, 1, 3, vec![0.2, 1.1, -0.4]);
        let l2 = tape2.cross_entropy(logits2, &[1], pad).unwrap();
        assert_eq!(tape.value(l1).data()[0], tape2.value(l2).data()[0]);
    }

    #[test]
    fn cross_entropy_all_pad_is_contract_error() {
        let mut tape = Tape::new();
        let logits = leaf(&mut tape, 2, 3, vec![0.0; 6]);
        assert!(matches!(tape.cross_entropy(logits, &[0, 0], 0), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, 1, 1, vec![1e308]);
        let y = tape.scale(x, 10.0);
        assert!(matches!(y, Err(Error::Data(_))));
    }

    #[test]
    fn identical_seeds_replay_identical_tapes() {
        let run = |seed: u64| -> Vec<f64> {
            let mut rng = RngStream::seed_from(seed);
            let mut tape = Tape::new();
            let x = tape
                .leaf(Tensor::uniform(vec![3, 3], -1.0, 1.0, &mut rng).unwrap());
            let d = tape.dropout(x, 0.3, Mode::Train, rng.next_seed()).unwrap();
            let s = tape.softmax(d, 1).unwrap();
            tape.value(s).data().to_vec()
        };
        assert_eq!(run(42), run(42));
        assert_ne!(run(42), run(43));
    }
}
