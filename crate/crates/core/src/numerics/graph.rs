//! Reverse-mode autodiff on a flat tape of dense f64 tensors.
//!
//! Tensors are immutable after creation; gradients live in per-node buffers
//! that are populated only by [`Graph::backward`]. Every forward op checks its
//! output for non-finite values and fails loudly instead of propagating NaN.

use crate::{Error, Result};

/// Identity of a node in the tape.
pub type NodeId = usize;

/// Handle to a tensor stored in a [`Graph`]. Cheap to copy; the data, shape
/// and gradient buffer live in the graph node it points at.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tensor {
    pub(crate) id: NodeId,
}

impl Tensor {
    pub fn id(&self) -> NodeId {
        self.id
    }
}

/// Causal mask fill value. A large negative constant rather than -inf so that
/// max-subtraction inside softmax never produces inf - inf.
pub const NEG_MASK: f64 = -1e30;

const LAYER_NORM_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    AddBias { a: NodeId, bias: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    Relu { a: NodeId },
    Gelu { a: NodeId },
    SoftmaxTemp { a: NodeId, tau: f64 },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    Transpose { a: NodeId },
    Sum { a: NodeId },
    Mean { a: NodeId },
    ConcatCols { parts: Vec<NodeId> },
    ConcatRows { parts: Vec<NodeId> },
    SliceRows { a: NodeId, start: usize },
    GatherRows { a: NodeId, rows: Vec<usize> },
    ScatterAddRows { src: NodeId, rows: Vec<usize> },
    GatherElems { a: NodeId, idx: Vec<(usize, usize)> },
    RowScale { x: NodeId, scale: NodeId },
    Embed { table: NodeId, ids: Vec<usize> },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, smoothing: f64 },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// A topologically ordered tape of op records. Ops only ever reference nodes
/// created before them, so a single reverse sweep visits each node once.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
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

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op, name: &'static str) -> Result<Tensor> {
        debug_assert_eq!(data.len(), numel(&shape));
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let id = self.nodes.len();
        self.nodes.push(Node { data, shape, grad: None, op });
        Ok(Tensor { id })
    }

    /// Insert a leaf tensor (parameter, input or constant).
    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<Tensor> {
        if data.len() != numel(&shape) {
            return Err(Error::InvalidParameter(format!(
                "leaf data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        self.push(data, shape, Op::Leaf, "leaf")
    }

    /// Leaf holding a single scalar.
    pub fn scalar(&mut self, v: f64) -> Result<Tensor> {
        self.leaf(vec![v], vec![1])
    }

    pub fn data(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.id].data
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.id].shape
    }

    pub fn grad(&self, t: Tensor) -> Option<&[f64]> {
        self.nodes[t.id].grad.as_deref()
    }

    /// Value of a scalar tensor.
    pub fn value(&self, t: Tensor) -> f64 {
        debug_assert_eq!(self.nodes[t.id].data.len(), 1);
        self.nodes[t.id].data[0]
    }

    fn dims2(&self, t: Tensor, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(t);
        if s.len() != 2 {
            return Err(Error::ShapeMismatch { op, lhs: s.to_vec(), rhs: vec![] });
        }
        Ok((s[0], s[1]))
    }

    // ── forward ops ─────────────────────────────────────────────────────

    /// Standard matrix product of 2-D tensors.
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let av = &self.nodes[a.id].data;
        let bv = &self.nodes[b.id].data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &aip) in arow.iter().enumerate() {
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &bpj) in orow.iter_mut().zip(brow.iter()) {
                    *o += aip * bpj;
                }
            }
        }
        self.push(out, vec![m, n], Op::Matmul { a: a.id, b: b.id }, "matmul")
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self.nodes[a.id]
            .data
            .iter()
            .zip(self.nodes[b.id].data.iter())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Add { a: a.id, b: b.id }, "add")
    }

    /// Row-broadcast bias add: `[m×d] + [d]`. The only broadcast in the crate.
    pub fn add_bias(&mut self, a: Tensor, bias: Tensor) -> Result<Tensor> {
        let (m, d) = self.dims2(a, "add_bias")?;
        if self.shape(bias) != [d] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let bv = &self.nodes[bias.id].data;
        let mut out = self.nodes[a.id].data.clone();
        for r in 0..m {
            for (o, &b) in out[r * d..(r + 1) * d].iter_mut().zip(bv.iter()) {
                *o += b;
            }
        }
        self.push(out, vec![m, d], Op::AddBias { a: a.id, bias: bias.id }, "add_bias")
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self.nodes[a.id]
            .data
            .iter()
            .zip(self.nodes[b.id].data.iter())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Mul { a: a.id, b: b.id }, "mul")
    }

    /// Multiply every entry by a constant.
    pub fn scale(&mut self, a: Tensor, c: f64) -> Result<Tensor> {
        let out: Vec<f64> = self.nodes[a.id].data.iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Scale { a: a.id, c }, "scale")
    }

    pub fn relu(&mut self, a: Tensor) -> Result<Tensor> {
        let out: Vec<f64> = self.nodes[a.id].data.iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Relu { a: a.id }, "relu")
    }

    /// Exact (erf-based) GeLU.
    pub fn gelu(&mut self, a: Tensor) -> Result<Tensor> {
        let out: Vec<f64> = self.nodes[a.id].data.iter().map(|&x| gelu_exact(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Gelu { a: a.id }, "gelu")
    }

    /// Temperature softmax over the last axis: `softmax(a / tau)` per row,
    /// computed with max-subtraction.
    pub fn softmax_temp(&mut self, a: Tensor, tau: f64) -> Result<Tensor> {
        if !(tau > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "softmax temperature must be positive, got {tau}"
            )));
        }
        let (rows, n) = self.dims2(a, "softmax_temp")?;
        let av = &self.nodes[a.id].data;
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let row = &av[r * n..(r + 1) * n];
            let orow = &mut out[r * n..(r + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &z) in orow.iter_mut().zip(row.iter()) {
                let e = ((z - max) / tau).exp();
                *o = e;
                sum += e;
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        self.push(out, vec![rows, n], Op::SoftmaxTemp { a: a.id, tau }, "softmax_temp")
    }

    /// Per-row normalization to zero mean / unit variance, then affine by
    /// `gain` and `bias` (both `[d]`).
    pub fn layer_norm(&mut self, x: Tensor, gain: Tensor, bias: Tensor) -> Result<Tensor> {
        let (m, d) = self.dims2(x, "layer_norm")?;
        if d < 2 {
            return Err(Error::InvalidParameter(format!(
                "layer_norm requires feature dimension >= 2, got {d}"
            )));
        }
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let xv = &self.nodes[x.id].data;
        let gv = &self.nodes[gain.id].data;
        let bv = &self.nodes[bias.id].data;
        let mut out = vec![0.0; m * d];
        for r in 0..m {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * inv_std * gv[j] + bv[j];
            }
        }
        self.push(
            out,
            vec![m, d],
            Op::LayerNorm { x: x.id, gain: gain.id, bias: bias.id },
            "layer_norm",
        )
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, a: Tensor) -> Result<Tensor> {
        let (m, n) = self.dims2(a, "transpose")?;
        let av = &self.nodes[a.id].data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        self.push(out, vec![n, m], Op::Transpose { a: a.id }, "transpose")
    }

    /// Sum of all entries (scalar).
    pub fn sum(&mut self, a: Tensor) -> Result<Tensor> {
        let s = self.nodes[a.id].data.iter().sum();
        self.push(vec![s], vec![1], Op::Sum { a: a.id }, "sum")
    }

    /// Mean of all entries (scalar).
    pub fn mean(&mut self, a: Tensor) -> Result<Tensor> {
        let n = self.nodes[a.id].data.len();
        let s: f64 = self.nodes[a.id].data.iter().sum();
        self.push(vec![s / n as f64], vec![1], Op::Mean { a: a.id }, "mean")
    }

    /// Horizontal concatenation of 2-D tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::InvalidParameter("concat_cols of zero tensors".into()));
        }
        let (m, _) = self.dims2(parts[0], "concat_cols")?;
        let mut total = 0;
        for &p in parts {
            let (mp, np) = self.dims2(p, "concat_cols")?;
            if mp != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            total += np;
        }
        let mut out = vec![0.0; m * total];
        let mut col = 0;
        for &p in parts {
            let np = self.shape(p)[1];
            let pv = &self.nodes[p.id].data;
            for r in 0..m {
                out[r * total + col..r * total + col + np].copy_from_slice(&pv[r * np..(r + 1) * np]);
            }
            col += np;
        }
        let ids = parts.iter().map(|t| t.id).collect();
        self.push(out, vec![m, total], Op::ConcatCols { parts: ids }, "concat_cols")
    }

    /// Vertical concatenation of 2-D tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::InvalidParameter("concat_rows of zero tensors".into()));
        }
        let (_, d) = self.dims2(parts[0], "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (mp, dp) = self.dims2(p, "concat_rows")?;
            if dp != d {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += mp;
        }
        let mut out = Vec::with_capacity(rows * d);
        for &p in parts {
            out.extend_from_slice(&self.nodes[p.id].data);
        }
        let ids = parts.iter().map(|t| t.id).collect();
        self.push(out, vec![rows, d], Op::ConcatRows { parts: ids }, "concat_rows")
    }

    /// Contiguous row slice `[start, start+len)` of a 2-D tensor.
    pub fn slice_rows(&mut self, a: Tensor, start: usize, len: usize) -> Result<Tensor> {
        let (m, d) = self.dims2(a, "slice_rows")?;
        if start + len > m {
            return Err(Error::InvalidParameter(format!(
                "slice_rows [{start}, {}) out of bounds for {m} rows",
                start + len
            )));
        }
        let out = self.nodes[a.id].data[start * d..(start + len) * d].to_vec();
        self.push(out, vec![len, d], Op::SliceRows { a: a.id, start }, "slice_rows")
    }

    /// Select rows by index (duplicates allowed).
    pub fn gather_rows(&mut self, a: Tensor, rows: &[usize]) -> Result<Tensor> {
        let (m, d) = self.dims2(a, "gather_rows")?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::InvalidParameter(format!(
                "gather_rows index {bad} out of bounds for {m} rows"
            )));
        }
        let av = &self.nodes[a.id].data;
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&av[r * d..(r + 1) * d]);
        }
        self.push(
            out,
            vec![rows.len(), d],
            Op::GatherRows { a: a.id, rows: rows.to_vec() },
            "gather_rows",
        )
    }

    /// Scatter-add rows of `src` into a zero `[out_rows × d]` tensor:
    /// `out[rows[j]] += src[j]`.
    pub fn scatter_add_rows(&mut self, src: Tensor, rows: &[usize], out_rows: usize) -> Result<Tensor> {
        let (m, d) = self.dims2(src, "scatter_add_rows")?;
        if rows.len() != m {
            return Err(Error::InvalidParameter(format!(
                "scatter_add_rows: {} indices for {m} source rows",
                rows.len()
            )));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= out_rows) {
            return Err(Error::InvalidParameter(format!(
                "scatter_add_rows index {bad} out of bounds for {out_rows} rows"
            )));
        }
        let sv = &self.nodes[src.id].data;
        let mut out = vec![0.0; out_rows * d];
        for (j, &r) in rows.iter().enumerate() {
            for (o, &s) in out[r * d..(r + 1) * d].iter_mut().zip(sv[j * d..(j + 1) * d].iter()) {
                *o += s;
            }
        }
        self.push(
            out,
            vec![out_rows, d],
            Op::ScatterAddRows { src: src.id, rows: rows.to_vec() },
            "scatter_add_rows",
        )
    }

    /// Gather individual `(row, col)` entries of a 2-D tensor into a vector.
    pub fn gather_elems(&mut self, a: Tensor, idx: &[(usize, usize)]) -> Result<Tensor> {
        let (m, n) = self.dims2(a, "gather_elems")?;
        if let Some(&bad) = idx.iter().find(|&&(r, c)| r >= m || c >= n) {
            return Err(Error::InvalidParameter(format!(
                "gather_elems index {bad:?} out of bounds for [{m}, {n}]"
            )));
        }
        let av = &self.nodes[a.id].data;
        let out: Vec<f64> = idx.iter().map(|&(r, c)| av[r * n + c]).collect();
        self.push(
            out,
            vec![idx.len()],
            Op::GatherElems { a: a.id, idx: idx.to_vec() },
            "gather_elems",
        )
    }

    /// Scale row `r` of `x` by `scale[r]`.
    pub fn row_scale(&mut self, x: Tensor, scale: Tensor) -> Result<Tensor> {
        let (m, d) = self.dims2(x, "row_scale")?;
        if self.shape(scale) != [m] {
            return Err(Error::ShapeMismatch {
                op: "row_scale",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(scale).to_vec(),
            });
        }
        let xv = &self.nodes[x.id].data;
        let sv = &self.nodes[scale.id].data;
        let mut out = vec![0.0; m * d];
        for r in 0..m {
            let s = sv[r];
            for j in 0..d {
                out[r * d + j] = xv[r * d + j] * s;
            }
        }
        self.push(out, vec![m, d], Op::RowScale { x: x.id, scale: scale.id }, "row_scale")
    }

    /// Row lookup into an embedding table `[vocab × d]`.
    pub fn embed(&mut self, table: Tensor, ids: &[usize]) -> Result<Tensor> {
        let (v, d) = self.dims2(table, "embed")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::InvalidParameter(format!(
                "embed id {bad} out of bounds for vocab {v}"
            )));
        }
        let tv = &self.nodes[table.id].data;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        self.push(
            out,
            vec![ids.len(), d],
            Op::Embed { table: table.id, ids: ids.to_vec() },
            "embed",
        )
    }

    /// Mean token cross-entropy of `logits [s × vocab]` against integer
    /// targets, natural log, with optional label smoothing.
    pub fn cross_entropy(&mut self, logits: Tensor, targets: &[usize], smoothing: f64) -> Result<Tensor> {
        let (s, v) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != s {
            return Err(Error::InvalidParameter(format!(
                "cross_entropy: {} targets for {s} rows",
                targets.len()
            )));
        }
        if s == 0 {
            return Err(Error::EmptyBatch);
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::InvalidParameter(format!(
                "cross_entropy target {bad} out of bounds for vocab {v}"
            )));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::InvalidParameter(format!(
                "label smoothing must be in [0, 1), got {smoothing}"
            )));
        }
        let lv = &self.nodes[logits.id].data;
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &lv[r * v..(r + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
            // -[ (1-eps) log p_t + eps/V sum_v log p_v ]
            let mut loss = -(1.0 - smoothing) * (row[t] - lse);
            if smoothing > 0.0 {
                let sum_logp: f64 = row.iter().map(|&z| z - lse).sum();
                loss -= smoothing / v as f64 * sum_logp;
            }
            total += loss;
        }
        self.push(
            vec![total / s as f64],
            vec![1],
            Op::CrossEntropy { logits: logits.id, targets: targets.to_vec(), smoothing },
            "cross_entropy",
        )
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Populate grad buffers for every node reachable from `loss`,
    /// accumulating across fan-out. `loss` must be scalar.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        if self.nodes[loss.id].data.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.id].shape.clone()));
        }
        for node in self.nodes.iter_mut() {
            node.grad = Some(vec![0.0; node.data.len()]);
        }
        self.nodes[loss.id].grad.as_mut().unwrap()[0] = 1.0;

        for i in (0..=loss.id).rev() {
            let g = self.nodes[i].grad.take().unwrap();
            self.step_backward(i, &g);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn grad_mut(&mut self, id: NodeId) -> &mut [f64] {
        self.nodes[id].grad.as_mut().unwrap()
    }

    fn step_backward(&mut self, i: NodeId, g: &[f64]) {
        // Dispatch on a borrowed op; rules that need input data read it
        // through raw indices to keep the borrow checker happy.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let m = self.nodes[a].shape[0];
                let k = self.nodes[a].shape[1];
                let n = self.nodes[b].shape[1];
                // da = g · bᵀ
                {
                    let mut da = vec![0.0; m * k];
                    let bv = &self.nodes[b].data;
                    for i2 in 0..m {
                        let grow = &g[i2 * n..(i2 + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            let mut acc = 0.0;
                            for (gv, bv2) in grow.iter().zip(brow.iter()) {
                                acc += gv * bv2;
                            }
                            da[i2 * k + p] = acc;
                        }
                    }
                    accumulate(self.grad_mut(a), &da);
                }
                // db = aᵀ · g
                {
                    let mut db = vec![0.0; k * n];
                    let av = &self.nodes[a].data;
                    for i2 in 0..m {
                        let grow = &g[i2 * n..(i2 + 1) * n];
                        for p in 0..k {
                            let aip = av[i2 * k + p];
                            let drow = &mut db[p * n..(p + 1) * n];
                            for (d, gv) in drow.iter_mut().zip(grow.iter()) {
                                *d += aip * gv;
                            }
                        }
                    }
                    accumulate(self.grad_mut(b), &db);
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                accumulate(self.grad_mut(a), g);
                accumulate(self.grad_mut(b), g);
            }
            Op::AddBias { a, bias } => {
                let (a, bias) = (*a, *bias);
                accumulate(self.grad_mut(a), g);
                let d = self.nodes[bias].data.len();
                let rows = g.len() / d;
                let gb = self.grad_mut(bias);
                for r in 0..rows {
                    for j in 0..d {
                        gb[j] += g[r * d + j];
                    }
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let da: Vec<f64> = g.iter().zip(self.nodes[b].data.iter()).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = g.iter().zip(self.nodes[a].data.iter()).map(|(g, x)| g * x).collect();
                accumulate(self.grad_mut(a), &da);
                accumulate(self.grad_mut(b), &db);
            }
            Op::Scale { a, c } => {
                let (a, c) = (*a, *c);
                let da: Vec<f64> = g.iter().map(|g| g * c).collect();
                accumulate(self.grad_mut(a), &da);
            }
            Op::Relu { a } => {
                let a = *a;
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[a].data.iter())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(self.grad_mut(a), &da);
            }
            Op::Gelu { a } => {
                let a = *a;
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[a].data.iter())
                    .map(|(g, &x)| g * gelu_grad(x))
                    .collect();
                accumulate(self.grad_mut(a), &da);
            }
            Op::SoftmaxTemp { a, tau } => {
                let (a, tau) = (*a, *tau);
                let sv = &self.nodes[i].data;
                let n = self.nodes[i].shape[1];
                let rows = self.nodes[i].shape[0];
                let mut da = vec![0.0; sv.len()];
                for r in 0..rows {
                    let s = &sv[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = s.iter().zip(gr.iter()).map(|(s, g)| s * g).sum();
                    for j in 0..n {
                        da[r * n + j] = s[j] * (gr[j] - dot) / tau;
                    }
                }
                accumulate(self.grad_mut(a), &da);
            }
            Op::LayerNorm { x, gain, bias } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let d = self.nodes[gain].data.len();
                let rows = self.nodes[x].data.len() / d;
                let mut dx = vec![0.0; rows * d];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                {
                    let xv = &self.nodes[x].data;
                    let gv = &self.nodes[gain].data;
                    for r in 0..rows {
                        let row = &xv[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv_std).collect();
                        let mut dxhat = vec![0.0; d];
                        for j in 0..d {
                            dgain[j] += gr[j] * xhat[j];
                            dbias[j] += gr[j];
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let sum_dxhat: f64 = dxhat.iter().sum();
                        let sum_dxhat_xhat: f64 = dxhat.iter().zip(xhat.iter()).map(|(a, b)| a * b).sum();
                        let df = d as f64;
                        for j in 0..d {
                            dx[r * d + j] =
                                inv_std / df * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        }
                    }
                }
                accumulate(self.grad_mut(x), &dx);
                accumulate(self.grad_mut(gain), &dgain);
                accumulate(self.grad_mut(bias), &dbias);
            }
            Op::Transpose { a } => {
                let a = *a;
                let n = self.nodes[i].shape[0];
                let m = self.nodes[i].shape[1];
                let mut da = vec![0.0; m * n];
                for r in 0..n {
                    for c in 0..m {
                        da[c * n + r] = g[r * m + c];
                    }
                }
                accumulate(self.grad_mut(a), &da);
            }
            Op::Sum { a } => {
                let a = *a;
                let da = vec![g[0]; self.nodes[a].data.len()];
                accumulate(self.grad_mut(a), &da);
            }
            Op::Mean { a } => {
                let a = *a;
                let n = self.nodes[a].data.len();
                let da = vec![g[0] / n as f64; n];
                accumulate(self.grad_mut(a), &da);
            }
            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                let total = self.nodes[i].shape[1];
                let rows = self.nodes[i].shape[0];
                let mut col = 0;
                for p in parts {
                    let np = self.nodes[p].shape[1];
                    let mut dp = vec![0.0; rows * np];
                    for r in 0..rows {
                        dp[r * np..(r + 1) * np].copy_from_slice(&g[r * total + col..r * total + col + np]);
                    }
                    accumulate(self.grad_mut(p), &dp);
                    col += np;
                }
            }
            Op::ConcatRows { parts } => {
                let parts = parts.clone();
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p].data.len();
                    let dp = g[offset..offset + len].to_vec();
                    accumulate(self.grad_mut(p), &dp);
                    offset += len;
                }
            }
            Op::SliceRows { a, start } => {
                let (a, start) = (*a, *start);
                let d = self.nodes[i].shape[1];
                let ga = self.grad_mut(a);
                for (j, gv) in g.iter().enumerate() {
                    ga[start * d + j] += gv;
                }
            }
            Op::GatherRows { a, rows } => {
                let a = *a;
                let rows = rows.clone();
                let d = self.nodes[i].shape[1];
                let ga = self.grad_mut(a);
                for (j, &r) in rows.iter().enumerate() {
                    for c in 0..d {
                        ga[r * d + c] += g[j * d + c];
                    }
                }
            }
            Op::ScatterAddRows { src, rows } => {
                let src = *src;
                let rows = rows.clone();
                let d = self.nodes[i].shape[1];
                let mut ds = vec![0.0; rows.len() * d];
                for (j, &r) in rows.iter().enumerate() {
                    ds[j * d..(j + 1) * d].copy_from_slice(&g[r * d..(r + 1) * d]);
                }
                accumulate(self.grad_mut(src), &ds);
            }
            Op::GatherElems { a, idx } => {
                let a = *a;
                let idx = idx.clone();
                let n = self.nodes[a].shape[1];
                let ga = self.grad_mut(a);
                for (j, &(r, c)) in idx.iter().enumerate() {
                    ga[r * n + c] += g[j];
                }
            }
            Op::RowScale { x, scale } => {
                let (x, scale) = (*x, *scale);
                let d = self.nodes[i].shape[1];
                let rows = self.nodes[i].shape[0];
                let mut dx = vec![0.0; rows * d];
                let mut ds = vec![0.0; rows];
                {
                    let xv = &self.nodes[x].data;
                    let sv = &self.nodes[scale].data;
                    for r in 0..rows {
                        let s = sv[r];
                        let mut acc = 0.0;
                        for c in 0..d {
                            dx[r * d + c] = g[r * d + c] * s;
                            acc += g[r * d + c] * xv[r * d + c];
                        }
                        ds[r] = acc;
                    }
                }
                accumulate(self.grad_mut(x), &dx);
                accumulate(self.grad_mut(scale), &ds);
            }
            Op::Embed { table, ids } => {
                let table = *table;
                let ids = ids.clone();
                let d = self.nodes[i].shape[1];
                let gt = self.grad_mut(table);
                for (j, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        gt[id * d + c] += g[j * d + c];
                    }
                }
            }
            Op::CrossEntropy { logits, targets, smoothing } => {
                let logits = *logits;
                let targets = targets.clone();
                let smoothing = *smoothing;
                let v = self.nodes[logits].shape[1];
                let s = targets.len();
                let mut dl = vec![0.0; s * v];
                {
                    let lv = &self.nodes[logits].data;
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &lv[r * v..(r + 1) * v];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
                        for c in 0..v {
                            let p = (row[c] - max).exp() / sum;
                            let q = if c == t { 1.0 - smoothing } else { 0.0 } + smoothing / v as f64;
                            dl[r * v + c] = g[0] * (p - q) / s as f64;
                        }
                    }
                }
                accumulate(self.grad_mut(logits), &dl);
            }
        }
    }
}

fn accumulate(target: &mut [f64], src: &[f64]) {
    for (t, s) in target.iter_mut().zip(src.iter()) {
        *t += s;
    }
}

/// Exact GeLU: `0.5 x (1 + erf(x / sqrt(2)))`.
pub fn gelu_exact(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let phi_cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let phi_pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi_cdf + x * phi_pdf
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b.iter()).enumerate() {
            assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
        }
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let eye = g.leaf(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]).unwrap();
        let b = g.leaf(vec![3.0, 4.0, 5.0, 6.0], vec![2, 2]).unwrap();
        let c = g.matmul(eye, b).unwrap();
        assert_close(g.data(c), &[3.0, 4.0, 5.0, 6.0], 0.0);
    }

    #[test]
    fn matmul_scalar() {
        let mut g = Graph::new();
        let a = g.leaf(vec![2.0], vec![1, 1]).unwrap();
        let b = g.leaf(vec![3.0], vec![1, 1]).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.data(c), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = 42u64;
        let mut next = || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (rng >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let a: Vec<f64> = (0..20).map(|_| next()).collect();
        let b: Vec<f64> = (0..15).map(|_| next()).collect();
        let mut expect = vec![0.0; 4 * 3];
        for i in 0..4 {
            for j in 0..3 {
                let mut s = 0.0;
                for p in 0..5 {
                    s += a[i * 5 + p] * b[p * 3 + j];
                }
                expect[i * 3 + j] = s;
            }
        }
        let mut g = Graph::new();
        let ta = g.leaf(a, vec![4, 5]).unwrap();
        let tb = g.leaf(b, vec![5, 3]).unwrap();
        let c = g.matmul(ta, tb).unwrap();
        assert_close(g.data(c), &expect, 1e-12);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(vec![0.0; 6], vec![2, 3]).unwrap();
        let b = g.leaf(vec![0.0; 8], vec![4, 2]).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let mut g = Graph::new();
        let a = g.leaf(vec![0.7; 8], vec![2, 4]).unwrap();
        for tau in [0.01, 1.0, 55.0] {
            let s = g.softmax_temp(a, tau).unwrap();
            assert_close(g.data(s), &[0.25; 8], 1e-12);
        }
    }

    #[test]
    fn softmax_matches_displayed_two_expert_weights() {
        let mut g = Graph::new();
        let a = g.leaf(vec![2.01, 2.64], vec![1, 2]).unwrap();
        let s = g.softmax_temp(a, 1.0).unwrap();
        let out = g.data(s);
        assert!((out[0] - 0.347).abs() < 0.005 && (out[1] - 0.653).abs() < 0.005);
        assert!((out[0] - 0.35).abs() < 0.005 && (out[1] - 0.65).abs() < 0.005);
    }

    #[test]
    fn softmax_high_temperature_flattens() {
        let mut g = Graph::new();
        let a = g.leaf(vec![1.0, 0.0], vec![1, 2]).unwrap();
        let s = g.softmax_temp(a, 100.0).unwrap();
        let out = g.data(s);
        assert!((out[0] - 0.5).abs() < 0.01 && (out[1] - 0.5).abs() < 0.01);
    }

    #[test]
    fn softmax_rejects_nonpositive_temperature() {
        let mut g = Graph::new();
        let a = g.leaf(vec![1.0, 0.0], vec![1, 2]).unwrap();
        assert!(g.softmax_temp(a, 0.0).is_err());
        assert!(g.softmax_temp(a, -1.0).is_err());
    }

    #[test]
    fn relu_values() {
        let mut g = Graph::new();
        let a = g.leaf(vec![-1.0, 2.5], vec![1, 2]).unwrap();
        let r = g.relu(a).unwrap();
        assert_close(g.data(r), &[0.0, 2.5], 0.0);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(vec![3.0; 4], vec![1, 4]).unwrap();
        let gain = g.leaf(vec![1.0; 4], vec![4]).unwrap();
        let bias = g.leaf(vec![0.0; 4], vec![4]).unwrap();
        let y = g.layer_norm(x, gain, bias).unwrap();
        for &v in g.data(y) {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_already_normalized_row() {
        let mut g = Graph::new();
        let x = g.leaf(vec![1.0, -1.0], vec![1, 2]).unwrap();
        let gain = g.leaf(vec![1.0; 2], vec![2]).unwrap();
        let bias = g.leaf(vec![0.0; 2], vec![2]).unwrap();
        let y = g.layer_norm(x, gain, bias).unwrap();
        assert_close(g.data(y), &[1.0, -1.0], 1e-4);
    }

    #[test]
    fn layer_norm_matches_direct_formula() {
        let row = vec![0.3, -1.2, 2.2, 0.9, -0.4];
        let d = row.len();
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let expect: Vec<f64> = row.iter().map(|&v| (v - mean) / (var + 1e-5).sqrt()).collect();

        let mut g = Graph::new();
        let x = g.leaf(row, vec![1, d]).unwrap();
        let gain = g.leaf(vec![1.0; d], vec![d]).unwrap();
        let bias = g.leaf(vec![0.0; d], vec![d]).unwrap();
        let y = g.layer_norm(x, gain, bias).unwrap();
        assert_close(g.data(y), &expect, 1e-9);
    }

    #[test]
    fn backward_square() {
        let mut g = Graph::new();
        let x = g.leaf(vec![3.0], vec![1]).unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        assert_close(g.grad(x).unwrap(), &[6.0], 1e-12);
    }

    #[test]
    fn backward_disconnected_param_gets_zero_grad() {
        let mut g = Graph::new();
        let x = g.leaf(vec![3.0], vec![1]).unwrap();
        let unused = g.leaf(vec![1.0, 2.0], vec![2]).unwrap();
        let loss = g.sum(x).unwrap();
        g.backward(loss).unwrap();
        assert_close(g.grad(unused).unwrap(), &[0.0, 0.0], 0.0);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.leaf(vec![1.0, 2.0], vec![2]).unwrap();
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn backward_accumulates_over_fanout() {
        let mut g = Graph::new();
        let x = g.leaf(vec![2.0], vec![1]).unwrap();
        let y = g.add(x, x).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        assert_close(g.grad(x).unwrap(), &[2.0], 0.0);
    }

    #[test]
    fn gelu_matches_erf_series_oracle() {
        // Oracle: erf via its Maclaurin series, summed in f64 until terms
        // vanish; converges fast for |x| <= 3. Independent of libm.
        fn erf_series(x: f64) -> f64 {
            let mut term = x;
            let mut sum = x;
            let mut n = 0usize;
            while term.abs() > 1e-18 && n < 200 {
                n += 1;
                term *= -x * x / n as f64;
                sum += term / (2 * n + 1) as f64;
            }
            sum * 2.0 / std::f64::consts::PI.sqrt()
        }
        let mut g = Graph::new();
        for i in -30..=30 {
            let x = i as f64 / 10.0;
            let t = g.leaf(vec![x], vec![1]).unwrap();
            let y = g.gelu(t).unwrap();
            let expect = 0.5 * x * (1.0 + erf_series(x / std::f64::consts::SQRT_2));
            assert!((g.data(y)[0] - expect).abs() < 1e-6, "x = {x}");
        }
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::new();
        let a = g.leaf(vec![1e308, 1e308], vec![1, 2]).unwrap();
        let err = g.add(a, a).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn determinism_bitwise() {
        let run = || {
            let mut g = Graph::new();
            let a = g.leaf(vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6], vec![2, 3]).unwrap();
            let b = g.leaf(vec![0.7, -0.3, 0.2, 0.9, -0.5, 0.4], vec![3, 2]).unwrap();
            let c = g.matmul(a, b).unwrap();
            let s = g.softmax_temp(c, 0.7).unwrap();
            let loss = g.mean(s).unwrap();
            g.backward(loss).unwrap();
            (g.data(s).to_vec(), g.grad(a).unwrap().to_vec())
        };
        let (s1, g1) = run();
        let (s2, g2) = run();
        assert!(s1.iter().zip(&s2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
