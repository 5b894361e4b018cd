//! Reverse-mode automatic differentiation over a fixed op vocabulary.
//!
//! A [`Tape`] is rebuilt per forward pass (define-by-run): every op call
//! evaluates eagerly, records the operation, and returns a [`NodeId`].
//! [`Tape::backward`] then sweeps the record in reverse, applying each op's
//! adjoint, and deposits gradients into the [`ParamStore`].
//!
//! Control flow (masking, clause branching, direction of iteration) lives in
//! ordinary Rust; only tensor ops are recorded. Nodes reachable from no
//! trainable parameter carry `requires = false` and are skipped by the
//! backward sweep, so a frozen encoder costs nothing at training time.

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{self, Tensor};

/// Floor applied inside `-log p` so a collapsed probability cannot produce
/// an infinite loss.
pub const LOG_CLAMP: f64 = 1e-12;

/// Handle to a parameter registered in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// A named model parameter: tensor values, trainable flag, gradient slot.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
    pub grad: Vec<f64>,
}

/// Ordered collection of all parameters of a model.
///
/// Registration order is part of the model's identity: checkpoints and
/// digests walk parameters in this order.
#[derive(Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
    has_grads: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor, trainable: bool) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name {name:?}")));
        }
        let grad = vec![0.0; tensor.numel()];
        let id = self.params.len();
        self.by_name.insert(name.to_string(), id);
        self.params.push(Parameter {
            name: name.to_string(),
            tensor,
            trainable,
            grad,
        });
        Ok(ParamId(id))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Total scalar count over all parameters.
    pub fn total_scalars(&self) -> u64 {
        self.params.iter().map(|p| p.tensor.numel() as u64).sum()
    }

    /// Scalar count over trainable parameters only.
    pub fn trainable_scalars(&self) -> u64 {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.numel() as u64)
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
        self.has_grads = false;
    }

    pub fn has_grads(&self) -> bool {
        self.has_grads
    }

    pub(crate) fn mark_grads(&mut self) {
        self.has_grads = true;
    }

    pub(crate) fn clear_grad_mark(&mut self) {
        self.has_grads = false;
    }

    /// Copy of all parameter values, for best-epoch restoration.
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.tensor.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Tensor]) {
        assert_eq!(snapshot.len(), self.params.len(), "snapshot size mismatch");
        for (p, t) in self.params.iter_mut().zip(snapshot) {
            p.tensor = t.clone();
        }
    }

    /// SHA-256 over `name || raw little-endian values` of every parameter
    /// accepted by `filter`, in registration order.
    pub fn digest_hex(&self, mut filter: impl FnMut(&Parameter) -> bool) -> String {
        let mut hasher = Sha256::new();
        for p in &self.params {
            if filter(p) {
                hasher.update(p.name.as_bytes());
                for v in p.tensor.data() {
                    hasher.update(v.to_le_bytes());
                }
            }
        }
        hex_string(&hasher.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Uniform(-r, r) with r = sqrt(6 / (fan_in + fan_out)), the initializer for
/// every weight matrix in the repository. Biases start at zero and layer
/// norm gains at one, handled by the callers.
pub fn glorot_uniform(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let r = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.uniform(-r, r)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape/data constructed together")
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Matmul(NodeId, NodeId),
    MatmulTransposeB(NodeId, NodeId),
    MatVec(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddRowBroadcast(NodeId, NodeId),
    MulRowBroadcast(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Gelu(NodeId),
    SoftmaxRows { x: NodeId },
    LayerNormRows { x: NodeId, eps: f64 },
    EmbedRows { table: ParamId, ids: Vec<usize> },
    RowSlice { x: NodeId, row: usize },
    ColSlice { x: NodeId, start: usize, end: usize },
    ConcatCols(Vec<NodeId>),
    ConcatVec(Vec<NodeId>),
    StackRows(Vec<NodeId>),
    MeanRowsRange { x: NodeId, start: usize, end: usize },
    MaxPoolRows { x: NodeId, argmax: Vec<usize> },
    Sum(NodeId),
    SumSquares(NodeId),
    NegLogProb { probs: NodeId, class: usize, scale: f64 },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires: bool,
}

/// Operation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drop all recorded nodes and zero every gradient in the store.
    pub fn reset(&mut self, store: &mut ParamStore) {
        self.nodes.clear();
        store.zero_grads();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn tensor(&self, id: NodeId) -> Tensor {
        Tensor::new(self.shape(id).to_vec(), self.value(id).to_vec())
            .expect("node shape/value consistent")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires,
        });
        id
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires
    }

    fn dims2(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(id) {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Contract(format!(
                "{op}: expected a rank-2 node, got shape {other:?}"
            ))),
        }
    }

    fn mismatch(&self, op: &'static str, a: NodeId, b: NodeId) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    // ── Leaves ───────────────────────────────────────────────────────

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        let shape = t.shape().to_vec();
        let value = t.data().to_vec();
        self.push(shape, value, Op::Leaf, false)
    }

    pub fn constant_vector(&mut self, data: Vec<f64>) -> NodeId {
        self.constant(Tensor::vector(data))
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> NodeId {
        self.constant(Tensor::zeros(shape))
    }

    /// Leaf over a stored parameter; values are copied onto the tape so the
    /// record stays valid if the store is mutated afterwards.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let p = store.get(id);
        self.push(
            p.tensor.shape().to_vec(),
            p.tensor.data().to_vec(),
            Op::Param(id),
            p.trainable,
        )
    }

    // ── Linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.dims2(a, "matmul")?;
        let (kb, n) = self.dims2(b, "matmul")?;
        if ka != kb {
            return Err(self.mismatch("matmul", a, b));
        }
        let t = tensor::matmul(&self.tensor(a), &self.tensor(b))?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(vec![m, n], t.data().to_vec(), Op::Matmul(a, b), req))
    }

    /// `A (m x k)` times `B (n x k)` transposed, giving `m x n`.
    pub fn matmul_transpose_b(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.dims2(a, "matmul_transpose_b")?;
        let (n, kb) = self.dims2(b, "matmul_transpose_b")?;
        if ka != kb {
            return Err(self.mismatch("matmul_transpose_b", a, b));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &av[i * ka..(i + 1) * ka];
            for j in 0..n {
                let brow = &bv[j * kb..(j + 1) * kb];
                let mut acc = 0.0;
                for k in 0..ka {
                    acc += arow[k] * brow[k];
                }
                out[i * n + j] = acc;
            }
        }
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(vec![m, n], out, Op::MatmulTransposeB(a, b), req))
    }

    /// `W (m x n)` times vector `x (n)`, giving `m`.
    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2(w, "matvec")?;
        if self.shape(x) != [n] {
            return Err(self.mismatch("matvec", w, x));
        }
        let t = tensor::matvec(&self.tensor(w), &self.tensor(x))?;
        let req = self.requires(w) || self.requires(x);
        Ok(self.push(vec![m], t.data().to_vec(), Op::MatVec(w, x), req))
    }

    // ── Elementwise ──────────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("add", a, b));
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), req))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("mul", a, b));
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), req))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let out: Vec<f64> = self.value(x).iter().map(|v| v * c).collect();
        let req = self.requires(x);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, c), req)
    }

    /// Add a length-c vector to every row of an `r x c` matrix.
    pub fn add_row_broadcast(&mut self, mat: NodeId, vec: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2(mat, "add_row_broadcast")?;
        if self.shape(vec) != [c] {
            return Err(self.mismatch("add_row_broadcast", mat, vec));
        }
        let mv = self.value(mat);
        let vv = self.value(vec);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = mv[i * c + j] + vv[j];
            }
        }
        let req = self.requires(mat) || self.requires(vec);
        Ok(self.push(vec![r, c], out, Op::AddRowBroadcast(mat, vec), req))
    }

    /// Multiply every row of an `r x c` matrix by a length-c vector.
    pub fn mul_row_broadcast(&mut self, mat: NodeId, vec: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2(mat, "mul_row_broadcast")?;
        if self.shape(vec) != [c] {
            return Err(self.mismatch("mul_row_broadcast", mat, vec));
        }
        let mv = self.value(mat);
        let vv = self.value(vec);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = mv[i * c + j] * vv[j];
            }
        }
        let req = self.requires(mat) || self.requires(vec);
        Ok(self.push(vec![r, c], out, Op::MulRowBroadcast(mat, vec), req))
    }

    // ── Activations ──────────────────────────────────────────────────

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self.value(x).iter().map(|&v| tensor::sigmoid(v)).collect();
        let req = self.requires(x);
        self.push(self.shape(x).to_vec(), out, Op::Sigmoid(x), req)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self.value(x).iter().map(|v| v.tanh()).collect();
        let req = self.requires(x);
        self.push(self.shape(x).to_vec(), out, Op::Tanh(x), req)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self.value(x).iter().map(|&v| tensor::gelu(v)).collect();
        let req = self.requires(x);
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x), req)
    }

    /// Row-wise softmax with max subtraction. Rank-1 input acts as one row.
    /// `keep`, when given, restricts each row's distribution to the kept
    /// columns; excluded columns get weight exactly 0.
    pub fn softmax_rows(&mut self, x: NodeId, keep: Option<Vec<bool>>) -> Result<NodeId> {
        let (rows, cols) = match self.shape(x) {
            [n] => (1usize, *n),
            [r, c] => (*r, *c),
            other => {
                return Err(Error::Contract(format!(
                    "softmax_rows: expected rank 1 or 2, got {other:?}"
                )))
            }
        };
        if let Some(k) = &keep {
            if k.len() != cols {
                return Err(Error::Contract(format!(
                    "softmax_rows: keep mask has {} entries for {} columns",
                    k.len(),
                    cols
                )));
            }
        }
        let xv = self.value(x);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            tensor::softmax_into(
                &xv[r * cols..(r + 1) * cols],
                keep.as_deref(),
                &mut out[r * cols..(r + 1) * cols],
            );
        }
        let req = self.requires(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::SoftmaxRows { x }, req))
    }

    /// Per-row normalization to zero mean and unit variance (population),
    /// without a learned affine. Gains and biases, where present, are
    /// separate broadcast ops.
    pub fn layer_norm_rows(&mut self, x: NodeId) -> Result<NodeId> {
        const EPS: f64 = 1e-6;
        let (rows, cols) = self.dims2(x, "layer_norm_rows")?;
        let xv = self.value(x);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = (var + EPS).sqrt();
            for j in 0..cols {
                out[r * cols + j] = (row[j] - mean) / s;
            }
        }
        let req = self.requires(x);
        Ok(self.push(vec![rows, cols], out, Op::LayerNormRows { x, eps: EPS }, req))
    }

    // ── Structure ────────────────────────────────────────────────────

    /// Gather rows of a parameter table by index. The table is read from the
    /// store without copying it onto the tape; gradients scatter back to it.
    pub fn embed_rows(&mut self, store: &ParamStore, table: ParamId, ids: &[usize]) -> Result<NodeId> {
        let p = store.get(table);
        let (rows, cols) = p.tensor.dims2()?;
        for &i in ids {
            if i >= rows {
                return Err(Error::Contract(format!(
                    "embed_rows: index {i} out of range for table {:?} with {rows} rows",
                    p.name
                )));
            }
        }
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&p.tensor.data()[i * cols..(i + 1) * cols]);
        }
        Ok(self.push(
            vec![ids.len(), cols],
            out,
            Op::EmbedRows {
                table,
                ids: ids.to_vec(),
            },
            p.trainable,
        ))
    }

    pub fn row_slice(&mut self, x: NodeId, row: usize) -> Result<NodeId> {
        let (rows, cols) = self.dims2(x, "row_slice")?;
        if row >= rows {
            return Err(Error::Contract(format!(
                "row_slice: row {row} out of range for {rows} rows"
            )));
        }
        let out = self.value(x)[row * cols..(row + 1) * cols].to_vec();
        let req = self.requires(x);
        Ok(self.push(vec![cols], out, Op::RowSlice { x, row }, req))
    }

    pub fn col_slice(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (rows, cols) = self.dims2(x, "col_slice")?;
        if start >= end || end > cols {
            return Err(Error::Contract(format!(
                "col_slice: range {start}..{end} invalid for {cols} columns"
            )));
        }
        let xv = self.value(x);
        let w = end - start;
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&xv[r * cols + start..r * cols + end]);
        }
        let req = self.requires(x);
        Ok(self.push(vec![rows, w], out, Op::ColSlice { x, start, end }, req))
    }

    /// Concatenate rank-2 nodes with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols: no parts".into()));
        }
        let (rows, _) = self.dims2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != rows {
                return Err(self.mismatch("concat_cols", parts[0], p));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &c) in parts.iter().zip(&widths) {
                let pv = self.value(p);
                out.extend_from_slice(&pv[r * c..(r + 1) * c]);
            }
        }
        let req = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(vec![rows, total], out, Op::ConcatCols(parts.to_vec()), req))
    }

    /// Concatenate rank-1 nodes into one longer vector.
    pub fn concat_vec(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_vec: no parts".into()));
        }
        let mut out = Vec::new();
        for &p in parts {
            if self.shape(p).len() != 1 {
                return Err(Error::Contract(format!(
                    "concat_vec: expected rank-1 parts, got {:?}",
                    self.shape(p)
                )));
            }
            out.extend_from_slice(self.value(p));
        }
        let req = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(vec![out.len()], out, Op::ConcatVec(parts.to_vec()), req))
    }

    /// Stack equal-length vectors into an `n x c` matrix.
    pub fn stack_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("stack_rows: no parts".into()));
        }
        let c = self.value(parts[0]).len();
        let mut out = Vec::with_capacity(parts.len() * c);
        for &p in parts {
            if self.shape(p) != [c] {
                return Err(self.mismatch("stack_rows", parts[0], p));
            }
            out.extend_from_slice(self.value(p));
        }
        let req = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(vec![parts.len(), c], out, Op::StackRows(parts.to_vec()), req))
    }

    /// Mean of rows `start..end` of a rank-2 node, giving a vector.
    pub fn mean_rows_range(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (rows, cols) = self.dims2(x, "mean_rows_range")?;
        if start >= end || end > rows {
            return Err(Error::Contract(format!(
                "mean_rows_range: span {start}..{end} invalid for {rows} rows"
            )));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; cols];
        for r in start..end {
            for j in 0..cols {
                out[j] += xv[r * cols + j];
            }
        }
        let inv = 1.0 / (end - start) as f64;
        for o in out.iter_mut() {
            *o *= inv;
        }
        let req = self.requires(x);
        Ok(self.push(vec![cols], out, Op::MeanRowsRange { x, start, end }, req))
    }

    /// Coordinatewise max over the rows of an `n x c` node. Gradient routes
    /// to each column's first-occurrence argmax row.
    pub fn max_pool_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.dims2(x, "max_pool_rows")?;
        if rows == 0 {
            return Err(Error::Contract("max_pool_rows: empty sequence".into()));
        }
        let xv = self.value(x);
        let mut out = vec![f64::NEG_INFINITY; cols];
        let mut argmax = vec![0usize; cols];
        for r in 0..rows {
            for j in 0..cols {
                let v = xv[r * cols + j];
                if v > out[j] {
                    out[j] = v;
                    argmax[j] = r;
                }
            }
        }
        let req = self.requires(x);
        Ok(self.push(vec![cols], out, Op::MaxPoolRows { x, argmax }, req))
    }

    // ── Reductions & loss ────────────────────────────────────────────

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).iter().sum();
        let req = self.requires(x);
        self.push(vec![1], vec![s], Op::Sum(x), req)
    }

    pub fn sum_squares(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).iter().map(|v| v * v).sum();
        let req = self.requires(x);
        self.push(vec![1], vec![s], Op::SumSquares(x), req)
    }

    /// `-scale * ln(max(probs[class], LOG_CLAMP))` as a scalar node.
    pub fn neg_log_prob(&mut self, probs: NodeId, class: usize, scale: f64) -> Result<NodeId> {
        if self.shape(probs).len() != 1 {
            return Err(Error::Contract(format!(
                "neg_log_prob: expected a probability vector, got shape {:?}",
                self.shape(probs)
            )));
        }
        if class >= self.value(probs).len() {
            return Err(Error::Contract(format!(
                "neg_log_prob: class {class} out of range for {} probabilities",
                self.value(probs).len()
            )));
        }
        let raw = self.value(probs)[class];
        // NaN must stay NaN so a diverged run is detectable; f64::max would
        // silently replace it with the clamp.
        let v = if raw.is_nan() {
            f64::NAN
        } else {
            -scale * raw.max(LOG_CLAMP).ln()
        };
        let req = self.requires(probs);
        Ok(self.push(
            vec![1],
            vec![v],
            Op::NegLogProb {
                probs,
                class,
                scale,
            },
            req,
        ))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss node. Gradients of trainable
    /// parameters are accumulated (`+=`) into the store, so per-example
    /// losses of a batch can be swept one after another.
    pub fn backward(&self, store: &mut ParamStore, loss: NodeId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.adjoint(id, &g, &mut grads, store)?;
        }
        store.mark_grads();
        Ok(())
    }

    /// Add `contrib` into the gradient buffer of `target`, creating it on
    /// first touch. No-op when the target does not require gradients.
    fn accum(
        &self,
        grads: &mut [Option<Vec<f64>>],
        target: NodeId,
        write: impl FnOnce(&mut [f64]),
    ) {
        if !self.requires(target) {
            return;
        }
        let buf = grads[target.0]
            .get_or_insert_with(|| vec![0.0; self.nodes[target.0].value.len()]);
        write(buf);
    }

    fn adjoint(
        &self,
        id: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        store: &mut ParamStore,
    ) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Param(pid) => {
                let p = store.get_mut(*pid);
                if p.trainable {
                    for (gp, gv) in p.grad.iter_mut().zip(g) {
                        *gp += gv;
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = self.dims2(*a, "matmul")?;
                let n = self.shape(*b)[1];
                let av = self.value(*a);
                let bv = self.value(*b);
                // dA += G . B^T
                self.accum(grads, *a, |da| {
                    for i in 0..m {
                        for kk in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * bv[kk * n + j];
                            }
                            da[i * k + kk] += acc;
                        }
                    }
                });
                // dB += A^T . G
                self.accum(grads, *b, |db| {
                    for kk in 0..k {
                        for i in 0..m {
                            let av_ik = av[i * k + kk];
                            if av_ik == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[kk * n + j] += av_ik * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::MatmulTransposeB(a, b) => {
                // Y = A . B^T with A (m x k), B (n x k), Y (m x n)
                let (m, k) = self.dims2(*a, "matmul_transpose_b")?;
                let n = self.shape(*b)[0];
                let av = self.value(*a);
                let bv = self.value(*b);
                // dA += G . B
                self.accum(grads, *a, |da| {
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for kk in 0..k {
                                da[i * k + kk] += gij * bv[j * k + kk];
                            }
                        }
                    }
                });
                // dB += G^T . A
                self.accum(grads, *b, |db| {
                    for j in 0..n {
                        for i in 0..m {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for kk in 0..k {
                                db[j * k + kk] += gij * av[i * k + kk];
                            }
                        }
                    }
                });
            }
            Op::MatVec(w, x) => {
                let (m, n) = self.dims2(*w, "matvec")?;
                let wv = self.value(*w);
                let xv = self.value(*x);
                self.accum(grads, *w, |dw| {
                    for i in 0..m {
                        let gi = g[i];
                        if gi == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            dw[i * n + j] += gi * xv[j];
                        }
                    }
                });
                self.accum(grads, *x, |dx| {
                    for i in 0..m {
                        let gi = g[i];
                        if gi == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            dx[j] += wv[i * n + j] * gi;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, |da| {
                    for (d, gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                self.accum(grads, *b, |db| {
                    for (d, gv) in db.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                self.accum(grads, *a, |da| {
                    for i in 0..g.len() {
                        da[i] += bv[i] * g[i];
                    }
                });
                self.accum(grads, *b, |db| {
                    for i in 0..g.len() {
                        db[i] += av[i] * g[i];
                    }
                });
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accum(grads, *x, |dx| {
                    for i in 0..g.len() {
                        dx[i] += c * g[i];
                    }
                });
            }
            Op::AddRowBroadcast(mat, vec) => {
                let (r, c) = self.dims2(*mat, "add_row_broadcast")?;
                self.accum(grads, *mat, |dm| {
                    for (d, gv) in dm.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                self.accum(grads, *vec, |dv| {
                    for i in 0..r {
                        for j in 0..c {
                            dv[j] += g[i * c + j];
                        }
                    }
                });
            }
            Op::MulRowBroadcast(mat, vec) => {
                let (r, c) = self.dims2(*mat, "mul_row_broadcast")?;
                let mv = self.value(*mat);
                let vv = self.value(*vec);
                self.accum(grads, *mat, |dm| {
                    for i in 0..r {
                        for j in 0..c {
                            dm[i * c + j] += g[i * c + j] * vv[j];
                        }
                    }
                });
                self.accum(grads, *vec, |dv| {
                    for i in 0..r {
                        for j in 0..c {
                            dv[j] += g[i * c + j] * mv[i * c + j];
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                self.accum(grads, *x, |dx| {
                    for i in 0..g.len() {
                        dx[i] += y[i] * (1.0 - y[i]) * g[i];
                    }
                });
            }
            Op::Tanh(x) => {
                let y = &node.value;
                self.accum(grads, *x, |dx| {
                    for i in 0..g.len() {
                        dx[i] += (1.0 - y[i] * y[i]) * g[i];
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                self.accum(grads, *x, |dx| {
                    for i in 0..g.len() {
                        dx[i] += tensor::gelu_prime(xv[i]) * g[i];
                    }
                });
            }
            Op::SoftmaxRows { x } => {
                // dx_j = y_j * (g_j - sum_k g_k y_k), per row; excluded
                // columns have y = 0 and receive zero gradient.
                let y = &node.value;
                let cols = *self.shape(*x).last().unwrap();
                let rows = y.len() / cols;
                self.accum(grads, *x, |dx| {
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            dx[r * cols + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNormRows { x, eps } => {
                let (rows, cols) = self.dims2(*x, "layer_norm_rows")?;
                let xv = self.value(*x);
                let y = &node.value;
                let eps = *eps;
                self.accum(grads, *x, |dx| {
                    for r in 0..rows {
                        let row = &xv[r * cols..(r + 1) * cols];
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let mean = row.iter().sum::<f64>() / cols as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                        let s = (var + eps).sqrt();
                        let gmean = gr.iter().sum::<f64>() / cols as f64;
                        let gydot =
                            gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for j in 0..cols {
                            dx[r * cols + j] += (gr[j] - gmean - yr[j] * gydot) / s;
                        }
                    }
                });
            }
            Op::EmbedRows { table, ids } => {
                let p = store.get_mut(*table);
                if p.trainable {
                    let cols = g.len() / ids.len();
                    for (pos, &row) in ids.iter().enumerate() {
                        for j in 0..cols {
                            p.grad[row * cols + j] += g[pos * cols + j];
                        }
                    }
                }
            }
            Op::RowSlice { x, row } => {
                let cols = g.len();
                let row = *row;
                self.accum(grads, *x, |dx| {
                    for j in 0..cols {
                        dx[row * cols + j] += g[j];
                    }
                });
            }
            Op::ColSlice { x, start, end } => {
                let cols = self.shape(*x)[1];
                let (start, end) = (*start, *end);
                let w = end - start;
                let rows = g.len() / w;
                self.accum(grads, *x, |dx| {
                    for r in 0..rows {
                        for j in 0..w {
                            dx[r * cols + start + j] += g[r * w + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let rows = node.shape[0];
                let total = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    self.accum(grads, p, |dp| {
                        for r in 0..rows {
                            for j in 0..c {
                                dp[r * c + j] += g[r * total + offset + j];
                            }
                        }
                    });
                    offset += c;
                }
            }
            Op::ConcatVec(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    self.accum(grads, p, |dp| {
                        for j in 0..len {
                            dp[j] += g[offset + j];
                        }
                    });
                    offset += len;
                }
            }
            Op::StackRows(parts) => {
                let c = node.shape[1];
                for (i, &p) in parts.iter().enumerate() {
                    self.accum(grads, p, |dp| {
                        for j in 0..c {
                            dp[j] += g[i * c + j];
                        }
                    });
                }
            }
            Op::MeanRowsRange { x, start, end } => {
                let cols = g.len();
                let inv = 1.0 / (end - start) as f64;
                let (start, end) = (*start, *end);
                self.accum(grads, *x, |dx| {
                    for r in start..end {
                        for j in 0..cols {
                            dx[r * cols + j] += g[j] * inv;
                        }
                    }
                });
            }
            Op::MaxPoolRows { x, argmax } => {
                let cols = g.len();
                self.accum(grads, *x, |dx| {
                    for j in 0..cols {
                        dx[argmax[j] * cols + j] += g[j];
                    }
                });
            }
            Op::Sum(x) => {
                let gv = g[0];
                self.accum(grads, *x, |dx| {
                    for d in dx.iter_mut() {
                        *d += gv;
                    }
                });
            }
            Op::SumSquares(x) => {
                let gv = g[0];
                let xv = self.value(*x);
                self.accum(grads, *x, |dx| {
                    for i in 0..dx.len() {
                        dx[i] += 2.0 * xv[i] * gv;
                    }
                });
            }
            Op::NegLogProb {
                probs,
                class,
                scale,
            } => {
                let p = self.value(*probs)[*class];
                let (class, scale) = (*class, *scale);
                self.accum(grads, *probs, |dp| {
                    if p > LOG_CLAMP {
                        dp[class] += -scale / p * g[0];
                    }
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, t: Tensor) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add(name, t, true).unwrap();
        (s, id)
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let (mut store, w) = store_with("w", Tensor::vector(vec![3.0, -1.0, 2.0]));
        let mut tape = Tape::new();
        let wn = tape.param(&store, w);
        let loss = tape.sum(wn);
        tape.backward(&mut store, loss).unwrap();
        assert_eq!(store.get(w).grad, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let (mut store, w) = store_with("w", Tensor::vector(vec![1.0, 2.0]));
        let mut tape = Tape::new();
        let wn = tape.param(&store, w);
        let sq = tape.mul(wn, wn).unwrap();
        let loss = tape.sum(sq);
        tape.backward(&mut store, loss).unwrap();
        assert_eq!(store.get(w).grad, vec![2.0, 4.0]);
    }

    #[test]
    fn detached_parameter_keeps_zero_grad() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![1.0]), true).unwrap();
        let u = store.add("u", Tensor::vector(vec![5.0]), true).unwrap();
        let mut tape = Tape::new();
        let un = tape.param(&store, u);
        let loss = tape.sum(un);
        tape.backward(&mut store, loss).unwrap();
        assert_eq!(store.get(w).grad, vec![0.0]);
        assert_eq!(store.get(u).grad, vec![1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let (mut store, w) = store_with("w", Tensor::vector(vec![1.0, 2.0]));
        let mut tape = Tape::new();
        let wn = tape.param(&store, w);
        assert!(tape.backward(&mut store, wn).is_err());
    }

    #[test]
    fn frozen_parameter_receives_no_grad() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![1.0, 2.0]), false).unwrap();
        let mut tape = Tape::new();
        let wn = tape.param(&store, w);
        let sq = tape.mul(wn, wn).unwrap();
        let loss = tape.sum(sq);
        tape.backward(&mut store, loss).unwrap();
        assert_eq!(store.get(w).grad, vec![0.0, 0.0]);
    }

    #[test]
    fn grad_accumulates_across_sweeps() {
        let (mut store, w) = store_with("w", Tensor::vector(vec![2.0]));
        for _ in 0..3 {
            let mut tape = Tape::new();
            let wn = tape.param(&store, w);
            let loss = tape.sum(wn);
            tape.backward(&mut store, loss).unwrap();
        }
        assert_eq!(store.get(w).grad, vec![3.0]);
    }

    #[test]
    fn reset_clears_grads() {
        let (mut store, w) = store_with("w", Tensor::vector(vec![2.0]));
        let mut tape = Tape::new();
        let wn = tape.param(&store, w);
        let loss = tape.sum(wn);
        tape.backward(&mut store, loss).unwrap();
        assert!(store.has_grads());
        tape.reset(&mut store);
        assert!(tape.is_empty());
        assert!(!store.has_grads());
        assert_eq!(store.get(w).grad, vec![0.0]);
    }

    #[test]
    fn embed_rows_gathers_and_scatters() {
        let table = Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let (mut store, t) = store_with("table", table);
        let mut tape = Tape::new();
        let rows = tape.embed_rows(&store, t, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(rows), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let loss = tape.sum(rows);
        tape.backward(&mut store, loss).unwrap();
        // row 2 gathered twice, row 0 once, row 1 never
        assert_eq!(store.get(t).grad, vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn max_pool_routes_to_first_argmax() {
        let (mut store, w) =
            store_with("w", Tensor::matrix(&[vec![1.0, 5.0], vec![3.0, 2.0]]).unwrap());
        let mut tape = Tape::new();
        let wn = tape.param(&store, w);
        let pooled = tape.max_pool_rows(wn).unwrap();
        assert_eq!(tape.value(pooled), &[3.0, 5.0]);
        let loss = tape.sum(pooled);
        tape.backward(&mut store, loss).unwrap();
        assert_eq!(store.get(w).grad, vec![0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn masked_softmax_puts_exact_zero_on_excluded() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(&[vec![0.0, 100.0, 0.0]]).unwrap());
        let p = tape
            .softmax_rows(x, Some(vec![true, false, true]))
            .unwrap();
        assert_eq!(tape.value(p), &[0.5, 0.0, 0.5]);
    }

    #[test]
    fn scale_by_zero_is_exact() {
        let mut tape = Tape::new();
        let x = tape.constant_vector(vec![3.7, -2.2]);
        let z = tape.scale(x, 0.0);
        assert!(tape.value(z).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn per_op_backward_matches_numerics() {
        use crate::gradcheck::{grad_check, DEFAULT_EPS, DEFAULT_TOL};
        let mut rng = Rng::new(17);
        let a0 = glorot_uniform(&mut rng, 3, 4);
        let b0 = glorot_uniform(&mut rng, 4, 2);
        let c0 = glorot_uniform(&mut rng, 5, 4);

        // matmul
        let mut store = ParamStore::new();
        let a = store.add("a", a0.clone(), true).unwrap();
        let b = store.add("b", b0.clone(), true).unwrap();
        let r = grad_check(&mut store, DEFAULT_EPS, |t, s| {
            let an = t.param(s, a);
            let bn = t.param(s, b);
            let m = t.matmul(an, bn)?;
            Ok(t.sum_squares(m))
        })
        .unwrap();
        assert!(r.passes(DEFAULT_TOL), "matmul: {}", r.max_rel_err);

        // matmul_transpose_b
        let mut store = ParamStore::new();
        let a = store.add("a", a0.clone(), true).unwrap();
        let c = store.add("c", c0.clone(), true).unwrap();
        let r = grad_check(&mut store, DEFAULT_EPS, |t, s| {
            let an = t.param(s, a);
            let cn = t.param(s, c);
            let m = t.matmul_transpose_b(an, cn)?;
            Ok(t.sum_squares(m))
        })
        .unwrap();
        assert!(r.passes(DEFAULT_TOL), "matmul_transpose_b: {}", r.max_rel_err);

        // col_slice + concat_cols
        let mut store = ParamStore::new();
        let a = store.add("a", a0.clone(), true).unwrap();
        let r = grad_check(&mut store, DEFAULT_EPS, |t, s| {
            let an = t.param(s, a);
            let left = t.col_slice(an, 0, 2)?;
            let right = t.col_slice(an, 2, 4)?;
            let swapped = t.concat_cols(&[right, left])?;
            let sq = t.mul(swapped, swapped)?;
            Ok(t.sum(sq))
        })
        .unwrap();
        assert!(r.passes(DEFAULT_TOL), "col ops: {}", r.max_rel_err);

        // broadcast ops
        let mut store = ParamStore::new();
        let a = store.add("a", a0.clone(), true).unwrap();
        let v = store
            .add("v", Tensor::vector(vec![0.4, -0.9, 1.3, 0.2]), true)
            .unwrap();
        let r = grad_check(&mut store, DEFAULT_EPS, |t, s| {
            let an = t.param(s, a);
            let vn = t.param(s, v);
            let x = t.mul_row_broadcast(an, vn)?;
            let y = t.add_row_broadcast(x, vn)?;
            let z = t.tanh(y);
            Ok(t.sum_squares(z))
        })
        .unwrap();
        assert!(r.passes(DEFAULT_TOL), "broadcast ops: {}", r.max_rel_err);

        // masked row softmax
        let mut store = ParamStore::new();
        let a = store.add("a", a0.clone(), true).unwrap();
        let r = grad_check(&mut store, DEFAULT_EPS, |t, s| {
            let an = t.param(s, a);
            let p = t.softmax_rows(an, Some(vec![true, true, false, true]))?;
            let sq = t.mul(p, p)?;
            Ok(t.sum(sq))
        })
        .unwrap();
        assert!(r.passes(DEFAULT_TOL), "masked softmax: {}", r.max_rel_err);

        // gelu
        let mut store = ParamStore::new();
        let a = store.add("a", a0.clone(), true).unwrap();
        let r = grad_check(&mut store, DEFAULT_EPS, |t, s| {
            let an = t.param(s, a);
            let g = t.gelu(an);
            Ok(t.sum_squares(g))
        })
        .unwrap();
        assert!(r.passes(DEFAULT_TOL), "gelu: {}", r.max_rel_err);

        // scaled dot-product attention core
        let mut store = ParamStore::new();
        let q = store.add("q", a0.clone(), true).unwrap();
        let k = store.add("k", glorot_uniform(&mut rng, 3, 4), true).unwrap();
        let v2 = store.add("v", glorot_uniform(&mut rng, 3, 4), true).unwrap();
        let r = grad_check(&mut store, DEFAULT_EPS, |t, s| {
            let qn = t.param(s, q);
            let kn = t.param(s, k);
            let vn = t.param(s, v2);
            let scores = t.matmul_transpose_b(qn, kn)?;
            let scaled = t.scale(scores, 0.5);
            let w = t.softmax_rows(scaled, Some(vec![true, true, false]))?;
            let out = t.matmul(w, vn)?;
            Ok(t.sum_squares(out))
        })
        .unwrap();
        assert!(r.passes(DEFAULT_TOL), "attention core: {}", r.max_rel_err);
    }

    #[test]
    fn glorot_bounds() {
        let mut rng = Rng::new(11);
        let t = glorot_uniform(&mut rng, 8, 4);
        let r = (6.0 / 12.0_f64).sqrt();
        assert!(t.data().iter().all(|v| v.abs() < r));
        assert_eq!(t.shape(), &[8, 4]);
    }
}
