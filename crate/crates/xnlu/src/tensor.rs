//! Dense f64 tensors with tape-based reverse-mode automatic differentiation.
//!
//! The op vocabulary is deliberately small: it is the closure of primitives
//! needed by the alignment losses and the toy encoder. A [`Tape`] records one
//! forward pass; [`Tape::backward`] sweeps it in reverse topological order and
//! returns per-node gradient accumulators. Tapes are cheap to build and are
//! dropped after each optimizer step.

use thiserror::Error;

pub type NodeId = usize;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected}, got {actual}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        actual: String,
    },
    #[error("{op}: index {index} out of range ({len} rows)")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{op}: target class {class} out of range for {num_classes} classes")]
    ClassOutOfRange {
        op: &'static str,
        class: usize,
        num_classes: usize,
    },
    #[error("cross_entropy: every row is ignored, loss undefined")]
    AllRowsIgnored,
    #[error("{op}: row {row} has near-zero norm")]
    ZeroNormRow { op: &'static str, row: usize },
    #[error("backward: root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("backward: root tensor is not part of the tape")]
    RootNotOnTape,
    #[error("tensor: shape {shape:?} implies {expected} elements, got {actual}")]
    BadConstruction {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major f64 tensor. `node` links it into a [`Tape`] when it was
/// produced by (or registered with) one.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    node: Option<NodeId>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::BadConstruction {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            node: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            node: None,
            requires_grad: false,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            node: None,
            requires_grad: false,
        }
    }

    /// 2-d tensor from rows; all rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let ncols = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * ncols);
        for r in rows {
            if r.len() != ncols {
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    expected: format!("row of length {ncols}"),
                    actual: format!("row of length {}", r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), ncols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a scalar tensor.
    pub fn value(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Number of rows when viewed as a matrix over the last axis.
    fn rows_over_last(&self) -> usize {
        let last = *self.shape.last().unwrap_or(&1);
        if last == 0 {
            0
        } else {
            self.data.len() / last
        }
    }

    fn detached(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
            requires_grad: false,
        }
    }

    fn rank2(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op,
                expected: "rank-2 tensor".into(),
                actual: format!("{:?}", self.shape),
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(TensorError::ShapeMismatch {
            op,
            expected: format!("{:?}", a.shape),
            actual: format!("{:?}", b.shape),
        });
    }
    Ok(())
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul,
    /// `broadcast` marks a row-vector bias added to every row of a matrix.
    Add { broadcast: bool },
    Scale(f64),
    Relu,
    Tanh,
    Sigmoid,
    SoftmaxRows,
    LogSoftmaxRows,
    Reshape,
    Transpose2d,
    SliceRows { start: usize },
    ConcatRows { row_counts: Vec<usize> },
    GatherRows { indices: Vec<usize> },
    Sum,
    Mean,
    L2NormalizeRows,
    CrossEntropy { targets: Vec<usize>, ignore: Option<usize> },
    BinaryCrossEntropy,
    Mse,
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
}

/// Gradient accumulators produced by one backward sweep, keyed by node id.
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to a tape-registered tensor; zeros if the tensor
    /// never influenced the root.
    pub fn wrt(&self, t: &Tensor) -> Tensor {
        match t.node.and_then(|id| self.get(id)) {
            Some(g) => g.clone(),
            None => Tensor::zeros(t.shape.to_vec()),
        }
    }
}

/// Records one forward pass. Confined to a single thread for its
/// forward+backward lifetime.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Register a differentiable leaf (a parameter or probed input).
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        let id = self.nodes.len();
        let mut out = t.detached();
        out.node = Some(id);
        out.requires_grad = true;
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            value: out.detached(),
            requires_grad: true,
        });
        out
    }

    fn register_constant(&mut self, t: &Tensor) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Constant,
            inputs: vec![],
            value: t.detached(),
            requires_grad: false,
        });
        id
    }

    /// Record `value = op(inputs)` when any input is differentiable;
    /// otherwise return the plain value.
    fn emit(&mut self, op: Op, inputs: &[&Tensor], value: Tensor) -> Tensor {
        if !inputs.iter().any(|t| t.requires_grad) {
            return value;
        }
        let ids: Vec<NodeId> = inputs
            .iter()
            .map(|t| match t.node {
                Some(id) => id,
                None => self.register_constant(t),
            })
            .collect();
        let id = self.nodes.len();
        let mut out = value;
        out.node = Some(id);
        out.requires_grad = true;
        self.nodes.push(Node {
            op,
            inputs: ids,
            value: out.detached(),
            requires_grad: true,
        });
        out
    }

    // ---- primitives -------------------------------------------------------

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = a.rank2("matmul")?;
        let (k2, n) = b.rank2("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                expected: format!("[{m}, {k}] x [{k}, _]"),
                actual: format!("[{m}, {k}] x [{k2}, {n}]"),
            });
        }
        let value = matmul_raw(&a.data, &b.data, m, k, n);
        let out = Tensor::new(vec![m, n], value)?;
        Ok(self.emit(Op::MatMul, &[a, b], out))
    }

    /// Elementwise add; additionally allows adding a length-`n` bias vector
    /// (or `1 x n` row) to every row of an `m x n` matrix.
    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape == b.shape {
            let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
            let out = Tensor::new(a.shape.clone(), data)?;
            return Ok(self.emit(Op::Add { broadcast: false }, &[a, b], out));
        }
        // row-broadcast case
        if a.shape.len() == 2 && b.data.len() == a.shape[1] {
            let n = a.shape[1];
            let data = a
                .data
                .iter()
                .enumerate()
                .map(|(i, x)| x + b.data[i % n])
                .collect();
            let out = Tensor::new(a.shape.clone(), data)?;
            return Ok(self.emit(Op::Add { broadcast: true }, &[a, b], out));
        }
        Err(TensorError::ShapeMismatch {
            op: "add",
            expected: format!("{:?} (or a row vector of its last dim)", a.shape),
            actual: format!("{:?}", b.shape),
        })
    }

    pub fn scale(&mut self, a: &Tensor, c: f64) -> Tensor {
        let data = a.data.iter().map(|x| x * c).collect();
        let out = Tensor::new(a.shape.clone(), data).expect("same shape");
        self.emit(Op::Scale(c), &[a], out)
    }

    pub fn relu(&mut self, a: &Tensor) -> Tensor {
        let data = a.data.iter().map(|x| x.max(0.0)).collect();
        let out = Tensor::new(a.shape.clone(), data).expect("same shape");
        self.emit(Op::Relu, &[a], out)
    }

    pub fn tanh(&mut self, a: &Tensor) -> Tensor {
        let data = a.data.iter().map(|x| x.tanh()).collect();
        let out = Tensor::new(a.shape.clone(), data).expect("same shape");
        self.emit(Op::Tanh, &[a], out)
    }

    pub fn sigmoid(&mut self, a: &Tensor) -> Tensor {
        let data = a.data.iter().map(|x| sigmoid(*x)).collect();
        let out = Tensor::new(a.shape.clone(), data).expect("same shape");
        self.emit(Op::Sigmoid, &[a], out)
    }

    pub fn softmax_rows(&mut self, a: &Tensor) -> Tensor {
        let last = *a.shape.last().unwrap_or(&1);
        let mut data = a.data.clone();
        for row in data.chunks_mut(last.max(1)) {
            softmax_in_place(row);
        }
        let out = Tensor::new(a.shape.clone(), data).expect("same shape");
        self.emit(Op::SoftmaxRows, &[a], out)
    }

    pub fn log_softmax_rows(&mut self, a: &Tensor) -> Tensor {
        let last = *a.shape.last().unwrap_or(&1);
        let mut data = a.data.clone();
        for row in data.chunks_mut(last.max(1)) {
            let lse = log_sum_exp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let out = Tensor::new(a.shape.clone(), data).expect("same shape");
        self.emit(Op::LogSoftmaxRows, &[a], out)
    }

    pub fn reshape(&mut self, a: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        let expected: usize = shape.iter().product();
        if expected != a.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                expected: format!("{} elements", a.data.len()),
                actual: format!("shape {:?} = {} elements", shape, expected),
            });
        }
        let out = Tensor::new(shape, a.data.clone())?;
        Ok(self.emit(Op::Reshape, &[a], out))
    }

    pub fn transpose2d(&mut self, a: &Tensor) -> Result<Tensor> {
        let (m, n) = a.rank2("transpose2d")?;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = a.data[i * n + j];
            }
        }
        let out = Tensor::new(vec![n, m], data)?;
        Ok(self.emit(Op::Transpose2d, &[a], out))
    }

    /// Rows `[start, end)` of a rank-2 tensor.
    pub fn slice_rows(&mut self, a: &Tensor, start: usize, end: usize) -> Result<Tensor> {
        let (m, n) = a.rank2("slice_rows")?;
        if start > end || end > m {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: end,
                len: m,
            });
        }
        let data = a.data[start * n..end * n].to_vec();
        let out = Tensor::new(vec![end - start, n], data)?;
        Ok(self.emit(Op::SliceRows { start }, &[a], out))
    }

    pub fn concat_rows(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "concat_rows",
                expected: "at least one input".into(),
                actual: "empty list".into(),
            });
        }
        let (_, n) = parts[0].rank2("concat_rows")?;
        let mut rows = 0;
        let mut row_counts = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for p in parts {
            let (m_p, n_p) = p.rank2("concat_rows")?;
            if n_p != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    expected: format!("[_, {n}]"),
                    actual: format!("[{m_p}, {n_p}]"),
                });
            }
            rows += m_p;
            row_counts.push(m_p);
            data.extend_from_slice(&p.data);
        }
        let out = Tensor::new(vec![rows, n], data)?;
        Ok(self.emit(Op::ConcatRows { row_counts }, parts, out))
    }

    pub fn gather_rows(&mut self, a: &Tensor, indices: &[usize]) -> Result<Tensor> {
        let (m, n) = a.rank2("gather_rows")?;
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= m {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    len: m,
                });
            }
            data.extend_from_slice(&a.data[i * n..(i + 1) * n]);
        }
        let out = Tensor::new(vec![indices.len(), n], data)?;
        Ok(self.emit(
            Op::GatherRows {
                indices: indices.to_vec(),
            },
            &[a],
            out,
        ))
    }

    pub fn sum(&mut self, a: &Tensor) -> Tensor {
        let out = Tensor::scalar(a.data.iter().sum());
        self.emit(Op::Sum, &[a], out)
    }

    pub fn mean(&mut self, a: &Tensor) -> Tensor {
        let n = a.data.len().max(1) as f64;
        let out = Tensor::scalar(a.data.iter().sum::<f64>() / n);
        self.emit(Op::Mean, &[a], out)
    }

    /// Normalize each row to unit L2 norm. Rows with norm below 1e-12 are
    /// passed through as zeros and get zero gradient.
    pub fn l2_normalize_rows(&mut self, a: &Tensor) -> Result<Tensor> {
        let (m, n) = a.rank2("l2_normalize_rows")?;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &a.data[i * n..(i + 1) * n];
            let norm = l2_norm(row);
            if norm >= 1e-12 {
                for j in 0..n {
                    data[i * n + j] = row[j] / norm;
                }
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.emit(Op::L2NormalizeRows, &[a], out))
    }

    // ---- losses -----------------------------------------------------------

    /// Mean of per-row `-log softmax(logits)[target]` over non-ignored rows.
    pub fn cross_entropy(
        &mut self,
        logits: &Tensor,
        targets: &[usize],
        ignore_index: Option<usize>,
    ) -> Result<Tensor> {
        let (n_rows, k) = logits.rank2("cross_entropy")?;
        if targets.len() != n_rows {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                expected: format!("{n_rows} targets"),
                actual: format!("{}", targets.len()),
            });
        }
        let mut total = 0.0;
        let mut counted = 0usize;
        for (i, &t) in targets.iter().enumerate() {
            if ignore_index == Some(t) {
                continue;
            }
            if t >= k {
                return Err(TensorError::ClassOutOfRange {
                    op: "cross_entropy",
                    class: t,
                    num_classes: k,
                });
            }
            let row = &logits.data[i * k..(i + 1) * k];
            total += log_sum_exp(row) - row[t];
            counted += 1;
        }
        if counted == 0 {
            return Err(TensorError::AllRowsIgnored);
        }
        let out = Tensor::scalar(total / counted as f64);
        Ok(self.emit(
            Op::CrossEntropy {
                targets: targets.to_vec(),
                ignore: ignore_index,
            },
            &[logits],
            out,
        ))
    }

    /// Mean elementwise binary cross-entropy with logits, in the stable
    /// softplus form `max(z,0) - z*t + ln(1 + e^{-|z|})`.
    pub fn binary_cross_entropy(&mut self, logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
        same_shape("binary_cross_entropy", logits, targets)?;
        let n = logits.data.len().max(1) as f64;
        let total: f64 = logits
            .data
            .iter()
            .zip(&targets.data)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let out = Tensor::scalar(total / n);
        Ok(self.emit(Op::BinaryCrossEntropy, &[logits, targets], out))
    }

    /// Mean squared elementwise difference.
    pub fn mse(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("mse", a, b)?;
        let n = a.data.len().max(1) as f64;
        let total: f64 = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let out = Tensor::scalar(total / n);
        Ok(self.emit(Op::Mse, &[a, b], out))
    }

    /// Pairwise cosine similarities: entry (i, k) compares row i of `a` with
    /// row k of `b`. Rejects rows with near-zero norm.
    pub fn cosine_similarity_matrix(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (_, ha) = a.rank2("cosine_similarity_matrix")?;
        let (_, hb) = b.rank2("cosine_similarity_matrix")?;
        if ha != hb {
            return Err(TensorError::ShapeMismatch {
                op: "cosine_similarity_matrix",
                expected: format!("[_, {ha}]"),
                actual: format!("[_, {hb}]"),
            });
        }
        for (name, t) in [("a", a), ("b", b)] {
            let _ = name;
            let n = t.shape[1];
            for i in 0..t.shape[0] {
                if l2_norm(&t.data[i * n..(i + 1) * n]) < 1e-12 {
                    return Err(TensorError::ZeroNormRow {
                        op: "cosine_similarity_matrix",
                        row: i,
                    });
                }
            }
        }
        let an = self.l2_normalize_rows(a)?;
        let bn = self.l2_normalize_rows(b)?;
        let bt = self.transpose2d(&bn)?;
        self.matmul(&an, &bt)
    }

    // ---- backward ---------------------------------------------------------

    /// Gradients of a scalar root with respect to every differentiable node.
    pub fn backward(&self, root: &Tensor) -> Result<Gradients> {
        if !root.is_scalar() {
            return Err(TensorError::NonScalarRoot(root.shape.clone()));
        }
        let root_id = root.node.ok_or(TensorError::RootNotOnTape)?;
        if root_id >= self.nodes.len() {
            return Err(TensorError::RootNotOnTape);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root_id] = Some(vec![1.0]);

        for id in (0..=root_id).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[id];
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }

        let by_node = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                g.map(|data| {
                    Tensor::new(self.nodes[id].value.shape.clone(), data)
                        .expect("gradient shape matches forward value")
                })
            })
            .collect();
        Ok(Gradients { by_node })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let inputs = &node.inputs;
        let input_val = |i: usize| &self.nodes[inputs[i]].value;
        let mut acc = |tape_nodes: &[Node], idx: usize, contrib: Vec<f64>| {
            let input_id = inputs[idx];
            if !tape_nodes[input_id].requires_grad {
                return;
            }
            match &mut grads[input_id] {
                Some(dst) => {
                    for (d, c) in dst.iter_mut().zip(&contrib) {
                        *d += c;
                    }
                }
                None => grads[input_id] = Some(contrib),
            }
        };

        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul => {
                let a = input_val(0);
                let b = input_val(1);
                let (m, k) = (a.shape[0], a.shape[1]);
                let n = b.shape[1];
                // dA = g . B^T
                let bt = transpose_raw(&b.data, k, n);
                let da = matmul_raw(g, &bt, m, n, k);
                // dB = A^T . g
                let at = transpose_raw(&a.data, m, k);
                let db = matmul_raw(&at, g, k, m, n);
                acc(&self.nodes, 0, da);
                acc(&self.nodes, 1, db);
            }
            Op::Add { broadcast } => {
                acc(&self.nodes, 0, g.to_vec());
                if *broadcast {
                    let n = input_val(1).data.len();
                    let mut db = vec![0.0; n];
                    for (i, v) in g.iter().enumerate() {
                        db[i % n] += v;
                    }
                    acc(&self.nodes, 1, db);
                } else {
                    acc(&self.nodes, 1, g.to_vec());
                }
            }
            Op::Scale(c) => {
                acc(&self.nodes, 0, g.iter().map(|v| v * c).collect());
            }
            Op::Relu => {
                let x = input_val(0);
                let dx = g
                    .iter()
                    .zip(&x.data)
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                acc(&self.nodes, 0, dx);
            }
            Op::Tanh => {
                let y = &node.value.data;
                let dx = g.iter().zip(y).map(|(gv, yv)| gv * (1.0 - yv * yv)).collect();
                acc(&self.nodes, 0, dx);
            }
            Op::Sigmoid => {
                let y = &node.value.data;
                let dx = g.iter().zip(y).map(|(gv, yv)| gv * yv * (1.0 - yv)).collect();
                acc(&self.nodes, 0, dx);
            }
            Op::SoftmaxRows => {
                let y = &node.value;
                let n = *y.shape.last().unwrap_or(&1);
                let mut dx = vec![0.0; g.len()];
                for r in 0..y.rows_over_last() {
                    let ys = &y.data[r * n..(r + 1) * n];
                    let gs = &g[r * n..(r + 1) * n];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dx[r * n + j] = ys[j] * (gs[j] - dot);
                    }
                }
                acc(&self.nodes, 0, dx);
            }
            Op::LogSoftmaxRows => {
                let y = &node.value;
                let n = *y.shape.last().unwrap_or(&1);
                let mut dx = vec![0.0; g.len()];
                for r in 0..y.rows_over_last() {
                    let ys = &y.data[r * n..(r + 1) * n];
                    let gs = &g[r * n..(r + 1) * n];
                    let gsum: f64 = gs.iter().sum();
                    for j in 0..n {
                        dx[r * n + j] = gs[j] - ys[j].exp() * gsum;
                    }
                }
                acc(&self.nodes, 0, dx);
            }
            Op::Reshape => {
                acc(&self.nodes, 0, g.to_vec());
            }
            Op::Transpose2d => {
                let (n, m) = (node.value.shape[0], node.value.shape[1]);
                acc(&self.nodes, 0, transpose_raw(g, n, m));
            }
            Op::SliceRows { start } => {
                let x = input_val(0);
                let n = x.shape[1];
                let mut dx = vec![0.0; x.data.len()];
                dx[start * n..start * n + g.len()].copy_from_slice(g);
                acc(&self.nodes, 0, dx);
            }
            Op::ConcatRows { row_counts } => {
                let n = node.value.shape[1];
                let mut offset = 0;
                for (idx, &rows) in row_counts.iter().enumerate() {
                    let part = g[offset..offset + rows * n].to_vec();
                    acc(&self.nodes, idx, part);
                    offset += rows * n;
                }
            }
            Op::GatherRows { indices } => {
                let x = input_val(0);
                let n = x.shape[1];
                let mut dx = vec![0.0; x.data.len()];
                for (out_row, &src_row) in indices.iter().enumerate() {
                    for j in 0..n {
                        dx[src_row * n + j] += g[out_row * n + j];
                    }
                }
                acc(&self.nodes, 0, dx);
            }
            Op::Sum => {
                let x = input_val(0);
                acc(&self.nodes, 0, vec![g[0]; x.data.len()]);
            }
            Op::Mean => {
                let x = input_val(0);
                let n = x.data.len().max(1) as f64;
                acc(&self.nodes, 0, vec![g[0] / n; x.data.len()]);
            }
            Op::L2NormalizeRows => {
                let x = input_val(0);
                let y = &node.value;
                let n = x.shape[1];
                let mut dx = vec![0.0; x.data.len()];
                for r in 0..x.shape[0] {
                    let xs = &x.data[r * n..(r + 1) * n];
                    let norm = l2_norm(xs);
                    if norm < 1e-12 {
                        continue; // degenerate row: gradient defined as zero
                    }
                    let ys = &y.data[r * n..(r + 1) * n];
                    let gs = &g[r * n..(r + 1) * n];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dx[r * n + j] = (gs[j] - ys[j] * dot) / norm;
                    }
                }
                acc(&self.nodes, 0, dx);
            }
            Op::CrossEntropy { targets, ignore } => {
                let logits = input_val(0);
                let k = logits.shape[1];
                let counted = targets
                    .iter()
                    .filter(|t| Some(**t) != *ignore)
                    .count()
                    .max(1) as f64;
                let scale = g[0] / counted;
                let mut dx = vec![0.0; logits.data.len()];
                for (i, &t) in targets.iter().enumerate() {
                    if Some(t) == *ignore {
                        continue;
                    }
                    let row = &logits.data[i * k..(i + 1) * k];
                    let mut probs = row.to_vec();
                    softmax_in_place(&mut probs);
                    for j in 0..k {
                        let indicator = if j == t { 1.0 } else { 0.0 };
                        dx[i * k + j] = (probs[j] - indicator) * scale;
                    }
                }
                acc(&self.nodes, 0, dx);
            }
            Op::BinaryCrossEntropy => {
                let z = input_val(0);
                let t = input_val(1);
                let n = z.data.len().max(1) as f64;
                let scale = g[0] / n;
                let dz = z
                    .data
                    .iter()
                    .zip(&t.data)
                    .map(|(&zv, &tv)| (sigmoid(zv) - tv) * scale)
                    .collect();
                acc(&self.nodes, 0, dz);
                // gradient w.r.t. binary targets is never needed
            }
            Op::Mse => {
                let a = input_val(0);
                let b = input_val(1);
                let n = a.data.len().max(1) as f64;
                let scale = 2.0 * g[0] / n;
                let da: Vec<f64> = a
                    .data
                    .iter()
                    .zip(&b.data)
                    .map(|(x, y)| (x - y) * scale)
                    .collect();
                let db = da.iter().map(|v| -v).collect();
                acc(&self.nodes, 0, da);
                acc(&self.nodes, 1, db);
            }
        }
    }
}

// ---- raw kernels ----------------------------------------------------------

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn softmax_in_place(row: &mut [f64]) {
    if row.is_empty() {
        return;
    }
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn l2_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

// ---- gradient checking ----------------------------------------------------

/// Outcome of comparing an analytic gradient with central finite differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Compare the tape gradient of `f` at `x` against central finite differences
/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` per coordinate. Relative
/// error uses `max(|analytic|, |numeric|, 1e-8)` as denominator.
pub fn gradient_check<F>(f: F, x: &Tensor, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Tensor) -> Result<Tensor>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(x);
    let out = f(&mut tape, &leaf)?;
    let grads = tape.backward(&out)?;
    let analytic = grads.wrt(&leaf);

    let mut max_rel_err: f64 = 0.0;
    for i in 0..x.len() {
        let eval = |v: f64| -> Result<f64> {
            let mut probe = x.detached();
            probe.data_mut()[i] = v;
            let mut t = Tape::new();
            // no leaf: pure forward evaluation
            Ok(f(&mut t, &probe)?.value())
        };
        let x_i = x.data()[i];
        let plus = eval(x_i + eps)?;
        let minus = eval(x_i - eps)?;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        max_rel_err = max_rel_err.max((a - numeric).abs() / denom);
    }
    Ok(GradCheckReport {
        max_rel_err,
        pass: max_rel_err < tol,
    })
}
