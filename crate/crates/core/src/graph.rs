//! Reverse-mode automatic differentiation on an append-only graph.
//!
//! Nodes are evaluated eagerly as they are built, so every node always has a
//! cached forward value. [`Graph::grad`] walks the graph backwards and emits
//! the adjoint computation *as new graph nodes*: the returned gradients are
//! ordinary differentiable nodes, so calling `grad` on an expression built
//! from them yields second-order derivatives (reverse-over-reverse). Every
//! op's backward rule is expressed in terms of ops that themselves have
//! backward rules, which is what makes the nesting close.
//!
//! Shape discipline is strict: the only broadcast allowed is adding a 1×C
//! bias row to each row of an R×C matrix ([`Graph::add_row_vec`]). All other
//! mismatches are errors carrying both shapes.

use alloc::vec;
use alloc::vec::Vec;

use crate::mathx;
use crate::tensor::Tensor;

/// Handle to a node inside one [`Graph`]. Ids from different graphs must not
/// be mixed; indices are only meaningful within their owning graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("shape mismatch in {op}: {lhs_rows}x{lhs_cols} vs {rhs_rows}x{rhs_cols}")]
    ShapeMismatch {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },
    #[error("grad output must be scalar, got {rows}x{cols}")]
    NonScalarOutput { rows: usize, cols: usize },
    #[error("node id {id} not in graph of {len} nodes")]
    UnknownNode { id: usize, len: usize },
    #[error("{op}: index {index} out of range {bound}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
}

type Result<T> = core::result::Result<T, GraphError>;

#[derive(Debug, Clone)]
enum Op {
    Param,
    Const,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    /// Matrix plus a 1×C row vector added to every row.
    AddRowVec(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Neg(NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddScalar(NodeId, f64),
    MulScalar(NodeId, f64),
    Relu(NodeId),
    /// 1 where input > 0 else 0; derivative defined as zero.
    Step(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    Abs(NodeId),
    /// -1/0/+1 by sign; derivative defined as zero.
    Sign(NodeId),
    /// Total sum to 1×1.
    Sum(NodeId),
    /// R×C → R×1 sums across each row.
    RowSums(NodeId),
    /// R×C → 1×C sums down each column.
    ColSums(NodeId),
    /// R×C → R×1 picking column `idx[r]` per row.
    PickCol(NodeId, Vec<usize>),
    /// R×1 → R×`cols` scattering into column `idx[r]` per row.
    PutCol(NodeId, Vec<usize>, usize),
    /// R×C → 1×C picking row `idx[c]` per column.
    PickRow(NodeId, Vec<usize>),
    /// 1×C → `rows`×C scattering into row `idx[c]` per column.
    PutRow(NodeId, Vec<usize>, usize),
    /// R×1 → R×`cols` replicating the column.
    BcastCols(NodeId, usize),
    /// 1×C → `rows`×C replicating the row.
    BcastRows(NodeId, usize),
    /// 1×1 → `rows`×`cols` fill.
    ScalarBcast(NodeId, usize, usize),
    /// Identity forward, zero backward.
    Detach(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only computation graph with cached forward values.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Cached forward value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(GraphError::UnknownNode {
                id: id.0,
                len: self.nodes.len(),
            });
        }
        Ok(())
    }

    fn shape_eq(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (lr, lc) = self.value(a).shape();
        let (rr, rc) = self.value(b).shape();
        if (lr, lc) != (rr, rc) {
            return Err(GraphError::ShapeMismatch {
                op,
                lhs_rows: lr,
                lhs_cols: lc,
                rhs_rows: rr,
                rhs_cols: rc,
            });
        }
        Ok(())
    }

    // ---- leaves ----

    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Param, value)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const, value)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    // ---- binary ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if ac != br {
            return Err(GraphError::ShapeMismatch {
                op: "matmul",
                lhs_rows: ar,
                lhs_cols: ac,
                rhs_rows: br,
                rhs_cols: bc,
            });
        }
        let v = self.value(a).matmul(self.value(b));
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        self.shape_eq("add", a, b)?;
        let v = self.value(a).zip(self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add(a, b), v))
    }

    /// `m + bias` where `bias` is a 1×C row added to every row of `m`.
    pub fn add_row_vec(&mut self, m: NodeId, bias: NodeId) -> Result<NodeId> {
        self.check(m)?;
        self.check(bias)?;
        let (mr, mc) = self.value(m).shape();
        let (br, bc) = self.value(bias).shape();
        if br != 1 || bc != mc {
            return Err(GraphError::ShapeMismatch {
                op: "add_row_vec",
                lhs_rows: mr,
                lhs_cols: mc,
                rhs_rows: br,
                rhs_cols: bc,
            });
        }
        let mut v = self.value(m).clone();
        let bias_t = self.value(bias).clone();
        for r in 0..mr {
            for c in 0..mc {
                let x = v.get(r, c) + bias_t.get(0, c);
                v.set(r, c, x);
            }
        }
        Ok(self.push(Op::AddRowVec(m, bias), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        self.shape_eq("sub", a, b)?;
        let v = self.value(a).zip(self.value(b), |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        self.shape_eq("mul", a, b)?;
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        self.shape_eq("div", a, b)?;
        let v = self.value(a).zip(self.value(b), |x, y| x / y);
        Ok(self.push(Op::Div(a, b), v))
    }

    // ---- unary ----

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = self.value(a).map(|x| -x);
        Ok(self.push(Op::Neg(a), v))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.check(a)?;
        let v = self.value(a).map(|x| x + c);
        Ok(self.push(Op::AddScalar(a, c), v))
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.check(a)?;
        let v = self.value(a).map(|x| x * c);
        Ok(self.push(Op::MulScalar(a, c), v))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        Ok(self.push(Op::Relu(a), v))
    }

    pub fn step(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
        Ok(self.push(Op::Step(a), v))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = self.value(a).map(mathx::tanh);
        Ok(self.push(Op::Tanh(a), v))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = self.value(a).map(mathx::sigmoid);
        Ok(self.push(Op::Sigmoid(a), v))
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = self.value(a).map(mathx::softplus);
        Ok(self.push(Op::Softplus(a), v))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = self.value(a).map(mathx::exp);
        Ok(self.push(Op::Exp(a), v))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = self.value(a).map(mathx::ln);
        Ok(self.push(Op::Log(a), v))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = self.value(a).map(|x| x * x);
        Ok(self.push(Op::Square(a), v))
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = self.value(a).map(mathx::abs);
        Ok(self.push(Op::Abs(a), v))
    }

    pub fn sign(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = self.value(a).map(|x| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        });
        Ok(self.push(Op::Sign(a), v))
    }

    pub fn detach(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = self.value(a).clone();
        Ok(self.push(Op::Detach(a), v))
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = Tensor::scalar(self.value(a).sum());
        Ok(self.push(Op::Sum(a), v))
    }

    pub fn row_sums(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let t = self.value(a);
        let mut v = Tensor::zeros(t.rows(), 1);
        for r in 0..t.rows() {
            v.set(r, 0, t.row_slice(r).iter().sum());
        }
        Ok(self.push(Op::RowSums(a), v))
    }

    pub fn col_sums(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let t = self.value(a);
        let mut v = Tensor::zeros(1, t.cols());
        for r in 0..t.rows() {
            for c in 0..t.cols() {
                v.set(0, c, v.get(0, c) + t.get(r, c));
            }
        }
        Ok(self.push(Op::ColSums(a), v))
    }

    // ---- gather / scatter ----

    /// Picks `a[r, idx[r]]` for each row, producing R×1.
    pub fn pick_col(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        self.check(a)?;
        let t = self.value(a);
        let (rows, cols) = t.shape();
        if idx.len() != rows {
            return Err(GraphError::IndexOutOfRange {
                op: "pick_col",
                index: idx.len(),
                bound: rows,
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= cols) {
            return Err(GraphError::IndexOutOfRange {
                op: "pick_col",
                index: bad,
                bound: cols,
            });
        }
        let mut v = Tensor::zeros(rows, 1);
        for r in 0..rows {
            v.set(r, 0, t.get(r, idx[r]));
        }
        Ok(self.push(Op::PickCol(a, idx.to_vec()), v))
    }

    /// Scatters an R×1 column into an R×`cols` matrix at `idx[r]` per row.
    pub fn put_col(&mut self, a: NodeId, idx: &[usize], cols: usize) -> Result<NodeId> {
        self.check(a)?;
        let t = self.value(a);
        let (rows, c1) = t.shape();
        if c1 != 1 || idx.len() != rows {
            return Err(GraphError::ShapeMismatch {
                op: "put_col",
                lhs_rows: rows,
                lhs_cols: c1,
                rhs_rows: idx.len(),
                rhs_cols: cols,
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= cols) {
            return Err(GraphError::IndexOutOfRange {
                op: "put_col",
                index: bad,
                bound: cols,
            });
        }
        let mut v = Tensor::zeros(rows, cols);
        for r in 0..rows {
            v.set(r, idx[r], t.get(r, 0));
        }
        Ok(self.push(Op::PutCol(a, idx.to_vec(), cols), v))
    }

    /// Picks `a[idx[c], c]` for each column, producing 1×C.
    pub fn pick_row(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        self.check(a)?;
        let t = self.value(a);
        let (rows, cols) = t.shape();
        if idx.len() != cols {
            return Err(GraphError::IndexOutOfRange {
                op: "pick_row",
                index: idx.len(),
                bound: cols,
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(GraphError::IndexOutOfRange {
                op: "pick_row",
                index: bad,
                bound: rows,
            });
        }
        let mut v = Tensor::zeros(1, cols);
        for c in 0..cols {
            v.set(0, c, t.get(idx[c], c));
        }
        Ok(self.push(Op::PickRow(a, idx.to_vec()), v))
    }

    /// Scatters a 1×C row into a `rows`×C matrix at `idx[c]` per column.
    pub fn put_row(&mut self, a: NodeId, idx: &[usize], rows: usize) -> Result<NodeId> {
        self.check(a)?;
        let t = self.value(a);
        let (r1, cols) = t.shape();
        if r1 != 1 || idx.len() != cols {
            return Err(GraphError::ShapeMismatch {
                op: "put_row",
                lhs_rows: r1,
                lhs_cols: cols,
                rhs_rows: rows,
                rhs_cols: idx.len(),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(GraphError::IndexOutOfRange {
                op: "put_row",
                index: bad,
                bound: rows,
            });
        }
        let mut v = Tensor::zeros(rows, cols);
        for c in 0..cols {
            v.set(idx[c], c, t.get(0, c));
        }
        Ok(self.push(Op::PutRow(a, idx.to_vec(), rows), v))
    }

    // ---- broadcasts ----

    pub fn bcast_cols(&mut self, a: NodeId, cols: usize) -> Result<NodeId> {
        self.check(a)?;
        let t = self.value(a);
        let (rows, c1) = t.shape();
        if c1 != 1 {
            return Err(GraphError::ShapeMismatch {
                op: "bcast_cols",
                lhs_rows: rows,
                lhs_cols: c1,
                rhs_rows: rows,
                rhs_cols: cols,
            });
        }
        let mut v = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let x = t.get(r, 0);
            for c in 0..cols {
                v.set(r, c, x);
            }
        }
        Ok(self.push(Op::BcastCols(a, cols), v))
    }

    pub fn bcast_rows(&mut self, a: NodeId, rows: usize) -> Result<NodeId> {
        self.check(a)?;
        let t = self.value(a);
        let (r1, cols) = t.shape();
        if r1 != 1 {
            return Err(GraphError::ShapeMismatch {
                op: "bcast_rows",
                lhs_rows: r1,
                lhs_cols: cols,
                rhs_rows: rows,
                rhs_cols: cols,
            });
        }
        let mut v = Tensor::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                v.set(r, c, t.get(0, c));
            }
        }
        Ok(self.push(Op::BcastRows(a, rows), v))
    }

    pub fn scalar_bcast(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        self.check(a)?;
        let t = self.value(a);
        if !t.is_scalar() {
            let (r, c) = t.shape();
            return Err(GraphError::ShapeMismatch {
                op: "scalar_bcast",
                lhs_rows: r,
                lhs_cols: c,
                rhs_rows: rows,
                rhs_cols: cols,
            });
        }
        let v = Tensor::filled(rows, cols, t.scalar_value());
        Ok(self.push(Op::ScalarBcast(a, rows, cols), v))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = self.value(a).transpose();
        Ok(self.push(Op::Transpose(a), v))
    }

    // ---- composed helpers ----

    /// Mean of all entries, as a scalar node.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.mul_scalar(s, 1.0 / n)
    }

    /// Column means: R×C → 1×C.
    pub fn col_means(&mut self, a: NodeId) -> Result<NodeId> {
        let rows = self.value(a).rows() as f64;
        let s = self.col_sums(a)?;
        self.mul_scalar(s, 1.0 / rows)
    }

    /// Per-row maximum (R×C → R×1), argmax fixed at forward time.
    pub fn row_max(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let t = self.value(a);
        let idx: Vec<usize> = (0..t.rows())
            .map(|r| {
                let row = t.row_slice(r);
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect();
        self.pick_col(a, &idx)
    }

    /// Per-column maximum (R×C → 1×C), argmax fixed at forward time.
    pub fn col_max(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let t = self.value(a);
        let idx: Vec<usize> = (0..t.cols())
            .map(|c| {
                let mut best = 0;
                for r in 1..t.rows() {
                    if t.get(r, c) > t.get(best, c) {
                        best = r;
                    }
                }
                best
            })
            .collect();
        self.pick_row(a, &idx)
    }

    /// Sum of squared entries, as a scalar node.
    pub fn l2_squared(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.square(a)?;
        self.sum(s)
    }

    /// Sum of absolute entries, as a scalar node.
    pub fn l1_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.abs(a)?;
        self.sum(s)
    }

    /// Mean softmax cross-entropy of B×C logits against per-row class
    /// indices, computed with max-subtraction for stability. The subtracted
    /// row maxima are detached, which is exact: the loss is mathematically
    /// independent of the shift.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        self.check(logits)?;
        let (rows, cols) = self.value(logits).shape();
        if targets.len() != rows {
            return Err(GraphError::IndexOutOfRange {
                op: "softmax_cross_entropy",
                index: targets.len(),
                bound: rows,
            });
        }
        let m = self.row_max(logits)?;
        let m = self.detach(m)?;
        let mb = self.bcast_cols(m, cols)?;
        let shifted = self.sub(logits, mb)?;
        let e = self.exp(shifted)?;
        let rs = self.row_sums(e)?;
        let lse = self.log(rs)?;
        let picked = self.pick_col(shifted, targets)?;
        let per_row = self.sub(lse, picked)?;
        self.mean(per_row)
    }

    // ---- differentiation ----

    /// Gradients of a scalar `output` with respect to each node in `wrt`.
    ///
    /// The returned ids are ordinary graph nodes holding the gradient
    /// tensors; differentiating an expression built from them performs
    /// double backpropagation. Nodes that do not influence `output` get a
    /// zero gradient of their own shape.
    pub fn grad(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        self.check(output)?;
        for &w in wrt {
            self.check(w)?;
        }
        let out_val = self.value(output);
        if !out_val.is_scalar() {
            let (r, c) = out_val.shape();
            return Err(GraphError::NonScalarOutput { rows: r, cols: c });
        }

        // Ancestors of `output`; node indices are already topological.
        let mut reachable = vec![false; output.0 + 1];
        reachable[output.0] = true;
        for i in (0..=output.0).rev() {
            if reachable[i] {
                for inp in op_inputs(&self.nodes[i].op) {
                    reachable[inp.0] = true;
                }
            }
        }

        let mut adjoint: Vec<Option<NodeId>> = vec![None; output.0 + 1];
        adjoint[output.0] = Some(self.scalar(1.0));

        for i in (0..=output.0).rev() {
            if !reachable[i] {
                continue;
            }
            let g = match adjoint[i] {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            for (input, contrib) in self.backward(&op, NodeId(i), g)? {
                if input.0 > output.0 {
                    continue;
                }
                adjoint[input.0] = match adjoint[input.0] {
                    None => Some(contrib),
                    Some(prev) => Some(self.add(prev, contrib)?),
                };
            }
        }

        wrt.iter()
            .map(|&w| match adjoint.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let (r, c) = self.value(w).shape();
                    Ok(self.constant(Tensor::zeros(r, c)))
                }
            })
            .collect()
    }

    /// Adjoint contributions of one node: pairs of (input, gradient node).
    /// Inputs through which no gradient flows (detach, step, sign, pick
    /// indices) are simply omitted.
    fn backward(&mut self, op: &Op, node: NodeId, g: NodeId) -> Result<Vec<(NodeId, NodeId)>> {
        let out = Vec::new();
        let mut out = out;
        match *op {
            Op::Param | Op::Const => {}
            Op::MatMul(a, b) => {
                let bt = self.transpose(b)?;
                let da = self.matmul(g, bt)?;
                let at = self.transpose(a)?;
                let db = self.matmul(at, g)?;
                out.push((a, da));
                out.push((b, db));
            }
            Op::Transpose(a) => {
                let da = self.transpose(g)?;
                out.push((a, da));
            }
            Op::Add(a, b) => {
                out.push((a, g));
                out.push((b, g));
            }
            Op::AddRowVec(m, bias) => {
                out.push((m, g));
                let db = self.col_sums(g)?;
                out.push((bias, db));
            }
            Op::Sub(a, b) => {
                out.push((a, g));
                let db = self.neg(g)?;
                out.push((b, db));
            }
            Op::Neg(a) => {
                let da = self.neg(g)?;
                out.push((a, da));
            }
            Op::Mul(a, b) => {
                let da = self.mul(g, b)?;
                let db = self.mul(g, a)?;
                out.push((a, da));
                out.push((b, db));
            }
            Op::Div(a, b) => {
                let da = self.div(g, b)?;
                out.push((a, da));
                let ga = self.mul(g, a)?;
                let b2 = self.square(b)?;
                let q = self.div(ga, b2)?;
                let db = self.neg(q)?;
                out.push((b, db));
            }
            Op::AddScalar(a, _) => {
                out.push((a, g));
            }
            Op::MulScalar(a, c) => {
                let da = self.mul_scalar(g, c)?;
                out.push((a, da));
            }
            Op::Relu(a) => {
                let s = self.step(a)?;
                let da = self.mul(g, s)?;
                out.push((a, da));
            }
            Op::Step(_) | Op::Sign(_) | Op::Detach(_) => {}
            Op::Tanh(a) => {
                let y2 = self.square(node)?;
                let y2n = self.neg(y2)?;
                let one_minus = self.add_scalar(y2n, 1.0)?;
                let da = self.mul(g, one_minus)?;
                out.push((a, da));
            }
            Op::Sigmoid(a) => {
                let yn = self.neg(node)?;
                let one_minus = self.add_scalar(yn, 1.0)?;
                let yy = self.mul(node, one_minus)?;
                let da = self.mul(g, yy)?;
                out.push((a, da));
            }
            Op::Softplus(a) => {
                let s = self.sigmoid(a)?;
                let da = self.mul(g, s)?;
                out.push((a, da));
            }
            Op::Exp(a) => {
                let da = self.mul(g, node)?;
                out.push((a, da));
            }
            Op::Log(a) => {
                let da = self.div(g, a)?;
                out.push((a, da));
            }
            Op::Square(a) => {
                let ga = self.mul(g, a)?;
                let da = self.mul_scalar(ga, 2.0)?;
                out.push((a, da));
            }
            Op::Abs(a) => {
                let s = self.sign(a)?;
                let da = self.mul(g, s)?;
                out.push((a, da));
            }
            Op::Sum(a) => {
                let (r, c) = self.value(a).shape();
                let da = self.scalar_bcast(g, r, c)?;
                out.push((a, da));
            }
            Op::RowSums(a) => {
                let cols = self.value(a).cols();
                let da = self.bcast_cols(g, cols)?;
                out.push((a, da));
            }
            Op::ColSums(a) => {
                let rows = self.value(a).rows();
                let da = self.bcast_rows(g, rows)?;
                out.push((a, da));
            }
            Op::PickCol(a, ref idx) => {
                let cols = self.value(a).cols();
                let da = self.put_col(g, idx, cols)?;
                out.push((a, da));
            }
            Op::PutCol(a, ref idx, _) => {
                let da = self.pick_col(g, idx)?;
                out.push((a, da));
            }
            Op::PickRow(a, ref idx) => {
                let rows = self.value(a).rows();
                let da = self.put_row(g, idx, rows)?;
                out.push((a, da));
            }
            Op::PutRow(a, ref idx, _) => {
                let da = self.pick_row(g, idx)?;
                out.push((a, da));
            }
            Op::BcastCols(a, _) => {
                let da = self.row_sums(g)?;
                out.push((a, da));
            }
            Op::BcastRows(a, _) => {
                let da = self.col_sums(g)?;
                out.push((a, da));
            }
            Op::ScalarBcast(a, _, _) => {
                let da = self.sum(g)?;
                out.push((a, da));
            }
        }
        Ok(out)
    }
}

fn op_inputs(op: &Op) -> Vec<NodeId> {
    match *op {
        Op::Param | Op::Const => Vec::new(),
        Op::MatMul(a, b)
        | Op::Add(a, b)
        | Op::AddRowVec(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Div(a, b) => vec![a, b],
        Op::Transpose(a)
        | Op::Neg(a)
        | Op::AddScalar(a, _)
        | Op::MulScalar(a, _)
        | Op::Relu(a)
        | Op::Step(a)
        | Op::Tanh(a)
        | Op::Sigmoid(a)
        | Op::Softplus(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Square(a)
        | Op::Abs(a)
        | Op::Sign(a)
        | Op::Sum(a)
        | Op::RowSums(a)
        | Op::ColSums(a)
        | Op::Detach(a)
        | Op::PickCol(a, _)
        | Op::PutCol(a, _, _)
        | Op::PickRow(a, _)
        | Op::PutRow(a, _, _)
        | Op::BcastCols(a, _)
        | Op::BcastRows(a, _)
        | Op::ScalarBcast(a, _, _) => vec![a],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn relu_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&[-3.0, 3.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).values(), &[0.0, 3.0]);
    }

    #[test]
    fn cross_entropy_uniform_is_ln2() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::row(&[0.0, 0.0]));
        let ce = g.softmax_cross_entropy(logits, &[0]).unwrap();
        let v = g.value(ce).scalar_value();
        assert!((v - core::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn square_gradient_analytic() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.square(x).unwrap();
        let grads = g.grad(y, &[x]).unwrap();
        assert_eq!(g.value(grads[0]).scalar_value(), 6.0);
    }

    #[test]
    fn second_order_through_l1_of_gradient() {
        // g(θ) = d(θ²)/dθ = 2θ; r = |g|; dr/dθ = 2 for θ > 0.
        let mut g = Graph::new();
        let theta = g.param(Tensor::scalar(1.5));
        let y = g.square(theta).unwrap();
        let first = g.grad(y, &[theta]).unwrap()[0];
        assert_eq!(g.value(first).scalar_value(), 3.0);
        let r = g.l1_norm(first).unwrap();
        let second = g.grad(r, &[theta]).unwrap()[0];
        assert_eq!(g.value(second).scalar_value(), 2.0);
    }

    #[test]
    fn matmul_sum_gradient_is_outer_structure() {
        // d(sum(W x))/dW = x broadcast over rows of W.
        let mut g = Graph::new();
        let w = g.param(Tensor::from_vec(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]));
        let x = g.constant(Tensor::from_vec(3, 1, vec![1.0, 2.0, 3.0]));
        let y = g.matmul(w, x).unwrap();
        let s = g.sum(y).unwrap();
        let dw = g.grad(s, &[w]).unwrap()[0];
        assert_eq!(g.value(dw).values(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(2, 3));
        let b = g.constant(Tensor::zeros(3, 3));
        let err = g.add(a, b).unwrap_err();
        match err {
            GraphError::ShapeMismatch {
                lhs_rows, rhs_rows, ..
            } => {
                assert_eq!((lhs_rows, rhs_rows), (2, 3));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn grad_of_nonscalar_rejected() {
        let mut g = Graph::new();
        let a = g.param(Tensor::zeros(2, 2));
        assert!(matches!(
            g.grad(a, &[a]),
            Err(GraphError::NonScalarOutput { .. })
        ));
    }

    #[test]
    fn unreachable_param_gets_zero_grad() {
        let mut g = Graph::new();
        let a = g.param(Tensor::scalar(2.0));
        let b = g.param(Tensor::row(&[1.0, 2.0]));
        let y = g.square(a).unwrap();
        let grads = g.grad(y, &[a, b]).unwrap();
        assert_eq!(g.value(grads[1]).values(), &[0.0, 0.0]);
    }

    #[test]
    fn determinism_bit_exact() {
        let build = || {
            let mut g = Graph::new();
            let x = g.param(Tensor::row(&[0.3, -0.7, 2.2]));
            let t = g.tanh(x).unwrap();
            let s = g.l2_squared(t).unwrap();
            let gr = g.grad(s, &[x]).unwrap()[0];
            (
                g.value(s).scalar_value(),
                g.value(gr).values().to_vec(),
            )
        };
        assert_eq!(build(), build());
    }
}
