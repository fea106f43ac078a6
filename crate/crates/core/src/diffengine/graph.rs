//! Recorded expression graphs over row-batched matrices.
//!
//! A graph is a program: nodes are appended in topological order and refer only to
//! earlier nodes. The same graph is re-run on new parameters and data without being
//! rebuilt. Values are matrices whose rows are independent samples, so most
//! primitives act row-wise; `Sum`, `TileRows` and `StackColumns` are the only ops
//! that mix rows.
//!
//! Input gradients are produced by [`ExprGraph::append_input_tangent`], which appends
//! a forward-mode tangent program for every input dimension at once. The tangents of
//! all `n` input directions are stacked along the row axis: for a node with value of
//! shape `R×C`, its tangent has shape `(n·R)×C` and rows `j·R..(j+1)·R` hold the
//! derivative along input coordinate `j`. Because the tangent program is made of the
//! same primitives, ordinary reverse mode over the extended graph yields parameter
//! gradients of anything built from the input gradient.

use std::sync::Arc;

use super::mat::Mat;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    /// Slice `offset..offset+rows*cols` of the flat parameter vector, row-major.
    Param { offset: usize, rows: usize, cols: usize },
    /// Runtime data; the row count is whatever the caller supplies.
    Data { slot: usize },
    Const(Arc<Mat>),
    /// Stacked identity rows: `(dim·R)×dim`, where `R` is the row count of `rows_of`.
    Seed { dim: usize, rows_of: NodeId },
    /// `x · wᵀ`
    MatMulT { x: NodeId, w: NodeId },
    /// `x + 1·bias` with `bias` a single row.
    AddRow { x: NodeId, bias: NodeId },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Softplus(NodeId),
    Sigmoid(NodeId),
    Square(NodeId),
    /// `a·x + b` elementwise.
    Affine { x: NodeId, a: f64, b: f64 },
    /// Sum of every element, giving `1×1`.
    Sum(NodeId),
    /// Vertical concatenation of `times` copies.
    TileRows { x: NodeId, times: usize },
    /// `R×C` to `(C·R)×1`, column `j` landing in rows `j·R..(j+1)·R`.
    StackColumns(NodeId),
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Param { .. } => "param",
            Op::Data { .. } => "data",
            Op::Const(_) => "const",
            Op::Seed { .. } => "seed",
            Op::MatMulT { .. } => "matmul",
            Op::AddRow { .. } => "add_row",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Softplus(_) => "softplus",
            Op::Sigmoid(_) => "sigmoid",
            Op::Square(_) => "square",
            Op::Affine { .. } => "affine",
            Op::Sum(_) => "sum",
            Op::TileRows { .. } => "tile_rows",
            Op::StackColumns(_) => "stack_columns",
        }
    }
}

/// Overflow-safe softplus, `max(x,0) + ln(1 + e^{-|x|})`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, Default)]
pub struct ExprGraph {
    nodes: Vec<Op>,
    output: Option<NodeId>,
    param_count: usize,
    data_cols: Vec<Option<usize>>,
}

impl ExprGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Length of the flat parameter vector the graph reads.
    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn data_slots(&self) -> usize {
        self.data_cols.len()
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    pub fn set_output(&mut self, node: NodeId) {
        self.output = Some(node);
    }

    fn push(&mut self, op: Op) -> NodeId {
        self.nodes.push(op);
        NodeId(self.nodes.len() - 1)
    }

    /// A parameter block at an explicit offset. The graph's parameter count grows to cover it.
    pub fn param(&mut self, offset: usize, rows: usize, cols: usize) -> NodeId {
        self.param_count = self.param_count.max(offset + rows * cols);
        self.push(Op::Param { offset, rows, cols })
    }

    pub fn data(&mut self, slot: usize, cols: usize) -> NodeId {
        if self.data_cols.len() <= slot {
            self.data_cols.resize(slot + 1, None);
        }
        self.data_cols[slot] = Some(cols);
        self.push(Op::Data { slot })
    }

    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(Op::Const(Arc::new(value)))
    }

    pub fn constant_shared(&mut self, value: Arc<Mat>) -> NodeId {
        self.push(Op::Const(value))
    }

    pub fn matmul_t(&mut self, x: NodeId, w: NodeId) -> NodeId {
        self.push(Op::MatMulT { x, w })
    }

    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::AddRow { x, bias })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Softplus(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sigmoid(x))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Square(x))
    }

    pub fn affine(&mut self, x: NodeId, a: f64, b: f64) -> NodeId {
        self.push(Op::Affine { x, a, b })
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        self.affine(x, factor, 0.0)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x))
    }

    pub fn tile_rows(&mut self, x: NodeId, times: usize) -> NodeId {
        if times == 1 {
            return x;
        }
        self.push(Op::TileRows { x, times })
    }

    pub fn stack_columns(&mut self, x: NodeId) -> NodeId {
        self.push(Op::StackColumns(x))
    }

    /// Append the tangent program of `of` with respect to data slot `slot`, returning the
    /// node holding the stacked tangent. For a per-sample scalar output (`R×1`) the result
    /// is `(n·R)×1`, i.e. the input gradient arranged coordinate-major.
    ///
    /// Only row-wise primitives are supported between the input and `of`; weights feeding
    /// a matmul must not depend on the input.
    pub fn append_input_tangent(&mut self, of: NodeId, slot: usize) -> Result<NodeId> {
        let dim = self
            .data_cols
            .get(slot)
            .copied()
            .flatten()
            .ok_or_else(|| Error::config(format!("graph has no data slot {slot}")))?;
        let end = of.0 + 1;
        let mut tangent: Vec<Option<NodeId>> = vec![None; end];
        for i in 0..end {
            let op = self.nodes[i].clone();
            let id = NodeId(i);
            let t = match op {
                Op::Param { .. } | Op::Const(_) => None,
                Op::Data { slot: s, .. } => {
                    if s == slot {
                        Some(self.push(Op::Seed { dim, rows_of: id }))
                    } else {
                        None
                    }
                }
                Op::Seed { .. } | Op::Sum(_) | Op::TileRows { .. } | Op::StackColumns(_) => {
                    if self.depends_on_tangent(&op, &tangent) {
                        return Err(Error::Unsupported(format!(
                            "input tangent through non-row-wise op '{}' at node {i}",
                            op.name()
                        )));
                    }
                    None
                }
                Op::MatMulT { x, w } => {
                    if tangent[w.0].is_some() {
                        return Err(Error::Unsupported(format!(
                            "matmul weights at node {} depend on the input",
                            w.0
                        )));
                    }
                    tangent[x.0].map(|tx| self.matmul_t(tx, w))
                }
                Op::AddRow { x, bias } => {
                    if tangent[bias.0].is_some() {
                        return Err(Error::Unsupported(format!(
                            "bias at node {} depends on the input",
                            bias.0
                        )));
                    }
                    tangent[x.0]
                }
                Op::Add(a, b) => match (tangent[a.0], tangent[b.0]) {
                    (Some(ta), Some(tb)) => Some(self.add(ta, tb)),
                    (Some(t), None) | (None, Some(t)) => Some(t),
                    (None, None) => None,
                },
                Op::Sub(a, b) => match (tangent[a.0], tangent[b.0]) {
                    (Some(ta), Some(tb)) => Some(self.sub(ta, tb)),
                    (Some(ta), None) => Some(ta),
                    (None, Some(tb)) => Some(self.scale(tb, -1.0)),
                    (None, None) => None,
                },
                Op::Mul(a, b) => {
                    let left = tangent[a.0].map(|ta| {
                        let bt = self.tile_rows(b, dim);
                        self.mul(bt, ta)
                    });
                    let right = tangent[b.0].map(|tb| {
                        let at = self.tile_rows(a, dim);
                        self.mul(at, tb)
                    });
                    match (left, right) {
                        (Some(l), Some(r)) => Some(self.add(l, r)),
                        (l, r) => l.or(r),
                    }
                }
                Op::Softplus(x) => tangent[x.0].map(|tx| {
                    let d = self.sigmoid(x);
                    let d = self.tile_rows(d, dim);
                    self.mul(d, tx)
                }),
                Op::Sigmoid(x) => tangent[x.0].map(|tx| {
                    let one_minus = self.affine(id, -1.0, 1.0);
                    let d = self.mul(id, one_minus);
                    let d = self.tile_rows(d, dim);
                    self.mul(d, tx)
                }),
                Op::Square(x) => tangent[x.0].map(|tx| {
                    let d = self.affine(x, 2.0, 0.0);
                    let d = self.tile_rows(d, dim);
                    self.mul(d, tx)
                }),
                Op::Affine { x, a, .. } => tangent[x.0].map(|tx| self.affine(tx, a, 0.0)),
            };
            tangent[i] = t;
        }
        match tangent[of.0] {
            Some(t) => Ok(t),
            // Output does not depend on the input: its gradient is identically zero.
            None => {
                let zero = self.affine(of, 0.0, 0.0);
                let stacked = self.tile_rows(zero, dim);
                Ok(stacked)
            }
        }
    }

    fn depends_on_tangent(&self, op: &Op, tangent: &[Option<NodeId>]) -> bool {
        match op {
            Op::Sum(x) | Op::StackColumns(x) | Op::TileRows { x, .. } => tangent[x.0].is_some(),
            _ => false,
        }
    }

    /// Run the program, returning every node's value. Every value is checked for finiteness.
    pub fn forward(&self, params: &[f64], data: &[&Mat]) -> Result<Vec<Mat>> {
        self.check_inputs(params, data)?;
        let mut values: Vec<Mat> = Vec::with_capacity(self.nodes.len());
        for (i, op) in self.nodes.iter().enumerate() {
            let v = self.eval_node(op, &values, params, data)?;
            if !v.is_finite() {
                return Err(Error::NonFinite { node: i, op: op.name() });
            }
            values.push(v);
        }
        Ok(values)
    }

    fn check_inputs(&self, params: &[f64], data: &[&Mat]) -> Result<()> {
        if params.len() != self.param_count {
            return Err(Error::config(format!(
                "graph expects {} parameters, got {}",
                self.param_count,
                params.len()
            )));
        }
        if data.len() < self.data_cols.len() {
            return Err(Error::config(format!(
                "graph expects {} data inputs, got {}",
                self.data_cols.len(),
                data.len()
            )));
        }
        for (slot, cols) in self.data_cols.iter().enumerate() {
            if let Some(cols) = cols {
                if data[slot].cols() != *cols {
                    return Err(Error::config(format!(
                        "data slot {slot} expects {cols} columns, got {}",
                        data[slot].cols()
                    )));
                }
            }
        }
        Ok(())
    }

    fn eval_node(&self, op: &Op, v: &[Mat], params: &[f64], data: &[&Mat]) -> Result<Mat> {
        let out = match op {
            Op::Param { offset, rows, cols } => {
                Mat::from_vec(*rows, *cols, params[*offset..offset + rows * cols].to_vec())?
            }
            Op::Data { slot, .. } => data[*slot].clone(),
            Op::Const(m) => (**m).clone(),
            Op::Seed { dim, rows_of } => {
                let r = v[rows_of.0].rows();
                let mut m = Mat::zeros(dim * r, *dim);
                for j in 0..*dim {
                    for b in 0..r {
                        m.set(j * r + b, j, 1.0);
                    }
                }
                m
            }
            Op::MatMulT { x, w } => {
                let (x, w) = (&v[x.0], &v[w.0]);
                if x.cols() != w.cols() {
                    return Err(Error::config(format!(
                        "matmul shape mismatch: {:?} x {:?}ᵀ",
                        x.shape(),
                        w.shape()
                    )));
                }
                x.matmul_t(w)
            }
            Op::AddRow { x, bias } => {
                let (x, b) = (&v[x.0], &v[bias.0]);
                if b.rows() != 1 || b.cols() != x.cols() {
                    return Err(Error::config(format!(
                        "bias shape {:?} does not fit {:?}",
                        b.shape(),
                        x.shape()
                    )));
                }
                let mut out = x.clone();
                let bias = b.as_slice();
                for r in 0..out.rows() {
                    for (o, bb) in out.row_mut(r).iter_mut().zip(bias) {
                        *o += bb;
                    }
                }
                out
            }
            Op::Add(a, b) => binary(&v[a.0], &v[b.0], "add", |x, y| x + y)?,
            Op::Sub(a, b) => binary(&v[a.0], &v[b.0], "sub", |x, y| x - y)?,
            Op::Mul(a, b) => binary(&v[a.0], &v[b.0], "mul", |x, y| x * y)?,
            Op::Softplus(x) => v[x.0].map(softplus),
            Op::Sigmoid(x) => v[x.0].map(sigmoid),
            Op::Square(x) => v[x.0].map(|t| t * t),
            Op::Affine { x, a, b } => {
                let (a, b) = (*a, *b);
                v[x.0].map(|t| a * t + b)
            }
            Op::Sum(x) => Mat::filled(1, 1, v[x.0].as_slice().iter().sum()),
            Op::TileRows { x, times } => {
                let src = &v[x.0];
                let mut data = Vec::with_capacity(src.as_slice().len() * times);
                for _ in 0..*times {
                    data.extend_from_slice(src.as_slice());
                }
                Mat::from_vec(src.rows() * times, src.cols(), data)?
            }
            Op::StackColumns(x) => {
                let src = &v[x.0];
                let (r, c) = src.shape();
                let mut out = Mat::zeros(r * c, 1);
                for j in 0..c {
                    for b in 0..r {
                        out.as_mut_slice()[j * r + b] = src.get(b, j);
                    }
                }
                out
            }
        };
        Ok(out)
    }

    /// Reverse sweep from a scalar (`1×1`) node. Returns the gradient with respect to the
    /// flat parameter vector.
    pub fn backward(&self, values: &[Mat], from: NodeId) -> Result<Vec<f64>> {
        if values[from.0].shape() != (1, 1) {
            return Err(Error::contract(format!(
                "reverse sweep needs a scalar node, node {} has shape {:?}",
                from.0,
                values[from.0].shape()
            )));
        }
        let mut grads: Vec<Option<Mat>> = vec![None; from.0 + 1];
        grads[from.0] = Some(Mat::filled(1, 1, 1.0));
        let mut param_grad = vec![0.0; self.param_count];

        for i in (0..=from.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i] {
                Op::Param { offset, .. } => {
                    for (p, d) in param_grad[*offset..].iter_mut().zip(g.as_slice()) {
                        *p += d;
                    }
                }
                Op::Data { .. } | Op::Const(_) | Op::Seed { .. } => {}
                Op::MatMulT { x, w } => {
                    let dx = g.matmul(&values[w.0]);
                    accumulate(&mut grads, *x, dx);
                    let wv = &values[w.0];
                    let slot = grads[w.0].get_or_insert_with(|| Mat::zeros(wv.rows(), wv.cols()));
                    g.t_matmul_acc(&values[x.0], slot);
                }
                Op::AddRow { x, bias } => {
                    let db = Mat::row_vector(&g.column_sums());
                    accumulate(&mut grads, *bias, db);
                    accumulate(&mut grads, *x, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|t| -t));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(&values[b.0], |d, y| d * y);
                    let db = g.zip_map(&values[a.0], |d, x| d * x);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Softplus(x) => {
                    let dx = g.zip_map(&values[x.0], |d, t| d * sigmoid(t));
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let dx = g.zip_map(&values[i], |d, s| d * s * (1.0 - s));
                    accumulate(&mut grads, *x, dx);
                }
                Op::Square(x) => {
                    let dx = g.zip_map(&values[x.0], |d, t| 2.0 * d * t);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Affine { x, a, .. } => {
                    let a = *a;
                    accumulate(&mut grads, *x, g.map(|d| a * d));
                }
                Op::Sum(x) => {
                    let (r, c) = values[x.0].shape();
                    accumulate(&mut grads, *x, Mat::filled(r, c, g.get(0, 0)));
                }
                Op::TileRows { x, times } => {
                    let (r, c) = values[x.0].shape();
                    let mut dx = Mat::zeros(r, c);
                    let block = r * c;
                    for t in 0..*times {
                        for (o, d) in dx.as_mut_slice().iter_mut().zip(&g.as_slice()[t * block..(t + 1) * block]) {
                            *o += d;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::StackColumns(x) => {
                    let (r, c) = values[x.0].shape();
                    let mut dx = Mat::zeros(r, c);
                    for j in 0..c {
                        for b in 0..r {
                            dx.set(b, j, g.as_slice()[j * r + b]);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
            }
        }
        if let Some(bad) = param_grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient at parameter {bad}")));
        }
        Ok(param_grad)
    }
}

fn binary(a: &Mat, b: &Mat, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Mat> {
    if a.shape() != b.shape() {
        return Err(Error::config(format!("{name}: shape {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a.zip_map(b, f))
}

fn accumulate(grads: &mut [Option<Mat>], at: NodeId, g: Mat) {
    match &mut grads[at.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
