//! Reverse-mode differentiation over recorded graphs, with input gradients that can
//! themselves be differentiated with respect to parameters.

mod graph;
mod mat;

pub use graph::{sigmoid, softplus, ExprGraph, NodeId};
pub use mat::Mat;

use crate::error::{Error, Result};

/// Value of a scalar loss and its gradient with respect to the flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub value: f64,
    pub param_grads: Vec<f64>,
}

fn output_of(graph: &ExprGraph) -> Result<NodeId> {
    graph.output().ok_or_else(|| Error::contract("graph has no output node"))
}

/// Forward values of the graph's output node, flattened row-major.
pub fn evaluate(graph: &ExprGraph, params: &[f64], data: &[&Mat]) -> Result<Mat> {
    let out = output_of(graph)?;
    let mut values = graph.forward(params, data)?;
    Ok(values.swap_remove(out.index()))
}

/// Gradient of a per-sample scalar output with respect to data slot 0.
///
/// Returns one row per sample. The tangent program is appended to a copy of `graph`,
/// so the same construction differentiated again gives mixed second derivatives.
pub fn input_gradient(graph: &ExprGraph, params: &[f64], x: &Mat) -> Result<Mat> {
    let (tangent_graph, _) = with_input_gradient(graph)?;
    let stacked = evaluate(&tangent_graph, params, &[x])?;
    Ok(unstack_gradient(&stacked, x.rows(), x.cols()))
}

/// Copy of `graph` whose output is the stacked input gradient of the original output,
/// together with the node holding the original output value.
pub fn with_input_gradient(graph: &ExprGraph) -> Result<(ExprGraph, NodeId)> {
    let out = output_of(graph)?;
    let mut g = graph.clone();
    let t = g.append_input_tangent(out, 0)?;
    g.set_output(t);
    Ok((g, out))
}

/// Convert a coordinate-major stacked tangent `(n·rows)×1` into `rows×n`.
pub fn unstack_gradient(stacked: &Mat, rows: usize, dim: usize) -> Mat {
    let mut out = Mat::zeros(rows, dim);
    let s = stacked.as_slice();
    for j in 0..dim {
        for b in 0..rows {
            out.set(b, j, s[j * rows + b]);
        }
    }
    out
}

/// Exact parameter gradient of a scalar (`1×1`) loss graph.
pub fn param_gradient_of_loss(loss_graph: &ExprGraph, params: &[f64], data: &[&Mat]) -> Result<GradReport> {
    let out = output_of(loss_graph)?;
    let values = loss_graph.forward(params, data)?;
    if values[out.index()].shape() != (1, 1) {
        return Err(Error::contract(format!(
            "loss graph output must be scalar, got shape {:?}",
            values[out.index()].shape()
        )));
    }
    let value = values[out.index()].get(0, 0);
    let param_grads = loss_graph.backward(&values, out)?;
    Ok(GradReport { value, param_grads })
}
