//! Mixed-operation DAG cells.
//!
//! A cell has two input nodes, `N - 3` intermediate nodes and one output
//! node. Every intermediate node receives an edge from each earlier node;
//! during search each edge carries a softmax mixture over the candidate
//! operations weighted by learnable logits `alpha`. The output node
//! concatenates the intermediate nodes along channels.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

use super::ops::{CellOp, OpInstance};

/// Architecture parameters of one cell type (normal or reduction). The
/// logits are shared by every stacked cell of that type.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSpec<F> {
    pub n_nodes: usize,
    pub op_set: Vec<CellOp>,
    /// One logit row per edge, in [`edge_list`] order; row length `|F|`.
    pub alpha: Vec<Vec<F>>,
    pub is_reduction: bool,
}

/// Edges `(src, dst)` of an `n_nodes` cell: every intermediate node `j`
/// (nodes `2.. n_nodes - 1`) connects to all previous nodes `i < j`.
pub fn edge_list(n_nodes: usize) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for j in 2..n_nodes - 1 {
        for i in 0..j {
            edges.push((i, j));
        }
    }
    edges
}

impl<F: Scalar> CellSpec<F> {
    /// Zero-initialized logits (uniform mixture).
    pub fn new(n_nodes: usize, op_set: Vec<CellOp>, is_reduction: bool) -> Result<Self> {
        if n_nodes < 4 {
            return Err(Error::InvalidArg(format!(
                "a cell needs at least 4 nodes (2 inputs, 1 intermediate, 1 output), got {n_nodes}"
            )));
        }
        if op_set.is_empty() {
            return Err(Error::InvalidArg("empty candidate operation set".into()));
        }
        let alpha = edge_list(n_nodes)
            .iter()
            .map(|_| vec![F::zero(); op_set.len()])
            .collect();
        Ok(CellSpec { n_nodes, op_set, alpha, is_reduction })
    }

    pub fn n_intermediate(&self) -> usize {
        self.n_nodes - 3
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        edge_list(self.n_nodes)
    }

    pub fn n_edges(&self) -> usize {
        self.alpha.len()
    }

    /// Registers each edge's logits as a tape leaf, in edge order.
    pub fn register(&self, tape: &mut Tape<F>) -> Result<Vec<Tensor<F>>> {
        self.alpha
            .iter()
            .map(|row| tape.leaf(vec![row.len()], row.clone()))
            .collect()
    }

    /// Per-edge softmax weights (noise-free), for logging.
    pub fn weight_rows(&self) -> Vec<Vec<F>> {
        self.alpha
            .iter()
            .map(|row| crate::tape::softmax_with_temp(row, F::one()))
            .collect()
    }
}

/// Softmax-weighted sum of every candidate operation on one edge:
/// `sum_f softmax(alpha)_f * f(x)`.
pub fn mixed_op_forward<F: Scalar>(
    tape: &mut Tape<F>,
    x: &Tensor<F>,
    edge_alpha: &Tensor<F>,
    ops: &[OpInstance],
    leaves: &[Tensor<F>],
) -> Result<Tensor<F>> {
    if edge_alpha.len() != ops.len() {
        return Err(Error::shape(
            "mixed_op_forward",
            format!("{} logits vs {} candidate ops", edge_alpha.len(), ops.len()),
        ));
    }
    let weights = tape.softmax_t(edge_alpha, F::one())?;
    let mut acc: Option<Tensor<F>> = None;
    for (f, op) in ops.iter().enumerate() {
        let y = op.forward(tape, x, leaves)?;
        if let Some(prev) = &acc {
            if prev.shape() != y.shape() {
                return Err(Error::shape(
                    "mixed_op_forward",
                    format!(
                        "candidate `{}` produced {:?}, expected {:?}",
                        op.kind,
                        y.shape(),
                        prev.shape()
                    ),
                ));
            }
        }
        let wf = tape.index(&weights, f)?;
        let term = tape.scale_by(&y, &wf)?;
        acc = Some(match acc {
            None => term,
            Some(prev) => tape.add(&prev, &term)?,
        });
    }
    acc.ok_or_else(|| Error::InvalidArg("mixed op with no candidates".into()))
}

/// Forward pass of one cell over already-preprocessed inputs (both at the
/// cell's working channel count). `edge_ops[e]` holds the instantiated
/// candidates for edge `e` and `alpha_leaves[e]` the corresponding logits.
/// Returns the channel-concatenation of the intermediate nodes.
pub fn cell_forward<F: Scalar>(
    tape: &mut Tape<F>,
    s_prev2: &Tensor<F>,
    s_prev1: &Tensor<F>,
    spec: &CellSpec<F>,
    edge_ops: &[Vec<OpInstance>],
    alpha_leaves: &[Tensor<F>],
    leaves: &[Tensor<F>],
) -> Result<Tensor<F>> {
    let edges = spec.edges();
    if edge_ops.len() != edges.len() || alpha_leaves.len() != edges.len() {
        return Err(Error::shape(
            "cell_forward",
            format!(
                "{} edges vs {} op rows / {} alpha rows",
                edges.len(),
                edge_ops.len(),
                alpha_leaves.len()
            ),
        ));
    }
    let mut states: Vec<Tensor<F>> = vec![s_prev2.clone(), s_prev1.clone()];
    for j in 2..spec.n_nodes - 1 {
        let mut node: Option<Tensor<F>> = None;
        for (e, (i, jj)) in edges.iter().enumerate() {
            if *jj != j {
                continue;
            }
            let contrib =
                mixed_op_forward(tape, &states[*i], &alpha_leaves[e], &edge_ops[e], leaves)?;
            node = Some(match node {
                None => contrib,
                Some(prev) => tape.add(&prev, &contrib)?,
            });
        }
        states.push(node.expect("every intermediate node has incoming edges"));
    }
    let intermediates: Vec<&Tensor<F>> = states[2..].iter().collect();
    tape.concat(&intermediates, 1)
}
