//! Discrete architectures: argmax derivation from logits and the JSON
//! exchange format.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::softmax_with_temp;

use super::cell::CellSpec;
use super::ops::CellOp;

/// One retained edge: the chosen operation and its source node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscreteEdge {
    pub op: CellOp,
    pub from: usize,
}

/// A derived cell: per intermediate node, exactly two retained incoming
/// edges. The zero operation is never retained.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiscreteCell {
    pub is_reduction: bool,
    pub nodes: Vec<[DiscreteEdge; 2]>,
}

impl DiscreteCell {
    pub fn validate(&self) -> Result<()> {
        for (n, pair) in self.nodes.iter().enumerate() {
            for edge in pair {
                if edge.op.is_zero() {
                    return Err(Error::InvalidArg(format!(
                        "node {n} retains the zero operation; a discrete cell may not"
                    )));
                }
                if edge.from >= n + 2 {
                    return Err(Error::InvalidArg(format!(
                        "node {n} has edge from {}, which is not an earlier node",
                        edge.from
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Derives the discrete architecture: per edge the non-zero operation with
/// the largest logit, per intermediate node the two incoming edges with the
/// largest softmax weight. Ties break toward the lower operation index and
/// the lower source node, so the result is stable. Shifting all logits of
/// an edge by a constant cannot change the outcome.
pub fn discretize<F: Scalar>(specs: &[CellSpec<F>]) -> Result<Vec<DiscreteCell>> {
    specs.iter().map(discretize_one).collect()
}

fn discretize_one<F: Scalar>(spec: &CellSpec<F>) -> Result<DiscreteCell> {
    if spec.op_set.iter().all(|op| op.is_zero()) {
        return Err(Error::InvalidArg(
            "candidate set has no non-zero operation to retain".into(),
        ));
    }
    let edges = spec.edges();
    // best non-zero op and its softmax weight, per edge
    let mut best: Vec<(CellOp, F)> = Vec::with_capacity(edges.len());
    for row in &spec.alpha {
        let weights = softmax_with_temp(row, F::one());
        let mut choice: Option<(usize, F)> = None;
        for (f, op) in spec.op_set.iter().enumerate() {
            if op.is_zero() {
                continue;
            }
            let w = weights[f];
            // strict > keeps the lowest index on ties
            if choice.map_or(true, |(_, cw)| w > cw) {
                choice = Some((f, w));
            }
        }
        let (f, w) = choice.expect("non-zero candidate exists");
        best.push((spec.op_set[f], w));
    }
    let mut nodes = Vec::with_capacity(spec.n_intermediate());
    for j in 2..spec.n_nodes - 1 {
        // incoming edges of node j in edge order (source order: 0..j)
        let incoming: Vec<usize> = edges
            .iter()
            .enumerate()
            .filter(|(_, (_, jj))| *jj == j)
            .map(|(e, _)| e)
            .collect();
        let mut ranked = incoming.clone();
        // stable sort by descending weight; stability keeps lower sources first on ties
        ranked.sort_by(|&a, &b| {
            best[b].1.partial_cmp(&best[a].1).unwrap_or(std::cmp::Ordering::Equal)
        });
        let mut pair: Vec<DiscreteEdge> = ranked[..2]
            .iter()
            .map(|&e| DiscreteEdge { op: best[e].0, from: edges[e].0 })
            .collect();
        pair.sort_by_key(|e| e.from);
        nodes.push([pair[0], pair[1]]);
    }
    Ok(DiscreteCell { is_reduction: spec.is_reduction, nodes })
}

// ---------------------------------------------------------------------------
// JSON format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct EdgeDoc {
    op: String,
    from: usize,
}

#[derive(Serialize, Deserialize)]
struct CellDoc {
    is_reduction: bool,
    nodes: Vec<Vec<EdgeDoc>>,
}

#[derive(Serialize, Deserialize)]
struct GenotypeDoc {
    cells: Vec<CellDoc>,
}

pub fn genotype_serialize(cells: &[DiscreteCell]) -> Result<String> {
    let doc = GenotypeDoc {
        cells: cells
            .iter()
            .map(|c| CellDoc {
                is_reduction: c.is_reduction,
                nodes: c
                    .nodes
                    .iter()
                    .map(|pair| {
                        pair.iter()
                            .map(|e| EdgeDoc { op: e.op.name().to_string(), from: e.from })
                            .collect()
                    })
                    .collect(),
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

pub fn genotype_parse(text: &str) -> Result<Vec<DiscreteCell>> {
    let doc: GenotypeDoc = serde_json::from_str(text)
        .map_err(|e| Error::Parse(format!("genotype JSON at line {} column {}: {e}", e.line(), e.column())))?;
    let mut cells = Vec::with_capacity(doc.cells.len());
    for (ci, cell) in doc.cells.into_iter().enumerate() {
        let mut nodes = Vec::with_capacity(cell.nodes.len());
        for (ni, pair) in cell.nodes.into_iter().enumerate() {
            if pair.len() != 2 {
                return Err(Error::Parse(format!(
                    "cell {ci} node {ni}: expected exactly 2 edges, found {}",
                    pair.len()
                )));
            }
            let mut edges = Vec::with_capacity(2);
            for e in pair {
                let op = CellOp::parse(&e.op)?;
                edges.push(DiscreteEdge { op, from: e.from });
            }
            nodes.push([edges[0], edges[1]]);
        }
        let cell = DiscreteCell { is_reduction: cell.is_reduction, nodes };
        cell.validate()?;
        cells.push(cell);
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn spec_with_alpha(alpha: Vec<Vec<f32>>) -> CellSpec<f32> {
        let mut spec = CellSpec::new(5, CellOp::REDUCED_SET.to_vec(), false).unwrap();
        assert_eq!(spec.alpha.len(), alpha.len());
        spec.alpha = alpha;
        spec
    }

    #[test]
    fn strict_maxima_are_retained() {
        // N=5: edges (0,2),(1,2),(0,3),(1,3),(2,3); ops {zero,skip,sep3,max,avg}
        let mut alpha = vec![vec![0.0f32; 5]; 5];
        alpha[0][2] = 5.0; // (0,2) -> sep_conv_3x3
        alpha[1][3] = 4.0; // (1,2) -> max_pool_3x3
        alpha[2][1] = 3.0; // (0,3) -> skip
        alpha[3][4] = 6.0; // (1,3) -> avg_pool
        alpha[4][2] = 1.0; // (2,3) -> sep (weak)
        let spec = spec_with_alpha(alpha);
        let cells = discretize(std::slice::from_ref(&spec)).unwrap();
        let nodes = &cells[0].nodes;
        assert_eq!(nodes[0][0], DiscreteEdge { op: CellOp::SepConv3, from: 0 });
        assert_eq!(nodes[0][1], DiscreteEdge { op: CellOp::MaxPool3, from: 1 });
        // node 3 keeps (0,3) skip and (1,3) avg (largest two weights)
        assert_eq!(nodes[1][0], DiscreteEdge { op: CellOp::SkipConnect, from: 0 });
        assert_eq!(nodes[1][1], DiscreteEdge { op: CellOp::AvgPool3, from: 1 });
    }

    #[test]
    fn shifting_edge_logits_does_not_change_genotype() {
        let mut rng = Rng::new(11);
        for trial in 0..20 {
            let mut spec = CellSpec::<f32>::new(6, CellOp::REDUCED_SET.to_vec(), false).unwrap();
            for row in &mut spec.alpha {
                rng.fill_uniform(-2.0, 2.0, row);
            }
            let base = discretize(std::slice::from_ref(&spec)).unwrap();
            let mut shifted = spec.clone();
            for (e, row) in shifted.alpha.iter_mut().enumerate() {
                let c = (trial as f32 + 1.0) * (e as f32 - 3.0);
                for v in row.iter_mut() {
                    *v += c;
                }
            }
            let again = discretize(std::slice::from_ref(&shifted)).unwrap();
            assert_eq!(base, again, "genotype changed under logit shift");
        }
    }

    #[test]
    fn exact_ties_choose_lowest_op_and_source() {
        let spec = spec_with_alpha(vec![vec![0.0f32; 5]; 5]);
        let a = discretize(std::slice::from_ref(&spec)).unwrap();
        let b = discretize(std::slice::from_ref(&spec)).unwrap();
        assert_eq!(a, b);
        // all weights tie: first non-zero op is skip_connect, sources 0 and 1
        for pair in &a[0].nodes {
            assert_eq!(pair[0].op, CellOp::SkipConnect);
            assert_eq!(pair[0].from, 0);
            assert_eq!(pair[1].from, 1);
        }
    }

    #[test]
    fn json_round_trip_on_random_genotypes() {
        let mut rng = Rng::new(13);
        for _ in 0..10 {
            let mut spec = CellSpec::<f32>::new(6, CellOp::FULL_SET.to_vec(), false).unwrap();
            let mut red = CellSpec::<f32>::new(6, CellOp::FULL_SET.to_vec(), true).unwrap();
            for row in spec.alpha.iter_mut().chain(red.alpha.iter_mut()) {
                rng.fill_uniform(-3.0, 3.0, row);
            }
            let cells = discretize(&[spec, red]).unwrap();
            let text = genotype_serialize(&cells).unwrap();
            let back = genotype_parse(&text).unwrap();
            assert_eq!(cells, back);
        }
    }

    #[test]
    fn unknown_op_name_names_the_token() {
        let text = r#"{"cells":[{"is_reduction":false,"nodes":[[{"op":"warp_drive","from":0},{"op":"skip_connect","from":1}]]}]}"#;
        let err = genotype_parse(text).unwrap_err().to_string();
        assert!(err.contains("warp_drive"), "{err}");
    }

    #[test]
    fn zero_op_in_genotype_rejected() {
        let text = r#"{"cells":[{"is_reduction":false,"nodes":[[{"op":"zero","from":0},{"op":"skip_connect","from":1}]]}]}"#;
        assert!(genotype_parse(text).is_err());
    }

    #[test]
    fn empty_cell_list_round_trips() {
        let text = genotype_serialize(&[]).unwrap();
        let back = genotype_parse(&text).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn malformed_json_reports_position() {
        let err = genotype_parse("{\"cells\": [oops").unwrap_err().to_string();
        assert!(err.contains("line"), "{err}");
    }
}
