//! JSON description files for sheaves.
//!
//! ```json
//! {"vertices":[{"id":"x","dim":2}],"edges":[{"id":"e1","src":"x","dst":"h1","weight":[[1.0,0.0],[0.0,1.0]]}]}
//! ```
//!
//! Weights are row-major nested arrays. Doubles round-trip exactly.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SheafError};
use crate::sheaf::{Edge, EdgeId, PCSheaf, Vertex, VertexId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VertexDesc {
    pub id: VertexId,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeDesc {
    pub id: EdgeId,
    pub src: VertexId,
    pub dst: VertexId,
    pub weight: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SheafDesc {
    pub vertices: Vec<VertexDesc>,
    pub edges: Vec<EdgeDesc>,
}

fn matrix_from_rows(edge: &EdgeId, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(SheafError::Shape(format!("edge `{edge}`: ragged weight rows")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn rows_from_matrix(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl SheafDesc {
    pub fn build(&self) -> Result<PCSheaf> {
        let vertices = self
            .vertices
            .iter()
            .map(|v| Vertex::new(v.id.clone(), v.dim))
            .collect();
        let edges = self
            .edges
            .iter()
            .map(|e| {
                Ok(Edge::new(
                    e.id.clone(),
                    e.src.clone(),
                    e.dst.clone(),
                    matrix_from_rows(&e.id, &e.weight)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        PCSheaf::new(vertices, edges)
    }
}

impl From<&PCSheaf> for SheafDesc {
    fn from(s: &PCSheaf) -> Self {
        Self {
            vertices: s
                .vertices()
                .iter()
                .map(|v| VertexDesc {
                    id: v.id.clone(),
                    dim: v.dim,
                })
                .collect(),
            edges: s
                .edges()
                .iter()
                .map(|e| EdgeDesc {
                    id: e.id.clone(),
                    src: e.src.clone(),
                    dst: e.dst.clone(),
                    weight: rows_from_matrix(&e.weight),
                })
                .collect(),
        }
    }
}

pub fn sheaf_from_json(text: &str) -> Result<PCSheaf> {
    let desc: SheafDesc =
        serde_json::from_str(text).map_err(|e| SheafError::Config(format!("sheaf JSON: {e}")))?;
    desc.build()
}

pub fn sheaf_to_json(sheaf: &PCSheaf) -> String {
    serde_json::to_string(&SheafDesc::from(sheaf)).expect("sheaf description serializes")
}

pub fn load_sheaf(path: &Path) -> Result<PCSheaf> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| SheafError::Config(format!("{}: {e}", path.display())))?;
    sheaf_from_json(&text)
}

pub fn save_sheaf(sheaf: &PCSheaf, path: &Path) -> Result<()> {
    std::fs::write(path, sheaf_to_json(sheaf))
        .map_err(|e| SheafError::Config(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_documented_shape() {
        let text = r#"{"vertices":[{"id":"x","dim":2},{"id":"h1","dim":1}],
            "edges":[{"id":"e1","src":"x","dst":"h1","weight":[[0.5,-1.0]]}]}"#;
        let s = sheaf_from_json(text).unwrap();
        assert_eq!(s.c0_dim(), 3);
        assert_eq!(s.edges()[0].weight[(0, 1)], -1.0);
    }

    #[test]
    fn ragged_weight_rejected() {
        let text = r#"{"vertices":[{"id":"x","dim":2},{"id":"h","dim":2}],
            "edges":[{"id":"e","src":"x","dst":"h","weight":[[1.0,2.0],[3.0]]}]}"#;
        assert!(matches!(sheaf_from_json(text), Err(SheafError::Shape(_))));
    }

    proptest! {
        #[test]
        fn json_round_trip_is_exact(ws in proptest::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), 6)) {
            let s = PCSheaf::new(
                vec![Vertex::new("a", 2), Vertex::new("b", 3)],
                vec![Edge::new("e", "a", "b", DMatrix::from_row_slice(3, 2, &ws))],
            ).unwrap();
            let back = sheaf_from_json(&sheaf_to_json(&s)).unwrap();
            prop_assert_eq!(back, s);
        }
    }
}
