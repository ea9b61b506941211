//! Predictive-coding sheaves over multigraphs.
//!
//! A [`PCSheaf`] assigns a stalk `R^{n_v}` to every vertex and, to every edge
//! `e = (u -> v)`, the restriction pair `(W_e, I)`. The edge stalk therefore has
//! dimension `n_v`, and the coboundary computes the prediction error
//!
//! ```text
//! (δ⁰ s)_e = s_v - W_e s_u
//! ```
//!
//! Vertex and edge orderings are frozen at construction and define every block
//! offset. Parallel edges between the same pair of vertices are allowed; they are
//! told apart by their [`EdgeId`].

use std::collections::HashMap;
use std::fmt;
use std::ops::Range;

use nalgebra::{DMatrix, DVector, DVectorView};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SheafError};
use crate::linalg;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VertexId(pub String);

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EdgeId(pub String);

macro_rules! id_impls {
    ($t:ty) => {
        impl From<&str> for $t {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }
        impl From<String> for $t {
            fn from(s: String) -> Self {
                Self(s)
            }
        }
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }
        impl $t {
            pub fn as_str(&self) -> &str {
                &self.0
            }
        }
    };
}
id_impls!(VertexId);
id_impls!(EdgeId);

#[derive(Clone, Debug, PartialEq)]
pub struct Vertex {
    pub id: VertexId,
    pub dim: usize,
}

impl Vertex {
    pub fn new(id: impl Into<VertexId>, dim: usize) -> Self {
        Self { id: id.into(), dim }
    }
}

/// Directed-convention edge `src -> dst` carrying the forward map `W_e: R^{n_src} -> R^{n_dst}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Edge {
    pub id: EdgeId,
    pub src: VertexId,
    pub dst: VertexId,
    pub weight: DMatrix<f64>,
}

impl Edge {
    pub fn new(
        id: impl Into<EdgeId>,
        src: impl Into<VertexId>,
        dst: impl Into<VertexId>,
        weight: DMatrix<f64>,
    ) -> Self {
        Self {
            id: id.into(),
            src: src.into(),
            dst: dst.into(),
            weight,
        }
    }
}

/// An immutable predictive-coding sheaf with precomputed block offsets.
#[derive(Clone, Debug)]
pub struct PCSheaf {
    vertices: Vec<Vertex>,
    edges: Vec<Edge>,
    vertex_index: HashMap<VertexId, usize>,
    edge_index: HashMap<EdgeId, usize>,
    vertex_offsets: Vec<usize>,
    edge_offsets: Vec<usize>,
    // (source index, target index) per edge
    ends: Vec<(usize, usize)>,
}

impl PartialEq for PCSheaf {
    fn eq(&self, other: &Self) -> bool {
        self.vertices == other.vertices && self.edges == other.edges
    }
}

impl PCSheaf {
    /// Builds a sheaf, validating ids and weight shapes.
    pub fn new(vertices: Vec<Vertex>, edges: Vec<Edge>) -> Result<Self> {
        let mut vertex_index = HashMap::with_capacity(vertices.len());
        let mut vertex_offsets = Vec::with_capacity(vertices.len() + 1);
        let mut off = 0;
        for (i, v) in vertices.iter().enumerate() {
            if v.dim == 0 {
                return Err(SheafError::ZeroDimension(v.id.0.clone()));
            }
            if vertex_index.insert(v.id.clone(), i).is_some() {
                return Err(SheafError::DuplicateVertex(v.id.0.clone()));
            }
            vertex_offsets.push(off);
            off += v.dim;
        }
        vertex_offsets.push(off);

        let mut edge_index = HashMap::with_capacity(edges.len());
        let mut edge_offsets = Vec::with_capacity(edges.len() + 1);
        let mut ends = Vec::with_capacity(edges.len());
        let mut off = 0;
        for (k, e) in edges.iter().enumerate() {
            let u = *vertex_index
                .get(&e.src)
                .ok_or_else(|| SheafError::UnknownVertex(e.src.0.clone()))?;
            let v = *vertex_index
                .get(&e.dst)
                .ok_or_else(|| SheafError::UnknownVertex(e.dst.0.clone()))?;
            let (nu, nv) = (vertices[u].dim, vertices[v].dim);
            if e.weight.shape() != (nv, nu) {
                return Err(SheafError::WeightShape {
                    edge: e.id.0.clone(),
                    rows: e.weight.nrows(),
                    cols: e.weight.ncols(),
                    expected_rows: nv,
                    expected_cols: nu,
                });
            }
            if edge_index.insert(e.id.clone(), k).is_some() {
                return Err(SheafError::DuplicateEdge(e.id.0.clone()));
            }
            edge_offsets.push(off);
            ends.push((u, v));
            off += nv;
        }
        edge_offsets.push(off);

        Ok(Self {
            vertices,
            edges,
            vertex_index,
            edge_index,
            vertex_offsets,
            edge_offsets,
            ends,
        })
    }

    pub fn vertices(&self) -> &[Vertex] {
        &self.vertices
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Total dimension of C⁰.
    pub fn c0_dim(&self) -> usize {
        *self.vertex_offsets.last().unwrap()
    }

    /// Total dimension of C¹.
    pub fn c1_dim(&self) -> usize {
        *self.edge_offsets.last().unwrap()
    }

    pub fn vertex_position(&self, id: &VertexId) -> Result<usize> {
        self.vertex_index
            .get(id)
            .copied()
            .ok_or_else(|| SheafError::UnknownVertex(id.0.clone()))
    }

    pub fn edge_position(&self, id: &EdgeId) -> Result<usize> {
        self.edge_index
            .get(id)
            .copied()
            .ok_or_else(|| SheafError::UnknownEdge(id.0.clone()))
    }

    pub fn vertex(&self, id: &VertexId) -> Result<&Vertex> {
        Ok(&self.vertices[self.vertex_position(id)?])
    }

    pub fn edge(&self, id: &EdgeId) -> Result<&Edge> {
        Ok(&self.edges[self.edge_position(id)?])
    }

    /// Row range of vertex block `i` (by position) inside C⁰.
    pub fn vertex_range_at(&self, i: usize) -> Range<usize> {
        self.vertex_offsets[i]..self.vertex_offsets[i + 1]
    }

    /// Row range of edge block `k` (by position) inside C¹.
    pub fn edge_range_at(&self, k: usize) -> Range<usize> {
        self.edge_offsets[k]..self.edge_offsets[k + 1]
    }

    pub fn vertex_range(&self, id: &VertexId) -> Result<Range<usize>> {
        Ok(self.vertex_range_at(self.vertex_position(id)?))
    }

    pub fn edge_range(&self, id: &EdgeId) -> Result<Range<usize>> {
        Ok(self.edge_range_at(self.edge_position(id)?))
    }

    /// `(source position, target position)` of edge `k`.
    pub fn endpoints_at(&self, k: usize) -> (usize, usize) {
        self.ends[k]
    }

    /// A copy with every edge weight replaced, in edge order.
    pub fn with_weights(&self, weights: Vec<DMatrix<f64>>) -> Result<Self> {
        if weights.len() != self.edges.len() {
            return Err(SheafError::Shape(format!(
                "expected {} weights, got {}",
                self.edges.len(),
                weights.len()
            )));
        }
        let edges = self
            .edges
            .iter()
            .zip(weights)
            .map(|(e, w)| Edge {
                weight: w,
                ..e.clone()
            })
            .collect();
        Self::new(self.vertices.clone(), edges)
    }

    /// A copy with a single edge weight replaced.
    pub fn with_edge_weight(&self, id: &EdgeId, weight: DMatrix<f64>) -> Result<Self> {
        let k = self.edge_position(id)?;
        let mut weights: Vec<_> = self.edges.iter().map(|e| e.weight.clone()).collect();
        weights[k] = weight;
        self.with_weights(weights)
    }

    pub fn weights(&self) -> Vec<DMatrix<f64>> {
        self.edges.iter().map(|e| e.weight.clone()).collect()
    }

    fn check_c0(&self, s: &Cochain0) -> Result<()> {
        if s.0.len() != self.c0_dim() {
            return Err(SheafError::Shape(format!(
                "0-cochain has length {}, sheaf C⁰ has dimension {}",
                s.0.len(),
                self.c0_dim()
            )));
        }
        Ok(())
    }

    /// Prediction errors `s_v - W_e s_u` for every edge.
    pub fn apply_coboundary(&self, s: &Cochain0) -> Result<Cochain1> {
        self.check_c0(s)?;
        let mut out = DVector::zeros(self.c1_dim());
        for (k, e) in self.edges.iter().enumerate() {
            let (u, v) = self.ends[k];
            let su = s.0.rows_range(self.vertex_range_at(u));
            let sv = s.0.rows_range(self.vertex_range_at(v));
            let mut block = out.rows_range_mut(self.edge_range_at(k));
            block.copy_from(&sv);
            block.gemv(-1.0, &e.weight, &su, 1.0);
        }
        Ok(Cochain1(out))
    }

    /// Dense δ⁰: edge block row `e` holds `-W_e` in column block `u` and `I` in column block `v`.
    pub fn assemble_coboundary(&self) -> CoboundaryMatrix {
        let mut m = DMatrix::zeros(self.c1_dim(), self.c0_dim());
        for (k, e) in self.edges.iter().enumerate() {
            let (u, v) = self.ends[k];
            let rows = self.edge_range_at(k);
            let cu = self.vertex_range_at(u);
            let cv = self.vertex_range_at(v);
            // Self-loops accumulate both contributions into one block.
            {
                let mut blk = m.view_mut((rows.start, cu.start), (rows.len(), cu.len()));
                blk -= &e.weight;
            }
            for i in 0..rows.len() {
                m[(rows.start + i, cv.start + i)] += 1.0;
            }
        }
        CoboundaryMatrix {
            matrix: m,
            vertex_offsets: self.vertex_offsets.clone(),
            edge_offsets: self.edge_offsets.clone(),
        }
    }

    /// `E_PC(s) = ½‖δ⁰ s‖²`.
    pub fn energy(&self, s: &Cochain0) -> Result<f64> {
        Ok(0.5 * self.apply_coboundary(s)?.0.norm_squared())
    }

    /// `L = (δ⁰)ᵀ δ⁰`.
    pub fn laplacian(&self) -> DMatrix<f64> {
        let d = self.assemble_coboundary().matrix;
        d.tr_mul(&d)
    }

    pub fn coboundary_rank(&self, rank_tol: f64) -> usize {
        linalg::rank(&self.assemble_coboundary().matrix, rank_tol)
    }

    /// Orthonormal basis of H⁰ = ker δ⁰, one basis vector per column.
    pub fn h0_basis(&self, rank_tol: f64) -> DMatrix<f64> {
        linalg::null_space(&self.assemble_coboundary().matrix, rank_tol)
    }

    /// dim H¹ = dim C¹ − rank δ⁰.
    pub fn h1_dim(&self, rank_tol: f64) -> usize {
        self.c1_dim() - self.coboundary_rank(rank_tol)
    }
}

/// Dense coboundary with the block offsets it was assembled from.
#[derive(Clone, Debug, PartialEq)]
pub struct CoboundaryMatrix {
    pub matrix: DMatrix<f64>,
    pub vertex_offsets: Vec<usize>,
    pub edge_offsets: Vec<usize>,
}

/// Vertex activations, blocks in vertex order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cochain0(pub DVector<f64>);

/// Edge prediction errors, blocks in edge order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cochain1(pub DVector<f64>);

impl Cochain0 {
    pub fn zeros(sheaf: &PCSheaf) -> Self {
        Self(DVector::zeros(sheaf.c0_dim()))
    }

    pub fn from_vector(sheaf: &PCSheaf, v: DVector<f64>) -> Result<Self> {
        let s = Self(v);
        sheaf.check_c0(&s)?;
        Ok(s)
    }

    /// Assembles a cochain from per-vertex blocks; missing vertices are zero.
    pub fn from_blocks<'a>(
        sheaf: &PCSheaf,
        blocks: impl IntoIterator<Item = (&'a VertexId, &'a DVector<f64>)>,
    ) -> Result<Self> {
        let mut s = Self::zeros(sheaf);
        for (id, val) in blocks {
            s.set_block(sheaf, id, val)?;
        }
        Ok(s)
    }

    pub fn block<'a>(&'a self, sheaf: &PCSheaf, id: &VertexId) -> Result<DVectorView<'a, f64>> {
        Ok(self.0.rows_range(sheaf.vertex_range(id)?))
    }

    pub fn set_block(&mut self, sheaf: &PCSheaf, id: &VertexId, val: &DVector<f64>) -> Result<()> {
        let r = sheaf.vertex_range(id)?;
        if val.len() != r.len() {
            return Err(SheafError::Shape(format!(
                "vertex `{id}` expects a block of length {}, got {}",
                r.len(),
                val.len()
            )));
        }
        self.0.rows_range_mut(r).copy_from(val);
        Ok(())
    }
}

impl Cochain1 {
    pub fn zeros(sheaf: &PCSheaf) -> Self {
        Self(DVector::zeros(sheaf.c1_dim()))
    }

    pub fn block<'a>(&'a self, sheaf: &PCSheaf, id: &EdgeId) -> Result<DVectorView<'a, f64>> {
        Ok(self.0.rows_range(sheaf.edge_range(id)?))
    }
}
