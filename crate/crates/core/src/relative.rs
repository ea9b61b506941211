//! Clamped (relative) systems and their Hodge-theoretic operators.
//!
//! Clamping a set of vertices to fixed values leaves the least-squares problem
//!
//! ```text
//! E_rel(z) = ½‖D z + b‖²
//! ```
//!
//! where `D` keeps the free-vertex columns of δ⁰ and `b = δ⁰ s_clamped` with
//! free blocks set to zero. The minimum-norm minimizer is `z* = -D† b`, the
//! residual `r* = D z* + b = ℋ b` lies in `ker Dᵀ`, and
//! `b = (-D z*) ⊕ r*` is the orthogonal (Hodge) split of the target.

use std::collections::BTreeMap;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Result, SheafError};
use crate::linalg;
use crate::sheaf::{Cochain0, Cochain1, PCSheaf, VertexId};

/// Fixed values for the clamped vertices; every other vertex is free.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClampSpec {
    values: BTreeMap<VertexId, DVector<f64>>,
}

impl ClampSpec {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, id: impl Into<VertexId>, value: DVector<f64>) -> Self {
        self.values.insert(id.into(), value);
        self
    }

    pub fn insert(&mut self, id: impl Into<VertexId>, value: DVector<f64>) {
        self.values.insert(id.into(), value);
    }

    pub fn get(&self, id: &VertexId) -> Option<&DVector<f64>> {
        self.values.get(id)
    }

    pub fn is_clamped(&self, id: &VertexId) -> bool {
        self.values.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&VertexId, &DVector<f64>)> {
        self.values.iter()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn validate(&self, sheaf: &PCSheaf) -> Result<()> {
        for (id, val) in &self.values {
            let dim = sheaf.vertex(id)?.dim;
            if val.len() != dim {
                return Err(SheafError::Shape(format!(
                    "clamp value for `{id}` has length {}, stalk dimension is {dim}",
                    val.len()
                )));
            }
        }
        Ok(())
    }
}

/// The clamped system `(D, b)` together with the free-vertex block layout.
#[derive(Clone, Debug)]
pub struct RelativeSystem<'a> {
    sheaf: &'a PCSheaf,
    clamp: ClampSpec,
    d: DMatrix<f64>,
    b: DVector<f64>,
    // free vertex positions in sheaf order
    free: Vec<usize>,
    free_offsets: Vec<usize>,
    free_lookup: Vec<Option<usize>>,
}

impl<'a> RelativeSystem<'a> {
    /// Builds `(D, b)` for `sheaf` with the vertices in `spec` held fixed.
    pub fn clamp(sheaf: &'a PCSheaf, spec: &ClampSpec) -> Result<Self> {
        spec.validate(sheaf)?;
        let mut free = Vec::new();
        let mut free_offsets = vec![0];
        let mut free_lookup = vec![None; sheaf.num_vertices()];
        for (i, v) in sheaf.vertices().iter().enumerate() {
            if !spec.is_clamped(&v.id) {
                free_lookup[i] = Some(free.len());
                free.push(i);
                free_offsets.push(free_offsets.last().unwrap() + v.dim);
            }
        }
        let n_free = *free_offsets.last().unwrap();
        let mut d = DMatrix::zeros(sheaf.c1_dim(), n_free);
        for (k, e) in sheaf.edges().iter().enumerate() {
            let (u, v) = sheaf.endpoints_at(k);
            let rows = sheaf.edge_range_at(k);
            if let Some(fu) = free_lookup[u] {
                let mut blk = d.view_mut((rows.start, free_offsets[fu]), e.weight.shape());
                blk -= &e.weight;
            }
            if let Some(fv) = free_lookup[v] {
                for i in 0..rows.len() {
                    d[(rows.start + i, free_offsets[fv] + i)] += 1.0;
                }
            }
        }
        let mut rel = Self {
            sheaf,
            clamp: spec.clone(),
            d,
            b: DVector::zeros(sheaf.c1_dim()),
            free,
            free_offsets,
            free_lookup,
        };
        rel.b = rel.boundary(spec)?;
        Ok(rel)
    }

    /// The target cochain `b` induced by clamp values on the same clamped vertex set.
    pub fn boundary(&self, spec: &ClampSpec) -> Result<DVector<f64>> {
        spec.validate(self.sheaf)?;
        for (i, v) in self.sheaf.vertices().iter().enumerate() {
            if self.free_lookup[i].is_none() != spec.is_clamped(&v.id) {
                return Err(SheafError::Shape(format!(
                    "clamp values do not match the clamped vertex set at `{}`",
                    v.id
                )));
            }
        }
        let mut b = DVector::zeros(self.sheaf.c1_dim());
        for (k, e) in self.sheaf.edges().iter().enumerate() {
            let rows = self.sheaf.edge_range_at(k);
            let mut blk = b.rows_range_mut(rows);
            if let Some(xu) = spec.get(&e.src) {
                blk.gemv(-1.0, &e.weight, xu, 1.0);
            }
            if let Some(xv) = spec.get(&e.dst) {
                blk += xv;
            }
        }
        Ok(b)
    }

    /// Same `D`, new clamp values.
    pub fn with_clamp_values(&self, spec: &ClampSpec) -> Result<Self> {
        let b = self.boundary(spec)?;
        Ok(Self {
            clamp: spec.clone(),
            b,
            ..self.clone()
        })
    }

    /// Same `D`, an arbitrary target `b`.
    pub fn with_target(&self, b: DVector<f64>) -> Result<Self> {
        self.check_c1(&b)?;
        Ok(Self { b, ..self.clone() })
    }

    pub fn sheaf(&self) -> &'a PCSheaf {
        self.sheaf
    }

    pub fn clamp_spec(&self) -> &ClampSpec {
        &self.clamp
    }

    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn free_dim(&self) -> usize {
        *self.free_offsets.last().unwrap()
    }

    pub fn num_free(&self) -> usize {
        self.free.len()
    }

    pub fn free_vertices(&self) -> impl Iterator<Item = &VertexId> + '_ {
        self.free.iter().map(|&i| &self.sheaf.vertices()[i].id)
    }

    pub fn is_free(&self, id: &VertexId) -> Result<bool> {
        Ok(self.free_lookup[self.sheaf.vertex_position(id)?].is_some())
    }

    /// Range of vertex `id` inside the free vector `z`.
    pub fn free_range(&self, id: &VertexId) -> Result<Range<usize>> {
        let pos = self.sheaf.vertex_position(id)?;
        let f = self.free_lookup[pos].ok_or_else(|| {
            SheafError::Shape(format!("vertex `{id}` is clamped, not free"))
        })?;
        Ok(self.free_range_at(f))
    }

    /// Range of the `f`-th free vertex inside `z`.
    pub fn free_range_at(&self, f: usize) -> Range<usize> {
        self.free_offsets[f]..self.free_offsets[f + 1]
    }

    /// Free-vertex index of sheaf vertex position `pos`, if free.
    pub fn free_index_of(&self, pos: usize) -> Option<usize> {
        self.free_lookup[pos]
    }

    /// `L_rel = DᵀD`.
    pub fn laplacian(&self) -> DMatrix<f64> {
        self.d.tr_mul(&self.d)
    }

    pub(crate) fn check_free(&self, z: &DVector<f64>) -> Result<()> {
        if z.len() != self.free_dim() {
            return Err(SheafError::Shape(format!(
                "free vector has length {}, expected {}",
                z.len(),
                self.free_dim()
            )));
        }
        Ok(())
    }

    pub(crate) fn check_c1(&self, b: &DVector<f64>) -> Result<()> {
        if b.len() != self.sheaf.c1_dim() {
            return Err(SheafError::Shape(format!(
                "1-cochain has length {}, expected {}",
                b.len(),
                self.sheaf.c1_dim()
            )));
        }
        Ok(())
    }

    /// `D z` computed blockwise from the edge weights, without the assembled `D`.
    pub fn apply_d(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_free(z)?;
        let mut out = DVector::zeros(self.sheaf.c1_dim());
        for (k, e) in self.sheaf.edges().iter().enumerate() {
            let (u, v) = self.sheaf.endpoints_at(k);
            let mut blk = out.rows_range_mut(self.sheaf.edge_range_at(k));
            if let Some(fv) = self.free_lookup[v] {
                blk += z.rows_range(self.free_range_at(fv));
            }
            if let Some(fu) = self.free_lookup[u] {
                blk.gemv(-1.0, &e.weight, &z.rows_range(self.free_range_at(fu)), 1.0);
            }
        }
        Ok(out)
    }

    /// `Dᵀ r` computed blockwise from the edge weights.
    pub fn apply_dt(&self, r: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_c1(r)?;
        let mut out = DVector::zeros(self.free_dim());
        for (k, e) in self.sheaf.edges().iter().enumerate() {
            let (u, v) = self.sheaf.endpoints_at(k);
            let re = r.rows_range(self.sheaf.edge_range_at(k));
            if let Some(fv) = self.free_lookup[v] {
                let mut blk = out.rows_range_mut(self.free_range_at(fv));
                blk += re;
            }
            if let Some(fu) = self.free_lookup[u] {
                let mut blk = out.rows_range_mut(self.free_range_at(fu));
                blk.gemv_tr(-1.0, &e.weight, &re, 1.0);
            }
        }
        Ok(out)
    }

    /// Precomputes `D†` for repeated solves against many targets.
    pub fn solver(&self, rank_tol: f64) -> InferenceSolver<'_, 'a> {
        InferenceSolver {
            rel: self,
            d_pinv: linalg::pinv(&self.d, rank_tol),
            harmonic_basis: linalg::null_space(&self.d.transpose(), rank_tol),
        }
    }

    /// Exact minimum-norm inference, `z* = -D† b`.
    pub fn solve_inference(&self, rank_tol: f64) -> HodgeSolution {
        self.solver(rank_tol)
            .solve(&self.b)
            .expect("b conforms to C¹ by construction")
    }

    /// `ℋ = I - D D†`, the orthogonal projector onto `ker Dᵀ`, assembled as
    /// `U Uᵀ` from an orthonormal basis `U` of `ker Dᵀ`.
    pub fn harmonic_projector(&self, rank_tol: f64) -> DMatrix<f64> {
        let u = linalg::null_space(&self.d.transpose(), rank_tol);
        &u * u.transpose()
    }

    /// `𝒢 = L_rel† Dᵀ = D†`.
    pub fn diffusive_operator(&self, rank_tol: f64) -> DMatrix<f64> {
        linalg::pinv(&self.d, rank_tol)
    }

    /// Splits `b` into `(im_part, harmonic_part)` with `im_part ∈ im D` and
    /// `harmonic_part ∈ ker Dᵀ`.
    pub fn hodge_decompose(
        &self,
        b: &DVector<f64>,
        rank_tol: f64,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let sol = self.solver(rank_tol).solve_target(b)?;
        let im_part = b - &sol.1;
        Ok((im_part, sol.1))
    }

    /// Solves `(L_rel + shift·I) y = rhs` by conjugate gradients using only
    /// `apply_d` / `apply_dt`.
    pub fn solve_laplacian_cg(
        &self,
        rhs: &DVector<f64>,
        shift: f64,
        rel_tol: f64,
        max_iter: usize,
    ) -> Result<DVector<f64>> {
        self.check_free(rhs)?;
        let apply = |x: &DVector<f64>| -> Result<DVector<f64>> {
            Ok(self.apply_dt(&self.apply_d(x)?)? + x * shift)
        };
        let mut x = DVector::zeros(rhs.len());
        let mut r = rhs.clone();
        let target = rel_tol * rhs.norm();
        if r.norm() <= target {
            return Ok(x);
        }
        let mut p = r.clone();
        let mut rr = r.norm_squared();
        for _ in 0..max_iter {
            let ap = apply(&p)?;
            let pap = p.dot(&ap);
            if !(pap > 0.0) {
                return Err(SheafError::SingularLaplacian);
            }
            let alpha = rr / pap;
            x.axpy(alpha, &p, 1.0);
            r.axpy(-alpha, &ap, 1.0);
            let rr_new = r.norm_squared();
            if rr_new.sqrt() <= target {
                return Ok(x);
            }
            p = &r + &p * (rr_new / rr);
            rr = rr_new;
        }
        // A singular unshifted system stalls with a residual in ker L_rel.
        Err(SheafError::SingularLaplacian)
    }
}

/// A relative system with `D†` and a basis of `ker Dᵀ` cached.
///
/// Residuals are `r* = U Uᵀ (D z* + b)`: when `b` is (nearly) in `im D` the
/// sum cancels to roundoff that is not orthogonal to `im D`, and the
/// projection removes that component (exact zeros stay exact).
pub struct InferenceSolver<'r, 'a> {
    rel: &'r RelativeSystem<'a>,
    d_pinv: DMatrix<f64>,
    harmonic_basis: DMatrix<f64>,
}

impl<'r, 'a> InferenceSolver<'r, 'a> {
    pub fn d_pinv(&self) -> &DMatrix<f64> {
        &self.d_pinv
    }

    /// Orthonormal basis of `ker Dᵀ` (the harmonic space), as columns.
    pub fn harmonic_basis(&self) -> &DMatrix<f64> {
        &self.harmonic_basis
    }

    /// `U Uᵀ b`, column by column.
    fn harmonic_part_batch(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let u = &self.harmonic_basis;
        u * u.tr_mul(b)
    }

    fn harmonic_part(&self, b: &DVector<f64>) -> DVector<f64> {
        let u = &self.harmonic_basis;
        u * u.tr_mul(b)
    }

    /// `(z*, r*)` for an arbitrary target `b`.
    pub fn solve_target(&self, b: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        self.rel.check_c1(b)?;
        let z = -(&self.d_pinv * b);
        let r = self.harmonic_part(&(self.rel.d() * &z + b));
        Ok((z, r))
    }

    /// Full solution for target `b`; `s*` takes clamp values from the system.
    pub fn solve(&self, b: &DVector<f64>) -> Result<HodgeSolution> {
        let (z, r) = self.solve_target(b)?;
        self.assemble(z, r, self.rel.clamp_spec())
    }

    /// Full solution for new clamp values on the same clamped set.
    pub fn solve_clamped(&self, spec: &ClampSpec) -> Result<HodgeSolution> {
        let b = self.rel.boundary(spec)?;
        let (z, r) = self.solve_target(&b)?;
        self.assemble(z, r, spec)
    }

    /// Solves a whole batch at once. `states` is `c0_dim × N`; clamped rows
    /// carry the clamp values of each sample and free rows are ignored.
    pub fn solve_batch(&self, states: &DMatrix<f64>) -> Result<BatchSolution> {
        let sheaf = self.rel.sheaf();
        if states.nrows() != sheaf.c0_dim() {
            return Err(SheafError::Shape(format!(
                "batch states have {} rows, C⁰ has dimension {}",
                states.nrows(),
                sheaf.c0_dim()
            )));
        }
        let mut s = states.clone();
        for &pos in &self.rel.free {
            let r = sheaf.vertex_range_at(pos);
            s.rows_range_mut(r).fill(0.0);
        }
        let delta = sheaf.assemble_coboundary().matrix;
        let b = &delta * &s;
        let z = -(&self.d_pinv * &b);
        for (f, &pos) in self.rel.free.iter().enumerate() {
            s.rows_range_mut(sheaf.vertex_range_at(pos))
                .copy_from(&z.rows_range(self.rel.free_range_at(f)));
        }
        let r = self.harmonic_part_batch(&(self.rel.d() * &z + &b));
        Ok(BatchSolution { b, z, r, s })
    }

    fn assemble(&self, z: DVector<f64>, r: DVector<f64>, spec: &ClampSpec) -> Result<HodgeSolution> {
        let sheaf = self.rel.sheaf();
        let mut s = Cochain0::zeros(sheaf);
        for (f, &pos) in self.rel.free.iter().enumerate() {
            s.0.rows_range_mut(sheaf.vertex_range_at(pos))
                .copy_from(&z.rows_range(self.rel.free_range_at(f)));
        }
        for (id, val) in spec.iter() {
            s.set_block(sheaf, id, val)?;
        }
        let energy_rel = 0.5 * r.norm_squared();
        Ok(HodgeSolution {
            z_star: z,
            r_star: Cochain1(r),
            s_star: s,
            energy_rel,
        })
    }
}

/// Column-per-sample exact inference results.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchSolution {
    /// Targets, `c1_dim × N`.
    pub b: DMatrix<f64>,
    /// Optimal free states, `free_dim × N`.
    pub z: DMatrix<f64>,
    /// Harmonic residuals, `c1_dim × N`.
    pub r: DMatrix<f64>,
    /// Full states (clamped and free), `c0_dim × N`.
    pub s: DMatrix<f64>,
}

impl BatchSolution {
    pub fn len(&self) -> usize {
        self.s.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.s.ncols() == 0
    }
}

/// Result of exact inference on a relative system.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HodgeSolution {
    pub z_star: DVector<f64>,
    pub r_star: Cochain1,
    pub s_star: Cochain0,
    pub energy_rel: f64,
}
