//! Dense SVD-based helpers shared by the sheaf and relative-system code.
//!
//! Every rank decision uses a threshold relative to the largest singular
//! value: `σ_i` counts as nonzero iff `σ_i > rank_tol · σ_max`.

use nalgebra::{DMatrix, DVector, Dyn, SVD};

/// Default relative threshold for rank and pseudoinverse decisions.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

fn cutoff(singular_values: &DVector<f64>, rank_tol: f64) -> f64 {
    let smax = singular_values.iter().cloned().fold(0.0_f64, f64::max);
    rank_tol * smax
}

/// Thin SVD `a = U diag(σ) Vᵀ` (σ descending), computed with faer.
///
/// nalgebra's bidiagonal QR SVD was observed to return factorizations off by
/// up to 1e-2 on small, well-conditioned coboundaries, so all SVDs go here.
pub fn svd(a: &DMatrix<f64>) -> SVD<f64, Dyn, Dyn> {
    let (m, n) = a.shape();
    let k = m.min(n);
    if k == 0 {
        return SVD {
            u: Some(DMatrix::zeros(m, 0)),
            v_t: Some(DMatrix::zeros(0, n)),
            singular_values: DVector::zeros(0),
        };
    }
    let fa = faer::Mat::<f64>::from_fn(m, n, |i, j| a[(i, j)]);
    let f = fa.thin_svd().expect("SVD of a finite matrix converges");
    let (u, s, v) = (f.U(), f.S(), f.V());
    SVD {
        u: Some(DMatrix::from_fn(m, k, |i, j| u[(i, j)])),
        v_t: Some(DMatrix::from_fn(k, n, |i, j| v[(j, i)])),
        singular_values: DVector::from_fn(k, |i, _| s[i]),
    }
}

/// Numerical rank of `a`.
pub fn rank(a: &DMatrix<f64>, rank_tol: f64) -> usize {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0;
    }
    let sv = svd(a).singular_values;
    let cut = cutoff(&sv, rank_tol);
    sv.iter().filter(|&&s| s > cut && s > 0.0).count()
}

/// Moore-Penrose pseudoinverse by thin SVD.
pub fn pinv(a: &DMatrix<f64>, rank_tol: f64) -> DMatrix<f64> {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return DMatrix::zeros(n, m);
    }
    let f = svd(a);
    let u = f.u.as_ref().expect("svd computed with u");
    let v_t = f.v_t.as_ref().expect("svd computed with v_t");
    let cut = cutoff(&f.singular_values, rank_tol);
    let mut out = DMatrix::zeros(n, m);
    for (k, &s) in f.singular_values.iter().enumerate() {
        if s > cut && s > 0.0 {
            let vk = v_t.row(k).transpose();
            let uk = u.column(k);
            out.ger(1.0 / s, &vk, &uk, 1.0);
        }
    }
    out
}

/// Orthonormal basis (as columns) of the null space of `a`.
pub fn null_space(a: &DMatrix<f64>, rank_tol: f64) -> DMatrix<f64> {
    let (m, n) = a.shape();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    if m == 0 {
        return DMatrix::identity(n, n);
    }
    // Pad with zero rows so the thin SVD returns all n right singular vectors.
    let padded = if m < n {
        let mut p = DMatrix::zeros(n, n);
        p.view_mut((0, 0), (m, n)).copy_from(a);
        p
    } else {
        a.clone()
    };
    let f = svd(&padded);
    let v_t = f.v_t.expect("svd computed with v_t");
    let cut = cutoff(&f.singular_values, rank_tol);
    let cols: Vec<DVector<f64>> = f
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, &s)| !(s > cut && s > 0.0))
        .map(|(k, _)| v_t.row(k).transpose())
        .collect();
    if cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

fn sym_eigen_faer(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let fa = faer::Mat::<f64>::from_fn(n, n, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]));
    let e = fa
        .self_adjoint_eigen(faer::Side::Lower)
        .expect("symmetric eigendecomposition of a finite matrix converges");
    let (u, s) = (e.U(), e.S());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| s[i].total_cmp(&s[j]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| s[i]));
    let vectors = DMatrix::from_fn(n, n, |i, j| u[(i, order[j])]);
    (values, vectors)
}

/// Eigenvalues and eigenvectors of a symmetric matrix, sorted ascending.
pub fn sym_eigen_sorted(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    if a.nrows() == 0 {
        return (DVector::zeros(0), DMatrix::zeros(0, 0));
    }
    sym_eigen_faer(a)
}

/// Largest eigenvalue of a symmetric matrix (0 for an empty matrix).
pub fn lambda_max(a: &DMatrix<f64>) -> f64 {
    let (vals, _) = sym_eigen_sorted(a);
    vals.iter().last().copied().unwrap_or(0.0)
}

/// Smallest eigenvalue of a symmetric matrix (0 for an empty matrix).
pub fn lambda_min(a: &DMatrix<f64>) -> f64 {
    let (vals, _) = sym_eigen_sorted(a);
    vals.iter().next().copied().unwrap_or(0.0)
}
