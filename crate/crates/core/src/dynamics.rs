//! Iterative inference: explicit-Euler sheaf diffusion on `E_rel`, optionally
//! block-Jacobi preconditioned, and spectral summaries of `L_rel = DᵀD`.

use std::io::{self, Write};
use std::ops::Range;

use log::warn;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SheafError};
use crate::linalg;
use crate::relative::RelativeSystem;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preconditioner {
    #[default]
    None,
    BlockJacobi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    /// Euler step size; `None` picks `0.9 / λ_max` of the iteration operator.
    pub step_size: Option<f64>,
    pub max_steps: usize,
    /// Stop once `‖Dᵀ(Dz+b)‖ ≤ stop_tol·(1+‖b‖)`.
    pub stop_tol: f64,
    pub preconditioner: Preconditioner,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            step_size: None,
            max_steps: 100_000,
            stop_tol: 1e-10,
            preconditioner: Preconditioner::None,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(eta) = self.step_size {
            if !(eta > 0.0) {
                return Err(SheafError::Config(format!("step size must be positive, got {eta}")));
            }
        }
        if !(self.stop_tol > 0.0) {
            return Err(SheafError::Config("stop_tol must be positive".into()));
        }
        if self.max_steps == 0 {
            return Err(SheafError::Config("max_steps must be positive".into()));
        }
        Ok(())
    }
}

/// Normal-equation residual `Dᵀ(Dz + b)`, the gradient of `E_rel` at `z`.
pub fn energy_gradient(rel: &RelativeSystem<'_>, z: &DVector<f64>) -> Result<DVector<f64>> {
    rel.check_free(z)?;
    let r = rel.d() * z + rel.b();
    Ok(rel.d().tr_mul(&r))
}

pub fn relative_energy(rel: &RelativeSystem<'_>, z: &DVector<f64>) -> Result<f64> {
    rel.check_free(z)?;
    Ok(0.5 * (rel.d() * z + rel.b()).norm_squared())
}

/// One plain diffusion step `z − η Dᵀ(Dz + b)`.
pub fn diffusion_step(rel: &RelativeSystem<'_>, z: &DVector<f64>, eta: f64) -> Result<DVector<f64>> {
    let g = energy_gradient(rel, z)?;
    Ok(z - g * eta)
}

/// `M = blkdiag(L_rel)` over free-vertex blocks, stored factorized.
#[derive(Clone, Debug)]
pub struct BlockJacobi {
    blocks: Vec<(Range<usize>, DMatrix<f64>, Cholesky<f64, Dyn>)>,
    dim: usize,
}

impl BlockJacobi {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The assembled block-diagonal matrix `M`.
    pub fn matrix(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for (r, blk, _) in &self.blocks {
            m.view_mut((r.start, r.start), (r.len(), r.len())).copy_from(blk);
        }
        m
    }

    /// `M⁻¹ v`, block by block.
    pub fn solve(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.dim {
            return Err(SheafError::Shape(format!(
                "vector has length {}, preconditioner acts on {}",
                v.len(),
                self.dim
            )));
        }
        let mut out = DVector::zeros(self.dim);
        for (r, _, chol) in &self.blocks {
            let x = chol.solve(&v.rows_range(r.clone()).into_owned());
            out.rows_range_mut(r.clone()).copy_from(&x);
        }
        Ok(out)
    }
}

/// Extracts the per-free-vertex diagonal blocks of `L_rel`.
pub fn block_jacobi(rel: &RelativeSystem<'_>) -> Result<BlockJacobi> {
    let l = rel.laplacian();
    let mut blocks = Vec::with_capacity(rel.num_free());
    let ids: Vec<_> = rel.free_vertices().cloned().collect();
    for (f, id) in ids.iter().enumerate() {
        let r = rel.free_range_at(f);
        let blk = l.view((r.start, r.start), (r.len(), r.len())).into_owned();
        let scale = blk.diagonal().iter().cloned().fold(0.0_f64, f64::max);
        if !(scale > 0.0) {
            return Err(SheafError::SingularBlock(id.0.clone()));
        }
        let chol = Cholesky::new(blk.clone()).ok_or_else(|| SheafError::SingularBlock(id.0.clone()))?;
        // Cholesky accepts numerically singular PSD blocks; reject them explicitly.
        let min_pivot = chol.l_dirty().diagonal().iter().cloned().fold(f64::INFINITY, f64::min);
        if !(min_pivot * min_pivot > 1e-14 * scale) {
            return Err(SheafError::SingularBlock(id.0.clone()));
        }
        blocks.push((r, blk, chol));
    }
    Ok(BlockJacobi {
        blocks,
        dim: rel.free_dim(),
    })
}

/// One preconditioned step `z − η M⁻¹ Dᵀ(Dz + b)`.
pub fn preconditioned_step(
    rel: &RelativeSystem<'_>,
    z: &DVector<f64>,
    eta: f64,
    m: &BlockJacobi,
) -> Result<DVector<f64>> {
    let g = energy_gradient(rel, z)?;
    Ok(z - m.solve(&g)? * eta)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TracePoint {
    pub step: usize,
    pub residual_norm: f64,
    pub energy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiffusionRun {
    pub z: DVector<f64>,
    pub steps: usize,
    pub step_size: f64,
    pub converged: bool,
    pub trace: Vec<TracePoint>,
}

impl DiffusionRun {
    /// Writes `step,residual_norm,energy`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "step,residual_norm,energy")?;
        for p in &self.trace {
            writeln!(w, "{},{:e},{:e}", p.step, p.residual_norm, p.energy)?;
        }
        Ok(())
    }
}

/// Iterates plain or preconditioned diffusion from `z0`.
pub fn run_diffusion(
    rel: &RelativeSystem<'_>,
    z0: &DVector<f64>,
    config: &DiffusionConfig,
) -> Result<DiffusionRun> {
    config.validate()?;
    rel.check_free(z0)?;
    let precond = match config.preconditioner {
        Preconditioner::None => None,
        Preconditioner::BlockJacobi => Some(block_jacobi(rel)?),
    };
    // λ_max of the iteration operator (L_rel or M⁻¹L_rel).
    let l = rel.laplacian();
    let lmax = match &precond {
        None => linalg::lambda_max(&l),
        Some(m) => {
            // M = CCᵀ; C⁻¹ L C⁻ᵀ is symmetric and similar to M⁻¹L.
            let c = Cholesky::new(m.matrix())
                .ok_or(SheafError::SingularLaplacian)?
                .unpack();
            let left = c.solve_lower_triangular(&l).ok_or(SheafError::SingularLaplacian)?;
            let sym = c
                .solve_lower_triangular(&left.transpose())
                .ok_or(SheafError::SingularLaplacian)?;
            linalg::lambda_max(&sym)
        }
    };
    let eta = match config.step_size {
        Some(eta) => {
            if lmax > 0.0 && eta >= 2.0 / lmax {
                warn!("step size {eta} ≥ 2/λ_max = {}; diffusion may diverge", 2.0 / lmax);
            }
            eta
        }
        None if lmax > 0.0 => 0.9 / lmax,
        None => 1.0,
    };

    let threshold = config.stop_tol * (1.0 + rel.b().norm());
    let mut z = z0.clone();
    let mut trace = Vec::new();
    let mut steps = 0;
    loop {
        let r = rel.d() * &z + rel.b();
        let g = rel.d().tr_mul(&r);
        let gnorm = g.norm();
        trace.push(TracePoint {
            step: steps,
            residual_norm: gnorm,
            energy: 0.5 * r.norm_squared(),
        });
        if gnorm <= threshold {
            return Ok(DiffusionRun {
                z,
                steps,
                step_size: eta,
                converged: true,
                trace,
            });
        }
        if steps == config.max_steps {
            return Ok(DiffusionRun {
                z,
                steps,
                step_size: eta,
                converged: false,
                trace,
            });
        }
        let dir = match &precond {
            None => g,
            Some(m) => m.solve(&g)?,
        };
        z.axpy(-eta, &dir, 1.0);
        steps += 1;
    }
}

/// Eigen-summary of `L_rel`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpectralReport {
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    /// Smallest eigenvalue above `rank_tol·λ_max` (0 when there is none).
    pub lambda_min_plus: f64,
    pub lambda_max: f64,
    /// `λ_max / λ_min⁺`; 1 for a zero operator.
    pub kappa: f64,
}

impl SpectralReport {
    /// Writes `index,eigenvalue`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "index,eigenvalue")?;
        for (i, l) in self.eigenvalues.iter().enumerate() {
            writeln!(w, "{i},{l:e}")?;
        }
        Ok(())
    }
}

pub fn spectral_report(rel: &RelativeSystem<'_>, rank_tol: f64) -> SpectralReport {
    let (vals, _) = linalg::sym_eigen_sorted(&rel.laplacian());
    let eigenvalues: Vec<f64> = vals.iter().copied().collect();
    let lambda_max = eigenvalues.last().copied().unwrap_or(0.0).max(0.0);
    let lambda_min_plus = eigenvalues
        .iter()
        .copied()
        .find(|&l| l > rank_tol * lambda_max && l > 0.0)
        .unwrap_or(0.0);
    let kappa = if lambda_min_plus > 0.0 {
        lambda_max / lambda_min_plus
    } else {
        1.0
    };
    SpectralReport {
        eigenvalues,
        lambda_min_plus,
        lambda_max,
        kappa,
    }
}

/// Default Tikhonov shift for singular `L_rel`: `1e-8 · λ_max`.
pub fn default_tikhonov(rel: &RelativeSystem<'_>) -> f64 {
    1e-8 * linalg::lambda_max(&rel.laplacian())
}
