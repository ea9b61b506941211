//! Per-edge weight gradients, the training loop, and Gauss-Newton per-edge
//! preconditioning from source covariances.
//!
//! For an edge `e = (u -> v)` the gradient of `E_rel` is
//! `∂E/∂W_e = (W_e s_u - s_v) s_uᵀ = -r_e s_uᵀ`. The batch accumulator
//! `G_e = Σ_i r_e⁽ⁱ⁾ (s_u⁽ⁱ⁾)ᵀ` is therefore the negative summed gradient, and
//! every update rule here *adds* a positive multiple of `G_e` (possibly
//! right-preconditioned), which makes each of them a descent step on `E_rel`.

use std::collections::HashSet;
use std::io::{self, Write};

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{self, BatchSample, DataSource};
use crate::error::{Result, SheafError};
use crate::linalg;
use crate::relative::{BatchSolution, ClampSpec, RelativeSystem};
use crate::sheaf::{Cochain0, EdgeId, PCSheaf, VertexId};

/// `(W_e s_u − s_v) s_uᵀ` evaluated on a full state.
pub fn edge_gradient(sheaf: &PCSheaf, s: &Cochain0, e: &EdgeId) -> Result<DMatrix<f64>> {
    let edge = sheaf.edge(e)?;
    if s.0.len() != sheaf.c0_dim() {
        return Err(SheafError::Shape(format!(
            "0-cochain has length {}, expected {}",
            s.0.len(),
            sheaf.c0_dim()
        )));
    }
    let su = s.block(sheaf, &edge.src)?;
    let sv = s.block(sheaf, &edge.dst)?;
    let pred_err = &edge.weight * su - sv;
    Ok(pred_err * su.transpose())
}

/// `(ℋb)_e (𝒢b)_uᵀ`, the gradient at the inference optimum written through
/// the harmonic and diffusive operators. Requires a free source vertex.
pub fn harmonic_diffusive_gradient(
    rel: &RelativeSystem<'_>,
    b: &DVector<f64>,
    e: &EdgeId,
    rank_tol: f64,
) -> Result<DMatrix<f64>> {
    let sheaf = rel.sheaf();
    let edge = sheaf.edge(e)?;
    if !rel.is_free(&edge.src)? {
        return Err(SheafError::ClampedSource {
            edge: e.0.clone(),
            vertex: edge.src.0.clone(),
        });
    }
    if b.len() != sheaf.c1_dim() {
        return Err(SheafError::Shape(format!(
            "target has length {}, expected {}",
            b.len(),
            sheaf.c1_dim()
        )));
    }
    let g = rel.diffusive_operator(rank_tol);
    let h = rel.harmonic_projector(rank_tol);
    let hb = &h * b;
    let gb = &g * b;
    let he = hb.rows_range(sheaf.edge_range(e)?);
    let gu = gb.rows_range(rel.free_range(&edge.src)?);
    Ok(he * gu.transpose())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    #[default]
    Plain,
    GaussNewton,
    ScalarSpectral,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub update_rule: UpdateRule,
    /// `None` trains every edge.
    pub trainable_edges: Option<Vec<EdgeId>>,
    pub rank_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            steps: 1000,
            batch_size: 128,
            seed: 0,
            update_rule: UpdateRule::Plain,
            trainable_edges: None,
            rank_tol: linalg::DEFAULT_RANK_TOL,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(SheafError::Config("learning_rate must be positive".into()));
        }
        if self.steps == 0 {
            return Err(SheafError::Config("steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(SheafError::Config("batch_size must be at least 1".into()));
        }
        if !(self.rank_tol > 0.0) {
            return Err(SheafError::Config("rank_tol must be positive".into()));
        }
        Ok(())
    }
}

/// How `Σ_{s_u}` is obtained during Gauss-Newton training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceEstimator {
    #[default]
    Exact,
    Hutchinson,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GNConfig {
    pub gamma: f64,
    pub epsilon: f64,
    /// Isotropic target covariance scale, `Σ_b = σ² I`.
    pub sigma_b: f64,
    pub probes: usize,
    pub tikhonov: f64,
    pub estimator: CovarianceEstimator,
}

impl Default for GNConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            epsilon: 1.0,
            sigma_b: 1.0,
            probes: 64,
            tikhonov: 0.0,
            estimator: CovarianceEstimator::Exact,
        }
    }
}

impl GNConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 2.0) {
            return Err(SheafError::Config(format!("gamma must lie in (0, 2), got {}", self.gamma)));
        }
        if !(self.epsilon > 0.0) {
            return Err(SheafError::Config("epsilon must be positive".into()));
        }
        if !(self.sigma_b >= 0.0) {
            return Err(SheafError::Config("sigma_b must be nonnegative".into()));
        }
        if self.probes == 0 {
            return Err(SheafError::Config("probes must be at least 1".into()));
        }
        if !(self.tikhonov >= 0.0) {
            return Err(SheafError::Config("tikhonov must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Covariance of the target cochain `b`.
#[derive(Clone, Debug, PartialEq)]
pub enum TargetCovariance {
    Isotropic(f64),
    Full(DMatrix<f64>),
}

impl TargetCovariance {
    fn check(&self, dim: usize) -> Result<()> {
        match self {
            TargetCovariance::Isotropic(s2) if *s2 < 0.0 => Err(SheafError::NotPsd(*s2)),
            TargetCovariance::Isotropic(_) => Ok(()),
            TargetCovariance::Full(m) => {
                if m.shape() != (dim, dim) {
                    return Err(SheafError::Shape(format!(
                        "target covariance is {}x{}, expected {dim}x{dim}",
                        m.nrows(),
                        m.ncols()
                    )));
                }
                check_psd(m)
            }
        }
    }

    /// A factor `C` with `C Cᵀ = Σ_b`.
    fn factor(&self, dim: usize) -> DMatrix<f64> {
        match self {
            TargetCovariance::Isotropic(s2) => DMatrix::identity(dim, dim) * s2.sqrt(),
            TargetCovariance::Full(m) => {
                let (vals, vecs) = linalg::sym_eigen_sorted(m);
                let sqrt = DMatrix::from_diagonal(&vals.map(|l| l.max(0.0).sqrt()));
                vecs * sqrt
            }
        }
    }
}

fn check_psd(m: &DMatrix<f64>) -> Result<()> {
    let asym = (m - m.transpose()).norm();
    let trace = m.trace().abs();
    if asym > 1e-10 * (1.0 + m.norm()) {
        return Err(SheafError::Shape("covariance is not symmetric".into()));
    }
    let lmin = linalg::lambda_min(m);
    if lmin < -1e-10 * trace.max(f64::MIN_POSITIVE) {
        return Err(SheafError::NotPsd(lmin));
    }
    Ok(())
}

/// Per-free-vertex source covariance blocks `Σ_{s_u}`.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceCovariance {
    pub blocks: Vec<(VertexId, DMatrix<f64>)>,
}

impl SourceCovariance {
    pub fn get(&self, id: &VertexId) -> Option<&DMatrix<f64>> {
        self.blocks.iter().find(|(v, _)| v == id).map(|(_, m)| m)
    }

    /// `sqrt(Σ_u ‖Σ_u − other_u‖_F²) / sqrt(Σ_u ‖other_u‖_F²)`.
    pub fn relative_frobenius_error(&self, reference: &SourceCovariance) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (id, r) in &reference.blocks {
            if let Some(m) = self.get(id) {
                num += (m - r).norm_squared();
            } else {
                num += r.norm_squared();
            }
            den += r.norm_squared();
        }
        (num / den).sqrt()
    }
}

fn blocks_of(rel: &RelativeSystem<'_>, full: &DMatrix<f64>) -> SourceCovariance {
    let ids: Vec<VertexId> = rel.free_vertices().cloned().collect();
    let blocks = ids
        .into_iter()
        .enumerate()
        .map(|(f, id)| {
            let r = rel.free_range_at(f);
            (id, full.view((r.start, r.start), (r.len(), r.len())).into_owned())
        })
        .collect();
    SourceCovariance { blocks }
}

/// Exact `Σ_{s_u}`: `σ² S_u L_rel† S_uᵀ` in the isotropic case, and
/// `S_u 𝒢 Σ_b 𝒢ᵀ S_uᵀ` in general.
pub fn gn_source_covariance(
    rel: &RelativeSystem<'_>,
    cov: &TargetCovariance,
    rank_tol: f64,
) -> Result<SourceCovariance> {
    cov.check(rel.sheaf().c1_dim())?;
    let full = match cov {
        TargetCovariance::Isotropic(s2) => {
            let (vals, vecs) = linalg::sym_eigen_sorted(&rel.laplacian());
            let lmax = vals.iter().cloned().fold(0.0_f64, f64::max);
            let inv = vals.map(|l| if l > rank_tol * lmax && l > 0.0 { 1.0 / l } else { 0.0 });
            &vecs * DMatrix::from_diagonal(&inv) * vecs.transpose() * *s2
        }
        TargetCovariance::Full(sb) => {
            let g = rel.diffusive_operator(rank_tol);
            &g * sb * g.transpose()
        }
    };
    Ok(blocks_of(rel, &full))
}

/// Monte-Carlo estimate of `Σ_{s_u}` from `q` probes `ξ ~ N(0, Σ_b)`, each
/// solving `(L_rel + λI) y = Dᵀξ`.
pub fn hutchinson_covariance(
    rel: &RelativeSystem<'_>,
    cov: &TargetCovariance,
    probes: usize,
    tikhonov: f64,
    seed: u64,
) -> Result<SourceCovariance> {
    if probes == 0 {
        return Err(SheafError::Config("probes must be at least 1".into()));
    }
    let m = rel.sheaf().c1_dim();
    cov.check(m)?;
    let n = rel.free_dim();
    let mut l = rel.laplacian();
    for i in 0..n {
        l[(i, i)] += tikhonov;
    }
    let chol = Cholesky::new(l).ok_or(SheafError::SingularLaplacian)?;
    let lmin_pivot = chol
        .l_dirty()
        .diagonal()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if n > 0 && !(lmin_pivot > 1e-7) {
        return Err(SheafError::SingularLaplacian);
    }
    let factor = cov.factor(m);
    let mut rng = data::rng_for(seed, 0);
    let mut acc = DMatrix::zeros(n, n);
    for _ in 0..probes {
        let w = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let xi = &factor * w;
        let y = chol.solve(&rel.d().tr_mul(&xi));
        acc.ger(1.0, &y, &y, 1.0);
    }
    acc /= probes as f64;
    Ok(blocks_of(rel, &acc))
}

/// `W_e + γ G_e (Σ_{s_u} + εI)⁻¹`, with `G_e = Σ_i r_e sᵤᵀ` the summed negative gradient.
pub fn gn_update(
    weight: &DMatrix<f64>,
    grad_acc: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    gn: &GNConfig,
) -> Result<DMatrix<f64>> {
    let nu = weight.ncols();
    if grad_acc.shape() != weight.shape() || sigma.shape() != (nu, nu) {
        return Err(SheafError::Shape(format!(
            "gn_update: W {:?}, G {:?}, Σ {:?}",
            weight.shape(),
            grad_acc.shape(),
            sigma.shape()
        )));
    }
    let mut reg = sigma.clone();
    for i in 0..nu {
        reg[(i, i)] += gn.epsilon;
    }
    let reg = (&reg + reg.transpose()) * 0.5;
    let chol = Cholesky::new(reg).ok_or(SheafError::NotPsd(f64::NAN))?;
    // G (Σ+εI)⁻¹ = ((Σ+εI)⁻¹ Gᵀ)ᵀ
    let step = chol.solve(&grad_acc.transpose()).transpose();
    Ok(weight + step * gn.gamma)
}

/// `γ / (ε + λ_max(Σ))`.
pub fn scalar_rate(sigma: &DMatrix<f64>, gn: &GNConfig) -> f64 {
    gn.gamma / (gn.epsilon + linalg::lambda_max(sigma).max(0.0))
}

/// Which vertex receives the input and which the supervision target.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoTemplate {
    pub input: VertexId,
    pub output: VertexId,
}

impl IoTemplate {
    pub fn new(input: impl Into<VertexId>, output: impl Into<VertexId>) -> Self {
        Self {
            input: input.into(),
            output: output.into(),
        }
    }

    fn check(&self, sheaf: &PCSheaf, batch: &BatchSample) -> Result<()> {
        let din = sheaf.vertex(&self.input)?.dim;
        let dout = sheaf.vertex(&self.output)?.dim;
        if batch.inputs.nrows() != din || batch.targets.nrows() != dout {
            return Err(SheafError::Shape(format!(
                "batch dims ({}, {}) do not match stalks of `{}` ({din}) and `{}` ({dout})",
                batch.inputs.nrows(),
                batch.targets.nrows(),
                self.input,
                self.output
            )));
        }
        if batch.inputs.ncols() != batch.targets.ncols() {
            return Err(SheafError::Shape("inputs and targets differ in batch size".into()));
        }
        Ok(())
    }

    /// Clamp spec with both ends at zero; used to fix the clamped vertex set.
    pub fn train_clamp(&self, sheaf: &PCSheaf) -> Result<ClampSpec> {
        Ok(ClampSpec::new()
            .with(self.input.clone(), DVector::zeros(sheaf.vertex(&self.input)?.dim))
            .with(self.output.clone(), DVector::zeros(sheaf.vertex(&self.output)?.dim)))
    }

    /// Clamp spec with only the input fixed.
    pub fn input_clamp(&self, sheaf: &PCSheaf) -> Result<ClampSpec> {
        Ok(ClampSpec::new().with(self.input.clone(), DVector::zeros(sheaf.vertex(&self.input)?.dim)))
    }

    /// `c0_dim × N` state matrix with input (and optionally output) rows filled.
    pub fn states(&self, sheaf: &PCSheaf, batch: &BatchSample, with_output: bool) -> Result<DMatrix<f64>> {
        self.check(sheaf, batch)?;
        let mut s = DMatrix::zeros(sheaf.c0_dim(), batch.len());
        s.rows_range_mut(sheaf.vertex_range(&self.input)?)
            .copy_from(&batch.inputs);
        if with_output {
            s.rows_range_mut(sheaf.vertex_range(&self.output)?)
                .copy_from(&batch.targets);
        }
        Ok(s)
    }
}

/// Batch-level diagnostics on one exact-inference solve.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchDiagnostics {
    /// `(1/N) Σ_i ‖r_e⁽ⁱ⁾‖`, edge order.
    pub harmonic_load: Vec<f64>,
    /// `(1/N) Σ_i ‖z_v⁽ⁱ⁾‖`, free-vertex order.
    pub diffusive_activation: Vec<f64>,
    /// `G_e = Σ_i r_e⁽ⁱ⁾ (s_u⁽ⁱ⁾)ᵀ`, edge order.
    pub grad_acc: Vec<DMatrix<f64>>,
    /// `‖G_e / N‖_F`, edge order.
    pub grad_fro: Vec<f64>,
}

pub fn batch_diagnostics(rel: &RelativeSystem<'_>, sol: &BatchSolution) -> BatchDiagnostics {
    let sheaf = rel.sheaf();
    let n = sol.len().max(1) as f64;
    let mut harmonic_load = Vec::with_capacity(sheaf.num_edges());
    let mut grad_acc = Vec::with_capacity(sheaf.num_edges());
    let mut grad_fro = Vec::with_capacity(sheaf.num_edges());
    for k in 0..sheaf.num_edges() {
        let (u, _) = sheaf.endpoints_at(k);
        let re = sol.r.rows_range(sheaf.edge_range_at(k));
        let su = sol.s.rows_range(sheaf.vertex_range_at(u));
        harmonic_load.push(re.column_iter().map(|c| c.norm()).sum::<f64>() / n);
        let g = re * su.transpose();
        grad_fro.push(g.norm() / n);
        grad_acc.push(g);
    }
    let diffusive_activation = (0..rel.num_free())
        .map(|f| {
            let zr = sol.z.rows_range(rel.free_range_at(f));
            zr.column_iter().map(|c| c.norm()).sum::<f64>() / n
        })
        .collect();
    BatchDiagnostics {
        harmonic_load,
        diffusive_activation,
        grad_acc,
        grad_fro,
    }
}

/// Mean squared error per output coordinate with only the input clamped.
pub fn validation_mse(
    sheaf: &PCSheaf,
    template: &IoTemplate,
    batch: &BatchSample,
    rank_tol: f64,
) -> Result<f64> {
    let rel = RelativeSystem::clamp(sheaf, &template.input_clamp(sheaf)?)?;
    let states = template.states(sheaf, batch, false)?;
    let sol = rel.solver(rank_tol).solve_batch(&states)?;
    let pred = sol.s.rows_range(sheaf.vertex_range(&template.output)?);
    let err = pred - &batch.targets;
    Ok(err.norm_squared() / (batch.len() as f64 * batch.targets.nrows() as f64))
}

/// Metrics recorded before the update of one training step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub harmonic_load: Vec<f64>,
    pub grad_fro: Vec<f64>,
    pub diffusive_activation: Vec<f64>,
    pub energy: f64,
}

/// Everything recorded by [`train`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub edge_ids: Vec<EdgeId>,
    /// Free vertices of the training (input and output clamped) system.
    pub vertex_ids: Vec<VertexId>,
    pub steps: Vec<StepMetrics>,
    /// `(step, mse)`; step `t` is measured after `t` updates.
    pub val_mse: Vec<(usize, f64)>,
}

impl MetricsRecord {
    /// `step,edge_id,harmonic_load,grad_fro`
    pub fn write_edge_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "step,edge_id,harmonic_load,grad_fro")?;
        for m in &self.steps {
            for (k, id) in self.edge_ids.iter().enumerate() {
                writeln!(w, "{},{},{:e},{:e}", m.step, id, m.harmonic_load[k], m.grad_fro[k])?;
            }
        }
        Ok(())
    }

    /// `step,vertex_id,diffusive_activation`
    pub fn write_vertex_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "step,vertex_id,diffusive_activation")?;
        for m in &self.steps {
            for (f, id) in self.vertex_ids.iter().enumerate() {
                writeln!(w, "{},{},{:e}", m.step, id, m.diffusive_activation[f])?;
            }
        }
        Ok(())
    }

    /// `step,val_mse`
    pub fn write_val_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "step,val_mse")?;
        for (t, v) in &self.val_mse {
            writeln!(w, "{t},{v:e}")?;
        }
        Ok(())
    }

    /// First recorded step whose validation MSE is at or below `threshold`.
    pub fn first_step_below(&self, threshold: f64) -> Option<usize> {
        self.val_mse.iter().find(|(_, v)| *v <= threshold).map(|(t, _)| *t)
    }

    pub fn final_val_mse(&self) -> Option<f64> {
        self.val_mse.last().map(|(_, v)| *v)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub sheaf: PCSheaf,
    pub record: MetricsRecord,
}

fn second_moment(states: &DMatrix<f64>, rows: std::ops::Range<usize>) -> DMatrix<f64> {
    let block = states.rows_range(rows);
    let n = block.ncols().max(1) as f64;
    (&block * block.transpose()) / n
}

/// Trains with exact inference at every step.
///
/// Each step draws a batch, clamps input and output, solves for `z*` per
/// sample, records diagnostics, and applies the configured update to every
/// trainable edge. When `validation` is given its MSE (output unclamped) is
/// recorded at step 0 and after every update.
pub fn train(
    initial: &PCSheaf,
    template: &IoTemplate,
    data: &mut dyn DataSource,
    config: &TrainConfig,
    gn: Option<&GNConfig>,
    validation: Option<&BatchSample>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let gn_cfg = match config.update_rule {
        UpdateRule::Plain => None,
        _ => {
            let g = gn.cloned().unwrap_or_default();
            g.validate()?;
            Some(g)
        }
    };
    let trainable: Vec<bool> = match &config.trainable_edges {
        None => vec![true; initial.num_edges()],
        Some(ids) => {
            let set: HashSet<usize> = ids
                .iter()
                .map(|id| initial.edge_position(id))
                .collect::<Result<_>>()?;
            (0..initial.num_edges()).map(|k| set.contains(&k)).collect()
        }
    };
    if !trainable.iter().any(|&t| t) {
        return Err(SheafError::Config("no trainable edges".into()));
    }
    let train_clamp = template.train_clamp(initial)?;
    let vertex_ids: Vec<VertexId> = RelativeSystem::clamp(initial, &train_clamp)?
        .free_vertices()
        .cloned()
        .collect();
    let mut record = MetricsRecord {
        edge_ids: initial.edges().iter().map(|e| e.id.clone()).collect(),
        vertex_ids,
        steps: Vec::with_capacity(config.steps),
        val_mse: Vec::new(),
    };

    let mut sheaf = initial.clone();
    if let Some(v) = validation {
        record.val_mse.push((0, validation_mse(&sheaf, template, v, config.rank_tol)?));
    }
    let n = config.batch_size;
    for t in 0..config.steps {
        let batch = data.next_batch(n);
        let new_weights = {
            let rel = RelativeSystem::clamp(&sheaf, &train_clamp)?;
            let states = template.states(&sheaf, &batch, true)?;
            let sol = rel.solver(config.rank_tol).solve_batch(&states)?;
            let diag = batch_diagnostics(&rel, &sol);
            let energy = 0.5 * sol.r.norm_squared() / batch.len() as f64;

            let covariance = match (&gn_cfg, config.update_rule) {
                (Some(g), UpdateRule::GaussNewton | UpdateRule::ScalarSpectral) => {
                    let target = TargetCovariance::Isotropic(g.sigma_b);
                    Some(match g.estimator {
                        CovarianceEstimator::Exact => {
                            gn_source_covariance(&rel, &target, config.rank_tol)?
                        }
                        CovarianceEstimator::Hutchinson => {
                            let seed = config.seed ^ ((t as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                            hutchinson_covariance(&rel, &target, g.probes, g.tikhonov, seed)?
                        }
                    })
                }
                _ => None,
            };

            let mut weights = sheaf.weights();
            for (k, w) in weights.iter_mut().enumerate() {
                if !trainable[k] {
                    continue;
                }
                let g_acc = &diag.grad_acc[k];
                match (config.update_rule, &gn_cfg, &covariance) {
                    (UpdateRule::Plain, _, _) => {
                        *w += g_acc * (config.learning_rate / n as f64);
                    }
                    (rule, Some(g), Some(cov)) => {
                        let e = &sheaf.edges()[k];
                        // Clamped sources use the empirical second moment of their batch values.
                        let sigma = match cov.get(&e.src) {
                            Some(s) => s.clone(),
                            None => second_moment(&states, sheaf.vertex_range(&e.src)?),
                        };
                        *w = match rule {
                            UpdateRule::GaussNewton => gn_update(w, g_acc, &sigma, g)?,
                            _ => &*w + g_acc * scalar_rate(&sigma, g),
                        };
                    }
                    _ => unreachable!("non-plain rules always carry a GN config"),
                }
            }
            record.steps.push(StepMetrics {
                step: t,
                harmonic_load: diag.harmonic_load,
                grad_fro: diag.grad_fro,
                diffusive_activation: diag.diffusive_activation,
                energy,
            });
            weights
        };
        sheaf = sheaf.with_weights(new_weights)?;
        if let Some(v) = validation {
            record
                .val_mse
                .push((t + 1, validation_mse(&sheaf, template, v, config.rank_tol)?));
        }
    }
    Ok(TrainOutcome { sheaf, record })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sample_batch, FixedBatch, IdentityTask};
    use crate::sheaf::{Edge, Vertex};

    const TOL: f64 = 1e-10;

    fn scalar(x: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x)
    }

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn small_chain() -> PCSheaf {
        PCSheaf::new(
            ["x", "h1", "h2", "y"].map(|n| Vertex::new(n, 1)).to_vec(),
            vec![
                Edge::new("e1", "x", "h1", scalar(2.0)),
                Edge::new("e2", "h1", "h2", scalar(1.0)),
                Edge::new("e3", "h2", "y", scalar(1.0)),
            ],
        )
        .unwrap()
    }

    fn clamp() -> ClampSpec {
        ClampSpec::new().with("x", v(&[1.0])).with("y", v(&[5.0]))
    }

    #[test]
    fn gradient_at_optimum_of_small_chain() {
        let s = small_chain();
        let rel = RelativeSystem::clamp(&s, &clamp()).unwrap();
        let sol = rel.solve_inference(TOL);
        let g = edge_gradient(&s, &sol.s_star, &"e1".into()).unwrap();
        assert!((g[(0, 0)] + 1.0).abs() < 1e-12);
        let hd = harmonic_diffusive_gradient(&rel, rel.b(), &"e2".into(), TOL).unwrap();
        let direct = edge_gradient(&s, &sol.s_star, &"e2".into()).unwrap();
        assert!((hd - direct).norm() < 1e-12);
    }

    #[test]
    fn zero_factors_give_exact_zero() {
        let s = small_chain();
        // r_e1 = 0: s_h1 = 2 s_x.
        let st = Cochain0(v(&[1.5, 3.0, 7.0, -2.0]));
        assert!(edge_gradient(&s, &st, &"e1".into()).unwrap().iter().all(|&x| x == 0.0));
        // s_u = 0 for e2.
        let st = Cochain0(v(&[1.5, 0.0, 7.0, -2.0]));
        assert!(edge_gradient(&s, &st, &"e2".into()).unwrap().iter().all(|&x| x == 0.0));
        assert!(edge_gradient(&s, &st, &"nope".into()).is_err());
    }

    #[test]
    fn clamped_source_is_rejected() {
        let s = small_chain();
        let rel = RelativeSystem::clamp(&s, &clamp()).unwrap();
        let err = harmonic_diffusive_gradient(&rel, rel.b(), &"e1".into(), TOL).unwrap_err();
        assert!(matches!(err, SheafError::ClampedSource { .. }));
    }

    #[test]
    fn consistent_target_zero_gradients() {
        let s = small_chain();
        let rel = RelativeSystem::clamp(&s, &ClampSpec::new().with("x", v(&[1.0])).with("y", v(&[2.0])))
            .unwrap();
        for e in ["e2", "e3"] {
            let g = harmonic_diffusive_gradient(&rel, rel.b(), &e.into(), TOL).unwrap();
            assert!(g.norm() < 1e-12);
        }
    }

    #[test]
    fn harmonic_target_with_zero_diffusion() {
        // b ∈ ker Dᵀ: 𝒢b = 0, so every free-source gradient vanishes.
        let s = small_chain();
        let rel = RelativeSystem::clamp(&s, &clamp()).unwrap();
        let b = v(&[1.0, 1.0, 1.0]);
        let g = harmonic_diffusive_gradient(&rel, &b, &"e2".into(), TOL).unwrap();
        assert!(g.norm() < 1e-12);
    }

    #[test]
    fn exact_covariance_small_chain() {
        let s = small_chain();
        let rel = RelativeSystem::clamp(&s, &clamp()).unwrap();
        let cov = gn_source_covariance(&rel, &TargetCovariance::Isotropic(1.0), TOL).unwrap();
        assert!((cov.get(&"h1".into()).unwrap()[(0, 0)] - 2.0 / 3.0).abs() < 1e-12);
        assert!((cov.get(&"h2".into()).unwrap()[(0, 0)] - 2.0 / 3.0).abs() < 1e-12);
        let zero = gn_source_covariance(&rel, &TargetCovariance::Isotropic(0.0), TOL).unwrap();
        assert!(zero.blocks.iter().all(|(_, m)| m.norm() == 0.0));
        let full = gn_source_covariance(&rel, &TargetCovariance::Full(DMatrix::identity(3, 3) * 2.5), TOL)
            .unwrap();
        let iso = gn_source_covariance(&rel, &TargetCovariance::Isotropic(2.5), TOL).unwrap();
        assert!(full.relative_frobenius_error(&iso) < 1e-9);
    }

    #[test]
    fn non_psd_target_covariance_rejected() {
        let s = small_chain();
        let rel = RelativeSystem::clamp(&s, &clamp()).unwrap();
        let bad = TargetCovariance::Full(DMatrix::from_diagonal(&v(&[1.0, -1.0, 1.0])));
        assert!(matches!(gn_source_covariance(&rel, &bad, TOL), Err(SheafError::NotPsd(_))));
        assert!(hutchinson_covariance(&rel, &bad, 10, 0.0, 1).is_err());
    }

    #[test]
    fn gn_update_cases() {
        let gn = GNConfig {
            gamma: 1.0,
            epsilon: 1.0,
            ..Default::default()
        };
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        // Σ = 0, γ = ε: plain step of size 1.
        let out = gn_update(&w, &g, &DMatrix::zeros(2, 2), &gn).unwrap();
        assert!((out - (&w + &g)).norm() < 1e-15);
        assert_eq!(gn_update(&w, &DMatrix::zeros(2, 2), &DMatrix::identity(2, 2), &gn).unwrap(), w);
        let sigma = DMatrix::from_diagonal(&v(&[3.0, 0.0]));
        let out = gn_update(&w, &g, &sigma, &gn).unwrap();
        let expected = &w + DMatrix::from_row_slice(2, 2, &[0.25, 2.0, 0.75, 4.0]);
        assert!((out - expected).norm() < 1e-15);
        assert!(gn_update(&w, &g, &DMatrix::zeros(3, 3), &gn).is_err());
    }

    #[test]
    fn scalar_rate_cases() {
        let gn = GNConfig {
            gamma: 1.0,
            epsilon: 1.0,
            ..Default::default()
        };
        assert_eq!(scalar_rate(&DMatrix::zeros(2, 2), &gn), 1.0);
        assert!((scalar_rate(&DMatrix::from_diagonal(&v(&[3.0, 1.0])), &gn) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn hutchinson_is_reproducible_and_zero_for_zero_covariance() {
        let s = small_chain();
        let rel = RelativeSystem::clamp(&s, &clamp()).unwrap();
        let a = hutchinson_covariance(&rel, &TargetCovariance::Isotropic(1.0), 200, 0.0, 9).unwrap();
        let b = hutchinson_covariance(&rel, &TargetCovariance::Isotropic(1.0), 200, 0.0, 9).unwrap();
        assert_eq!(a, b);
        let z = hutchinson_covariance(&rel, &TargetCovariance::Isotropic(0.0), 50, 0.0, 9).unwrap();
        assert!(z.blocks.iter().all(|(_, m)| m.norm() == 0.0));
    }

    #[test]
    fn hutchinson_needs_shift_on_singular_laplacian() {
        let s = PCSheaf::new(
            vec![Vertex::new("x", 1), Vertex::new("h", 1), Vertex::new("iso", 1)],
            vec![Edge::new("e", "x", "h", scalar(1.0))],
        )
        .unwrap();
        let rel = RelativeSystem::clamp(&s, &ClampSpec::new().with("x", v(&[1.0]))).unwrap();
        let iso = TargetCovariance::Isotropic(1.0);
        assert_eq!(
            hutchinson_covariance(&rel, &iso, 10, 0.0, 1),
            Err(SheafError::SingularLaplacian)
        );
        assert!(hutchinson_covariance(&rel, &iso, 10, 1e-8, 1).is_ok());
    }

    #[test]
    fn identity_chain_on_identity_data_does_not_move() {
        let i2 = DMatrix::<f64>::identity(2, 2);
        let s = PCSheaf::new(
            ["x", "h", "y"].map(|n| Vertex::new(n, 2)).to_vec(),
            vec![Edge::new("a", "x", "h", i2.clone()), Edge::new("b", "h", "y", i2.clone())],
        )
        .unwrap();
        let template = IoTemplate::new("x", "y");
        let mut data = IdentityTask::new(2, 0.0, data::rng_for(1, 0));
        let cfg = TrainConfig {
            steps: 5,
            batch_size: 8,
            ..Default::default()
        };
        let val = sample_batch(8, 2, 0.0, 2);
        let out = train(&s, &template, &mut data, &cfg, None, Some(&val)).unwrap();
        for (w, w0) in out.sheaf.weights().iter().zip(s.weights()) {
            assert!((w - w0).norm() < 1e-14);
        }
        assert!(out.record.steps.iter().all(|m| m.grad_fro.iter().all(|&g| g < 1e-14)));
        assert_eq!(out.record.val_mse.len(), 6);
        assert_eq!(out.record.first_step_below(1e-3), Some(0));
    }

    fn two_layer_problem() -> (PCSheaf, IoTemplate, BatchSample) {
        let w1 = DMatrix::from_row_slice(2, 2, &[0.6, -0.8, 0.8, 0.6]);
        let w2 = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let s = PCSheaf::new(
            ["x", "h", "y"].map(|n| Vertex::new(n, 2)).to_vec(),
            vec![Edge::new("a", "x", "h", w1), Edge::new("b", "h", "y", w2)],
        )
        .unwrap();
        (s, IoTemplate::new("x", "y"), sample_batch(4, 2, 0.0, 5))
    }

    fn energy_after(s: &PCSheaf, t: &IoTemplate, b: &BatchSample) -> f64 {
        let rel = RelativeSystem::clamp(s, &t.train_clamp(s).unwrap()).unwrap();
        let sol = rel.solver(TOL).solve_batch(&t.states(s, b, true).unwrap()).unwrap();
        0.5 * sol.r.norm_squared()
    }

    #[test]
    fn every_update_rule_decreases_energy() {
        let (s, t, batch) = two_layer_problem();
        let e0 = energy_after(&s, &t, &batch);
        let gn = GNConfig {
            gamma: 0.1,
            epsilon: 1.0,
            ..Default::default()
        };
        for rule in [UpdateRule::Plain, UpdateRule::GaussNewton, UpdateRule::ScalarSpectral] {
            let cfg = TrainConfig {
                steps: 1,
                batch_size: 4,
                update_rule: rule,
                ..Default::default()
            };
            let out = train(&s, &t, &mut FixedBatch(batch.clone()), &cfg, Some(&gn), None).unwrap();
            let e1 = energy_after(&out.sheaf, &t, &batch);
            assert!(e1 < e0, "{rule:?}: {e1} !< {e0}");
        }
    }

    #[test]
    fn frozen_edges_stay_fixed() {
        let (s, t, batch) = two_layer_problem();
        let cfg = TrainConfig {
            steps: 3,
            batch_size: 4,
            trainable_edges: Some(vec!["b".into()]),
            ..Default::default()
        };
        let out = train(&s, &t, &mut FixedBatch(batch), &cfg, None, None).unwrap();
        assert_eq!(out.sheaf.edges()[0].weight, s.edges()[0].weight);
        assert_ne!(out.sheaf.edges()[1].weight, s.edges()[1].weight);
        let bad = TrainConfig {
            trainable_edges: Some(vec!["zzz".into()]),
            ..cfg
        };
        let (s, t, batch) = two_layer_problem();
        assert!(train(&s, &t, &mut FixedBatch(batch), &bad, None, None).is_err());
    }

    #[test]
    fn data_dimension_mismatch_is_an_error() {
        let (s, t, _) = two_layer_problem();
        let cfg = TrainConfig {
            steps: 1,
            batch_size: 4,
            ..Default::default()
        };
        let wrong = sample_batch(4, 3, 0.0, 1);
        assert!(train(&s, &t, &mut FixedBatch(wrong), &cfg, None, None).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { steps: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(GNConfig { gamma: 2.0, ..Default::default() }.validate().is_err());
        assert!(GNConfig { epsilon: 0.0, ..Default::default() }.validate().is_err());
        assert!(GNConfig::default().validate().is_ok());
    }

    #[test]
    fn csv_headers() {
        let (s, t, batch) = two_layer_problem();
        let cfg = TrainConfig {
            steps: 2,
            batch_size: 4,
            ..Default::default()
        };
        let out = train(&s, &t, &mut FixedBatch(batch.clone()), &cfg, None, Some(&batch)).unwrap();
        let mut e = Vec::new();
        out.record.write_edge_csv(&mut e).unwrap();
        let e = String::from_utf8(e).unwrap();
        assert!(e.starts_with("step,edge_id,harmonic_load,grad_fro\n0,a,"));
        assert_eq!(e.lines().count(), 1 + 2 * 2);
        let mut vtx = Vec::new();
        out.record.write_vertex_csv(&mut vtx).unwrap();
        assert!(String::from_utf8(vtx).unwrap().starts_with("step,vertex_id,diffusive_activation\n0,h,"));
        let mut val = Vec::new();
        out.record.write_val_csv(&mut val).unwrap();
        assert_eq!(String::from_utf8(val).unwrap().lines().count(), 4);
    }
}
