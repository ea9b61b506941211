//! Network factories (chain, knotted, all-to-all), the batch metrics, and
//! θ / size sweeps on the identity task.
//!
//! Vertex names are `x`, `h1 … hL`, `y`; edge ids are `src->dst`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, DataSource, IdentityTask};
use crate::dynamics::{spectral_report, SpectralReport};
use crate::error::{Result, SheafError};
use crate::learning::{self, GNConfig, IoTemplate, MetricsRecord, TrainConfig, UpdateRule};
use crate::linalg;
use crate::relative::RelativeSystem;
use crate::sheaf::{Edge, EdgeId, PCSheaf, Vertex, VertexId};

pub use crate::data::{sample_batch, BatchSample};
pub use crate::learning::validation_mse;

// RNG stream roles under one seed.
const STREAM_INIT: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_VAL: u64 = 2;

fn edge_name(src: &str, dst: &str) -> String {
    format!("{src}->{dst}")
}

fn hidden(i: usize) -> String {
    format!("h{i}")
}

/// Orthonormal `rows × cols` matrix from the QR factor of a Gaussian matrix,
/// with `R`'s diagonal signs absorbed (Haar for square shapes). Tall results
/// have orthonormal columns, wide results orthonormal rows.
pub fn random_orthonormal<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    let n = rows.max(cols);
    let a = data::gaussian_matrix(rng, n, n);
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q.view((0, 0), (rows, cols)).into_owned()
}

/// Haar-random rotation (determinant +1).
pub fn random_rotation<R: Rng>(rng: &mut R, n: usize) -> DMatrix<f64> {
    let mut q = random_orthonormal(rng, n, n);
    if q.determinant() < 0.0 {
        q.column_mut(0).neg_mut();
    }
    q
}

pub fn rotation2(theta: f64) -> DMatrix<f64> {
    let (s, c) = theta.sin_cos();
    DMatrix::from_row_slice(2, 2, &[c, -s, s, c])
}

/// Path `x -> h1 -> … -> y` with `dims.len() - 1` given weights.
pub fn make_chain(dims: &[usize], weights: Vec<DMatrix<f64>>) -> Result<PCSheaf> {
    if dims.len() < 2 {
        return Err(SheafError::Config("a chain needs at least two vertices".into()));
    }
    if weights.len() != dims.len() - 1 {
        return Err(SheafError::Shape(format!(
            "{} dims need {} weights, got {}",
            dims.len(),
            dims.len() - 1,
            weights.len()
        )));
    }
    let last = dims.len() - 1;
    let names: Vec<String> = (0..dims.len())
        .map(|i| match i {
            0 => "x".to_owned(),
            i if i == last => "y".to_owned(),
            i => hidden(i),
        })
        .collect();
    let vertices = names
        .iter()
        .zip(dims)
        .map(|(n, &d)| Vertex::new(n.as_str(), d))
        .collect();
    let edges = weights
        .into_iter()
        .enumerate()
        .map(|(i, w)| {
            Edge::new(
                edge_name(&names[i], &names[i + 1]),
                names[i].as_str(),
                names[i + 1].as_str(),
                w,
            )
        })
        .collect();
    PCSheaf::new(vertices, edges)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnottedSpec {
    /// Number of hidden layers.
    pub layers: usize,
    pub stalk_dim: usize,
    pub theta: f64,
    pub seed: u64,
}

impl Default for KnottedSpec {
    fn default() -> Self {
        Self {
            layers: 10,
            stalk_dim: 2,
            theta: 0.0,
            seed: 0,
        }
    }
}

/// Chain `x -> h1 -> … -> hL -> y` of random rotations `W_i`, plus a feedback
/// edge `h(i+1) -> h(i)` with weight `R(θ) W_iᵀ`, so that every 2-cycle has
/// monodromy `W_iᶠᴮ W_i = R(θ)`. The forward weights depend only on the seed.
pub fn make_knotted(spec: &KnottedSpec) -> Result<PCSheaf> {
    if spec.stalk_dim != 2 {
        return Err(SheafError::Config(format!(
            "knotted network uses 2-dimensional rotations, got stalk_dim {}",
            spec.stalk_dim
        )));
    }
    if spec.layers < 2 {
        return Err(SheafError::Config("knotted network needs at least 2 layers".into()));
    }
    let l = spec.layers;
    let mut rng = data::rng_for(spec.seed, STREAM_INIT);
    let forward: Vec<DMatrix<f64>> = (0..=l).map(|_| random_rotation(&mut rng, 2)).collect();
    let rot = rotation2(spec.theta);

    let mut vertices = vec![Vertex::new("x", 2)];
    vertices.extend((1..=l).map(|i| Vertex::new(hidden(i), 2)));
    vertices.push(Vertex::new("y", 2));

    let mut edges = vec![Edge::new(edge_name("x", "h1"), "x", "h1", forward[0].clone())];
    for i in 1..l {
        let (a, b) = (hidden(i), hidden(i + 1));
        edges.push(Edge::new(edge_name(&a, &b), a.as_str(), b.as_str(), forward[i].clone()));
    }
    edges.push(Edge::new(
        edge_name(&hidden(l), "y"),
        hidden(l),
        "y",
        forward[l].clone(),
    ));
    for i in 1..l {
        let (a, b) = (hidden(i), hidden(i + 1));
        edges.push(Edge::new(
            edge_name(&b, &a),
            b.as_str(),
            a.as_str(),
            &rot * forward[i].transpose(),
        ));
    }
    PCSheaf::new(vertices, edges)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllToAllSpec {
    pub n_hidden: usize,
    pub hidden_dim: usize,
    pub io_dim: usize,
    pub seed: u64,
}

impl Default for AllToAllSpec {
    fn default() -> Self {
        Self {
            n_hidden: 2,
            hidden_dim: 4,
            io_dim: 2,
            seed: 0,
        }
    }
}

/// `x -> h1`, `hn -> y`, and `hi -> hj` for every ordered pair `i ≠ j`, all
/// with independent orthonormal weights.
pub fn make_all_to_all(spec: &AllToAllSpec) -> Result<PCSheaf> {
    if spec.n_hidden == 0 {
        return Err(SheafError::Config("all-to-all network needs n_hidden ≥ 1".into()));
    }
    let (n, hd, io) = (spec.n_hidden, spec.hidden_dim, spec.io_dim);
    let mut rng = data::rng_for(spec.seed, STREAM_INIT);
    let mut vertices = vec![Vertex::new("x", io)];
    vertices.extend((1..=n).map(|i| Vertex::new(hidden(i), hd)));
    vertices.push(Vertex::new("y", io));

    let mut edges = vec![Edge::new(
        edge_name("x", "h1"),
        "x",
        "h1",
        random_orthonormal(&mut rng, hd, io),
    )];
    for i in 1..=n {
        for j in 1..=n {
            if i != j {
                let (a, b) = (hidden(i), hidden(j));
                edges.push(Edge::new(
                    edge_name(&a, &b),
                    a.as_str(),
                    b.as_str(),
                    random_orthonormal(&mut rng, hd, hd),
                ));
            }
        }
    }
    edges.push(Edge::new(
        edge_name(&hidden(n), "y"),
        hidden(n),
        "y",
        random_orthonormal(&mut rng, io, hd),
    ));
    PCSheaf::new(vertices, edges)
}

/// Ordered product of the edge maps along a closed walk (last edge leftmost).
pub fn monodromy(sheaf: &PCSheaf, cycle: &[EdgeId]) -> Result<DMatrix<f64>> {
    let first = cycle
        .first()
        .ok_or_else(|| SheafError::Shape("empty cycle".into()))?;
    let start = sheaf.edge(first)?.src.clone();
    let mut at = start.clone();
    let n = sheaf.vertex(&start)?.dim;
    let mut acc = DMatrix::identity(n, n);
    for id in cycle {
        let e = sheaf.edge(id)?;
        if e.src != at {
            return Err(SheafError::Shape(format!(
                "edge `{id}` leaves `{}` but the walk is at `{at}`",
                e.src
            )));
        }
        acc = &e.weight * acc;
        at = e.dst.clone();
    }
    if at != start {
        return Err(SheafError::Shape(format!(
            "walk ends at `{at}`, not at its start `{start}`"
        )));
    }
    Ok(acc)
}

/// The two edges of the `i`-th knotted 2-cycle, `h_i -> h_{i+1} -> h_i`.
pub fn knotted_cycle(i: usize) -> [EdgeId; 2] {
    [
        EdgeId(edge_name(&hidden(i), &hidden(i + 1))),
        EdgeId(edge_name(&hidden(i + 1), &hidden(i))),
    ]
}

fn solve_diag(
    rel: &RelativeSystem<'_>,
    template: &IoTemplate,
    batch: &BatchSample,
    rank_tol: f64,
) -> Result<learning::BatchDiagnostics> {
    if batch.is_empty() {
        return Err(SheafError::Shape("empty batch".into()));
    }
    let with_output = !rel.is_free(&template.output)?;
    let states = template.states(rel.sheaf(), batch, with_output)?;
    let sol = rel.solver(rank_tol).solve_batch(&states)?;
    Ok(learning::batch_diagnostics(rel, &sol))
}

/// `(1/N) Σ_i ‖(ℋ b⁽ⁱ⁾)_e‖` per edge. The clamped vertex set of `rel` is kept;
/// the batch supplies the input (and output, when clamped) values.
pub fn harmonic_load(
    rel: &RelativeSystem<'_>,
    template: &IoTemplate,
    batch: &BatchSample,
    rank_tol: f64,
) -> Result<Vec<(EdgeId, f64)>> {
    let d = solve_diag(rel, template, batch, rank_tol)?;
    Ok(rel
        .sheaf()
        .edges()
        .iter()
        .map(|e| e.id.clone())
        .zip(d.harmonic_load)
        .collect())
}

/// `(1/N) Σ_i ‖z*⁽ⁱ⁾_v‖` per free vertex.
pub fn diffusive_activation(
    rel: &RelativeSystem<'_>,
    template: &IoTemplate,
    batch: &BatchSample,
    rank_tol: f64,
) -> Result<Vec<(VertexId, f64)>> {
    let d = solve_diag(rel, template, batch, rank_tol)?;
    Ok(rel.free_vertices().cloned().zip(d.diffusive_activation).collect())
}

/// `‖(1/N) Σ_i r_e⁽ⁱ⁾ (s_u⁽ⁱ⁾)ᵀ‖_F` per edge.
pub fn gradient_magnitude(
    rel: &RelativeSystem<'_>,
    template: &IoTemplate,
    batch: &BatchSample,
    rank_tol: f64,
) -> Result<Vec<(EdgeId, f64)>> {
    let d = solve_diag(rel, template, batch, rank_tol)?;
    Ok(rel
        .sheaf()
        .edges()
        .iter()
        .map(|e| e.id.clone())
        .zip(d.grad_fro)
        .collect())
}

/// Training protocol shared by single runs and sweeps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Protocol {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub val_size: usize,
    pub threshold: f64,
    pub noise_std: f64,
    pub update_rule: UpdateRule,
    pub gn: Option<GNConfig>,
    pub rank_tol: f64,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            steps: 1000,
            batch_size: 128,
            val_size: 128,
            threshold: 1e-3,
            noise_std: 0.0,
            update_rule: UpdateRule::Plain,
            gn: None,
            rank_tol: linalg::DEFAULT_RANK_TOL,
        }
    }
}

impl Protocol {
    pub fn validate(&self) -> Result<()> {
        self.train_config(0).validate()?;
        if self.val_size == 0 {
            return Err(SheafError::Config("val_size must be ≥ 1".into()));
        }
        if !(self.threshold > 0.0) {
            return Err(SheafError::Config("threshold must be positive".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(SheafError::Config("noise_std must be ≥ 0".into()));
        }
        if let Some(g) = &self.gn {
            g.validate()?;
        }
        Ok(())
    }

    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            steps: self.steps,
            batch_size: self.batch_size,
            seed,
            update_rule: self.update_rule,
            trainable_edges: None,
            rank_tol: self.rank_tol,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointSummary {
    pub converged: bool,
    pub first_step_below_threshold: Option<usize>,
    pub final_mse: f64,
    pub kappa_at_init: f64,
}

#[derive(Clone, Debug)]
pub struct PointResult {
    pub summary: PointSummary,
    pub record: MetricsRecord,
    pub spectrum_at_init: SpectralReport,
    pub trained: PCSheaf,
}

/// Trains `sheaf` on the identity task under `protocol`. Training and
/// validation batches come from independent streams of `seed`.
pub fn run_point(
    sheaf: &PCSheaf,
    template: &IoTemplate,
    protocol: &Protocol,
    seed: u64,
) -> Result<PointResult> {
    protocol.validate()?;
    let io_dim = sheaf.vertex(&template.input)?.dim;
    let rel = RelativeSystem::clamp(sheaf, &template.train_clamp(sheaf)?)?;
    let spectrum_at_init = spectral_report(&rel, protocol.rank_tol);
    let mut val = IdentityTask::new(io_dim, protocol.noise_std, data::rng_for(seed, STREAM_VAL));
    let val_batch = val.next_batch(protocol.val_size);
    let mut train_data = IdentityTask::new(io_dim, protocol.noise_std, data::rng_for(seed, STREAM_TRAIN));
    let out = learning::train(
        sheaf,
        template,
        &mut train_data,
        &protocol.train_config(seed),
        protocol.gn.as_ref(),
        Some(&val_batch),
    )?;
    let final_mse = out.record.final_val_mse().unwrap_or(f64::NAN);
    let summary = PointSummary {
        converged: final_mse <= protocol.threshold,
        first_step_below_threshold: out.record.first_step_below(protocol.threshold),
        final_mse,
        kappa_at_init: spectrum_at_init.kappa,
    };
    Ok(PointResult {
        summary,
        record: out.record,
        spectrum_at_init,
        trained: out.sheaf,
    })
}

/// One point of a sweep: the axis value and seed, plus its result.
#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub label: String,
    pub value: f64,
    pub seed: u64,
    pub result: PointResult,
}

fn io_template() -> IoTemplate {
    IoTemplate::new("x", "y")
}

fn run_sweep<F>(points: Vec<(String, f64, u64)>, protocol: &Protocol, build: F) -> Result<Vec<SweepPoint>>
where
    F: Fn(f64, u64) -> Result<PCSheaf> + Sync,
{
    points
        .into_par_iter()
        .map(|(label, value, seed)| {
            let sheaf = build(value, seed)?;
            let result = run_point(&sheaf, &io_template(), protocol, seed)?;
            Ok(SweepPoint {
                label,
                value,
                seed,
                result,
            })
        })
        .collect()
}

/// Trains a knotted network per `(θ, seed)` pair. Output order is θ-major.
pub fn sweep_theta(
    thetas: &[f64],
    seeds: &[u64],
    base: &KnottedSpec,
    protocol: &Protocol,
) -> Result<Vec<SweepPoint>> {
    let points = thetas
        .iter()
        .flat_map(|&t| seeds.iter().map(move |&s| (format!("theta={t}/seed={s}"), t, s)))
        .collect();
    run_sweep(points, protocol, |theta, seed| {
        make_knotted(&KnottedSpec {
            theta,
            seed,
            ..base.clone()
        })
    })
}

/// Trains an all-to-all network per `(size, seed)` pair. Output order is size-major.
pub fn sweep_size(
    sizes: &[usize],
    seeds: &[u64],
    base: &AllToAllSpec,
    protocol: &Protocol,
) -> Result<Vec<SweepPoint>> {
    let points = sizes
        .iter()
        .flat_map(|&n| seeds.iter().map(move |&s| (format!("size={n}/seed={s}"), n as f64, s)))
        .collect();
    run_sweep(points, protocol, |n, seed| {
        make_all_to_all(&AllToAllSpec {
            n_hidden: n as usize,
            seed,
            ..base.clone()
        })
    })
}

/// Locates the θ at which training stops converging, by bisection on
/// `[lo, hi]` (converging at `lo`, failing at `hi`). Returns the midpoint of
/// the final bracket, or `None` if the endpoints do not bracket a change.
pub fn convergence_boundary(
    base: &KnottedSpec,
    protocol: &Protocol,
    lo: f64,
    hi: f64,
    iterations: usize,
) -> Result<Option<f64>> {
    let converges = |theta: f64| -> Result<bool> {
        let sheaf = make_knotted(&KnottedSpec {
            theta,
            ..base.clone()
        })?;
        Ok(run_point(&sheaf, &io_template(), protocol, base.seed)?
            .summary
            .converged)
    };
    let (mut a, mut b) = (lo, hi);
    if !converges(a)? || converges(b)? {
        return Ok(None);
    }
    for _ in 0..iterations {
        let m = 0.5 * (a + b);
        if converges(m)? {
            a = m;
        } else {
            b = m;
        }
    }
    Ok(Some(0.5 * (a + b)))
}

/// Diagnostics of a knotted network at initialization on one seeded batch.
#[derive(Clone, Debug)]
pub struct KnotDiagnostics {
    pub harmonic_load: Vec<(EdgeId, f64)>,
    pub diffusive_activation: Vec<(VertexId, f64)>,
    pub gradient_magnitude: Vec<(EdgeId, f64)>,
}

pub fn diagnose_at_init(
    sheaf: &PCSheaf,
    template: &IoTemplate,
    batch: &BatchSample,
    rank_tol: f64,
) -> Result<KnotDiagnostics> {
    let rel = RelativeSystem::clamp(sheaf, &template.train_clamp(sheaf)?)?;
    Ok(KnotDiagnostics {
        harmonic_load: harmonic_load(&rel, template, batch, rank_tol)?,
        diffusive_activation: diffusive_activation(&rel, template, batch, rank_tol)?,
        gradient_magnitude: gradient_magnitude(&rel, template, batch, rank_tol)?,
    })
}

/// Vertex of a hidden index, for callers building reports.
pub fn hidden_vertex(i: usize) -> VertexId {
    VertexId(hidden(i))
}

/// Unit vector helper used by tests and the CLI.
pub fn unit(n: usize, i: usize) -> DVector<f64> {
    let mut v = DVector::zeros(n);
    v[i] = 1.0;
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relative::ClampSpec;
    use std::f64::consts::PI;

    const TOL: f64 = 1e-10;

    fn scalar(x: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x)
    }

    #[test]
    fn scalar_chain_factory() {
        let s = make_chain(&[1, 1, 1, 1], vec![scalar(2.0), scalar(3.0), scalar(4.0)]).unwrap();
        assert_eq!(s.c0_dim(), 4);
        assert_eq!(s.c1_dim(), 3);
        let ids: Vec<_> = s.edges().iter().map(|e| e.id.0.as_str()).collect();
        assert_eq!(ids, ["x->h1", "h1->h2", "h2->y"]);
        assert!(make_chain(&[1, 2], vec![scalar(1.0)]).is_err());
        assert!(make_chain(&[1, 1, 1], vec![scalar(1.0)]).is_err());
    }

    #[test]
    fn identity_chain_kernel_propagates_constants() {
        let i2 = DMatrix::<f64>::identity(2, 2);
        let s = make_chain(&[2, 2, 2], vec![i2.clone(), i2]).unwrap();
        let k = s.h0_basis(TOL);
        assert_eq!(k.ncols(), 2);
        let c = DVector::from_column_slice(&[1.0, -2.0, 1.0, -2.0, 1.0, -2.0]);
        let proj = &k * (k.transpose() * &c);
        assert!((proj - c).norm() < 1e-12);
    }

    #[test]
    fn orthonormal_chain_has_no_h1() {
        let mut rng = data::rng_for(3, 0);
        let ws = (0..3).map(|_| random_orthonormal(&mut rng, 2, 2)).collect();
        let s = make_chain(&[2, 2, 2, 2], ws).unwrap();
        assert_eq!(s.h1_dim(TOL), 0);
    }

    #[test]
    fn orthonormal_shapes() {
        let mut rng = data::rng_for(1, 0);
        let tall = random_orthonormal(&mut rng, 4, 2);
        assert!((tall.transpose() * &tall - DMatrix::identity(2, 2)).norm() < 1e-12);
        let wide = random_orthonormal(&mut rng, 2, 4);
        assert!((&wide * wide.transpose() - DMatrix::identity(2, 2)).norm() < 1e-12);
        let r = random_rotation(&mut rng, 2);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn knotted_monodromy() {
        for (theta, expected) in [(0.0, DMatrix::identity(2, 2)), (PI, -DMatrix::<f64>::identity(2, 2))] {
            let s = make_knotted(&KnottedSpec { theta, seed: 4, ..Default::default() }).unwrap();
            for i in 1..10 {
                let m = monodromy(&s, &knotted_cycle(i)).unwrap();
                assert!((m - &expected).norm() < 1e-12);
            }
        }
        let s = make_knotted(&KnottedSpec { theta: PI / 2.0, ..Default::default() }).unwrap();
        let m = monodromy(&s, &knotted_cycle(3)).unwrap();
        assert!(m.trace().abs() < 1e-12);
        assert!((m - rotation2(PI / 2.0)).norm() < 1e-12);
    }

    #[test]
    fn knotted_structure_and_orthogonality() {
        let s = make_knotted(&KnottedSpec { theta: 0.7, seed: 9, ..Default::default() }).unwrap();
        assert_eq!(s.num_vertices(), 12);
        assert_eq!(s.num_edges(), 11 + 9);
        for e in s.edges() {
            assert!((e.weight.transpose() * &e.weight - DMatrix::identity(2, 2)).norm() < 1e-12);
        }
        assert!(make_knotted(&KnottedSpec { stalk_dim: 3, ..Default::default() }).is_err());
        assert!(make_knotted(&KnottedSpec { layers: 1, ..Default::default() }).is_err());
    }

    #[test]
    fn monodromy_errors() {
        let s = make_knotted(&KnottedSpec::default()).unwrap();
        assert!(monodromy(&s, &[]).is_err());
        assert!(monodromy(&s, &[EdgeId::from("h1->h2")]).is_err());
        assert!(monodromy(&s, &[EdgeId::from("h1->h2"), EdgeId::from("h1->h2")]).is_err());
    }

    #[test]
    fn all_to_all_counts() {
        let s = make_all_to_all(&AllToAllSpec { n_hidden: 2, ..Default::default() }).unwrap();
        assert_eq!(s.num_edges(), 4);
        assert_eq!(s.c0_dim(), 2 + 4 + 4 + 2);
        let s1 = make_all_to_all(&AllToAllSpec { n_hidden: 1, ..Default::default() }).unwrap();
        assert_eq!(s1.num_edges(), 2);
        let s5 = make_all_to_all(&AllToAllSpec { n_hidden: 5, ..Default::default() }).unwrap();
        for e in s5.edges() {
            let w = &e.weight;
            let g = if w.nrows() >= w.ncols() { w.transpose() * w } else { w * w.transpose() };
            assert!((&g - DMatrix::identity(g.nrows(), g.nrows())).norm() < 1e-12);
        }
    }

    #[test]
    fn metrics_on_consistent_data_are_zero() {
        let i2 = DMatrix::<f64>::identity(2, 2);
        let s = make_chain(&[2, 2, 2], vec![i2.clone(), i2]).unwrap();
        let t = io_template();
        let rel = RelativeSystem::clamp(&s, &t.train_clamp(&s).unwrap()).unwrap();
        let batch = sample_batch(16, 2, 0.0, 1);
        assert!(harmonic_load(&rel, &t, &batch, TOL).unwrap().iter().all(|(_, l)| *l < 1e-12));
        assert!(gradient_magnitude(&rel, &t, &batch, TOL).unwrap().iter().all(|(_, g)| *g < 1e-12));
        assert!(validation_mse(&s, &t, &batch, TOL).unwrap() < 1e-24);
    }

    #[test]
    fn zero_batch_gives_zero_activation() {
        let s = make_knotted(&KnottedSpec::default()).unwrap();
        let t = io_template();
        let rel = RelativeSystem::clamp(&s, &t.train_clamp(&s).unwrap()).unwrap();
        let zero = BatchSample {
            inputs: DMatrix::zeros(2, 4),
            targets: DMatrix::zeros(2, 4),
            noise_std: 0.0,
        };
        let act = diffusive_activation(&rel, &t, &zero, TOL).unwrap();
        assert!(act.iter().all(|(_, a)| *a == 0.0));
        let empty = BatchSample {
            inputs: DMatrix::zeros(2, 0),
            targets: DMatrix::zeros(2, 0),
            noise_std: 0.0,
        };
        assert!(harmonic_load(&rel, &t, &empty, TOL).is_err());
    }

    #[test]
    fn single_sample_gradient_is_rank_one_norm() {
        let s = make_knotted(&KnottedSpec { theta: 1.0, ..Default::default() }).unwrap();
        let t = io_template();
        let batch = sample_batch(1, 2, 0.0, 8);
        let rel = RelativeSystem::clamp(&s, &t.train_clamp(&s).unwrap()).unwrap();
        let gm = gradient_magnitude(&rel, &t, &batch, TOL).unwrap();
        let spec = ClampSpec::new()
            .with("x", batch.inputs.column(0).into_owned())
            .with("y", batch.targets.column(0).into_owned());
        let sol = rel.with_clamp_values(&spec).unwrap().solve_inference(TOL);
        for (k, e) in s.edges().iter().enumerate() {
            let r = sol.r_star.block(&s, &e.id).unwrap().norm();
            let su = sol.s_star.block(&s, &e.src).unwrap().norm();
            assert!((gm[k].1 - r * su).abs() < 1e-12 * (1.0 + r * su));
        }
    }

    #[test]
    fn validation_mse_matches_forward_product() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 2.0]);
        let b = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let s = make_chain(&[2, 2, 2], vec![a.clone(), b.clone()]).unwrap();
        let batch = sample_batch(32, 2, 0.0, 6);
        let prod = &b * &a - DMatrix::identity(2, 2);
        let expected = (&prod * &batch.inputs).norm_squared() / (32.0 * 2.0);
        let got = validation_mse(&s, &io_template(), &batch, TOL).unwrap();
        assert!((got - expected).abs() < 1e-12 * expected);
    }

    #[test]
    fn empty_sweep_is_empty() {
        let p = Protocol { steps: 2, batch_size: 4, val_size: 4, ..Default::default() };
        assert!(sweep_theta(&[], &[0], &KnottedSpec::default(), &p).unwrap().is_empty());
        assert!(sweep_size(&[], &[0], &AllToAllSpec::default(), &p).unwrap().is_empty());
    }

    #[test]
    fn sweeps_are_deterministic() {
        let p = Protocol { steps: 5, batch_size: 8, val_size: 8, ..Default::default() };
        let a = sweep_size(&[1, 2], &[3], &AllToAllSpec::default(), &p).unwrap();
        let b = sweep_size(&[1, 2], &[3], &AllToAllSpec::default(), &p).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.result.record, y.result.record);
            assert_eq!(x.label, y.label);
        }
        assert_eq!(a[0].label, "size=1/seed=3");
    }

    fn internal(v: &str) -> bool {
        v.strip_prefix('h')
            .and_then(|n| n.parse::<usize>().ok())
            .is_some_and(|n| (2..=9).contains(&n))
    }

    #[test]
    fn starvation_at_pi() {
        let s = make_knotted(&KnottedSpec { theta: PI, seed: 2, ..Default::default() }).unwrap();
        let batch = sample_batch(64, 2, 0.0, 5);
        let d = diagnose_at_init(&s, &io_template(), &batch, TOL).unwrap();
        let mut inner = 0.0_f64;
        let mut outer = 0.0_f64;
        for (id, l) in &d.harmonic_load {
            let e = s.edge(id).unwrap();
            if internal(e.src.as_str()) && internal(e.dst.as_str()) {
                inner = inner.max(*l);
            } else {
                outer = outer.max(*l);
            }
        }
        assert!(10.0 * inner <= outer, "inner {inner} outer {outer}");
        let act = |v: &str| d.diffusive_activation.iter().find(|(id, _)| id.as_str() == v).unwrap().1;
        let edge_act = act("h1").min(act("h10"));
        for i in 2..=9 {
            assert!(10.0 * act(&format!("h{i}")) <= edge_act);
        }
    }

    #[test]
    fn gradient_bounded_by_cauchy_schwarz() {
        let s = make_knotted(&KnottedSpec { theta: 0.9, seed: 1, ..Default::default() }).unwrap();
        let t = io_template();
        let batch = sample_batch(16, 2, 0.1, 3);
        let rel = RelativeSystem::clamp(&s, &t.train_clamp(&s).unwrap()).unwrap();
        let gm = gradient_magnitude(&rel, &t, &batch, TOL).unwrap();
        let mut bound = vec![0.0; s.num_edges()];
        for i in 0..batch.len() {
            let spec = ClampSpec::new()
                .with("x", batch.inputs.column(i).into_owned())
                .with("y", batch.targets.column(i).into_owned());
            let sol = rel.with_clamp_values(&spec).unwrap().solve_inference(TOL);
            for (k, e) in s.edges().iter().enumerate() {
                bound[k] += sol.r_star.block(&s, &e.id).unwrap().norm()
                    * sol.s_star.block(&s, &e.src).unwrap().norm()
                    / batch.len() as f64;
            }
        }
        for (k, (_, g)) in gm.iter().enumerate() {
            assert!(*g <= bound[k] + 1e-12);
        }
    }
}
