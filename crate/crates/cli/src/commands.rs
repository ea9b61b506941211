use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use chrono::Utc;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use sheafpc::dynamics::{run_diffusion, spectral_report, SpectralReport};
use sheafpc::experiments::{self, AllToAllSpec, KnottedSpec, PointResult, PointSummary, SweepPoint};
use sheafpc::learning::{batch_diagnostics, BatchDiagnostics, IoTemplate};
use sheafpc::relative::RelativeSystem;
use sheafpc::{ClampSpec, PCSheaf};

use crate::config::{NetworkConfig, RunConfig, SweepAxis};
use crate::manifest::{OutputDir, RunManifest};

/// Caps sweep parallelism when set.
pub const THREADS_ENV: &str = "SHEAFPC_THREADS";

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

struct RunContext {
    cfg: RunConfig,
    text: String,
    out: PathBuf,
    seed: u64,
}

fn prepare(opts: &RunOptions) -> anyhow::Result<RunContext> {
    let (cfg, text) = RunConfig::load(&opts.config)?;
    let out = opts
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .context("no output directory: pass --out or set `out` in the config")?;
    let seed = opts.seed.unwrap_or(cfg.seed);
    Ok(RunContext { cfg, text, out, seed })
}

/// Clamp set and per-sample states for `diagnose` / `spectrum`: explicit
/// clamp values if configured, otherwise a seeded identity batch on the io
/// template (input and output clamped).
fn clamped_states(
    cfg: &RunConfig,
    sheaf: &PCSheaf,
    seed: u64,
    n: usize,
) -> anyhow::Result<(ClampSpec, DMatrix<f64>)> {
    if let Some(spec) = cfg.clamp_spec(sheaf)? {
        let mut s = DVector::zeros(sheaf.c0_dim());
        for (id, v) in spec.iter() {
            s.rows_range_mut(sheaf.vertex_range(id)?).copy_from(v);
        }
        return Ok((spec, DMatrix::from_column_slice(s.len(), 1, s.as_slice())));
    }
    let template = cfg.template();
    let io_dim = sheaf.vertex(&template.input)?.dim;
    let batch = experiments::sample_batch(n, io_dim, cfg.protocol.noise_std, seed);
    Ok((
        template.train_clamp(sheaf)?,
        template.states(sheaf, &batch, true)?,
    ))
}

#[derive(Serialize)]
struct SpectrumSummary {
    lambda_min_plus: f64,
    lambda_max: f64,
    kappa: f64,
}

impl From<&SpectralReport> for SpectrumSummary {
    fn from(r: &SpectralReport) -> Self {
        Self {
            lambda_min_plus: r.lambda_min_plus,
            lambda_max: r.lambda_max,
            kappa: r.kappa,
        }
    }
}

#[derive(Serialize)]
struct DiagnoseReport {
    c0_dim: usize,
    c1_dim: usize,
    coboundary_rank: usize,
    h0_dim: usize,
    h1_dim: usize,
    samples: usize,
    clamped: Vec<String>,
    spectrum: SpectrumSummary,
    harmonic_load: BTreeMap<String, f64>,
    diffusive_activation: BTreeMap<String, f64>,
    gradient_magnitude: BTreeMap<String, f64>,
    /// Free vertices whose activation is below 10% of the largest.
    starved_vertices: Vec<String>,
}

fn write_step0_csvs(
    out: &mut OutputDir,
    rel: &RelativeSystem<'_>,
    diag: &BatchDiagnostics,
) -> anyhow::Result<()> {
    let sheaf = rel.sheaf();
    out.write("harmonic_load.csv", |w| {
        writeln!(w, "step,edge_id,harmonic_load,grad_fro")?;
        for (k, e) in sheaf.edges().iter().enumerate() {
            writeln!(w, "0,{},{:e},{:e}", e.id, diag.harmonic_load[k], diag.grad_fro[k])?;
        }
        Ok(())
    })?;
    out.write("diffusive_activation.csv", |w| {
        writeln!(w, "step,vertex_id,diffusive_activation")?;
        for (v, a) in rel.free_vertices().zip(&diag.diffusive_activation) {
            writeln!(w, "0,{v},{a:e}")?;
        }
        Ok(())
    })
}

pub fn cmd_diagnose(opts: &RunOptions) -> anyhow::Result<RunManifest> {
    let started = Utc::now();
    let ctx = prepare(opts)?;
    let tol = ctx.cfg.protocol.rank_tol;
    let sheaf = ctx.cfg.build_network(ctx.seed)?;
    let (spec, states) = clamped_states(&ctx.cfg, &sheaf, ctx.seed, ctx.cfg.protocol.val_size)?;
    let rel = RelativeSystem::clamp(&sheaf, &spec)?;
    let sol = rel.solver(tol).solve_batch(&states)?;
    let diag = batch_diagnostics(&rel, &sol);
    let spectrum = spectral_report(&rel, tol);

    let free: Vec<String> = rel.free_vertices().map(|v| v.to_string()).collect();
    let max_act = diag.diffusive_activation.iter().copied().fold(0.0, f64::max);
    let report = DiagnoseReport {
        c0_dim: sheaf.c0_dim(),
        c1_dim: sheaf.c1_dim(),
        coboundary_rank: sheaf.coboundary_rank(tol),
        h0_dim: sheaf.h0_basis(tol).ncols(),
        h1_dim: sheaf.h1_dim(tol),
        samples: states.ncols(),
        clamped: spec.iter().map(|(id, _)| id.to_string()).collect(),
        spectrum: (&spectrum).into(),
        harmonic_load: sheaf
            .edges()
            .iter()
            .map(|e| e.id.to_string())
            .zip(diag.harmonic_load.iter().copied())
            .collect(),
        diffusive_activation: free.iter().cloned().zip(diag.diffusive_activation.iter().copied()).collect(),
        gradient_magnitude: sheaf
            .edges()
            .iter()
            .map(|e| e.id.to_string())
            .zip(diag.grad_fro.iter().copied())
            .collect(),
        starved_vertices: free
            .iter()
            .zip(&diag.diffusive_activation)
            .filter(|(_, &a)| max_act > 0.0 && a < 0.1 * max_act)
            .map(|(v, _)| v.clone())
            .collect(),
    };

    let mut out = OutputDir::create(&ctx.out)?;
    out.write_json("diagnose.json", &report)?;
    out.write("spectrum.csv", |w| spectrum.write_csv(w))?;
    write_step0_csvs(&mut out, &rel, &diag)?;
    out.finish("diagnose", &ctx.text, vec![ctx.seed], started)
}

#[derive(Serialize)]
struct DiffusionSummary {
    steps: usize,
    step_size: f64,
    converged: bool,
    final_residual_norm: f64,
    /// `‖z − z*‖` against exact inference.
    error_vs_exact: f64,
}

pub fn cmd_spectrum(opts: &RunOptions) -> anyhow::Result<RunManifest> {
    let started = Utc::now();
    let ctx = prepare(opts)?;
    let tol = ctx.cfg.protocol.rank_tol;
    let sheaf = ctx.cfg.build_network(ctx.seed)?;
    let (spec, states) = clamped_states(&ctx.cfg, &sheaf, ctx.seed, 1)?;
    let rel = RelativeSystem::clamp(&sheaf, &spec)?;
    let spectrum = spectral_report(&rel, tol);

    // Diffusion on the first sample, from zero.
    let s0 = states.column(0).into_owned();
    let mut values = ClampSpec::new();
    for (id, _) in spec.iter() {
        values.insert(id.clone(), s0.rows_range(sheaf.vertex_range(id)?).into_owned());
    }
    let rel = rel.with_clamp_values(&values)?;
    let run = run_diffusion(&rel, &DVector::zeros(rel.free_dim()), &ctx.cfg.diffusion)?;
    let exact = rel.solve_inference(tol);
    let summary = DiffusionSummary {
        steps: run.steps,
        step_size: run.step_size,
        converged: run.converged,
        final_residual_norm: run.trace.last().map_or(f64::NAN, |p| p.residual_norm),
        error_vs_exact: (&run.z - &exact.z_star).norm(),
    };

    let mut out = OutputDir::create(&ctx.out)?;
    out.write("spectrum.csv", |w| spectrum.write_csv(w))?;
    out.write_json("spectrum.json", &spectrum)?;
    out.write("trace.csv", |w| run.write_csv(w))?;
    out.write_json("diffusion.json", &summary)?;
    out.finish("spectrum", &ctx.text, vec![ctx.seed], started)
}

fn write_point(out: &mut OutputDir, dir: &Path, result: &PointResult) -> anyhow::Result<()> {
    let rec = &result.record;
    out.write(dir.join("harmonic_load.csv"), |w| rec.write_edge_csv(w))?;
    out.write(dir.join("diffusive_activation.csv"), |w| rec.write_vertex_csv(w))?;
    out.write(dir.join("val_mse.csv"), |w| rec.write_val_csv(w))?;
    out.write_json(dir.join("summary.json"), &result.summary)?;
    out.write(dir.join("trained_sheaf.json"), |w| {
        w.write_all(sheafpc::io::sheaf_to_json(&result.trained).as_bytes())?;
        w.write_all(b"\n")
    })
}

pub fn cmd_train(opts: &RunOptions) -> anyhow::Result<RunManifest> {
    let started = Utc::now();
    let ctx = prepare(opts)?;
    let sheaf = ctx.cfg.build_network(ctx.seed)?;
    let result = experiments::run_point(&sheaf, &ctx.cfg.template(), &ctx.cfg.protocol, ctx.seed)?;
    log::info!(
        "final validation MSE {:e} (converged: {})",
        result.summary.final_mse,
        result.summary.converged
    );
    let mut out = OutputDir::create(&ctx.out)?;
    write_point(&mut out, Path::new(""), &result)?;
    out.finish("train", &ctx.text, vec![ctx.seed], started)
}

fn thread_pool() -> anyhow::Result<Option<rayon::ThreadPool>> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(None);
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("{THREADS_ENV} must be a positive integer, got `{v}`"))?;
    Ok(Some(rayon::ThreadPoolBuilder::new().num_threads(n).build()?))
}

fn run_sweep(ctx: &RunContext, seeds: &[u64]) -> anyhow::Result<Vec<SweepPoint>> {
    let sweep = ctx.cfg.sweep.as_ref().context("field `sweep` is required for the sweep command")?;
    let template = ctx.cfg.template();
    if template != IoTemplate::new("x", "y") {
        bail!("sweeps run on the built-in networks, whose io vertices are `x` and `y`");
    }
    let protocol = &ctx.cfg.protocol;
    match (sweep.axis, &ctx.cfg.network) {
        (SweepAxis::Theta, NetworkConfig::Knotted { layers, stalk_dim, .. }) => {
            let base = KnottedSpec {
                layers: *layers,
                stalk_dim: *stalk_dim,
                ..Default::default()
            };
            Ok(experiments::sweep_theta(&sweep.values, seeds, &base, protocol)?)
        }
        (SweepAxis::Size, NetworkConfig::AllToAll { hidden_dim, io_dim, .. }) => {
            let base = AllToAllSpec {
                hidden_dim: *hidden_dim,
                io_dim: *io_dim,
                ..Default::default()
            };
            let sizes: Vec<usize> = sweep.values.iter().map(|&v| v as usize).collect();
            Ok(experiments::sweep_size(&sizes, seeds, &base, protocol)?)
        }
        (SweepAxis::Theta, _) => bail!("a theta sweep needs a `knotted` network"),
        (SweepAxis::Size, _) => bail!("a size sweep needs an `all_to_all` network"),
    }
}

pub fn cmd_sweep(opts: &RunOptions) -> anyhow::Result<RunManifest> {
    let started = Utc::now();
    let ctx = prepare(opts)?;
    let sweep = ctx.cfg.sweep.as_ref().context("field `sweep` is required for the sweep command")?;
    let seeds = match (opts.seed, sweep.seeds.is_empty()) {
        (Some(s), _) => vec![s],
        (None, true) => vec![ctx.cfg.seed],
        (None, false) => sweep.seeds.clone(),
    };
    let points = match thread_pool()? {
        Some(pool) => pool.install(|| run_sweep(&ctx, &seeds))?,
        None => run_sweep(&ctx, &seeds)?,
    };

    let mut out = OutputDir::create(&ctx.out)?;
    for (i, p) in points.iter().enumerate() {
        write_point(&mut out, &point_dir(i), &p.result)?;
    }
    out.write("sweep.csv", |w| write_sweep_csv(w, &points))?;
    out.finish("sweep", &ctx.text, seeds, started)
}

pub fn point_dir(i: usize) -> PathBuf {
    PathBuf::from("points").join(format!("{i:03}"))
}

fn write_sweep_csv<W: Write>(w: W, points: &[SweepPoint]) -> std::io::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["point", "converged", "first_step", "final_mse", "kappa"])?;
    for p in points {
        let s: &PointSummary = &p.result.summary;
        wtr.write_record([
            p.label.clone(),
            s.converged.to_string(),
            s.first_step_below_threshold.map(|t| t.to_string()).unwrap_or_default(),
            format!("{:e}", s.final_mse),
            format!("{:e}", s.kappa_at_init),
        ])?;
    }
    wtr.flush()
}
