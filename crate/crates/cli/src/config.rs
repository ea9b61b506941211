//! Run configuration: a single JSON document per run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use sheafpc::dynamics::DiffusionConfig;
use sheafpc::experiments::{self, AllToAllSpec, KnottedSpec, Protocol};
use sheafpc::io::SheafDesc;
use sheafpc::learning::IoTemplate;
use sheafpc::{ClampSpec, PCSheaf};

fn default_layers() -> usize {
    10
}
fn default_stalk_dim() -> usize {
    2
}
fn default_hidden_dim() -> usize {
    4
}
fn default_io_dim() -> usize {
    2
}
fn default_input() -> String {
    "x".into()
}
fn default_output() -> String {
    "y".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NetworkConfig {
    Knotted {
        #[serde(default = "default_layers")]
        layers: usize,
        #[serde(default = "default_stalk_dim")]
        stalk_dim: usize,
        #[serde(default)]
        theta: f64,
    },
    AllToAll {
        n_hidden: usize,
        #[serde(default = "default_hidden_dim")]
        hidden_dim: usize,
        #[serde(default = "default_io_dim")]
        io_dim: usize,
    },
    /// Path graph with explicit row-major weights.
    Chain {
        dims: Vec<usize>,
        weights: Vec<Vec<Vec<f64>>>,
    },
    /// Sheaf description in a separate JSON file (relative to the config).
    File { path: PathBuf },
    Inline { sheaf: SheafDesc },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoConfig {
    #[serde(default = "default_input")]
    pub input: String,
    #[serde(default = "default_output")]
    pub output: String,
}

impl Default for IoConfig {
    fn default() -> Self {
        Self {
            input: default_input(),
            output: default_output(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Theta,
    Size,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    /// Seeds per point; defaults to the run seed.
    #[serde(default)]
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkConfig,
    #[serde(default)]
    pub io: IoConfig,
    /// Explicit clamp values for `diagnose` / `spectrum`. Without it the
    /// io template is clamped and values come from a seeded batch.
    #[serde(default)]
    pub clamp: Option<BTreeMap<String, Vec<f64>>>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub protocol: Protocol,
    #[serde(default)]
    pub diffusion: DiffusionConfig,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    /// Output directory; `--out` takes precedence.
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| {
            anyhow::anyhow!("invalid config at line {}, column {}: {e}", e.line(), e.column())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<(Self, String)> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg =
            Self::from_json(&text).with_context(|| format!("in config {}", path.display()))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, text))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.protocol.validate().context("field `protocol`")?;
        self.diffusion.validate().context("field `diffusion`")?;
        if let Some(s) = &self.sweep {
            if s.values.iter().any(|v| !v.is_finite()) {
                bail!("field `sweep.values`: values must be finite");
            }
            if s.axis == SweepAxis::Size && s.values.iter().any(|v| *v < 1.0 || v.fract() != 0.0) {
                bail!("field `sweep.values`: sizes must be positive integers");
            }
        }
        if let NetworkConfig::Chain { dims, weights } = &self.network {
            if weights.len() + 1 != dims.len() {
                bail!(
                    "field `network.weights`: {} dims need {} weights, got {}",
                    dims.len(),
                    dims.len().saturating_sub(1),
                    weights.len()
                );
            }
        }
        Ok(())
    }

    pub fn template(&self) -> IoTemplate {
        IoTemplate::new(self.io.input.as_str(), self.io.output.as_str())
    }

    pub fn build_network(&self, seed: u64) -> anyhow::Result<PCSheaf> {
        let sheaf = match &self.network {
            NetworkConfig::Knotted {
                layers,
                stalk_dim,
                theta,
            } => experiments::make_knotted(&KnottedSpec {
                layers: *layers,
                stalk_dim: *stalk_dim,
                theta: *theta,
                seed,
            })?,
            NetworkConfig::AllToAll {
                n_hidden,
                hidden_dim,
                io_dim,
            } => experiments::make_all_to_all(&AllToAllSpec {
                n_hidden: *n_hidden,
                hidden_dim: *hidden_dim,
                io_dim: *io_dim,
                seed,
            })?,
            NetworkConfig::Chain { dims, weights } => {
                let ws = weights
                    .iter()
                    .enumerate()
                    .map(|(k, rows)| matrix_from_rows(rows).with_context(|| format!("network.weights[{k}]")))
                    .collect::<anyhow::Result<Vec<_>>>()?;
                experiments::make_chain(dims, ws)?
            }
            NetworkConfig::File { path } => {
                let p = if path.is_absolute() {
                    path.clone()
                } else {
                    self.base_dir.join(path)
                };
                sheafpc::io::load_sheaf(&p).with_context(|| format!("loading sheaf {}", p.display()))?
            }
            NetworkConfig::Inline { sheaf } => sheaf.build()?,
        };
        Ok(sheaf)
    }

    pub fn clamp_spec(&self, sheaf: &PCSheaf) -> anyhow::Result<Option<ClampSpec>> {
        let Some(map) = &self.clamp else {
            return Ok(None);
        };
        let mut spec = ClampSpec::new();
        for (id, vals) in map {
            let dim = sheaf
                .vertex(&id.as_str().into())
                .with_context(|| format!("field `clamp.{id}`"))?
                .dim;
            if vals.len() != dim {
                bail!("field `clamp.{id}`: expected {dim} values, got {}", vals.len());
            }
            spec.insert(id.as_str(), DVector::from_column_slice(vals));
        }
        Ok(Some(spec))
    }
}

fn matrix_from_rows(rows: &[Vec<f64>]) -> anyhow::Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        bail!("ragged weight matrix");
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}
