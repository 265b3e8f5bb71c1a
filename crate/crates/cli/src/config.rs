//! JSON run configuration with `surface`, `graph`, `flow`, `experiment` and
//! `output` blocks. Unknown keys are rejected and errors carry the JSON path.

use std::fs;
use std::path::{Path, PathBuf};

use hyperflock::flow::{splay_state, FieldKind, FlowParams};
use hyperflock::manifold::{builtin_surface, BuiltinSurface, SurfaceKind};
use hyperflock::{Configuration, Graph};
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub surface: SurfaceBlock,
    pub graph: Option<GraphBlock>,
    #[serde(default)]
    pub flow: FlowParams,
    #[serde(default)]
    pub experiment: ExperimentBlock,
    #[serde(default)]
    pub output: OutputBlock,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SurfaceBlock {
    Sphere {
        dim: usize,
    },
    Ellipsoid {
        /// Rows of the SPD matrix `A`.
        matrix: Vec<Vec<f64>>,
        #[serde(default = "default_normalization")]
        normalization: f64,
    },
    Quartic {
        dim: usize,
    },
    Torus {
        major_radius: f64,
        minor_radius: f64,
    },
}

fn default_normalization() -> f64 {
    2.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GraphBlock {
    Ring { n: usize },
    Complete { n: usize },
    Path { n: usize },
    Star { n: usize },
    /// Explicit `[i, j, weight]` triples; `n` defaults to one past the largest index.
    Edges {
        n: Option<usize>,
        edges: Vec<(usize, usize, f64)>,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitBlock {
    /// Independent samples from the surface sampler, seeded.
    Random,
    /// Evenly spaced agents on the unit circle.
    Splay {
        #[serde(default = "default_twist")]
        twist: usize,
    },
    /// A state file `{"points": [[...], ...]}`.
    File { path: PathBuf },
}

fn default_twist() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Which {
    Assumption1,
    Convexity,
    Alpha,
}

impl Which {
    pub fn name(self) -> &'static str {
        match self {
            Which::Assumption1 => "assumption1",
            Which::Convexity => "convexity",
            Which::Alpha => "alpha",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentBlock {
    pub seed: u64,
    pub field: FieldKind,
    pub init: InitBlock,
    /// Monte-Carlo trials for `basin`.
    pub trials: usize,
    /// Random pairs for the `assumption1` and `convexity` checks.
    pub n_pairs: usize,
    /// Surface samples for the `alpha` check.
    pub n_samples: usize,
    pub which: Option<Which>,
    /// Equilibrium state file for `classify`.
    pub state: Option<PathBuf>,
}

impl Default for ExperimentBlock {
    fn default() -> Self {
        Self {
            seed: 0,
            field: FieldKind::Gradient,
            init: InitBlock::Random,
            trials: 100,
            n_pairs: 1_000,
            n_samples: 10_000,
            which: None,
            state: None,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputBlock {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateFile {
    points: Vec<Vec<f64>>,
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let at = e.path().to_string();
        CliError::Config(format!("{}: at `{at}`: {}", path.display(), e.inner()))
    })
}

/// A parsed configuration together with the directory relative paths resolve against.
pub struct Loaded {
    pub config: RunConfig,
    pub base: PathBuf,
}

impl Loaded {
    pub fn from_path(path: &Path) -> Result<Self, CliError> {
        let config: RunConfig = parse_json(path)?;
        config.flow.validate().map_err(CliError::config)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { config, base })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn surface(&self) -> Result<BuiltinSurface, CliError> {
        let (kind, dim) = match &self.config.surface {
            SurfaceBlock::Sphere { dim } => (SurfaceKind::Sphere, *dim),
            SurfaceBlock::Quartic { dim } => (SurfaceKind::Quartic, *dim),
            SurfaceBlock::Torus {
                major_radius,
                minor_radius,
            } => (
                SurfaceKind::Torus {
                    major_radius: *major_radius,
                    minor_radius: *minor_radius,
                },
                3,
            ),
            SurfaceBlock::Ellipsoid {
                matrix,
                normalization,
            } => {
                let d = matrix.len();
                if let Some(row) = matrix.iter().position(|r| r.len() != d) {
                    return Err(CliError::Config(format!(
                        "surface.matrix[{row}] has {} entries, expected {d}",
                        matrix[row].len()
                    )));
                }
                (
                    SurfaceKind::Ellipsoid {
                        matrix: matrix.iter().flatten().copied().collect(),
                        normalization: *normalization,
                    },
                    d,
                )
            }
        };
        builtin_surface(&kind, dim).map_err(|e| CliError::Config(format!("surface: {e}")))
    }

    pub fn graph(&self) -> Result<Graph, CliError> {
        let block = self
            .config
            .graph
            .as_ref()
            .ok_or_else(|| CliError::Config("missing `graph` block".into()))?;
        let graph = match block {
            GraphBlock::Ring { n } => Graph::ring(*n),
            GraphBlock::Complete { n } => Graph::complete(*n),
            GraphBlock::Path { n } => Graph::path(*n),
            GraphBlock::Star { n } => Graph::star(*n),
            GraphBlock::Edges { n: Some(n), edges } => Graph::new(*n, edges),
            GraphBlock::Edges { n: None, edges } => Graph::from_edge_list(edges),
        }
        .map_err(|e| CliError::Config(format!("graph: {e}")))?;
        if !graph.is_connected() {
            return Err(CliError::Config("graph: graph is not connected".into()));
        }
        Ok(graph)
    }

    /// Reads a state file; `path` is used as given.
    pub fn read_state(&self, path: &Path, surface: &BuiltinSurface) -> Result<Configuration, CliError> {
        let state: StateFile = parse_json(path)?;
        let points = state
            .points
            .into_iter()
            .map(nalgebra::DVector::from_vec)
            .collect();
        Configuration::new(surface, points)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Initial configuration for `simulate`, or `None` for a seeded random draw.
    pub fn fixed_init(&self, surface: &BuiltinSurface) -> Result<Option<Configuration>, CliError> {
        match &self.config.experiment.init {
            InitBlock::Random => Ok(None),
            InitBlock::Splay { twist } => {
                let n = self.graph()?.n_agents();
                if matches!(surface, BuiltinSurface::Sphere { dim: 2 }) {
                    Ok(Some(splay_state(n, *twist)))
                } else {
                    Err(CliError::Config(
                        "experiment.init: splay states are defined on the unit circle only".into(),
                    ))
                }
            }
            InitBlock::File { path } => self.read_state(&self.resolve(path), surface).map(Some),
        }
    }
}
