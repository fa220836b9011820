//! TOML experiment configuration.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stochflow::fluid::{FluidInit, FluidModelConfig};
use stochflow::hormander::{DriftSpec, Target};
use stochflow::lyapunov::LyapunovConfig;
use stochflow::scalar::ScalarConfig;
use stochflow::spectral::Wavevector;
use stochflow::yaglom::YaglomSettings;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: OutputConfig,
    pub experiment: Experiment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    /// Work units between checkpoints: trajectories for `lyapunov`, records for `simulate`.
    /// Zero disables checkpoints.
    #[serde(default)]
    pub checkpoint_every: usize,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: default_dir(),
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Simulate(SimulateConfig),
    Lyapunov(LyapunovConfig),
    Scalar(ScalarExperiment),
    Yaglom(YaglomExperiment),
    Hormander(HormanderExperiment),
    Control(ControlExperiment),
}

impl Experiment {
    pub fn kind(&self) -> &'static str {
        match self {
            Experiment::Simulate(_) => "simulate",
            Experiment::Lyapunov(_) => "lyapunov",
            Experiment::Scalar(_) => "scalar",
            Experiment::Yaglom(_) => "yaglom",
            Experiment::Hormander(_) => "hormander",
            Experiment::Control(_) => "control",
        }
    }

    pub fn fluid(&self) -> Option<&FluidModelConfig> {
        match self {
            Experiment::Simulate(c) => Some(&c.fluid),
            Experiment::Lyapunov(c) => Some(&c.fluid),
            Experiment::Scalar(c) => Some(&c.run.fluid),
            Experiment::Yaglom(c) => Some(&c.run.fluid),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub fluid: FluidModelConfig,
    pub horizon: f64,
    #[serde(default = "one")]
    pub n_traj: usize,
    /// Time between diagnostic records.
    #[serde(default = "unit")]
    pub record_every: f64,
    /// Defaults to a stationary draw (Stokes) or a burn-in of 20 time units.
    #[serde(default)]
    pub init: Option<FluidInit>,
}

fn one() -> usize {
    1
}
fn unit() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepPoint {
    pub kappa: f64,
    pub cutoff: i32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalarExperiment {
    pub run: ScalarConfig,
    /// When nonempty, `run.kappa` and `run.cutoff` are replaced by each point in turn.
    #[serde(default)]
    pub sweep: Vec<SweepPoint>,
    /// Relative tolerance of the balance check.
    #[serde(default = "balance_tol")]
    pub tolerance: f64,
}

fn balance_tol() -> f64 {
    0.05
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct YaglomExperiment {
    /// Must set `snapshot_every` unless snapshots are read from a file.
    pub run: ScalarConfig,
    #[serde(default)]
    pub sweep: Vec<SweepPoint>,
    #[serde(default)]
    pub analysis: YaglomSettings,
    /// Write every snapshot to `snapshots.jsonl`.
    #[serde(default)]
    pub store_snapshots: bool,
    /// Analyse snapshots from an earlier `snapshots.jsonl` instead of simulating.
    #[serde(default)]
    pub snapshots_from: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClosureSection {
    pub drift: DriftSpec,
    pub depth: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HormanderExperiment {
    pub dim: usize,
    pub target: Target,
    /// Forced modes; defaults to the coordinate set (sphere targets) or the coordinate
    /// set plus the all-ones vector (matrix target), closed under negation.
    #[serde(default)]
    pub modes: Option<Vec<Wavevector>>,
    /// Modes dropped from the set before checking.
    #[serde(default)]
    pub remove: Vec<Wavevector>,
    #[serde(default = "samples")]
    pub samples: usize,
    /// Bracket closure against a fluid drift instead of the spanning check.
    #[serde(default)]
    pub closure: Option<ClosureSection>,
}

fn samples() -> usize {
    1000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShadowingSection {
    #[serde(default = "unit")]
    pub nu: f64,
    #[serde(default = "two")]
    pub cutoff: i32,
    pub sigma: f64,
    #[serde(default = "shadow_dt")]
    pub dt: f64,
    pub n_traj: usize,
    pub eps: Vec<f64>,
}

fn two() -> i32 {
    2
}
fn shadow_dt() -> f64 {
    1e-3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlExperiment {
    pub x0: Vec<f64>,
    pub v0: Vec<f64>,
    pub x1: Vec<f64>,
    pub v1: Vec<f64>,
    #[serde(default = "ode_tol")]
    pub tol: f64,
    #[serde(default = "unit")]
    pub nu: f64,
    #[serde(default)]
    pub eta: f64,
    /// Galerkin radius of the controlled-PDE check; zero skips it.
    #[serde(default = "two")]
    pub pde_cutoff: i32,
    /// Gains `M` for the hyperbolic Jacobian-growth demo (2D only).
    #[serde(default)]
    pub jacobian_growth: Vec<f64>,
    #[serde(default)]
    pub shadowing: Option<ShadowingSection>,
}

fn ode_tol() -> f64 {
    1e-10
}

/// Parse TOML text; errors name the offending field path.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let de = toml::Deserializer::new(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let msg = inner.message().to_string();
        match inner.span() {
            Some(span) => {
                let line = text[..span.start.min(text.len())].lines().count().max(1);
                anyhow!("invalid config at `{path}` (line {line}): {msg}")
            }
            None => anyhow!("invalid config at `{path}`: {msg}"),
        }
    })
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_config(&text).with_context(|| format!("in {}", path.display()))
}

/// SHA-256 over the canonical JSON of everything that affects results
/// (the seed and the experiment section, not the output settings).
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let canon = serde_json::to_vec(&(cfg.seed, &cfg.experiment)).expect("config serializes");
    hex::encode(Sha256::digest(canon))
}
