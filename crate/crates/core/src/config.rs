//! Training run configuration: one JSON document naming the graphs, the
//! environment, reward weights, policy shape and trainer settings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::{build_device_env, build_grid_env, DeviceSpec, GridSpec, PlacementEnv, RewardSpec};
use crate::error::{Error, Result};
use crate::graph::{load_graph, Graph, GraphKind};
use crate::trainer::{PolicyConfig, TrainerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub width: usize,
    pub height: usize,
    pub cell_capacity: usize,
    pub density_weight: f64,
    #[serde(default)]
    pub step_rewards: bool,
}

impl GridSection {
    pub fn spec(&self) -> GridSpec {
        GridSpec {
            width: self.width,
            height: self.height,
            cell_capacity: self.cell_capacity,
            density_weight: self.density_weight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum EnvConfig {
    Device(DeviceSpec),
    Grid(GridSection),
}

impl EnvConfig {
    pub fn kind(&self) -> GraphKind {
        match self {
            EnvConfig::Device(_) => GraphKind::Device,
            EnvConfig::Grid(_) => GraphKind::Grid,
        }
    }

    pub fn build(&self, graph: Graph, reward: &RewardSpec) -> Result<PlacementEnv> {
        if graph.kind() != self.kind() {
            return Err(Error::Config(format!(
                "environment is {:?} but graph is {:?}",
                self.kind(),
                graph.kind()
            )));
        }
        Ok(match self {
            EnvConfig::Device(spec) => PlacementEnv::Device(build_device_env(graph, spec.clone(), reward.clone())?),
            EnvConfig::Grid(g) => PlacementEnv::Grid(build_grid_env(graph, g.spec(), reward.clone(), g.step_rewards)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Graph files, relative to the config file's directory.
    pub graphs: Vec<PathBuf>,
    pub env: EnvConfig,
    #[serde(default)]
    pub reward: RewardSpec,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub trainer: TrainerConfig,
    /// Relative to the config file's directory.
    pub output_dir: PathBuf,
}

/// A config with its graphs loaded and environments built.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub config: RunConfig,
    pub graph_paths: Vec<PathBuf>,
    pub envs: Vec<PlacementEnv>,
    pub output_dir: PathBuf,
}

pub fn parse_run_config(text: &str, context: &str) -> Result<RunConfig> {
    let cfg: RunConfig =
        serde_json::from_str(text).map_err(|e| Error::Parse { context: context.to_string(), message: e.to_string() })?;
    if cfg.graphs.is_empty() {
        return Err(Error::Config("graphs must list at least one file".into()));
    }
    cfg.reward.validate()?;
    cfg.trainer.validate()?;
    Ok(cfg)
}

pub fn load_run(path: impl AsRef<Path>) -> Result<LoadedRun> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let config = parse_run_config(&text, &path.display().to_string())?;
    let base = path.parent().unwrap_or(Path::new(""));
    let graph_paths: Vec<PathBuf> = config.graphs.iter().map(|g| base.join(g)).collect();
    let envs = graph_paths
        .iter()
        .map(|p| {
            let graph = load_graph(p)?;
            config.env.build(graph, &config.reward).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("{}: {msg}", p.display())),
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let output_dir = base.join(&config.output_dir);
    Ok(LoadedRun { config, graph_paths, envs, output_dir })
}
