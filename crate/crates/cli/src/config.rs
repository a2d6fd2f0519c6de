use std::fs;
use std::path::{Path, PathBuf};

use msorte::scenario::{load_scenarios, Allocation, ClusterPartition, ScenarioSpace};
use msorte::solver::SolverConfig;
use msorte::utility::UtilitySpec;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::Failure;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Relative paths resolve against the config file's directory.
    pub scenario_path: PathBuf,
    pub utility: UtilitySpec,
    pub budget: f64,
    /// 0-based agent indices; one group when absent.
    #[serde(default)]
    pub clusters: Option<Vec<Vec<usize>>>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub emit_plots: bool,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// A validated run: configuration plus the data it points at.
pub struct Run {
    pub config: RunConfig,
    pub space: ScenarioSpace,
    pub x: Allocation,
    pub partition: ClusterPartition,
    pub output_dir: PathBuf,
    /// SHA-256 over the config bytes followed by the scenario file bytes.
    pub hash: String,
}

pub fn load(path: &Path) -> Result<Run, Failure> {
    let config_bytes = fs::read(path)
        .map_err(|e| Failure::Input(format!("cannot read {}: {e}", path.display())))?;
    let config: RunConfig = serde_json::from_slice(&config_bytes)
        .map_err(|e| Failure::Input(format!("invalid config {}: {e}", path.display())))?;
    if !config.budget.is_finite() {
        return Err(Failure::Input("budget must be finite".into()));
    }
    config
        .solver
        .validate()
        .map_err(|e| Failure::Input(e.to_string()))?;
    config
        .utility
        .validate()
        .map_err(|e| Failure::Input(e.to_string()))?;

    let base = path.parent().unwrap_or(Path::new("."));
    let scenario_path = base.join(&config.scenario_path);
    let scenario_bytes = fs::read(&scenario_path)
        .map_err(|e| Failure::Input(format!("cannot read {}: {e}", scenario_path.display())))?;
    let (space, x) = load_scenarios(&scenario_path).map_err(|e| Failure::Input(e.to_string()))?;
    let n = x.n_agents();
    if config.utility.n() != n {
        return Err(Failure::Input(format!(
            "utility describes {} agents, scenario file has {n}",
            config.utility.n()
        )));
    }
    let partition = match &config.clusters {
        None => ClusterPartition::single(n),
        Some(groups) => {
            ClusterPartition::new(groups.clone(), n).map_err(|e| Failure::Input(e.to_string()))?
        }
    };

    let mut hasher = Sha256::new();
    hasher.update(&config_bytes);
    hasher.update(&scenario_bytes);
    let hash = hex::encode(hasher.finalize());
    let output_dir = base.join(&config.output_dir);
    Ok(Run {
        config,
        space,
        x,
        partition,
        output_dir,
        hash,
    })
}
