//! Experiment configuration, loaded from and saved to JSON.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::AttackConfig;
use crate::baselines::BaselineConfig;
use crate::clustering::GaeConfig;
use crate::data::{PartitionSpec, DEFAULT_SEPARATION};
use crate::defense::DefenseConfig;
use crate::error::{config_err, Result};
use crate::sim::SimConfig;
use crate::task::TrainConfig;

/// Synthetic task shape and sample counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub classes: usize,
    pub feature_dim: usize,
    /// Hidden layer widths of the task model.
    pub hidden: Vec<usize>,
    pub separation: f64,
    /// Leading features with no class signal (where the trigger is stamped).
    pub nuisance_dims: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub probe_per_class: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            feature_dim: 20,
            hidden: vec![16, 16],
            separation: DEFAULT_SEPARATION,
            nuisance_dims: 4,
            train_per_class: 500,
            test_per_class: 250,
            probe_per_class: 100,
        }
    }
}

impl DataConfig {
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.feature_dim];
        dims.extend(&self.hidden);
        dims.push(self.classes);
        dims
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(config_err("need at least two classes"));
        }
        if self.feature_dim == 0 || self.hidden.contains(&0) {
            return Err(config_err("layer widths must be positive"));
        }
        if self.nuisance_dims >= self.feature_dim {
            return Err(config_err("nuisance_dims must leave at least one informative feature"));
        }
        if !(self.separation > 0.0) {
            return Err(config_err("separation must be positive"));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 || self.probe_per_class == 0 {
            return Err(config_err("sample counts must be positive"));
        }
        Ok(())
    }
}

/// Where results go. Relative paths resolve against the working directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct OutputConfig {
    pub jsonl: Option<PathBuf>,
    pub csv: Option<PathBuf>,
    pub dump_graph: Option<PathBuf>,
    pub dump_clustering: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ExperimentConfig {
    pub sim: SimConfig,
    pub attack: AttackConfig,
    pub defense: DefenseConfig,
    pub gae: GaeConfig,
    pub baselines: BaselineConfig,
    pub partition: PartitionSpec,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.data.validate()?;
        self.attack.validate(self.data.feature_dim, self.data.classes)?;
        self.defense.validate()?;
        self.gae.validate()?;
        self.partition.validate()?;
        self.train.validate()?;
        if self.sim.defense == crate::sim::DefenseKind::Krum || self.sim.defense == crate::sim::DefenseKind::MultiKrum {
            self.baselines.validate(self.sim.clients_per_round)?;
        }
        if self.sim.defense == crate::sim::DefenseKind::Guardfl && self.sim.clients_per_round < 2 {
            return Err(config_err("the graph defense needs at least two clients per round"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::DefenseKind;

    #[test]
    fn round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.sim.defense = DefenseKind::MultiKrum;
        cfg.partition = PartitionSpec::Dirichlet { alpha: 0.05 };
        cfg.attack.replacement_scale = Some(4.0);
        cfg.output.csv = Some("out/summary.csv".into());
        let back = ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_json_uses_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"sim": {"total_clients": 40, "clients_per_round": 8}}"#).unwrap();
        assert_eq!(cfg.sim.total_clients, 40);
        assert_eq!(cfg.sim.max_rounds, 600);
        assert_eq!(cfg.defense.kappa3, 0.3);
    }

    #[test]
    fn invalid_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"sim": {"pmr": 0.9}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"attack": {"target_label": 9}}"#).is_err());
        assert!(ExperimentConfig::from_json("{not json").is_err());
    }
}
