//! Experiment configuration: one TOML document with every knob, unknown keys
//! rejected.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checker::CheckerConfig;
use crate::datapath::RebalancePolicy;
use crate::model::CostModel;
use crate::scheduler::SchedulerConfig;
use crate::sim::SimParams;
use crate::workload::WorkloadSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NicModel {
    #[default]
    Sysname,
    BaselineInterrupt,
    BaselineBypass,
}

impl NicModel {
    pub const ALL: [NicModel; 3] = [NicModel::Sysname, NicModel::BaselineInterrupt, NicModel::BaselineBypass];

    pub fn as_str(self) -> &'static str {
        match self {
            NicModel::Sysname => "sysname",
            NicModel::BaselineInterrupt => "baseline-interrupt",
            NicModel::BaselineBypass => "baseline-bypass",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds the workload; overrides nothing else.
    pub seed: u64,
    pub model: NicModel,
    pub cost: CostModel,
    pub workload: WorkloadSpec,
    pub scheduler: SchedulerConfig,
    pub rebalance: RebalancePolicy,
    pub sim: SimParams,
    pub checker: CheckerConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: String| ConfigError::Invalid(e);
        self.cost.validate().map_err(|e| invalid(e.to_string()))?;
        self.workload.validate().map_err(|e| invalid(e.to_string()))?;
        if self.scheduler.instances_per_service == 0 {
            return Err(invalid("scheduler.instances_per_service must be positive".into()));
        }
        if self.sim.ring_depth == 0 {
            return Err(invalid("sim.ring_depth must be positive".into()));
        }
        let needed = self.cost.aux_lines(self.cost.dma_threshold.saturating_sub(1));
        if self.sim.aux_per_endpoint < needed {
            return Err(invalid(format!(
                "sim.aux_per_endpoint {} cannot hold a payload just below the DMA threshold ({needed} needed)",
                self.sim.aux_per_endpoint
            )));
        }
        Ok(())
    }

    /// The workload spec with the experiment seed applied.
    pub fn workload_spec(&self) -> WorkloadSpec {
        WorkloadSpec {
            seed: self.seed,
            ..self.workload.clone()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let d = ExperimentConfig::default();
        let text = d.to_toml();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn unknown_keys_rejected_with_location() {
        let err = ExperimentConfig::from_toml("[cost]\nline_size = 128\nbogus = 1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bogus"), "{msg}");
        assert!(msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn invalid_cost_model_rejected() {
        let err = ExperimentConfig::from_toml("[cost]\ncoherent_line_roundtrip = 5000\n").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)));
    }

    #[test]
    fn model_names() {
        for m in NicModel::ALL {
            assert_eq!(NicModel::parse(m.as_str()), Some(m));
        }
        let cfg = ExperimentConfig::from_toml("model = \"baseline-bypass\"\n").unwrap();
        assert_eq!(cfg.model, NicModel::BaselineBypass);
    }
}
