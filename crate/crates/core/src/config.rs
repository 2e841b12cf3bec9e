//! Run configuration loaded from JSON. Every field has a default, so an empty
//! object is a valid config; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bank::EmaConfig;
use crate::coreset::CoresetConfig;
use crate::error::{GcrError, Result};
use crate::harness::{BaseMetric, ProtocolConfig};
use crate::routing::RoutingConfig;
use crate::scoring::ScoringConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmaSection {
    pub enabled: bool,
    pub decay: f64,
    pub var_floor: f64,
}

impl Default for EmaSection {
    fn default() -> Self {
        let e = EmaConfig::default();
        EmaSection {
            enabled: false,
            decay: e.decay,
            var_floor: e.var_floor,
        }
    }
}

impl EmaSection {
    pub fn config(&self) -> Option<EmaConfig> {
        self.enabled.then_some(EmaConfig {
            decay: self.decay,
            var_floor: self.var_floor,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolSection {
    pub category_order: Vec<String>,
    pub base_metric: BaseMetric,
    pub ema: EmaSection,
    pub k_sweep: Option<Vec<usize>>,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        ProtocolSection {
            category_order: Vec::new(),
            base_metric: BaseMetric::Auroc,
            ema: EmaSection::default(),
            k_sweep: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub coreset: CoresetConfig,
    pub scoring: ScoringConfig,
    pub routing: RoutingConfig,
    pub protocol: ProtocolSection,
    pub l2_normalize: bool,
    /// Worker threads; `None` lets rayon decide.
    pub threads: Option<usize>,
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| GcrError::json("config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| GcrError::io(path, e))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| GcrError::json(path.display().to_string(), e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.threads == Some(0) {
            return Err(GcrError::InvalidConfig("threads must be at least 1".into()));
        }
        self.protocol_config().validate()
    }

    pub fn protocol_config(&self) -> ProtocolConfig {
        ProtocolConfig {
            category_order: self.protocol.category_order.clone(),
            base_metric: self.protocol.base_metric,
            routing: self.routing,
            scoring: self.scoring,
            coreset: self.coreset,
            ema: self.protocol.ema.config(),
            k_sweep: self.protocol.k_sweep.clone(),
            l2_normalize: self.l2_normalize,
        }
    }
}
