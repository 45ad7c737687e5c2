//! Run configuration, loadable from a TOML file with one table per
//! subsystem. Every key is optional and defaults as documented on the
//! field types.

use crate::coordinator::CoordinatorConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Priors};
use crate::trust::SolverConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub priors: Priors,
    pub model: ModelConfig,
    pub solver: SolverConfig,
    pub coordinator: CoordinatorConfig,
    pub runtime: RuntimeConfig,
}

/// Settings for the distributed scheduler and run accounting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeConfig {
    /// Children per node in the scheduling tree.
    pub fanout: usize,
    /// Share of each stage's tasks handed out statically before any
    /// process asks for work.
    pub initial_fraction: f64,
    /// A refill grants this fraction of the parent's queue, scaled by the
    /// requesting subtree's share of the parent's subtree.
    pub refill_fraction: f64,
    pub flops_per_visit: f64,
    /// Multiplier applied to the per-visit count to cover work outside the
    /// pixel loop.
    pub flops_overhead: f64,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig {
            fanout: 4,
            initial_fraction: 0.5,
            refill_fraction: 0.5,
            flops_per_visit: 32317.0,
            flops_overhead: 1.375,
        }
    }
}

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.priors.validate()?;
        self.model.validate()?;
        self.solver.validate()?;
        self.coordinator.validate()?;
        let r = &self.runtime;
        if r.fanout == 0 {
            return Err(Error::Config("runtime.fanout must be at least 1".into()));
        }
        for (name, v) in [("initial_fraction", r.initial_fraction), ("refill_fraction", r.refill_fraction)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("runtime.{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}
