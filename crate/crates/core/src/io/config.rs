use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::DEFAULT_DELTAS;
use crate::frontend::FrontendConfig;
use crate::net::{ArchSpec, Family};
use crate::runtime::DecisionRule;
use crate::train::TrainConfig;

use super::TrainingMeta;

/// Architecture section; the class count comes from the dataset and the
/// input shape from the front-end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub family: Family,
    pub stage_widths: Vec<usize>,
    pub stage_blocks: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub growth: Option<usize>,
    /// Block after which each exit sits; spread evenly by compute when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exit_placements: Option<Vec<usize>>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            family: Family::QuickNet,
            stage_widths: vec![32, 64, 128],
            stage_blocks: vec![2, 2, 2],
            growth: None,
            exit_placements: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub deltas: Vec<f64>,
    /// Record wall-clock times in sweep outputs.
    pub timing: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            deltas: DEFAULT_DELTAS.to_vec(),
            timing: true,
        }
    }
}

/// Everything a run needs, as one TOML document with `[arch]`, `[frontend]`,
/// `[train]`, `[rule]` and `[sweep]` tables. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub arch: ArchConfig,
    pub frontend: FrontendConfig,
    pub train: TrainConfig,
    pub rule: DecisionRule,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            arch: ArchConfig::default(),
            frontend: FrontendConfig::default(),
            train: TrainConfig::default(),
            rule: DecisionRule::Entropy { delta: 0.5 },
            sweep: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.frontend.validate()?;
        cfg.rule.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Write the resolved configuration atomically.
    pub fn write(&self, path: &Path) -> Result<()> {
        super::write_atomic(path, self.to_toml()?.as_bytes())
    }

    /// Architecture for `n_classes` over one second of front-end output.
    pub fn arch_spec(&self, n_classes: usize) -> Result<ArchSpec> {
        let frames = self.frontend.frame_count(self.frontend.sample_rate as usize);
        let a = &self.arch;
        let mut spec = ArchSpec::with_input(
            a.family,
            a.stage_widths.clone(),
            a.stage_blocks.clone(),
            n_classes,
            frames,
            self.frontend.n_mels,
        )?;
        if a.growth.is_some() {
            spec.growth = a.growth;
            spec.exit_placements = spec.default_placements()?;
        }
        if let Some(p) = &a.exit_placements {
            spec.exit_placements = p.clone();
        }
        spec.validate()?;
        Ok(spec)
    }
}

impl TrainingMeta {
    /// Metadata for a model trained under `cfg`.
    pub fn for_run(cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            seed: Some(cfg.train.seed),
            epochs: cfg.train.epochs,
            config: Some(serde_json::to_value(cfg)?),
        })
    }

    /// Front-end settings the model was trained with, if recorded.
    pub fn frontend(&self) -> Option<FrontendConfig> {
        let v = self.config.as_ref()?.get("frontend")?;
        serde_json::from_value(v.clone()).ok()
    }
}
