//! Single TOML file holding every tunable of a run.
//!
//! Every section is optional and defaults to the nominal values, so an empty
//! file is a valid configuration. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ddpg::AgentConfig;
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::montecarlo::CampaignSpec;
use crate::pd::PdSearchSpec;

/// Named agent presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// 2×64 actor, 2×128 critic, 30k steps.
    Desk,
    /// 20×256 actor, 20×512 critic, 100k steps.
    Paper,
}

impl Profile {
    pub fn agent(self) -> AgentConfig {
        match self {
            Profile::Desk => AgentConfig::desk(),
            Profile::Paper => AgentConfig::paper(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every random stream of a run derives from it.
    pub seed: u64,
    /// Output directory. Falls back to `$FIPWC_OUT_DIR`, then `./out`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub env: EnvConfig,
    pub agent: AgentConfig,
    pub pd: PdSearchSpec,
    pub campaign: CampaignSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: None,
            env: EnvConfig::default(),
            agent: AgentConfig::desk(),
            pd: PdSearchSpec::default(),
            campaign: CampaignSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(config)
    }

    /// Reads and validates a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config = Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Same as [`RunConfig::load`], but the `[agent]` section overlays
    /// `profile` instead of the desk defaults.
    pub fn load_with_profile(path: Option<&Path>, profile: Profile) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                // A typed parse first, so errors carry line numbers.
                Self::from_toml_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        let base =
            toml::Table::try_from(profile.agent()).map_err(|e| Error::Config(e.to_string()))?;
        let merged = match table.remove("agent") {
            Some(toml::Value::Table(overrides)) => {
                let mut merged = base;
                merged.extend(overrides);
                merged
            }
            Some(_) => return Err(Error::Config("`agent` must be a table".into())),
            None => base,
        };
        table.insert("agent".into(), toml::Value::Table(merged));
        let config: Self = table.try_into().map_err(|e: toml::de::Error| {
            let origin = path.map_or_else(|| "<defaults>".to_string(), |p| p.display().to_string());
            Error::Config(format!("{origin}: {e}"))
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.agent.validate()?;
        self.pd.validate()?;
        self.campaign.validate()
    }

    /// Fully resolved configuration, suitable for reproducing a run.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn write_echo(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?).map_err(|e| Error::io(path, e))
    }
}
