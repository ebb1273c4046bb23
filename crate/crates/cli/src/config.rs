//! Run configuration: profile defaults, overlaid by a TOML file, overlaid by flags.

use std::path::{Path, PathBuf};

use protoda::base_model::{ArchConfig, BaseTrainConfig};
use protoda::datasets::SyntheticSpec;
use protoda::explain::ExplainConfig;
use protoda::trainer::{Profile, TrainConfig};
use protoda::Error;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Image folders with one sub-directory per category. When both are unset the
    /// synthetic benchmark is generated instead.
    pub source_dir: Option<PathBuf>,
    pub target_dir: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseSection {
    pub arch: ArchConfig,
    pub train: BaseTrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InspectConfig {
    pub cumulative: bool,
    /// Category names or indices; empty means every category.
    pub categories: Vec<String>,
    /// Also retrain with gamma = 0 and compare.
    pub ablation: bool,
}

impl Default for InspectConfig {
    fn default() -> Self {
        Self {
            cumulative: true,
            categories: Vec::new(),
            ablation: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: Option<u64>,
    pub precision: Precision,
    pub data: DataConfig,
    pub base: BaseSection,
    pub interp: TrainConfig,
    pub explain: ExplainConfig,
    pub inspect: InspectConfig,
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let arch = match profile {
            Profile::Synthetic => ArchConfig::synthetic(),
            Profile::OfficeHome | Profile::DomainNet126 => ArchConfig::resnet34(),
        };
        Self {
            profile,
            seed: None,
            precision: Precision::default(),
            data: DataConfig {
                source_dir: None,
                target_dir: None,
                synthetic: SyntheticSpec::default(),
            },
            base: BaseSection {
                arch,
                train: BaseTrainConfig::default(),
            },
            interp: TrainConfig::for_profile(profile),
            explain: ExplainConfig::default(),
            inspect: InspectConfig::default(),
        }
    }

    pub fn to_toml(&self) -> Result<String, Error> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.interp.validate()?;
        if self.data.source_dir.is_some() != self.data.target_dir.is_some() {
            return Err(Error::InvalidConfig("data.source_dir and data.target_dir must be set together".into()));
        }
        if self.profile != Profile::Synthetic && self.data.source_dir.is_none() {
            return Err(Error::InvalidConfig(format!(
                "profile {} needs data.source_dir and data.target_dir",
                self.profile
            )));
        }
        if let Some(seed) = self.seed {
            if seed > i64::MAX as u64 {
                return Err(Error::InvalidConfig(format!("seed {seed} exceeds {}", i64::MAX)));
            }
            if self.base.train.seed != seed || self.interp.seed != seed {
                return Err(Error::InvalidConfig("base.train.seed and interp.seed must equal seed".into()));
            }
        }
        if self.explain.m == 0 || !(0.0..=100.0).contains(&self.explain.percentile) {
            return Err(Error::InvalidConfig("explain.m must be positive and explain.percentile in [0, 100]".into()));
        }
        Ok(())
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub profile: Option<Profile>,
    pub seed: Option<u64>,
    pub non_cumulative: bool,
    pub categories: Vec<String>,
    pub ablation: bool,
}

fn merge(dst: &mut toml::Table, src: toml::Table) {
    for (k, v) in src {
        match (dst.get_mut(&k), v) {
            (Some(toml::Value::Table(d)), toml::Value::Table(s)) => merge(d, s),
            (_, v) => {
                dst.insert(k, v);
            }
        }
    }
}

/// Profile defaults, then `file`, then `flags`. Unknown keys are rejected.
pub fn resolve(file: Option<&Path>, flags: &Overrides) -> Result<RunConfig, Error> {
    let user: toml::Table = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())))?;
            text.parse().map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    let profile = match (flags.profile, user.get("profile")) {
        (Some(p), _) => p,
        (None, Some(toml::Value::String(s))) => s.parse()?,
        (None, Some(v)) => return Err(Error::InvalidConfig(format!("profile must be a string, got {v}"))),
        (None, None) => Profile::Synthetic,
    };
    let defaults = RunConfig::for_profile(profile);
    let mut table: toml::Table = toml::Table::try_from(&defaults).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    merge(&mut table, user);
    table.insert("profile".into(), toml::Value::String(profile.as_str().into()));
    let mut cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;

    if let Some(seed) = flags.seed.or(cfg.seed) {
        cfg.seed = Some(seed);
        cfg.base.train.seed = seed;
        cfg.interp.seed = seed;
    }
    if flags.non_cumulative {
        cfg.inspect.cumulative = false;
    }
    if !flags.categories.is_empty() {
        cfg.inspect.categories = flags.categories.clone();
    }
    cfg.inspect.ablation |= flags.ablation;
    cfg.validate()?;
    Ok(cfg)
}
