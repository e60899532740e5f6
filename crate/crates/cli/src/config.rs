//! Run configuration: one JSON document, strict keys, `--set` overrides.
//!
//! A document is resolved in three layers: the defaults of its `profile`
//! (`desk` unless stated), then the keys present in the file, then each
//! `--set path=value` in order. Every key must already exist in the
//! defaults, so typos are reported with their full path.

use std::path::Path;

use ape_core::agent::AgentConfig;
use ape_core::encoder::EncoderConfig;
use ape_core::moco::MocoConfig;
use ape_core::probe::ProbeConfig;
use ape_core::rl::RlConfig;
use ape_core::vision::{AugName, CompositionSpec, ShapeWorldSpec};
use ape_core::world_model::WorldModelConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Sizes that finish on one CPU core in minutes.
    #[default]
    Desk,
    /// The published hyperparameter tables.
    Paper,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// Compositions differ in the main augmentation's frequency and their
    /// probabilities follow the pretext accuracy.
    Adaptive,
    /// Every composition uses `fixed_frequency` and probabilities stay uniform.
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: u64,
    pub schedule: Schedule,
    pub main: AugName,
    pub frequencies: Vec<f64>,
    pub fixed_frequency: f64,
    /// Feedback sharpness; `null` picks 1 for up to 4 compositions, else 0.8.
    pub alpha: Option<f64>,
    /// Probe every this many epochs; 0 probes only before and after training.
    pub probe_every: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            schedule: Schedule::Adaptive,
            main: AugName::GaussianBlur,
            frequencies: vec![0.0, 0.5, 1.0],
            fixed_frequency: 0.5,
            alpha: None,
            probe_every: 0,
        }
    }
}

impl PretrainConfig {
    pub fn compositions(&self) -> Result<Vec<CompositionSpec>> {
        self.frequencies
            .iter()
            .map(|&f| {
                let f = match self.schedule {
                    Schedule::Adaptive => f,
                    Schedule::Fixed => self.fixed_frequency,
                };
                Ok(CompositionSpec::standard(self.main, f)?)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub data: ShapeWorldSpec,
    pub encoder: EncoderConfig,
    pub moco: MocoConfig,
    pub pretrain: PretrainConfig,
    pub probe: ProbeConfig,
    pub world_model: WorldModelConfig,
    pub agent: AgentConfig,
    pub rl: RlConfig,
    /// Leading encoder stages kept fixed during policy learning.
    pub freeze_stages: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            profile: Profile::Desk,
            seed: 0,
            data: ShapeWorldSpec {
                samples_per_class: 150,
                ..ShapeWorldSpec::default()
            },
            encoder: EncoderConfig {
                channels: vec![16, 32, 64, 64],
                ..EncoderConfig::default()
            },
            moco: MocoConfig {
                batch_size: 32,
                queue_size: 1024,
                proj_hidden: 128,
                proj_norm: false,
                ..MocoConfig::default()
            },
            pretrain: PretrainConfig::default(),
            probe: ProbeConfig::default(),
            world_model: WorldModelConfig {
                deter: 64,
                hidden: 64,
                head_units: 64,
                head_layers: 1,
                decoder_channels: vec![16, 16, 8],
                ..WorldModelConfig::default()
            },
            agent: AgentConfig {
                units: 64,
                layers: 1,
                ..AgentConfig::default()
            },
            rl: RlConfig {
                train_ratio: 16.0,
                ..RlConfig::default()
            },
            freeze_stages: 3,
        }
    }

    pub fn paper() -> Self {
        Self {
            profile: Profile::Paper,
            seed: 0,
            data: ShapeWorldSpec::default(),
            encoder: EncoderConfig::default(),
            moco: MocoConfig {
                batch_size: 128,
                queue_size: 65536,
                momentum: 0.999,
                ..MocoConfig::default()
            },
            pretrain: PretrainConfig {
                frequencies: vec![0.0, 0.2, 0.4, 0.5, 0.6, 0.8, 1.0],
                ..PretrainConfig::default()
            },
            probe: ProbeConfig {
                lr: 30.0,
                batch_size: 256,
                weight_decay: 0.0,
                ..ProbeConfig::default()
            },
            world_model: WorldModelConfig {
                deter: 512,
                hidden: 512,
                ..WorldModelConfig::default()
            },
            agent: AgentConfig::default(),
            rl: RlConfig {
                batch: 16,
                length: 64,
                train_ratio: 512.0,
                capacity: 1_000_000,
                episode_steps: 200,
                ..RlConfig::default()
            },
            freeze_stages: 3,
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => Self::desk(),
            Profile::Paper => Self::paper(),
        }
    }

    /// Resolves a JSON document plus `--set` overrides.
    pub fn resolve(doc: Option<&str>, overrides: &[String]) -> Result<Self> {
        let user: Value = match doc {
            Some(text) => serde_json::from_str(text).map_err(|e| CliError::Config(format!("config is not valid JSON: {e}")))?,
            None => Value::Object(Map::new()),
        };
        let Value::Object(user) = user else {
            return Err(CliError::Config("config must be a JSON object".into()));
        };
        let mut profile = match user.get("profile") {
            Some(p) => serde_json::from_value(p.clone()).map_err(|_| CliError::Config(format!("unknown profile {p}")))?,
            None => Profile::Desk,
        };
        let parsed: Vec<(Vec<&str>, Value)> = overrides.iter().map(|s| parse_override(s)).collect::<Result<_>>()?;
        for (path, value) in &parsed {
            if path[..] == ["profile"] {
                profile = serde_json::from_value(value.clone()).map_err(|_| CliError::Config(format!("unknown profile {value}")))?;
            }
        }
        let mut base = serde_json::to_value(Self::for_profile(profile)).expect("config serialises");
        merge(&mut base, Value::Object(user), "")?;
        for (path, value) in parsed {
            set_path(&mut base, &path, value)?;
        }
        let cfg: Self = serde_json::from_value(base).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = path.map(std::fs::read_to_string).transpose()?;
        Self::resolve(text.as_deref(), overrides)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.agent.validate()?;
        if self.pretrain.frequencies.len() < 2 {
            return Err(CliError::Config("pretrain.frequencies needs at least 2 compositions".into()));
        }
        if self.freeze_stages >= self.encoder.stage_count() {
            return Err(CliError::Config(format!(
                "freeze_stages {} must be below the {} encoder stages",
                self.freeze_stages,
                self.encoder.stage_count()
            )));
        }
        if self.data.image_size != self.encoder.input_size {
            return Err(CliError::Config(format!(
                "data.image_size {} differs from encoder.input_size {}",
                self.data.image_size, self.encoder.input_size
            )));
        }
        self.pretrain.compositions()?;
        Ok(())
    }
}

/// `a.b.c=value`; the value is JSON when it parses, a string otherwise.
fn parse_override(s: &str) -> Result<(Vec<&str>, Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{s}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad key in override `{s}`")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((path, value))
}

fn merge(base: &mut Value, user: Value, prefix: &str) -> Result<()> {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                let slot = b.get_mut(&k).ok_or_else(|| CliError::Config(format!("unknown config key `{path}`")))?;
                merge(slot, v, &path)?;
            }
            Ok(())
        }
        (b, u) => {
            *b = u;
            Ok(())
        }
    }
}

fn set_path(base: &mut Value, path: &[&str], value: Value) -> Result<()> {
    let mut slot = base;
    for (i, key) in path.iter().enumerate() {
        slot = slot
            .as_object_mut()
            .and_then(|o| o.get_mut(*key))
            .ok_or_else(|| CliError::Config(format!("unknown config key `{}`", path[..=i].join("."))))?;
    }
    *slot = value;
    Ok(())
}
