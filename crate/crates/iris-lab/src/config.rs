//! Config resolution for the executable: built-in defaults, then the
//! IRIS_LAB_SEED environment variable, then the JSON config file, then
//! command-line flags, with unknown keys rejected.

use crate::checkpoint::config_hash;
use crate::grpo::{ConfigViolation, TrainerConfig};
use crate::policy::PolicyConfig;
use serde::Serialize;
use std::path::Path;
use thiserror::Error;

pub const SEED_ENV_VAR: &str = "IRIS_LAB_SEED";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unreadable config file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config file is not a JSON object")]
    NotAnObject,
    #[error("bad config: {0}")]
    Deserialize(String),
    #[error("{0}")]
    Invalid(#[from] ConfigViolation),
    #[error("{SEED_ENV_VAR} must be an unsigned integer, got {0:?}")]
    BadEnvSeed(String),
}

/// Command-line overrides; `None` leaves the underlying value untouched.
#[derive(Debug, Clone, Default)]
pub struct FlagOverrides {
    pub seed: Option<u64>,
    pub total_steps: Option<u64>,
    pub group_size: Option<usize>,
    pub clip_epsilon: Option<f64>,
    pub kl_beta: Option<f64>,
    pub learning_rate: Option<f64>,
    pub inner_epochs: Option<usize>,
    pub prompts_per_step: Option<usize>,
    pub eval_every: Option<u64>,
    pub checkpoint_every: Option<u64>,
    pub cot_enabled: Option<bool>,
    pub workers: Option<usize>,
}

/// Fully materialized run configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedConfig {
    pub trainer: TrainerConfig,
    pub policy: PolicyConfig,
    pub config_hash: String,
}

fn apply_file(
    trainer: &mut TrainerConfig,
    policy: &mut PolicyConfig,
    content: &str,
) -> Result<(), ConfigError> {
    let value: serde_json::Value =
        serde_json::from_str(content).map_err(|e| ConfigError::Deserialize(e.to_string()))?;
    let mut map = match value {
        serde_json::Value::Object(map) => map,
        _ => return Err(ConfigError::NotAnObject),
    };

    if let Some(policy_value) = map.remove("policy") {
        // merge the partial policy object onto the current policy config
        let mut base = match serde_json::to_value(&*policy).expect("serializable config") {
            serde_json::Value::Object(m) => m,
            _ => unreachable!(),
        };
        match policy_value {
            serde_json::Value::Object(m) => base.extend(m),
            _ => {
                return Err(ConfigError::Deserialize(
                    "policy must be a JSON object".into(),
                ))
            }
        }
        *policy = serde_json::from_value(serde_json::Value::Object(base))
            .map_err(|e| ConfigError::Deserialize(format!("policy: {e}")))?;
    }

    // remaining keys are trainer fields; merging onto the current trainer
    // keeps earlier layers for keys the file omits, and deserializing with
    // deny_unknown_fields names any unknown key
    let mut base = match serde_json::to_value(&*trainer).expect("serializable config") {
        serde_json::Value::Object(m) => m,
        _ => unreachable!(),
    };
    base.extend(map);
    *trainer = serde_json::from_value(serde_json::Value::Object(base))
        .map_err(|e| ConfigError::Deserialize(e.to_string()))?;
    Ok(())
}

fn apply_flags(trainer: &mut TrainerConfig, flags: &FlagOverrides) {
    macro_rules! set {
        ($field:ident) => {
            if let Some(v) = flags.$field {
                trainer.$field = v;
            }
        };
    }
    set!(seed);
    set!(total_steps);
    set!(group_size);
    set!(clip_epsilon);
    set!(kl_beta);
    set!(learning_rate);
    set!(inner_epochs);
    set!(prompts_per_step);
    set!(eval_every);
    set!(checkpoint_every);
    set!(cot_enabled);
    set!(workers);
}

/// Resolve from explicit parts. Precedence: flags over file over env seed
/// over defaults.
pub fn resolve_config_from_parts(
    file_content: Option<&str>,
    flags: &FlagOverrides,
    env_seed: Option<u64>,
) -> Result<ResolvedConfig, ConfigError> {
    let mut trainer = TrainerConfig::default();
    let mut policy = PolicyConfig::default();
    if let Some(seed) = env_seed {
        trainer.seed = seed;
    }
    if let Some(content) = file_content {
        apply_file(&mut trainer, &mut policy, content)?;
    }
    apply_flags(&mut trainer, flags);
    trainer.validate()?;
    let config_hash = config_hash(&(&trainer, &policy));
    Ok(ResolvedConfig {
        trainer,
        policy,
        config_hash,
    })
}

fn env_seed() -> Result<Option<u64>, ConfigError> {
    match std::env::var(SEED_ENV_VAR) {
        Ok(raw) => raw
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| ConfigError::BadEnvSeed(raw)),
        Err(_) => Ok(None),
    }
}

/// Resolve from an optional config file path, reading IRIS_LAB_SEED from the
/// process environment.
pub fn resolve_config(
    file_path: Option<&Path>,
    flags: &FlagOverrides,
) -> Result<ResolvedConfig, ConfigError> {
    let content = match file_path {
        Some(path) => Some(
            std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
                path: path.display().to_string(),
                source,
            })?,
        ),
        None => None,
    };
    resolve_config_from_parts(content.as_deref(), flags, env_seed()?)
}
