//! TOML config files for experiments and typist profiles.

use std::path::Path;

use serde::Deserialize;

use super::{ExperimentSpec, HarnessError};
use crate::trace::TypistProfile;

/// Parse an experiment spec from TOML. Unknown fields are rejected so a
/// typo fails loudly with the field name.
pub fn parse_experiment_config(text: &str) -> Result<ExperimentSpec, HarnessError> {
    let spec: ExperimentSpec =
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
    spec.validate()?;
    Ok(spec)
}

pub fn load_experiment_config(path: &Path) -> Result<ExperimentSpec, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|err| HarnessError::Io {
        path: path.display().to_string(),
        err,
    })?;
    parse_experiment_config(&text)
        .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
}

/// Typist profile file, in milliseconds for readability.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileConfig {
    user_id: u32,
    mean_hold_ms: f64,
    #[serde(default)]
    sd_hold_ms: f64,
    mean_gap_ms_by_class: [f64; 5],
    #[serde(default)]
    sd_gap_ms_by_class: [f64; 5],
    #[serde(default)]
    seed: u64,
}

pub fn parse_profile_config(text: &str) -> Result<TypistProfile, HarnessError> {
    let cfg: ProfileConfig =
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
    let profile = TypistProfile {
        user_id: cfg.user_id,
        mean_hold_us: cfg.mean_hold_ms * 1_000.0,
        sd_hold_us: cfg.sd_hold_ms * 1_000.0,
        mean_gap_us_by_class: cfg.mean_gap_ms_by_class.map(|g| g * 1_000.0),
        sd_gap_us_by_class: cfg.sd_gap_ms_by_class.map(|g| g * 1_000.0),
        seed: cfg.seed,
    };
    profile.validate()?;
    Ok(profile)
}

pub fn load_profile_config(path: &Path) -> Result<TypistProfile, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|err| HarnessError::Io {
        path: path.display().to_string(),
        err,
    })?;
    parse_profile_config(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
}
