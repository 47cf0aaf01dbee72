//! Scenario files: TOML with unit-suffixed keys; unknown keys are rejected.

use std::path::Path;

use cotrans_nmpc::sim::{ConfigError, ScenarioConfig};
use thiserror::Error;

const BUNDLED: [(&str, &str); 3] = [
    ("paper_sec5", include_str!("../scenarios/paper_sec5.toml")),
    ("single_agent_smoke", include_str!("../scenarios/single_agent_smoke.toml")),
    ("two_agent_no_obstacle", include_str!("../scenarios/two_agent_no_obstacle.toml")),
];

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Invalid(#[from] ConfigError),
}

/// Names of the scenarios compiled into the binary.
pub fn bundled_names() -> impl Iterator<Item = &'static str> {
    BUNDLED.iter().map(|(n, _)| *n)
}

pub fn bundled(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

/// Parses and validates scenario text.
pub fn parse_str(text: &str) -> Result<ScenarioConfig, ScenarioError> {
    let cfg: ScenarioConfig = toml::from_str(text)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads a scenario from `path`, or a bundled scenario when `path` names
/// one and no such file exists.
pub fn parse_scenario(path: &Path) -> Result<ScenarioConfig, ScenarioError> {
    if !path.exists() {
        if let Some(text) = path.to_str().and_then(bundled) {
            return parse_str(text);
        }
    }
    let text = std::fs::read_to_string(path)
        .map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
    parse_str(&text)
}

pub fn to_toml(cfg: &ScenarioConfig) -> String {
    toml::to_string(cfg).expect("scenario configs always serialize")
}
