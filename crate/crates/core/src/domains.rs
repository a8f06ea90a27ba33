//! Domain configuration: a category schema plus a multi-session scenario,
//! stored as TOML. Two domains ship built in.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CategorySchema, SchemaError, TaskScenario};

const RECIPE: &str = include_str!("../domains/recipe.toml");
const MOVIE: &str = include_str!("../domains/movie.toml");

pub const BUILTIN_DOMAINS: [&str; 2] = ["recipe", "movie"];

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("unknown domain `{0}`")]
    Unknown(String),
    #[error("domain file: {0}")]
    Io(#[from] std::io::Error),
    #[error("domain config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("schema domain `{schema}` differs from scenario domain `{scenario}`")]
    Mismatch { schema: String, scenario: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainConfig {
    pub schema: CategorySchema,
    pub scenario: TaskScenario,
}

impl DomainConfig {
    pub fn parse(text: &str) -> Result<Self, DomainError> {
        let config: DomainConfig = toml::from_str(text)?;
        config.schema.validate()?;
        config.scenario.validate()?;
        if config.schema.domain != config.scenario.domain {
            return Err(DomainError::Mismatch {
                schema: config.schema.domain,
                scenario: config.scenario.domain,
            });
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, DomainError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Same domain limited to the first `sessions` scenario steps.
    pub fn scenario_prefix(&self, sessions: u32) -> DomainConfig {
        DomainConfig {
            schema: self.schema.clone(),
            scenario: self.scenario.truncated(sessions),
        }
    }

    pub fn name(&self) -> &str {
        &self.schema.domain
    }
}

pub fn builtin(name: &str) -> Result<DomainConfig, DomainError> {
    match name {
        "recipe" => DomainConfig::parse(RECIPE),
        "movie" => DomainConfig::parse(MOVIE),
        other => Err(DomainError::Unknown(other.to_string())),
    }
}

pub fn recipe() -> DomainConfig {
    builtin("recipe").expect("built-in recipe domain is valid")
}

pub fn movie() -> DomainConfig {
    builtin("movie").expect("built-in movie domain is valid")
}
