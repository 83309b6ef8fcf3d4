//! Suite files: shared base settings, a member list and a comparison spec.
//!
//! ```toml
//! [comparison]
//! reference = "surgical"
//! groups = ["all", "unique"]
//!
//! [base]
//! T = 50
//! [base.scenario]
//! K = 4
//! # ...
//!
//! [[members]]
//! method = "surgical"
//!
//! [[members]]
//! name = "vanilla_fast"
//! method = "vanilla_fl"
//! lr = 0.1
//! ```
//!
//! Member tables are merged over `base`, nested tables key by key.

use std::path::Path;

use fedsurg_core::suite::Comparison;
use fedsurg_core::{Error, ExperimentConfig};
use serde::Deserialize;
use toml::{Table, Value};

use crate::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteMemberConfig {
    pub name: String,
    pub config: ExperimentConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteFile {
    pub comparison: Comparison,
    pub members: Vec<SuiteMemberConfig>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSuite {
    #[serde(default)]
    comparison: Comparison,
    #[serde(default)]
    base: Table,
    #[serde(default)]
    members: Vec<Table>,
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn config_error(msg: String) -> CliError {
    CliError::Core(Error::Config(msg))
}

impl SuiteFile {
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        let raw: RawSuite = toml::from_str(text).map_err(|e| config_error(e.message().to_string()))?;
        let mut members = Vec::with_capacity(raw.members.len());
        for (i, mut table) in raw.members.into_iter().enumerate() {
            let name = match table.remove("name") {
                Some(Value::String(s)) => Some(s),
                Some(_) => return Err(config_error(format!("member {i}: name must be a string"))),
                None => None,
            };
            let mut merged = raw.base.clone();
            merge(&mut merged, table);
            let config = ExperimentConfig::from_table(merged).map_err(|e| match e {
                Error::Config(m) => config_error(format!("member {i}: {m}")),
                other => CliError::Core(other),
            })?;
            members.push(SuiteMemberConfig {
                name: name.unwrap_or_else(|| config.method.name().to_string()),
                config,
            });
        }
        let suite = SuiteFile {
            comparison: raw.comparison,
            members,
        };
        let as_members: Vec<_> = suite
            .members
            .iter()
            .map(|m| fedsurg_core::suite::SuiteMember {
                name: m.name.clone(),
                config: m.config.clone(),
            })
            .collect();
        suite.comparison.validate(&as_members)?;
        Ok(suite)
    }

    pub fn from_path(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            CliError::Core(Error::Config(m)) => config_error(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
