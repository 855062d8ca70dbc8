use std::collections::BTreeMap;
use std::path::Path;

use hpcc_core::plan::SiteConfig;

use crate::error::CliError;

/// Reads a site configuration. Keys left out keep their defaults; unknown
/// keys are rejected.
pub fn load_site(path: Option<&Path>) -> Result<SiteConfig, CliError> {
    let Some(path) = path else {
        return Ok(SiteConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_site(&text).map_err(|m| CliError::Usage(format!("{}: {m}", path.display())))
}

pub fn parse_site(text: &str) -> Result<SiteConfig, String> {
    let given: toml::Table = toml::from_str(text).map_err(|e| e.to_string())?;
    let mut merged = toml::Table::try_from(SiteConfig::default()).expect("site config is a table");
    for (k, v) in given {
        if !merged.contains_key(&k) {
            return Err(format!("unknown site key `{k}`"));
        }
        merged.insert(k, v);
    }
    merged
        .try_into()
        .map_err(|e: toml::de::Error| e.to_string())
}

/// Parses `NAME=VALUE` pairs given on the command line.
pub fn parse_pairs(pairs: &[String], what: &str) -> Result<Vec<(String, String)>, CliError> {
    pairs
        .iter()
        .map(|p| match p.split_once('=') {
            Some((k, v)) if !k.is_empty() => Ok((k.to_string(), v.to_string())),
            _ => Err(CliError::Usage(format!("{what} `{p}` is not NAME=VALUE"))),
        })
        .collect()
}

/// The submission environment: the process environment unless `clean`,
/// overlaid with explicit assignments.
pub fn host_env(clean: bool, overrides: &[String]) -> Result<BTreeMap<String, String>, CliError> {
    let mut env: BTreeMap<String, String> = if clean {
        BTreeMap::new()
    } else {
        std::env::vars().collect()
    };
    env.extend(parse_pairs(overrides, "--env")?);
    Ok(env)
}
