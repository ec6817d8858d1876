//! Run configuration files: JSON documents deserialised strictly into
//! [`RunConfig`], with dotted-path overrides applied beforehand.

use std::path::Path;

use serde_json::Value;
use svib_core::checkpoint::sha256_hex;
use svib_core::RunConfig;

use crate::CliError;

/// Parses `key=value`. The value is read as JSON when it parses, and as a
/// bare string otherwise, so `variant=svib_gaussian` and `svgd.beta=0.01`
/// both work.
pub fn parse_override(s: &str) -> Result<(String, Value), CliError> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| CliError::Override(format!("`{s}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(CliError::Override(format!("`{s}` has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

/// Replaces the value at a dotted path. Every segment but the last must
/// name an existing object; the last may be new only if the object is
/// (strict deserialisation rejects unknown names later anyway).
pub fn apply_override(doc: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CliError::Override(format!("`{}` is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj
            .get_mut(*part)
            .ok_or_else(|| CliError::Override(format!("no field `{}`", parts[..=i].join("."))))?;
    }
    unreachable!("split always yields at least one segment")
}

/// Strict deserialisation; errors name the offending field by its dotted
/// path, including the field name itself for missing fields.
pub fn from_value(doc: Value) -> Result<RunConfig, CliError> {
    let config: RunConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner().to_string();
        let field = match missing_field(&inner) {
            Some(f) if path == "." => f.to_string(),
            Some(f) => format!("{path}.{f}"),
            None => path,
        };
        CliError::Config { field, message: inner }
    })?;
    config
        .validate()
        .map_err(|(field, message)| CliError::Config { field, message })?;
    Ok(config)
}

fn missing_field(msg: &str) -> Option<&str> {
    let rest = msg.strip_prefix("missing field `")?;
    rest.split('`').next()
}

/// Loads a config file (or the defaults when `path` is `None`) and applies
/// overrides in order.
pub fn load(path: Option<&Path>, overrides: &[(String, Value)]) -> Result<RunConfig, CliError> {
    let mut doc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Io(p.display().to_string(), e))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config {
                field: ".".into(),
                message: format!("{}: {e}", p.display()),
            })?
        }
        None => serde_json::to_value(RunConfig::default()).expect("default config serialises"),
    };
    for (k, v) in overrides {
        apply_override(&mut doc, k, v.clone())?;
    }
    from_value(doc)
}

/// Hex digest of the config with the seed zeroed, so every seed of one
/// experiment shares a directory.
pub fn config_hash(config: &RunConfig) -> String {
    let mut c = config.clone();
    c.seed = 0;
    let canonical = serde_json::to_string(&c).expect("config serialises");
    sha256_hex(canonical.as_bytes())[..16].to_string()
}
