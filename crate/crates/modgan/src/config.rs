//! Shared configuration plumbing: TOML loading with dotted-key overrides and
//! stable config hashing.
//!
//! Precedence is command line > config file > defaults; an override key like
//! `trainer.lambda_cyc=5` walks the TOML document and replaces (or creates)
//! the addressed value.

use crate::error::{ModGanError, Result};
use sha2::{Digest, Sha256};
use std::path::Path;

/// Hex SHA-256 of a canonical string form, used to tie checkpoints and run
/// records to the exact configuration that produced them.
pub fn sha256_hex(s: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(s.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Parse an override value the way TOML would: integers, floats, booleans and
/// arrays keep their types, everything else is a string.
fn parse_value(raw: &str) -> toml::Value {
    if let Ok(v) = raw.parse::<i64>() {
        return toml::Value::Integer(v);
    }
    if let Ok(v) = raw.parse::<f64>() {
        return toml::Value::Float(v);
    }
    if let Ok(v) = raw.parse::<bool>() {
        return toml::Value::Boolean(v);
    }
    if raw.starts_with('[') || raw.starts_with('"') {
        if let Ok(toml::Value::Table(t)) = toml::from_str::<toml::Value>(&format!("x = {raw}")) {
            if let Some(v) = t.get("x") {
                return v.clone();
            }
        }
    }
    toml::Value::String(raw.to_string())
}

/// Apply one `dotted.key=value` override in place.
pub fn apply_override(doc: &mut toml::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| ModGanError::Argument(format!("override {spec:?} is not key=value")))?;
    let mut cur = doc;
    let parts: Vec<&str> = key.trim().split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| ModGanError::Config(format!("override {key:?}: {part:?} is not a table")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), parse_value(raw.trim()));
            return Ok(());
        }
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::map::Map::new()));
    }
    unreachable!("split always yields at least one part")
}

/// Load a TOML file (or start from an empty document when `path` is `None`),
/// apply overrides in order, and deserialize.
pub fn load_with_overrides<T: serde::de::DeserializeOwned>(
    path: Option<&Path>,
    overrides: &[String],
) -> Result<T> {
    let mut doc: toml::Value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| ModGanError::io(p, e))?;
            toml::from_str(&text).map_err(|e| ModGanError::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Value::Table(toml::map::Map::new()),
    };
    for spec in overrides {
        apply_override(&mut doc, spec)?;
    }
    doc.try_into().map_err(|e| ModGanError::Config(e.to_string()))
}
