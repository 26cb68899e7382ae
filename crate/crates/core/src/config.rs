//! `key = value` text files, used for calendars, log column mappings and
//! CLI configuration.

use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum KeyValueError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: duplicate key {key:?}")]
    DuplicateKey { line: usize, key: String },
}

/// Parses `key = value` lines. Blank lines and lines starting with `#` are
/// ignored; keys are trimmed and lower-cased, values are trimmed.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>, KeyValueError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(KeyValueError::Syntax { line: i + 1, text: raw.to_string() });
        };
        let key = k.trim().to_ascii_lowercase();
        if key.is_empty() {
            return Err(KeyValueError::Syntax { line: i + 1, text: raw.to_string() });
        }
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(KeyValueError::DuplicateKey { line: i + 1, key });
        }
    }
    Ok(out)
}
