//! Plain `key value` text files: run manifests, normalization statistics,
//! and user config files. One pair per line, first token is the key.

use crate::error::{Error, Result};
use std::path::Path;

pub fn write(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut text = String::new();
    for (k, v) in pairs {
        text.push_str(k);
        text.push(' ');
        text.push_str(v);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Read pairs in file order; blank lines and `#` comments are skipped.
pub fn read(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match line.split_once(|c: char| c.is_whitespace() || c == '=') {
            Some((k, v)) => {
                let v = v.trim_start_matches(|c: char| c.is_whitespace() || c == '=');
                pairs.push((k.trim().to_string(), v.trim().to_string()));
            }
            None => {
                return Err(Error::format(
                    path,
                    format!("line {}: expected 'key value'", lineno + 1),
                ))
            }
        }
    }
    Ok(pairs)
}

pub fn get<'a>(pairs: &'a [(String, String)], key: &str) -> Option<&'a str> {
    pairs
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
}

pub fn require<'a>(pairs: &'a [(String, String)], key: &str, path: &Path) -> Result<&'a str> {
    get(pairs, key).ok_or_else(|| Error::format(path, format!("missing key '{key}'")))
}
