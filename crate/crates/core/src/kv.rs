//! The line-oriented text format shared by model, profile and run config files.
//!
//! Blank lines and lines starting with `#` are skipped. Every other line is
//! `key value...`.

use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("line {line}: {message}")]
pub struct KvError {
    pub line: usize,
    pub message: String,
}

/// Non-comment lines with their 1-based line numbers, trimmed.
pub fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

/// Parses `key value` lines. Keys are case-sensitive and hyphens are folded to
/// underscores. Repeated keys are an error.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, (usize, String)>, KvError> {
    let mut out = BTreeMap::new();
    for (line, content) in content_lines(text) {
        let (key, value) = match content.split_once(char::is_whitespace) {
            Some((k, v)) => (k, v.trim()),
            None => (content, ""),
        };
        let key = key.replace('-', "_");
        if out.insert(key.clone(), (line, value.to_string())).is_some() {
            return Err(KvError {
                line,
                message: format!("duplicate key `{key}`"),
            });
        }
    }
    Ok(out)
}

pub fn parse_number<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T, KvError> {
    value.parse().map_err(|_| KvError {
        line,
        message: format!("`{key}` expects a number, got `{value}`"),
    })
}
