//! JSONL preference files: one object per line with keys `prompt`, `chosen`,
//! `rejected`, `domain` (plus optional `id` and `subset`).

use std::fmt;
use std::path::Path;

use serde::Deserialize;

use crate::data::{Domain, PreferencePair};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LineError {
    pub line: usize,
    pub reason: String,
}

impl fmt::Display for LineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.reason)
    }
}

#[derive(Deserialize)]
struct RawPair {
    id: Option<String>,
    prompt: Option<String>,
    chosen: Option<String>,
    rejected: Option<String>,
    domain: Option<String>,
    subset: Option<String>,
}

fn parse_line(line: &str, lineno: usize) -> std::result::Result<PreferencePair, String> {
    let raw: RawPair = serde_json::from_str(line).map_err(|e| format!("invalid JSON: {e}"))?;
    let need = |v: Option<String>, key: &str| v.ok_or_else(|| format!("missing key `{key}`"));
    let domain_str = need(raw.domain, "domain")?;
    let domain = domain_str
        .parse::<Domain>()
        .map_err(|_| format!("unknown domain `{domain_str}`"))?;
    let pair = PreferencePair {
        id: raw.id.unwrap_or_else(|| format!("line-{lineno}")),
        prompt: need(raw.prompt, "prompt")?,
        chosen: need(raw.chosen, "chosen")?,
        rejected: need(raw.rejected, "rejected")?,
        domain,
        subset: raw.subset,
    };
    pair.validate()?;
    Ok(pair)
}

/// Parses every non-blank line, keeping valid pairs in file order and
/// collecting one error per rejected line. `\r\n` and `\n` endings parse
/// identically.
pub fn parse_jsonl(text: &str) -> (Vec<PreferencePair>, Vec<LineError>) {
    let mut pairs = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(line, i + 1) {
            Ok(p) => pairs.push(p),
            Err(reason) => errors.push(LineError { line: i + 1, reason }),
        }
    }
    (pairs, errors)
}

/// Reads a JSONL file. With `strict`, any rejected line aborts the load;
/// otherwise rejected lines are returned alongside the valid pairs.
pub fn load_jsonl(path: impl AsRef<Path>, strict: bool) -> Result<(Vec<PreferencePair>, Vec<LineError>)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (pairs, errors) = parse_jsonl(&text);
    if strict && !errors.is_empty() {
        return Err(Error::Records {
            path: path.to_path_buf(),
            errors,
        });
    }
    Ok((pairs, errors))
}

/// One JSON object per line, `\n`-terminated, fixed key order.
pub fn write_jsonl(pairs: &[PreferencePair]) -> String {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&serde_json::to_string(p).expect("pairs serialise"));
        out.push('\n');
    }
    out
}
