//! Token-id input files.
//!
//! Accepted forms: a single JSON object `{"ids": [..]}`, JSON lines of such
//! objects, or one whitespace-separated id sequence per line. Blank lines and
//! lines starting with `#` are skipped.

use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

#[derive(Deserialize)]
struct IdsRecord {
    ids: Vec<u32>,
}

pub fn parse_inputs(text: &str) -> Result<Vec<Vec<u32>>> {
    if let Ok(one) = serde_json::from_str::<IdsRecord>(text) {
        return Ok(vec![one.ids]);
    }
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let ids = if line.starts_with('{') {
            serde_json::from_str::<IdsRecord>(line)
                .map_err(|e| Error::Inputs(format!("line {}: {e}", n + 1)))?
                .ids
        } else {
            line.split_whitespace()
                .map(|tok| {
                    tok.parse::<u32>()
                        .map_err(|e| Error::Inputs(format!("line {}: `{tok}`: {e}", n + 1)))
                })
                .collect::<Result<Vec<_>>>()?
        };
        out.push(ids);
    }
    if out.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(out)
}

pub fn read_inputs(path: impl AsRef<Path>) -> Result<Vec<Vec<u32>>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_inputs(&text)
}
