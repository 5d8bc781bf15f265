//! Loosely typed rows shared by the CSV and JSON-lines readers.

use std::collections::BTreeMap;
use std::io::{BufRead, Read};
use std::path::Path;

use serde_json::Value;

/// One input row: field name to raw text, plus the 1-based source line.
#[derive(Clone, Debug, Default)]
pub struct RawRecord {
    pub line: usize,
    pub fields: BTreeMap<String, String>,
}

impl RawRecord {
    pub fn get(&self, name: &str) -> Option<&str> {
        self.fields
            .get(name)
            .map(String::as_str)
            .filter(|v| !v.trim().is_empty())
    }
}

pub fn is_jsonl_path(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("jsonl") | Some("json") | Some("ndjson")
    )
}

/// Reads a headed CSV. Errors carry the failing line number.
pub fn read_csv<R: Read>(reader: R) -> Result<Vec<RawRecord>, (usize, String)> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let headers = rdr.headers().map_err(|e| (1, e.to_string()))?.clone();
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            (line, e.to_string())
        })?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        let fields = headers
            .iter()
            .zip(row.iter())
            .map(|(h, v)| (h.to_string(), v.to_string()))
            .collect();
        out.push(RawRecord { line, fields });
    }
    Ok(out)
}

/// Reads one JSON object per line; numbers and strings are both accepted
/// for scalar fields. Blank lines are skipped.
pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<RawRecord>, (usize, String)> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| (lineno, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| (lineno, e.to_string()))?;
        let Value::Object(map) = value else {
            return Err((lineno, "expected a JSON object".into()));
        };
        let fields = map
            .into_iter()
            .filter_map(|(k, v)| {
                let text = match v {
                    Value::String(s) => s,
                    Value::Number(n) => n.to_string(),
                    Value::Bool(b) => b.to_string(),
                    Value::Null => return None,
                    other => other.to_string(),
                };
                Some((k, text))
            })
            .collect();
        out.push(RawRecord { line: lineno, fields });
    }
    Ok(out)
}
