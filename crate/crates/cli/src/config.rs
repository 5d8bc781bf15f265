//! `--config` files and the echo block stamped on every output.
//!
//! A config file is a JSON object whose keys are flag names (snake or kebab
//! case) plus a `command` key. The echo written into outputs has the same
//! shape under its `config` key, so any output can be fed back as a config.

use std::ffi::OsString;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::{Map, Value};

pub const TOOL: &str = "cloudindex";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub const COMMANDS: [&str; 5] = ["ingest", "index", "synth", "simulate", "report"];

/// Argument keys that are positional rather than `--flag value`.
const POSITIONAL: [&str; 1] = ["reports"];

#[derive(Debug, Serialize)]
pub struct Echo<'a, T: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub seed: u64,
    pub config: &'a T,
}

impl<'a, T: Serialize> Echo<'a, T> {
    pub fn new(command: &'static str, seed: u64, config: &'a T) -> Self {
        Echo {
            tool: TOOL,
            version: VERSION,
            command,
            seed,
            config,
        }
    }

    /// One-line `# {...}` comment for CSV and text outputs.
    pub fn comment(&self) -> String {
        format!("# {}", serde_json::to_string(self).expect("echo serializes"))
    }
}

/// Output wrapper for JSON artifacts.
#[derive(Serialize)]
pub struct Envelope<'a, T: Serialize, R: Serialize> {
    #[serde(flatten)]
    pub echo: Echo<'a, T>,
    pub result: R,
}

/// Splits `--config FILE` out of `argv` and splices the file's flags in
/// front of the remaining command-line flags, which therefore win.
pub fn expand_argv(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut iter = argv.into_iter();
    let bin = iter.next().unwrap_or_else(|| TOOL.into());
    let mut config_path: Option<OsString> = None;
    let mut rest = Vec::new();
    while let Some(arg) = iter.next() {
        if arg == "--config" {
            config_path = Some(iter.next().context("--config needs a file argument")?);
        } else if let Some(v) = arg.to_str().and_then(|s| s.strip_prefix("--config=")) {
            config_path = Some(v.into());
        } else {
            rest.push(arg);
        }
    }
    let Some(path) = config_path else {
        let mut out = vec![bin];
        out.extend(rest);
        return Ok(out);
    };
    let (command, tokens) = load(Path::new(&path))?;
    if let Some(first) = rest.first().and_then(|a| a.to_str()) {
        if COMMANDS.contains(&first) {
            if first != command {
                bail!("config is for `{command}` but the command line asks for `{first}`");
            }
            rest.remove(0);
        }
    }
    let mut out = vec![bin, command.into()];
    out.extend(tokens.into_iter().map(OsString::from));
    out.extend(rest);
    Ok(out)
}

fn load(path: &Path) -> Result<(String, Vec<String>)> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    // CSV and text outputs carry their echo as a leading comment line.
    let json = match text.strip_prefix("# ") {
        Some(rest) => rest.lines().next().unwrap_or_default(),
        None => text.as_str(),
    };
    let value: Value = serde_json::from_str(json).with_context(|| format!("parsing config {}", path.display()))?;
    let Value::Object(mut top) = value else {
        bail!("config {} must be a JSON object", path.display());
    };
    let command = match top.remove("command") {
        Some(Value::String(c)) if COMMANDS.contains(&c.as_str()) => c,
        Some(other) => bail!("config {}: unknown command {other}", path.display()),
        None => bail!("config {}: missing `command`", path.display()),
    };
    let flags = match top.remove("config") {
        Some(Value::Object(inner)) => inner,
        Some(_) => bail!("config {}: `config` must be an object", path.display()),
        None => {
            for key in ["tool", "version", "result"] {
                top.remove(key);
            }
            top
        }
    };
    Ok((
        command,
        to_tokens(&flags).with_context(|| format!("config {}", path.display()))?,
    ))
}

/// Flattens a flag object into command-line tokens.
pub fn to_tokens(flags: &Map<String, Value>) -> Result<Vec<String>> {
    let mut tokens = Vec::new();
    let mut positional = Vec::new();
    for (key, value) in flags {
        let is_positional = POSITIONAL.contains(&key.as_str());
        let flag = format!("--{}", key.replace('_', "-"));
        let values: Vec<&Value> = match value {
            Value::Array(items) => items.iter().collect(),
            other => vec![other],
        };
        for v in values {
            let text = match v {
                Value::Null => continue,
                Value::Bool(false) => continue,
                Value::Bool(true) => {
                    tokens.push(flag.clone());
                    continue;
                }
                Value::String(s) => s.clone(),
                Value::Number(n) => n.to_string(),
                _ => bail!("`{key}` must be a scalar or a list of scalars"),
            };
            if is_positional {
                positional.push(text);
            } else {
                tokens.push(flag.clone());
                tokens.push(text);
            }
        }
    }
    tokens.extend(positional);
    Ok(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn tokens_cover_scalars_lists_and_bools() {
        let flags = json!({
            "epoch": 300,
            "traces": ["a.csv", "b.csv"],
            "force": true,
            "quiet": false,
            "start": null,
            "reports": ["r1.json"],
            "horizon": 3600.0
        });
        let tokens = to_tokens(flags.as_object().unwrap()).unwrap();
        assert_eq!(
            tokens,
            [
                "--epoch",
                "300",
                "--force",
                "--horizon",
                "3600.0",
                "--traces",
                "a.csv",
                "--traces",
                "b.csv",
                "r1.json"
            ]
        );
    }

    #[test]
    fn nested_objects_are_rejected() {
        let flags = json!({"job": {"name": "x"}});
        assert!(to_tokens(flags.as_object().unwrap()).is_err());
    }

    #[test]
    fn no_config_leaves_argv_alone() {
        let argv: Vec<OsString> = ["cloudindex", "index", "--period", "60"].map(OsString::from).to_vec();
        assert_eq!(expand_argv(argv.clone()).unwrap(), argv);
    }
}
