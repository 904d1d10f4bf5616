//! Flag parsing with config-file merging.
//!
//! Every subcommand declares a flat key schema. Values resolve in
//! precedence order: built-in default, then `key = value` lines from the
//! file named by `--config`, then command-line flags. Unknown keys are
//! rejected from both sources, and each run prints the fully resolved
//! configuration before doing any work.

use std::collections::BTreeMap;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kind {
    Value,
    Flag,
}

#[derive(Debug, Clone, Copy)]
pub struct Spec {
    pub key: &'static str,
    pub kind: Kind,
    pub default: Option<&'static str>,
    pub required: bool,
}

impl Spec {
    pub const fn value(key: &'static str, default: Option<&'static str>, required: bool) -> Self {
        Spec { key, kind: Kind::Value, default, required }
    }

    pub const fn flag(key: &'static str) -> Self {
        Spec { key, kind: Kind::Flag, default: Some("false"), required: false }
    }
}

#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Resolved key/value view for one command.
pub struct Resolved {
    command: &'static str,
    values: BTreeMap<&'static str, String>,
    order: Vec<&'static str>,
}

impl Resolved {
    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn get_opt(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str).filter(|v| !v.is_empty())
    }

    pub fn get_usize(&self, key: &str) -> Result<usize, UsageError> {
        self.get(key)
            .parse()
            .map_err(|_| UsageError(format!("--{key} expects an integer, got {:?}", self.get(key))))
    }

    pub fn get_u64(&self, key: &str) -> Result<u64, UsageError> {
        self.get(key)
            .parse()
            .map_err(|_| UsageError(format!("--{key} expects an integer, got {:?}", self.get(key))))
    }

    pub fn get_f64(&self, key: &str) -> Result<f64, UsageError> {
        self.get(key)
            .parse()
            .map_err(|_| UsageError(format!("--{key} expects a number, got {:?}", self.get(key))))
    }

    pub fn get_bool(&self, key: &str) -> Result<bool, UsageError> {
        match self.get(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(UsageError(format!("--{key} expects true/false, got {other:?}"))),
        }
    }

    /// Print the `key = value` lines in schema order.
    pub fn print(&self) {
        println!("command = {}", self.command);
        for key in &self.order {
            println!("{key} = {}", self.values[key]);
        }
    }
}

fn parse_config_file(path: &str) -> Result<Vec<(String, String)>, UsageError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| UsageError(format!("cannot read config file {path}: {e}")))?;
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(UsageError(format!(
                "{path}:{}: expected `key = value`, got {raw:?}",
                lineno + 1
            )));
        };
        out.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

/// Resolve one command's arguments against its schema.
pub fn resolve(
    command: &'static str,
    schema: &'static [Spec],
    args: &[String],
) -> Result<Resolved, UsageError> {
    let find = |key: &str| schema.iter().find(|s| s.key == key);
    let mut values: BTreeMap<&'static str, String> = BTreeMap::new();
    for spec in schema {
        if let Some(d) = spec.default {
            values.insert(spec.key, d.to_string());
        }
    }

    // scan flags once to find --config, apply the file, then apply flags
    let mut config_path = None;
    let mut i = 0;
    let mut flag_pairs: Vec<(&'static str, String)> = Vec::new();
    while i < args.len() {
        let arg = &args[i];
        let Some(key) = arg.strip_prefix("--") else {
            return Err(UsageError(format!("unexpected argument {arg:?}")));
        };
        if key == "config" {
            i += 1;
            let Some(path) = args.get(i) else {
                return Err(UsageError("--config expects a file path".into()));
            };
            config_path = Some(path.clone());
            i += 1;
            continue;
        }
        let Some(spec) = find(key) else {
            return Err(UsageError(format!("unknown flag --{key} for `{command}`")));
        };
        match spec.kind {
            Kind::Flag => {
                values.insert(spec.key, "true".to_string());
                i += 1;
            }
            Kind::Value => {
                i += 1;
                let Some(v) = args.get(i) else {
                    return Err(UsageError(format!("--{key} expects a value")));
                };
                flag_pairs.push((spec.key, v.clone()));
                i += 1;
            }
        }
    }

    if let Some(path) = &config_path {
        for (key, value) in parse_config_file(path)? {
            let Some(spec) = find(&key) else {
                return Err(UsageError(format!("unknown key {key:?} in config file {path}")));
            };
            values.insert(spec.key, value);
        }
    }
    for (key, value) in flag_pairs {
        values.insert(key, value);
    }

    for spec in schema {
        if spec.required && !values.contains_key(spec.key) {
            return Err(UsageError(format!("missing required flag --{}", spec.key)));
        }
    }
    Ok(Resolved { command, values, order: schema.iter().map(|s| s.key).collect() })
}
