//! Effective settings: built-in defaults, then `COLLIDE_MOUNT`, then an
//! optional `key = value` file, then command-line flags.

use std::path::Path;

use collide_core::fold::{unicode_version, ProfileId};
use collide_core::harness::MOUNT_ENV;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Text,
    Json,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunConfig {
    pub profile: ProfileId,
    pub format: Format,
    /// Version of the bundled case-folding data; not settable.
    pub unicode_version: String,
    pub mount: Option<String>,
    pub timeout_secs: u64,
    pub strict_times: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            profile: ProfileId::FullFold,
            format: Format::Text,
            unicode_version: unicode_version().to_string(),
            mount: None,
            timeout_secs: 30,
            strict_times: false,
        }
    }
}

#[derive(Debug, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(ConfigError(format!("{key}: expected true or false, got {v:?}"))),
    }
}

impl RunConfig {
    /// Defaults with the live mount taken from the environment.
    pub fn from_env() -> Self {
        let mut c = RunConfig::default();
        if let Some(m) = std::env::var_os(MOUNT_ENV).filter(|v| !v.is_empty()) {
            c.mount = Some(m.to_string_lossy().into_owned());
        }
        c
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are
    /// ignored; values may be double-quoted.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("line {}: expected key = value", n + 1)))?;
            let key = key.trim();
            let value = value.trim().trim_matches('"');
            match key {
                "profile" => {
                    self.profile = value.parse().map_err(|e| ConfigError(format!("line {}: {e}", n + 1)))?;
                }
                "format" => {
                    self.format = match value {
                        "text" => Format::Text,
                        "json" => Format::Json,
                        _ => return Err(ConfigError(format!("line {}: unknown format {value:?}", n + 1))),
                    }
                }
                "mount" => self.mount = Some(value.to_string()).filter(|v| !v.is_empty()),
                "timeout" | "timeout_secs" => {
                    self.timeout_secs = value
                        .parse()
                        .map_err(|_| ConfigError(format!("line {}: timeout must be whole seconds", n + 1)))?;
                }
                "strict_times" => self.strict_times = parse_bool(key, value)?,
                "unicode_version" => {
                    return Err(ConfigError(format!("line {}: unicode_version is read-only", n + 1)));
                }
                other => return Err(ConfigError(format!("line {}: unknown key {other:?}", n + 1))),
            }
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        self.apply_text(&text)
    }
}
