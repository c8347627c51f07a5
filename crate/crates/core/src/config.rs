//! Flat `key=value` config files: UTF-8 text, one pair per line, `#` comments.
//!
//! Both the simulator and the trainer read this format. Parsing is strict:
//! a consumer declares the keys it understands and anything else is an error,
//! so typos fail loudly instead of silently falling back to defaults.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected 'key = value', got {text:?}")]
    Malformed { line: usize, text: String },
    #[error("line {line}: duplicate key {key:?}")]
    DuplicateKey { line: usize, key: String },
    #[error("unknown key {key:?} (known keys: {known})")]
    UnknownKey { key: String, known: String },
    #[error("key {key:?}: cannot parse {value:?} as {wanted}")]
    BadValue {
        key: String,
        value: String,
        wanted: &'static str,
    },
    #[error("key {key:?}: {reason}")]
    Invalid { key: String, reason: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Parsed `key=value` pairs, still untyped.
#[derive(Debug, Clone, Default)]
pub struct KvConfig {
    values: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut values = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let content = content.trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(ConfigError::Malformed {
                    line,
                    text: raw.to_string(),
                });
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(ConfigError::Malformed {
                    line,
                    text: raw.to_string(),
                });
            }
            if values.insert(key.clone(), value).is_some() {
                return Err(ConfigError::DuplicateKey { line, key });
            }
        }
        Ok(KvConfig { values })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Fails on any key outside `known`; call once after all reads.
    pub fn reject_unknown_keys(&self, known: &[&str]) -> Result<(), ConfigError> {
        for key in self.values.keys() {
            if !known.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey {
                    key: key.clone(),
                    known: known.join(", "),
                });
            }
        }
        Ok(())
    }

    pub fn parsed<T>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T: std::str::FromStr + TypeName,
    {
        match self.get(key) {
            None => Ok(default),
            Some(text) => text.parse().map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                value: text.to_string(),
                wanted: T::TYPE_NAME,
            }),
        }
    }

    pub fn string(&self, key: &str, default: &str) -> String {
        self.get(key).unwrap_or(default).to_string()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Human-readable type label for error messages.
pub trait TypeName {
    const TYPE_NAME: &'static str;
}

macro_rules! type_name {
    ($($t:ty => $n:literal),* $(,)?) => {
        $(impl TypeName for $t { const TYPE_NAME: &'static str = $n; })*
    };
}

type_name! {
    u32 => "unsigned integer",
    u64 => "unsigned integer",
    usize => "unsigned integer",
    f64 => "real number",
    bool => "boolean (true/false)",
}

/// Writes pairs in insertion order; used for reports and manifests.
#[derive(Debug, Default)]
pub struct KvWriter {
    lines: Vec<(String, String)>,
}

impl KvWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: &str, value: impl fmt::Display) {
        self.lines.push((key.to_string(), value.to_string()));
    }
}

impl fmt::Display for KvWriter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (key, value) in &self.lines {
            writeln!(f, "{key}={value}")?;
        }
        Ok(())
    }
}
