//! Sectioned `key = value` run-configuration files. Every key must be
//! one the tool knows about; unknown sections or keys are hard errors
//! so a typo cannot silently change a run.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown section [{0}]")]
    UnknownSection(String),
    #[error("unknown key '{key}' in section [{section}]")]
    UnknownKey { section: String, key: String },
    #[error("duplicate key '{key}' in section [{section}]")]
    DuplicateKey { section: String, key: String },
    #[error("key '{key}' in section [{section}]: cannot parse '{value}' as {wanted}")]
    BadValue {
        section: String,
        key: String,
        value: String,
        wanted: &'static str,
    },
}

const SCHEMA: &[(&str, &[&str])] = &[
    (
        "scenario",
        &[
            "seed",
            "extent",
            "spacing",
            "elevation_range",
            "altitude",
            "n_features",
            "resolution",
            "fov_deg",
            "baseline",
            "rotation_norm_deg",
        ],
    ),
    ("noise", &["sigma_l", "sigma_h"]),
    (
        "solver",
        &[
            "max_iters",
            "step_tol",
            "residual_tol",
            "lm_lambda0",
            "lm_scale",
            "robust",
            "huber_delta",
            "cond_threshold",
            "reanchor",
            "angle_scale",
        ],
    ),
    (
        "run",
        &["trials", "output_dir", "parameter", "values", "plots"],
    ),
];

fn allowed_keys(section: &str) -> Option<&'static [&'static str]> {
    SCHEMA
        .iter()
        .find(|(name, _)| *name == section)
        .map(|(_, keys)| *keys)
}

/// Parsed configuration: ordered sections of ordered `key = value`
/// entries, validated against the known schema.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunConfig {
    sections: Vec<(String, Vec<(String, String)>)>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut current: Option<usize> = None;
        let mut seen: BTreeSet<(String, String)> = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            if let Some(name) = trimmed.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or(ConfigError::Syntax {
                    line,
                    message: "section header missing closing ']'".into(),
                })?;
                let name = name.trim().to_string();
                if allowed_keys(&name).is_none() {
                    return Err(ConfigError::UnknownSection(name));
                }
                current = Some(cfg.section_index(&name));
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or(ConfigError::Syntax {
                line,
                message: format!("expected 'key = value', got '{trimmed}'"),
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            let idx = current.ok_or(ConfigError::Syntax {
                line,
                message: "key before any [section] header".into(),
            })?;
            let section = cfg.sections[idx].0.clone();
            let keys = allowed_keys(&section).expect("validated section");
            if !keys.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey { section, key });
            }
            if !seen.insert((section.clone(), key.clone())) {
                return Err(ConfigError::DuplicateKey { section, key });
            }
            cfg.sections[idx].1.push((key, value));
        }
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Canonical text form; `parse(format())` reproduces the config.
    pub fn format(&self) -> String {
        let mut out = String::new();
        for (name, entries) in &self.sections {
            let _ = writeln!(out, "[{name}]");
            for (key, value) in entries {
                let _ = writeln!(out, "{key} = {value}");
            }
            let _ = writeln!(out);
        }
        out
    }

    fn section_index(&mut self, name: &str) -> usize {
        if let Some(i) = self.sections.iter().position(|(n, _)| n == name) {
            i
        } else {
            self.sections.push((name.to_string(), Vec::new()));
            self.sections.len() - 1
        }
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections
            .iter()
            .find(|(n, _)| n == section)
            .and_then(|(_, entries)| {
                entries
                    .iter()
                    .find(|(k, _)| k == key)
                    .map(|(_, v)| v.as_str())
            })
    }

    /// Inserts or overwrites one value (used for flag overrides).
    pub fn set(&mut self, section: &str, key: &str, value: impl Into<String>) -> Result<(), ConfigError> {
        let keys = allowed_keys(section)
            .ok_or_else(|| ConfigError::UnknownSection(section.to_string()))?;
        if !keys.contains(&key) {
            return Err(ConfigError::UnknownKey {
                section: section.to_string(),
                key: key.to_string(),
            });
        }
        let idx = self.section_index(section);
        let entries = &mut self.sections[idx].1;
        if let Some(entry) = entries.iter_mut().find(|(k, _)| k == key) {
            entry.1 = value.into();
        } else {
            entries.push((key.to_string(), value.into()));
        }
        Ok(())
    }

    fn typed<T: std::str::FromStr>(
        &self,
        section: &str,
        key: &str,
        wanted: &'static str,
    ) -> Result<Option<T>, ConfigError> {
        match self.get(section, key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| ConfigError::BadValue {
                section: section.to_string(),
                key: key.to_string(),
                value: v.to_string(),
                wanted,
            }),
        }
    }

    pub fn get_f64(&self, section: &str, key: &str) -> Result<Option<f64>, ConfigError> {
        self.typed(section, key, "a number")
    }

    pub fn get_u64(&self, section: &str, key: &str) -> Result<Option<u64>, ConfigError> {
        self.typed(section, key, "an unsigned integer")
    }

    pub fn get_usize(&self, section: &str, key: &str) -> Result<Option<usize>, ConfigError> {
        self.typed(section, key, "an unsigned integer")
    }

    pub fn get_bool(&self, section: &str, key: &str) -> Result<Option<bool>, ConfigError> {
        match self.get(section, key) {
            None => Ok(None),
            Some("true") => Ok(Some(true)),
            Some("false") => Ok(Some(false)),
            Some(v) => Err(ConfigError::BadValue {
                section: section.to_string(),
                key: key.to_string(),
                value: v.to_string(),
                wanted: "'true' or 'false'",
            }),
        }
    }

    /// Comma-separated list of numbers.
    pub fn get_f64_list(&self, section: &str, key: &str) -> Result<Option<Vec<f64>>, ConfigError> {
        match self.get(section, key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|tok| {
                    tok.trim().parse::<f64>().map_err(|_| ConfigError::BadValue {
                        section: section.to_string(),
                        key: key.to_string(),
                        value: v.to_string(),
                        wanted: "a comma-separated list of numbers",
                    })
                })
                .collect::<Result<Vec<_>, _>>()
                .map(Some),
        }
    }
}
