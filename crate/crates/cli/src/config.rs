//! Flat `key = value` configuration files. Flags given on the command line
//! take precedence over file values, which take precedence over defaults.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use spp_cascade::provenance::Metadata;

use crate::error::CliError;

/// Every key a config file may set; the same names as the long flags.
pub const KNOWN_KEYS: &[&str] = &[
    "seed",
    "out-dir",
    "thickness",
    "lambda-min",
    "lambda-max",
    "n-lambda",
    "parity",
    "eps-dielectric",
    "permittivity-table",
    "drude-wp-cm",
    "drude-gamma-cm",
    "drude-eps-inf",
    "output",
    "data",
    "model",
    "mode",
    "epochs",
    "learning-rate",
    "mse-goal",
    "train-fraction",
    "init-scale",
    "queue-capacity",
    "warmup-epochs",
    "percentile",
    "window",
    "max-window",
    "validated-component",
    "stall-timeout-s",
];

#[derive(Debug, Default, Clone)]
pub struct FileConfig {
    values: BTreeMap<String, String>,
}

impl FileConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(CliError::Usage(format!(
                    "{origin}:{}: expected `key = value`",
                    i + 1
                )));
            };
            let key = k.trim().trim_start_matches("--").replace('_', "-");
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(CliError::Usage(format!(
                    "{origin}:{}: unknown key `{key}`",
                    i + 1
                )));
            }
            if values.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(CliError::Usage(format!(
                    "{origin}:{}: `{key}` set twice",
                    i + 1
                )));
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
                Self::parse(&text, &p.display().to_string())
            }
        }
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }
}

/// Resolves values and records every resolved setting for provenance.
pub struct Resolver<'a> {
    file: &'a FileConfig,
    pub resolved: Metadata,
}

impl<'a> Resolver<'a> {
    pub fn new(file: &'a FileConfig, command: &str) -> Self {
        let mut resolved = Metadata::new();
        resolved.set("command", command);
        Self { file, resolved }
    }

    fn file_value<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        self.file
            .raw(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| CliError::Usage(format!("config `{key}` = `{v}`: {e}")))
            })
            .transpose()
    }

    pub fn get<T: FromStr + Display>(
        &mut self,
        cli: Option<T>,
        key: &str,
        default: T,
    ) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        let v = match cli {
            Some(v) => v,
            None => self.file_value(key)?.unwrap_or(default),
        };
        self.resolved.set(key, &v);
        Ok(v)
    }

    /// Like [`Resolver::get`] but kept out of the provenance record.
    pub fn unrecorded<T: FromStr>(
        &self,
        cli: Option<T>,
        key: &str,
        default: T,
    ) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        match cli {
            Some(v) => Ok(v),
            None => Ok(self.file_value(key)?.unwrap_or(default)),
        }
    }

    pub fn optional<T: FromStr + Display>(
        &mut self,
        cli: Option<T>,
        key: &str,
    ) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        let v = match cli {
            Some(v) => Some(v),
            None => self.file_value(key)?,
        };
        self.resolved.set(
            key,
            v.as_ref()
                .map_or_else(|| "none".to_string(), |x| x.to_string()),
        );
        Ok(v)
    }

    pub fn required<T: FromStr + Display>(
        &mut self,
        cli: Option<T>,
        key: &str,
    ) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        self.optional(cli, key)?
            .ok_or_else(|| CliError::Usage(format!("--{key} is required (flag or config file)")))
    }

    /// Comma-separated list values.
    pub fn list(
        &mut self,
        cli: Vec<f64>,
        key: &str,
        default: &[f64],
    ) -> Result<Vec<f64>, CliError> {
        let v = if !cli.is_empty() {
            cli
        } else if let Some(raw) = self.file.raw(key) {
            raw.split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|e| CliError::Usage(format!("config `{key}`: {e}")))
                })
                .collect::<Result<_, _>>()?
        } else {
            default.to_vec()
        };
        let text: Vec<String> = v.iter().map(f64::to_string).collect();
        self.resolved.set(key, text.join(","));
        Ok(v)
    }
}
