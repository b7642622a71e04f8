//! `key = value` run configuration. Command-line flags take precedence over
//! the file, which takes precedence over built-in defaults.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{CliError, CliResult};

/// Every key a config file may set. Dashes and underscores are interchangeable.
pub const KNOWN_KEYS: &[&str] = &[
    "seed",
    "corpus",
    "phrase_table",
    "source_embeddings",
    "target_embeddings",
    "out",
    "model",
    "queries",
    "learning_rate",
    "embed_lr_factor",
    "steps",
    "budget",
    "convergence_tol",
    "window",
    "feature_maps",
    "embed_dim",
    "source_len",
    "target_len",
    "max_phrase_len",
    "source_layers",
    "target_layers",
    "combine_dim",
    "hidden_dim",
    "init_gain",
    "embed_init_scale",
    "negatives_per_example",
    "epochs",
    "negatives",
    "window_dim",
    "h",
    "tol",
    "kink_margin",
    "retries",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    path: Option<PathBuf>,
    values: BTreeMap<String, (usize, String)>,
}

fn normalize(key: &str) -> String {
    key.trim().replace('-', "_")
}

impl ConfigFile {
    pub fn parse(text: &str, path: Option<&Path>) -> CliResult<Self> {
        let err = |line: usize, message: String| CliError::Core {
            path: path.map(Path::to_owned),
            source: cdcm::Error::Parse { line, message },
        };
        let mut values = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| err(idx + 1, format!("expected `key = value`, got `{line}`")))?;
            let key = normalize(k);
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(err(idx + 1, format!("unknown key `{key}`")));
            }
            if values.insert(key.clone(), (idx + 1, v.trim().to_owned())).is_some() {
                return Err(err(idx + 1, format!("key `{key}` set twice")));
            }
        }
        Ok(Self { path: path.map(Path::to_owned), values })
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, Some(path))
    }

    /// Flag if given, else the file's value for `key`, else `None`.
    pub fn opt<T>(&self, flag: Option<T>, key: &str) -> CliResult<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            None => Ok(None),
            Some((line, raw)) => raw.parse().map(Some).map_err(|e| CliError::Core {
                path: self.path.clone(),
                source: cdcm::Error::Parse { line: *line, message: format!("bad value for `{key}`: {e}") },
            }),
        }
    }

    pub fn get<T>(&self, flag: Option<T>, key: &str, default: T) -> CliResult<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.opt(flag, key)?.unwrap_or(default))
    }

    pub fn require<T>(&self, flag: Option<T>, key: &str) -> CliResult<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.opt(flag, key)?.ok_or_else(|| CliError::Usage(format!("`--{}` is required", key.replace('_', "-"))))
    }
}
