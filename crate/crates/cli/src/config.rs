use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::{usage, Failure};

/// Optional defaults read from `--config`. Keys mirror the long flag names
/// with `_` in place of `-`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub format: Option<String>,
    pub modality: Option<String>,
    pub name: Option<String>,
    pub images: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub split: Option<String>,
    pub ratio: Option<f64>,
    pub seed: Option<u64>,
    pub target: Option<String>,
    pub rank: Option<u32>,
    pub gt: Option<PathBuf>,
    pub transcripts: Option<PathBuf>,
    pub iou: Option<f64>,
    pub policy: Option<String>,
    pub classes: Option<Vec<String>>,
    pub alpha: Option<f64>,
    pub seq_len: Option<usize>,
    pub dim: Option<usize>,
    pub out: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| usage(format!("bad config {}: {e}", path.display())))
    }
}

/// Flag value, else config value, else nothing.
pub fn pick<T>(flag: Option<T>, file: &Option<T>) -> Option<T>
where
    T: Clone,
{
    flag.or_else(|| file.clone())
}

/// Parses a string option via `FromStr`, reporting a usage error on failure.
pub fn parse_opt<T>(name: &str, raw: Option<String>) -> Result<Option<T>, Failure>
where
    T: std::str::FromStr,
    T::Err: std::fmt::Display,
{
    raw.map(|s| s.parse::<T>().map_err(|e| usage(format!("--{name}: {e}"))))
        .transpose()
}

pub fn require<T>(name: &str, v: Option<T>) -> Result<T, Failure> {
    v.ok_or_else(|| usage(format!("missing required option --{name}")))
}
