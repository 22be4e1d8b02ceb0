//! Flat `key = value` run configuration with `#` comments.
//!
//! Recognized keys: `model`, `image_size`, `lr`, `weight_decay`,
//! `batch_size`, `epochs`, `patience`, `factor`, `min_delta`,
//! `exclude_classes` (comma-separated), `seed`. Unknown keys are rejected
//! so typos fail loudly. Every key is optional; command-line flags override
//! file values, which override built-in defaults.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FileConfig {
    pub model: Option<String>,
    pub image_size: Option<usize>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub patience: Option<usize>,
    pub factor: Option<f64>,
    pub min_delta: Option<f64>,
    pub exclude_classes: Vec<String>,
    pub seed: Option<u64>,
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value.parse().map_err(|_| {
        Error::Config(format!("line {line}: '{value}' is not a valid value for '{key}'"))
    })
}

pub fn parse_config(text: &str) -> Result<FileConfig> {
    let mut cfg = FileConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {line_no}: expected 'key = value', got '{line}'")))?;
        let (key, value) = (key.trim(), value.trim());
        if value.is_empty() {
            return Err(Error::Config(format!("line {line_no}: empty value for '{key}'")));
        }
        match key {
            "model" => cfg.model = Some(value.to_string()),
            "image_size" => cfg.image_size = Some(parse_num(key, value, line_no)?),
            "lr" => cfg.lr = Some(parse_num(key, value, line_no)?),
            "weight_decay" => cfg.weight_decay = Some(parse_num(key, value, line_no)?),
            "batch_size" => cfg.batch_size = Some(parse_num(key, value, line_no)?),
            "epochs" => cfg.epochs = Some(parse_num(key, value, line_no)?),
            "patience" => cfg.patience = Some(parse_num(key, value, line_no)?),
            "factor" => cfg.factor = Some(parse_num(key, value, line_no)?),
            "min_delta" => cfg.min_delta = Some(parse_num(key, value, line_no)?),
            "seed" => cfg.seed = Some(parse_num(key, value, line_no)?),
            "exclude_classes" => {
                cfg.exclude_classes = value
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect();
            }
            other => {
                return Err(Error::Config(format!("line {line_no}: unknown key '{other}'")));
            }
        }
    }
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
    parse_config(&text)
}
