//! JSON run configuration. Every field is optional; command-line flags
//! override whatever the file sets.

use std::fs;
use std::path::{Path, PathBuf};

use maskwright::mask::MaskPoint;
use maskwright::nn::LayerSpec;
use maskwright::objectives::RegularizerConfig;
use maskwright::train::{OptimizerKind, TrainConfig};
use serde::Deserialize;

use crate::error::{CliError, CliResult};

pub const SEED_ENV: &str = "MASKWRIGHT_SEED";

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Base architecture, one layer line each (the model-file header syntax).
    pub layers: Option<Vec<String>>,
    pub explainer_layers: Option<Vec<String>>,
    pub split_index: Option<usize>,
    pub mask_point: Option<String>,
    pub data: Option<PathBuf>,
    pub base: Option<PathBuf>,
    pub explainer: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub optimizer: Option<String>,
    /// `l1=…,l2=…,entropy=…,entropy_kind=…`
    pub reg: Option<String>,
    pub clip_norm: Option<f64>,
    pub max_steps: Option<usize>,
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|source| CliError::Json { path: path.to_path_buf(), source })
    }

    pub fn load_opt(path: Option<&Path>) -> CliResult<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}

/// Flag, then config, then `MASKWRIGHT_SEED`, then 0.
pub fn resolve_seed(flag: Option<u64>, config: Option<u64>) -> CliResult<u64> {
    if let Some(s) = flag.or(config) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| CliError::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

pub fn parse_layers(lines: &[String]) -> CliResult<Vec<LayerSpec>> {
    Ok(lines.iter().map(|l| LayerSpec::parse_line(l)).collect::<maskwright::Result<_>>()?)
}

pub fn parse_mask_point(s: &str) -> CliResult<MaskPoint> {
    MaskPoint::parse(s).ok_or_else(|| CliError::Usage(format!("unknown mask point {s:?}")))
}

/// Training hyperparameters given on the command line.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainOverrides {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub optimizer: Option<String>,
    pub reg: Option<String>,
    pub clip_norm: Option<f64>,
    pub max_steps: Option<usize>,
}

/// Layers flag and config overrides onto `base`, flags last.
pub fn apply_overrides(mut cfg: TrainConfig, file: &RunConfig, flags: &TrainOverrides) -> CliResult<TrainConfig> {
    if let Some(e) = flags.epochs.or(file.epochs) {
        cfg.epochs = e;
        cfg.eval_every = e;
    }
    if let Some(b) = flags.batch_size.or(file.batch_size) {
        cfg.batch_size = b;
    }
    if let Some(o) = flags.optimizer.as_ref().or(file.optimizer.as_ref()) {
        cfg.optimizer = o.parse::<OptimizerKind>()?;
        // a preset rate tuned for one optimizer does not carry over
        cfg.lr = None;
    }
    if let Some(lr) = flags.lr.or(file.lr) {
        cfg.lr = Some(lr);
    }
    if let Some(r) = flags.reg.as_ref().or(file.reg.as_ref()) {
        cfg.reg = r.parse::<RegularizerConfig>()?;
    }
    if let Some(c) = flags.clip_norm.or(file.clip_norm) {
        cfg.clip_norm = Some(c);
    }
    if let Some(m) = flags.max_steps.or(file.max_steps) {
        cfg.max_steps = Some(m);
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_partial_json() {
        let c =
            RunConfig::parse(r#"{"epochs": 3, "reg": "l1=1e-3", "layers": ["upsample2x"]}"#, Path::new("c")).unwrap();
        assert_eq!(c.epochs, Some(3));
        assert_eq!(c.seed, None);
        assert_eq!(parse_layers(c.layers.as_deref().unwrap()).unwrap(), vec![LayerSpec::Upsample2x]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::parse(r#"{"epoch": 3}"#, Path::new("c")), Err(CliError::Json { .. })));
    }

    #[test]
    fn flags_override_file() {
        let file = RunConfig { epochs: Some(3), lr: Some(0.5), reg: Some("l2=1".into()), ..Default::default() };
        let flags = TrainOverrides { epochs: Some(7), reg: Some("l1=0.25".into()), ..Default::default() };
        let cfg = apply_overrides(TrainConfig::default(), &file, &flags).unwrap();
        assert_eq!(cfg.epochs, 7);
        assert_eq!(cfg.lr, Some(0.5));
        assert_eq!(cfg.reg.l1, 0.25);
        assert_eq!(cfg.reg.l2, 0.0);
    }

    #[test]
    fn seed_precedence() {
        assert_eq!(resolve_seed(Some(4), Some(9)).unwrap(), 4);
        assert_eq!(resolve_seed(None, Some(9)).unwrap(), 9);
    }
}
