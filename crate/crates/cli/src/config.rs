//! Experiment configuration: a small dotted-key/value text format parsed
//! into a typed [`ExperimentConfig`].
//!
//! Grammar (one entry per line):
//!
//! ```text
//! # comment
//! key.subkey = value        # values: number | bool | word | comma list
//! ```
//!
//! Unknown keys are rejected so typos fail loudly. Every key has a
//! default; an empty file is a valid configuration.

use freqlab_core::attacks::{Components, L2Mode, DEFAULT_LAMBDA_SWEEP};
use freqlab_core::Real;
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

#[derive(Debug)]
pub enum ConfigError {
    Parse { line: usize, why: String },
    UnknownKey(String),
    BadValue { key: String, why: String },
    Io(std::io::Error),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Parse { line, why } => write!(f, "config line {line}: {why}"),
            ConfigError::UnknownKey(k) => write!(f, "unknown config key '{k}'"),
            ConfigError::BadValue { key, why } => write!(f, "config key '{key}': {why}"),
            ConfigError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for ConfigError {}

impl From<std::io::Error> for ConfigError {
    fn from(e: std::io::Error) -> Self {
        ConfigError::Io(e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetKind {
    Synthetic,
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BandChoice {
    Whole,
    Low,
    High,
}

impl BandChoice {
    pub fn regions(&self) -> Option<Vec<usize>> {
        match self {
            BandChoice::Whole => None,
            BandChoice::Low => Some(freqlab_core::spectral::LOW_BAND_REGIONS.to_vec()),
            BandChoice::High => Some(freqlab_core::spectral::HIGH_BAND_REGIONS.to_vec()),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            BandChoice::Whole => "whole",
            BandChoice::Low => "low",
            BandChoice::High => "high",
        }
    }
}

/// Full description of one experiment run.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub seed: u64,

    pub dataset: DatasetKind,
    pub classes: usize,
    pub image_size: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,

    /// Which model families to build ("cnn", "vit").
    pub models: Vec<String>,
    pub cnn_width: usize,
    pub vit_patch: usize,
    pub vit_depth: usize,
    pub vit_heads: usize,
    pub vit_embed: usize,

    pub train_enabled: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub train_learning_rate: Real,
    pub label_smoothing: Real,

    /// Component sets attacked, e.g. [pixel, phase, mag+phase].
    pub attack_components: Vec<Components>,
    pub lambdas: Vec<Real>,
    pub attack_images: usize,
    pub attack_max_iterations: usize,
    pub attack_patience: usize,
    pub attack_learning_rate: Real,
    pub attack_weight_decay: Real,
    pub attack_l2_mode: L2Mode,
    pub attack_band: BandChoice,

    pub baselines_enabled: bool,
    pub pgd_steps: usize,

    pub analysis_enabled: bool,
    pub analysis_images: usize,
    pub curve_bins: usize,
    pub workers: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 7,
            dataset: DatasetKind::Synthetic,
            classes: 4,
            image_size: 32,
            train_per_class: 300,
            val_per_class: 50,
            test_per_class: 75,
            models: vec!["cnn".into(), "vit".into()],
            cnn_width: 16,
            vit_patch: 4,
            vit_depth: 2,
            vit_heads: 2,
            vit_embed: 32,
            train_enabled: true,
            epochs: 14,
            batch_size: 32,
            train_learning_rate: 1e-3,
            label_smoothing: 0.1,
            attack_components: vec![Components::MAGNITUDE, Components::PHASE, Components::PIXEL],
            lambdas: DEFAULT_LAMBDA_SWEEP.to_vec(),
            attack_images: 40,
            attack_max_iterations: 1000,
            attack_patience: 5,
            attack_learning_rate: 5e-3,
            attack_weight_decay: 5e-6,
            attack_l2_mode: L2Mode::default(),
            attack_band: BandChoice::Whole,
            baselines_enabled: false,
            pgd_steps: 10,
            analysis_enabled: true,
            analysis_images: 8,
            curve_bins: 8,
            workers: None,
        }
    }
}

/// Parse the raw dotted-key tree of a config file.
fn parse_tree(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::Parse {
                line: i + 1,
                why: format!("expected 'key = value', got '{line}'"),
            });
        };
        let key = key.trim().to_string();
        if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '.' || c == '_')
        {
            return Err(ConfigError::Parse { line: i + 1, why: format!("bad key '{key}'") });
        }
        map.insert(key, value.trim().to_string());
    }
    Ok(map)
}

fn take<T>(
    map: &mut BTreeMap<String, String>,
    key: &str,
    parse: impl Fn(&str) -> Result<T, String>,
    slot: &mut T,
) -> Result<(), ConfigError> {
    if let Some(raw) = map.remove(key) {
        *slot = parse(&raw).map_err(|why| ConfigError::BadValue { key: key.into(), why })?;
    }
    Ok(())
}

fn parse_usize(s: &str) -> Result<usize, String> {
    s.parse().map_err(|_| format!("'{s}' is not a count"))
}

fn parse_u64(s: &str) -> Result<u64, String> {
    s.parse().map_err(|_| format!("'{s}' is not an integer"))
}

fn parse_real(s: &str) -> Result<Real, String> {
    s.parse().map_err(|_| format!("'{s}' is not a number"))
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s {
        "true" | "yes" | "on" => Ok(true),
        "false" | "no" | "off" => Ok(false),
        other => Err(format!("'{other}' is not a bool")),
    }
}

impl ExperimentConfig {
    pub fn from_str(text: &str) -> Result<Self, ConfigError> {
        let mut map = parse_tree(text)?;
        let mut cfg = ExperimentConfig::default();

        take(&mut map, "seed", parse_u64, &mut cfg.seed)?;

        if let Some(kind) = map.remove("dataset.kind") {
            match kind.as_str() {
                "synthetic" => cfg.dataset = DatasetKind::Synthetic,
                "idx" => {
                    let path = |m: &mut BTreeMap<String, String>, k: &str| -> Result<PathBuf, ConfigError> {
                        m.remove(k).map(PathBuf::from).ok_or_else(|| ConfigError::BadValue {
                            key: k.into(),
                            why: "required for dataset.kind = idx".into(),
                        })
                    };
                    cfg.dataset = DatasetKind::Idx {
                        train_images: path(&mut map, "dataset.train_images")?,
                        train_labels: path(&mut map, "dataset.train_labels")?,
                        test_images: path(&mut map, "dataset.test_images")?,
                        test_labels: path(&mut map, "dataset.test_labels")?,
                    };
                }
                other => {
                    return Err(ConfigError::BadValue {
                        key: "dataset.kind".into(),
                        why: format!("'{other}' is neither synthetic nor idx"),
                    })
                }
            }
        }
        take(&mut map, "dataset.classes", parse_usize, &mut cfg.classes)?;
        take(&mut map, "dataset.size", parse_usize, &mut cfg.image_size)?;
        take(&mut map, "dataset.train_per_class", parse_usize, &mut cfg.train_per_class)?;
        take(&mut map, "dataset.val_per_class", parse_usize, &mut cfg.val_per_class)?;
        take(&mut map, "dataset.test_per_class", parse_usize, &mut cfg.test_per_class)?;

        take(
            &mut map,
            "models",
            |s| {
                let models: Vec<String> = s.split(',').map(|m| m.trim().to_string()).collect();
                for m in &models {
                    if m != "cnn" && m != "vit" {
                        return Err(format!("unknown model family '{m}'"));
                    }
                }
                Ok(models)
            },
            &mut cfg.models,
        )?;
        take(&mut map, "model.cnn.width", parse_usize, &mut cfg.cnn_width)?;
        take(&mut map, "model.vit.patch", parse_usize, &mut cfg.vit_patch)?;
        take(&mut map, "model.vit.depth", parse_usize, &mut cfg.vit_depth)?;
        take(&mut map, "model.vit.heads", parse_usize, &mut cfg.vit_heads)?;
        take(&mut map, "model.vit.embed", parse_usize, &mut cfg.vit_embed)?;

        take(&mut map, "train.enabled", parse_bool, &mut cfg.train_enabled)?;
        take(&mut map, "train.epochs", parse_usize, &mut cfg.epochs)?;
        take(&mut map, "train.batch_size", parse_usize, &mut cfg.batch_size)?;
        take(&mut map, "train.learning_rate", parse_real, &mut cfg.train_learning_rate)?;
        take(&mut map, "train.label_smoothing", parse_real, &mut cfg.label_smoothing)?;

        take(
            &mut map,
            "attack.components",
            |s| {
                s.split(',')
                    .map(|c| {
                        Components::parse(c.trim())
                            .ok_or_else(|| format!("unknown component set '{c}'"))
                    })
                    .collect::<Result<Vec<_>, _>>()
            },
            &mut cfg.attack_components,
        )?;
        take(
            &mut map,
            "attack.lambdas",
            |s| s.split(',').map(|v| parse_real(v.trim())).collect::<Result<Vec<_>, _>>(),
            &mut cfg.lambdas,
        )?;
        take(&mut map, "attack.images", parse_usize, &mut cfg.attack_images)?;
        take(&mut map, "attack.max_iterations", parse_usize, &mut cfg.attack_max_iterations)?;
        take(&mut map, "attack.patience", parse_usize, &mut cfg.attack_patience)?;
        take(&mut map, "attack.learning_rate", parse_real, &mut cfg.attack_learning_rate)?;
        take(&mut map, "attack.weight_decay", parse_real, &mut cfg.attack_weight_decay)?;
        take(
            &mut map,
            "attack.l2_mode",
            |s| match s {
                "mean_squared" => Ok(L2Mode::MeanSquared),
                "squared" => Ok(L2Mode::SquaredNorm),
                "norm" => Ok(L2Mode::Norm),
                other => Err(format!("'{other}' is not one of mean_squared|squared|norm")),
            },
            &mut cfg.attack_l2_mode,
        )?;
        take(
            &mut map,
            "attack.band",
            |s| match s {
                "whole" => Ok(BandChoice::Whole),
                "low" => Ok(BandChoice::Low),
                "high" => Ok(BandChoice::High),
                other => Err(format!("'{other}' is not one of whole|low|high")),
            },
            &mut cfg.attack_band,
        )?;

        take(&mut map, "baselines.enabled", parse_bool, &mut cfg.baselines_enabled)?;
        take(&mut map, "baselines.pgd_steps", parse_usize, &mut cfg.pgd_steps)?;

        take(&mut map, "analysis.enabled", parse_bool, &mut cfg.analysis_enabled)?;
        take(&mut map, "analysis.images", parse_usize, &mut cfg.analysis_images)?;
        take(&mut map, "metrics.curve_bins", parse_usize, &mut cfg.curve_bins)?;
        let mut workers = 0usize;
        take(&mut map, "workers", parse_usize, &mut workers)?;
        if workers > 0 {
            cfg.workers = Some(workers);
        }

        if let Some((key, _)) = map.into_iter().next() {
            return Err(ConfigError::UnknownKey(key));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_str(&std::fs::read_to_string(path)?)
    }

    /// Canonical textual form; its hash identifies the run.
    pub fn canonical_text(&self) -> String {
        // Render through Debug of the typed struct: stable for identical
        // configurations on the same build.
        format!("{self:?}")
    }

    /// FNV-1a hash of the canonical form.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.canonical_text().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}
