//! Operator surface: the run configuration file and the commands behind
//! the `sdlnet` binary. Every command writes its fully resolved
//! configuration next to its outputs.

mod commands;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::geometry::{GeometryError, Quadrangle, DEFAULT_SCORE_THRESHOLD};
use crate::model::{ModelConfig, ModelError, SplitPoint};
use crate::synth::{DataConfig, DocClass, SynthError};
use crate::training::{ExperimentConfig, TrainConfig, TrainError};

pub use commands::{eval, execute, experiment, finetune, gen_data, rectify, train, Command, ExperimentKind, RectifyReport};

/// Environment variable consulted for `seed` when neither the config file
/// nor the command line sets it.
pub const SEED_ENV: &str = "SDLNET_SEED";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{path}: {reason}")]
    Input { path: String, reason: String },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.display().to_string(), source }
}

/// How a command that did not fail ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// The run completed but the document was not detected.
    DetectionFailed,
}

impl Outcome {
    pub fn exit_code(self) -> u8 {
        match self {
            Outcome::Success => 0,
            Outcome::DetectionFailed => 2,
        }
    }
}

/// Exit status for a command error: input and configuration problems.
pub const ERROR_EXIT_CODE: u8 = 1;

/// Merged view of the data, model, training and experiment settings plus
/// the paths a command reads and writes. Fractions are in percent.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub jobs: usize,
    pub score_threshold: f32,
    /// Dataset generation; `data.seed` mirrors `seed`.
    pub data: DataConfig,
    pub width: f64,
    pub train: TrainConfig,
    pub finetune: TrainConfig,
    /// Training classes; `None` means every class in the dataset.
    pub classes: Option<Vec<DocClass>>,
    pub class: Option<DocClass>,
    pub split: SplitPoint,
    pub fraction: f64,
    pub fractions: Vec<f64>,
    pub holdout: DocClass,
    pub record_timing: bool,
    pub data_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub init: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub image: Option<PathBuf>,
    pub quad: Option<Quadrangle>,
    /// Rectified output height; `None` follows the detected quadrangle.
    pub height: Option<u32>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let experiment = ExperimentConfig::default();
        Self {
            seed: 0,
            jobs: 1,
            score_threshold: DEFAULT_SCORE_THRESHOLD,
            data: DataConfig::default(),
            width: experiment.model.width_multiplier,
            train: TrainConfig::default(),
            finetune: TrainConfig::finetune_default(),
            classes: None,
            class: None,
            split: experiment.split,
            fraction: 100.0,
            fractions: experiment.fractions.iter().map(|f| f * 100.0).collect(),
            holdout: experiment.holdout,
            record_timing: true,
            data_dir: None,
            out: None,
            init: None,
            model: None,
            image: None,
            quad: None,
            height: None,
        }
    }
}

/// Keys in file order, grouped under section comments.
const SECTIONS: &[(&str, &[&str])] = &[
    ("general", &["seed", "jobs", "score_threshold"]),
    ("data", &["n", "size", "mix", "perspective"]),
    ("model", &["width"]),
    ("training", &["learning_rate", "batch_size", "max_epochs", "patience", "sigma", "augment"]),
    ("fine-tuning", &["finetune_learning_rate", "finetune_max_epochs", "finetune_patience"]),
    ("selection", &["classes", "class", "split", "fraction"]),
    ("experiments", &["fractions", "holdout", "record_timing"]),
    ("paths", &["data", "out", "init", "model", "image", "quad", "height"]),
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| CliError::Config(format!("bad value {value:?} for {key}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value.split(',').map(|s| parse(key, s.trim())).collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn keys() -> impl Iterator<Item = &'static str> {
        SECTIONS.iter().flat_map(|(_, keys)| keys.iter().copied())
    }

    /// Sets one key from its text form. An empty value clears optional keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let auto = v.is_empty() || v.eq_ignore_ascii_case("auto");
        match key {
            "seed" => self.seed = parse(key, v)?,
            "jobs" => self.jobs = parse(key, v)?,
            "score_threshold" => self.score_threshold = parse(key, v)?,
            "n" => self.data.n = parse(key, v)?,
            "size" => self.data.size = parse(key, v)?,
            "mix" => {
                let mix = parse_list(key, v)?;
                self.data.mix = mix.try_into().map_err(|_| CliError::Config(format!("mix needs 5 proportions, got {v:?}")))?;
            }
            "perspective" => self.data.perspective = parse(key, v)?,
            "width" => self.width = parse(key, v)?,
            "learning_rate" => self.train.learning_rate = parse(key, v)?,
            "batch_size" => {
                self.train.batch_size = parse(key, v)?;
                self.finetune.batch_size = self.train.batch_size;
            }
            "max_epochs" => self.train.max_epochs = parse(key, v)?,
            "patience" => self.train.patience = parse(key, v)?,
            "sigma" => {
                let sigma = if auto { None } else { Some(parse(key, v)?) };
                self.train.sigma = sigma;
                self.finetune.sigma = sigma;
            }
            "augment" => {
                let on: bool = parse(key, v)?;
                let aug = on.then(Default::default);
                self.train.augment = aug.clone();
                self.finetune.augment = aug;
            }
            "finetune_learning_rate" => self.finetune.learning_rate = parse(key, v)?,
            "finetune_max_epochs" => self.finetune.max_epochs = parse(key, v)?,
            "finetune_patience" => self.finetune.patience = parse(key, v)?,
            "classes" => {
                self.classes = if v.is_empty() || v.eq_ignore_ascii_case("all") {
                    None
                } else {
                    Some(DocClass::parse_list(&v.replace('+', ",")).map_err(CliError::Config)?)
                }
            }
            "class" => self.class = if v.is_empty() { None } else { Some(v.parse().map_err(CliError::Config)?) },
            "split" => self.split = v.parse().map_err(CliError::Config)?,
            "fraction" => self.fraction = parse(key, v.trim_end_matches('%'))?,
            "fractions" => self.fractions = parse_list(key, v)?,
            "holdout" => self.holdout = v.parse().map_err(CliError::Config)?,
            "record_timing" => self.record_timing = parse(key, v)?,
            "data" => self.data_dir = path(v),
            "out" => self.out = path(v),
            "init" => self.init = path(v),
            "model" => self.model = path(v),
            "image" => self.image = path(v),
            "quad" => self.quad = if v.is_empty() { None } else { Some(Quadrangle::from_json(v)?) },
            "height" => self.height = if auto { None } else { Some(parse(key, v)?) },
            other => return Err(CliError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Text form of one key, as `set` accepts it.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "jobs" => self.jobs.to_string(),
            "score_threshold" => self.score_threshold.to_string(),
            "n" => self.data.n.to_string(),
            "size" => self.data.size.to_string(),
            "mix" => join(&self.data.mix),
            "perspective" => self.data.perspective.to_string(),
            "width" => self.width.to_string(),
            "learning_rate" => self.train.learning_rate.to_string(),
            "batch_size" => self.train.batch_size.to_string(),
            "max_epochs" => self.train.max_epochs.to_string(),
            "patience" => self.train.patience.to_string(),
            "sigma" => self.train.sigma.map_or_else(|| "auto".into(), |s| s.to_string()),
            "augment" => self.train.augment.is_some().to_string(),
            "finetune_learning_rate" => self.finetune.learning_rate.to_string(),
            "finetune_max_epochs" => self.finetune.max_epochs.to_string(),
            "finetune_patience" => self.finetune.patience.to_string(),
            "classes" => self.classes.as_ref().map_or_else(|| "all".into(), |c| join(c)),
            "class" => self.class.map(|c| c.to_string()).unwrap_or_default(),
            "split" => self.split.to_string(),
            "fraction" => self.fraction.to_string(),
            "fractions" => join(&self.fractions),
            "holdout" => self.holdout.to_string(),
            "record_timing" => self.record_timing.to_string(),
            "data" => show_path(&self.data_dir),
            "out" => show_path(&self.out),
            "init" => show_path(&self.init),
            "model" => show_path(&self.model),
            "image" => show_path(&self.image),
            "quad" => self.quad.map(|q| q.to_json()).unwrap_or_default(),
            "height" => self.height.map_or_else(|| "auto".into(), |h| h.to_string()),
            _ => return None,
        })
    }

    /// Applies `key = value` lines; blank lines and `#` lines are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<Vec<String>> {
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value, got {line:?}", i + 1)))?;
            let k = k.trim();
            self.set(k, v).map_err(|e| CliError::Config(format!("line {}: {e}", i + 1)))?;
            seen.push(k.to_string());
        }
        Ok(seen)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.sync_seeds();
        Ok(cfg)
    }

    /// Defaults, then `seed_env` when no other source sets `seed`, then the
    /// file, then the overrides in order.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)], seed_env: Option<&str>) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seed_set = overrides.iter().any(|(k, _)| k == "seed");
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            let keys =
                cfg.apply_text(&text).map_err(|e| CliError::Input { path: path.display().to_string(), reason: e.to_string() })?;
            seed_set |= keys.iter().any(|k| k == "seed");
        }
        if let (false, Some(env)) = (seed_set, seed_env) {
            cfg.set("seed", env).map_err(|e| CliError::Config(format!("{SEED_ENV}: {e}")))?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.sync_seeds();
        Ok(cfg)
    }

    fn sync_seeds(&mut self) {
        self.data.seed = self.seed;
        self.train.seed = self.seed;
        self.finetune.seed = self.seed;
        self.train.input_size = self.data.size as usize;
        self.finetune.input_size = self.data.size as usize;
    }

    /// Every key with its resolved value, under section comments.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, (section, keys)) in SECTIONS.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            let _ = writeln!(out, "# {section}");
            for key in *keys {
                let _ = writeln!(out, "{key} = {}", self.get(key).expect("listed keys resolve"));
            }
        }
        out
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::new(self.data.size as usize, self.width)
    }

    pub fn experiment_config(&self) -> ExperimentConfig {
        ExperimentConfig {
            model: self.model_config(),
            seed: self.seed,
            pretrain: self.train.clone(),
            finetune: self.finetune.clone(),
            score_threshold: self.score_threshold,
            fractions: self.fractions.iter().map(|f| f / 100.0).collect(),
            holdout: self.holdout,
            split: self.split,
            record_timing: self.record_timing,
            jobs: self.jobs,
        }
    }
}
