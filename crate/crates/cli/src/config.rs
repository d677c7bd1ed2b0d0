//! Run configuration: defaults, then a `key = value` file, then flags.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Subcommand};
use oilcast::data::Grouping;
use oilcast::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Write a synthetic field CSV and its provenance sidecar.
    Generate,
    /// Train one model per channel group.
    Train,
    /// Sample forecast ensembles from a trained checkpoint.
    Forecast,
    /// Score ensembles against the held-out truth.
    Evaluate,
    /// Generate, then train, forecast and evaluate every model.
    Pipeline,
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Command::Generate => "generate",
            Command::Train => "train",
            Command::Forecast => "forecast",
            Command::Evaluate => "evaluate",
            Command::Pipeline => "pipeline",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    TimeGrad,
    Informer,
    Vanilla,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::TimeGrad, ModelKind::Informer, ModelKind::Vanilla];

    pub fn default_epochs(self) -> usize {
        match self {
            ModelKind::TimeGrad => 40,
            ModelKind::Informer => 9,
            ModelKind::Vanilla => 40,
        }
    }

    pub fn default_grouping(self) -> Grouping {
        match self {
            ModelKind::TimeGrad => Grouping::OilWaterPerSite,
            ModelKind::Informer | ModelKind::Vanilla => Grouping::AllSitesOil,
        }
    }

    /// Stable numeric tag stored in checkpoints.
    pub fn code(self) -> f64 {
        match self {
            ModelKind::TimeGrad => 0.0,
            ModelKind::Informer => 1.0,
            ModelKind::Vanilla => 2.0,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::TimeGrad => "timegrad",
            ModelKind::Informer => "informer",
            ModelKind::Vanilla => "vanilla",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "timegrad" => Ok(ModelKind::TimeGrad),
            "informer" => Ok(ModelKind::Informer),
            "vanilla" => Ok(ModelKind::Vanilla),
            _ => Err(Error::Validation(format!("unknown model {s:?} (expected timegrad, informer or vanilla)"))),
        }
    }
}

/// Command-line overrides; every flag is optional so that unset flags leave
/// the config file's value in place.
#[derive(Clone, Debug, Default, Args)]
pub struct Flags {
    /// timegrad, informer or vanilla.
    #[arg(long, global = true)]
    pub model: Option<String>,
    /// Long-format `date,site,channel,value` CSV.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Synthetic field settings as `key = value` lines.
    #[arg(long, global = true)]
    pub synthetic_config: Option<PathBuf>,
    /// oil_only_pairs, oil_water_per_site or all_sites_oil.
    #[arg(long, global = true)]
    pub grouping: Option<String>,
    #[arg(long, global = true)]
    pub horizon: Option<usize>,
    #[arg(long, global = true)]
    pub samples: Option<usize>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Quantile reported as the fixed selection.
    #[arg(long, global = true)]
    pub quantile: Option<f64>,
    /// Run configuration file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub model: ModelKind,
    pub data: Option<PathBuf>,
    pub synthetic_config: Option<PathBuf>,
    /// `None` picks the model's default grouping.
    pub grouping: Option<Grouping>,
    pub horizon: usize,
    pub samples: usize,
    /// `None` picks the model's default budget.
    pub epochs: Option<usize>,
    /// `None` keeps the synthetic config's own seed and trains with 42.
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub quantile: f64,
    pub lr: f64,
    pub windows_per_epoch: Option<usize>,
    /// Drop rows before each group's water breakthrough.
    pub truncate: bool,
}

pub const DEFAULT_SEED: u64 = 42;

impl RunConfig {
    pub fn new(command: Command) -> Self {
        Self {
            command,
            model: ModelKind::Informer,
            data: None,
            synthetic_config: None,
            grouping: None,
            horizon: 45,
            samples: 100,
            epochs: None,
            seed: None,
            out: PathBuf::from("out"),
            checkpoint: None,
            quantile: 0.5,
            lr: 1e-4,
            windows_per_epoch: None,
            truncate: true,
        }
    }

    /// Defaults, then `flags.config` if given, then the flags themselves.
    pub fn resolve(command: Command, flags: &Flags) -> Result<Self> {
        let mut cfg = Self::new(command);
        if let Some(path) = &flags.config {
            cfg.apply_text(&fs::read_to_string(path)?)?;
        }
        cfg.apply_flags(flags)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Format { line: i + 1, msg: format!("expected key=value, got {line:?}") });
            };
            self.set(k.trim(), v.trim()).map_err(|e| Error::Format { line: i + 1, msg: e.to_string() })?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: FromStr>(key: &str, v: &str) -> Result<V> {
            v.parse().map_err(|_| Error::Validation(format!("bad value {v:?} for {key}")))
        }
        match key.replace('-', "_").as_str() {
            "model" => self.model = value.parse()?,
            "data" => self.data = Some(value.into()),
            "synthetic_config" => self.synthetic_config = Some(value.into()),
            "grouping" => self.grouping = Some(value.parse()?),
            "horizon" => self.horizon = num(key, value)?,
            "samples" => self.samples = num(key, value)?,
            "epochs" => self.epochs = Some(num(key, value)?),
            "seed" => self.seed = Some(num(key, value)?),
            "out" => self.out = value.into(),
            "checkpoint" => self.checkpoint = Some(value.into()),
            "quantile" => self.quantile = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "windows_per_epoch" => self.windows_per_epoch = Some(num(key, value)?),
            "truncate" => self.truncate = num(key, value)?,
            _ => return Err(Error::Validation(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn apply_flags(&mut self, f: &Flags) -> Result<()> {
        if let Some(v) = &f.model {
            self.model = v.parse()?;
        }
        if let Some(v) = &f.data {
            self.data = Some(v.clone());
        }
        if let Some(v) = &f.synthetic_config {
            self.synthetic_config = Some(v.clone());
        }
        if let Some(v) = &f.grouping {
            self.grouping = Some(v.parse()?);
        }
        self.horizon = f.horizon.unwrap_or(self.horizon);
        self.samples = f.samples.unwrap_or(self.samples);
        self.epochs = f.epochs.or(self.epochs);
        self.seed = f.seed.or(self.seed);
        if let Some(v) = &f.out {
            self.out = v.clone();
        }
        if let Some(v) = &f.checkpoint {
            self.checkpoint = Some(v.clone());
        }
        self.quantile = f.quantile.unwrap_or(self.quantile);
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.is_some() && self.synthetic_config.is_some() {
            return Err(Error::Validation("give either --data or --synthetic-config, not both".into()));
        }
        if self.horizon == 0 || self.samples == 0 {
            return Err(Error::Validation("horizon and samples must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.quantile) {
            return Err(Error::Validation(format!("quantile {} outside [0, 1]", self.quantile)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Validation(format!("learning rate {} must be positive", self.lr)));
        }
        if self.windows_per_epoch == Some(0) {
            return Err(Error::Validation("windows_per_epoch must be positive".into()));
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }

    pub fn epochs_for(&self, model: ModelKind) -> usize {
        self.epochs.unwrap_or(model.default_epochs())
    }

    pub fn grouping_for(&self, model: ModelKind) -> Grouping {
        self.grouping.unwrap_or(model.default_grouping())
    }

    /// The same run for another model.
    pub fn for_model(&self, model: ModelKind) -> Self {
        Self { model, ..self.clone() }
    }

    pub fn out_path(&self, name: impl AsRef<Path>) -> PathBuf {
        self.out.join(name)
    }

    /// Checkpoint read by `forecast` and resumed by `train`.
    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out_path(format!("{}.ckpt", self.model)))
    }
}
