//! Resolved run configuration: JSON file first, flags on top.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use sesa_core::metrics::{EffectSize, WilcoxonCells};
use sesa_core::training::MomentSource;
use sesa_core::{ImputeConfig, NotearsConfig, TrainMode};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Json,
    Csv,
}

/// Everything that influences a command's output apart from input paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed. Also the training seed; trials derive their own.
    pub seed: u64,
    pub missing_rate: f64,
    /// Columns eligible for masking; empty means all.
    pub columns: Vec<String>,
    /// `sesa`, `mean`, `median`, `knn` or `external:<path>`.
    pub method: String,
    pub trials: usize,
    pub knn_k: usize,
    pub impute: ImputeConfig,
    pub notears: NotearsConfig,
    pub effect_size: EffectSize,
    pub wilcoxon_cells: WilcoxonCells,
    pub format: ReportFormat,
    /// Write ordinal cells as level labels rather than indices.
    pub labels: bool,
    pub suggest_outcome: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            missing_rate: 0.3,
            columns: Vec::new(),
            method: "sesa".into(),
            trials: 1,
            knn_k: 5,
            impute: ImputeConfig::default(),
            notears: NotearsConfig::default(),
            effect_size: EffectSize::default(),
            wilcoxon_cells: WilcoxonCells::default(),
            format: ReportFormat::Json,
            labels: true,
            suggest_outcome: None,
        }
    }
}

impl RunConfig {
    /// Reads a config file. A run report written by this tool is accepted
    /// too: its embedded `config` object is used.
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        if value.get("tool").is_some() {
            if let Some(inner) = value.get_mut("config") {
                value = inner.take();
            }
        }
        serde_json::from_value(value).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Input(m));
        if !(0.0..1.0).contains(&self.missing_rate) {
            return bad(format!("missing rate {} outside [0, 1)", self.missing_rate));
        }
        if self.trials == 0 {
            return bad("trials must be ≥ 1".into());
        }
        if self.knn_k == 0 {
            return bad("knn k must be ≥ 1".into());
        }
        Method::parse(&self.method)?;
        self.impute.em.validate()?;
        self.impute.train.validate()?;
        self.impute.weights.validate()?;
        self.notears.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Method {
    Sesa,
    Mean,
    Median,
    Knn,
    External(PathBuf),
}

impl Method {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        Ok(match s {
            "sesa" => Method::Sesa,
            "mean" => Method::Mean,
            "median" => Method::Median,
            "knn" => Method::Knn,
            _ => match s.strip_prefix("external:") {
                Some(p) if !p.is_empty() => Method::External(PathBuf::from(p)),
                _ => {
                    return Err(CliError::Input(format!(
                        "unknown method '{s}' (expected sesa, mean, median, knn or external:<path>)"
                    )))
                }
            },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Benchmark,
    SelfSupervised,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MomentsArg {
    Sem,
    Saturated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EffectSizeArg {
    /// W / √N
    WOverRootN,
    /// |Z| / √pairs
    ZOverRootPairs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WilcoxonCellsArg {
    Evaluated,
    WholeColumn,
}

/// Flag overrides; anything left unset keeps the file (or default) value.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub missing_rate: Option<f64>,
    /// Comma-separated columns eligible for masking.
    #[arg(long, value_delimiter = ',')]
    pub columns: Option<Vec<String>>,
    /// sesa | mean | median | knn | external:<path>
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub trials: Option<usize>,
    /// Neighbours for the knn baseline.
    #[arg(long = "k")]
    pub knn_k: Option<usize>,
    #[arg(long)]
    pub em_max_iter: Option<usize>,
    #[arg(long)]
    pub em_tol: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Relative loss change that stops training.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub self_mask_rate: Option<f64>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Moments behind the initial fill.
    #[arg(long, value_enum)]
    pub moments: Option<MomentsArg>,
    #[arg(long)]
    pub dk: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub standardize_attention: Option<bool>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    /// Edge threshold for discovered graphs.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Fit NOTEARS on unit-variance columns.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub standardize: Option<bool>,
    #[arg(long)]
    pub suggest_outcome: Option<String>,
    #[arg(long, value_enum)]
    pub effect_size: Option<EffectSizeArg>,
    #[arg(long, value_enum)]
    pub wilcoxon_cells: Option<WilcoxonCellsArg>,
    #[arg(long, value_enum)]
    pub format: Option<ReportFormat>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub labels: Option<bool>,
}

macro_rules! set {
    ($src:expr => $dst:expr) => {
        if let Some(v) = $src.clone() {
            $dst = v;
        }
    };
}

impl Overrides {
    pub fn apply(&self, c: &mut RunConfig) {
        set!(self.seed => c.seed);
        set!(self.missing_rate => c.missing_rate);
        set!(self.columns => c.columns);
        set!(self.method => c.method);
        set!(self.trials => c.trials);
        set!(self.knn_k => c.knn_k);
        set!(self.em_max_iter => c.impute.em.max_iter);
        set!(self.em_tol => c.impute.em.tol);
        set!(self.alpha => c.impute.weights.alpha);
        set!(self.beta => c.impute.weights.beta);
        set!(self.gamma => c.impute.weights.gamma);
        set!(self.lr => c.impute.train.lr);
        set!(self.epochs => c.impute.train.max_epochs);
        set!(self.tol => c.impute.train.rel_tol);
        set!(self.self_mask_rate => c.impute.train.self_mask_rate);
        if let Some(m) = self.mode {
            c.impute.train.mode = match m {
                ModeArg::Benchmark => TrainMode::Benchmark,
                ModeArg::SelfSupervised => TrainMode::SelfSupervised,
            };
        }
        if let Some(m) = self.moments {
            c.impute.moments = match m {
                MomentsArg::Sem => MomentSource::SemImplied,
                MomentsArg::Saturated => MomentSource::Saturated,
            };
        }
        if self.dk.is_some() {
            c.impute.train.dk = self.dk;
        }
        set!(self.standardize_attention => c.impute.standardize_attention);
        set!(self.lambda1 => c.notears.lambda1);
        set!(self.threshold => c.notears.threshold);
        set!(self.standardize => c.notears.standardize);
        if self.suggest_outcome.is_some() {
            c.suggest_outcome = self.suggest_outcome.clone();
        }
        if let Some(e) = self.effect_size {
            c.effect_size = match e {
                EffectSizeArg::WOverRootN => EffectSize::StatisticOverRootN,
                EffectSizeArg::ZOverRootPairs => EffectSize::ZOverRootPairs,
            };
        }
        if let Some(w) = self.wilcoxon_cells {
            c.wilcoxon_cells = match w {
                WilcoxonCellsArg::Evaluated => WilcoxonCells::Evaluated,
                WilcoxonCellsArg::WholeColumn => WilcoxonCells::WholeColumn,
            };
        }
        set!(self.format => c.format);
        set!(self.labels => c.labels);
    }
}

/// File (if any), then flags, then the master seed copied into training.
pub fn resolve(file: Option<&Path>, flags: &Overrides) -> Result<RunConfig, CliError> {
    let mut cfg = match file {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    flags.apply(&mut cfg);
    cfg.impute.train.seed = cfg.seed;
    cfg.validate()?;
    Ok(cfg)
}
