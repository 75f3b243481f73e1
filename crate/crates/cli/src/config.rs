//! Config file and flag merging. Flags win over the file, the file over the
//! built-in defaults.

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::ValueEnum;
use formtree_core::{GenConfig, ScoreMode, TrainConfig};
use serde::Deserialize;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Log,
    Raw,
}

impl From<Mode> for ScoreMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Log => ScoreMode::Log,
            Mode::Raw => ScoreMode::Raw,
        }
    }
}

/// Which decoding of a prediction to emit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Route {
    /// Refinement-head parents and final types.
    #[default]
    Refined,
    /// Arborescence over the raw parent scores with first-stage types.
    ProposalOnly,
}

/// Contents of a `--config` TOML file. Each command-line flag has a key here;
/// `[gen]` and `[train]` hold the generator and training settings.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub json: bool,
    /// Worker threads for prediction and evaluation; 0 uses every core.
    pub jobs: usize,
    pub precision: Precision,
    pub score_mode: Mode,
    pub route: Route,
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub out_ckpt: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
    pub pred: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    pub scores: Option<PathBuf>,
    pub dot: Option<PathBuf>,
    pub doc: Option<String>,
    /// Documents held out from the end of the corpus for evaluation.
    pub test_docs: usize,
    pub gen: GenConfig,
    pub train: TrainConfig,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("{}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("{}: invalid config", path.display()))
    }
}

/// A required setting given neither as a flag nor in the config file.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn required<T>(flag: Option<T>, file: Option<T>, name: &str) -> anyhow::Result<T> {
    flag.or(file)
        .ok_or_else(|| Usage(format!("missing --{name} (or `{}` in the config file)", name.replace('-', "_"))).into())
}
