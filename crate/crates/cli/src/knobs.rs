//! Numeric knobs shared by several subcommands, and the resolved run
//! configuration that every command logs before doing work.

use std::path::{Path, PathBuf};

use btr::reader::MergeRule;
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Knobs given as flags. Anything left unset is taken from `--config`, then
/// from the command's defaults.
#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Knobs {
    /// TOML file with knob values (flags win over it).
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Decomposition layer of a generated bench model.
    #[arg(long)]
    pub k: Option<usize>,
    /// Offline merge ratio r_o.
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Runtime merge ratio r_p.
    #[arg(long)]
    pub runtime_ratio: Option<f64>,
    /// Decoder merge period.
    #[arg(long)]
    pub g: Option<usize>,
    /// Seed of a generated bench workload.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Stopword list: one word or token id per line.
    #[arg(long)]
    pub stopwords: Option<PathBuf>,
    /// `alg2` or `every-g`.
    #[arg(long)]
    pub merge_rule: Option<MergeRule>,
    /// Keep query tokens out of intra-passage merging.
    #[arg(long, value_name = "BOOL")]
    pub protect_query: Option<bool>,
    /// Timed passes per bench configuration.
    #[arg(long)]
    pub repeats: Option<usize>,
}

impl Knobs {
    /// Fills unset knobs from the config file, if one was given.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        let Some(path) = self.config.clone() else {
            return Ok(self);
        };
        let text = read_text(&path)?;
        let file: Knobs = toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        self.k = self.k.or(file.k);
        self.ratio = self.ratio.or(file.ratio);
        self.runtime_ratio = self.runtime_ratio.or(file.runtime_ratio);
        self.g = self.g.or(file.g);
        self.seed = self.seed.or(file.seed);
        self.stopwords = self.stopwords.or(file.stopwords);
        self.merge_rule = self.merge_rule.or(file.merge_rule);
        self.protect_query = self.protect_query.or(file.protect_query);
        self.repeats = self.repeats.or(file.repeats);
        Ok(self)
    }

    /// Logs a warning for knobs the command does not read.
    pub fn warn_unused(&self, command: &str, used: &[&str]) {
        let set = [
            ("k", self.k.is_some()),
            ("ratio", self.ratio.is_some()),
            ("runtime-ratio", self.runtime_ratio.is_some()),
            ("g", self.g.is_some()),
            ("seed", self.seed.is_some()),
            ("stopwords", self.stopwords.is_some()),
            ("merge-rule", self.merge_rule.is_some()),
            ("protect-query", self.protect_query.is_some()),
            ("repeats", self.repeats.is_some()),
        ];
        for (name, given) in set {
            if given && !used.contains(&name) {
                log::warn!("{command} ignores --{name}");
            }
        }
    }
}

/// Everything a run depends on after flags, config file and defaults are merged.
#[derive(Debug, Default, Serialize)]
pub struct RunConfig {
    pub subcommand: &'static str,
    pub model: Option<PathBuf>,
    pub store: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub stopwords: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub k: Option<usize>,
    pub r_o: Option<f64>,
    pub r_p: Option<Vec<f64>>,
    pub g: Option<usize>,
    pub seed: Option<u64>,
    pub merge_rule: Option<MergeRule>,
    pub protect_query: Option<bool>,
    pub repeats: Option<usize>,
}

impl RunConfig {
    pub fn log(&self) {
        match toml::to_string(self) {
            Ok(s) => log::info!("resolved config: {}", s.trim_end().replace('\n', "; ")),
            Err(e) => log::warn!("could not serialize resolved config: {e}"),
        }
    }
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(btr::Error::Io { path: path.to_path_buf(), source: e }))
}

/// Checks a ratio knob before any work starts.
pub fn check_ratio(name: &str, r: f64) -> Result<f64, CliError> {
    if (0.0..=0.5).contains(&r) {
        Ok(r)
    } else {
        Err(CliError::Usage(format!("{name}={r} outside [0, 0.5]")))
    }
}
