//! Run configuration loaded from TOML.
//!
//! ```toml
//! [data]
//! train = "data/corpus.jsonl"
//! memory = "data/memory.jsonl"
//! truth = "data/truth.jsonl"      # optional, synthetic corpora only
//!
//! [output]
//! dir = "runs/desk"
//!
//! [training]
//! warmup_steps = 500
//! ```
//!
//! Relative paths resolve against the directory holding the config file.
//! Omitted keys take the full-scale defaults.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{FilterRule, Tokenizer};
use crate::error::{Error, Result};
use crate::inference::DecodeConfig;
use crate::latent::ModelConfig;
use crate::training::TrainingConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: PathBuf,
    pub memory: PathBuf,
    #[serde(default)]
    pub truth: Option<PathBuf>,
    #[serde(default)]
    pub eval: Option<PathBuf>,
    #[serde(default)]
    pub eval_truth: Option<PathBuf>,
    #[serde(default = "yes")]
    pub lowercase: bool,
    #[serde(default = "yes")]
    pub strip_punctuation: bool,
    #[serde(default = "default_min_len")]
    pub min_fragment_len: usize,
    #[serde(default = "default_max_len")]
    pub max_fragment_len: usize,
    #[serde(default = "default_min_fragments")]
    pub min_fragments: usize,
}

fn yes() -> bool {
    true
}
fn default_min_len() -> usize {
    FilterRule::default().min_len
}
fn default_max_len() -> usize {
    FilterRule::default().max_len
}
fn default_min_fragments() -> usize {
    FilterRule::default().min_fragments
}

impl DataConfig {
    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer {
            lowercase: self.lowercase,
            strip_punctuation: self.strip_punctuation,
        }
    }

    pub fn filter_rule(&self) -> FilterRule {
        FilterRule {
            min_fragments: self.min_fragments,
            min_len: self.min_fragment_len,
            max_len: self.max_fragment_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub output: OutputConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub decode: DecodeConfig,
}

impl RunConfig {
    /// Parse and validate, reporting every problem at once.
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        let problems = cfg.problems();
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve(base);
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data.train);
        fix(&mut self.data.memory);
        for p in [&mut self.data.truth, &mut self.data.eval, &mut self.data.eval_truth]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        fix(&mut self.output.dir);
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.data.min_fragment_len > self.data.max_fragment_len {
            out.push("data.min_fragment_len exceeds data.max_fragment_len".into());
        }
        if self.data.eval_truth.is_some() && self.data.eval.is_none() {
            out.push("data.eval_truth given without data.eval".into());
        }
        out.extend(self.model.problems());
        out.extend(self.training.problems());
        out.extend(self.decode.problems());
        out
    }
}
