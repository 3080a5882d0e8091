//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key may also be
//! given on the command line; flag names use dashes where keys use
//! underscores (`--memory-size` sets `memory_size`).

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::basenets::MazeArch;
use crate::error::{Error, Result};
use crate::retention::PolicyKind;
use crate::rl::{MazeTask, TrainConfig};
use crate::tasks::maze::MazeSplit;
use crate::tasks::QaVariant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Original,
    Noisy,
    Large,
    IMaze,
    SingleInd,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [Self::Original, Self::Noisy, Self::Large, Self::IMaze, Self::SingleInd];

    pub fn qa_variant(self) -> Option<QaVariant> {
        match self {
            Self::Original => Some(QaVariant::Original),
            Self::Noisy => Some(QaVariant::Noisy),
            Self::Large => Some(QaVariant::Large),
            Self::IMaze | Self::SingleInd => None,
        }
    }

    pub fn maze_task(self) -> Option<MazeTask> {
        match self {
            Self::IMaze => Some(MazeTask::IMaze),
            Self::SingleInd => Some(MazeTask::SingleInd),
            _ => None,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Original => "original",
            Self::Noisy => "noisy",
            Self::Large => "large",
            Self::IMaze => "imaze",
            Self::SingleInd => "singind",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "original" => Ok(Self::Original),
            "noisy" => Ok(Self::Noisy),
            "large" => Ok(Self::Large),
            "imaze" | "i-maze" => Ok(Self::IMaze),
            "singind" | "singleind" => Ok(Self::SingleInd),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

/// Everything needed to build, train and evaluate one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub policy: PolicyKind,
    pub shuffle: bool,
    pub memory_size: usize,
    pub dim: usize,
    pub arch: MazeArch,
    pub train: TrainConfig,
    /// Seed of the generated training data.
    pub dataset_seed: u64,
    /// Seed of the held-out evaluation set.
    pub eval_seed: u64,
    /// QA training episodes written by `generate`.
    pub train_episodes: usize,
    /// QA evaluation episodes, or maze episodes per length/split.
    pub eval_episodes: usize,
    pub out: PathBuf,
    /// Dataset directory; `<out>/data` when unset.
    pub data: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Noisy,
            policy: PolicyKind::St,
            shuffle: false,
            memory_size: 5,
            dim: 20,
            arch: MazeArch::Mqn,
            train: TrainConfig::default(),
            dataset_seed: 1,
            eval_seed: 2,
            train_episodes: 10_000,
            eval_episodes: 1_000,
            out: PathBuf::from("runs/default"),
            data: None,
        }
    }
}

/// Keys accepted in config files and as `--set key=value`.
pub const KEYS: [&str; 24] = [
    "task",
    "policy",
    "shuffle",
    "memory_size",
    "dim",
    "arch",
    "seed",
    "steps",
    "pretrain_steps",
    "linear_start_steps",
    "workers",
    "lr",
    "gamma",
    "lambda",
    "entropy_coef",
    "value_coef",
    "max_grad_norm",
    "eval_every",
    "dataset_seed",
    "eval_seed",
    "train_episodes",
    "eval_episodes",
    "out",
    "data",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid value {value:?} for {key}"))),
    }
}

impl ExperimentConfig {
    pub fn data_dir(&self) -> PathBuf {
        self.data.clone().unwrap_or_else(|| self.out.join("data"))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        let t = &mut self.train;
        match key.as_str() {
            "task" => self.task = value.parse()?,
            "policy" => self.policy = value.parse()?,
            "shuffle" => self.shuffle = parse_bool(&key, value)?,
            "memory_size" => self.memory_size = parse(&key, value)?,
            "dim" => self.dim = parse(&key, value)?,
            "arch" => self.arch = value.parse()?,
            "seed" => t.seed = parse(&key, value)?,
            "steps" => t.total_steps = parse(&key, value)?,
            "pretrain_steps" => t.pretrain_steps = parse(&key, value)?,
            "linear_start_steps" => t.linear_start_steps = parse(&key, value)?,
            "workers" => t.workers = parse(&key, value)?,
            "lr" => t.lr = parse(&key, value)?,
            "gamma" => t.gamma = parse(&key, value)?,
            "lambda" => t.lambda = parse(&key, value)?,
            "entropy_coef" => t.entropy_coef = parse(&key, value)?,
            "value_coef" => t.value_coef = parse(&key, value)?,
            "max_grad_norm" => t.max_grad_norm = parse(&key, value)?,
            "eval_every" => t.eval_every = parse(&key, value)?,
            "dataset_seed" => self.dataset_seed = parse(&key, value)?,
            "eval_seed" => self.eval_seed = parse(&key, value)?,
            "train_episodes" => self.train_episodes = parse(&key, value)?,
            "eval_episodes" => self.eval_episodes = parse(&key, value)?,
            "out" => self.out = PathBuf::from(value),
            "data" => self.data = (!value.is_empty()).then(|| PathBuf::from(value)),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.memory_size == 0 {
            return Err(Error::Config("memory size must be positive".into()));
        }
        if self.dim == 0 {
            return Err(Error::Config("model dimension must be positive".into()));
        }
        if self.eval_episodes == 0 {
            return Err(Error::Config("need at least one evaluation episode".into()));
        }
        if self.task.qa_variant().is_some() && self.train_episodes == 0 {
            return Err(Error::Config("need at least one training episode".into()));
        }
        Ok(())
    }

    /// Canonical text form; `from_text(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("task", self.task.to_string());
        kv("policy", self.policy.to_string());
        kv("shuffle", self.shuffle.to_string());
        kv("memory_size", self.memory_size.to_string());
        kv("dim", self.dim.to_string());
        kv("arch", self.arch.to_string());
        kv("seed", t.seed.to_string());
        kv("steps", t.total_steps.to_string());
        kv("pretrain_steps", t.pretrain_steps.to_string());
        kv("linear_start_steps", t.linear_start_steps.to_string());
        kv("workers", t.workers.to_string());
        kv("lr", t.lr.to_string());
        kv("gamma", t.gamma.to_string());
        kv("lambda", t.lambda.to_string());
        kv("entropy_coef", t.entropy_coef.to_string());
        kv("value_coef", t.value_coef.to_string());
        kv("max_grad_norm", t.max_grad_norm.to_string());
        kv("eval_every", t.eval_every.to_string());
        kv("dataset_seed", self.dataset_seed.to_string());
        kv("eval_seed", self.eval_seed.to_string());
        kv("train_episodes", self.train_episodes.to_string());
        kv("eval_episodes", self.eval_episodes.to_string());
        kv("out", self.out.display().to_string());
        if let Some(d) = &self.data {
            kv("data", d.display().to_string());
        }
        s
    }
}

/// Which split a maze evaluation group belongs to.
pub fn maze_split_of(group: &str) -> Option<MazeSplit> {
    group.split(':').next()?.parse().ok()
}
