//! Reduced-schedule training runs driven through the experiment harness.

use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::sync::{Mutex, OnceLock};

use lemn::basenets::MazeArch;
use lemn::harness::{
    evaluate_checkpoint, generate, preferred_checkpoint, train_run, EvalReport, ExperimentConfig, TaskKind,
};
use lemn::retention::PolicyKind;

/// 5k FIFO pretraining steps followed by 30k joint steps.
pub const QA_PRETRAIN: u64 = 5_000;
pub const QA_TOTAL: u64 = 35_000;
pub const QA_SEEDS: [u64; 3] = [1, 2, 3];
pub const QA_DIM: usize = 20;
const QA_EVAL_EPISODES: usize = 500;

pub const MAZE_SEEDS: [u64; 2] = [1, 2];

fn root() -> &'static PathBuf {
    static ROOT: OnceLock<PathBuf> = OnceLock::new();
    ROOT.get_or_init(|| {
        let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    })
}

fn cache() -> &'static Mutex<HashMap<String, EvalReport>> {
    static CACHE: OnceLock<Mutex<HashMap<String, EvalReport>>> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

pub fn scratch(name: &str) -> PathBuf {
    let dir = root().join(name);
    let _ = fs::remove_dir_all(&dir);
    dir
}

fn qa_data(task: TaskKind) -> PathBuf {
    let dir = root().join("data").join(task.to_string());
    if !dir.join("eval.jsonl").exists() {
        let mut cfg = ExperimentConfig {
            task,
            eval_episodes: QA_EVAL_EPISODES,
            ..ExperimentConfig::default()
        };
        cfg.data = Some(dir.clone());
        generate(&cfg).unwrap();
    }
    dir
}

#[derive(Debug, Clone, Copy)]
pub struct QaRun {
    pub task: TaskKind,
    pub policy: PolicyKind,
    pub shuffle: bool,
    pub memory: usize,
    pub seed: u64,
}

impl QaRun {
    fn name(&self) -> String {
        let shuffle = if self.shuffle { "-shuffled" } else { "" };
        format!("{}-{}{shuffle}-m{}-s{}", self.task, self.policy, self.memory, self.seed)
    }

    pub fn config(&self) -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            task: self.task,
            policy: self.policy,
            shuffle: self.shuffle,
            memory_size: self.memory,
            dim: QA_DIM,
            eval_episodes: QA_EVAL_EPISODES,
            out: root().join("runs").join(self.name()),
            data: Some(qa_data(self.task)),
            ..ExperimentConfig::default()
        };
        cfg.train.seed = self.seed;
        cfg.train.total_steps = QA_TOTAL;
        cfg.train.pretrain_steps = QA_PRETRAIN;
        cfg.train.linear_start_steps = QA_PRETRAIN;
        cfg.train.eval_every = QA_TOTAL / 10;
        cfg.train.workers = 4;
        cfg.train.lr = 0.002;
        cfg
    }
}

fn cached(key: String, run: impl FnOnce() -> EvalReport) -> EvalReport {
    if let Some(r) = cache().lock().unwrap().get(&key) {
        return r.clone();
    }
    let report = run();
    cache().lock().unwrap().insert(key, report.clone());
    report
}

/// Trains one configuration and evaluates its best checkpoint.
pub fn qa_report(run: QaRun) -> EvalReport {
    cached(run.name(), || {
        let cfg = run.config();
        train_run(&cfg, false).unwrap();
        evaluate_checkpoint(&cfg, &preferred_checkpoint(&cfg.out)).unwrap().0
    })
}

/// Lowest error over the seeds, plus the per-seed errors.
pub fn qa_best(task: TaskKind, policy: PolicyKind, shuffle: bool, memory: usize) -> (f64, Vec<f64>) {
    let errors: Vec<f64> = QA_SEEDS
        .iter()
        .map(|&seed| {
            qa_report(QaRun {
                task,
                policy,
                shuffle,
                memory,
                seed,
            })
            .metric
        })
        .collect();
    (errors.iter().cloned().fold(f64::INFINITY, f64::min), errors)
}

#[derive(Debug, Clone, Copy)]
pub struct MazeRun {
    pub task: TaskKind,
    pub policy: PolicyKind,
    pub memory: usize,
    pub seed: u64,
    pub total: u64,
    pub pretrain: u64,
    pub dim: usize,
    /// Episodes per evaluation group while training (checkpoint selection).
    pub select_episodes: usize,
    /// Episodes per evaluation group in the final report.
    pub report_episodes: usize,
}

impl MazeRun {
    fn name(&self) -> String {
        format!("{}-{}-m{}-s{}", self.task, self.policy, self.memory, self.seed)
    }

    pub fn config(&self) -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            task: self.task,
            policy: self.policy,
            memory_size: self.memory,
            dim: self.dim,
            arch: MazeArch::Mqn,
            eval_episodes: self.select_episodes,
            eval_seed: 2,
            out: root().join("runs").join(self.name()),
            ..ExperimentConfig::default()
        };
        cfg.train.seed = self.seed;
        cfg.train.total_steps = self.total;
        cfg.train.pretrain_steps = self.pretrain;
        cfg.train.eval_every = self.total / 10;
        cfg.train.workers = 4;
        cfg.train.lr = 0.002;
        cfg
    }
}

/// Trains on the training distribution, then evaluates the best checkpoint
/// on a fresh, larger evaluation set.
pub fn maze_report(run: MazeRun) -> EvalReport {
    cached(run.name(), || {
        let cfg = run.config();
        train_run(&cfg, false).unwrap();
        let report_cfg = ExperimentConfig {
            eval_episodes: run.report_episodes,
            eval_seed: 3,
            ..cfg.clone()
        };
        evaluate_checkpoint(&report_cfg, &preferred_checkpoint(&cfg.out))
            .unwrap()
            .0
    })
}
