//! Experiment orchestration behind the command-line tool: dataset
//! generation, training runs with checkpoints, evaluation reports and
//! memory traces.
//!
//! A run directory holds:
//!
//! ```text
//! config.txt        resolved configuration
//! metrics.csv       one row per training step
//! checkpoints/      latest/ final/ best/ and, after a divergence, diverged/
//! eval.csv eval.txt predictions.csv
//! data/             generated QA episodes (unless `data` points elsewhere)
//! ```

pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod report;

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, load_params, read_manifest, save_checkpoint, Manifest, ManifestEntry};
pub use config::{ExperimentConfig, TaskKind};
pub use metrics::{format_row, read_metrics, MetricsCsv, MetricsRecord, METRICS_HEADER};
pub use report::{best_of, predictions_csv, read_predictions, EvalReport, Prediction, TierResult};

use crate::error::{Error, Result};
use crate::parallel::map_indexed;
use crate::retention::SampleMode;
use crate::rl::{
    episode_rng, imaze_eval_set, random_maze_eval_set, train, AdamConfig, Evaluation, Experiment, MazeAgent,
    MazeExperiment, MazeTask, MetricsRow, QaAgent, QaExperiment, RunOptions, SharedParams, TrainConfig, TrainObserver,
    Update,
};
use crate::tasks::dataset::{read_episodes, read_vocab, write_episodes, write_vocab};
use crate::tasks::maze::{MazeEnv, MazeSplit, IMAZE_EVAL_LENGTHS};
use crate::tasks::{QaConfig, QaEpisode, QaGenerator, Vocab};
use crate::tensor::ParamStore;

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const EVAL_FILE: &str = "eval.jsonl";
const BEST_METRIC_FILE: &str = "eval_metric.txt";

pub fn checkpoint_dir(out: &Path, which: &str) -> PathBuf {
    out.join("checkpoints").join(which)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerateSummary {
    pub dir: PathBuf,
    pub train: usize,
    pub eval: usize,
}

fn generate_set(gen: &QaGenerator, cfg: &ExperimentConfig, seed: u64, count: usize) -> Result<Vec<QaEpisode>> {
    let variant = cfg
        .task
        .qa_variant()
        .ok_or_else(|| Error::Config(format!("{} has no episode dataset", cfg.task)))?;
    map_indexed(count, |i| {
        let mut rng = episode_rng(seed, i as u64);
        gen.generate(variant, i as u64, &mut rng)
    })
    .into_iter()
    .collect()
}

/// Writes the vocabulary plus training and evaluation episodes. Output
/// depends only on the config, so reruns produce identical files.
pub fn generate(cfg: &ExperimentConfig) -> Result<GenerateSummary> {
    cfg.validate()?;
    if cfg.dataset_seed == cfg.eval_seed {
        return Err(Error::Config("dataset_seed and eval_seed must differ".into()));
    }
    let gen = QaGenerator::new(QaConfig::default())?;
    let train = generate_set(&gen, cfg, cfg.dataset_seed, cfg.train_episodes)?;
    let eval = generate_set(&gen, cfg, cfg.eval_seed, cfg.eval_episodes)?;
    let dir = cfg.data_dir();
    fs::create_dir_all(&dir)?;
    write_vocab(&dir, gen.vocab())?;
    write_episodes(&dir.join(TRAIN_FILE), &train)?;
    write_episodes(&dir.join(EVAL_FILE), &eval)?;
    Ok(GenerateSummary {
        dir,
        train: train.len(),
        eval: eval.len(),
    })
}

/// The agent and task of one configuration.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum Task {
    Qa(QaExperiment),
    Maze(MazeExperiment),
}

impl Experiment for Task {
    fn rollout(&self, params: &ParamStore, step: u64, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Update> {
        match self {
            Self::Qa(e) => e.rollout(params, step, cfg, rng),
            Self::Maze(e) => e.rollout(params, step, cfg, rng),
        }
    }

    fn evaluate(&self, params: &ParamStore) -> Result<Evaluation> {
        match self {
            Self::Qa(e) => e.evaluate(params),
            Self::Maze(e) => e.evaluate(params),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Setup {
    /// Freshly initialised parameters.
    pub store: ParamStore,
    pub task: Task,
}

fn maze_eval_set(cfg: &ExperimentConfig, task: MazeTask) -> Result<Vec<(String, crate::tasks::maze::MazeSpec)>> {
    match task {
        MazeTask::IMaze => imaze_eval_set(&IMAZE_EVAL_LENGTHS, cfg.eval_episodes, cfg.eval_seed),
        MazeTask::SingleInd => {
            let mut set = random_maze_eval_set(MazeSplit::Test, cfg.eval_episodes, cfg.eval_seed)?;
            set.extend(random_maze_eval_set(
                MazeSplit::Large,
                cfg.eval_episodes,
                cfg.eval_seed,
            )?);
            Ok(set)
        }
    }
}

/// Builds the agent for `cfg`. QA tasks read the generated dataset; the
/// training episodes are only loaded when `with_training_data` is set.
pub fn build(cfg: &ExperimentConfig, with_training_data: bool) -> Result<Setup> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut store = ParamStore::new();
    let task = if let Some(variant) = cfg.task.qa_variant() {
        let generator = QaGenerator::new(QaConfig::default())?;
        let dir = cfg.data_dir();
        let vocab =
            read_vocab(&dir).map_err(|e| Error::Dataset(format!("{}: {e}; run generate first", dir.display())))?;
        if &vocab != generator.vocab() {
            return Err(Error::Dataset(format!(
                "{}: vocabulary does not match the generator",
                dir.display()
            )));
        }
        let eval_set = read_episodes(&dir.join(EVAL_FILE), &vocab)?;
        let train_pool = if with_training_data {
            Some(read_episodes(&dir.join(TRAIN_FILE), &vocab)?)
        } else {
            None
        };
        if eval_set
            .iter()
            .chain(train_pool.iter().flatten())
            .any(|e| e.variant != variant)
        {
            return Err(Error::Dataset(format!(
                "{}: dataset is not a {variant} dataset",
                dir.display()
            )));
        }
        let agent = QaAgent::new(
            &mut store,
            vocab.len(),
            cfg.dim,
            generator.max_sentence_len(),
            cfg.memory_size,
            cfg.policy,
            cfg.shuffle,
            &mut rng,
        )?;
        Task::Qa(QaExperiment {
            agent,
            generator,
            variant,
            train_pool,
            eval_set,
        })
    } else {
        let maze_task = cfg.task.maze_task().expect("maze task");
        let agent = MazeAgent::new(
            &mut store,
            cfg.arch,
            cfg.dim,
            cfg.memory_size,
            cfg.policy,
            cfg.shuffle,
            &mut rng,
        )?;
        Task::Maze(MazeExperiment {
            agent,
            task: maze_task,
            eval_set: maze_eval_set(cfg, maze_task)?,
        })
    };
    Ok(Setup { store, task })
}

struct RunObserver {
    csv: MetricsCsv,
    out: PathBuf,
    best: Option<Evaluation>,
    last_eval: Option<f64>,
}

impl TrainObserver for RunObserver {
    fn row(&mut self, row: &MetricsRow) -> Result<()> {
        self.csv.write(row)
    }

    fn evaluated(&mut self, _step: u64, eval: &Evaluation, params: &SharedParams) -> Result<()> {
        self.last_eval = Some(eval.metric);
        self.csv.flush()?;
        save_checkpoint(&checkpoint_dir(&self.out, "latest"), params)?;
        if self.best.as_ref().is_none_or(|b| eval.is_better_than(b)) {
            let dir = checkpoint_dir(&self.out, "best");
            save_checkpoint(&dir, params)?;
            fs::write(dir.join(BEST_METRIC_FILE), format!("{}\n", eval.metric))?;
            self.best = Some(Evaluation {
                metric: eval.metric,
                higher_is_better: eval.higher_is_better,
                outcomes: Vec::new(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub last_eval: Option<f64>,
    pub best_eval: Option<f64>,
}

/// Drops metrics rows past `step`, as left behind by an interrupted run.
fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path)?;
    let mut kept = String::with_capacity(text.len());
    for (n, line) in text.lines().enumerate() {
        let keep = n == 0
            || line
                .split(',')
                .next()
                .and_then(|s| s.parse::<u64>().ok())
                .is_some_and(|s| s <= step);
        if keep {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept)?;
    Ok(())
}

fn read_best(out: &Path, higher_is_better: bool) -> Option<Evaluation> {
    let text = fs::read_to_string(checkpoint_dir(out, "best").join(BEST_METRIC_FILE)).ok()?;
    Some(Evaluation {
        metric: text.trim().parse().ok()?,
        higher_is_better,
        outcomes: Vec::new(),
    })
}

/// Trains from scratch, or from `checkpoints/latest` when `resume` is set,
/// up to `cfg.train.total_steps`. A divergence leaves a diagnostic
/// checkpoint in `checkpoints/diverged` before the error is returned.
pub fn train_run(cfg: &ExperimentConfig, resume: bool) -> Result<TrainSummary> {
    let setup = build(cfg, true)?;
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join(CONFIG_FILE), cfg.to_text())?;
    let metrics = cfg.out.join(METRICS_FILE);
    let higher_is_better = matches!(setup.task, Task::Maze(_));
    let (mut shared, best) = if resume {
        let shared = load_checkpoint(&checkpoint_dir(&cfg.out, "latest"), setup.store, AdamConfig::default())?;
        truncate_metrics(&metrics, shared.version())?;
        (shared, read_best(&cfg.out, higher_is_better))
    } else {
        if metrics.exists() {
            fs::remove_file(&metrics)?;
        }
        (SharedParams::new(setup.store, AdamConfig::default()), None)
    };
    let mut observer = RunObserver {
        csv: MetricsCsv::open(&metrics)?,
        out: cfg.out.clone(),
        best,
        last_eval: None,
    };
    let result = train(&setup.task, &mut shared, &cfg.train, &mut observer);
    observer.csv.flush()?;
    if let Err(e) = result {
        if matches!(e, Error::Divergence { .. }) {
            save_checkpoint(&checkpoint_dir(&cfg.out, "diverged"), &shared)?;
        }
        return Err(e);
    }
    save_checkpoint(&checkpoint_dir(&cfg.out, "latest"), &shared)?;
    save_checkpoint(&checkpoint_dir(&cfg.out, "final"), &shared)?;
    Ok(TrainSummary {
        steps: shared.version(),
        last_eval: observer.last_eval,
        best_eval: observer.best.map(|b| b.metric),
    })
}

fn qa_predictions(exp: &QaExperiment, params: &ParamStore, vocab: &Vocab) -> Result<Vec<Prediction>> {
    let per_episode = map_indexed(exp.eval_set.len(), |i| exp.answer_episode(params, &exp.eval_set[i]));
    let word = |id: usize| vocab.word(id).unwrap_or("<unk>").to_string();
    let mut preds = Vec::new();
    for (i, (ep, answers)) in exp.eval_set.iter().zip(per_episode).enumerate() {
        let group = format!("noise={:.2}", ep.noise_rate);
        for (q, (predicted, expected)) in ep.questions.iter().zip(answers?) {
            preds.push(Prediction {
                episode: i,
                item: q.position,
                group: group.clone(),
                predicted: word(predicted),
                expected: word(expected),
            });
        }
    }
    Ok(preds)
}

fn maze_predictions(exp: &MazeExperiment, params: &ParamStore) -> Result<Vec<Prediction>> {
    let eval = exp.evaluate_on(params, &exp.eval_set)?;
    Ok(eval
        .outcomes
        .into_iter()
        .enumerate()
        .map(|(i, o)| Prediction {
            episode: i,
            item: 0,
            group: o.group,
            predicted: if o.success { "success" } else { "failure" }.to_string(),
            expected: "success".to_string(),
        })
        .collect())
}

/// Greedy evaluation of the checkpoint in `checkpoint` over the held-out set.
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<(EvalReport, Vec<Prediction>)> {
    let mut setup = build(cfg, false)?;
    let steps = load_params(checkpoint, &mut setup.store)?;
    let (preds, error_metric) = match &setup.task {
        Task::Qa(exp) => (qa_predictions(exp, &setup.store, exp.generator.vocab())?, true),
        Task::Maze(exp) => (maze_predictions(exp, &setup.store)?, false),
    };
    let report = EvalReport::from_predictions(
        cfg.out.display().to_string(),
        cfg.task.to_string(),
        cfg.policy.to_string(),
        cfg.train.seed,
        steps,
        error_metric,
        &preds,
    );
    Ok((report, preds))
}

/// Evaluates and writes `eval.csv`, `eval.txt` and `predictions.csv` into
/// the run directory.
pub fn eval_run(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<EvalReport> {
    let (report, preds) = evaluate_checkpoint(cfg, checkpoint)?;
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("eval.csv"), report.to_csv())?;
    fs::write(cfg.out.join("eval.txt"), report.to_table())?;
    fs::write(cfg.out.join("predictions.csv"), predictions_csv(&preds))?;
    Ok(report)
}

/// Checkpoint a finished run is judged by: best-eval when present.
pub fn preferred_checkpoint(run: &Path) -> PathBuf {
    let best = checkpoint_dir(run, "best");
    if best.join(checkpoint::MANIFEST_FILE).exists() {
        best
    } else {
        checkpoint_dir(run, "final")
    }
}

/// Evaluates each run directory with its own saved config.
pub fn eval_runs(runs: &[PathBuf]) -> Result<Vec<EvalReport>> {
    runs.iter()
        .map(|run| {
            let mut cfg = ExperimentConfig::load(&run.join(CONFIG_FILE))?;
            cfg.out = run.clone();
            eval_run(&cfg, &preferred_checkpoint(run))
        })
        .collect()
}

/// Memory trace of evaluation episode `episode`: one line per retention
/// decision and per question.
pub fn inspect(cfg: &ExperimentConfig, checkpoint: &Path, episode: usize) -> Result<Vec<String>> {
    let mut setup = build(cfg, false)?;
    load_params(checkpoint, &mut setup.store)?;
    let store = &setup.store;
    match &setup.task {
        Task::Qa(exp) => {
            let ep = exp
                .eval_set
                .get(episode)
                .ok_or_else(|| Error::Config(format!("no evaluation episode {episode}")))?;
            let opts = RunOptions {
                trace: true,
                ..RunOptions::new(cfg.policy, SampleMode::Argmax)
            };
            let mut rng = episode_rng(ep.seed, 0);
            Ok(exp
                .agent
                .run(store, ep, opts, Some(exp.generator.vocab()), &mut rng)?
                .trace)
        }
        Task::Maze(exp) => {
            let (_, spec) = exp
                .eval_set
                .get(episode)
                .ok_or_else(|| Error::Config(format!("no evaluation episode {episode}")))?;
            let opts = RunOptions {
                trace: true,
                ..RunOptions::new(cfg.policy, SampleMode::Argmax)
            };
            let mut env = MazeEnv::new(spec.clone());
            let mut rng = episode_rng(episode as u64, 0);
            Ok(exp.agent.run(store, &mut env, opts, &mut rng)?.trace)
        }
    }
}
