use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// One scored prediction: a QA answer or a maze episode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prediction {
    pub episode: usize,
    /// Stream position of the question; 0 for maze episodes.
    pub item: usize,
    pub group: String,
    pub predicted: String,
    pub expected: String,
}

impl Prediction {
    pub fn correct(&self) -> bool {
        self.predicted == self.expected
    }
}

pub const PREDICTIONS_HEADER: &str = "episode,item,group,predicted,expected";

pub fn predictions_csv(preds: &[Prediction]) -> String {
    let mut s = String::from(PREDICTIONS_HEADER);
    s.push('\n');
    for p in preds {
        let _ = writeln!(s, "{},{},{},{},{}", p.episode, p.item, p.group, p.predicted, p.expected);
    }
    s
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(PREDICTIONS_HEADER) {
        return Err(Error::Dataset(format!("{} is not a predictions file", path.display())));
    }
    lines
        .enumerate()
        .map(|(n, l)| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Dataset(format!("{}: malformed line {}", path.display(), n + 2));
            if f.len() != 5 {
                return Err(bad());
            }
            Ok(Prediction {
                episode: f[0].parse().map_err(|_| bad())?,
                item: f[1].parse().map_err(|_| bad())?,
                group: f[2].to_string(),
                predicted: f[3].to_string(),
                expected: f[4].to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TierResult {
    pub group: String,
    pub metric: f64,
    pub count: usize,
}

/// Error rate (QA) or success rate (maze) over a full evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub run: String,
    pub task: String,
    pub policy: String,
    pub seed: u64,
    pub steps: u64,
    /// `"error"` or `"success"`.
    pub metric_name: String,
    pub metric: f64,
    pub count: usize,
    pub tiers: Vec<TierResult>,
}

impl EvalReport {
    /// Scores `preds`; tiers keep first-seen group order.
    pub fn from_predictions(
        run: impl Into<String>,
        task: impl Into<String>,
        policy: impl Into<String>,
        seed: u64,
        steps: u64,
        error_metric: bool,
        preds: &[Prediction],
    ) -> Self {
        let score = |ps: &[&Prediction]| {
            if ps.is_empty() {
                return 0.0;
            }
            let good = ps.iter().filter(|p| p.correct()).count() as f64 / ps.len() as f64;
            if error_metric {
                1.0 - good
            } else {
                good
            }
        };
        let mut order: Vec<&str> = Vec::new();
        for p in preds {
            if !order.contains(&p.group.as_str()) {
                order.push(&p.group);
            }
        }
        let tiers = order
            .iter()
            .map(|g| {
                let ps: Vec<&Prediction> = preds.iter().filter(|p| p.group == *g).collect();
                TierResult {
                    group: g.to_string(),
                    metric: score(&ps),
                    count: ps.len(),
                }
            })
            .collect();
        let all: Vec<&Prediction> = preds.iter().collect();
        Self {
            run: run.into(),
            task: task.into(),
            policy: policy.into(),
            seed,
            steps,
            metric_name: if error_metric { "error" } else { "success" }.to_string(),
            metric: score(&all),
            count: preds.len(),
            tiers,
        }
    }

    pub fn higher_is_better(&self) -> bool {
        self.metric_name == "success"
    }

    /// Aggregate over tiers whose group starts with `prefix`.
    pub fn tier_metric(&self, prefix: &str) -> Option<f64> {
        let (sum, n) = self
            .tiers
            .iter()
            .filter(|t| t.group.starts_with(prefix))
            .fold((0.0, 0), |(s, n), t| (s + t.metric * t.count as f64, n + t.count));
        (n > 0).then(|| sum / n as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("run,task,policy,seed,steps,group,metric,value,count\n");
        let mut line = |group: &str, value: f64, count: usize| {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                self.run, self.task, self.policy, self.seed, self.steps, group, self.metric_name, value, count
            );
        };
        line("all", self.metric, self.count);
        for t in &self.tiers {
            line(&t.group, t.metric, t.count);
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "run {}  task {}  policy {}  seed {}  steps {}",
            self.run, self.task, self.policy, self.seed, self.steps
        );
        let width = self.tiers.iter().map(|t| t.group.len()).max().unwrap_or(0).max(5);
        let _ = writeln!(s, "{:<width$}  {:>8}  {:>6}", "group", self.metric_name, "n");
        for t in &self.tiers {
            let _ = writeln!(s, "{:<width$}  {:>7.2}%  {:>6}", t.group, 100.0 * t.metric, t.count);
        }
        let _ = writeln!(s, "{:<width$}  {:>7.2}%  {:>6}", "all", 100.0 * self.metric, self.count);
        s
    }
}

/// Best run among `reports`: lowest error or highest success rate.
pub fn best_of(reports: &[EvalReport]) -> Option<&EvalReport> {
    reports.iter().reduce(|best, r| {
        let better = if r.higher_is_better() {
            r.metric > best.metric
        } else {
            r.metric < best.metric
        };
        if better {
            r
        } else {
            best
        }
    })
}
