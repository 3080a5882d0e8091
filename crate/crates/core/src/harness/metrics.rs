use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rl::MetricsRow;

pub const METRICS_HEADER: &str = "step,phase,task_loss,policy_loss,value_loss,entropy,eval_metric";

/// One CSV line, without the newline. Floats use the shortest form that
/// round-trips, so equal rows always give equal bytes.
pub fn format_row(row: &MetricsRow) -> String {
    let s = &row.stats;
    let eval = row.eval_metric.map(|m| m.to_string()).unwrap_or_default();
    format!(
        "{},{},{},{},{},{},{}",
        row.step, row.phase, s.task_loss, s.policy_loss, s.value_loss, s.entropy, eval
    )
}

/// Append-only metrics file.
pub struct MetricsCsv {
    out: BufWriter<File>,
}

impl MetricsCsv {
    /// Opens `path` for appending, writing the header if the file is new or
    /// empty. An existing file must start with the expected header.
    pub fn open(path: &Path) -> Result<Self> {
        let existing = path.exists() && std::fs::metadata(path)?.len() > 0;
        if existing {
            let mut first = String::new();
            BufReader::new(File::open(path)?).read_line(&mut first)?;
            if first.trim_end() != METRICS_HEADER {
                return Err(Error::Dataset(format!("{} is not a metrics file", path.display())));
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let mut out = BufWriter::new(file);
        if !existing {
            writeln!(out, "{METRICS_HEADER}")?;
        }
        Ok(Self { out })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.out, "{}", format_row(row))?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Parsed metrics line: step, phase and the five numeric columns.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub phase: String,
    pub task_loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub eval_metric: Option<f64>,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Dataset(format!("{} is not a metrics file", path.display())));
    }
    let bad = |n: usize| Error::Dataset(format!("{}: malformed line {}", path.display(), n + 2));
    lines
        .enumerate()
        .map(|(n, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad(n));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(n));
            Ok(MetricsRecord {
                step: f[0].parse().map_err(|_| bad(n))?,
                phase: f[1].to_string(),
                task_loss: num(f[2])?,
                policy_loss: num(f[3])?,
                value_loss: num(f[4])?,
                entropy: num(f[5])?,
                eval_metric: if f[6].is_empty() { None } else { Some(num(f[6])?) },
            })
        })
        .collect()
}
