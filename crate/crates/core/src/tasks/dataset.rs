//! JSON-lines storage for generated QA episodes plus the vocabulary file.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::qa::{QaEpisode, QaVariant, Question};
use super::vocab::Vocab;
use crate::error::{Error, Result};

pub const VOCAB_FILE: &str = "vocab.txt";

/// One line of an episode file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub variant: QaVariant,
    pub items: Vec<Vec<usize>>,
    pub question_positions: Vec<usize>,
    pub answers: Vec<usize>,
    pub supporting: Vec<[usize; 2]>,
    pub objects: Vec<usize>,
    pub noise_mask: Vec<bool>,
    pub noise_rate: f64,
    pub seed: u64,
}

impl From<&QaEpisode> for EpisodeRecord {
    fn from(e: &QaEpisode) -> Self {
        Self {
            variant: e.variant,
            items: e.items.clone(),
            question_positions: e.questions.iter().map(|q| q.position).collect(),
            answers: e.questions.iter().map(|q| q.answer).collect(),
            supporting: e.questions.iter().map(|q| q.supporting).collect(),
            objects: e.questions.iter().map(|q| q.object).collect(),
            noise_mask: e.noise_mask.clone(),
            noise_rate: e.noise_rate,
            seed: e.seed,
        }
    }
}

impl TryFrom<EpisodeRecord> for QaEpisode {
    type Error = Error;

    fn try_from(r: EpisodeRecord) -> Result<Self> {
        let n = r.question_positions.len();
        if r.answers.len() != n || r.supporting.len() != n || r.objects.len() != n {
            return Err(Error::Dataset(format!("episode {} has ragged question fields", r.seed)));
        }
        if r.noise_mask.len() != r.items.len() {
            return Err(Error::Dataset(format!("episode {} noise mask length mismatch", r.seed)));
        }
        let mut questions = Vec::with_capacity(n);
        for i in 0..n {
            let q = Question {
                position: r.question_positions[i],
                object: r.objects[i],
                answer: r.answers[i],
                supporting: r.supporting[i],
            };
            if q.position >= r.items.len() || q.supporting.iter().any(|&s| s >= q.position) {
                return Err(Error::Dataset(format!("episode {} question {i} out of range", r.seed)));
            }
            questions.push(q);
        }
        Ok(QaEpisode {
            variant: r.variant,
            items: r.items,
            questions,
            noise_mask: r.noise_mask,
            noise_rate: r.noise_rate,
            seed: r.seed,
        })
    }
}

pub fn write_episodes(path: &Path, episodes: &[QaEpisode]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for e in episodes {
        let line = serde_json::to_string(&EpisodeRecord::from(e)).map_err(|err| Error::Dataset(err.to_string()))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_episodes(path: &Path, vocab: &Vocab) -> Result<Vec<QaEpisode>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: EpisodeRecord = serde_json::from_str(&line)
            .map_err(|err| Error::Dataset(format!("{}:{}: {err}", path.display(), lineno + 1)))?;
        if let Some(&token) = record.items.iter().flatten().find(|&&t| t >= vocab.len()) {
            return Err(Error::Vocabulary {
                token,
                vocab: vocab.len(),
            });
        }
        out.push(QaEpisode::try_from(record)?);
    }
    Ok(out)
}

pub fn write_vocab(dir: &Path, vocab: &Vocab) -> Result<()> {
    fs::write(dir.join(VOCAB_FILE), vocab.to_lines())?;
    Ok(())
}

pub fn read_vocab(dir: &Path) -> Result<Vocab> {
    Vocab::from_lines(&fs::read_to_string(dir.join(VOCAB_FILE))?)
}
