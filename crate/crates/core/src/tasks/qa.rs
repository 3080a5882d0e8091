//! Two-supporting-facts question answering episodes.
//!
//! Facts describe people moving between locations and taking or dropping
//! objects. A question "where is the O" is answered by composing who last
//! handled O with where that person was.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocab::Vocab;
use crate::error::{Error, Result};

const MOVE_VERBS: [&str; 3] = ["moved", "journeyed", "went"];
const TAKE_VERBS: [&[&str]; 3] = [&["took"], &["grabbed"], &["picked", "up"]];
const DROP_VERBS: [&str; 2] = ["dropped", "left"];
const FUNCTION_WORDS: [&str; 5] = ["to", "the", "up", "where", "is"];
const MAX_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QaVariant {
    Original,
    Noisy,
    Large,
}

impl QaVariant {
    pub const ALL: [QaVariant; 3] = [Self::Original, Self::Noisy, Self::Large];
}

impl fmt::Display for QaVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Original => "original",
            Self::Noisy => "noisy",
            Self::Large => "large",
        })
    }
}

impl FromStr for QaVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "original" => Ok(Self::Original),
            "noisy" => Ok(Self::Noisy),
            "large" => Ok(Self::Large),
            other => Err(Error::Config(format!("unknown question-answering task {other:?}"))),
        }
    }
}

/// Share of episodes generated with a given per-fact noise probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseTier {
    pub weight: f64,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QaConfig {
    pub persons: Vec<String>,
    pub noise_persons: Vec<String>,
    pub objects: Vec<String>,
    pub noise_objects: Vec<String>,
    pub locations: Vec<String>,
    pub tiers: Vec<NoiseTier>,
    pub facts: usize,
    pub question_every: usize,
    pub large_len: (usize, usize),
    pub large_questions: usize,
    /// Chance that a question asks about the object with the freshest
    /// supporting facts instead of a uniformly chosen one.
    pub recency: f64,
}

impl Default for QaConfig {
    fn default() -> Self {
        let words = |ws: &[&str]| ws.iter().map(|w| w.to_string()).collect();
        Self {
            persons: words(&["john", "mary", "sandra", "daniel"]),
            noise_persons: words(&["bill", "fred", "julie", "jeff"]),
            objects: words(&["football", "apple", "milk"]),
            noise_objects: words(&["book", "cup", "hat"]),
            locations: words(&["kitchen", "garden", "hallway", "bathroom", "bedroom", "office"]),
            tiers: vec![
                NoiseTier { weight: 0.6, rate: 0.0 },
                NoiseTier {
                    weight: 0.1,
                    rate: 0.15,
                },
                NoiseTier {
                    weight: 0.1,
                    rate: 0.30,
                },
                NoiseTier {
                    weight: 0.1,
                    rate: 0.45,
                },
                NoiseTier {
                    weight: 0.1,
                    rate: 0.60,
                },
            ],
            facts: 40,
            question_every: 8,
            large_len: (20, 80),
            large_questions: 5,
            recency: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub position: usize,
    /// Object asked about.
    pub object: usize,
    pub answer: usize,
    /// Item indices of the two facts that determine the answer, ascending.
    pub supporting: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaEpisode {
    pub variant: QaVariant,
    /// Every sentence in stream order, questions included.
    pub items: Vec<Vec<usize>>,
    pub questions: Vec<Question>,
    pub noise_mask: Vec<bool>,
    pub noise_rate: f64,
    pub seed: u64,
}

impl QaEpisode {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn question_at(&self, position: usize) -> Option<&Question> {
        self.questions.iter().find(|q| q.position == position)
    }

    pub fn is_question(&self, position: usize) -> bool {
        self.question_at(position).is_some()
    }
}

#[derive(Debug, Clone, Copy)]
enum ObjectState {
    Unseen,
    Held { by: usize, fact: usize },
    Dropped { at: Option<(usize, usize)>, fact: usize },
}

/// Incremental world model used while generating.
struct World {
    location: HashMap<usize, (usize, usize)>,
    objects: HashMap<usize, ObjectState>,
}

impl World {
    fn new() -> Self {
        Self {
            location: HashMap::new(),
            objects: HashMap::new(),
        }
    }

    fn state(&self, object: usize) -> ObjectState {
        self.objects.get(&object).copied().unwrap_or(ObjectState::Unseen)
    }

    /// `(answer, supporting)` when derivable from exactly two facts.
    fn derive(&self, object: usize) -> Option<(usize, [usize; 2])> {
        match self.state(object) {
            ObjectState::Unseen => None,
            ObjectState::Held { by, fact } => {
                let &(loc, moved) = self.location.get(&by)?;
                Some((loc, sorted(fact, moved)))
            }
            ObjectState::Dropped { at, fact } => at.map(|(loc, moved)| (loc, sorted(moved, fact))),
        }
    }
}

fn sorted(a: usize, b: usize) -> [usize; 2] {
    [a.min(b), a.max(b)]
}

/// Seeded generator over a fixed vocabulary.
#[derive(Debug, Clone)]
pub struct QaGenerator {
    config: QaConfig,
    vocab: Vocab,
    persons: Vec<usize>,
    noise_persons: Vec<usize>,
    objects: Vec<usize>,
    noise_objects: Vec<usize>,
    locations: Vec<usize>,
}

impl QaGenerator {
    pub fn new(config: QaConfig) -> Result<Self> {
        let groups = [
            &config.persons,
            &config.noise_persons,
            &config.objects,
            &config.noise_objects,
            &config.locations,
        ];
        if config.persons.len() + config.noise_persons.len() < 5
            || config.objects.len() + config.noise_objects.len() < 5
            || config.locations.len() < 6
            || config.persons.is_empty()
            || config.objects.is_empty()
        {
            return Err(Error::Config(
                "need at least 5 persons, 5 objects and 6 locations with one main person and object".into(),
            ));
        }
        let noisy = config.tiers.iter().any(|t| t.rate > 0.0 && t.weight > 0.0);
        if noisy && (config.noise_persons.is_empty() || config.noise_objects.is_empty()) {
            return Err(Error::Config("noise needs dedicated noise persons and objects".into()));
        }
        if !(0.0..=1.0).contains(&config.recency) {
            return Err(Error::Config(format!("recency {} outside [0, 1]", config.recency)));
        }
        if config.tiers.is_empty()
            || config
                .tiers
                .iter()
                .any(|t| t.weight < 0.0 || !(0.0..=1.0).contains(&t.rate))
        {
            return Err(Error::Config(
                "noise tiers need non-negative weights and rates in [0, 1]".into(),
            ));
        }
        if config.question_every == 0 || config.facts < config.question_every {
            return Err(Error::Config("need at least one question per episode".into()));
        }
        if config.large_len.0 < config.large_questions + 2 || config.large_len.0 > config.large_len.1 {
            return Err(Error::Config(format!(
                "invalid large episode length range {:?}",
                config.large_len
            )));
        }
        let mut words: Vec<String> = vec!["<nil>".into()];
        words.extend(FUNCTION_WORDS.iter().map(|w| w.to_string()));
        words.extend(MOVE_VERBS.iter().map(|w| w.to_string()));
        words.extend(TAKE_VERBS.iter().map(|w| w[0].to_string()));
        words.extend(DROP_VERBS.iter().map(|w| w.to_string()));
        for g in groups {
            words.extend(g.iter().cloned());
        }
        // Duplicates across groups (e.g. a noise person also used as a main
        // person) are rejected here, which keeps noise irrelevant.
        let vocab = Vocab::new(words)?;
        let ids = |ws: &[String]| ws.iter().map(|w| vocab.id(w)).collect::<Result<Vec<_>>>();
        Ok(Self {
            persons: ids(&config.persons)?,
            noise_persons: ids(&config.noise_persons)?,
            objects: ids(&config.objects)?,
            noise_objects: ids(&config.noise_objects)?,
            locations: ids(&config.locations)?,
            vocab,
            config,
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn config(&self) -> &QaConfig {
        &self.config
    }

    pub fn locations(&self) -> &[usize] {
        &self.locations
    }

    /// Longest sentence the generator emits.
    pub fn max_sentence_len(&self) -> usize {
        5
    }

    fn word(&self, w: &str) -> usize {
        self.vocab.id(w).expect("generator words are in the vocabulary")
    }

    fn draw_noise_rate<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let total: f64 = self.config.tiers.iter().map(|t| t.weight).sum();
        let mut x = rng.gen::<f64>() * total;
        for t in &self.config.tiers {
            if x < t.weight {
                return t.rate;
            }
            x -= t.weight;
        }
        self.config.tiers[self.config.tiers.len() - 1].rate
    }

    pub fn generate<R: Rng + ?Sized>(&self, variant: QaVariant, seed: u64, rng: &mut R) -> Result<QaEpisode> {
        let noise_rate = match variant {
            QaVariant::Original => 0.0,
            QaVariant::Noisy | QaVariant::Large => self.draw_noise_rate(rng),
        };
        for _ in 0..MAX_ATTEMPTS {
            let (len, positions) = match variant {
                QaVariant::Original | QaVariant::Noisy => {
                    let q = self.config.facts / self.config.question_every;
                    let len = self.config.facts + q;
                    let pos = (1..=q)
                        .map(|k| k * (self.config.question_every + 1) - 1)
                        .collect::<Vec<_>>();
                    (len, pos)
                }
                QaVariant::Large => {
                    let (lo, hi) = self.config.large_len;
                    let len = rng.gen_range(lo..=hi);
                    // A question needs at least two facts before it.
                    let mut pos = rand::seq::index::sample(rng, len - 2, self.config.large_questions)
                        .into_iter()
                        .map(|p| p + 2)
                        .collect::<Vec<_>>();
                    pos.sort_unstable();
                    (len, pos)
                }
            };
            if let Some(ep) = self.try_episode(variant, len, &positions, noise_rate, seed, rng) {
                return Ok(ep);
            }
        }
        Err(Error::Generation(format!(
            "no answerable {variant} episode after {MAX_ATTEMPTS} attempts"
        )))
    }

    fn try_episode<R: Rng + ?Sized>(
        &self,
        variant: QaVariant,
        len: usize,
        positions: &[usize],
        noise_rate: f64,
        seed: u64,
        rng: &mut R,
    ) -> Option<QaEpisode> {
        let mut world = World::new();
        let mut noise_world = World::new();
        let mut items = Vec::with_capacity(len);
        let mut questions = Vec::new();
        let mut noise_mask = Vec::with_capacity(len);
        for t in 0..len {
            if positions.contains(&t) {
                let answerable: Vec<usize> = self
                    .objects
                    .iter()
                    .copied()
                    .filter(|&o| world.derive(o).is_some())
                    .collect();
                let object = if rng.gen::<f64>() < self.config.recency {
                    *answerable
                        .iter()
                        .max_by_key(|&&o| world.derive(o).map(|(_, s)| (s[0], s[1])))?
                } else {
                    *answerable.choose(rng)?
                };
                let (answer, supporting) = world.derive(object)?;
                items.push(vec![self.word("where"), self.word("is"), self.word("the"), object]);
                questions.push(Question {
                    position: t,
                    object,
                    answer,
                    supporting,
                });
                noise_mask.push(false);
            } else if noise_rate > 0.0 && rng.gen::<f64>() < noise_rate {
                let s = self.fact(&mut noise_world, &self.noise_persons, &self.noise_objects, t, rng);
                items.push(s);
                noise_mask.push(true);
            } else {
                let s = self.fact(&mut world, &self.persons, &self.objects, t, rng);
                items.push(s);
                noise_mask.push(false);
            }
        }
        Some(QaEpisode {
            variant,
            items,
            questions,
            noise_mask,
            noise_rate,
            seed,
        })
    }

    fn fact<R: Rng + ?Sized>(
        &self,
        world: &mut World,
        persons: &[usize],
        objects: &[usize],
        t: usize,
        rng: &mut R,
    ) -> Vec<usize> {
        let person = *persons.choose(rng).expect("non-empty person list");
        let held: Vec<usize> = objects
            .iter()
            .copied()
            .filter(|&o| matches!(world.state(o), ObjectState::Held { by, .. } if by == person))
            .collect();
        let free: Vec<usize> = objects
            .iter()
            .copied()
            .filter(|&o| !matches!(world.state(o), ObjectState::Held { .. }))
            .collect();
        let roll = rng.gen::<f64>();
        if roll < 0.3 && !free.is_empty() {
            let object = *free.choose(rng).expect("non-empty");
            world.objects.insert(object, ObjectState::Held { by: person, fact: t });
            let verb = TAKE_VERBS.choose(rng).expect("non-empty");
            let mut s = vec![person];
            s.extend(verb.iter().map(|w| self.word(w)));
            s.extend([self.word("the"), object]);
            return s;
        }
        if roll < 0.45 && !held.is_empty() {
            let object = *held.choose(rng).expect("non-empty");
            let at = world.location.get(&person).copied();
            world.objects.insert(object, ObjectState::Dropped { at, fact: t });
            let verb = DROP_VERBS.choose(rng).expect("non-empty");
            return vec![person, self.word(verb), self.word("the"), object];
        }
        let current = world.location.get(&person).map(|&(l, _)| l);
        let options: Vec<usize> = self.locations.iter().copied().filter(|&l| Some(l) != current).collect();
        let loc = *options.choose(rng).expect("at least two locations");
        world.location.insert(person, (loc, t));
        let verb = MOVE_VERBS.choose(rng).expect("non-empty");
        vec![person, self.word(verb), self.word("to"), self.word("the"), loc]
    }
}

/// Answers questions by replaying sentences word by word.
///
/// Independent of the generator's bookkeeping: it only understands the
/// surface templates.
#[derive(Debug, Clone)]
pub struct WorldSimulator<'v> {
    vocab: &'v Vocab,
    location: HashMap<usize, usize>,
    holder: HashMap<usize, usize>,
    placed: HashMap<usize, Option<usize>>,
}

impl<'v> WorldSimulator<'v> {
    pub fn new(vocab: &'v Vocab) -> Self {
        Self {
            vocab,
            location: HashMap::new(),
            holder: HashMap::new(),
            placed: HashMap::new(),
        }
    }

    fn words<'a>(&'a self, s: &[usize]) -> Vec<&'a str> {
        s.iter().map(|&t| self.vocab.word(t).unwrap_or("<unk>")).collect()
    }

    /// Applies one sentence; questions and unknown shapes are ignored.
    pub fn apply(&mut self, sentence: &[usize]) {
        let w = self.words(sentence);
        match w.as_slice() {
            [_, "moved" | "journeyed" | "went", "to", "the", _] => {
                self.location.insert(sentence[0], sentence[4]);
            }
            [_, "took" | "grabbed", "the", _] => self.take(sentence[0], sentence[3]),
            [_, "picked", "up", "the", _] => self.take(sentence[0], sentence[4]),
            [_, "dropped" | "left", "the", _] => {
                let (person, object) = (sentence[0], sentence[3]);
                self.holder.remove(&object);
                self.placed.insert(object, self.location.get(&person).copied());
            }
            _ => {}
        }
    }

    fn take(&mut self, person: usize, object: usize) {
        self.holder.insert(object, person);
        self.placed.remove(&object);
    }

    pub fn where_is(&self, object: usize) -> Option<usize> {
        match self.holder.get(&object) {
            Some(p) => self.location.get(p).copied(),
            None => self.placed.get(&object).copied().flatten(),
        }
    }

    /// Answer to the question at `position` using only the sentences whose
    /// index satisfies `keep`.
    pub fn answer_with<F: Fn(usize) -> bool>(
        vocab: &Vocab,
        episode: &QaEpisode,
        q: &Question,
        keep: F,
    ) -> Option<usize> {
        let mut sim = WorldSimulator::new(vocab);
        for (i, s) in episode.items[..q.position].iter().enumerate() {
            if keep(i) {
                sim.apply(s);
            }
        }
        sim.where_is(q.object)
    }
}
