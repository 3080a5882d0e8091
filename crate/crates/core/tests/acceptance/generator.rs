//! Generated question-answering episodes against a string-level world
//! simulator written from the sentence templates alone.

use std::collections::HashMap;

use lemn::rl::episode_rng;
use lemn::tasks::{QaConfig, QaEpisode, QaGenerator, QaVariant, Vocab, WorldSimulator};

#[derive(Default)]
struct World {
    at: HashMap<String, String>,
    holder: HashMap<String, String>,
    dropped: HashMap<String, Option<String>>,
}

impl World {
    fn apply(&mut self, sentence: &str) -> bool {
        let w: Vec<&str> = sentence.split(' ').collect();
        match w.as_slice() {
            [p, "moved" | "journeyed" | "went", "to", "the", l] => {
                self.at.insert(p.to_string(), l.to_string());
            }
            [p, "took" | "grabbed", "the", o] | [p, "picked", "up", "the", o] => {
                self.holder.insert(o.to_string(), p.to_string());
                self.dropped.remove(*o);
            }
            [p, "dropped" | "left", "the", o] => {
                self.holder.remove(*o);
                self.dropped.insert(o.to_string(), self.at.get(*p).cloned());
            }
            _ => return false,
        }
        true
    }

    fn where_is(&self, object: &str) -> Option<String> {
        match self.holder.get(object) {
            Some(p) => self.at.get(p).cloned(),
            None => self.dropped.get(object).cloned().flatten(),
        }
    }
}

fn replay(vocab: &Vocab, ep: &QaEpisode, upto: usize, keep: impl Fn(usize) -> bool) -> World {
    let mut world = World::default();
    for (i, item) in ep.items[..upto].iter().enumerate() {
        if keep(i) && !ep.is_question(i) {
            let parsed = world.apply(&vocab.decode(item));
            assert!(parsed, "unparseable fact {:?}", vocab.decode(item));
        }
    }
    world
}

#[derive(Debug, Default)]
pub struct Tally {
    pub episodes: usize,
    pub questions: usize,
    pub disagreements: usize,
    pub insufficient: usize,
    pub noise_sensitive: usize,
    pub malformed: usize,
}

impl Tally {
    pub fn clean(&self) -> bool {
        self.disagreements + self.insufficient + self.noise_sensitive + self.malformed == 0 && self.questions > 0
    }
}

pub fn check_variant(variant: QaVariant, episodes: u64) -> Tally {
    let config = QaConfig::default();
    let gen = QaGenerator::new(config.clone()).unwrap();
    let vocab = gen.vocab();
    let noise_words: Vec<&str> = config
        .noise_persons
        .iter()
        .chain(&config.noise_objects)
        .map(|s| s.as_str())
        .collect();
    let mut tally = Tally::default();
    for i in 0..episodes {
        let ep = gen.generate(variant, i, &mut episode_rng(77, i)).unwrap();
        tally.episodes += 1;
        let shape_ok = match variant {
            QaVariant::Original | QaVariant::Noisy => {
                ep.len() == config.facts + config.facts / config.question_every
                    && ep.questions.len() == config.facts / config.question_every
            }
            QaVariant::Large => {
                (config.large_len.0..=config.large_len.1).contains(&ep.len())
                    && ep.questions.len() == config.large_questions
            }
        };
        let noise_ok = ep.noise_mask.len() == ep.len()
            && (variant != QaVariant::Original || !ep.noise_mask.iter().any(|&m| m))
            && ep.items.iter().zip(&ep.noise_mask).all(|(item, &noisy)| {
                let text = vocab.decode(item);
                let mentions_noise = text.split(' ').any(|w| noise_words.contains(&w));
                noisy == mentions_noise
            });
        if !shape_ok || !noise_ok {
            tally.malformed += 1;
        }
        for q in &ep.questions {
            tally.questions += 1;
            let text = vocab.decode(&ep.items[q.position]);
            let object = vocab.word(q.object).unwrap().to_string();
            let answer = vocab.word(q.answer).map(str::to_string);
            if text != format!("where is the {object}")
                || q.supporting
                    .iter()
                    .any(|&s| s >= q.position || ep.noise_mask[s] || ep.is_question(s))
            {
                tally.malformed += 1;
            }
            let full = replay(vocab, &ep, q.position, |_| true).where_is(&object);
            let library =
                WorldSimulator::answer_with(vocab, &ep, q, |_| true).and_then(|a| vocab.word(a).map(str::to_string));
            if full != answer || library != answer {
                tally.disagreements += 1;
            }
            let two = replay(vocab, &ep, q.position, |i| q.supporting.contains(&i)).where_is(&object);
            if two != answer {
                tally.insufficient += 1;
            }
            let clean = replay(vocab, &ep, q.position, |i| !ep.noise_mask[i]).where_is(&object);
            if clean != answer {
                tally.noise_sensitive += 1;
            }
        }
    }
    tally
}
