pub mod dataset;
pub mod maze;
pub mod qa;
pub mod vocab;

pub use qa::{QaConfig, QaEpisode, QaGenerator, QaVariant, Question, WorldSimulator};
pub use vocab::Vocab;
