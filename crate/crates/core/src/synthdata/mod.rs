//! Synthetic prosody corpus with known per-class conditional laws.

mod corpus;
mod io;
mod laws;

pub use corpus::{
    draw_realization, generate_corpus, generate_heldout, normalize_utterance, reference_realizations, ContourSet,
    Corpus, ToyCorpusSpec, UtteranceRecord, Variable, POSITIONAL_FEATURES,
};
pub use io::{spec_hash, CorpusHeader, CORPUS_FORMAT};
pub use laws::{duration_from_log, ClassLaw, Component, Mixture, RawToken};
