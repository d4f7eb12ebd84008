//! Synthetic multilingual corpus, its on-disk format and duration-based cleaning.

pub mod clean;
pub mod corpus;
pub mod language;

pub use clean::{clean_corpus, outlier_filter, outlier_keep, subset_per_language, CleanConfig, CleanReport};
pub use corpus::{generate_toy_corpus, Corpus, CorpusConfig, ManifestEntry, Split, Utterance};
pub use language::{PhonemeBank, ToyLanguage};
