//! Corpus files, tokenisation, vocabularies, example encoding and the
//! dialogue–caption dataset builder.

pub mod corpus;
pub mod dataset;
pub mod example;
pub mod tokenize;
pub mod vocab;

pub use corpus::{read_corpus, write_corpus, CorpusRecord, Speaker, Utterance};
pub use example::{encode_example, DialogueItem, EncodeLimits, EncodedExample, SourceToken, Turn};
pub use tokenize::tokenize;
pub use vocab::{ExtendedVocabulary, Vocabulary, BOS, EOS, PAD, UNK};
