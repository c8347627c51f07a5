//! The log codec: line grammar, character vocabulary, batch shaping, and
//! realism metrics for arbitrary (real or generated) log text.

mod grammar;
mod realism;
mod vocab;

pub use grammar::{format_event, parse_line, render_log, EventKind, LogEvent, ParseError};
pub use realism::{realism_features, RealismReport};
pub use vocab::{
    batchify, build_vocab, decode, describe_vocab, encode, vocab_from_hex, vocab_to_hex,
    SequenceBatch, VocabError, Vocabulary,
};
