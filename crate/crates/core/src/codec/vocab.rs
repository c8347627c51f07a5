//! Character-level vocabulary over a log corpus, plus integer encoding and
//! the batch shaping used for next-character training: the encoded corpus is
//! cut into non-overlapping windows of `seq_length + 1` tokens, and each
//! window yields an input row and a target row shifted by one character.

use crate::config::KvWriter;
use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VocabError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("character {character:?} at byte {offset} is not in the vocabulary")]
    UnknownCharacter { character: char, offset: usize },
    #[error("index {index} is out of range for a vocabulary of {size} entries")]
    IndexOutOfRange { index: u32, size: usize },
    #[error("{name} must be nonzero")]
    ZeroDimension { name: &'static str },
    #[error("corpus of {got} tokens is too small; need at least {needed}")]
    CorpusTooSmall { needed: usize, got: usize },
    #[error("vocabulary characters must be distinct and sorted by code point")]
    Unsorted,
    #[error("a lowercase-folded vocabulary cannot contain {0:?}")]
    FoldedUppercase(char),
}

/// Distinct corpus characters, sorted by code point and indexed from zero.
/// With `lowercase_folded` set, ASCII uppercase is folded away before any
/// lookup, shrinking the log alphabet by the four event keywords' initials.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    chars: Vec<char>,
    lowercase_folded: bool,
}

impl Vocabulary {
    /// Rebuilds a vocabulary from an explicit character list (as stored in a
    /// checkpoint manifest), enforcing the same invariants `build_vocab`
    /// guarantees.
    pub fn from_chars(chars: Vec<char>, lowercase_folded: bool) -> Result<Self, VocabError> {
        if chars.is_empty() {
            return Err(VocabError::EmptyCorpus);
        }
        if !chars.windows(2).all(|pair| pair[0] < pair[1]) {
            return Err(VocabError::Unsorted);
        }
        if lowercase_folded {
            if let Some(&upper) = chars.iter().find(|c| c.is_ascii_uppercase()) {
                return Err(VocabError::FoldedUppercase(upper));
            }
        }
        Ok(Vocabulary {
            chars,
            lowercase_folded,
        })
    }

    pub fn size(&self) -> usize {
        self.chars.len()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn lowercase_folded(&self) -> bool {
        self.lowercase_folded
    }

    pub fn fold_char(&self, ch: char) -> char {
        if self.lowercase_folded {
            ch.to_ascii_lowercase()
        } else {
            ch
        }
    }

    /// Index of a character after folding, if present.
    pub fn index_of(&self, ch: char) -> Option<u32> {
        let folded = self.fold_char(ch);
        self.chars.binary_search(&folded).ok().map(|i| i as u32)
    }

    pub fn char_at(&self, index: u32) -> Result<char, VocabError> {
        self.chars
            .get(index as usize)
            .copied()
            .ok_or(VocabError::IndexOutOfRange {
                index,
                size: self.chars.len(),
            })
    }

    /// Stable 64-bit digest of the character list and fold flag (FNV-1a);
    /// lets a checkpoint refuse to load under a different vocabulary.
    pub fn fingerprint(&self) -> u64 {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        fn eat(hash: u64, byte: u8) -> u64 {
            (hash ^ u64::from(byte)).wrapping_mul(0x0000_0100_0000_01b3)
        }
        let mut hash = OFFSET;
        for &ch in &self.chars {
            for byte in (ch as u32).to_le_bytes() {
                hash = eat(hash, byte);
            }
        }
        eat(hash, u8::from(self.lowercase_folded))
    }
}

impl fmt::Display for Vocabulary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} characters ({})",
            self.chars.len(),
            if self.lowercase_folded {
                "folded"
            } else {
                "unfolded"
            }
        )
    }
}

/// Collects the distinct characters of `corpus` (folded first when asked),
/// sorted by code point.
pub fn build_vocab(corpus: &str, fold_lowercase: bool) -> Result<Vocabulary, VocabError> {
    if corpus.is_empty() {
        return Err(VocabError::EmptyCorpus);
    }
    let mut chars: Vec<char> = corpus
        .chars()
        .map(|ch| {
            if fold_lowercase {
                ch.to_ascii_lowercase()
            } else {
                ch
            }
        })
        .collect();
    chars.sort_unstable();
    chars.dedup();
    Ok(Vocabulary {
        chars,
        lowercase_folded: fold_lowercase,
    })
}

/// Maps text to vocabulary indices; fails on the first character the
/// vocabulary does not contain.
pub fn encode(text: &str, vocab: &Vocabulary) -> Result<Vec<u32>, VocabError> {
    let mut out = Vec::with_capacity(text.len());
    for (offset, ch) in text.char_indices() {
        match vocab.index_of(ch) {
            Some(index) => out.push(index),
            None => {
                return Err(VocabError::UnknownCharacter {
                    character: ch,
                    offset,
                })
            }
        }
    }
    Ok(out)
}

/// Maps indices back to text; `decode(encode(s))` equals `s` after folding.
pub fn decode(indices: &[u32], vocab: &Vocabulary) -> Result<String, VocabError> {
    let mut out = String::with_capacity(indices.len());
    for &index in indices {
        out.push(vocab.char_at(index)?);
    }
    Ok(out)
}

/// Rectangular integer batch of shape `[batch_size][seq_length]`, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceBatch {
    batch_size: usize,
    seq_length: usize,
    data: Vec<u32>,
}

impl SequenceBatch {
    pub fn new(batch_size: usize, seq_length: usize, data: Vec<u32>) -> Result<Self, VocabError> {
        if batch_size == 0 {
            return Err(VocabError::ZeroDimension { name: "batch_size" });
        }
        if seq_length == 0 {
            return Err(VocabError::ZeroDimension { name: "seq_length" });
        }
        if data.len() != batch_size * seq_length {
            return Err(VocabError::CorpusTooSmall {
                needed: batch_size * seq_length,
                got: data.len(),
            });
        }
        Ok(SequenceBatch {
            batch_size,
            seq_length,
            data,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn seq_length(&self) -> usize {
        self.seq_length
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn row(&self, row: usize) -> &[u32] {
        &self.data[row * self.seq_length..(row + 1) * self.seq_length]
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.data[row * self.seq_length + col]
    }

    /// The tokens at time step `col` across the batch.
    pub fn column(&self, col: usize) -> Vec<u32> {
        (0..self.batch_size).map(|row| self.get(row, col)).collect()
    }
}

/// Cuts the encoded corpus into consecutive non-overlapping windows of
/// `seq_length + 1` tokens and groups them into `(input, target)` batch
/// pairs, the target shifted one character ahead. The tail that does not
/// fill a whole batch is dropped.
pub fn batchify(
    encoded: &[u32],
    seq_length: usize,
    batch_size: usize,
) -> Result<Vec<(SequenceBatch, SequenceBatch)>, VocabError> {
    if seq_length == 0 {
        return Err(VocabError::ZeroDimension { name: "seq_length" });
    }
    if batch_size == 0 {
        return Err(VocabError::ZeroDimension { name: "batch_size" });
    }
    let window = seq_length + 1;
    let needed = batch_size * window;
    if encoded.len() < needed {
        return Err(VocabError::CorpusTooSmall {
            needed,
            got: encoded.len(),
        });
    }
    let batches = encoded.len() / window / batch_size;
    let mut out = Vec::with_capacity(batches);
    for batch in 0..batches {
        let mut input = Vec::with_capacity(batch_size * seq_length);
        let mut target = Vec::with_capacity(batch_size * seq_length);
        for row in 0..batch_size {
            let start = (batch * batch_size + row) * window;
            input.extend_from_slice(&encoded[start..start + seq_length]);
            target.extend_from_slice(&encoded[start + 1..start + window]);
        }
        out.push((
            SequenceBatch {
                batch_size,
                seq_length,
                data: input,
            },
            SequenceBatch {
                batch_size,
                seq_length,
                data: target,
            },
        ));
    }
    Ok(out)
}

/// Renders the character list as lowercase hex code points, comma-separated;
/// the manifest-friendly inverse of [`vocab_from_hex`].
pub fn vocab_to_hex(vocab: &Vocabulary) -> String {
    let mut out = String::new();
    for (i, &ch) in vocab.chars().iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&format!("{:x}", ch as u32));
    }
    out
}

pub fn vocab_from_hex(text: &str, lowercase_folded: bool) -> Result<Vocabulary, VocabError> {
    let mut chars = Vec::new();
    for item in text.split(',') {
        let code = u32::from_str_radix(item.trim(), 16).map_err(|_| VocabError::Unsorted)?;
        let ch = char::from_u32(code).ok_or(VocabError::Unsorted)?;
        chars.push(ch);
    }
    Vocabulary::from_chars(chars, lowercase_folded)
}

/// Writes the vocabulary identity fields into a manifest.
pub fn describe_vocab(vocab: &Vocabulary, out: &mut KvWriter) {
    out.push("vocab_chars", vocab_to_hex(vocab));
    out.push("vocab_folded", vocab.lowercase_folded());
    out.push("vocab_fingerprint", format!("{:016x}", vocab.fingerprint()));
    out.push("vocab_size", vocab.size());
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{format_event, EventKind, LogEvent};
    use crate::sim::CarId;

    #[test]
    fn tiny_corpus_sorts_distinct_characters() {
        let vocab = build_vocab("aab\n", false).unwrap();
        assert_eq!(vocab.chars(), ['\n', 'a', 'b']);
        assert_eq!(vocab.size(), 3);
        assert_eq!(encode("ba", &vocab).unwrap(), vec![2, 1]);
        assert_eq!(decode(&[2, 1], &vocab).unwrap(), "ba");
    }

    #[test]
    fn empty_corpus_is_an_error_but_empty_text_encodes() {
        assert_eq!(build_vocab("", true).unwrap_err(), VocabError::EmptyCorpus);
        let vocab = build_vocab("x", false).unwrap();
        assert_eq!(encode("", &vocab).unwrap(), Vec::<u32>::new());
        assert_eq!(decode(&[], &vocab).unwrap(), "");
    }

    #[test]
    fn folding_merges_cases_and_roundtrips_to_folded_text() {
        let vocab = build_vocab("Aa", true).unwrap();
        assert_eq!(vocab.chars(), ['a']);
        let codes = encode("AaA", &vocab).unwrap();
        assert_eq!(decode(&codes, &vocab).unwrap(), "aaa");

        let unfolded = build_vocab("Aa", false).unwrap();
        assert_eq!(unfolded.size(), 2);
        let codes = encode("Aa", &unfolded).unwrap();
        assert_eq!(decode(&codes, &unfolded).unwrap(), "Aa");
    }

    #[test]
    fn unknown_character_reports_its_offset() {
        let vocab = build_vocab("ab", false).unwrap();
        let err = encode("abz", &vocab).unwrap_err();
        assert_eq!(
            err,
            VocabError::UnknownCharacter {
                character: 'z',
                offset: 2
            }
        );
        assert!(decode(&[9], &vocab).is_err());
    }

    /// One line of each kind with every digit somewhere: covers the whole
    /// log alphabet by construction.
    fn full_alphabet_log() -> String {
        let car = CarId { shaft: 1, car: 2 };
        let events = [
            LogEvent {
                time: 1234567890,
                call_id: 1,
                kind: EventKind::New {
                    origin: 4,
                    destination: 1,
                    guests: 8,
                },
            },
            LogEvent {
                time: 1234567890,
                call_id: 1,
                kind: EventKind::Assign { car },
            },
            LogEvent {
                time: 1234567891,
                call_id: 1,
                kind: EventKind::Load { car },
            },
            LogEvent {
                time: 1234567899,
                call_id: 1,
                kind: EventKind::Unload { car, overtravel: 0 },
            },
        ];
        let mut log = String::new();
        for event in &events {
            log.push_str(&format_event(event));
            log.push('\n');
        }
        log
    }

    #[test]
    fn log_alphabet_counts_match_the_grammar() {
        let log = full_alphabet_log();
        assert_eq!(build_vocab(&log, false).unwrap().size(), 36);
        assert_eq!(build_vocab(&log, true).unwrap().size(), 32);
    }

    #[test]
    fn simulated_log_uses_the_same_alphabet() {
        let events = crate::sim::run(&crate::sim::BuildingConfig::default(), 100_000).unwrap();
        let log = crate::codec::render_log(&events);
        let unfolded = build_vocab(&log, false).unwrap();
        let folded = build_vocab(&log, true).unwrap();
        assert_eq!(unfolded.size(), 36);
        assert_eq!(folded.size(), 32);

        let codes = encode(&log, &unfolded).unwrap();
        assert_eq!(decode(&codes, &unfolded).unwrap(), log);
        let folded_codes = encode(&log, &folded).unwrap();
        assert_eq!(
            decode(&folded_codes, &folded).unwrap(),
            log.to_ascii_lowercase()
        );
    }

    #[test]
    fn batchify_cuts_shifted_windows() {
        let tokens: Vec<u32> = (0..10).collect();
        let pairs = batchify(&tokens, 4, 2).unwrap();
        assert_eq!(pairs.len(), 1);
        let (input, target) = &pairs[0];
        assert_eq!(input.row(0), [0, 1, 2, 3]);
        assert_eq!(target.row(0), [1, 2, 3, 4]);
        assert_eq!(input.row(1), [5, 6, 7, 8]);
        assert_eq!(target.row(1), [6, 7, 8, 9]);
        assert_eq!(input.column(2), vec![2, 7]);
    }

    #[test]
    fn batchify_accounts_for_every_emitted_token() {
        let tokens: Vec<u32> = (0..103).map(|t| t % 7).collect();
        let pairs = batchify(&tokens, 5, 3).unwrap();
        // 103 tokens / window 6 = 17 windows; 17 / batch 3 = 5 batches.
        assert_eq!(pairs.len(), 5);
        let consumed = pairs.len() * 3 * 6;
        assert!(consumed <= tokens.len());
        for (input, target) in &pairs {
            assert_eq!(input.data().len(), 15);
            assert!(input.data().iter().all(|&t| t < 7));
            assert!(target.data().iter().all(|&t| t < 7));
        }
    }

    #[test]
    fn batchify_rejects_undersized_corpora_and_zero_shapes() {
        let tokens: Vec<u32> = (0..9).collect();
        assert!(matches!(
            batchify(&tokens, 4, 2),
            Err(VocabError::CorpusTooSmall { needed: 10, got: 9 })
        ));
        assert!(batchify(&tokens, 0, 2).is_err());
        assert!(batchify(&tokens, 4, 0).is_err());
    }

    #[test]
    fn hex_description_roundtrips() {
        let vocab = build_vocab(&full_alphabet_log(), true).unwrap();
        let hex = vocab_to_hex(&vocab);
        let back = vocab_from_hex(&hex, true).unwrap();
        assert_eq!(back, vocab);
        assert_eq!(back.fingerprint(), vocab.fingerprint());

        let other = build_vocab(&full_alphabet_log(), false).unwrap();
        assert_ne!(other.fingerprint(), vocab.fingerprint());
    }

    #[test]
    fn from_chars_enforces_order_and_folding() {
        assert!(Vocabulary::from_chars(vec!['b', 'a'], false).is_err());
        assert!(Vocabulary::from_chars(vec!['a', 'a'], false).is_err());
        assert!(Vocabulary::from_chars(vec!['A', 'a'], true).is_err());
        assert!(Vocabulary::from_chars(vec!['a', 'b'], true).is_ok());
    }
}
