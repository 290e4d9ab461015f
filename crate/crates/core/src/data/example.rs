use super::corpus::{CorpusRecord, Speaker};
use super::tokenize::tokenize;
use super::vocab::{ExtendedVocabulary, Vocabulary, BOS, EOS, PAD, RESERVED, UNK};

/// Tokens kept per utterance.
pub const MAX_UTTERANCE_TOKENS: usize = 20;

/// One source token and where it sits in the encoder memory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceToken {
    pub turn: usize,
    pub speaker: Speaker,
    pub position: usize,
    pub surface: String,
    pub ext_id: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Turn {
    /// Base-vocabulary ids of speaker A's utterance (OOV mapped to UNK).
    pub a: Vec<usize>,
    pub b: Vec<usize>,
}

/// Encoder input for one dialogue: truncated, non-empty utterances per turn and the
/// flattened memory alignment (turn-major, A before B).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DialogueItem {
    pub turns: Vec<Turn>,
    pub source: Vec<SourceToken>,
}

impl DialogueItem {
    pub fn memory_len(&self) -> usize {
        self.source.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedExample {
    pub id: String,
    pub item: DialogueItem,
    pub ext: ExtendedVocabulary,
    /// `BOS, w₁ … wₙ, EOS` in extended ids.
    pub target: Vec<usize>,
    /// Truncated target surface tokens `w₁ … wₙ`.
    pub target_tokens: Vec<String>,
}

impl EncodedExample {
    /// Teacher-forcing decoder input: `BOS, w₁ … wₙ` with extended ids mapped to UNK.
    pub fn decoder_input(&self) -> Vec<usize> {
        let base = self.ext.base_size();
        self.target[..self.target.len() - 1]
            .iter()
            .map(|&id| if id >= base { UNK } else { id })
            .collect()
    }

    /// Prediction targets `w₁ … wₙ, EOS`.
    pub fn decoder_output(&self) -> &[usize] {
        &self.target[1..]
    }

    /// Source-side token count, used for token-based batching.
    pub fn token_count(&self) -> usize {
        self.item.memory_len() + self.target.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncodeLimits {
    pub max_utterance_tokens: usize,
    pub max_target_tokens: usize,
}

impl Default for EncodeLimits {
    fn default() -> Self {
        EncodeLimits {
            max_utterance_tokens: MAX_UTTERANCE_TOKENS,
            max_target_tokens: 15,
        }
    }
}

fn utterance_tokens(text: &str, limit: usize) -> Vec<String> {
    let mut toks = tokenize(text);
    toks.truncate(limit);
    if toks.is_empty() {
        toks.push(RESERVED[PAD].to_string());
    }
    toks
}

/// Tokenises, truncates and maps a record onto base and extended ids.
pub fn encode_example(record: &CorpusRecord, vocab: &Vocabulary, limits: EncodeLimits) -> EncodedExample {
    let turns_text: Vec<(Vec<String>, Vec<String>)> = record
        .turns()
        .into_iter()
        .map(|(a, b)| {
            (
                utterance_tokens(a, limits.max_utterance_tokens),
                utterance_tokens(b, limits.max_utterance_tokens),
            )
        })
        .collect();

    let ext = ExtendedVocabulary::new(
        vocab,
        turns_text
            .iter()
            .flat_map(|(a, b)| a.iter().chain(b))
            .map(String::as_str),
    );

    let mut turns = Vec::with_capacity(turns_text.len());
    let mut source = Vec::new();
    for (k, (a, b)) in turns_text.iter().enumerate() {
        for (speaker, toks) in [(Speaker::A, a), (Speaker::B, b)] {
            for (position, t) in toks.iter().enumerate() {
                source.push(SourceToken {
                    turn: k,
                    speaker,
                    position,
                    surface: t.clone(),
                    ext_id: ext.id(vocab, t).expect("source tokens are in the extended vocabulary"),
                });
            }
        }
        turns.push(Turn {
            a: vocab.encode(a),
            b: vocab.encode(b),
        });
    }

    let mut target_tokens = tokenize(&record.description);
    target_tokens.truncate(limits.max_target_tokens);
    let mut target = Vec::with_capacity(target_tokens.len() + 2);
    target.push(BOS);
    target.extend(target_tokens.iter().map(|t| ext.id(vocab, t).unwrap_or(UNK)));
    target.push(EOS);

    EncodedExample {
        id: record.id.clone(),
        item: DialogueItem { turns, source },
        ext,
        target,
        target_tokens,
    }
}
