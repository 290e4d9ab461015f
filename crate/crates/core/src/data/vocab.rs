use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::corpus::CorpusRecord;
use super::tokenize::tokenize;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Default cap on the shared source/target vocabulary.
pub const DEFAULT_VOCAB_CAP: usize = 20_000;

/// Fixed lexicon shared by dialogues and descriptions. Ids 0..4 are reserved.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds from training records: most frequent tokens over dialogues and
    /// descriptions jointly, ties broken lexicographically.
    pub fn build(records: &[CorpusRecord], cap: usize) -> Result<Self> {
        if cap < RESERVED.len() {
            return Err(Error::Config(format!(
                "vocabulary cap {cap} is smaller than the {} reserved entries",
                RESERVED.len()
            )));
        }
        if records.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        for r in records {
            let texts = r.dialogue.iter().map(|u| u.text.as_str()).chain([r.description.as_str()]);
            for text in texts {
                for tok in tokenize(text) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(String, u64)> = counts
            .into_iter()
            .filter(|(t, _)| !RESERVED.contains(&t.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t))
            .take(cap)
            .collect();
        Self::from_tokens(tokens)
    }

    /// Rebuilds from an id-ordered token list whose first entries are the reserved tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(t, r)| t != r) {
            return Err(Error::Data("vocabulary must start with the reserved tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id_or_unk(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&id| {
                self.token(id)
                    .map(str::to_string)
                    .ok_or(Error::Vocab { id, size: self.len() })
            })
            .collect()
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;
    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Vocabulary::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

/// Base vocabulary plus the out-of-vocabulary tokens of one source dialogue. The `k`-th
/// OOV token has extended id `|V| + k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExtendedVocabulary {
    base_size: usize,
    oov: Vec<String>,
    oov_index: HashMap<String, usize>,
}

impl ExtendedVocabulary {
    pub fn new<'a>(vocab: &Vocabulary, source: impl IntoIterator<Item = &'a str>) -> Self {
        let mut ext = ExtendedVocabulary {
            base_size: vocab.len(),
            oov: Vec::new(),
            oov_index: HashMap::new(),
        };
        for tok in source {
            if vocab.id(tok).is_none() && !ext.oov_index.contains_key(tok) {
                ext.oov_index.insert(tok.to_string(), ext.oov.len());
                ext.oov.push(tok.to_string());
            }
        }
        ext
    }

    pub fn base_size(&self) -> usize {
        self.base_size
    }

    pub fn size(&self) -> usize {
        self.base_size + self.oov.len()
    }

    pub fn oov_tokens(&self) -> &[String] {
        &self.oov
    }

    /// Base id for in-vocabulary tokens, extended id for source OOV tokens.
    pub fn id(&self, vocab: &Vocabulary, token: &str) -> Option<usize> {
        vocab
            .id(token)
            .or_else(|| self.oov_index.get(token).map(|k| self.base_size + k))
    }

    pub fn token<'a>(&'a self, vocab: &'a Vocabulary, id: usize) -> Result<&'a str> {
        if id < self.base_size {
            vocab.token(id).ok_or(Error::Vocab { id, size: self.size() })
        } else {
            self.oov
                .get(id - self.base_size)
                .map(String::as_str)
                .ok_or(Error::Vocab { id, size: self.size() })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::corpus::{Speaker, Utterance};

    fn record(dialogue: &[&str], desc: &str) -> CorpusRecord {
        CorpusRecord {
            id: "r".into(),
            dialogue: dialogue
                .iter()
                .enumerate()
                .map(|(i, t)| Utterance {
                    speaker: if i % 2 == 0 { Speaker::A } else { Speaker::B },
                    text: t.to_string(),
                })
                .collect(),
            description: desc.into(),
            references: None,
        }
    }

    #[test]
    fn frequency_order_then_cap() {
        let v = Vocabulary::build(&[record(&["a a b"], "a")], 100).unwrap();
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.id("b"), Some(5));
        let recs = [record(&["x y z w", "z y"], "w w w")];
        let v = Vocabulary::build(&recs, 5).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.token(4), Some("w"));
        assert!(Vocabulary::build(&recs, 3).is_err());
        assert!(Vocabulary::build(&[], 10).is_err());
    }

    #[test]
    fn lexicographic_tie_break_is_deterministic() {
        let recs = [record(&["delta alpha", "charlie bravo"], "echo")];
        let a = Vocabulary::build(&recs, 100).unwrap();
        let b = Vocabulary::build(&recs, 100).unwrap();
        assert_eq!(a, b);
        assert_eq!(&a.tokens()[4..], ["alpha", "bravo", "charlie", "delta", "echo"]);
    }

    #[test]
    fn reserved_strings_in_text_do_not_duplicate() {
        let v = Vocabulary::build(&[record(&["<unk> <s> hi"], "hi")], 100).unwrap();
        assert_eq!(v.len(), 5);
    }

    #[test]
    fn decode_encode_round_trip() {
        let v = Vocabulary::build(&[record(&["the cat sat", "on the mat"], "a cat")], 100).unwrap();
        let toks: Vec<String> = ["the", "mat", "cat"].iter().map(|s| s.to_string()).collect();
        assert_eq!(v.decode(&v.encode(&toks)).unwrap(), toks);
        assert!(v.decode(&[999]).is_err());
    }

    #[test]
    fn extended_ids_follow_base() {
        let v = Vocabulary::build(&[record(&["a b"], "a")], 100).unwrap();
        let ext = ExtendedVocabulary::new(&v, ["a", "overalls", "zip", "overalls"]);
        assert_eq!(ext.oov_tokens(), ["overalls", "zip"]);
        assert_eq!(ext.id(&v, "overalls"), Some(v.len()));
        assert_eq!(ext.id(&v, "zip"), Some(v.len() + 1));
        assert_eq!(ext.id(&v, "a"), v.id("a"));
        assert_eq!(ext.id(&v, "nope"), None);
        assert_eq!(ext.token(&v, v.len() + 1).unwrap(), "zip");
        assert!(ext.token(&v, v.len() + 2).is_err());
    }
}
