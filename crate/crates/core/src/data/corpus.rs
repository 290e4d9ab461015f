use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{par_map, Execution};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Speaker {
    A,
    B,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
}

/// One dialogue–description pair, stored as one JSON object per line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub id: String,
    pub dialogue: Vec<Utterance>,
    pub description: String,
    /// Evaluation references; test records carry several.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub references: Option<Vec<String>>,
}

impl CorpusRecord {
    /// Speakers must strictly alternate starting with A.
    pub fn validate(&self) -> Result<()> {
        if self.dialogue.is_empty() {
            return Err(Error::Data(format!("record {}: empty dialogue", self.id)));
        }
        for (i, u) in self.dialogue.iter().enumerate() {
            let expected = if i % 2 == 0 { Speaker::A } else { Speaker::B };
            if u.speaker != expected {
                return Err(Error::Data(format!(
                    "record {}: utterance {i} should be speaker {expected:?}",
                    self.id
                )));
            }
        }
        Ok(())
    }

    /// A/B pairs; a trailing A utterance gets an empty B side.
    pub fn turns(&self) -> Vec<(&str, &str)> {
        self.dialogue
            .chunks(2)
            .map(|c| (c[0].text.as_str(), c.get(1).map_or("", |u| u.text.as_str())))
            .collect()
    }

    /// Reference descriptions for evaluation: `references` when present, else the
    /// description itself.
    pub fn reference_texts(&self) -> Vec<&str> {
        match &self.references {
            Some(r) if !r.is_empty() => r.iter().map(String::as_str).collect(),
            _ => vec![self.description.as_str()],
        }
    }
}

pub fn parse_corpus(text: &str) -> Result<Vec<CorpusRecord>> {
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .collect();
    let parsed = par_map(Execution::default(), &lines, |(n, line)| {
        let rec: CorpusRecord = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("line {}: {e}", n + 1)))?;
        rec.validate()?;
        Ok(rec)
    });
    parsed.into_iter().collect()
}

pub fn read_corpus(path: &Path) -> Result<Vec<CorpusRecord>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read corpus {}: {e}", path.display())))?;
    parse_corpus(&text)
}

pub fn write_corpus(path: &Path, records: &[CorpusRecord]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
