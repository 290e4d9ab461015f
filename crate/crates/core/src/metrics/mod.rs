//! Corpus BLEU-1..4, ROUGE-L and CIDEr over tokenised hypotheses and reference sets.

pub mod bleu;
pub mod cider;
pub mod rouge;

use serde::{Deserialize, Serialize};

pub use bleu::{bleu_stats, corpus_bleu, sentence_bleu, BleuStats};
pub use cider::{cider, cider_per_example};
pub use rouge::{lcs_len, rouge_l, rouge_l_pair, rouge_l_sentence, ROUGE_BETA};

use crate::data::tokenize;
use crate::error::{Error, Result};
use crate::exec::Execution;

/// Epsilon for zero counts in the per-example sentence BLEU.
pub const SENTENCE_BLEU_EPS: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub id: String,
    /// Smoothed sentence BLEU-4, informational only.
    pub bleu_4: f64,
    pub rouge_l: f64,
    pub cider: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub examples: Vec<ExampleScore>,
}

impl EvalReport {
    /// Column order BLEU-1..4, ROUGE-L, CIDEr; BLEU and ROUGE-L scaled by 100.
    pub fn table(&self) -> String {
        format!(
            "{:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n{:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2}\n",
            "BLEU-1",
            "BLEU-2",
            "BLEU-3",
            "BLEU-4",
            "ROUGE-L",
            "CIDEr",
            100.0 * self.bleu_1,
            100.0 * self.bleu_2,
            100.0 * self.bleu_3,
            100.0 * self.bleu_4,
            100.0 * self.rouge_l,
            100.0 * self.cider,
        )
    }
}

/// Scores tokenised hypotheses against tokenised reference sets.
pub fn evaluate_tokens(ids: &[String], hyps: &[Vec<String>], refs: &[Vec<Vec<String>>], exec: Execution) -> Result<EvalReport> {
    if ids.len() != hyps.len() {
        return Err(Error::Data(format!("{} ids for {} hypotheses", ids.len(), hyps.len())));
    }
    let b = |n| corpus_bleu(hyps, refs, n, exec);
    let cider_each = cider_per_example(hyps, refs, exec)?;
    let examples = ids
        .iter()
        .zip(hyps)
        .zip(refs)
        .zip(&cider_each)
        .map(|(((id, h), r), &c)| ExampleScore {
            id: id.clone(),
            bleu_4: sentence_bleu(h, r, 4, SENTENCE_BLEU_EPS),
            rouge_l: rouge_l_sentence(h, r),
            cider: c,
        })
        .collect();
    Ok(EvalReport {
        bleu_1: b(1)?,
        bleu_2: b(2)?,
        bleu_3: b(3)?,
        bleu_4: b(4)?,
        rouge_l: rouge_l(hyps, refs, exec)?,
        cider: cider_each.iter().sum::<f64>() / cider_each.len() as f64,
        examples,
    })
}

/// Tokenises raw texts with the corpus tokenizer and scores them.
pub fn evaluate_texts(ids: &[String], hyps: &[String], refs: &[Vec<String>], exec: Execution) -> Result<EvalReport> {
    let h: Vec<Vec<String>> = hyps.iter().map(|t| tokenize(t)).collect();
    let r: Vec<Vec<Vec<String>>> = refs.iter().map(|set| set.iter().map(|t| tokenize(t)).collect()).collect();
    evaluate_tokens(ids, &h, &r, exec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    const SEQ: Execution = Execution::Sequential;

    #[test]
    fn lcs_cases() {
        assert_eq!(lcs_len(&toks("a b c d"), &toks("a c d b")), 3);
        assert_eq!(lcs_len(&toks("a"), &toks("b")), 0);
    }

    #[test]
    fn empty_inputs_are_errors() {
        let none: Vec<Vec<String>> = vec![];
        let refs: Vec<Vec<Vec<String>>> = vec![];
        assert!(corpus_bleu(&none, &refs, 4, SEQ).is_err());
        assert!(rouge_l(&none, &refs, SEQ).is_err());
        assert!(cider(&[toks("a")], &[vec![]], SEQ).is_err());
    }

    #[test]
    fn report_table_has_column_order() {
        let ids = vec!["x".to_string()];
        let r = evaluate_texts(&ids, &["a man rides a horse".into()], &[vec!["a man rides a horse".into()]], SEQ).unwrap();
        let head = r.table().lines().next().unwrap().split_whitespace().collect::<Vec<_>>().join(" ");
        assert_eq!(head, "BLEU-1 BLEU-2 BLEU-3 BLEU-4 ROUGE-L CIDEr");
        assert_eq!(r.bleu_4, 1.0);
    }
}
