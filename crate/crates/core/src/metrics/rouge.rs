use crate::error::Result;
use crate::exec::{par_map, Execution};

use super::bleu::check_corpus;

/// Recall weight of the LCS F-measure.
pub const ROUGE_BETA: f64 = 1.2;

pub fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure against one reference.
pub fn rouge_l_pair<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> f64 {
    let lcs = lcs_len(hyp, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / hyp.len() as f64;
    let r = lcs / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Best F-measure over the references.
pub fn rouge_l_sentence<S: AsRef<str>>(hyp: &[S], refs: &[Vec<S>]) -> f64 {
    refs.iter().map(|r| rouge_l_pair(hyp, r)).fold(0.0, f64::max)
}

pub fn rouge_l<S: AsRef<str> + Sync>(hyps: &[Vec<S>], refs: &[Vec<Vec<S>>], exec: Execution) -> Result<f64> {
    check_corpus(hyps.len(), refs)?;
    let pairs: Vec<(&Vec<S>, &Vec<Vec<S>>)> = hyps.iter().zip(refs).collect();
    let scores = par_map(exec, &pairs, |(h, r)| rouge_l_sentence(h, r));
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}
