use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::exec::{par_map, Execution};

pub(crate) fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for w in tokens.windows(n) {
        *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
    }
    counts
}

/// Clipped n-gram matches and hypothesis n-gram totals for orders `1..=max_n`, plus the
/// hypothesis length and the closest reference length (shorter wins ties).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BleuStats {
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub hyp_len: usize,
    pub ref_len: usize,
}

pub fn bleu_stats<S: AsRef<str>>(hyp: &[S], refs: &[Vec<S>], max_n: usize) -> BleuStats {
    let mut stats = BleuStats {
        matches: vec![0; max_n],
        totals: vec![0; max_n],
        hyp_len: hyp.len(),
        ref_len: refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&r| (r.abs_diff(hyp.len()), r))
            .unwrap_or(0),
    };
    for n in 1..=max_n {
        let h = ngram_counts(hyp, n);
        let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
        for r in refs {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        stats.matches[n - 1] = h.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
        stats.totals[n - 1] = h.values().sum();
    }
    stats
}

fn combine(stats: &BleuStats, smoothing: Option<f64>) -> f64 {
    if stats.hyp_len == 0 {
        return 0.0;
    }
    let n = stats.matches.len();
    let mut log_sum = 0.0;
    for (&m, &t) in stats.matches.iter().zip(&stats.totals) {
        let p = match (m, smoothing) {
            (0, Some(eps)) if t > 0 => eps / t as f64,
            (_, _) if t == 0 || m == 0 => return 0.0,
            _ => m as f64 / t as f64,
        };
        log_sum += p.ln();
    }
    let bp = if stats.hyp_len > stats.ref_len {
        1.0
    } else {
        (1.0 - stats.ref_len as f64 / stats.hyp_len as f64).exp()
    };
    bp * (log_sum / n as f64).exp()
}

/// Corpus BLEU-`max_n` without smoothing: n-gram statistics and lengths are summed over
/// the corpus before combining.
pub fn corpus_bleu<S: AsRef<str> + Sync>(hyps: &[Vec<S>], refs: &[Vec<Vec<S>>], max_n: usize, exec: Execution) -> Result<f64> {
    check_corpus(hyps.len(), refs)?;
    let pairs: Vec<(&Vec<S>, &Vec<Vec<S>>)> = hyps.iter().zip(refs).collect();
    let per = par_map(exec, &pairs, |(h, r)| bleu_stats(h, r, max_n));
    let mut total = BleuStats {
        matches: vec![0; max_n],
        totals: vec![0; max_n],
        ..BleuStats::default()
    };
    for s in per {
        for i in 0..max_n {
            total.matches[i] += s.matches[i];
            total.totals[i] += s.totals[i];
        }
        total.hyp_len += s.hyp_len;
        total.ref_len += s.ref_len;
    }
    Ok(combine(&total, None))
}

/// Sentence BLEU with zero match counts replaced by `eps` (informational only).
pub fn sentence_bleu<S: AsRef<str>>(hyp: &[S], refs: &[Vec<S>], max_n: usize, eps: f64) -> f64 {
    combine(&bleu_stats(hyp, refs, max_n), Some(eps))
}

pub(crate) fn check_corpus<T>(hyps: usize, refs: &[Vec<T>]) -> Result<()> {
    if hyps == 0 {
        return Err(Error::Data("empty corpus".into()));
    }
    if hyps != refs.len() {
        return Err(Error::Data(format!("{hyps} hypotheses but {} reference sets", refs.len())));
    }
    if let Some(i) = refs.iter().position(Vec::is_empty) {
        return Err(Error::Data(format!("example {i} has no references")));
    }
    Ok(())
}
