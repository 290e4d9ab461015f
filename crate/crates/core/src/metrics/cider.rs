use std::collections::{HashMap, HashSet};

use crate::error::Result;
use crate::exec::{par_map, Execution};

use super::bleu::{check_corpus, ngram_counts};

pub const CIDER_MAX_N: usize = 4;

type Vector<'a> = HashMap<Vec<&'a str>, f64>;

struct Idf<'a> {
    df: HashMap<Vec<&'a str>, usize>,
    log_n: f64,
}

impl<'a> Idf<'a> {
    /// Document frequency of each n-gram over the reference sets of the corpus.
    fn from_refs<S: AsRef<str>>(refs: &'a [Vec<Vec<S>>]) -> Self {
        let mut df = HashMap::new();
        for set in refs {
            let mut seen: HashSet<Vec<&str>> = HashSet::new();
            for r in set {
                for n in 1..=CIDER_MAX_N {
                    seen.extend(ngram_counts(r, n).into_keys());
                }
            }
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        Idf {
            df,
            log_n: (refs.len() as f64).ln(),
        }
    }

    fn vectors<S: AsRef<str>>(&self, tokens: &'a [S]) -> Vec<(Vector<'a>, f64)> {
        (1..=CIDER_MAX_N)
            .map(|n| {
                let v: Vector = ngram_counts(tokens, n)
                    .into_iter()
                    .map(|(g, c)| {
                        let df = self.df.get(&g).copied().unwrap_or(0).max(1) as f64;
                        let w = c as f64 * (self.log_n - df.ln());
                        (g, w)
                    })
                    .collect();
                let norm = v.values().map(|x| x * x).sum::<f64>().sqrt();
                (v, norm)
            })
            .collect()
    }
}

fn cosine(a: &(Vector<'_>, f64), b: &(Vector<'_>, f64)) -> f64 {
    if a.1 == 0.0 || b.1 == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.0.iter().map(|(g, x)| x * b.0.get(g).copied().unwrap_or(0.0)).sum();
    dot / (a.1 * b.1)
}

/// Per-example CIDEr: `10 · mean_n mean_refs cos(tfidf_n(hyp), tfidf_n(ref))`, with
/// document frequencies taken over the given reference sets.
pub fn cider_per_example<S: AsRef<str> + Sync>(hyps: &[Vec<S>], refs: &[Vec<Vec<S>>], exec: Execution) -> Result<Vec<f64>> {
    check_corpus(hyps.len(), refs)?;
    let idf = Idf::from_refs(refs);
    let pairs: Vec<(&Vec<S>, &Vec<Vec<S>>)> = hyps.iter().zip(refs).collect();
    Ok(par_map(exec, &pairs, |(h, rs)| {
        let hv = idf.vectors(h);
        let mut total = 0.0;
        for r in rs.iter() {
            let rv = idf.vectors(r);
            total += hv.iter().zip(&rv).map(|(a, b)| cosine(a, b)).sum::<f64>() / CIDER_MAX_N as f64;
        }
        10.0 * total / rs.len() as f64
    }))
}

pub fn cider<S: AsRef<str> + Sync>(hyps: &[Vec<S>], refs: &[Vec<Vec<S>>], exec: Execution) -> Result<f64> {
    let per = cider_per_example(hyps, refs, exec)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}
