//! Greedy and beam-search decoding, copy resolution and attention dumps.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::{EncodedExample, ExtendedVocabulary, Speaker, Vocabulary, EOS};
use crate::decoder::{masked_log_probs, DecoderCache, MemoryContext};
use crate::error::{Error, Result};
use crate::exec::{par_map, Execution};
use crate::model::Model;

#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    /// Generated extended ids, BOS and EOS excluded.
    pub tokens: Vec<usize>,
    /// Sum of log-probabilities of the tokens, plus EOS when `finished`.
    pub log_prob: f64,
    /// Ended by EOS rather than by the length cap.
    pub finished: bool,
}

#[derive(Clone, Debug)]
pub struct BeamResult {
    pub best: BeamHypothesis,
    /// Up to `K` completed hypotheses, best first.
    pub kbest: Vec<BeamHypothesis>,
}

struct Live {
    tokens: Vec<usize>,
    log_prob: f64,
    cache: DecoderCache,
    next_input: usize,
}

/// Best-first order: higher score, then shorter, then lexicographically smaller ids.
fn rank(a: &BeamHypothesis, b: &BeamHypothesis) -> Ordering {
    b.log_prob
        .total_cmp(&a.log_prob)
        .then(a.tokens.len().cmp(&b.tokens.len()))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Argmax decoding with the configured length bounds. Ties go to the lower id.
pub fn greedy_decode(model: &Model, ctx: &MemoryContext) -> Result<BeamHypothesis> {
    let cfg = &model.config.decoder;
    let mut cache = model.new_cache();
    let mut input = crate::data::BOS;
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    loop {
        let step = model.decode_step(ctx, &mut cache, input)?;
        let lp = masked_log_probs(&step.distribution, tokens.len(), cfg);
        let (best, &score) = lp
            .iter()
            .enumerate()
            .fold(None, |acc: Option<(usize, &f64)>, (i, s)| match acc {
                Some((_, b)) if *s <= *b => acc,
                _ => Some((i, s)),
            })
            .expect("non-empty distribution");
        log_prob += score;
        if best == EOS {
            return Ok(BeamHypothesis {
                tokens,
                log_prob,
                finished: true,
            });
        }
        tokens.push(best);
        if tokens.len() == cfg.max_target_len {
            return Ok(BeamHypothesis {
                tokens,
                log_prob,
                finished: false,
            });
        }
        input = best;
    }
}

fn settled(done: &[BeamHypothesis], live: &[Live], k: usize) -> bool {
    if done.len() < k {
        return false;
    }
    let mut scores: Vec<f64> = done.iter().map(|h| h.log_prob).collect();
    scores.sort_by(|a, b| b.total_cmp(a));
    let best_live = live.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
    best_live <= scores[k - 1]
}

/// Standard beam search without length normalisation. Each step expands every live
/// hypothesis over the extended vocabulary and keeps the global top `k` candidates
/// (score, then lower token id, then lower parent rank). EOS candidates become
/// finished. Search stops when none remain live, or once `k` hypotheses are done and
/// no live one scores above the `k`-th best of them: scores only fall as a
/// hypothesis grows, so it could never enter the list.
pub fn beam_search(model: &Model, ctx: &MemoryContext, k: usize, exec: Execution) -> Result<BeamResult> {
    if k == 0 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    let cfg = &model.config.decoder;
    let mut live = vec![Live {
        tokens: Vec::new(),
        log_prob: 0.0,
        cache: model.new_cache(),
        next_input: crate::data::BOS,
    }];
    let mut done: Vec<BeamHypothesis> = Vec::new();

    while !live.is_empty() && !settled(&done, &live, k) {
        let expanded = par_map(exec, &live, |h| {
            let mut cache = h.cache.clone();
            model
                .decode_step(ctx, &mut cache, h.next_input)
                .map(|s| (masked_log_probs(&s.distribution, h.tokens.len(), cfg), cache))
        });
        let expanded = expanded.into_iter().collect::<Result<Vec<_>>>()?;

        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (parent, (lp, _)) in expanded.iter().enumerate() {
            for (w, &l) in lp.iter().enumerate() {
                if l.is_finite() {
                    candidates.push((live[parent].log_prob + l, w, parent));
                }
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        candidates.truncate(k);

        let mut next = Vec::new();
        for (score, w, parent) in candidates {
            let mut tokens = live[parent].tokens.clone();
            if w == EOS {
                done.push(BeamHypothesis {
                    tokens,
                    log_prob: score,
                    finished: true,
                });
                continue;
            }
            tokens.push(w);
            if tokens.len() == cfg.max_target_len {
                done.push(BeamHypothesis {
                    tokens,
                    log_prob: score,
                    finished: false,
                });
            } else {
                next.push(Live {
                    tokens,
                    log_prob: score,
                    cache: expanded[parent].1.clone(),
                    next_input: w,
                });
            }
        }
        live = next;
    }
    done.sort_by(rank);
    done.truncate(k);
    let best = done.first().cloned().ok_or_else(|| Error::Domain {
        op: "beam_search",
        detail: "no hypothesis completed".into(),
    })?;
    Ok(BeamResult { best, kbest: done })
}

/// Teacher-forced score of `tokens` under the same masking as decoding; EOS is added
/// when `finished`.
pub fn rescore(model: &Model, ex: &EncodedExample, tokens: &[usize], finished: bool) -> Result<f64> {
    let mut prefix = vec![crate::data::BOS];
    prefix.extend_from_slice(tokens);
    if !finished {
        prefix.pop();
    }
    let (_, steps) = model.teacher_forced(ex, &prefix)?;
    let mut targets = tokens.to_vec();
    if finished {
        targets.push(EOS);
    }
    let mut total = 0.0;
    for (t, (step, &w)) in steps.iter().zip(&targets).enumerate() {
        let lp = masked_log_probs(&step.distribution, t, &model.config.decoder);
        total += *lp.get(w).ok_or(Error::Vocab {
            id: w,
            size: lp.len(),
        })?;
    }
    Ok(total)
}

/// Maps extended ids to surface words; copied ids resolve to their source token.
pub fn resolve_copies(ids: &[usize], vocab: &Vocabulary, ext: &ExtendedVocabulary) -> Result<Vec<String>> {
    ids.iter().map(|&id| ext.token(vocab, id).map(str::to_string)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelledMatrix {
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub shape: [usize; 2],
    pub rows: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnAttentionDump {
    pub turn: usize,
    pub a_to_b: LabelledMatrix,
    pub b_to_a: LabelledMatrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub id: String,
    pub turns: Vec<TurnAttentionDump>,
    /// Head-averaged context attention of the last decoder layer; one row per output
    /// token, one column per memory position.
    pub decoder_context: LabelledMatrix,
}

/// Co-attention matrices of every turn and the decoder context attention while
/// producing `output` (extended ids, EOS appended when `finished`).
pub fn dump_attention(
    model: &Model,
    vocab: &Vocabulary,
    ex: &EncodedExample,
    output: &BeamHypothesis,
) -> Result<AttentionDump> {
    let mut prefix = vec![crate::data::BOS];
    prefix.extend_from_slice(&output.tokens);
    if !output.finished {
        prefix.pop();
    }
    let (enc, steps) = model.teacher_forced(ex, &prefix)?;

    let speaker_tokens = |turn: usize, sp: Speaker| -> Vec<String> {
        ex.item
            .source
            .iter()
            .filter(|s| s.turn == turn && s.speaker == sp)
            .map(|s| s.surface.clone())
            .collect()
    };
    let turns = enc
        .interactions
        .iter()
        .enumerate()
        .map(|(k, (ab, ba))| {
            let a = speaker_tokens(k, Speaker::A);
            let b = speaker_tokens(k, Speaker::B);
            TurnAttentionDump {
                turn: k,
                a_to_b: LabelledMatrix {
                    row_labels: a.clone(),
                    col_labels: b.clone(),
                    shape: [ab.rows(), ab.cols()],
                    rows: ab.to_rows(),
                },
                b_to_a: LabelledMatrix {
                    row_labels: b,
                    col_labels: a,
                    shape: [ba.rows(), ba.cols()],
                    rows: ba.to_rows(),
                },
            }
        })
        .collect();

    let mut row_labels = resolve_copies(&output.tokens, vocab, &ex.ext)?;
    if output.finished {
        row_labels.push(crate::data::vocab::RESERVED[EOS].to_string());
    }
    let rows: Vec<Vec<f64>> = steps
        .iter()
        .map(|s| {
            let h = s.context_attention.rows() as f64;
            (0..s.context_attention.cols())
                .map(|j| (0..s.context_attention.rows()).map(|i| s.context_attention.at(i, j)).sum::<f64>() / h)
                .collect()
        })
        .collect();
    let col_labels: Vec<String> = ex.item.source.iter().map(|s| s.surface.clone()).collect();
    Ok(AttentionDump {
        id: ex.id.clone(),
        turns,
        decoder_context: LabelledMatrix {
            shape: [rows.len(), col_labels.len()],
            row_labels,
            col_labels,
            rows,
        },
    })
}

/// Beam-decodes every example, in parallel across examples.
pub fn generate_all(model: &Model, examples: &[EncodedExample], k: usize, exec: Execution) -> Result<Vec<BeamResult>> {
    par_map(exec, examples, |ex| {
        let ctx = model.memory_context(ex)?;
        beam_search(model, &ctx, k, Execution::Sequential)
    })
    .into_iter()
    .collect()
}
