//! Transformer decoder with context attention over the encoder memory, vocabulary
//! projection, generation gate and the extended-vocabulary copy mixture.

use serde::{Deserialize, Serialize};

use crate::data::{BOS, EOS, PAD};
use crate::encoder::EncoderMemory;
use crate::error::{Error, Result};
use crate::nn::{self, Dropout, LinearParams, ProjectedMemory, TransformerLayerParams};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Floor applied to target probabilities before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub layer_count: usize,
    pub head_count: usize,
    pub d_ff: usize,
    /// Generated tokens, excluding BOS/EOS.
    pub max_target_len: usize,
    pub min_target_len: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            layer_count: 2,
            head_count: 4,
            d_ff: 1024,
            max_target_len: 15,
            min_target_len: 5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub layers: Vec<TransformerLayerParams>,
    /// `[d_model×|V|]` projection to vocabulary logits.
    pub vocab_projection: LinearParams,
    /// `[d_model×1]` generation gate.
    pub gate: LinearParams,
}

/// Probability vector over `|V| + |OOV|` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtendedDistribution {
    pub probs: Vec<f64>,
    pub extended_size: usize,
}

impl ExtendedDistribution {
    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }
}

#[derive(Clone, Debug)]
pub struct DecoderStepOutput {
    pub state: Vec<f64>,
    /// `[H×L]` context attention of the last layer.
    pub context_attention: Tensor,
    pub distribution: ExtendedDistribution,
    pub p_gen: f64,
}

/// Graph handles of a teacher-forced decoder pass over `T` positions.
pub struct DecoderOutputs {
    /// `[T×d_model]`
    pub states: Var,
    /// Per-head `[T×L]` context attention of the last layer.
    pub context_attention: Vec<Var>,
    /// `[T×|V|]`
    pub p_vocab: Var,
    /// `[T×1]`
    pub p_gen: Var,
    /// `[T×ext]` head-averaged copy distribution.
    pub pointer: Var,
    /// `[T×ext]`
    pub distribution: Var,
}

impl DecoderOutputs {
    pub fn step_outputs(&self, g: &Graph<'_>) -> Vec<DecoderStepOutput> {
        let states = g.value(self.states);
        let dist = g.value(self.distribution);
        let p_gen = g.value(self.p_gen);
        let heads: Vec<&Tensor> = self.context_attention.iter().map(|&v| g.value(v)).collect();
        (0..states.rows())
            .map(|t| {
                let mut ctx = Vec::new();
                for h in &heads {
                    ctx.extend_from_slice(h.row(t));
                }
                DecoderStepOutput {
                    state: states.row(t).to_vec(),
                    context_attention: Tensor::from_parts(vec![heads.len(), heads[0].cols()], ctx),
                    distribution: ExtendedDistribution {
                        probs: dist.row(t).to_vec(),
                        extended_size: dist.cols(),
                    },
                    p_gen: p_gen.data()[t],
                }
            })
            .collect()
    }
}

/// `softmax(s·V + b)` per row.
pub fn vocab_distribution(g: &mut Graph<'_>, proj: &LinearParams, states: Var) -> Result<Var> {
    let logits = nn::linear(g, proj, states)?;
    g.softmax(logits, 1)
}

/// `σ(s·w + b)` per row, `[T×1]`.
pub fn generation_probability(g: &mut Graph<'_>, gate: &LinearParams, states: Var) -> Result<Var> {
    let logit = nn::linear(g, gate, states)?;
    Ok(g.sigmoid(logit))
}

/// Averages per-head `[T×L]` weights and scatter-adds them onto extended ids, so
/// repeated source tokens accumulate mass.
pub fn pointer_distribution(g: &mut Graph<'_>, heads: &[Var], ext_ids: &[usize], ext_size: usize) -> Result<Var> {
    let first = *heads.first().ok_or_else(|| Error::Domain {
        op: "pointer_distribution",
        detail: "no attention heads".into(),
    })?;
    let mut sum = first;
    for &h in &heads[1..] {
        sum = g.add(sum, h)?;
    }
    let mean = g.scale(sum, 1.0 / heads.len() as f64);
    g.scatter_cols(mean, ext_ids, ext_size)
}

/// `p_gen·P_v(w) + (1 − p_gen)·a(w)` over the extended vocabulary; `P_v` is zero on
/// OOV slots.
pub fn mixture(g: &mut Graph<'_>, p_vocab: Var, pointer: Var, p_gen: Var, ext_size: usize) -> Result<Var> {
    let v = g.shape(p_vocab)[1];
    if v > ext_size || g.shape(pointer)[1] != ext_size {
        return Err(Error::shape("mixture", g.shape(p_vocab), g.shape(pointer)));
    }
    let ids: Vec<usize> = (0..v).collect();
    let padded = g.scatter_cols(p_vocab, &ids, ext_size)?;
    let gen = g.scale_rows(padded, p_gen)?;
    let copy_weight = g.affine(p_gen, -1.0, 1.0);
    let copy = g.scale_rows(pointer, copy_weight)?;
    g.add(gen, copy)
}

/// Per-position `−log max(P(w*), 1e-12)`, as a `[T]` vector.
pub fn step_losses(g: &mut Graph<'_>, distribution: Var, targets: &[usize]) -> Result<Var> {
    let width = g.shape(distribution)[1];
    if let Some(&bad) = targets.iter().find(|&&t| t >= width) {
        return Err(Error::Vocab { id: bad, size: width });
    }
    let picked = g.gather(distribution, targets)?;
    let floored = g.clamp_min(picked, PROB_FLOOR);
    let logp = g.log(floored)?;
    Ok(g.neg(logp))
}

/// Mean of the per-step losses.
pub fn sequence_loss(g: &mut Graph<'_>, distribution: Var, targets: &[usize]) -> Result<Var> {
    let steps = step_losses(g, distribution, targets)?;
    Ok(g.mean(steps))
}

/// Positions of the context attention input of each decoder layer.
pub fn project_context(g: &mut Graph<'_>, p: &DecoderParams, memory: Var) -> Result<Vec<ProjectedMemory>> {
    p.layers
        .iter()
        .map(|l| {
            let ctx = l.context_attention.as_ref().expect("decoder layers have context attention");
            nn::project_memory(g, ctx, memory, memory)
        })
        .collect()
}

struct LayerResult {
    output: Var,
    context_attention: Vec<Var>,
}

#[allow(clippy::too_many_arguments)]
fn decoder_layer(
    g: &mut Graph<'_>,
    layer: &TransformerLayerParams,
    queries: Var,
    self_keys: Var,
    self_mask: Option<&[bool]>,
    context: &ProjectedMemory,
    eps: f64,
    dropout: &mut Dropout,
) -> Result<LayerResult> {
    let ctx_params = layer.context_attention.as_ref().expect("decoder layers have context attention");
    let x = nn::sublayer(g, queries, &layer.norms[0], eps, |g, x| {
        let (y, _) = nn::multi_head_attention(g, &layer.self_attention, x, self_keys, self_keys, self_mask)?;
        dropout.apply(g, y)
    })?;
    let mut context_attention = Vec::new();
    let x = nn::sublayer(g, x, &layer.norms[1], eps, |g, x| {
        let (y, w) = nn::attend_projected(g, ctx_params, x, context, None)?;
        context_attention = w;
        dropout.apply(g, y)
    })?;
    let output = nn::sublayer(g, x, &layer.norms[2], eps, |g, x| {
        let y = nn::feed_forward(g, &layer.feed_forward, x)?;
        dropout.apply(g, y)
    })?;
    Ok(LayerResult {
        output,
        context_attention,
    })
}

/// Teacher-forced pass over `input_ids = BOS, w₁ …` (base ids) against `memory`.
#[allow(clippy::too_many_arguments)]
pub fn decoder_forward(
    g: &mut Graph<'_>,
    embedding: ParamId,
    p: &DecoderParams,
    cfg: &DecoderConfig,
    input_ids: &[usize],
    memory: &EncoderMemory,
    ext_size: usize,
    eps: f64,
    dropout: &mut Dropout,
) -> Result<DecoderOutputs> {
    if input_ids.first() != Some(&BOS) {
        return Err(Error::Data("decoder prefix must start with BOS".into()));
    }
    if input_ids.len() > cfg.max_target_len + 1 {
        return Err(Error::Data(format!(
            "decoder prefix of {} exceeds max_target_len + 1 = {}",
            input_ids.len(),
            cfg.max_target_len + 1
        )));
    }
    let t = input_ids.len();
    let table = g.param(embedding);
    let emb = g.embed(table, input_ids)?;
    let d = g.shape(emb)[1];
    let pe = g.constant(nn::positional_encoding(t, d)?);
    let mut x = g.add(emb, pe)?;
    let mask = nn::causal_mask(t);
    let projected = project_context(g, p, memory.memory)?;
    let mut last_ctx = Vec::new();
    for (layer, ctx) in p.layers.iter().zip(&projected) {
        let r = decoder_layer(g, layer, x, x, Some(&mask), ctx, eps, dropout)?;
        x = r.output;
        last_ctx = r.context_attention;
    }
    finish(g, p, x, last_ctx, memory.alignment.iter().map(|s| s.ext_id).collect::<Vec<_>>().as_slice(), ext_size)
}

fn finish(
    g: &mut Graph<'_>,
    p: &DecoderParams,
    states: Var,
    context_attention: Vec<Var>,
    ext_ids: &[usize],
    ext_size: usize,
) -> Result<DecoderOutputs> {
    let p_vocab = vocab_distribution(g, &p.vocab_projection, states)?;
    let p_gen = generation_probability(g, &p.gate, states)?;
    let pointer = pointer_distribution(g, &context_attention, ext_ids, ext_size)?;
    let distribution = mixture(g, p_vocab, pointer, p_gen, ext_size)?;
    Ok(DecoderOutputs {
        states,
        context_attention,
        p_vocab,
        p_gen,
        pointer,
        distribution,
    })
}

/// Encoder memory with context keys/values projected once for every decoder layer.
pub struct MemoryContext {
    pub memory: Tensor,
    keys: Vec<Vec<Tensor>>,
    values: Vec<Vec<Tensor>>,
    pub ext_ids: Vec<usize>,
    pub ext_size: usize,
}

impl MemoryContext {
    pub fn new(store: &ParamStore, p: &DecoderParams, memory: Tensor, ext_ids: Vec<usize>, ext_size: usize) -> Result<Self> {
        let mut g = Graph::with_params(store, false);
        let m = g.constant_ref(&memory);
        let projected = project_context(&mut g, p, m)?;
        let keys = projected
            .iter()
            .map(|pm| pm.keys.iter().map(|&k| g.value(k).clone()).collect())
            .collect();
        let values = projected
            .iter()
            .map(|pm| pm.values.iter().map(|&v| g.value(v).clone()).collect())
            .collect();
        drop(g);
        Ok(MemoryContext {
            memory,
            keys,
            values,
            ext_ids,
            ext_size,
        })
    }

    pub fn len(&self) -> usize {
        self.memory.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-layer input rows of the positions decoded so far.
#[derive(Clone, Debug, Default)]
pub struct DecoderCache {
    layer_inputs: Vec<Option<Tensor>>,
    len: usize,
}

impl DecoderCache {
    pub fn new(layers: usize) -> Self {
        DecoderCache {
            layer_inputs: vec![None; layers],
            len: 0,
        }
    }

    /// Number of positions consumed, including BOS.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Feeds one input token (base id) at the next position and returns the
/// distribution for the following token.
#[allow(clippy::too_many_arguments)]
pub fn decode_step(
    store: &ParamStore,
    embedding: ParamId,
    p: &DecoderParams,
    cfg: &DecoderConfig,
    eps: f64,
    ctx: &MemoryContext,
    cache: &mut DecoderCache,
    token: usize,
) -> Result<DecoderStepOutput> {
    if cache.len > cfg.max_target_len {
        return Err(Error::Data("decoder prefix exceeds max_target_len + 1".into()));
    }
    let mut g = Graph::with_params(store, false);
    let table = g.param(embedding);
    let emb = g.embed(table, &[token])?;
    let d = g.shape(emb)[1];
    let pe = g.constant(nn::positional_encoding_from(cache.len, 1, d)?);
    let mut x = g.add(emb, pe)?;
    let mut new_rows = Vec::with_capacity(p.layers.len());
    let mut last_ctx = Vec::new();
    let mut dropout = Dropout::disabled();
    for (l, layer) in p.layers.iter().enumerate() {
        new_rows.push(g.value(x).clone());
        let keys = match &cache.layer_inputs[l] {
            Some(prev) => {
                let prev = g.constant_ref(prev);
                g.concat(&[prev, x], 0)?
            }
            None => x,
        };
        let projected = ProjectedMemory {
            keys: ctx.keys[l].iter().map(|k| g.constant_ref(k)).collect(),
            values: ctx.values[l].iter().map(|v| g.constant_ref(v)).collect(),
        };
        let r = decoder_layer(&mut g, layer, x, keys, None, &projected, eps, &mut dropout)?;
        x = r.output;
        last_ctx = r.context_attention;
    }
    let out = finish(&mut g, p, x, last_ctx, &ctx.ext_ids, ctx.ext_size)?;
    let step = out.step_outputs(&g).pop().expect("one position");
    drop(g);
    for (slot, row) in cache.layer_inputs.iter_mut().zip(new_rows) {
        match slot {
            Some(t) => t.append_rows(&row)?,
            None => *slot = Some(row),
        }
    }
    cache.len += 1;
    Ok(step)
}

/// Log-probabilities for the next token, with PAD and BOS never allowed and EOS
/// disallowed until `generated >= min_target_len`.
pub fn masked_log_probs(dist: &ExtendedDistribution, generated: usize, cfg: &DecoderConfig) -> Vec<f64> {
    let mut lp: Vec<f64> = dist.probs.iter().map(|p| p.max(0.0).ln()).collect();
    lp[PAD] = f64::NEG_INFINITY;
    lp[BOS] = f64::NEG_INFINITY;
    if generated < cfg.min_target_len {
        lp[EOS] = f64::NEG_INFINITY;
    }
    lp
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(g: &mut Graph<'_>, xs: &[f64]) -> Var {
        g.constant(Tensor::new(vec![1, xs.len()], xs.to_vec()).unwrap())
    }

    #[test]
    fn pointer_accumulates_repeated_tokens() {
        let mut g = Graph::new();
        let w = row(&mut g, &[0.3, 0.5, 0.2]);
        // source positions 0 and 2 hold the same token (ext id 4)
        let p = pointer_distribution(&mut g, &[w], &[4, 1, 4], 6).unwrap();
        let v = g.value(p).data();
        assert!((v[4] - 0.5).abs() < 1e-15);
        assert!((v[1] - 0.5).abs() < 1e-15);
        let total: f64 = v.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);

        let one = row(&mut g, &[0.0, 1.0, 0.0]);
        let p = pointer_distribution(&mut g, &[one], &[2, 5, 3], 6).unwrap();
        assert_eq!(g.value(p).data()[5], 1.0);
    }

    #[test]
    fn pointer_averages_heads() {
        let mut g = Graph::new();
        let a = row(&mut g, &[1.0, 0.0]);
        let b = row(&mut g, &[0.0, 1.0]);
        let p = pointer_distribution(&mut g, &[a, b], &[0, 1], 2).unwrap();
        assert_eq!(g.value(p).data(), &[0.5, 0.5]);
    }

    #[test]
    fn mixture_cases() {
        let mut g = Graph::new();
        let pv = row(&mut g, &[0.5, 0.3, 0.2]);
        let ptr = row(&mut g, &[0.2, 0.0, 0.0, 0.8]);
        let pg = g.constant(Tensor::new(vec![1, 1], vec![0.6]).unwrap());
        let m = mixture(&mut g, pv, ptr, pg, 4).unwrap();
        let v = g.value(m).data().to_vec();
        assert!((v[0] - 0.38).abs() < 1e-12);
        assert!((v[3] - 0.32).abs() < 1e-12);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let one = g.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let m = mixture(&mut g, pv, ptr, one, 4).unwrap();
        assert_eq!(g.value(m).data(), &[0.5, 0.3, 0.2, 0.0]);
        let zero = g.constant(Tensor::new(vec![1, 1], vec![0.0]).unwrap());
        let m = mixture(&mut g, pv, ptr, zero, 4).unwrap();
        assert_eq!(g.value(m).data(), &[0.2, 0.0, 0.0, 0.8]);
    }

    #[test]
    fn loss_cases() {
        let mut g = Graph::new();
        let certain = row(&mut g, &[0.0, 1.0, 0.0]);
        let l = sequence_loss(&mut g, certain, &[1]).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let uniform = row(&mut g, &[0.2; 5]);
        let l = sequence_loss(&mut g, uniform, &[3]).unwrap();
        assert!((g.value(l).item() - 5f64.ln()).abs() < 1e-12);
        let two = g.constant(Tensor::from_rows(&[vec![0.5, 0.5, 0.0, 0.0], vec![0.25; 4]]).unwrap());
        let l = sequence_loss(&mut g, two, &[0, 2]).unwrap();
        assert!((g.value(l).item() - 1.5 * 2f64.ln()).abs() < 1e-12);
        let zero_p = sequence_loss(&mut g, two, &[2, 0]).unwrap();
        assert!(g.value(zero_p).item().is_finite());
        assert!(matches!(sequence_loss(&mut g, two, &[4, 0]), Err(Error::Vocab { .. })));
    }

    #[test]
    fn masked_log_probs_blocks_specials() {
        let cfg = DecoderConfig::default();
        let dist = ExtendedDistribution {
            probs: vec![0.1, 0.1, 0.1, 0.4, 0.3],
            extended_size: 5,
        };
        let early = masked_log_probs(&dist, 2, &cfg);
        assert_eq!(early[EOS], f64::NEG_INFINITY);
        assert_eq!(early[PAD], f64::NEG_INFINITY);
        assert_eq!(early[BOS], f64::NEG_INFINITY);
        assert!(early[1].is_finite());
        let late = masked_log_probs(&dist, 5, &cfg);
        assert!((late[EOS] - 0.4f64.ln()).abs() < 1e-15);
    }
}
