//! Dialogue encoder: per-turn biLSTM utterance encoding, A↔B co-attention, enhancement,
//! a densely connected second biLSTM, and one transformer layer over the concatenated,
//! position-encoded turn memory.

use crate::data::SourceToken;
use crate::data::DialogueItem;
use crate::error::{Error, Result};
use crate::nn::{self, Dropout, LstmParams, TransformerLayerParams};
use crate::tensor::{Graph, ParamId, Var};

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub utterance_lstm: LstmParams,
    pub dense_lstm: LstmParams,
    pub memory_layer: TransformerLayerParams,
}

/// Co-attention weights of one turn: `a_to_b[ℓ_A×ℓ_B]` and `b_to_a[ℓ_B×ℓ_A]`.
#[derive(Clone, Copy, Debug)]
pub struct TurnAttention {
    pub a_to_b: Var,
    pub b_to_a: Var,
}

pub struct Interaction {
    pub s_a: Var,
    pub s_b: Var,
    pub attention: TurnAttention,
}

/// Memory bank `M′[L×d_model]` with one alignment entry per row.
pub struct EncoderMemory {
    pub memory: Var,
    pub alignment: Vec<SourceToken>,
    /// Per-head self-attention weights of the memory transformer layer.
    pub self_attention: Vec<Var>,
}

pub struct EncoderOutput {
    pub memory: EncoderMemory,
    pub interactions: Vec<TurnAttention>,
}

/// Embeds and encodes both utterances of a turn with the shared first biLSTM.
/// Returns `(h_a, h_b, v_a, v_b)`.
pub fn encode_utterance_pair(
    g: &mut Graph<'_>,
    embedding: ParamId,
    lstm: &LstmParams,
    a: &[usize],
    b: &[usize],
) -> Result<(Var, Var, Var, Var)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Data("empty utterance reached the encoder".into()));
    }
    let table = g.param(embedding);
    let v_a = g.embed(table, a)?;
    let v_b = g.embed(table, b)?;
    let h_a = nn::bilstm(g, lstm, v_a)?;
    let h_b = nn::bilstm(g, lstm, v_b)?;
    Ok((h_a, h_b, v_a, v_b))
}

/// Each token of one speaker attends over the other speaker's representations.
pub fn interact(g: &mut Graph<'_>, h_a: Var, h_b: Var) -> Result<Interaction> {
    let (s_a, a_to_b) = nn::attention(g, h_a, h_b, h_b, None)?;
    let (s_b, b_to_a) = nn::attention(g, h_b, h_a, h_a, None)?;
    Ok(Interaction {
        s_a,
        s_b,
        attention: TurnAttention { a_to_b, b_to_a },
    })
}

/// `[h; s; h − s; h ⊙ s]` along the feature axis.
pub fn enhance(g: &mut Graph<'_>, h: Var, s: Var) -> Result<Var> {
    if g.shape(h) != g.shape(s) {
        return Err(Error::shape("enhance", g.shape(h), g.shape(s)));
    }
    let diff = g.sub(h, s)?;
    let prod = g.mul(h, s)?;
    g.concat(&[h, s, diff, prod], 1)
}

/// Second biLSTM over `[ŝ_t; v_t]`.
pub fn dense_recurrent(g: &mut Graph<'_>, lstm: &LstmParams, enhanced: Var, embedded: Var) -> Result<Var> {
    let x = g.concat(&[enhanced, embedded], 1)?;
    nn::bilstm(g, lstm, x)
}

/// Concatenates the per-turn representations turn-major (A before B), adds position
/// encoding over global positions and applies one encoder transformer layer.
pub fn memory_output(
    g: &mut Graph<'_>,
    layer: &TransformerLayerParams,
    turns: &[(Var, Var)],
    alignment: Vec<SourceToken>,
    eps: f64,
    dropout: &mut Dropout,
) -> Result<EncoderMemory> {
    if turns.is_empty() {
        return Err(Error::Data("dialogue has no turns".into()));
    }
    let parts: Vec<Var> = turns.iter().flat_map(|&(a, b)| [a, b]).collect();
    let m = g.concat(&parts, 0)?;
    let (rows, d) = (g.shape(m)[0], g.shape(m)[1]);
    if rows != alignment.len() {
        return Err(Error::shape("memory alignment", &[rows], &[alignment.len()]));
    }
    let pe = g.constant(nn::positional_encoding(rows, d)?);
    let m = g.add(m, pe)?;

    let mut self_attention = Vec::new();
    let x = nn::sublayer(g, m, &layer.norms[0], eps, |g, x| {
        let (y, w) = nn::multi_head_attention(g, &layer.self_attention, x, x, x, None)?;
        self_attention = w;
        dropout.apply(g, y)
    })?;
    let memory = nn::sublayer(g, x, &layer.norms[1], eps, |g, x| {
        let y = nn::feed_forward(g, &layer.feed_forward, x)?;
        dropout.apply(g, y)
    })?;
    Ok(EncoderMemory {
        memory,
        alignment,
        self_attention,
    })
}

pub fn encode_dialogue(
    g: &mut Graph<'_>,
    embedding: ParamId,
    p: &EncoderParams,
    item: &DialogueItem,
    eps: f64,
    dropout: &mut Dropout,
) -> Result<EncoderOutput> {
    let mut per_turn = Vec::with_capacity(item.turns.len());
    let mut interactions = Vec::with_capacity(item.turns.len());
    for turn in &item.turns {
        let (h_a, h_b, v_a, v_b) = encode_utterance_pair(g, embedding, &p.utterance_lstm, &turn.a, &turn.b)?;
        let inter = interact(g, h_a, h_b)?;
        let e_a = enhance(g, h_a, inter.s_a)?;
        let e_b = enhance(g, h_b, inter.s_b)?;
        let hp_a = dense_recurrent(g, &p.dense_lstm, e_a, v_a)?;
        let hp_b = dense_recurrent(g, &p.dense_lstm, e_b, v_b)?;
        per_turn.push((hp_a, hp_b));
        interactions.push(inter.attention);
    }
    let memory = memory_output(g, &p.memory_layer, &per_turn, item.source.clone(), eps, dropout)?;
    Ok(EncoderOutput {
        memory,
        interactions,
    })
}
