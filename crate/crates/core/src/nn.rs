//! Parameterised building blocks: sinusoidal position encoding, scaled dot-product and
//! multi-head attention, bidirectional LSTM, position-wise feed-forward networks and the
//! residual + layer-norm sublayer wrapper.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Logit assigned to masked attention positions.
pub const MASK_LOGIT: f64 = -1e9;

/// Registers freshly initialised parameters under a name prefix.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    init_range: f64,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng, init_range: f64) -> Self {
        ParamBuilder {
            store,
            rng,
            init_range,
        }
    }

    /// Uniform in `[-init_range, init_range]`.
    pub fn uniform(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        let n: usize = shape.iter().product();
        let r = self.init_range;
        let data = (0..n)
            .map(|_| if r > 0.0 { self.rng.random_range(-r..=r) } else { 0.0 })
            .collect();
        self.store.add(name, Tensor::from_parts(shape.to_vec(), data))
    }

    pub fn filled(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> ParamId {
        self.store.add(name, Tensor::filled(shape, value))
    }
}

#[derive(Clone, Debug)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearParams {
    pub fn build(b: &mut ParamBuilder<'_>, name: &str, input: usize, output: usize) -> Self {
        LinearParams {
            weight: b.uniform(format!("{name}.weight"), &[input, output]),
            bias: b.filled(format!("{name}.bias"), &[output], 0.0),
        }
    }
}

/// `x · W + b` for `x[T×in]`.
pub fn linear(g: &mut Graph<'_>, p: &LinearParams, x: Var) -> Result<Var> {
    let w = g.param(p.weight);
    let b = g.param(p.bias);
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
}

/// Per-head query/key/value projections `[d_model×d]` and an output projection
/// `[(H·d)×d_model]`, with `d = d_model / H`.
#[derive(Clone, Debug)]
pub struct MultiHeadParams {
    pub heads: Vec<HeadParams>,
    pub output: ParamId,
}

impl MultiHeadParams {
    pub fn build(
        b: &mut ParamBuilder<'_>,
        name: &str,
        d_model: usize,
        head_count: usize,
    ) -> Result<Self> {
        if head_count == 0 || !d_model.is_multiple_of(head_count) {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by head count {head_count}"
            )));
        }
        let d = d_model / head_count;
        let heads = (0..head_count)
            .map(|j| HeadParams {
                query: b.uniform(format!("{name}.head{j}.query"), &[d_model, d]),
                key: b.uniform(format!("{name}.head{j}.key"), &[d_model, d]),
                value: b.uniform(format!("{name}.head{j}.value"), &[d_model, d]),
            })
            .collect();
        Ok(MultiHeadParams {
            heads,
            output: b.uniform(format!("{name}.output"), &[d_model, d_model]),
        })
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }
}

#[derive(Clone, Debug)]
pub struct LstmDirection {
    /// `[i×4h]`, gate blocks ordered input, forget, output, candidate.
    pub w_input: ParamId,
    /// `[h×4h]`
    pub w_hidden: ParamId,
    /// `[4h]`
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct LstmParams {
    pub forward: LstmDirection,
    pub backward: LstmDirection,
}

impl LstmParams {
    /// `hidden` is the per-direction state size.
    pub fn build(b: &mut ParamBuilder<'_>, name: &str, input: usize, hidden: usize) -> Self {
        let mut dir = |d: &str| LstmDirection {
            w_input: b.uniform(format!("{name}.{d}.w_input"), &[input, 4 * hidden]),
            w_hidden: b.uniform(format!("{name}.{d}.w_hidden"), &[hidden, 4 * hidden]),
            bias: b.filled(format!("{name}.{d}.bias"), &[4 * hidden], 0.0),
        };
        LstmParams {
            forward: dir("fwd"),
            backward: dir("bwd"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn build(b: &mut ParamBuilder<'_>, name: &str, d: usize) -> Self {
        LayerNormParams {
            gain: b.filled(format!("{name}.gain"), &[d], 1.0),
            bias: b.filled(format!("{name}.bias"), &[d], 0.0),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FeedForwardParams {
    pub inner: LinearParams,
    pub outer: LinearParams,
}

impl FeedForwardParams {
    pub fn build(b: &mut ParamBuilder<'_>, name: &str, d_model: usize, d_ff: usize) -> Self {
        FeedForwardParams {
            inner: LinearParams::build(b, &format!("{name}.inner"), d_model, d_ff),
            outer: LinearParams::build(b, &format!("{name}.outer"), d_ff, d_model),
        }
    }
}

/// One transformer layer. Decoder layers carry a context attention over the encoder
/// memory; encoder layers do not.
#[derive(Clone, Debug)]
pub struct TransformerLayerParams {
    pub self_attention: MultiHeadParams,
    pub context_attention: Option<MultiHeadParams>,
    pub feed_forward: FeedForwardParams,
    /// Two norms for encoder layers, three for decoder layers.
    pub norms: Vec<LayerNormParams>,
}

impl TransformerLayerParams {
    pub fn build(
        b: &mut ParamBuilder<'_>,
        name: &str,
        d_model: usize,
        head_count: usize,
        d_ff: usize,
        with_context: bool,
    ) -> Result<Self> {
        let self_attention = MultiHeadParams::build(b, &format!("{name}.self_attn"), d_model, head_count)?;
        let context_attention = if with_context {
            Some(MultiHeadParams::build(
                b,
                &format!("{name}.context_attn"),
                d_model,
                head_count,
            )?)
        } else {
            None
        };
        let feed_forward = FeedForwardParams::build(b, &format!("{name}.ffn"), d_model, d_ff);
        let count = if with_context { 3 } else { 2 };
        let norms = (0..count)
            .map(|i| LayerNormParams::build(b, &format!("{name}.norm{i}"), d_model))
            .collect();
        Ok(TransformerLayerParams {
            self_attention,
            context_attention,
            feed_forward,
            norms,
        })
    }
}

/// Sinusoidal encoding for positions `start..start + count`.
pub fn positional_encoding_from(start: usize, count: usize, d_model: usize) -> Result<Tensor> {
    if d_model == 0 || !d_model.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "positional encoding needs an even model width, got {d_model}"
        )));
    }
    if count == 0 {
        return Err(Error::Domain {
            op: "positional_encoding",
            detail: "zero positions".into(),
        });
    }
    let mut data = Vec::with_capacity(count * d_model);
    for pos in start..start + count {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf((2 * i) as f64 / d_model as f64);
            data.push(angle.sin());
            data.push(angle.cos());
        }
    }
    Ok(Tensor::from_parts(vec![count, d_model], data))
}

pub fn positional_encoding(count: usize, d_model: usize) -> Result<Tensor> {
    positional_encoding_from(0, count, d_model)
}

/// Lower-triangular mask for `t` positions; `true` marks an allowed key.
pub fn causal_mask(t: usize) -> Vec<bool> {
    (0..t * t).map(|k| k % t <= k / t).collect()
}

/// Softmax attention of `queries[Tq×d]` over `keys[T×d]`, returning the attended values
/// `[Tq×d_v]` and the weight matrix `[Tq×T]`. `allowed`, when given, has `Tq·T` entries.
pub fn attention(
    g: &mut Graph<'_>,
    queries: Var,
    keys: Var,
    values: Var,
    allowed: Option<&[bool]>,
) -> Result<(Var, Var)> {
    let (qs, ks, vs) = (g.shape(queries), g.shape(keys), g.shape(values));
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] {
        return Err(Error::shape("attention", qs, ks));
    }
    if ks[0] != vs[0] {
        return Err(Error::shape("attention", ks, vs));
    }
    let (tq, t, d) = (qs[0], ks[0], qs[1]);
    let kt = g.transpose(keys)?;
    let scores = g.matmul(queries, kt)?;
    let mut scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    if let Some(allowed) = allowed {
        if allowed.len() != tq * t {
            return Err(Error::shape("attention mask", &[tq, t], &[allowed.len()]));
        }
        if let Some(r) = (0..tq).find(|r| !allowed[r * t..(r + 1) * t].iter().any(|&a| a)) {
            return Err(Error::Domain {
                op: "attention",
                detail: format!("query row {r} has every key masked"),
            });
        }
        let fill: Vec<bool> = allowed.iter().map(|a| !a).collect();
        scores = g.masked_fill(scores, &fill, MASK_LOGIT)?;
    }
    let weights = g.softmax(scores, 1)?;
    let out = g.matmul(weights, values)?;
    Ok((out, weights))
}

/// Single-query attention: `q[d]`, `keys[T×d]`, `values[T×d_v]` → (`[d_v]`, `[T]`).
pub fn scaled_dot_attention(g: &mut Graph<'_>, q: Var, keys: Var, values: Var) -> Result<(Var, Var)> {
    let d = g.value(q).len();
    let q2 = g.reshape(q, &[1, d])?;
    let (out, w) = attention(g, q2, keys, values, None)?;
    let dv = g.value(out).len();
    let t = g.value(w).len();
    Ok((g.reshape(out, &[dv])?, g.reshape(w, &[t])?))
}

/// Keys and values already projected per head, so repeated queries against the same
/// memory skip the projection.
pub struct ProjectedMemory {
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
}

pub fn project_memory(g: &mut Graph<'_>, p: &MultiHeadParams, keys: Var, values: Var) -> Result<ProjectedMemory> {
    let mut pk = Vec::with_capacity(p.heads.len());
    let mut pv = Vec::with_capacity(p.heads.len());
    for h in &p.heads {
        let wk = g.param(h.key);
        let wv = g.param(h.value);
        pk.push(g.matmul(keys, wk)?);
        pv.push(g.matmul(values, wv)?);
    }
    Ok(ProjectedMemory {
        keys: pk,
        values: pv,
    })
}

/// Multi-head attention over pre-projected keys/values.
pub fn attend_projected(
    g: &mut Graph<'_>,
    p: &MultiHeadParams,
    queries: Var,
    memory: &ProjectedMemory,
    allowed: Option<&[bool]>,
) -> Result<(Var, Vec<Var>)> {
    let mut outs = Vec::with_capacity(p.heads.len());
    let mut weights = Vec::with_capacity(p.heads.len());
    for (j, h) in p.heads.iter().enumerate() {
        let wq = g.param(h.query);
        let q = g.matmul(queries, wq)?;
        let (o, w) = attention(g, q, memory.keys[j], memory.values[j], allowed)?;
        outs.push(o);
        weights.push(w);
    }
    let cat = g.concat(&outs, 1)?;
    let wo = g.param(p.output);
    Ok((g.matmul(cat, wo)?, weights))
}

/// Multi-head attention. Returns the projected output `[Tq×d_model]` and one
/// `[Tq×T]` weight matrix per head.
pub fn multi_head_attention(
    g: &mut Graph<'_>,
    p: &MultiHeadParams,
    queries: Var,
    keys: Var,
    values: Var,
    allowed: Option<&[bool]>,
) -> Result<(Var, Vec<Var>)> {
    let mem = project_memory(g, p, keys, values)?;
    attend_projected(g, p, queries, &mem, allowed)
}

fn lstm_direction(g: &mut Graph<'_>, p: &LstmDirection, inputs: Var, reverse: bool) -> Result<Vec<Var>> {
    let t = g.shape(inputs)[0];
    let w_in = g.param(p.w_input);
    let w_h = g.param(p.w_hidden);
    let bias = g.param(p.bias);
    let hsize = g.shape(w_h)[0];
    let projected = g.matmul(inputs, w_in)?;
    let mut h = g.constant(Tensor::zeros(&[1, hsize]));
    let mut c = g.constant(Tensor::zeros(&[1, hsize]));
    let mut states = vec![h; t];
    let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
    for step in order {
        let x = g.slice(projected, 0, step..step + 1)?;
        let rec = g.matmul(h, w_h)?;
        let gates = g.add(x, rec)?;
        let gates = g.add_row(gates, bias)?;
        let i_pre = g.slice(gates, 1, 0..hsize)?;
        let i = g.sigmoid(i_pre);
        let f_pre = g.slice(gates, 1, hsize..2 * hsize)?;
        let f = g.sigmoid(f_pre);
        let o_pre = g.slice(gates, 1, 2 * hsize..3 * hsize)?;
        let o = g.sigmoid(o_pre);
        let cand_pre = g.slice(gates, 1, 3 * hsize..4 * hsize)?;
        let cand = g.tanh(cand_pre);
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        c = g.add(keep, write)?;
        let tc = g.tanh(c);
        h = g.mul(o, tc)?;
        states[step] = h;
    }
    Ok(states)
}

/// Bidirectional LSTM over `inputs[T×i]` with zero initial states. Row `t` of the
/// result is `[forward_t; backward_t]`.
pub fn bilstm(g: &mut Graph<'_>, p: &LstmParams, inputs: Var) -> Result<Var> {
    let shape = g.shape(inputs).to_vec();
    if shape.len() != 2 {
        return Err(Error::shape("bilstm", &shape, &[]));
    }
    let w_in = g.param(p.forward.w_input);
    let in_size = g.shape(w_in)[0];
    if shape[1] != in_size {
        return Err(Error::shape("bilstm", &shape, &[shape[0], in_size]));
    }
    let fwd = lstm_direction(g, &p.forward, inputs, false)?;
    let bwd = lstm_direction(g, &p.backward, inputs, true)?;
    let f = g.concat(&fwd, 0)?;
    let b = g.concat(&bwd, 0)?;
    g.concat(&[f, b], 1)
}

/// `max(0, x·W₁ + b₁)·W₂ + b₂`, applied to each row.
pub fn feed_forward(g: &mut Graph<'_>, p: &FeedForwardParams, x: Var) -> Result<Var> {
    let hidden = linear(g, &p.inner, x)?;
    let hidden = g.relu(hidden);
    linear(g, &p.outer, hidden)
}

/// `LayerNorm(x + f(x))`.
pub fn sublayer(
    g: &mut Graph<'_>,
    x: Var,
    norm: &LayerNormParams,
    eps: f64,
    f: impl FnOnce(&mut Graph<'_>, Var) -> Result<Var>,
) -> Result<Var> {
    let y = f(g, x)?;
    if g.shape(y) != g.shape(x) {
        return Err(Error::shape("sublayer", g.shape(x), g.shape(y)));
    }
    let sum = g.add(x, y)?;
    let gain = g.param(norm.gain);
    let bias = g.param(norm.bias);
    g.layer_norm(sum, gain, bias, eps)
}

/// Inverted dropout with its own seeded generator. A zero rate is the identity.
pub struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, rng: ChaCha8Rng) -> Self {
        Dropout { rate, rng }
    }

    pub fn disabled() -> Self {
        use rand::SeedableRng;
        Dropout::new(0.0, ChaCha8Rng::seed_from_u64(0))
    }

    pub fn apply(&mut self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let shape = g.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = g.constant(Tensor::from_parts(shape, data));
        g.mul(x, mask)
    }
}
