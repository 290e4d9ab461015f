//! The full dialogue-to-description model: shared embedding, dialogue encoder and
//! pointer-generator decoder over one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::EncodedExample;
use crate::decoder::{self, DecoderCache, DecoderConfig, DecoderOutputs, DecoderParams, DecoderStepOutput, MemoryContext};
use crate::encoder::{self, EncoderOutput, EncoderParams};
use crate::error::{Error, Result};
use crate::nn::{Dropout, LinearParams, LstmParams, ParamBuilder, TransformerLayerParams};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Base vocabulary size, reserved ids included.
    pub vocab_size: usize,
    /// Embedding width and every inter-layer width.
    pub d_model: usize,
    pub encoder_heads: usize,
    pub encoder_d_ff: usize,
    pub decoder: DecoderConfig,
    pub dropout: f64,
    pub init_range: f64,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 20000,
            d_model: 256,
            encoder_heads: 4,
            encoder_d_ff: 1024,
            decoder: DecoderConfig::default(),
            dropout: 0.0,
            init_range: 0.1,
            layer_norm_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size < 5 {
            return fail(format!("vocab_size {} leaves no content tokens", self.vocab_size));
        }
        if self.d_model == 0 || !self.d_model.is_multiple_of(2) {
            return fail(format!("d_model must be even and positive, got {}", self.d_model));
        }
        for (what, h) in [("encoder_heads", self.encoder_heads), ("decoder.head_count", self.decoder.head_count)] {
            if h == 0 || !self.d_model.is_multiple_of(h) {
                return fail(format!("d_model {} is not divisible by {what} {h}", self.d_model));
            }
        }
        if self.encoder_d_ff == 0 || self.decoder.d_ff == 0 || self.decoder.layer_count == 0 {
            return fail("feed-forward widths and decoder layer_count must be positive".into());
        }
        let d = &self.decoder;
        if d.max_target_len == 0 || d.min_target_len > d.max_target_len {
            return fail(format!(
                "target length bounds {}..={} are invalid",
                d.min_target_len, d.max_target_len
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.init_range >= 0.0 && self.init_range.is_finite()) {
            return fail(format!("init_range {} must be finite and nonnegative", self.init_range));
        }
        if self.layer_norm_eps.is_nan() || self.layer_norm_eps <= 0.0 {
            return fail("layer_norm_eps must be positive".into());
        }
        Ok(())
    }
}

/// Encoder output and teacher-forced decoder outputs of one example.
pub struct ForwardPass {
    pub encoder: EncoderOutput,
    pub decoder: DecoderOutputs,
}

/// Detached encoder values of one example.
#[derive(Clone, Debug)]
pub struct EncoderOutputValues {
    /// `[L×d_model]`
    pub memory: Tensor,
    /// Per turn: `(A→B [ℓ_A×ℓ_B], B→A [ℓ_B×ℓ_A])`.
    pub interactions: Vec<(Tensor, Tensor)>,
    /// Per-head `[L×L]` weights of the memory transformer layer.
    pub memory_self_attention: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub embedding: ParamId,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
}

impl Model {
    /// Fresh model with seeded uniform initialisation.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let range = config.init_range;
        let mut b = ParamBuilder::new(&mut params, &mut rng, range);
        let d = config.d_model;
        let embedding = b.uniform("embedding", &[config.vocab_size, d]);
        let encoder = EncoderParams {
            utterance_lstm: LstmParams::build(&mut b, "encoder.utterance_lstm", d, d / 2),
            dense_lstm: LstmParams::build(&mut b, "encoder.dense_lstm", 5 * d, d / 2),
            memory_layer: TransformerLayerParams::build(
                &mut b,
                "encoder.memory",
                d,
                config.encoder_heads,
                config.encoder_d_ff,
                false,
            )?,
        };
        let dc = &config.decoder;
        let layers = (0..dc.layer_count)
            .map(|i| TransformerLayerParams::build(&mut b, &format!("decoder.layer{i}"), d, dc.head_count, dc.d_ff, true))
            .collect::<Result<Vec<_>>>()?;
        let decoder = DecoderParams {
            layers,
            vocab_projection: LinearParams::build(&mut b, "decoder.vocab", d, config.vocab_size),
            gate: LinearParams::build(&mut b, "decoder.gate", d, 1),
        };
        Ok(Model {
            config,
            params,
            embedding,
            encoder,
            decoder,
        })
    }

    /// Model whose parameters come from `store`, matched by name and checked by shape.
    pub fn with_params(config: ModelConfig, store: ParamStore) -> Result<Self> {
        let mut model = Model::new(
            ModelConfig {
                init_range: 0.0,
                ..config.clone()
            },
            0,
        )?;
        model.config = config;
        if store.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                store.len()
            )));
        }
        for id in model.params.ids().collect::<Vec<_>>() {
            let name = model.params.name(id).to_string();
            let src = store
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter tensor {name}")))?;
            model.params.set(id, store.get(src).clone())?;
        }
        Ok(model)
    }

    pub fn dropout(&self, seed: u64) -> Dropout {
        Dropout::new(self.config.dropout, ChaCha8Rng::seed_from_u64(seed))
    }

    /// Builds the full teacher-forced computation for `ex` into `g`.
    pub fn forward(&self, g: &mut Graph<'_>, ex: &EncodedExample, dropout: &mut Dropout) -> Result<ForwardPass> {
        let eps = self.config.layer_norm_eps;
        let enc = encoder::encode_dialogue(g, self.embedding, &self.encoder, &ex.item, eps, dropout)?;
        let dec = decoder::decoder_forward(
            g,
            self.embedding,
            &self.decoder,
            &self.config.decoder,
            &ex.decoder_input(),
            &enc.memory,
            ex.ext.size(),
            eps,
            dropout,
        )?;
        Ok(ForwardPass {
            encoder: enc,
            decoder: dec,
        })
    }

    /// Mean per-token negative log-likelihood of the reference description.
    pub fn loss(&self, ex: &EncodedExample) -> Result<f64> {
        let mut g = Graph::with_params(&self.params, false);
        let fp = self.forward(&mut g, ex, &mut Dropout::disabled())?;
        let loss = decoder::sequence_loss(&mut g, fp.decoder.distribution, ex.decoder_output())?;
        Ok(g.value(loss).item())
    }

    /// Loss and per-parameter gradients of one example. Parameters the example never
    /// touches have `None`.
    pub fn loss_and_gradients(&self, ex: &EncodedExample, dropout: &mut Dropout) -> Result<(f64, Vec<Option<Tensor>>)> {
        let mut g = Graph::with_params(&self.params, true);
        let fp = self.forward(&mut g, ex, dropout)?;
        let loss = decoder::sequence_loss(&mut g, fp.decoder.distribution, ex.decoder_output())?;
        let value = g.value(loss).item();
        g.backward(loss)?;
        Ok((value, g.param_grads()))
    }

    /// Teacher-forced step outputs for an arbitrary prefix `BOS, w₁ …` in extended ids;
    /// ids outside the base vocabulary are fed as UNK.
    pub fn teacher_forced(&self, ex: &EncodedExample, prefix: &[usize]) -> Result<(EncoderOutputValues, Vec<DecoderStepOutput>)> {
        let input: Vec<usize> = prefix
            .iter()
            .map(|&id| if id >= self.config.vocab_size { crate::data::UNK } else { id })
            .collect();
        let eps = self.config.layer_norm_eps;
        let mut dropout = Dropout::disabled();
        let mut g = Graph::with_params(&self.params, false);
        let enc = encoder::encode_dialogue(&mut g, self.embedding, &self.encoder, &ex.item, eps, &mut dropout)?;
        let dec = decoder::decoder_forward(
            &mut g,
            self.embedding,
            &self.decoder,
            &self.config.decoder,
            &input,
            &enc.memory,
            ex.ext.size(),
            eps,
            &mut dropout,
        )?;
        let values = EncoderOutputValues {
            memory: g.value(enc.memory.memory).clone(),
            interactions: enc
                .interactions
                .iter()
                .map(|t| (g.value(t.a_to_b).clone(), g.value(t.b_to_a).clone()))
                .collect(),
            memory_self_attention: enc.memory.self_attention.iter().map(|&v| g.value(v).clone()).collect(),
        };
        Ok((values, dec.step_outputs(&g)))
    }

    /// Encodes the dialogue once and projects the memory for incremental decoding.
    pub fn memory_context(&self, ex: &EncodedExample) -> Result<MemoryContext> {
        let mut g = Graph::with_params(&self.params, false);
        let enc = encoder::encode_dialogue(
            &mut g,
            self.embedding,
            &self.encoder,
            &ex.item,
            self.config.layer_norm_eps,
            &mut Dropout::disabled(),
        )?;
        let memory = g.value(enc.memory.memory).clone();
        drop(g);
        let ext_ids = ex.item.source.iter().map(|s| s.ext_id).collect();
        MemoryContext::new(&self.params, &self.decoder, memory, ext_ids, ex.ext.size())
    }

    pub fn new_cache(&self) -> DecoderCache {
        DecoderCache::new(self.decoder.layers.len())
    }

    /// Feeds one token; ids outside the base vocabulary are fed as UNK.
    pub fn decode_step(&self, ctx: &MemoryContext, cache: &mut DecoderCache, token: usize) -> Result<DecoderStepOutput> {
        let input = if token >= self.config.vocab_size { crate::data::UNK } else { token };
        decoder::decode_step(
            &self.params,
            self.embedding,
            &self.decoder,
            &self.config.decoder,
            self.config.layer_norm_eps,
            ctx,
            cache,
            input,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{encode_example, CorpusRecord, EncodeLimits, Speaker, Utterance, Vocabulary, BOS};

    fn tiny_config(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: 8,
            encoder_heads: 2,
            encoder_d_ff: 12,
            decoder: DecoderConfig {
                layer_count: 2,
                head_count: 2,
                d_ff: 12,
                max_target_len: 15,
                min_target_len: 1,
            },
            ..ModelConfig::default()
        }
    }

    fn toy() -> (Vocabulary, EncodedExample) {
        let rec = CorpusRecord {
            id: "r".into(),
            dialogue: vec![
                Utterance {
                    speaker: Speaker::A,
                    text: "is it a dog ?".into(),
                },
                Utterance {
                    speaker: Speaker::B,
                    text: "yes , brown zebra".into(),
                },
            ],
            description: "a brown dog".into(),
            references: None,
        };
        let vocab = Vocabulary::from_tokens(
            ["<pad>", "<unk>", "<s>", "</s>", "a", "dog", "is", "it", "?", "yes"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        )
        .unwrap();
        let ex = encode_example(&rec, &vocab, EncodeLimits::default());
        (vocab, ex)
    }

    #[test]
    fn incremental_decoding_matches_teacher_forcing() {
        let (vocab, ex) = toy();
        let model = Model::new(tiny_config(vocab.len()), 3).unwrap();
        let mut g = Graph::with_params(&model.params, false);
        let fp = model.forward(&mut g, &ex, &mut Dropout::disabled()).unwrap();
        let full = fp.decoder.step_outputs(&g);
        let ctx = model.memory_context(&ex).unwrap();
        let mut cache = model.new_cache();
        let input = ex.decoder_input();
        assert_eq!(input[0], BOS);
        for (t, &tok) in input.iter().enumerate() {
            let step = model.decode_step(&ctx, &mut cache, tok).unwrap();
            for (a, b) in step.distribution.probs.iter().zip(&full[t].distribution.probs) {
                assert!((a - b).abs() < 1e-12, "position {t}");
            }
            assert!((step.p_gen - full[t].p_gen).abs() < 1e-12);
        }
    }

    #[test]
    fn with_params_round_trips_and_rejects_bad_shapes() {
        let (vocab, ex) = toy();
        let cfg = tiny_config(vocab.len());
        let model = Model::new(cfg.clone(), 9).unwrap();
        let clone = Model::with_params(cfg.clone(), model.params.clone()).unwrap();
        assert_eq!(model.loss(&ex).unwrap(), clone.loss(&ex).unwrap());

        let bigger = Model::new(tiny_config(vocab.len() + 1), 9).unwrap();
        match Model::with_params(cfg, bigger.params) {
            Err(Error::CheckpointShape { name, .. }) => assert_eq!(name, "embedding"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config(10);
        assert!(c.validate().is_ok());
        c.encoder_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny_config(10);
        c.decoder.min_target_len = 16;
        assert!(c.validate().is_err());
        let mut c = tiny_config(10);
        c.d_model = 7;
        assert!(c.validate().is_err());
    }

    #[test]
    fn distributions_are_normalised() {
        let (vocab, ex) = toy();
        let model = Model::new(tiny_config(vocab.len()), 1).unwrap();
        let mut g = Graph::with_params(&model.params, false);
        let fp = model.forward(&mut g, &ex, &mut Dropout::disabled()).unwrap();
        for s in fp.decoder.step_outputs(&g) {
            assert_eq!(s.distribution.extended_size, ex.ext.size());
            assert!((s.distribution.total() - 1.0).abs() < 1e-9);
            assert!(s.distribution.probs.iter().all(|&p| p >= 0.0));
            assert!(s.p_gen > 0.0 && s.p_gen < 1.0);
            for h in 0..s.context_attention.rows() {
                let r: f64 = s.context_attention.row(h).iter().sum();
                assert!((r - 1.0).abs() < 1e-9);
            }
        }
    }
}
