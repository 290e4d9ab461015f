#![allow(dead_code)]

use std::path::PathBuf;

use dialdesc::data::{encode_example, read_corpus, CorpusRecord, EncodeLimits, EncodedExample, Vocabulary};
use dialdesc::decoder::DecoderConfig;
use dialdesc::training::{AdamConfig, BatchConfig, OptimizerConfig, TrainConfig};
use dialdesc::ModelConfig;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn toy_records() -> Vec<CorpusRecord> {
    read_corpus(&fixture("toy_corpus.jsonl")).unwrap()
}

pub fn toy_data() -> (Vocabulary, Vec<EncodedExample>) {
    let records = toy_records();
    let vocab = Vocabulary::build(&records, 20000).unwrap();
    let examples = records
        .iter()
        .map(|r| encode_example(r, &vocab, EncodeLimits::default()))
        .collect();
    (vocab, examples)
}

pub fn small_config(vocab_size: usize, d_model: usize) -> ModelConfig {
    ModelConfig {
        vocab_size,
        d_model,
        encoder_heads: 4,
        encoder_d_ff: 2 * d_model,
        decoder: DecoderConfig {
            layer_count: 2,
            head_count: 4,
            d_ff: 2 * d_model,
            max_target_len: 15,
            min_target_len: 5,
        },
        ..ModelConfig::default()
    }
}

pub fn overfit_train_config(steps: u64) -> TrainConfig {
    TrainConfig {
        optimizer: OptimizerConfig::AdamWarmup(AdamConfig {
            warmup_steps: 200,
            ..AdamConfig::default()
        }),
        batch: BatchConfig::examples(8),
        max_steps: steps,
        clip_norm: 2.0,
        eval_every: 0,
        checkpoint_every: 0,
        seed: 7,
    }
}
