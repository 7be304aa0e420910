#![allow(dead_code)]

use std::collections::HashMap;

use steered_core::tokenizer::bytes_to_unicode;
use steered_core::{make_test_model, ModelConfig, TokenId, Tokenizer, Weights};

pub const MERGES: &[(&str, &str)] = &[("Ġ", "t"), ("h", "e"), ("Ġt", "he"), ("i", "n")];

/// Byte-level tokenizer: 256 byte symbols in byte order, then `MERGES`.
pub fn byte_tokenizer() -> Tokenizer {
    let table = bytes_to_unicode();
    let mut vocab: HashMap<String, TokenId> = (0..256)
        .map(|b| (table[b].to_string(), b as TokenId))
        .collect();
    for (a, b) in MERGES {
        let id = vocab.len() as TokenId;
        vocab.insert(format!("{a}{b}"), id);
    }
    let merges = MERGES
        .iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect();
    Tokenizer::from_parts(vocab, merges).unwrap()
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig::new(64, 128, 32, 2, 4).unwrap()
}

/// Same shape as `tiny_config` with the byte tokenizer's vocabulary.
pub fn text_config() -> ModelConfig {
    ModelConfig::new(256 + MERGES.len(), 128, 32, 2, 4).unwrap()
}

/// Seeded test model with every parameter scaled by `scale`, giving peaked
/// rather than near-uniform distributions.
pub fn scaled_model(config: &ModelConfig, seed: u64, scale: f32) -> Weights {
    let mut w = make_test_model(config, seed);
    for (name, t) in w.named_tensors_mut() {
        if name.contains("ln_") {
            continue;
        }
        t.iter_mut().for_each(|v| *v *= scale);
    }
    w.tie_embeddings();
    w
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}
