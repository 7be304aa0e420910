//! Decoder-only transformer inference with decoding-time conditioning.
//!
//! A small GPT-2-style engine ([`model`]), a byte-level BPE tokenizer
//! ([`tokenizer`]), a binary weight format ([`io`]), four conditioning
//! strategies ([`conditioning`]), a seeded sampling loop ([`sampler`]) and
//! perplexity / Dist-n metrics ([`evaluator`]).

pub mod conditioning;
pub mod distribution;
pub mod error;
pub mod evaluator;
pub mod io;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod tokenizer;

pub use conditioning::{Condition, GenerationConfig, Method, WeightedToken};
pub use distribution::{logits_to_distribution, TokenDistribution};
pub use error::{Error, Result};
pub use evaluator::{dist_n, evaluate_file, perplexity, MetricReport, MetricSelection};
pub use io::{make_test_model, make_zero_model, read_model, write_model};
pub use model::{forward_full, forward_step, KVCache, ModelConfig, TokenId, Transformer, Weights};
pub use rng::Xoshiro256;
pub use sampler::{detect_degeneration, generate, sample_multinomial, top_k_filter, SampleRecord};
pub use tokenizer::Tokenizer;
