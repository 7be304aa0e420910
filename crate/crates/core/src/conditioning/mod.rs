//! Decoding-time conditioning on attribute words.
//!
//! Four strategies, each usable alone or combined:
//!
//! - [`prefix`]: prepend a conditional sentence, dropped after a fixed number
//!   of generated tokens.
//! - [`embedding`]: blend condition-token embeddings into every input
//!   embedding (output embedding untouched).
//! - [`attention`]: blend condition-token key/value columns into the cache,
//!   with weights decaying over generated steps.
//! - [`next_token`]: reweight the top-K candidates by how likely each makes
//!   the condition token as the following token.

pub mod attention;
pub mod embedding;
pub mod next_token;
pub mod prefix;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenId;
use crate::tokenizer::Tokenizer;

pub use attention::{blend_kv, condition_kv, ConditionKvTable};
pub use embedding::blend_input_embeddings;
pub use next_token::{
    condition_score, next_token_distribution, weighted_condition_score, SCORE_PROB_FLOOR,
};
pub use prefix::{
    apply_prefix_cutoff, build_prefix, detached_prefix_setup, prefix_sentence, PrefixPlan,
};

pub const DEFAULT_TOP_K: usize = 12;
pub const DEFAULT_EMBED_WEIGHT: f64 = 0.04;
pub const DEFAULT_ATTENTION_WEIGHT: f64 = 0.02;
pub const DEFAULT_CONDITION_WEIGHT: f64 = 0.20;
pub const DEFAULT_EARLY_STOPPING_STEPS: usize = 3;
pub const DEFAULT_MAX_TOKENS: usize = 60;
pub const DEFAULT_DEGENERATION_WINDOW: usize = 16;
pub const DEFAULT_DEGENERATION_THRESHOLD: f64 = 0.5;

/// An attribute word resolved to a token. `weight` of `None` defers to the
/// strategy's configured default.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub word: String,
    pub token_id: TokenId,
    pub weight: Option<f64>,
}

impl Condition {
    pub fn resolve(word: &str, tokenizer: &Tokenizer, weight: Option<f64>) -> Result<Self> {
        if let Some(w) = weight {
            check_weight(w)?;
        }
        Ok(Self {
            word: word.to_string(),
            token_id: tokenizer.condition_first_token(word)?,
            weight,
        })
    }

    fn disabled(&self) -> bool {
        self.weight == Some(0.0)
    }
}

/// A condition token with the weight one strategy applies to it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedToken {
    pub token_id: TokenId,
    pub weight: f64,
}

impl WeightedToken {
    pub fn new(token_id: TokenId, weight: f64) -> Self {
        Self { token_id, weight }
    }
}

pub(crate) fn check_weight(w: f64) -> Result<()> {
    if !(w.is_finite() && w >= 0.0) {
        return Err(Error::usage(format!(
            "weights must be finite and non-negative, got {w}"
        )));
    }
    Ok(())
}

pub(crate) fn total_weight(conditions: &[WeightedToken]) -> f64 {
    conditions.iter().map(|c| c.weight).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Prefix,
    Embedding,
    Attention,
    NextToken,
    Combined,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Prefix,
        Method::Embedding,
        Method::Attention,
        Method::NextToken,
        Method::Combined,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Prefix => "prefix",
            Method::Embedding => "embedding",
            Method::Attention => "attention",
            Method::NextToken => "next-token",
            Method::Combined => "combined",
        }
    }

    pub fn uses_prefix(self) -> bool {
        matches!(self, Method::Prefix | Method::Combined)
    }

    pub fn uses_embedding(self) -> bool {
        matches!(self, Method::Embedding | Method::Combined)
    }

    pub fn uses_attention(self) -> bool {
        matches!(self, Method::Attention | Method::Combined)
    }

    pub fn uses_next_token(self) -> bool {
        matches!(self, Method::NextToken | Method::Combined)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::usage(format!(
                    "unknown method {s:?}; expected one of prefix, embedding, attention, next-token, combined"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegenerationParams {
    pub window: usize,
    pub threshold: f64,
}

impl Default for DegenerationParams {
    fn default() -> Self {
        Self {
            window: DEFAULT_DEGENERATION_WINDOW,
            threshold: DEFAULT_DEGENERATION_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationConfig {
    pub method: Method,
    pub conditions: Vec<Condition>,
    pub top_k: usize,
    pub embed_weight: f64,
    pub attention_weight: f64,
    /// Exponent on the condition probability when reweighting candidates.
    pub condition_weight: f64,
    /// Generated-token count at which the conditional prefix is dropped.
    pub early_stopping_steps: usize,
    pub max_tokens: usize,
    pub temperature: f64,
    pub seed: u64,
    /// Keep the prefix keys/values and restart positions at 0 instead of
    /// cutting the prefix off. Known to produce garbled text.
    pub detached_prefix_experiment: bool,
    /// Replaces the sentence built from the conditions; empty disables it.
    pub prefix_text: Option<String>,
    pub degeneration: DegenerationParams,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            method: Method::Combined,
            conditions: Vec::new(),
            top_k: DEFAULT_TOP_K,
            embed_weight: DEFAULT_EMBED_WEIGHT,
            attention_weight: DEFAULT_ATTENTION_WEIGHT,
            condition_weight: DEFAULT_CONDITION_WEIGHT,
            early_stopping_steps: DEFAULT_EARLY_STOPPING_STEPS,
            max_tokens: DEFAULT_MAX_TOKENS,
            temperature: 1.0,
            seed: 0,
            detached_prefix_experiment: false,
            prefix_text: None,
            degeneration: DegenerationParams::default(),
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k < 1 {
            return Err(Error::usage("top_k must be at least 1"));
        }
        if self.max_tokens < 1 {
            return Err(Error::usage("max_tokens must be at least 1"));
        }
        for w in [
            self.embed_weight,
            self.attention_weight,
            self.condition_weight,
        ] {
            check_weight(w)?;
        }
        for c in &self.conditions {
            if let Some(w) = c.weight {
                check_weight(w)?;
            }
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::usage("temperature must be positive"));
        }
        let DegenerationParams { window, threshold } = self.degeneration;
        if window < 2 || !(threshold > 0.0 && threshold <= 1.0) {
            return Err(Error::usage(
                "degeneration window must be >= 2 and threshold in (0, 1]",
            ));
        }
        Ok(())
    }

    /// Default weight of the method's primary strategy; what an omitted
    /// per-condition weight means for this method.
    pub fn primary_weight(&self) -> f64 {
        match self.method {
            Method::Prefix => 1.0,
            Method::Embedding => self.embed_weight,
            Method::Attention => self.attention_weight,
            Method::NextToken | Method::Combined => self.condition_weight,
        }
    }

    fn strategy_weights(&self, standalone: Method, global: f64) -> Vec<WeightedToken> {
        if self.method != standalone && self.method != Method::Combined {
            return Vec::new();
        }
        self.conditions
            .iter()
            .filter(|c| !c.disabled())
            .map(|c| {
                // In combined mode an explicit weight is the next-token
                // exponent; the state-level strategies keep their globals.
                let w = if self.method == standalone {
                    c.weight.unwrap_or(global)
                } else {
                    global
                };
                WeightedToken::new(c.token_id, w)
            })
            .filter(|c| c.weight > 0.0)
            .collect()
    }

    pub fn embedding_conditions(&self) -> Vec<WeightedToken> {
        self.strategy_weights(Method::Embedding, self.embed_weight)
    }

    pub fn attention_conditions(&self) -> Vec<WeightedToken> {
        self.strategy_weights(Method::Attention, self.attention_weight)
    }

    pub fn next_token_conditions(&self) -> Vec<WeightedToken> {
        if !self.method.uses_next_token() {
            return Vec::new();
        }
        self.conditions
            .iter()
            .filter(|c| !c.disabled())
            .map(|c| WeightedToken::new(c.token_id, c.weight.unwrap_or(self.condition_weight)))
            .collect()
    }

    /// Conditions named in the conditional prefix (explicit zero weight
    /// drops a condition).
    pub fn prefix_conditions(&self) -> Vec<&Condition> {
        if !self.method.uses_prefix() {
            return Vec::new();
        }
        self.conditions.iter().filter(|c| !c.disabled()).collect()
    }
}
