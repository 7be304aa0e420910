//! Conditional prefix sentence and its removal after a fixed step.

use crate::conditioning::Condition;
use crate::error::{Error, Result};
use crate::model::{KVCache, TokenId, Transformer};
use crate::tokenizer::Tokenizer;

/// Condition words rendered as a sentiment rather than a topic.
pub const SENTIMENT_WORDS: &[&str] = &["positive", "negative"];

#[derive(Debug, Clone, PartialEq)]
pub struct PrefixPlan {
    pub text: String,
    pub token_ids: Vec<TokenId>,
    /// Number of generated tokens after which the prefix is cut off.
    pub cutoff_step: usize,
}

fn is_sentiment(word: &str) -> bool {
    SENTIMENT_WORDS.iter().any(|s| s.eq_ignore_ascii_case(word))
}

/// Renders the conditional sentence for a list of condition words, e.g.
/// `The following is a positive article about politics.`
pub fn prefix_sentence<S: AsRef<str>>(words: &[S]) -> Result<String> {
    if words.is_empty() {
        return Err(Error::usage(
            "a conditional prefix needs at least one condition",
        ));
    }
    let (sentiments, topics): (Vec<&str>, Vec<&str>) = words
        .iter()
        .map(AsRef::as_ref)
        .partition(|w| is_sentiment(w));
    let sentiments = sentiments.join(" and ");
    let topics = topics.join(" and ");
    Ok(match (sentiments.is_empty(), topics.is_empty()) {
        (true, _) => format!("The following is an article about {topics}."),
        (false, true) => format!("The following is a {sentiments} article."),
        (false, false) => format!("The following is a {sentiments} article about {topics}."),
    })
}

pub fn build_prefix(
    conditions: &[&Condition],
    tokenizer: &Tokenizer,
    cutoff_step: usize,
) -> Result<PrefixPlan> {
    let words: Vec<&str> = conditions.iter().map(|c| c.word.as_str()).collect();
    let text = prefix_sentence(&words)?;
    Ok(PrefixPlan {
        token_ids: tokenizer.encode(&text),
        text,
        cutoff_step,
    })
}

/// At `generated_count == plan.cutoff_step` the cache is rebuilt from the
/// visible tokens alone (prompt plus generated, no prefix) with positions
/// renumbered from 0. Any other count returns `cache` unchanged.
pub fn apply_prefix_cutoff(
    model: &Transformer<'_>,
    cache: KVCache,
    plan: &PrefixPlan,
    generated_count: usize,
    visible: &[TokenId],
) -> Result<KVCache> {
    if generated_count != plan.cutoff_step {
        return Ok(cache);
    }
    if visible.is_empty() {
        return Ok(KVCache::new(model.config()));
    }
    Ok(model.forward_full(visible)?.1)
}

/// Feeds the conditional sentence and returns its cache. Generation then
/// continues on top of it with positions restarting at 0.
pub fn detached_prefix_setup(model: &Transformer<'_>, plan: &PrefixPlan) -> Result<KVCache> {
    if plan.token_ids.is_empty() {
        return Ok(KVCache::new(model.config()));
    }
    Ok(model.forward_full(&plan.token_ids)?.1)
}
