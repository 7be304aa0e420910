//! Candidate reweighting by the model's own next-next-token probabilities.
//!
//! For each top-K candidate `x` the context is extended by `x` and the
//! model's probability `p_i` of each condition token following it is read
//! off. The candidate's base probability is multiplied by
//! `(Π p_i^{w_i})^{1/n}` and the K products are renormalized.

use crate::conditioning::{check_weight, WeightedToken};
use crate::distribution::{logits_to_distribution, TokenDistribution};
use crate::error::{Error, Result};
use crate::model::{KVCache, TokenId, Transformer};

/// Probabilities are clamped to this before exponentiation.
pub const SCORE_PROB_FLOOR: f64 = 1e-12;

/// `(Π max(p_i, floor)^{w_i})^{1/n}` over the conditions' probabilities in
/// `next`; 1 when there are no conditions.
pub fn weighted_condition_score(next: &TokenDistribution, conditions: &[WeightedToken]) -> f64 {
    if conditions.is_empty() {
        return 1.0;
    }
    let product: f64 = conditions
        .iter()
        .map(|c| next.prob(c.token_id).max(SCORE_PROB_FLOOR).powf(c.weight))
        .product();
    product.powf(1.0 / conditions.len() as f64)
}

fn check_conditions(model: &Transformer<'_>, conditions: &[WeightedToken]) -> Result<()> {
    let vocab_size = model.config().vocab_size;
    for c in conditions {
        check_weight(c.weight)?;
        if c.token_id as usize >= vocab_size {
            return Err(Error::Vocabulary {
                id: c.token_id,
                vocab_size,
            });
        }
    }
    Ok(())
}

/// Score of one candidate continuation, computed from scratch over
/// `context + [candidate]`.
pub fn condition_score(
    model: &Transformer<'_>,
    context: &[TokenId],
    candidate: TokenId,
    conditions: &[WeightedToken],
) -> Result<f64> {
    check_conditions(model, conditions)?;
    let mut seq = context.to_vec();
    seq.push(candidate);
    let (logits, _) = model.forward_full(&seq)?;
    let next = logits_to_distribution(logits.last(), 1.0)?;
    Ok(weighted_condition_score(&next, conditions))
}

/// Scores each candidate by stepping it on top of `cache` at `position` and
/// rolling the cache back afterwards.
pub fn score_candidates(
    model: &Transformer<'_>,
    cache: &mut KVCache,
    position: usize,
    candidates: &[TokenId],
    conditions: &[WeightedToken],
) -> Result<Vec<f64>> {
    check_conditions(model, conditions)?;
    let len = cache.len();
    candidates
        .iter()
        .map(|&cand| {
            let logits = model.forward_step(cache, cand, position);
            cache.truncate(len);
            let next = logits_to_distribution(&logits?, 1.0)?;
            Ok(weighted_condition_score(&next, conditions))
        })
        .collect()
}

/// Combines base probabilities of the top-K candidates with their scores.
/// Non-candidates get probability 0.
pub fn reweight(
    base: &TokenDistribution,
    candidates: &[TokenId],
    scores: &[f64],
    k: usize,
) -> Result<TokenDistribution> {
    if scores.iter().all(|&s| s == 1.0) {
        return base.top_k(k);
    }
    let mut mass = vec![0.0; base.len()];
    for (&cand, &score) in candidates.iter().zip(scores) {
        mass[cand as usize] = score * base.prob(cand);
    }
    TokenDistribution::from_unnormalized(mass)
}

/// Reweighted distribution over the top-K of `base` for the given context.
pub fn next_token_distribution(
    model: &Transformer<'_>,
    context: &[TokenId],
    base: &TokenDistribution,
    conditions: &[WeightedToken],
    k: usize,
) -> Result<TokenDistribution> {
    if k < 1 || k > base.len() {
        return Err(Error::usage(format!(
            "top-k {k} outside 1..={}",
            base.len()
        )));
    }
    let candidates = base.ranked(k);
    if conditions.iter().all(|c| c.weight == 0.0) {
        check_conditions(model, conditions)?;
        return base.top_k(k);
    }
    let mut cache = KVCache::new(model.config());
    model.extend(&mut cache, context, 0)?;
    let scores = score_candidates(model, &mut cache, context.len(), &candidates, conditions)?;
    reweight(base, &candidates, &scores, k)
}
