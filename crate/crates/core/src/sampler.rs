//! Seeded decoding loop.
//!
//! Per generated token the pipeline applies the state-level strategies
//! before the distribution-level one:
//!
//! 1. input embeddings blended once per session,
//! 2. the conditional prefix, rebuilt away after `early_stopping_steps`,
//! 3. key/value blending with weights decayed by tokens generated so far,
//! 4. top-K candidate reweighting,
//!
//! then a multinomial draw from the final distribution. Exactly
//! `max_tokens` tokens are emitted; there is no end-of-text stop.

use serde::{Deserialize, Serialize};

use crate::conditioning::attention::{blend_kv, ConditionKvTable};
use crate::conditioning::embedding::blend_input_embeddings;
use crate::conditioning::next_token::{reweight, score_candidates};
use crate::conditioning::prefix::{
    apply_prefix_cutoff, build_prefix, detached_prefix_setup, PrefixPlan,
};
use crate::conditioning::{GenerationConfig, Method, WeightedToken};
use crate::distribution::{logits_to_distribution, TokenDistribution};
use crate::error::{Error, Result};
use crate::model::{KVCache, ModelConfig, TokenId, Transformer, Weights};
use crate::rng::Xoshiro256;
use crate::tokenizer::Tokenizer;

/// Floor applied to recorded token probabilities.
pub const LOGPROB_FLOOR: f64 = 1e-12;

pub fn top_k_filter(dist: &TokenDistribution, k: usize) -> Result<TokenDistribution> {
    dist.top_k(k)
}

/// Inverse-CDF draw. Zero-probability tokens are never returned.
pub fn sample_multinomial(dist: &TokenDistribution, rng: &mut Xoshiro256) -> TokenId {
    let u = rng.next_f64();
    let mut cum = 0.0;
    let mut last_nonzero = 0;
    for (i, &p) in dist.probs().iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        cum += p;
        last_nonzero = i;
        if u < cum {
            return i as TokenId;
        }
    }
    // rounding left the total mass just below u
    last_nonzero as TokenId
}

const LOOP_NGRAM: usize = 4;
const LOOP_REPEATS: usize = 3;

/// True when some window of `window` tokens (the whole sequence if
/// shorter) has one id in more than `threshold · window` positions, or some
/// 4-gram occurs three times back to back.
pub fn detect_degeneration(tokens: &[TokenId], window: usize, threshold: f64) -> bool {
    let limit = threshold * window as f64;
    let span = window.min(tokens.len());
    if span > 0 {
        for w in tokens.windows(span) {
            let mut sorted = w.to_vec();
            sorted.sort_unstable();
            let max_run = sorted
                .chunk_by(|a, b| a == b)
                .map(<[TokenId]>::len)
                .max()
                .unwrap_or(0);
            if max_run as f64 > limit {
                return true;
            }
        }
    }
    let period = LOOP_NGRAM * LOOP_REPEATS;
    tokens.windows(period).any(|w| {
        let first = &w[..LOOP_NGRAM];
        w.chunks_exact(LOOP_NGRAM).all(|c| c == first)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordCondition {
    pub word: String,
    pub weight: f64,
}

/// One generated passage. Serialized as a single JSONL line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub prompt: String,
    pub conditions: Vec<RecordCondition>,
    pub method: Method,
    pub seed: u64,
    /// Generated tokens only; the prompt and prefix are excluded.
    pub tokens: Vec<TokenId>,
    pub text: String,
    pub degenerate: bool,
    pub logprobs: Vec<f64>,
}

impl SampleRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serialization cannot fail")
    }
}

enum PrefixState {
    None,
    /// Prefix occupies the first cache columns until the cutoff.
    Attached(PrefixPlan),
    /// Prefix columns kept for the whole passage; positions restart at 0.
    Detached(PrefixPlan),
}

struct Session<'a> {
    model: Transformer<'a>,
    cache: KVCache,
    kv_table: Option<ConditionKvTable>,
    /// Blended copy of `cache` used for the latest step, when blending.
    view: Option<KVCache>,
}

impl Session<'_> {
    /// Feeds `token` at `position` through the (possibly blended) cache and
    /// records its fresh column in the unblended cache.
    fn step(&mut self, token: TokenId, position: usize, generated: usize) -> Result<Vec<f32>> {
        match &mut self.kv_table {
            None => self.model.forward_step(&mut self.cache, token, position),
            Some(table) => {
                table.prepare(&self.model, self.cache.positions())?;
                let mut view = blend_kv(&self.cache, table, generated)?;
                let logits = self.model.forward_step(&mut view, token, position)?;
                self.cache
                    .push_column(&view.column(view.len() - 1), position)?;
                self.view = Some(view);
                Ok(logits)
            }
        }
    }
}

fn resolve_prefix(gen: &GenerationConfig, tokenizer: &Tokenizer) -> Result<Option<PrefixPlan>> {
    if !gen.method.uses_prefix() {
        return Ok(None);
    }
    let plan = match &gen.prefix_text {
        Some(text) => PrefixPlan {
            token_ids: tokenizer.encode(text),
            text: text.clone(),
            cutoff_step: gen.early_stopping_steps,
        },
        None => {
            let conds = gen.prefix_conditions();
            if conds.is_empty() {
                return Ok(None);
            }
            build_prefix(&conds, tokenizer, gen.early_stopping_steps)?
        }
    };
    // a cutoff at 0 removes the prefix before the first generated token
    if plan.token_ids.is_empty() || (plan.cutoff_step == 0 && !gen.detached_prefix_experiment) {
        return Ok(None);
    }
    Ok(Some(plan))
}

fn capacity(needed: usize, config: &ModelConfig, what: &'static str) -> Result<()> {
    if needed > config.context_len {
        return Err(Error::Capacity {
            what,
            needed,
            capacity: config.context_len,
        });
    }
    Ok(())
}

pub fn generate(
    weights: &Weights,
    config: &ModelConfig,
    tokenizer: &Tokenizer,
    gen: &GenerationConfig,
    prompt: &str,
) -> Result<SampleRecord> {
    gen.validate()?;
    if tokenizer.vocab_size() != config.vocab_size {
        return Err(Error::usage(format!(
            "tokenizer has {} tokens but the model vocabulary is {}",
            tokenizer.vocab_size(),
            config.vocab_size
        )));
    }
    let prompt_ids = tokenizer.encode(prompt);
    if prompt_ids.is_empty() {
        return Err(Error::usage("prompt must encode to at least one token"));
    }
    let n_prompt = prompt_ids.len();
    capacity(n_prompt + gen.max_tokens, config, "prompt + max_tokens")?;

    let mut model = Transformer::new(config, weights);
    let embed_conds = gen.embedding_conditions();
    if !embed_conds.is_empty() {
        let table =
            blend_input_embeddings(model.input_embedding(), config.embed_dim, &embed_conds)?;
        model = model.with_input_embedding(table)?;
    }

    let prefix_state = match resolve_prefix(gen, tokenizer)? {
        None => PrefixState::None,
        Some(plan) if gen.detached_prefix_experiment => {
            capacity(
                plan.token_ids.len() + n_prompt + gen.max_tokens,
                config,
                "detached prefix + passage",
            )?;
            PrefixState::Detached(plan)
        }
        Some(plan) => {
            capacity(
                plan.token_ids.len() + n_prompt + plan.cutoff_step.min(gen.max_tokens),
                config,
                "prefix + prompt",
            )?;
            PrefixState::Attached(plan)
        }
    };

    let attn_conds = gen.attention_conditions();
    let kv_table = if attn_conds.is_empty() {
        None
    } else {
        Some(ConditionKvTable::new(&attn_conds)?)
    };
    let next_conds: Vec<WeightedToken> = gen.next_token_conditions();
    let reweighting = next_conds.iter().any(|c| c.weight > 0.0);
    let k = gen.top_k.min(config.vocab_size);

    let mut prefix_state = prefix_state;
    let mut session = Session {
        cache: KVCache::new(config),
        model,
        kv_table,
        view: None,
    };

    // position of visible token i is i + offset
    let mut offset = 0;
    match &prefix_state {
        PrefixState::None => {}
        PrefixState::Detached(plan) => session.cache = detached_prefix_setup(&session.model, plan)?,
        PrefixState::Attached(plan) => {
            session
                .model
                .extend(&mut session.cache, &plan.token_ids, 0)?;
            offset = plan.token_ids.len();
        }
    }
    session
        .model
        .extend(&mut session.cache, &prompt_ids[..n_prompt - 1], offset)?;
    let mut visible = prompt_ids.clone();
    let mut logits = session.step(visible[n_prompt - 1], offset + n_prompt - 1, 0)?;

    let mut rng = Xoshiro256::seed_from_u64(gen.seed);
    let mut generated = Vec::with_capacity(gen.max_tokens);
    let mut logprobs = Vec::with_capacity(gen.max_tokens);
    loop {
        let base = logits_to_distribution(&logits, gen.temperature)?;
        let dist = if reweighting {
            let candidates = base.ranked(k);
            let position = offset + visible.len();
            let Session {
                model,
                cache,
                kv_table,
                view,
            } = &mut session;
            let attended = match view {
                Some(v) if kv_table.is_some() => v,
                _ => cache,
            };
            let scores = score_candidates(model, attended, position, &candidates, &next_conds)?;
            reweight(&base, &candidates, &scores, k)?
        } else {
            base.top_k(k)?
        };
        let token = sample_multinomial(&dist, &mut rng);
        logprobs.push(dist.prob(token).max(LOGPROB_FLOOR).ln());
        generated.push(token);
        visible.push(token);
        if generated.len() == gen.max_tokens {
            break;
        }

        if let PrefixState::Attached(plan) = &prefix_state {
            if generated.len() == plan.cutoff_step {
                let cache = std::mem::replace(&mut session.cache, KVCache::new(config));
                session.cache = apply_prefix_cutoff(
                    &session.model,
                    cache,
                    plan,
                    generated.len(),
                    &visible[..visible.len() - 1],
                )?;
                offset = 0;
                prefix_state = PrefixState::None;
            }
        }
        logits = session.step(token, offset + visible.len() - 1, generated.len())?;
    }

    let text = tokenizer.decode(&generated)?;
    let degenerate = detect_degeneration(
        &generated,
        gen.degeneration.window,
        gen.degeneration.threshold,
    );
    let primary = gen.primary_weight();
    Ok(SampleRecord {
        prompt: prompt.to_string(),
        conditions: gen
            .conditions
            .iter()
            .map(|c| RecordCondition {
                word: c.word.clone(),
                weight: c.weight.unwrap_or(primary),
            })
            .collect(),
        method: gen.method,
        seed: gen.seed,
        tokens: generated,
        text,
        degenerate,
        logprobs,
    })
}
