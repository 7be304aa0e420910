mod common;

use proptest::prelude::*;
use steered_core::conditioning::{
    apply_prefix_cutoff, blend_input_embeddings, blend_kv, condition_kv, condition_score,
    next_token_distribution, weighted_condition_score, ConditionKvTable, PrefixPlan,
};
use steered_core::rng::Xoshiro256;
use steered_core::{
    logits_to_distribution, KVCache, ModelConfig, TokenDistribution, TokenId, Transformer,
    WeightedToken,
};

use common::{max_abs_diff, scaled_model, tiny_config};

fn random_tokens(rng: &mut Xoshiro256, len: usize, vocab: usize) -> Vec<TokenId> {
    (0..len)
        .map(|_| (rng.next_u64() % vocab as u64) as TokenId)
        .collect()
}

fn next_dist(model: &Transformer<'_>, seq: &[TokenId]) -> TokenDistribution {
    let (logits, _) = model.forward_full(seq).unwrap();
    logits_to_distribution(logits.last(), 1.0).unwrap()
}

/// Full-vocabulary enumeration of score(x) * base(x), normalized.
fn brute_force(model: &Transformer<'_>, context: &[TokenId], conds: &[(TokenId, f64)]) -> Vec<f64> {
    let base = next_dist(model, context);
    let n = conds.len() as f64;
    let mass: Vec<f64> = (0..base.len() as TokenId)
        .map(|x| {
            let mut seq = context.to_vec();
            seq.push(x);
            let after = next_dist(model, &seq);
            let log_score: f64 = conds.iter().map(|&(c, w)| w * after.prob(c).ln()).sum();
            (log_score / n).exp() * base.prob(x)
        })
        .collect();
    let total: f64 = mass.iter().sum();
    mass.into_iter().map(|m| m / total).collect()
}

#[test]
fn next_token_with_full_vocabulary_matches_enumeration() {
    let config = tiny_config();
    let weights = scaled_model(&config, 7, 8.0);
    let model = Transformer::new(&config, &weights);
    let mut rng = Xoshiro256::seed_from_u64(11);
    for trial in 0..20 {
        let len = 1 + (rng.next_u64() % 12) as usize;
        let context = random_tokens(&mut rng, len, config.vocab_size);
        let conds: Vec<(TokenId, f64)> = match trial % 3 {
            0 => vec![(5, 0.2)],
            1 => vec![(5, 1.0), (17, 0.5)],
            _ => vec![(3, 2.0), (40, 0.1), (63, 0.7)],
        };
        let weighted: Vec<WeightedToken> = conds
            .iter()
            .map(|&(c, w)| WeightedToken::new(c, w))
            .collect();
        let base = next_dist(&model, &context);
        let fast =
            next_token_distribution(&model, &context, &base, &weighted, config.vocab_size).unwrap();
        let slow = brute_force(&model, &context, &conds);
        let diff = fast
            .probs()
            .iter()
            .zip(&slow)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-6, "trial {trial}: max diff {diff}");
    }
}

#[test]
fn top_k_restricts_support_and_keeps_ratios() {
    let config = tiny_config();
    let weights = scaled_model(&config, 2, 8.0);
    let model = Transformer::new(&config, &weights);
    let context = [1, 2, 3];
    let conds = [WeightedToken::new(9, 0.5)];
    let base = next_dist(&model, &context);
    let k = 12;
    let out = next_token_distribution(&model, &context, &base, &conds, k).unwrap();
    let top = base.ranked(k);
    assert_eq!(out.probs().iter().filter(|&&p| p > 0.0).count(), k);
    for &x in &top {
        let expect = condition_score(&model, &context, x, &conds).unwrap() * base.prob(x);
        let ratio = out.prob(x) / expect;
        let first = out.prob(top[0])
            / (condition_score(&model, &context, top[0], &conds).unwrap() * base.prob(top[0]));
        assert!((ratio / first - 1.0).abs() < 1e-9);
    }
}

#[test]
fn raising_the_weight_favours_the_best_scoring_candidate() {
    let config = tiny_config();
    let weights = scaled_model(&config, 5, 8.0);
    let model = Transformer::new(&config, &weights);
    let context = [4, 8, 15, 16];
    let base = next_dist(&model, &context);
    let cond = 23;
    let best = (0..config.vocab_size as TokenId)
        .max_by(|&a, &b| {
            let sa =
                condition_score(&model, &context, a, &[WeightedToken::new(cond, 1.0)]).unwrap();
            let sb =
                condition_score(&model, &context, b, &[WeightedToken::new(cond, 1.0)]).unwrap();
            sa.total_cmp(&sb)
        })
        .unwrap();
    let mut previous = 0.0;
    for w in [0.0, 0.1, 0.2, 0.5, 1.0, 2.0, 4.0] {
        let d = next_token_distribution(
            &model,
            &context,
            &base,
            &[WeightedToken::new(cond, w)],
            config.vocab_size,
        )
        .unwrap();
        assert!(d.prob(best) >= previous - 1e-12, "w={w}");
        previous = d.prob(best);
    }
}

proptest! {
    #[test]
    fn single_condition_score_is_plain_power(
        raw in prop::collection::vec(0.001f64..1.0, 2..50),
        pick in any::<prop::sample::Index>(),
        w in 0.0f64..4.0,
    ) {
        let total: f64 = raw.iter().sum();
        let dist = TokenDistribution::new(raw.iter().map(|r| r / total).collect()).unwrap();
        let c = pick.index(raw.len()) as TokenId;
        let combined = weighted_condition_score(&dist, &[WeightedToken::new(c, w)]);
        let single = dist.prob(c).powf(w);
        prop_assert!((combined - single).abs() <= 1e-12);
        let repeated = weighted_condition_score(&dist, &[WeightedToken::new(c, w); 3]);
        prop_assert!((repeated - single).abs() <= 1e-12);
    }

    #[test]
    fn embedding_blend_keeps_the_condition_row_fixed(
        seed in any::<u64>(),
        vocab in 2usize..30,
        dim in 1usize..10,
        w in 0.0f64..5.0,
    ) {
        let mut rng = Xoshiro256::seed_from_u64(seed);
        let table: Vec<f32> = (0..vocab * dim).map(|_| rng.next_normal() as f32).collect();
        let t = (rng.next_u64() % vocab as u64) as usize;
        let out = blend_input_embeddings(&table, dim, &[WeightedToken::new(t as TokenId, w)]).unwrap();
        let row = t * dim..(t + 1) * dim;
        prop_assert!(max_abs_diff(&out[row.clone()], &table[row]) < 1e-5);
    }

    #[test]
    fn embedding_blend_matches_formula(
        seed in any::<u64>(),
        weights in prop::collection::vec(0.0f64..1.0, 1..4),
    ) {
        let (vocab, dim) = (9, 5);
        let mut rng = Xoshiro256::seed_from_u64(seed);
        let table: Vec<f32> = (0..vocab * dim).map(|_| rng.next_normal() as f32).collect();
        let conds: Vec<WeightedToken> = weights
            .iter()
            .enumerate()
            .map(|(i, &w)| WeightedToken::new((i * 2) as TokenId, w))
            .collect();
        let out = blend_input_embeddings(&table, dim, &conds).unwrap();
        let norm = 1.0 + weights.iter().sum::<f64>();
        for v in 0..vocab {
            for j in 0..dim {
                let shift: f64 = conds.iter().map(|c| c.weight * table[c.token_id as usize * dim + j] as f64).sum();
                let expect = (table[v * dim + j] as f64 + shift) / norm;
                prop_assert!((out[v * dim + j] as f64 - expect).abs() < 1e-6);
            }
        }
    }
}

fn layer0_kv_oracle(
    config: &ModelConfig,
    weights: &steered_core::Weights,
    token: TokenId,
    pos: usize,
) -> (Vec<f32>, Vec<f32>) {
    let d = config.embed_dim;
    let x: Vec<f64> = (0..d)
        .map(|j| {
            (weights.token_embedding_in[token as usize * d + j]
                + weights.position_embedding[pos * d + j]) as f64
        })
        .collect();
    let mean = x.iter().sum::<f64>() / d as f64;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
    let l = &weights.layers[0];
    let h: Vec<f64> = (0..d)
        .map(|j| {
            (x[j] - mean) / (var + config.layernorm_eps as f64).sqrt() * l.ln1_gain[j] as f64
                + l.ln1_bias[j] as f64
        })
        .collect();
    let project = |col: usize| -> f32 {
        let s: f64 = (0..d)
            .map(|i| h[i] * l.qkv_weight[i * 3 * d + col] as f64)
            .sum();
        (s + l.qkv_bias[col] as f64) as f32
    };
    (
        (d..2 * d).map(project).collect(),
        (2 * d..3 * d).map(project).collect(),
    )
}

#[test]
fn condition_kv_is_a_single_token_pass_at_the_given_position() {
    let config = tiny_config();
    let weights = scaled_model(&config, 9, 4.0);
    let model = Transformer::new(&config, &weights);
    for (token, pos) in [(0, 0), (5, 3), (63, 40), (17, 127)] {
        let col = condition_kv(&model, token, pos).unwrap();
        let (k, v) = layer0_kv_oracle(&config, &weights, token, pos);
        assert!(max_abs_diff(&col.keys[0], &k) < 1e-5);
        assert!(max_abs_diff(&col.values[0], &v) < 1e-5);
        if pos == 0 {
            let (_, full) = model.forward_full(&[token]).unwrap();
            assert_eq!(full.column(0), col);
        }
    }
}

fn blend_fixture() -> (
    ModelConfig,
    steered_core::Weights,
    Vec<TokenId>,
    Vec<WeightedToken>,
) {
    let config = tiny_config();
    let weights = scaled_model(&config, 21, 4.0);
    (
        config,
        weights,
        vec![3, 14, 15, 9, 26, 5],
        vec![WeightedToken::new(7, 0.3), WeightedToken::new(50, 0.05)],
    )
}

#[test]
fn kv_blend_at_step_zero_matches_direct_formula() {
    let (config, weights, context, conds) = blend_fixture();
    let model = Transformer::new(&config, &weights);
    let (_, cache) = model.forward_full(&context).unwrap();
    let mut table = ConditionKvTable::new(&conds).unwrap();
    table.prepare(&model, cache.positions()).unwrap();
    let blended = blend_kv(&cache, &table, 0).unwrap();
    let norm = 1.0 + conds.iter().map(|c| c.weight).sum::<f64>();
    let d = config.embed_dim;
    for p in 0..context.len() {
        let cond_cols: Vec<_> = conds
            .iter()
            .map(|c| condition_kv(&model, c.token_id, p).unwrap())
            .collect();
        for layer in 0..config.n_layers {
            for j in 0..d {
                let idx = p * d + j;
                let k: f64 = cache.layer_keys(layer)[idx] as f64
                    + conds
                        .iter()
                        .zip(&cond_cols)
                        .map(|(c, col)| c.weight * col.keys[layer][j] as f64)
                        .sum::<f64>();
                let v: f64 = cache.layer_values(layer)[idx] as f64
                    + conds
                        .iter()
                        .zip(&cond_cols)
                        .map(|(c, col)| c.weight * col.values[layer][j] as f64)
                        .sum::<f64>();
                assert!((blended.layer_keys(layer)[idx] as f64 - k / norm).abs() < 1e-6);
                assert!((blended.layer_values(layer)[idx] as f64 - v / norm).abs() < 1e-6);
            }
        }
    }
}

fn cache_distance(a: &KVCache, b: &KVCache) -> f64 {
    (0..a.n_layers())
        .flat_map(|l| {
            a.layer_keys(l)
                .iter()
                .zip(b.layer_keys(l))
                .chain(a.layer_values(l).iter().zip(b.layer_values(l)))
        })
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[test]
fn kv_blend_distance_decays_with_step() {
    let (config, weights, context, conds) = blend_fixture();
    let model = Transformer::new(&config, &weights);
    let (_, cache) = model.forward_full(&context).unwrap();
    let mut table = ConditionKvTable::new(&conds).unwrap();
    table.prepare(&model, cache.positions()).unwrap();
    let mut previous = f64::INFINITY;
    for s in 0..=20 {
        let dist = cache_distance(&blend_kv(&cache, &table, s).unwrap(), &cache);
        assert!(dist <= previous, "s={s}: {dist} > {previous}");
        assert!(dist > 0.0);
        previous = dist;
    }
}

#[test]
fn prefix_cutoff_rebuilds_an_unconditioned_cache() {
    let config = tiny_config();
    let weights = scaled_model(&config, 13, 6.0);
    let model = Transformer::new(&config, &weights);
    let plan = PrefixPlan {
        text: String::new(),
        token_ids: vec![30, 31, 32, 33, 34],
        cutoff_step: 3,
    };
    let prompt = [1, 2];
    let generated = [40, 41, 42];
    let mut cache = KVCache::new(&config);
    model.extend(&mut cache, &plan.token_ids, 0).unwrap();
    model
        .extend(&mut cache, &prompt, plan.token_ids.len())
        .unwrap();
    model
        .extend(
            &mut cache,
            &generated[..2],
            plan.token_ids.len() + prompt.len(),
        )
        .unwrap();

    let visible: Vec<TokenId> = prompt.iter().chain(&generated[..2]).copied().collect();
    let untouched = apply_prefix_cutoff(&model, cache.clone(), &plan, 2, &visible).unwrap();
    assert_eq!(untouched, cache);

    let mut cut = apply_prefix_cutoff(&model, cache, &plan, 3, &visible).unwrap();
    assert_eq!(cut.len(), visible.len());
    let logits = model
        .forward_step(&mut cut, generated[2], visible.len())
        .unwrap();
    let mut all = visible.clone();
    all.push(generated[2]);
    let (reference, _) = model.forward_full(&all).unwrap();
    assert!(max_abs_diff(&logits, reference.last()) < 1e-4);
}
