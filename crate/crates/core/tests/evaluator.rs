mod common;

use std::collections::HashSet;
use std::io::Write;

use proptest::prelude::*;
use steered_core::evaluator::{evaluate_samples, read_samples, EvalOptions};
use steered_core::{
    dist_n, evaluate_file, logits_to_distribution, make_zero_model, perplexity, Error, Method,
    MetricSelection, ModelConfig, SampleRecord, TokenId, Transformer,
};

use common::{scaled_model, tiny_config};

fn record(tokens: Vec<TokenId>, degenerate: bool) -> SampleRecord {
    SampleRecord {
        prompt: "p".into(),
        conditions: vec![],
        method: Method::Combined,
        seed: 0,
        text: String::new(),
        logprobs: vec![0.0; tokens.len()],
        tokens,
        degenerate,
    }
}

fn naive_dist(tokens: &[TokenId], n: usize) -> f64 {
    let mut seen = HashSet::new();
    let mut total = 0;
    for i in 0..=tokens.len() - n {
        seen.insert(tokens[i..i + n].to_vec());
        total += 1;
    }
    seen.len() as f64 / total as f64
}

/// Natural-log perplexity with one forward pass per prefix.
fn naive_perplexity(
    config: &ModelConfig,
    weights: &steered_core::Weights,
    tokens: &[TokenId],
) -> f64 {
    let model = Transformer::new(config, weights);
    let mut nll = 0.0;
    for i in 1..tokens.len() {
        let (logits, _) = model.forward_full(&tokens[..i]).unwrap();
        nll -= logits_to_distribution(logits.last(), 1.0)
            .unwrap()
            .prob(tokens[i])
            .ln();
    }
    (nll / (tokens.len() - 1) as f64).exp()
}

#[test]
fn uniform_model_perplexity_is_vocabulary_size() {
    let config = tiny_config();
    let weights = make_zero_model(&config);
    for tokens in [vec![0, 1], vec![5, 5, 5, 5], (0..64).collect::<Vec<_>>()] {
        assert_eq!(perplexity(&weights, &config, &tokens).unwrap(), 64.0);
    }
}

#[test]
fn perplexity_matches_naive_recomputation() {
    let config = tiny_config();
    let weights = scaled_model(&config, 8, 6.0);
    let tokens: Vec<TokenId> = (0..30).map(|i| (i * 13 % 64) as TokenId).collect();
    let fast = perplexity(&weights, &config, &tokens).unwrap();
    let slow = naive_perplexity(&config, &weights, &tokens);
    assert!((fast - slow).abs() / slow < 1e-6, "{fast} vs {slow}");
    assert!(fast >= 1.0);
}

#[test]
fn perplexity_input_errors() {
    let config = tiny_config();
    let weights = make_zero_model(&config);
    assert!(matches!(
        perplexity(&weights, &config, &[1]),
        Err(Error::Usage(_))
    ));
    assert!(perplexity(&weights, &config, &vec![1; 129])
        .unwrap_err()
        .is_usage());
    assert!(matches!(
        perplexity(&weights, &config, &[1, 64]),
        Err(Error::Vocabulary { .. })
    ));
}

proptest! {
    #[test]
    fn dist_n_matches_naive_count(tokens in prop::collection::vec(0u32..6, 3..60), n in 1usize..4) {
        let d = dist_n(&tokens, n).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(d, naive_dist(&tokens, n));
    }
}

#[test]
fn aggregate_matches_independent_recomputation() {
    let config = tiny_config();
    let weights = scaled_model(&config, 8, 6.0);
    let records: Vec<SampleRecord> = (0..7)
        .map(|s| {
            record(
                (0..20 + s)
                    .map(|i| ((i * (s + 3) + s) % 64) as TokenId)
                    .collect(),
                s % 3 == 0,
            )
        })
        .collect();
    for exclude in [false, true] {
        let report = evaluate_samples(
            &records,
            Some((&config, &weights)),
            MetricSelection::ALL,
            EvalOptions {
                exclude_degenerate: exclude,
            },
        )
        .unwrap();
        let kept: Vec<&SampleRecord> = records
            .iter()
            .filter(|r| !(exclude && r.degenerate))
            .collect();
        let mean = |f: &dyn Fn(&SampleRecord) -> f64| {
            kept.iter().map(|r| f(r)).sum::<f64>() / kept.len() as f64
        };
        let agg = &report.aggregate;
        assert!(
            (agg.ppl.unwrap() - mean(&|r| naive_perplexity(&config, &weights, &r.tokens))).abs()
                < 1e-9 * agg.ppl.unwrap()
        );
        for (n, got) in [(1, agg.dist1), (2, agg.dist2), (3, agg.dist3)] {
            assert!((got.unwrap() - mean(&|r| naive_dist(&r.tokens, n))).abs() < 1e-9);
        }
        assert_eq!(agg.n, kept.len());
        assert_eq!(agg.degenerate, 3);
        assert_eq!(report.per_sample.len(), records.len());
    }
}

#[test]
fn reads_jsonl_and_reports_bad_lines() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.jsonl");
    let mut f = std::fs::File::create(&path).unwrap();
    for r in [record(vec![1, 2, 1, 2], false), record(vec![3, 4, 5], true)] {
        writeln!(f, "{}", r.to_json_line()).unwrap();
    }
    writeln!(f).unwrap();
    drop(f);
    assert_eq!(read_samples(&path).unwrap().len(), 2);

    let report = evaluate_file(
        &path,
        None,
        MetricSelection::parse("dist").unwrap(),
        EvalOptions::default(),
    )
    .unwrap();
    assert_eq!(report.aggregate.dist1, Some((0.5 + 1.0) / 2.0));
    assert_eq!(report.aggregate.ppl, None);

    std::fs::write(
        &path,
        format!("{}\n{{oops\n", record(vec![1, 2], false).to_json_line()),
    )
    .unwrap();
    match read_samples(&path) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected parse error, got {other:?}"),
    }
    assert!(matches!(
        evaluate_file(
            dir.path().join("missing.jsonl"),
            None,
            MetricSelection::parse("dist").unwrap(),
            EvalOptions::default()
        ),
        Err(Error::Io(_))
    ));
}
