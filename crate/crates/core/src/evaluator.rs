//! Automated metrics over generated samples: perplexity under a separate
//! reference model and Dist-n diversity.
//!
//! Only generated tokens are scored. Metrics are computed per sample and
//! averaged without weighting.

use std::collections::HashSet;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distribution::logits_to_distribution;
use crate::error::{Error, Result};
use crate::io::read_model;
use crate::model::{ModelConfig, TokenId, Transformer, Weights};
use crate::sampler::SampleRecord;

/// Teacher-forced perplexity of `tokens[1..]` given their prefixes.
///
/// Accumulated in base 2 so a uniform model over `V` tokens scores exactly `V`.
pub fn perplexity(weights: &Weights, config: &ModelConfig, tokens: &[TokenId]) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(Error::usage("perplexity needs at least 2 tokens"));
    }
    let (logits, _) = Transformer::new(config, weights).forward_full(tokens)?;
    let mut bits = 0.0;
    for (i, &next) in tokens.iter().enumerate().skip(1) {
        let dist = logits_to_distribution(logits.row(i - 1), 1.0)?;
        bits -= dist.prob(next).log2();
    }
    Ok((bits / (tokens.len() - 1) as f64).exp2())
}

/// Fraction of distinct n-grams among the `len − n + 1` n-gram positions.
pub fn dist_n(tokens: &[TokenId], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::usage("n-gram order must be at least 1"));
    }
    if tokens.len() < n {
        return Err(Error::usage(format!(
            "sequence of {} tokens has no {n}-grams",
            tokens.len()
        )));
    }
    let grams: HashSet<&[TokenId]> = tokens.windows(n).collect();
    Ok(grams.len() as f64 / (tokens.len() - n + 1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MetricSelection {
    pub perplexity: bool,
    pub distinct: bool,
}

impl MetricSelection {
    pub const ALL: MetricSelection = MetricSelection {
        perplexity: true,
        distinct: true,
    };

    /// Parses a comma-separated list of `ppl` and `dist`.
    pub fn parse(list: &str) -> Result<Self> {
        let mut sel = MetricSelection {
            perplexity: false,
            distinct: false,
        };
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item {
                "ppl" => sel.perplexity = true,
                "dist" => sel.distinct = true,
                other => {
                    return Err(Error::usage(format!(
                        "unknown metric {other:?}; expected ppl or dist"
                    )))
                }
            }
        }
        if !sel.perplexity && !sel.distinct {
            return Err(Error::usage("no metrics selected"));
        }
        Ok(sel)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub index: usize,
    pub ppl: Option<f64>,
    pub dist1: Option<f64>,
    pub dist2: Option<f64>,
    pub dist3: Option<f64>,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub ppl: Option<f64>,
    pub dist1: Option<f64>,
    pub dist2: Option<f64>,
    pub dist3: Option<f64>,
    /// Samples contributing to the means.
    pub n: usize,
    /// Degenerate samples in the input.
    pub degenerate: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub aggregate: AggregateMetrics,
    pub per_sample: Vec<SampleMetrics>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvalOptions {
    pub exclude_degenerate: bool,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        sum += v?;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

fn sample_metrics(
    index: usize,
    record: &SampleRecord,
    reference: Option<(&ModelConfig, &Weights)>,
    selection: MetricSelection,
) -> Result<SampleMetrics> {
    let tag = |e: Error| match e {
        Error::Usage(m) => Error::Usage(format!("sample {index}: {m}")),
        other => other,
    };
    let ppl = match (selection.perplexity, reference) {
        (true, Some((config, weights))) => {
            Some(perplexity(weights, config, &record.tokens).map_err(tag)?)
        }
        (true, None) => {
            return Err(Error::usage(
                "perplexity requested without a reference model",
            ))
        }
        (false, _) => None,
    };
    let dist = |n| -> Result<Option<f64>> {
        if selection.distinct {
            dist_n(&record.tokens, n).map(Some).map_err(tag)
        } else {
            Ok(None)
        }
    };
    Ok(SampleMetrics {
        index,
        ppl,
        dist1: dist(1)?,
        dist2: dist(2)?,
        dist3: dist(3)?,
        degenerate: record.degenerate,
    })
}

/// Per-sample metrics (computed in parallel) and their ordered means.
pub fn evaluate_samples(
    records: &[SampleRecord],
    reference: Option<(&ModelConfig, &Weights)>,
    selection: MetricSelection,
    options: EvalOptions,
) -> Result<MetricReport> {
    if records.is_empty() {
        return Err(Error::usage("no samples to evaluate"));
    }
    let per_sample: Vec<SampleMetrics> = records
        .par_iter()
        .enumerate()
        .map(|(i, r)| sample_metrics(i, r, reference, selection))
        .collect::<Result<_>>()?;

    let included: Vec<&SampleMetrics> = per_sample
        .iter()
        .filter(|m| !(options.exclude_degenerate && m.degenerate))
        .collect();
    let aggregate = AggregateMetrics {
        ppl: mean(included.iter().map(|m| m.ppl)),
        dist1: mean(included.iter().map(|m| m.dist1)),
        dist2: mean(included.iter().map(|m| m.dist2)),
        dist3: mean(included.iter().map(|m| m.dist3)),
        n: included.len(),
        degenerate: per_sample.iter().filter(|m| m.degenerate).count(),
    };
    Ok(MetricReport {
        aggregate,
        per_sample,
    })
}

/// Reads sampler JSONL; blank lines are skipped.
pub fn read_samples(path: impl AsRef<Path>) -> Result<Vec<SampleRecord>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

pub fn evaluate_file(
    samples: impl AsRef<Path>,
    reference_model: Option<&Path>,
    selection: MetricSelection,
    options: EvalOptions,
) -> Result<MetricReport> {
    if selection.perplexity && reference_model.is_none() {
        return Err(Error::usage(
            "perplexity requested without a reference model",
        ));
    }
    let records = read_samples(samples)?;
    let reference = match reference_model {
        Some(path) if selection.perplexity => Some(read_model(path)?),
        _ => None,
    };
    evaluate_samples(
        &records,
        reference.as_ref().map(|(c, w)| (c, w)),
        selection,
        options,
    )
}
