use crate::error::{Error, Result};
use crate::model::TokenId;

/// Tolerance on the total mass of a distribution.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;

/// A normalized probability vector over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    probs: Vec<f64>,
}

impl TokenDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Numeric("empty distribution".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Numeric(
                "probabilities must be finite and non-negative".into(),
            ));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(Error::Numeric(format!("probabilities sum to {total}")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(size: usize) -> Self {
        Self {
            probs: vec![1.0 / size as f64; size],
        }
    }

    /// Scales non-negative masses to sum to one, summing in index order.
    pub fn from_unnormalized(mass: Vec<f64>) -> Result<Self> {
        let total: f64 = mass.iter().sum();
        if !(total.is_finite() && total > 0.0) {
            return Err(Error::Numeric(format!(
                "cannot normalize total mass {total}"
            )));
        }
        Self::new(mass.into_iter().map(|m| m / total).collect())
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, token: TokenId) -> f64 {
        self.probs[token as usize]
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Token ids ordered by descending probability, ties broken by lower id.
    pub fn ranked(&self, k: usize) -> Vec<TokenId> {
        let mut ids: Vec<TokenId> = (0..self.probs.len() as TokenId).collect();
        let cmp = |a: &TokenId, b: &TokenId| {
            self.probs[*b as usize]
                .total_cmp(&self.probs[*a as usize])
                .then(a.cmp(b))
        };
        let k = k.min(ids.len());
        if k < ids.len() && k > 0 {
            ids.select_nth_unstable_by(k - 1, cmp);
            ids.truncate(k);
        }
        ids.sort_unstable_by(cmp);
        ids.truncate(k);
        ids
    }

    /// Keeps the `k` most probable entries (ties to lower ids) and
    /// renormalizes. `k == len` returns the distribution unchanged.
    pub fn top_k(&self, k: usize) -> Result<TokenDistribution> {
        if k < 1 || k > self.len() {
            return Err(Error::Usage(format!(
                "top-k {k} outside 1..={}",
                self.len()
            )));
        }
        if k == self.len() {
            return Ok(self.clone());
        }
        let mut mass = vec![0.0; self.len()];
        for id in self.ranked(k) {
            mass[id as usize] = self.probs[id as usize];
        }
        Self::from_unnormalized(mass)
    }
}

/// Softmax of `logits / temperature`, evaluated in f64 with max-subtraction.
pub fn logits_to_distribution(logits: &[f32], temperature: f64) -> Result<TokenDistribution> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::Numeric(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    let scaled: Vec<f64> = logits.iter().map(|&l| l as f64 / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|z| (z - max).exp()).collect();
    TokenDistribution::from_unnormalized(exps)
}
