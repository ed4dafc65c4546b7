use crate::error::{EcoError, Result};
use crate::kb::TokenId;

/// Tolerance on the total mass of a distribution.
pub const MASS_TOLERANCE: f64 = 1e-6;

/// Smallest allowed mass that may still be renormalized.
pub const MIN_ALLOWED_MASS: f64 = 1e-30;

/// Probability vector over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    probs: Vec<f64>,
}

impl TokenDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(EcoError::Contract("empty distribution".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(EcoError::Contract(
                "distribution has a negative or non-finite entry".into(),
            ));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(EcoError::Contract(format!("distribution sums to {total}")));
        }
        Ok(TokenDistribution { probs })
    }

    pub fn uniform(size: usize) -> Self {
        TokenDistribution {
            probs: vec![1.0 / size as f64; size],
        }
    }

    pub fn one_hot(size: usize, token: TokenId) -> Self {
        let mut probs = vec![0.0; size];
        probs[token as usize] = 1.0;
        TokenDistribution { probs }
    }

    pub fn from_logits(logits: &[f64]) -> Self {
        TokenDistribution {
            probs: softmax(logits),
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn into_probs(self) -> Vec<f64> {
        self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, token: TokenId) -> f64 {
        self.probs.get(token as usize).copied().unwrap_or(0.0)
    }

    /// Highest-probability token; ties go to the lowest id.
    pub fn argmax(&self) -> TokenId {
        argmax(&self.probs) as TokenId
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = out.iter().sum();
    for p in &mut out {
        *p /= z;
    }
    out
}

/// Mean negative log-likelihood of `gold` under per-step distributions.
pub fn mean_nll(steps: &[TokenDistribution], gold: &[TokenId]) -> Result<f64> {
    if steps.len() != gold.len() {
        return Err(EcoError::LengthMismatch {
            predictions: steps.len(),
            references: gold.len(),
        });
    }
    if gold.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = steps.iter().zip(gold).map(|(d, &g)| -d.prob(g).ln()).sum();
    Ok(total / gold.len() as f64)
}
