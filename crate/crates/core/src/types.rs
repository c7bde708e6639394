//! Shared domain types: tokens, distributions, drafts and generation state.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Tolerance on the total mass of a [`Distribution`].
pub const SUM_TOLERANCE: f64 = 1e-9;

/// Raw vectors with less total mass than this cannot be normalized.
pub const ZERO_MASS: f64 = 1e-12;

/// A token id inside a model's vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(pub u32);

impl Token {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u32> for Token {
    fn from(id: u32) -> Self {
        Token(id)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DistError {
    #[error("distribution has zero mass")]
    ZeroMass,
    #[error("invalid distribution: {0}")]
    Invalid(String),
}

/// A probability vector over a small vocabulary.
///
/// Entries are non-negative and sum to one within [`SUM_TOLERANCE`].
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    /// Wraps an already normalized vector, checking the invariants.
    pub fn new(probs: Vec<f64>) -> Result<Self, DistError> {
        check_entries(&probs)?;
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(DistError::Invalid(format!("entries sum to {sum}")));
        }
        Ok(Self { probs })
    }

    /// Point mass on `token`.
    pub fn point_mass(vocab_size: usize, token: Token) -> Self {
        let mut probs = vec![0.0; vocab_size];
        probs[token.index()] = 1.0;
        Self { probs }
    }

    pub fn uniform(vocab_size: usize) -> Self {
        Self {
            probs: vec![1.0 / vocab_size as f64; vocab_size],
        }
    }

    #[inline]
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    #[inline]
    pub fn prob(&self, token: Token) -> f64 {
        self.probs[token.index()]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Most likely token; ties go to the lowest id.
    pub fn argmax(&self) -> Token {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate().skip(1) {
            if p > self.probs[best] {
                best = i;
            }
        }
        Token(best as u32)
    }

    pub fn max_prob(&self) -> f64 {
        self.probs[self.argmax().index()]
    }

    /// Tokens by descending probability, ties by ascending id.
    pub fn ranked(&self) -> Vec<Token> {
        let mut order: Vec<u32> = (0..self.probs.len() as u32).collect();
        order.sort_by(|&a, &b| {
            self.probs[b as usize]
                .total_cmp(&self.probs[a as usize])
                .then(a.cmp(&b))
        });
        order.into_iter().map(Token).collect()
    }

    /// Inverse-CDF sample with a uniform `u` on `[0, 1)`.
    ///
    /// Zero-probability tokens are never returned.
    pub fn sample(&self, u: f64) -> Token {
        let mut cumulative = 0.0;
        let mut last_positive = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > 0.0 {
                cumulative += p;
                last_positive = i;
                if u < cumulative {
                    return Token(i as u32);
                }
            }
        }
        // Rounding left a sliver above the final cumulative sum.
        Token(last_positive as u32)
    }

    /// Total variation distance.
    pub fn tv_distance(&self, other: &Distribution) -> f64 {
        tv_distance(&self.probs, &other.probs)
    }
}

fn check_entries(probs: &[f64]) -> Result<(), DistError> {
    if probs.is_empty() {
        return Err(DistError::Invalid("empty vector".into()));
    }
    if let Some(bad) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(DistError::Invalid(format!("entry {bad} is not a non-negative real")));
    }
    Ok(())
}

/// Scales a non-negative vector to sum to one.
pub fn normalize(raw: &[f64]) -> Result<Distribution, DistError> {
    check_entries(raw)?;
    let sum: f64 = raw.iter().sum();
    if sum < ZERO_MASS {
        return Err(DistError::ZeroMass);
    }
    let probs: Vec<f64> = raw.iter().map(|p| p / sum).collect();
    debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() <= SUM_TOLERANCE);
    Ok(Distribution { probs })
}

/// Total variation distance between two equal-length probability vectors.
pub fn tv_distance(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "tv_distance on vectors of different length");
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DraftError {
    #[error("draft sequence is empty")]
    Empty,
    #[error("{tokens} tokens but {dists} distributions")]
    LengthMismatch { tokens: usize, dists: usize },
    #[error("token {token} at position {position} has zero draft probability")]
    ZeroProbability { position: usize, token: Token },
}

/// One speculated run of tokens with the draft distribution behind each one.
///
/// `dists[t]` is the draft model's next-token distribution at the step that
/// produced `tokens[t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DraftSequence {
    tokens: Vec<Token>,
    dists: Vec<Distribution>,
    first_token_prob: f64,
}

impl DraftSequence {
    pub fn new(tokens: Vec<Token>, dists: Vec<Distribution>) -> Result<Self, DraftError> {
        if tokens.is_empty() {
            return Err(DraftError::Empty);
        }
        if tokens.len() != dists.len() {
            return Err(DraftError::LengthMismatch {
                tokens: tokens.len(),
                dists: dists.len(),
            });
        }
        for (position, (t, d)) in tokens.iter().zip(&dists).enumerate() {
            if t.index() >= d.len() || d.prob(*t) <= 0.0 {
                return Err(DraftError::ZeroProbability { position, token: *t });
            }
        }
        let first_token_prob = dists[0].prob(tokens[0]);
        Ok(Self {
            tokens,
            dists,
            first_token_prob,
        })
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn dists(&self) -> &[Distribution] {
        &self.dists
    }

    pub fn first_token(&self) -> Token {
        self.tokens[0]
    }

    pub fn first_token_prob(&self) -> f64 {
        self.first_token_prob
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Everything after the first token, if anything is left.
    pub fn tail(&self) -> Option<DraftSequence> {
        if self.tokens.len() < 2 {
            return None;
        }
        let tokens = self.tokens[1..].to_vec();
        let dists = self.dists[1..].to_vec();
        let first_token_prob = dists[0].prob(tokens[0]);
        Some(Self {
            tokens,
            dists,
            first_token_prob,
        })
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BundleError {
    #[error("bundle has no sequences")]
    Empty,
    #[error("sequences {0} and {1} share a first token")]
    DuplicateFirstToken(usize, usize),
    #[error("sequence {0} is out of order")]
    Unordered(usize),
    #[error("sequence {index} has first-token probability {prob} not above threshold {theta}")]
    BelowThreshold { index: usize, prob: f64, theta: f64 },
    #[error("bundle uses {used} tokens of a {budget}-token budget")]
    OverBudget { used: usize, budget: usize },
    #[error("first position distribution disagrees with sequence {0}")]
    FirstDistMismatch(usize),
}

/// How a bundle's first tokens were chosen, which decides how they are
/// verified.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FirstTokenLaw {
    /// Picked by rank from the first-position distribution.
    Ranked,
    /// A single first token sampled from the first-position distribution.
    Sampled,
}

/// The output of one round of multi-sequence drafting.
///
/// Sequences are ordered by descending first-token probability (ties by
/// ascending id). Every sequence after the first has a first-token
/// probability strictly above `theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct DraftBundle {
    sequences: Vec<DraftSequence>,
    first_dist: Distribution,
    theta: f64,
    budget_used: usize,
    law: FirstTokenLaw,
}

impl DraftBundle {
    pub fn new(
        sequences: Vec<DraftSequence>,
        first_dist: Distribution,
        theta: f64,
        budget: usize,
    ) -> Result<Self, BundleError> {
        if sequences.is_empty() {
            return Err(BundleError::Empty);
        }
        for (i, seq) in sequences.iter().enumerate() {
            if seq.dists()[0] != first_dist {
                return Err(BundleError::FirstDistMismatch(i));
            }
            for (j, other) in sequences.iter().enumerate().take(i) {
                if other.first_token() == seq.first_token() {
                    return Err(BundleError::DuplicateFirstToken(j, i));
                }
            }
            if i > 0 {
                let prev = &sequences[i - 1];
                let ordered = prev.first_token_prob() > seq.first_token_prob()
                    || (prev.first_token_prob() == seq.first_token_prob()
                        && prev.first_token() < seq.first_token());
                if !ordered {
                    return Err(BundleError::Unordered(i));
                }
                if seq.first_token_prob() <= theta {
                    return Err(BundleError::BelowThreshold {
                        index: i,
                        prob: seq.first_token_prob(),
                        theta,
                    });
                }
            }
        }
        let budget_used = sequences.iter().map(DraftSequence::len).sum();
        if budget_used > budget {
            return Err(BundleError::OverBudget {
                used: budget_used,
                budget,
            });
        }
        Ok(Self {
            sequences,
            first_dist,
            theta,
            budget_used,
            law: FirstTokenLaw::Ranked,
        })
    }

    /// A one-sequence bundle whose first token was drawn from `first_dist`.
    pub fn sampled(
        sequence: DraftSequence,
        first_dist: Distribution,
        theta: f64,
        budget: usize,
    ) -> Result<Self, BundleError> {
        let mut bundle = Self::new(vec![sequence], first_dist, theta, budget)?;
        bundle.law = FirstTokenLaw::Sampled;
        Ok(bundle)
    }

    pub fn first_token_law(&self) -> FirstTokenLaw {
        self.law
    }

    pub fn sequences(&self) -> &[DraftSequence] {
        &self.sequences
    }

    pub fn first_dist(&self) -> &Distribution {
        &self.first_dist
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn budget_used(&self) -> usize {
        self.budget_used
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Verified prefix plus the tail that was appended but not yet verified.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationState {
    prompt_len: usize,
    verified: Vec<Token>,
    unverified: Option<DraftSequence>,
}

impl GenerationState {
    pub fn new(prompt: &[Token]) -> Self {
        Self {
            prompt_len: prompt.len(),
            verified: prompt.to_vec(),
            unverified: None,
        }
    }

    /// Length of the verified prefix, prompt included.
    pub fn n(&self) -> usize {
        self.verified.len()
    }

    pub fn verified(&self) -> &[Token] {
        &self.verified
    }

    pub fn unverified(&self) -> Option<&DraftSequence> {
        self.unverified.as_ref()
    }

    /// Verified tokens produced after the prompt.
    pub fn generated(&self) -> &[Token] {
        &self.verified[self.prompt_len..]
    }

    /// Verified prefix followed by the unverified tail.
    pub fn full_prefix(&self) -> Vec<Token> {
        let mut prefix = self.verified.clone();
        if let Some(tail) = &self.unverified {
            prefix.extend_from_slice(tail.tokens());
        }
        prefix
    }

    /// The last `k` tokens of [`Self::full_prefix`].
    pub fn recent(&self, k: usize) -> Vec<Token> {
        let tail: &[Token] = self.unverified.as_ref().map_or(&[], |t| t.tokens());
        if k <= tail.len() {
            return tail[tail.len() - k..].to_vec();
        }
        let from_verified = (k - tail.len()).min(self.verified.len());
        let mut out = self.verified[self.verified.len() - from_verified..].to_vec();
        out.extend_from_slice(tail);
        out
    }

    /// The last `k` verified tokens.
    pub fn recent_verified(&self, k: usize) -> &[Token] {
        &self.verified[self.verified.len() - k.min(self.verified.len())..]
    }

    pub(crate) fn commit(&mut self, tokens: &[Token]) {
        self.verified.extend_from_slice(tokens);
    }

    pub(crate) fn take_unverified(&mut self) -> Option<DraftSequence> {
        self.unverified.take()
    }

    pub(crate) fn set_unverified(&mut self, tail: Option<DraftSequence>) {
        self.unverified = tail;
    }

    pub fn into_generated(mut self) -> Vec<Token> {
        self.verified.split_off(self.prompt_len)
    }
}
