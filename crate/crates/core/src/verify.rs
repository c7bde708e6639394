//! Lossless verification.
//!
//! Three entry points share the accept/resample rule of speculative sampling:
//!
//! * [`verify_prefix`] checks last iteration's unverified tail, oldest token
//!   first, and stops at the first rejection.
//! * [`verify_bundle`] checks the first tokens of a multi-sequence draft one
//!   after another against a running residual of the target distribution.
//! * [`sps_verify`] is the classic single-chain verifier used by the
//!   sequential baseline.
//!
//! When a bundle has several sequences their first tokens are picked by
//! rank, not sampled, so each proposal is a point mass: first token `t` is
//! accepted with probability `current[t]`, and on rejection all of `t`'s
//! mass leaves the residual. Testing against the draft's own first-position
//! probability instead would over-emit high-ranked tokens. A single-sequence
//! bundle samples its first token, and is checked like any drafted token.

use crate::rng::UniformSource;
use crate::types::{normalize, DistError, Distribution, DraftBundle, DraftSequence, FirstTokenLaw, Token};

/// Result of checking the unverified tail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum PrefixOutcome {
    AllAccepted,
    /// Tokens before `position` stand; `resample` replaces the rejected one
    /// and everything after it is dropped.
    RejectedAt { position: usize, resample: Token },
}

/// Result of checking a bundle's first tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum BundleOutcome {
    /// Sequence `index` had its first token accepted.
    Accepted { index: usize },
    AllRejected { fallback: Token },
}

/// Accept iff `r < p / q`, which happens with probability `min(1, p / q)`.
#[inline]
pub fn accept_test(p_tok: f64, q_tok: f64, r: f64) -> bool {
    debug_assert!(q_tok > 0.0, "drafted token with zero draft probability");
    r < p_tok / q_tok
}

/// `normalize(max(p - q, 0))`.
pub fn residual(p: &Distribution, q: &Distribution) -> Result<Distribution, DistError> {
    assert_eq!(p.len(), q.len(), "residual of distributions over different vocabularies");
    let raw: Vec<f64> = p
        .probs()
        .iter()
        .zip(q.probs())
        .map(|(a, b)| (a - b).max(0.0))
        .collect();
    normalize(&raw)
}

/// Residual, or `p` itself when the residual has no mass. Rejection has
/// probability zero in that case, so it is only reachable through rounding.
fn residual_or(p: &Distribution, q: &Distribution) -> Distribution {
    match residual(p, q) {
        Ok(r) => r,
        Err(DistError::ZeroMass) => p.clone(),
        Err(e) => panic!("residual of valid distributions failed: {e}"),
    }
}

/// Verifies an unverified tail against the target's distributions at its
/// positions. One uniform per checked position, plus one for the resample.
pub fn verify_prefix<R: UniformSource + ?Sized>(
    tail: &DraftSequence,
    target_dists: &[Distribution],
    rng: &mut R,
) -> PrefixOutcome {
    assert_eq!(
        tail.len(),
        target_dists.len(),
        "one target distribution per tail position"
    );
    for (position, ((&tok, q), p)) in tail.tokens().iter().zip(tail.dists()).zip(target_dists).enumerate() {
        let r = rng.next_uniform();
        if !accept_test(p.prob(tok), q.prob(tok), r) {
            let resample = residual_or(p, q).sample(rng.next_uniform());
            return PrefixOutcome::RejectedAt { position, resample };
        }
    }
    PrefixOutcome::AllAccepted
}

/// Verifies the bundle's first tokens in bundle order against `p_n`, the
/// target distribution at that position.
pub fn verify_bundle<R: UniformSource + ?Sized>(bundle: &DraftBundle, p_n: &Distribution, rng: &mut R) -> BundleOutcome {
    assert_eq!(p_n.len(), bundle.first_dist().len());
    if bundle.first_token_law() == FirstTokenLaw::Sampled {
        let t = bundle.sequences()[0].first_token();
        let q = bundle.first_dist();
        if accept_test(p_n.prob(t), q.prob(t), rng.next_uniform()) {
            return BundleOutcome::Accepted { index: 0 };
        }
        return BundleOutcome::AllRejected {
            fallback: residual_or(p_n, q).sample(rng.next_uniform()),
        };
    }
    let vocab = p_n.len();
    let mut current = p_n.clone();
    for (index, seq) in bundle.sequences().iter().enumerate() {
        let t = seq.first_token();
        let proposal = Distribution::point_mass(vocab, t);
        let r = rng.next_uniform();
        if accept_test(current.prob(t), proposal.prob(t), r) {
            return BundleOutcome::Accepted { index };
        }
        current = residual_or(&current, &proposal);
    }
    BundleOutcome::AllRejected {
        fallback: current.sample(rng.next_uniform()),
    }
}

/// Outcome of one classic speculative-sampling round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpsOutcome {
    /// Leading draft tokens that were accepted.
    pub accepted: usize,
    /// Resampled token after a rejection, or the bonus token.
    pub next_token: Token,
}

/// Classic speculative sampling over one drafted chain.
///
/// `target_dists` has one more entry than `draft_tokens`; the last one feeds
/// the bonus token when everything is accepted.
pub fn sps_verify<R: UniformSource + ?Sized>(
    draft_tokens: &[Token],
    draft_dists: &[Distribution],
    target_dists: &[Distribution],
    rng: &mut R,
) -> SpsOutcome {
    assert_eq!(draft_tokens.len(), draft_dists.len());
    assert_eq!(target_dists.len(), draft_tokens.len() + 1);
    for (i, ((&tok, q), p)) in draft_tokens.iter().zip(draft_dists).zip(target_dists).enumerate() {
        let r = rng.next_uniform();
        if !accept_test(p.prob(tok), q.prob(tok), r) {
            return SpsOutcome {
                accepted: i,
                next_token: residual_or(p, q).sample(rng.next_uniform()),
            };
        }
    }
    SpsOutcome {
        accepted: draft_tokens.len(),
        next_token: target_dists[draft_tokens.len()].sample(rng.next_uniform()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RandomStream;

    fn d(p: &[f64]) -> Distribution {
        Distribution::new(p.to_vec()).unwrap()
    }

    /// Replays fixed uniforms.
    struct Script<'a>(std::slice::Iter<'a, f64>);

    impl<'a> Script<'a> {
        fn new(v: &'a [f64]) -> Self {
            Self(v.iter())
        }
    }

    impl UniformSource for Script<'_> {
        fn next_uniform(&mut self) -> f64 {
            *self.0.next().expect("script exhausted")
        }
    }

    #[test]
    fn accept_test_examples() {
        assert!(accept_test(0.6, 0.3, 0.9));
        assert!(!accept_test(0.2, 0.4, 0.6));
        assert!(accept_test(0.37, 0.37, 0.999_999));
    }

    #[test]
    fn residual_examples() {
        assert_eq!(residual(&d(&[0.5, 0.5]), &d(&[1.0, 0.0])).unwrap(), d(&[0.0, 1.0]));
        assert_eq!(residual(&d(&[0.6, 0.4]), &d(&[0.2, 0.8])).unwrap().probs()[1], 0.0);
        let r = residual(&d(&[0.6, 0.4]), &d(&[0.2, 0.8])).unwrap();
        assert!((r.probs()[0] - 1.0).abs() < 1e-15);
        assert_eq!(residual(&d(&[0.3, 0.7]), &d(&[0.3, 0.7])), Err(DistError::ZeroMass));
    }

    #[test]
    fn prefix_matching_dists_always_accept() {
        let p = d(&[0.3, 0.3, 0.4]);
        let tail = DraftSequence::new(vec![Token(0), Token(2)], vec![p.clone(), p.clone()]).unwrap();
        let mut rng = RandomStream::new(5);
        for _ in 0..1000 {
            assert_eq!(verify_prefix(&tail, &[p.clone(), p.clone()], &mut rng), PrefixOutcome::AllAccepted);
        }
    }

    #[test]
    fn prefix_one_hot_agreement_accepts() {
        let q = d(&[0.5, 0.5]);
        let tail = DraftSequence::new(vec![Token(1), Token(0)], vec![q.clone(), q]).unwrap();
        let target = [d(&[0.0, 1.0]), d(&[1.0, 0.0])];
        assert_eq!(
            verify_prefix(&tail, &target, &mut Script::new(&[0.99, 0.99])),
            PrefixOutcome::AllAccepted
        );
    }

    #[test]
    fn prefix_rejection_resamples_from_residual() {
        let tail = DraftSequence::new(vec![Token(0)], vec![d(&[1.0, 0.0])]).unwrap();
        let target = [d(&[0.5, 0.5])];
        let mut rng = RandomStream::new(11);
        let trials = 200_000;
        let mut rejected = 0;
        for _ in 0..trials {
            match verify_prefix(&tail, &target, &mut rng) {
                PrefixOutcome::AllAccepted => {}
                PrefixOutcome::RejectedAt { position, resample } => {
                    assert_eq!(position, 0);
                    assert_eq!(resample, Token(1));
                    rejected += 1;
                }
            }
        }
        let rate = rejected as f64 / trials as f64;
        assert!((rate - 0.5).abs() < 0.005, "rejection rate {rate}");
    }

    #[test]
    fn prefix_stops_at_first_rejection() {
        let q = d(&[0.5, 0.5]);
        let tail = DraftSequence::new(vec![Token(0), Token(0), Token(0)], vec![q.clone(), q.clone(), q]).unwrap();
        let p = d(&[0.25, 0.75]);
        // ratio 0.5: accept, reject, then resample; third position never drawn
        let out = verify_prefix(&tail, &[p.clone(), p.clone(), p], &mut Script::new(&[0.1, 0.7, 0.0]));
        assert_eq!(
            out,
            PrefixOutcome::RejectedAt {
                position: 1,
                resample: Token(1)
            }
        );
    }

    fn bundle(first: &Distribution, tokens: &[u32], theta: f64) -> DraftBundle {
        let seqs = tokens
            .iter()
            .map(|&t| DraftSequence::new(vec![Token(t)], vec![first.clone()]).unwrap())
            .collect();
        DraftBundle::new(seqs, first.clone(), theta, tokens.len()).unwrap()
    }

    #[test]
    fn bundle_scripted_branches() {
        let first = d(&[0.6, 0.3, 0.1]);
        let b = bundle(&first, &[0, 1], 0.2);
        let p = d(&[0.5, 0.3, 0.2]);
        assert_eq!(verify_bundle(&b, &p, &mut Script::new(&[0.49])), BundleOutcome::Accepted { index: 0 });
        // after removing token 0 the residual is [0, 0.6, 0.4]
        assert_eq!(
            verify_bundle(&b, &p, &mut Script::new(&[0.5, 0.59])),
            BundleOutcome::Accepted { index: 1 }
        );
        assert_eq!(
            verify_bundle(&b, &p, &mut Script::new(&[0.5, 0.61, 0.0])),
            BundleOutcome::AllRejected { fallback: Token(2) }
        );
    }

    #[test]
    fn bundle_one_hot_target_never_falls_back_elsewhere() {
        let first = d(&[0.4, 0.35, 0.25]);
        let b = bundle(&first, &[0, 1, 2], 0.1);
        let p = Distribution::point_mass(3, Token(1));
        let mut rng = RandomStream::new(2);
        for _ in 0..1000 {
            assert_eq!(verify_bundle(&b, &p, &mut rng), BundleOutcome::Accepted { index: 1 });
        }
        let b = bundle(&first, &[0], 0.1);
        for _ in 0..1000 {
            assert_eq!(
                verify_bundle(&b, &p, &mut rng),
                BundleOutcome::AllRejected { fallback: Token(1) }
            );
        }
    }

    #[test]
    fn sampled_first_token_uses_draft_ratio() {
        let q = d(&[0.6, 0.3, 0.1]);
        let seq = DraftSequence::new(vec![Token(1)], vec![q.clone()]).unwrap();
        let b = DraftBundle::sampled(seq, q.clone(), 0.5, 1).unwrap();
        let p = d(&[0.5, 0.15, 0.35]);
        // ratio 0.5
        assert_eq!(verify_bundle(&b, &p, &mut Script::new(&[0.49])), BundleOutcome::Accepted { index: 0 });
        // residual [0, 0, 1]
        assert_eq!(
            verify_bundle(&b, &p, &mut Script::new(&[0.51, 0.0])),
            BundleOutcome::AllRejected { fallback: Token(2) }
        );
        let mut rng = RandomStream::new(4);
        for _ in 0..1000 {
            assert_eq!(verify_bundle(&b, &q, &mut rng), BundleOutcome::Accepted { index: 0 });
        }
    }

    #[test]
    fn sps_identical_models_accept_everything() {
        let p = d(&[0.2, 0.5, 0.3]);
        let toks = [Token(0), Token(2), Token(1)];
        let mut rng = RandomStream::new(9);
        for _ in 0..1000 {
            let out = sps_verify(&toks, &[p.clone(), p.clone(), p.clone()], &[p.clone(), p.clone(), p.clone(), p.clone()], &mut rng);
            assert_eq!(out.accepted, 3);
        }
    }

    #[test]
    fn sps_one_hot_disagreement_resamples_argmax() {
        let q = d(&[1.0, 0.0]);
        let p = d(&[0.0, 1.0]);
        let out = sps_verify(&[Token(0), Token(0)], &[q.clone(), q], &[p.clone(), p.clone(), p], &mut RandomStream::new(0));
        assert_eq!(out, SpsOutcome { accepted: 0, next_token: Token(1) });
    }
}
