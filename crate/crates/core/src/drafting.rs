//! Dynamic multi-sequence drafting.
//!
//! The draft model's top-1 token at the first position and the top-1
//! probability at the second position define a threshold
//! `theta = p(1,1) * p(2,1)`, the draft's estimate that its best two-token
//! continuation survives verification. Any other first-position token more
//! likely than that starts its own sequence. The token budget is then split
//! evenly across sequences, remainder to the top one.
//!
//! A lone sequence samples its first token from the draft instead of taking
//! the argmax, so that verification can use the draft's own probability.

use crate::model::ModelSpec;
use crate::rng::UniformSource;
use crate::types::{Distribution, DraftBundle, DraftSequence, Token};

pub const DEFAULT_MAX_SEQUENCES: usize = 8;

/// Keeps the last `order` tokens, which is all a model can look at.
struct Window {
    tokens: Vec<Token>,
    order: usize,
}

impl Window {
    fn new(model: &ModelSpec, context: &[Token]) -> Self {
        let order = model.order();
        let keep = order.min(context.len());
        Self {
            tokens: context[context.len() - keep..].to_vec(),
            order,
        }
    }

    fn push(&mut self, t: Token) {
        if self.order == 0 {
            return;
        }
        if self.tokens.len() == self.order {
            self.tokens.remove(0);
        }
        self.tokens.push(t);
    }
}

/// Appends the argmax token `length` times.
pub fn extend_greedy(model: &ModelSpec, context: &[Token], length: usize) -> (Vec<Token>, Vec<Distribution>) {
    extend_with(model, context, length, |d| d.argmax())
}

/// Appends `length` tokens sampled from the draft model.
pub fn extend_sampled<R: UniformSource + ?Sized>(
    model: &ModelSpec,
    context: &[Token],
    length: usize,
    rng: &mut R,
) -> (Vec<Token>, Vec<Distribution>) {
    extend_with(model, context, length, |d| d.sample(rng.next_uniform()))
}

fn extend_with(
    model: &ModelSpec,
    context: &[Token],
    length: usize,
    mut pick: impl FnMut(&Distribution) -> Token,
) -> (Vec<Token>, Vec<Distribution>) {
    let mut window = Window::new(model, context);
    let mut tokens = Vec::with_capacity(length);
    let mut dists = Vec::with_capacity(length);
    for _ in 0..length {
        let dist = model.forward(&window.tokens);
        let t = pick(dist);
        dists.push(dist.clone());
        tokens.push(t);
        window.push(t);
    }
    (tokens, dists)
}

fn with_token(context: &[Token], t: Token) -> Vec<Token> {
    let mut v = Vec::with_capacity(context.len() + 1);
    v.extend_from_slice(context);
    v.push(t);
    v
}

/// Drafts up to `max_sequences` sequences totalling exactly `budget` tokens.
///
/// With several sequences, first tokens are chosen by rank; a single
/// sequence samples its first token. Continuations are sampled from the
/// draft model with `rng`, so each recorded distribution is the law its
/// token was actually drawn from.
///
/// # Panics
///
/// If `budget < 2` or `max_sequences == 0`.
pub fn draft_dynamic<R: UniformSource + ?Sized>(
    draft_model: &ModelSpec,
    context: &[Token],
    budget: usize,
    max_sequences: usize,
    rng: &mut R,
) -> DraftBundle {
    assert!(budget >= 2, "threshold needs a two-token probe, budget {budget}");
    assert!(max_sequences >= 1);

    let keep = draft_model.order().min(context.len());
    let context = &context[context.len() - keep..];

    let first_dist = draft_model.forward(context).clone();
    let ranked = first_dist.ranked();
    let top = ranked[0];
    let (_, probe) = extend_greedy(draft_model, &with_token(context, top), 1);
    let theta = first_dist.prob(top) * probe[0].max_prob();

    // Every sequence needs at least one token.
    let cap = max_sequences.min(budget);
    let mut firsts = vec![top];
    for &t in &ranked[1..] {
        if firsts.len() == cap || first_dist.prob(t) <= theta {
            break;
        }
        firsts.push(t);
    }

    let s = firsts.len();
    if s == 1 {
        let first = first_dist.sample(rng.next_uniform());
        let (mut tokens, mut dists) = extend_sampled(draft_model, &with_token(context, first), budget - 1, rng);
        tokens.insert(0, first);
        dists.insert(0, first_dist.clone());
        let seq = DraftSequence::new(tokens, dists).expect("sampled tokens have positive probability");
        return DraftBundle::sampled(seq, first_dist, theta, budget).expect("single sequence bundle");
    }
    let per_sequence = budget / s;
    let top_len = per_sequence + (budget - s * per_sequence);

    let sequences = firsts
        .iter()
        .enumerate()
        .map(|(i, &first)| {
            let len = if i == 0 { top_len } else { per_sequence };
            let (mut tokens, mut dists) = extend_sampled(draft_model, &with_token(context, first), len - 1, rng);
            tokens.insert(0, first);
            dists.insert(0, first_dist.clone());
            DraftSequence::new(tokens, dists).expect("drafted tokens have positive probability")
        })
        .collect();

    let bundle = DraftBundle::new(sequences, first_dist, theta, budget).expect("drafting keeps bundle invariants");
    debug_assert_eq!(bundle.budget_used(), budget);
    bundle
}
