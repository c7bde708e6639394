#![allow(dead_code)]

use std::collections::BTreeMap;

use duodec::{Distribution, ModelSpec, Token, UniformSource};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn d(p: &[f64]) -> Distribution {
    Distribution::new(p.to_vec()).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random distribution with every entry at least `floor`.
pub fn floored(vocab: usize, floor: f64, rng: &mut impl Rng) -> Distribution {
    let raw: Vec<f64> = (0..vocab).map(|_| rng.random::<f64>() + 1e-3).collect();
    let sum: f64 = raw.iter().sum();
    let spare = 1.0 - floor * vocab as f64;
    let probs: Vec<f64> = raw.iter().map(|x| floor + spare * x / sum).collect();
    duodec::normalize(&probs).unwrap()
}

/// Replays a fixed prefix of uniforms, then a constant.
struct Replay<'a> {
    prefix: &'a [f64],
    fill: f64,
    used: usize,
}

impl UniformSource for Replay<'_> {
    fn next_uniform(&mut self) -> f64 {
        let v = self.prefix.get(self.used).copied().unwrap_or(self.fill);
        self.used += 1;
        v
    }
}

const FILLS: [f64; 5] = [1e-4, 0.3, 0.5, 0.7, 0.9999];
const GRID: usize = 4096;

type Sig<K> = Vec<(K, usize)>;

fn signature<K, F>(f: &F, prefix: &[f64]) -> Sig<K>
where
    F: Fn(&mut dyn UniformSource) -> K,
{
    FILLS
        .iter()
        .map(|&fill| {
            let mut r = Replay { prefix, fill, used: 0 };
            let k = f(&mut r);
            (k, r.used)
        })
        .collect()
}

/// Exact output law of a procedure whose behaviour is piecewise constant
/// in each uniform it draws.
///
/// Each coordinate is scanned on a grid, boundaries are bisected to machine
/// precision, and each piece is explored recursively with its midpoint
/// fixed. Pieces narrower than `1 / GRID` may be missed, so callers keep
/// probabilities away from zero or exactly at it.
pub fn exact_law<K, F>(f: F) -> BTreeMap<K, f64>
where
    K: Ord + Clone,
    F: Fn(&mut dyn UniformSource) -> K,
{
    let mut law = BTreeMap::new();
    explore(&f, &mut Vec::new(), 1.0, &mut law);
    law
}

fn explore<K, F>(f: &F, prefix: &mut Vec<f64>, weight: f64, law: &mut BTreeMap<K, f64>)
where
    K: Ord + Clone,
    F: Fn(&mut dyn UniformSource) -> K,
{
    let base = signature(f, prefix);
    if base.iter().all(|(_, used)| *used <= prefix.len()) {
        *law.entry(base[0].0.clone()).or_insert(0.0) += weight;
        return;
    }
    assert!(prefix.len() < 32, "procedure keeps drawing");

    let mut at = |x: f64| {
        prefix.push(x);
        let s = signature(f, prefix);
        prefix.pop();
        s
    };
    let mut cuts = vec![0.0];
    let mut prev_x = 0.0;
    let mut prev = at(0.0);
    for i in 1..=GRID {
        let x = if i == GRID { 1.0 - f64::EPSILON } else { i as f64 / GRID as f64 };
        let cur = at(x);
        if cur != prev {
            let (mut lo, mut hi) = (prev_x, x);
            while hi - lo > 1e-15 {
                let mid = 0.5 * (lo + hi);
                if at(mid) == prev {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            cuts.push(hi);
        }
        prev_x = x;
        prev = cur;
    }
    cuts.push(1.0);

    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b <= a {
            continue;
        }
        prefix.push(0.5 * (a + b));
        explore(f, prefix, weight * (b - a), law);
        prefix.pop();
    }
}

/// Dense law over `0..vocab` from a token-keyed map.
pub fn dense(law: &BTreeMap<Token, f64>, vocab: usize) -> Vec<f64> {
    let mut v = vec![0.0; vocab];
    for (t, p) in law {
        v[t.index()] += p;
    }
    v
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// A random target and a draft derived from it.
pub struct Pair {
    pub target: ModelSpec,
    pub draft: ModelSpec,
    pub prompt: Vec<Token>,
    pub label: String,
}

/// Target/draft pairs of varying vocabulary, order, sharpness and
/// agreement, including unrelated and one-hot drafts.
pub fn random_pairs(count: usize, seed: u64) -> Vec<Pair> {
    let mut r = rng(seed);
    (0..count)
        .map(|i| {
            let vocab = 2 + i % 7;
            let order = 1 + i % 2;
            let concentration = [0.3, 0.7, 1.5][i % 3];
            let target = ModelSpec::random(vocab, order, concentration, &mut r);
            let (draft, kind) = match i % 5 {
                0 => (target.perturbed(0.1, concentration, &mut r), "close"),
                1 => (target.perturbed(0.5, concentration, &mut r), "loose"),
                2 => (ModelSpec::random(vocab, order, concentration, &mut r), "unrelated"),
                3 => (
                    ModelSpec::one_hot_chain(vocab, |t| Token((t.0 + 1) % vocab as u32)).unwrap(),
                    "one-hot",
                ),
                _ => (target.clone(), "identical"),
            };
            let prompt = (0..order).map(|_| Token(r.random_range(0..vocab as u32))).collect();
            Pair {
                target,
                draft,
                prompt,
                label: format!("pair {i}: vocab {vocab} order {order} {kind} draft"),
            }
        })
        .collect()
}

/// Law of the emitted token when ranked first tokens are checked one by
/// one, each accepted with its current probability and removed on
/// rejection. Computed by hand, not through the library.
pub fn point_mass_law(p: &[f64], firsts: &[Token]) -> Vec<f64> {
    let mut law = vec![0.0; p.len()];
    let mut cur = p.to_vec();
    let mut mass = 1.0;
    for t in firsts {
        let a = cur[t.index()];
        law[t.index()] += mass * a;
        mass *= 1.0 - a;
        if 1.0 - a <= 0.0 {
            return law;
        }
        cur[t.index()] = 0.0;
        let z: f64 = cur.iter().sum();
        cur.iter_mut().for_each(|x| *x /= z);
    }
    law.iter_mut().zip(&cur).for_each(|(l, c)| *l += mass * c);
    law
}

/// Same loop with the first-position draft probability as the proposal:
/// accept `min(1, cur/q)` and subtract `min(cur, q)` at the token.
pub fn literal_law(p: &[f64], q: &[f64], firsts: &[Token]) -> Vec<f64> {
    let mut law = vec![0.0; p.len()];
    let mut cur = p.to_vec();
    let mut mass = 1.0;
    for t in firsts {
        let i = t.index();
        let a = (cur[i] / q[i]).min(1.0);
        law[i] += mass * a;
        mass *= 1.0 - a;
        cur[i] -= cur[i].min(q[i]);
        let z: f64 = cur.iter().sum();
        if z <= 0.0 {
            return law;
        }
        cur.iter_mut().for_each(|x| *x /= z);
    }
    law.iter_mut().zip(&cur).for_each(|(l, c)| *l += mass * c);
    law
}

/// Ranked bundle of `s` one-token sequences on the top ranks of `first`.
pub fn ranked_bundle(first: &Distribution, s: usize) -> duodec::DraftBundle {
    let seqs = first.ranked()[..s]
        .iter()
        .map(|&t| duodec::DraftSequence::new(vec![t], vec![first.clone()]).unwrap())
        .collect();
    duodec::DraftBundle::new(seqs, first.clone(), 0.0, s).unwrap()
}

pub fn sampled_bundle(first: &Distribution, t: Token) -> duodec::DraftBundle {
    let seq = duodec::DraftSequence::new(vec![t], vec![first.clone()]).unwrap();
    duodec::DraftBundle::sampled(seq, first.clone(), 0.0, 1).unwrap()
}

pub fn emitted(bundle: &duodec::DraftBundle, out: duodec::BundleOutcome) -> Token {
    match out {
        duodec::BundleOutcome::Accepted { index } => bundle.sequences()[index].first_token(),
        duodec::BundleOutcome::AllRejected { fallback } => fallback,
    }
}

/// Exact law of the token `verify_bundle` emits, found by probing.
pub fn probed_law(bundle: &duodec::DraftBundle, p: &Distribution) -> Vec<f64> {
    let law = exact_law(|r| emitted(bundle, duodec::verify_bundle(bundle, p, r)));
    dense(&law, p.len())
}

/// Exact law of the token emitted by a single-sequence draft: first token
/// drawn from `q`, then verified.
pub fn probed_sampled_law(q: &Distribution, p: &Distribution) -> Vec<f64> {
    let mut law = vec![0.0; p.len()];
    for (x, &qx) in q.probs().iter().enumerate() {
        if qx == 0.0 {
            continue;
        }
        let b = sampled_bundle(q, Token(x as u32));
        for (l, v) in law.iter_mut().zip(probed_law(&b, p)) {
            *l += qx * v;
        }
    }
    law
}

pub struct OracleCase {
    pub p: Distribution,
    pub q: Distribution,
    pub s: usize,
}

/// Every vocabulary size 2..=4 and sequence count 1..=3 it allows, with
/// random, sparse and one-hot targets.
pub fn oracle_cases(seed: u64) -> Vec<OracleCase> {
    let mut r = rng(seed);
    let mut cases = vec![OracleCase {
        p: d(&[0.5, 0.3, 0.2]),
        q: d(&[0.6, 0.3, 0.1]),
        s: 2,
    }];
    for vocab in 2..=4 {
        for s in 1..=vocab.min(3) {
            for k in 0..6 {
                let q = floored(vocab, 0.02, &mut r);
                let p = match k {
                    4 => Distribution::point_mass(vocab, Token(r.random_range(0..vocab as u32))),
                    5 => {
                        let mut v = floored(vocab, 0.02, &mut r).probs().to_vec();
                        v[r.random_range(0..vocab)] = 0.0;
                        duodec::normalize(&v).unwrap()
                    }
                    _ => floored(vocab, 0.02, &mut r),
                };
                cases.push(OracleCase { p, q, s });
            }
        }
    }
    cases
}

fn with(context: &[Token], more: &[Token]) -> Vec<Token> {
    let mut v = context.to_vec();
    v.extend_from_slice(more);
    v
}

/// Drafts one bundle and checks every structural rule it must satisfy.
pub fn drafting_invariants(
    model: &ModelSpec,
    context: &[Token],
    budget: usize,
    max_sequences: usize,
    seed: u64,
) -> Result<(), String> {
    let b = duodec::draft_dynamic(model, context, budget, max_sequences, &mut duodec::RandomStream::new(seed));
    let first = model.forward(context);
    let ranked = first.ranked();
    let top = ranked[0];
    let s = b.len();
    let check = |ok: bool, what: &str| if ok { Ok(()) } else { Err(format!("{what}: {b:?}")) };

    check(b.budget_used() == budget, "budget not exhausted")?;
    check(b.sequences().iter().map(|q| q.len()).sum::<usize>() == budget, "lengths")?;
    check(s >= 1 && s <= max_sequences.min(budget), "sequence count")?;
    check(b.first_dist() == first, "first distribution")?;

    let theta = first.prob(top) * model.forward(&with(context, &[top])).max_prob();
    check((b.theta() - theta).abs() < 1e-12, "threshold")?;

    for (i, seq) in b.sequences().iter().enumerate().skip(1) {
        check(seq.first_token() == ranked[i], "rank order")?;
        check(seq.first_token_prob() > theta, "below threshold")?;
    }
    if s < max_sequences.min(budget) && s < ranked.len() {
        check(first.prob(ranked[s]) <= theta, "admission stopped early")?;
    }

    if s == 1 {
        check(b.first_token_law() == duodec::FirstTokenLaw::Sampled, "single sequence law")?;
        check(b.sequences()[0].len() == budget, "single sequence length")?;
    } else {
        check(b.first_token_law() == duodec::FirstTokenLaw::Ranked, "ranked law")?;
        check(b.sequences()[0].first_token() == first.argmax(), "top is argmax")?;
        let per = budget / s;
        for (i, seq) in b.sequences().iter().enumerate() {
            let want = if i == 0 { budget - per * (s - 1) } else { per };
            check(seq.len() == want, "even split")?;
        }
    }

    for seq in b.sequences() {
        for k in 0..seq.len() {
            let ctx = with(context, &seq.tokens()[..k]);
            check(seq.dists()[k] == *model.forward(&ctx), "recorded distribution")?;
            check(seq.dists()[k].prob(seq.tokens()[k]) > 0.0, "zero probability token")?;
        }
    }
    Ok(())
}

/// The high-acceptance pair used for throughput comparisons.
pub fn throughput_pair() -> (ModelSpec, ModelSpec) {
    let mut r = rng(7);
    let target = ModelSpec::random(8, 2, 0.3, &mut r);
    let draft = target.perturbed(0.1, 0.3, &mut r);
    (target, draft)
}

/// Duo throughput at each budget, single-sequence drafting.
pub fn duo_tps(
    target: &ModelSpec,
    draft: &ModelSpec,
    profile: &duodec::DeviceProfile,
    gammas: &[usize],
    tokens: usize,
) -> Vec<(usize, f64)> {
    gammas
        .iter()
        .map(|&g| {
            let cfg = duodec::EngineConfig {
                mode: duodec::Mode::Duo,
                budget: duodec::BudgetPolicy::Fixed(g),
                max_sequences: 1,
                max_new_tokens: tokens,
                executor: duodec::Executor::Inline,
                ..Default::default()
            };
            let r = duodec::generate(target, Some(draft), &[Token(0)], &cfg, profile).unwrap();
            (g, r.tps)
        })
        .collect()
}

/// Flat-target profiles with cost coefficient `c` over several draft speeds.
pub fn flat_profiles() -> Vec<(String, duodec::DeviceProfile)> {
    let mut out = Vec::new();
    for d in [1.0, 2.0, 3.0] {
        for c in [4.0, 6.0, 8.0, 10.0] {
            let p = duodec::DeviceProfile::new(d, c * d, 0.0, 0.2).unwrap();
            out.push((format!("draft {d} ms, c {c}"), p));
        }
    }
    out
}
