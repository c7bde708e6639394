//! Empirical check that a mode emits the target model's law.
//!
//! The exact law of each generated position is computed by summing over all
//! contexts the target can reach; the empirical law comes from many
//! independent short runs.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::engine::{generate, resolve_budget, tempered, BudgetPolicy, EngineConfig, EngineError, Executor};
use crate::model::ModelSpec;
use crate::rng::derive_seed;
use crate::simclock::DeviceProfile;
use crate::types::{tv_distance, Token};

pub const TV_THRESHOLD: f64 = 0.01;
pub const MIN_SAMPLES: usize = 10_000;

/// Marginal law of each of the first `positions` generated tokens.
pub fn exact_position_laws(target: &ModelSpec, prompt: &[Token], positions: usize) -> Vec<Vec<f64>> {
    let vocab = target.vocab_size();
    let order = target.order();
    let start = prompt[prompt.len() - order.min(prompt.len())..].to_vec();
    let mut mass: BTreeMap<Vec<Token>, f64> = BTreeMap::from([(start, 1.0)]);
    let mut laws = Vec::with_capacity(positions);
    for _ in 0..positions {
        let mut law = vec![0.0; vocab];
        let mut next: BTreeMap<Vec<Token>, f64> = BTreeMap::new();
        for (ctx, &w) in &mass {
            for (t, &p) in target.forward(ctx).probs().iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                law[t] += w * p;
                let mut c = ctx.clone();
                c.push(Token(t as u32));
                if c.len() > order {
                    c.remove(0);
                }
                *next.entry(c).or_insert(0.0) += w * p;
            }
        }
        laws.push(law);
        mass = next;
    }
    laws
}

/// Per-position token frequencies over `samples` runs of `positions` tokens,
/// run `i` seeded from `derive_seed(seed, i)`.
pub fn empirical_position_laws(
    target: &ModelSpec,
    draft: Option<&ModelSpec>,
    prompt: &[Token],
    config: &EngineConfig,
    positions: usize,
    samples: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>, EngineError> {
    let vocab = target.vocab_size();
    let clock = DeviceProfile::balanced();
    let mut base = EngineConfig {
        max_new_tokens: positions,
        executor: Executor::Inline,
        jitter: None,
        ..config.clone()
    };
    if let (BudgetPolicy::Calibrated, Some(d)) = (base.budget, draft) {
        let t = tempered(target, base.temperature);
        let d = tempered(d, base.temperature);
        base.budget = BudgetPolicy::Fixed(resolve_budget(&t, &d, &base, &clock)?);
    }
    base.validate()?;

    let counts = (0..samples as u64)
        .into_par_iter()
        .map(|i| {
            let run_seed = derive_seed(seed, i);
            let cfg = EngineConfig {
                draft_seed: derive_seed(run_seed, 0),
                verify_seed: derive_seed(run_seed, 1),
                ..base.clone()
            };
            generate(target, draft, prompt, &cfg, &clock).map(|r| r.tokens)
        })
        .try_fold(
            || vec![0u64; positions * vocab],
            |mut acc, tokens| {
                for (k, t) in tokens?.iter().take(positions).enumerate() {
                    acc[k * vocab + t.index()] += 1;
                }
                Ok::<_, EngineError>(acc)
            },
        )
        .try_reduce(
            || vec![0u64; positions * vocab],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                Ok(a)
            },
        )?;

    Ok(counts
        .chunks(vocab)
        .map(|row| row.iter().map(|&c| c as f64 / samples as f64).collect())
        .collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct PositionReport {
    pub position: usize,
    pub tv: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FidelityReport {
    pub mode: String,
    pub samples: usize,
    pub positions: Vec<PositionReport>,
    pub max_tv: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// Compares a mode's empirical per-position law with the exact target law.
pub fn fidelity_report(
    target: &ModelSpec,
    draft: Option<&ModelSpec>,
    prompt: &[Token],
    config: &EngineConfig,
    positions: usize,
    samples: usize,
    seed: u64,
) -> Result<FidelityReport, EngineError> {
    let tempered_target = tempered(target, config.temperature);
    let exact = exact_position_laws(&tempered_target, prompt, positions);
    let empirical = empirical_position_laws(target, draft, prompt, config, positions, samples, seed)?;
    let positions: Vec<_> = exact
        .iter()
        .zip(&empirical)
        .enumerate()
        .map(|(position, (e, m))| PositionReport {
            position,
            tv: tv_distance(e, m),
        })
        .collect();
    let max_tv = positions.iter().map(|p| p.tv).fold(0.0, f64::max);
    Ok(FidelityReport {
        mode: config.mode.as_str().to_string(),
        samples,
        positions,
        max_tv,
        threshold: TV_THRESHOLD,
        pass: max_tv <= TV_THRESHOLD,
    })
}
