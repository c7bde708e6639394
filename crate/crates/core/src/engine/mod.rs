//! Generation loops: plain autoregressive, sequential speculative sampling,
//! and the parallel draft/target protocol, plus budget calibration.

mod duo;

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::drafting::{extend_sampled, DEFAULT_MAX_SEQUENCES};
use crate::model::ModelSpec;
use crate::rng::{RandomStream, UniformSource};
use crate::simclock::{as_ms, Clock, Event, Timeline};
use crate::types::{Distribution, GenerationState, Token};
use crate::verify::sps_verify;

pub use duo::run_duo;

pub const DEFAULT_BUDGET_CAP: usize = 256;
pub const DEFAULT_BUDGET: usize = 8;
/// Trials per side when a run calibrates its own budget.
pub const CALIBRATION_TRIALS: usize = 15;
const WARMUP_TRIALS: usize = 5;
const MIN_TRIALS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Vanilla,
    Sps,
    Duo,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Vanilla => "vanilla",
            Mode::Sps => "sps",
            Mode::Duo => "duo",
        }
    }

    pub fn needs_draft(self) -> bool {
        self != Mode::Vanilla
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "vanilla" => Ok(Mode::Vanilla),
            "sps" => Ok(Mode::Sps),
            "duo" => Ok(Mode::Duo),
            _ => Err(format!("unknown mode `{s}` (expected vanilla, sps or duo)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BudgetPolicy {
    Fixed(usize),
    /// Measure the cost coefficient on the run's clock first.
    Calibrated,
}

/// How the duo loop runs its two roles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Executor {
    /// Draft role on its own thread, rendezvous once per iteration.
    #[default]
    Threaded,
    /// Both roles on the calling thread. Same outputs, no threads.
    Inline,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub mode: Mode,
    pub budget: BudgetPolicy,
    pub max_sequences: usize,
    pub max_new_tokens: usize,
    /// Applied to both models when set.
    pub temperature: Option<f64>,
    pub draft_seed: u64,
    pub verify_seed: u64,
    pub budget_cap: usize,
    pub executor: Executor,
    /// Upper bound of random sleeps injected before each worker's step.
    pub jitter: Option<Duration>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Duo,
            budget: BudgetPolicy::Fixed(DEFAULT_BUDGET),
            max_sequences: DEFAULT_MAX_SEQUENCES,
            max_new_tokens: 64,
            temperature: None,
            draft_seed: 0,
            verify_seed: 1,
            budget_cap: DEFAULT_BUDGET_CAP,
            executor: Executor::Threaded,
            jitter: None,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: String| Err(EngineError::Config(m));
        if let BudgetPolicy::Fixed(g) = self.budget {
            if g < 2 {
                return bad(format!("budget must be at least 2, got {g}"));
            }
            if g > self.budget_cap {
                return bad(format!("budget {g} exceeds cap {}", self.budget_cap));
            }
        }
        if self.budget_cap < 2 {
            return bad(format!("budget cap must be at least 2, got {}", self.budget_cap));
        }
        if self.max_sequences == 0 {
            return bad("max sequences must be at least 1".into());
        }
        if self.max_new_tokens == 0 {
            return bad("max new tokens must be at least 1".into());
        }
        if let Some(t) = self.temperature {
            if !(t.is_finite() && t > 0.0) {
                return bad(format!("temperature must be positive, got {t}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("{0}")]
    Config(String),
    #[error("target vocabulary has {target} tokens but draft has {draft}")]
    VocabMismatch { target: usize, draft: usize },
    #[error("draft timing below clock resolution")]
    DegenerateTiming,
    #[error("draft worker stopped unexpectedly")]
    WorkerFailed,
}

/// Timing and token counts of one iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    #[serde(rename = "draft_ms", serialize_with = "as_ms")]
    pub draft_time: Duration,
    #[serde(rename = "target_ms", serialize_with = "as_ms")]
    pub target_time: Duration,
    #[serde(rename = "verify_ms", serialize_with = "as_ms")]
    pub verify_time: Duration,
    #[serde(rename = "comm_ms", serialize_with = "as_ms")]
    pub comm_time: Duration,
    /// Clock time the iteration took.
    #[serde(rename = "iteration_ms", serialize_with = "as_ms")]
    pub elapsed: Duration,
    /// Tokens committed to the verified prefix.
    pub tokens_processed: usize,
    #[serde(rename = "s")]
    pub sequence_count: usize,
    /// Drafted tokens that passed verification.
    pub accepted: usize,
    pub draft_tokens: usize,
    pub target_width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerationResult {
    pub mode: Mode,
    /// Draft budget used, if the mode drafts.
    pub budget: Option<usize>,
    pub tokens: Vec<Token>,
    pub iterations: Vec<IterationRecord>,
    #[serde(rename = "ttft_ms", serialize_with = "as_ms")]
    pub ttft: Duration,
    #[serde(rename = "total_ms", serialize_with = "as_ms")]
    pub total_time: Duration,
    pub tps: f64,
}

impl GenerationResult {
    /// How many iterations drafted each number of sequences.
    pub fn sequence_histogram(&self) -> BTreeMap<usize, usize> {
        let mut h = BTreeMap::new();
        for r in &self.iterations {
            *h.entry(r.sequence_count).or_insert(0) += 1;
        }
        h
    }

    pub fn mean_tokens_per_iteration(&self) -> f64 {
        self.tokens.len() as f64 / self.iterations.len().max(1) as f64
    }
}

/// `max(2, round(c))`.
pub fn choose_budget(c: f64) -> usize {
    assert!(c > 0.0 && c.is_finite(), "cost coefficient must be positive, got {c}");
    (c.round() as usize).max(2)
}

fn median(mut v: Vec<Duration>) -> Duration {
    v.sort();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2
    }
}

/// Cost coefficient: median target scored pass over `probe_len` positions
/// divided by median single-token draft step, as billed by `clock`.
pub fn calibrate(
    target: &ModelSpec,
    draft: &ModelSpec,
    clock: &dyn Clock,
    probe_len: usize,
    trials: usize,
) -> Result<f64, EngineError> {
    if trials < MIN_TRIALS {
        return Err(EngineError::Config(format!(
            "calibration needs at least {MIN_TRIALS} trials, got {trials}"
        )));
    }
    if probe_len == 0 {
        return Err(EngineError::Config("probe length must be at least 1".into()));
    }
    let target_ctx = vec![Token(0); target.order()];
    let draft_ctx = vec![Token(0); draft.order()];
    let candidates = vec![Token(0); probe_len];

    let time = |f: &dyn Fn()| {
        let start = Instant::now();
        f();
        start.elapsed()
    };
    let mut target_times = Vec::with_capacity(trials);
    let mut draft_times = Vec::with_capacity(trials);
    for i in 0..WARMUP_TRIALS + trials {
        let measured = time(&|| {
            std::hint::black_box(target.forward_scored(&target_ctx, &candidates));
        });
        if i >= WARMUP_TRIALS {
            target_times.push(clock.duration(Event::TargetPass(probe_len), measured));
        }
    }
    for i in 0..WARMUP_TRIALS + trials {
        let measured = time(&|| {
            std::hint::black_box(draft.forward(&draft_ctx));
        });
        if i >= WARMUP_TRIALS {
            draft_times.push(clock.duration(Event::Draft(1), measured));
        }
    }
    let d = median(draft_times);
    if d.is_zero() {
        return Err(EngineError::DegenerateTiming);
    }
    Ok(median(target_times).as_secs_f64() / d.as_secs_f64())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Calibration {
    pub cost_coefficient: f64,
    pub gamma: usize,
    /// Target width the coefficient was measured at.
    pub probe_len: usize,
}

/// Calibrates at the width a pass will actually have: starting from one
/// position, re-measure at the chosen budget until it stops moving.
pub fn calibrated_budget(
    target: &ModelSpec,
    draft: &ModelSpec,
    clock: &dyn Clock,
    trials: usize,
    cap: usize,
) -> Result<Calibration, EngineError> {
    let mut probe_len = 1;
    let mut result = None;
    for _ in 0..8 {
        let c = calibrate(target, draft, clock, probe_len, trials)?;
        let gamma = choose_budget(c).min(cap);
        result = Some(Calibration {
            cost_coefficient: c,
            gamma,
            probe_len,
        });
        if gamma == probe_len {
            break;
        }
        probe_len = gamma;
    }
    Ok(result.expect("at least one round"))
}

pub(crate) fn resolve_budget(
    target: &ModelSpec,
    draft: &ModelSpec,
    config: &EngineConfig,
    clock: &dyn Clock,
) -> Result<usize, EngineError> {
    match config.budget {
        BudgetPolicy::Fixed(g) => Ok(g),
        BudgetPolicy::Calibrated => {
            Ok(calibrated_budget(target, draft, clock, CALIBRATION_TRIALS, config.budget_cap)?.gamma)
        }
    }
}

pub(crate) fn tempered<'m>(model: &'m ModelSpec, temperature: Option<f64>) -> Cow<'m, ModelSpec> {
    match temperature {
        Some(t) if t != model.temperature() => Cow::Owned(model.with_temperature(t)),
        _ => Cow::Borrowed(model),
    }
}

pub(crate) fn check_inputs(target: &ModelSpec, draft: Option<&ModelSpec>, prompt: &[Token]) -> Result<(), EngineError> {
    if let Some(d) = draft {
        if d.vocab_size() != target.vocab_size() {
            return Err(EngineError::VocabMismatch {
                target: target.vocab_size(),
                draft: d.vocab_size(),
            });
        }
    }
    if let Some(t) = prompt.iter().find(|t| t.index() >= target.vocab_size()) {
        return Err(EngineError::Config(format!(
            "prompt token {} outside vocabulary of {}",
            t.0,
            target.vocab_size()
        )));
    }
    Ok(())
}

/// Target distributions at each position of `tail` plus the one after it.
pub(crate) fn score(target: &ModelSpec, context: &[Token], tail: &[Token]) -> Vec<Distribution> {
    let mut candidates = Vec::with_capacity(tail.len() + 1);
    candidates.extend_from_slice(tail);
    // the last candidate only marks the extra position
    candidates.push(Token(0));
    target.forward_scored(context, &candidates)
}

/// Collects iteration records and the clock.
pub(crate) struct Recorder<'c> {
    pub timeline: Timeline<'c>,
    pub iterations: Vec<IterationRecord>,
    ttft: Option<Duration>,
}

impl<'c> Recorder<'c> {
    pub fn new(clock: &'c dyn Clock) -> Self {
        Self {
            timeline: Timeline::new(clock),
            iterations: Vec::new(),
            ttft: None,
        }
    }

    pub fn push(&mut self, record: IterationRecord) {
        let now = self.timeline.advance_by(record.elapsed);
        if self.ttft.is_none() && record.tokens_processed > 0 {
            self.ttft = Some(now);
        }
        self.iterations.push(record);
    }

    pub fn finish(self, mode: Mode, budget: Option<usize>, state: GenerationState) -> GenerationResult {
        let tokens = state.into_generated();
        let total_time = self.timeline.now();
        let tps = tokens.len() as f64 / total_time.as_secs_f64().max(1e-12);
        GenerationResult {
            mode,
            budget,
            tokens,
            iterations: self.iterations,
            ttft: self.ttft.unwrap_or(total_time),
            total_time,
            tps,
        }
    }
}

/// One target forward per token.
pub fn run_vanilla(
    target: &ModelSpec,
    prompt: &[Token],
    config: &EngineConfig,
    clock: &dyn Clock,
) -> Result<GenerationResult, EngineError> {
    config.validate()?;
    check_inputs(target, None, prompt)?;
    let target = tempered(target, config.temperature);
    let mut rng = RandomStream::new(config.verify_seed);
    let mut state = GenerationState::new(prompt);
    let mut rec = Recorder::new(clock);
    while state.generated().len() < config.max_new_tokens {
        let start = Instant::now();
        let tok = target.forward(state.recent_verified(target.order())).sample(rng.next_uniform());
        let measured = start.elapsed();
        state.commit(&[tok]);
        let target_time = rec.timeline.bill(Event::TargetPass(1), measured);
        rec.push(IterationRecord {
            draft_time: Duration::ZERO,
            target_time,
            verify_time: Duration::ZERO,
            comm_time: Duration::ZERO,
            elapsed: target_time,
            tokens_processed: 1,
            sequence_count: 0,
            accepted: 0,
            draft_tokens: 0,
            target_width: 1,
        });
    }
    Ok(rec.finish(Mode::Vanilla, None, state))
}

/// Draft a chain, score it in one target pass, verify; one after another.
pub fn run_sps(
    target: &ModelSpec,
    draft: &ModelSpec,
    prompt: &[Token],
    config: &EngineConfig,
    clock: &dyn Clock,
) -> Result<GenerationResult, EngineError> {
    config.validate()?;
    check_inputs(target, Some(draft), prompt)?;
    let target = tempered(target, config.temperature);
    let draft = tempered(draft, config.temperature);
    let gamma = resolve_budget(&target, &draft, config, clock)?;

    let mut rng_draft = RandomStream::new(config.draft_seed);
    let mut rng_verify = RandomStream::new(config.verify_seed);
    let mut state = GenerationState::new(prompt);
    let mut rec = Recorder::new(clock);
    while state.generated().len() < config.max_new_tokens {
        let start = Instant::now();
        let (tokens, dists) = extend_sampled(&draft, state.recent_verified(draft.order()), gamma, &mut rng_draft);
        let draft_measured = start.elapsed();

        let start = Instant::now();
        let scores = score(&target, state.recent_verified(target.order()), &tokens);
        let target_measured = start.elapsed();

        let start = Instant::now();
        let out = sps_verify(&tokens, &dists, &scores, &mut rng_verify);
        state.commit(&tokens[..out.accepted]);
        state.commit(&[out.next_token]);
        let verify_measured = start.elapsed();

        let tl = &rec.timeline;
        let draft_time = tl.bill(Event::Draft(gamma), draft_measured);
        let target_time = tl.bill(Event::TargetPass(gamma + 1), target_measured);
        let verify_time = tl.bill(Event::Verify, verify_measured);
        rec.push(IterationRecord {
            draft_time,
            target_time,
            verify_time,
            comm_time: Duration::ZERO,
            elapsed: draft_time + target_time + verify_time,
            tokens_processed: out.accepted + 1,
            sequence_count: 1,
            accepted: out.accepted,
            draft_tokens: gamma,
            target_width: gamma + 1,
        });
    }
    Ok(rec.finish(Mode::Sps, Some(gamma), state))
}

/// Dispatches on `config.mode`.
pub fn generate(
    target: &ModelSpec,
    draft: Option<&ModelSpec>,
    prompt: &[Token],
    config: &EngineConfig,
    clock: &dyn Clock,
) -> Result<GenerationResult, EngineError> {
    let need_draft = || draft.ok_or_else(|| EngineError::Config(format!("{} mode needs a draft model", config.mode.as_str())));
    match config.mode {
        Mode::Vanilla => run_vanilla(target, prompt, config, clock),
        Mode::Sps => run_sps(target, need_draft()?, prompt, config, clock),
        Mode::Duo => run_duo(target, need_draft()?, prompt, config, clock),
    }
}
