//! The parallel loop.
//!
//! Each iteration the draft role drafts a bundle on the full prefix
//! (verified tokens plus last iteration's unverified tail) while the target
//! role scores the tail and the position after it. After the rendezvous the
//! tail is verified first; only if it survives are the bundle's first tokens
//! verified, and the accepted sequence's remaining tokens become the next
//! tail.

use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::time::{Duration, Instant};

use rand::Rng;

use super::{check_inputs, resolve_budget, score, tempered, EngineConfig, EngineError, Executor, GenerationResult, IterationRecord, Mode, Recorder};
use crate::drafting::draft_dynamic;
use crate::model::ModelSpec;
use crate::rng::RandomStream;
use crate::simclock::{Clock, Event};
use crate::types::{DraftBundle, GenerationState, Token};
use crate::verify::{verify_bundle, verify_prefix, BundleOutcome, PrefixOutcome};

/// What the target role sees of the draft role.
trait DraftRole {
    /// Starts drafting on `context`.
    fn request(&mut self, context: Vec<Token>) -> Result<(), EngineError>;
    /// Waits for the bundle and how long drafting took.
    fn collect(&mut self) -> Result<(DraftBundle, Duration), EngineError>;
}

struct DraftWorker<'m> {
    model: &'m ModelSpec,
    budget: usize,
    max_sequences: usize,
    rng: RandomStream,
}

impl DraftWorker<'_> {
    fn draft(&mut self, context: &[Token]) -> (DraftBundle, Duration) {
        let start = Instant::now();
        let bundle = draft_dynamic(self.model, context, self.budget, self.max_sequences, &mut self.rng);
        (bundle, start.elapsed())
    }
}

struct Inline<'m> {
    worker: DraftWorker<'m>,
    pending: Option<Vec<Token>>,
}

impl DraftRole for Inline<'_> {
    fn request(&mut self, context: Vec<Token>) -> Result<(), EngineError> {
        self.pending = Some(context);
        Ok(())
    }

    fn collect(&mut self) -> Result<(DraftBundle, Duration), EngineError> {
        let context = self.pending.take().ok_or(EngineError::WorkerFailed)?;
        Ok(self.worker.draft(&context))
    }
}

struct Threaded {
    to_worker: SyncSender<Vec<Token>>,
    from_worker: Receiver<(DraftBundle, Duration)>,
}

impl DraftRole for Threaded {
    fn request(&mut self, context: Vec<Token>) -> Result<(), EngineError> {
        self.to_worker.send(context).map_err(|_| EngineError::WorkerFailed)
    }

    fn collect(&mut self) -> Result<(DraftBundle, Duration), EngineError> {
        self.from_worker.recv().map_err(|_| EngineError::WorkerFailed)
    }
}

fn jitter(max: Option<Duration>) {
    if let Some(max) = max.filter(|m| !m.is_zero()) {
        let nanos = rand::rng().random_range(0..max.as_nanos() as u64);
        std::thread::sleep(Duration::from_nanos(nanos));
    }
}

/// Runs both roles, the draft one on a worker thread unless the config asks
/// for [`Executor::Inline`]. Outputs do not depend on the executor.
pub fn run_duo(
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
    let budget = resolve_budget(&target, &draft, config, clock)?;
    let mut worker = DraftWorker {
        model: &draft,
        budget,
        max_sequences: config.max_sequences,
        rng: RandomStream::new(config.draft_seed),
    };

    match config.executor {
        Executor::Inline => {
            let mut role = Inline { worker, pending: None };
            target_loop(&target, draft.order(), budget, prompt, config, clock, &mut role)
        }
        Executor::Threaded => std::thread::scope(|s| {
            let (to_worker, requests) = sync_channel::<Vec<Token>>(1);
            let (replies, from_worker) = sync_channel(1);
            let delay = config.jitter;
            s.spawn(move || {
                // ends when the target role drops its sender
                for context in requests {
                    jitter(delay);
                    if replies.send(worker.draft(&context)).is_err() {
                        break;
                    }
                }
            });
            let mut role = Threaded { to_worker, from_worker };
            target_loop(&target, draft.order(), budget, prompt, config, clock, &mut role)
        }),
    }
}

fn target_loop(
    target: &ModelSpec,
    draft_order: usize,
    budget: usize,
    prompt: &[Token],
    config: &EngineConfig,
    clock: &dyn Clock,
    role: &mut dyn DraftRole,
) -> Result<GenerationResult, EngineError> {
    let mut rng = RandomStream::new(config.verify_seed);
    let mut state = GenerationState::new(prompt);
    let mut rec = Recorder::new(clock);

    while state.generated().len() < config.max_new_tokens {
        let start = Instant::now();
        role.request(state.recent(draft_order))?;
        let mut comm_measured = start.elapsed();

        jitter(config.jitter);
        let tail = state.take_unverified();
        let tail_tokens: &[Token] = tail.as_ref().map_or(&[], |t| t.tokens());
        let start = Instant::now();
        let scores = score(target, state.recent_verified(target.order()), tail_tokens);
        let target_measured = start.elapsed();

        let start = Instant::now();
        let (bundle, draft_measured) = role.collect()?;
        comm_measured += start.elapsed().saturating_sub(draft_measured.saturating_sub(target_measured));

        let start = Instant::now();
        let m = tail_tokens.len();
        let prefix = match &tail {
            Some(t) => verify_prefix(t, &scores[..m], &mut rng),
            None => PrefixOutcome::AllAccepted,
        };
        let (processed, accepted) = match prefix {
            PrefixOutcome::RejectedAt { position, resample } => {
                state.commit(&tail_tokens[..position]);
                state.commit(&[resample]);
                (position + 1, position)
            }
            PrefixOutcome::AllAccepted => {
                state.commit(tail_tokens);
                match verify_bundle(&bundle, &scores[m], &mut rng) {
                    BundleOutcome::Accepted { index } => {
                        let seq = &bundle.sequences()[index];
                        state.commit(&[seq.first_token()]);
                        state.set_unverified(seq.tail());
                        (m + 1, m + 1)
                    }
                    BundleOutcome::AllRejected { fallback } => {
                        state.commit(&[fallback]);
                        (m + 1, m)
                    }
                }
            }
        };
        let verify_measured = start.elapsed();

        let tl = &rec.timeline;
        let draft_time = tl.bill(Event::Draft(budget), draft_measured);
        let target_time = tl.bill(Event::TargetPass(m + 1), target_measured);
        let comm_time = tl.bill(Event::Comm, comm_measured);
        let verify_time = tl.bill(Event::Verify, verify_measured);
        rec.push(IterationRecord {
            draft_time,
            target_time,
            verify_time,
            comm_time,
            elapsed: draft_time.max(target_time) + comm_time + verify_time,
            tokens_processed: processed,
            sequence_count: bundle.len(),
            accepted,
            draft_tokens: budget,
            target_width: m + 1,
        });
    }
    Ok(rec.finish(Mode::Duo, Some(budget), state))
}
