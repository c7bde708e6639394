//! Speculative decoding with the draft and target models running side by side.
//!
//! Each iteration the draft worker speculates a bundle of token sequences
//! while the target worker scores the previous iteration's unverified tail.
//! After a rendezvous the target side verifies the tail, then the bundle's
//! first tokens, keeping the emitted text distributed exactly as the target
//! model would have produced it.
//!
//! Models are backoff Markov tables ([`model`]) and time is virtual
//! ([`simclock`]), so every property of the protocol can be checked exactly
//! on a laptop.

pub mod cli;
pub mod drafting;
pub mod engine;
pub mod fidelity;
pub mod kv;
pub mod model;
pub mod rng;
pub mod simclock;
pub mod types;
pub mod verify;

pub use drafting::{draft_dynamic, extend_greedy, extend_sampled, DEFAULT_MAX_SEQUENCES};
pub use engine::{
    calibrate, choose_budget, generate, run_duo, run_sps, run_vanilla, BudgetPolicy, EngineConfig, EngineError,
    Executor, GenerationResult, IterationRecord, Mode,
};
pub use model::{load_model, ModelError, ModelSpec};
pub use rng::{RandomStream, UniformSource};
pub use simclock::{Clock, DeviceProfile, Event, Timeline, WallClock};
pub use types::{normalize, DistError, Distribution, DraftBundle, DraftSequence, FirstTokenLaw, GenerationState, Token};
pub use verify::{accept_test, residual, sps_verify, verify_bundle, verify_prefix, BundleOutcome, PrefixOutcome};
