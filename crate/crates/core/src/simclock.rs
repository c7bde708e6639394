//! Virtual device timing.
//!
//! A [`DeviceProfile`] prices each engine event: draft steps cost a fixed
//! amount per token, a target pass is affine in the number of positions it
//! scores, and rendezvous and verification have small fixed costs. The engine
//! asks a [`Clock`] what each event cost and accumulates a [`Timeline`].
//! [`WallClock`] bills measured elapsed time instead, for real hardware.

use std::path::Path;
use std::time::Duration;

use serde::Serialize;

use crate::kv;

/// Something the engine spends time on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Event {
    /// Autoregressive draft steps, one per token.
    Draft(usize),
    /// One target forward scoring this many positions.
    TargetPass(usize),
    /// Draft/target rendezvous.
    Comm,
    Verify,
}

/// Prices engine events.
pub trait Clock: Send + Sync {
    /// What `event` costs, given how long it actually took.
    fn duration(&self, event: Event, measured: Duration) -> Duration;
}

/// Bills measured time.
#[derive(Debug, Clone, Copy, Default)]
pub struct WallClock;

impl Clock for WallClock {
    fn duration(&self, _event: Event, measured: Duration) -> Duration {
        measured
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ProfileError {
    #[error("parse error: {0}")]
    Parse(#[from] kv::KvError),
    #[error("invalid profile: {0}")]
    Invalid(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Simulated latencies for the draft and target roles.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DeviceProfile {
    #[serde(serialize_with = "as_ms")]
    pub draft_per_token: Duration,
    #[serde(serialize_with = "as_ms")]
    pub target_base: Duration,
    #[serde(serialize_with = "as_ms")]
    pub target_slope: Duration,
    #[serde(serialize_with = "as_ms")]
    pub comm_latency: Duration,
    #[serde(serialize_with = "as_ms")]
    pub verify_cost: Duration,
}

pub(crate) fn as_ms<S: serde::Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64(to_ms(*d))
}

pub fn ms(value: f64) -> Duration {
    Duration::from_nanos((value * 1e6).round() as u64)
}

pub fn to_ms(d: Duration) -> f64 {
    d.as_nanos() as f64 / 1e6
}

/// Named built-in profiles.
pub const PRESETS: &[&str] = &["balanced", "matched", "cpu-bound", "equal"];

impl DeviceProfile {
    /// Verification defaults to 1% of a single-position target pass.
    pub fn new(draft_per_token_ms: f64, target_base_ms: f64, target_slope_ms: f64, comm_ms: f64) -> Result<Self, ProfileError> {
        Self::with_verify(draft_per_token_ms, target_base_ms, target_slope_ms, comm_ms, None)
    }

    pub fn with_verify(
        draft_per_token_ms: f64,
        target_base_ms: f64,
        target_slope_ms: f64,
        comm_ms: f64,
        verify_ms: Option<f64>,
    ) -> Result<Self, ProfileError> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(ms(v))
            } else {
                Err(ProfileError::Invalid(format!("{name} must be positive, got {v}")))
            }
        };
        if !(target_slope_ms.is_finite() && target_slope_ms >= 0.0) {
            return Err(ProfileError::Invalid(format!(
                "target slope must be non-negative, got {target_slope_ms}"
            )));
        }
        let draft_per_token = positive("draft_per_token_ms", draft_per_token_ms)?;
        let target_base = positive("target_base_ms", target_base_ms)?;
        let target_slope = ms(target_slope_ms);
        let comm_latency = positive("comm_ms", comm_ms)?;
        let verify_cost = match verify_ms {
            Some(v) => positive("verify_ms", v)?,
            None => (target_base + target_slope) / 100,
        };
        Ok(Self {
            draft_per_token,
            target_base,
            target_slope,
            comm_latency,
            verify_cost,
        })
    }

    /// `balanced`: a 24 ms target pass flat in width against 1 ms draft
    /// steps. `matched`: drafting 8 tokens costs the same as verifying 8.
    /// `cpu-bound`: slow draft steps. `equal`: one draft step costs one pass.
    pub fn preset(name: &str) -> Option<Self> {
        let p = match name {
            "balanced" => Self::new(1.0, 24.0, 0.0, 0.2),
            "matched" => Self::new(3.0, 20.0, 0.5, 0.2),
            "cpu-bound" => Self::new(4.0, 20.0, 0.25, 0.3),
            "equal" => Self::new(10.0, 10.0, 0.0, 0.1),
            _ => return None,
        };
        Some(p.expect("presets are valid"))
    }

    pub fn balanced() -> Self {
        Self::preset("balanced").unwrap()
    }

    pub fn target_pass(&self, width: usize) -> Duration {
        self.target_base + self.target_slope * width as u32
    }

    pub fn event_duration(&self, event: Event) -> Duration {
        match event {
            Event::Draft(tokens) => self.draft_per_token * tokens as u32,
            Event::TargetPass(width) => self.target_pass(width),
            Event::Comm => self.comm_latency,
            Event::Verify => self.verify_cost,
        }
    }

    pub fn parse(text: &str) -> Result<Self, ProfileError> {
        let pairs = kv::parse_pairs(text)?;
        let mut values = [None; 5];
        const KEYS: [&str; 5] = [
            "draft_per_token_ms",
            "target_base_ms",
            "target_slope_ms",
            "comm_ms",
            "verify_ms",
        ];
        for (key, (line, value)) in &pairs {
            let slot = KEYS.iter().position(|k| k == key).ok_or_else(|| kv::KvError {
                line: *line,
                message: format!("unknown profile key `{key}`"),
            })?;
            values[slot] = Some(kv::parse_number::<f64>(*line, key, value)?);
        }
        let need = |i: usize| values[i].ok_or_else(|| ProfileError::Invalid(format!("missing `{}`", KEYS[i])));
        Self::with_verify(need(0)?, need(1)?, values[2].unwrap_or(0.0), need(3)?, values[4])
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ProfileError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ProfileError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        format!(
            "draft_per_token_ms {}\ntarget_base_ms {}\ntarget_slope_ms {}\ncomm_ms {}\nverify_ms {}\n",
            to_ms(self.draft_per_token),
            to_ms(self.target_base),
            to_ms(self.target_slope),
            to_ms(self.comm_latency),
            to_ms(self.verify_cost),
        )
    }
}

impl Clock for DeviceProfile {
    fn duration(&self, event: Event, _measured: Duration) -> Duration {
        self.event_duration(event)
    }
}

/// Accumulated time of one run.
pub struct Timeline<'c> {
    clock: &'c dyn Clock,
    now: Duration,
}

impl<'c> Timeline<'c> {
    pub fn new(clock: &'c dyn Clock) -> Self {
        Self {
            clock,
            now: Duration::ZERO,
        }
    }

    pub fn now(&self) -> Duration {
        self.now
    }

    pub fn clock(&self) -> &'c dyn Clock {
        self.clock
    }

    /// What `event` costs on this timeline's clock.
    pub fn bill(&self, event: Event, measured: Duration) -> Duration {
        self.clock.duration(event, measured)
    }

    pub fn advance_by(&mut self, d: Duration) -> Duration {
        self.now += d;
        self.now
    }

    /// Bills `event` and returns the new time.
    pub fn advance(&mut self, event: Event, measured: Duration) -> Duration {
        self.now += self.clock.duration(event, measured);
        self.now
    }

    /// Bills two events that run at the same time: the slower one sets the
    /// pace.
    pub fn parallel_advance(&mut self, draft: (Event, Duration), target: (Event, Duration)) -> Duration {
        let d = self.clock.duration(draft.0, draft.1);
        let t = self.clock.duration(target.0, target.1);
        self.now += d.max(t);
        self.now
    }
}
