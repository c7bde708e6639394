//! Backoff Markov language models.
//!
//! A model maps context suffixes of length `1..=order` to next-token
//! distributions, with a mandatory default row used when no suffix matches.
//! The longest matching suffix wins.
//!
//! File format (UTF-8, `#` comments):
//!
//! ```text
//! vocab 3
//! order 1
//! temperature 1.0
//! ctx 0 : 0.1 0.8 0.1
//! ctx 2 : 0.3 0.3 0.4
//! default : 0.4 0.3 0.3
//! ```
//!
//! Multi-token contexts are comma separated, oldest first: `ctx 0,2 : ...`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution as _, Gamma};

use crate::kv;
use crate::types::{normalize, Distribution, Token};

/// Rows in model files may be off from unit mass by this much; they are
/// renormalized on load.
pub const ROW_TOLERANCE: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("parse error: {0}")]
    Parse(#[from] kv::KvError),
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn invalid(msg: impl Into<String>) -> ModelError {
    ModelError::Invalid(msg.into())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    vocab_size: usize,
    order: usize,
    temperature: f64,
    base_rows: HashMap<Vec<Token>, Distribution>,
    base_default: Distribution,
    rows: HashMap<Vec<Token>, Distribution>,
    default: Distribution,
}

impl ModelSpec {
    pub fn new(
        vocab_size: usize,
        order: usize,
        rows: impl IntoIterator<Item = (Vec<Token>, Distribution)>,
        default: Distribution,
    ) -> Result<Self, ModelError> {
        if vocab_size < 2 {
            return Err(invalid(format!("vocab size {vocab_size} is below 2")));
        }
        if default.len() != vocab_size {
            return Err(invalid(format!(
                "default row has {} entries for vocab {vocab_size}",
                default.len()
            )));
        }
        let mut table = HashMap::new();
        for (ctx, dist) in rows {
            if ctx.is_empty() || ctx.len() > order {
                return Err(invalid(format!(
                    "context of length {} outside 1..={order}",
                    ctx.len()
                )));
            }
            if let Some(t) = ctx.iter().find(|t| t.index() >= vocab_size) {
                return Err(invalid(format!("context token {t} outside vocab {vocab_size}")));
            }
            if dist.len() != vocab_size {
                return Err(invalid(format!(
                    "row for context {ctx:?} has {} entries for vocab {vocab_size}",
                    dist.len()
                )));
            }
            if table.insert(ctx.clone(), dist).is_some() {
                return Err(invalid(format!("duplicate row for context {ctx:?}")));
            }
        }
        Ok(Self {
            vocab_size,
            order,
            temperature: 1.0,
            rows: table.clone(),
            default: default.clone(),
            base_rows: table,
            base_default: default,
        })
    }

    /// Order-0 model that ignores its context.
    pub fn context_free(dist: Distribution) -> Result<Self, ModelError> {
        Self::new(dist.len(), 0, [], dist)
    }

    /// Order-1 model that deterministically follows `next`.
    pub fn one_hot_chain(vocab_size: usize, next: impl Fn(Token) -> Token) -> Result<Self, ModelError> {
        let rows = (0..vocab_size as u32).map(|t| {
            let t = Token(t);
            (vec![t], Distribution::point_mass(vocab_size, next(t)))
        });
        Self::new(vocab_size, 1, rows, Distribution::point_mass(vocab_size, next(Token(0))))
    }

    /// Random model with a row for every context of length exactly `order`.
    ///
    /// Rows are Dirichlet draws with the given concentration; small values
    /// give peaked rows.
    pub fn random<R: Rng + ?Sized>(vocab_size: usize, order: usize, concentration: f64, rng: &mut R) -> Self {
        let row = |rng: &mut R| dirichlet(vocab_size, concentration, rng);
        let rows: Vec<_> = all_contexts(vocab_size, order)
            .into_iter()
            .map(|ctx| {
                let d = row(rng);
                (ctx, d)
            })
            .collect();
        let default = row(rng);
        Self::new(vocab_size, order, rows, default).expect("generated model is valid")
    }

    /// Copy whose rows are mixed with fresh random rows:
    /// `(1 - noise) * p + noise * r`.
    pub fn perturbed<R: Rng + ?Sized>(&self, noise: f64, concentration: f64, rng: &mut R) -> Self {
        let mut mix = |p: &Distribution| {
            let r = dirichlet(self.vocab_size, concentration, rng);
            let raw: Vec<f64> = p
                .probs()
                .iter()
                .zip(r.probs())
                .map(|(a, b)| (1.0 - noise) * a + noise * b)
                .collect();
            normalize(&raw).expect("mixture has mass")
        };
        let mut keys: Vec<_> = self.base_rows.keys().cloned().collect();
        keys.sort();
        let rows: Vec<_> = keys
            .into_iter()
            .map(|k| {
                let d = mix(&self.base_rows[&k]);
                (k, d)
            })
            .collect();
        let default = mix(&self.base_default);
        Self::new(self.vocab_size, self.order, rows, default)
            .expect("perturbed model is valid")
            .with_temperature(self.temperature)
    }

    /// Copy that samples at `temperature`: rows become `p^(1/T)`, renormalized.
    pub fn with_temperature(&self, temperature: f64) -> Self {
        assert!(
            temperature.is_finite() && temperature > 0.0,
            "temperature must be positive"
        );
        let mut out = self.clone();
        out.temperature = temperature;
        out.rows = self
            .base_rows
            .iter()
            .map(|(k, d)| (k.clone(), apply_temperature(d, temperature)))
            .collect();
        out.default = apply_temperature(&self.base_default, temperature);
        out
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// Next-token distribution after `context`.
    pub fn forward(&self, context: &[Token]) -> &Distribution {
        debug_assert!(context.iter().all(|t| t.index() < self.vocab_size));
        let longest = self.order.min(context.len());
        for k in (1..=longest).rev() {
            if let Some(d) = self.rows.get(&context[context.len() - k..]) {
                return d;
            }
        }
        &self.default
    }

    /// Distributions at the position of each candidate:
    /// `result[t] == forward(context ++ candidates[..t])`.
    ///
    /// A single target pass in timing terms.
    pub fn forward_scored(&self, context: &[Token], candidates: &[Token]) -> Vec<Distribution> {
        let keep = self.order.min(context.len());
        let mut window: Vec<Token> = context[context.len() - keep..].to_vec();
        let mut out = Vec::with_capacity(candidates.len());
        for &c in candidates {
            out.push(self.forward(&window).clone());
            window.push(c);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, ModelError> {
        let mut vocab: Option<usize> = None;
        let mut order: Option<usize> = None;
        let mut temperature: f64 = 1.0;
        let mut rows: Vec<(usize, Vec<Token>, Vec<f64>)> = Vec::new();
        let mut default: Option<(usize, Vec<f64>)> = None;

        let perr = |line: usize, message: String| ModelError::Parse(kv::KvError { line, message });

        for (line, content) in kv::content_lines(text) {
            if let Some((lhs, rhs)) = content.split_once(':') {
                let probs = rhs
                    .split_whitespace()
                    .map(|v| kv::parse_number::<f64>(line, "row", v))
                    .collect::<Result<Vec<_>, _>>()?;
                let lhs = lhs.trim();
                if lhs == "default" {
                    if default.is_some() {
                        return Err(perr(line, "second default row".into()));
                    }
                    default = Some((line, probs));
                } else if let Some(ctx) = lhs.strip_prefix("ctx") {
                    let ctx = ctx
                        .split(',')
                        .map(|t| kv::parse_number::<u32>(line, "ctx", t.trim()).map(Token))
                        .collect::<Result<Vec<_>, _>>()?;
                    rows.push((line, ctx, probs));
                } else {
                    return Err(perr(line, format!("unknown row label `{lhs}`")));
                }
                continue;
            }
            let (key, value) = content.split_once(char::is_whitespace).unwrap_or((content, ""));
            let value = value.trim();
            match key {
                "vocab" => vocab = Some(kv::parse_number(line, key, value)?),
                "order" => order = Some(kv::parse_number(line, key, value)?),
                "temperature" => {
                    temperature = kv::parse_number(line, key, value)?;
                    if !(temperature.is_finite() && temperature > 0.0) {
                        return Err(invalid(format!("temperature {temperature} is not positive")));
                    }
                }
                _ => return Err(perr(line, format!("unknown key `{key}`"))),
            }
        }

        let vocab = vocab.ok_or_else(|| invalid("missing `vocab` header"))?;
        let order = order.unwrap_or(0);
        let (default_line, default) = default.ok_or_else(|| invalid("missing default row"))?;
        let checked = |line: usize, probs: Vec<f64>| -> Result<Distribution, ModelError> {
            if probs.len() != vocab {
                return Err(invalid(format!(
                    "line {line}: row has {} entries, vocab is {vocab}",
                    probs.len()
                )));
            }
            let sum: f64 = probs.iter().sum();
            if probs.iter().any(|p| !p.is_finite() || *p < 0.0) || (sum - 1.0).abs() > ROW_TOLERANCE {
                return Err(invalid(format!("line {line}: row does not normalize (sum {sum})")));
            }
            if (sum - 1.0).abs() <= crate::types::SUM_TOLERANCE {
                return Distribution::new(probs).map_err(|e| invalid(format!("line {line}: {e}")));
            }
            normalize(&probs).map_err(|e| invalid(format!("line {line}: {e}")))
        };
        let default = checked(default_line, default)?;
        let rows = rows
            .into_iter()
            .map(|(line, ctx, probs)| Ok((ctx, checked(line, probs)?)))
            .collect::<Result<Vec<_>, ModelError>>()?;
        let model = Self::new(vocab, order, rows, default)?;
        Ok(if temperature == 1.0 {
            model
        } else {
            model.with_temperature(temperature)
        })
    }

    /// Serializes to the model file format. Rows are written untempered.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let fmt_row = |d: &Distribution| {
            d.probs()
                .iter()
                .map(|p| format!("{p:?}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        writeln!(out, "vocab {}", self.vocab_size).unwrap();
        writeln!(out, "order {}", self.order).unwrap();
        if self.temperature != 1.0 {
            writeln!(out, "temperature {:?}", self.temperature).unwrap();
        }
        let mut keys: Vec<_> = self.base_rows.keys().collect();
        keys.sort();
        for k in keys {
            let ctx = k.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",");
            writeln!(out, "ctx {ctx} : {}", fmt_row(&self.base_rows[k])).unwrap();
        }
        writeln!(out, "default : {}", fmt_row(&self.base_default)).unwrap();
        out
    }
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelSpec, ModelError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    ModelSpec::parse(&text)
}

fn apply_temperature(dist: &Distribution, temperature: f64) -> Distribution {
    if temperature == 1.0 {
        return dist.clone();
    }
    let max = dist.max_prob();
    let raw: Vec<f64> = dist
        .probs()
        .iter()
        .map(|p| (p / max).powf(1.0 / temperature))
        .collect();
    normalize(&raw).expect("argmax keeps unit weight")
}

fn dirichlet<R: Rng + ?Sized>(vocab_size: usize, concentration: f64, rng: &mut R) -> Distribution {
    let gamma = Gamma::new(concentration, 1.0).expect("positive concentration");
    loop {
        let raw: Vec<f64> = (0..vocab_size).map(|_| gamma.sample(rng)).collect();
        if let Ok(d) = normalize(&raw) {
            return d;
        }
    }
}

fn all_contexts(vocab_size: usize, len: usize) -> Vec<Vec<Token>> {
    if len == 0 {
        return Vec::new();
    }
    let mut out: Vec<Vec<Token>> = vec![Vec::new()];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (0..vocab_size as u32).map(move |t| {
                    let mut p = prefix.clone();
                    p.push(Token(t));
                    p
                })
            })
            .collect();
    }
    out
}
