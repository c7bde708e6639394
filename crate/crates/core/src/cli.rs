//! `duodec` command line.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 a model or
//! profile failed to load, 4 a fidelity check failed.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::engine::{
    calibrate, calibrated_budget, choose_budget, generate, BudgetPolicy, Calibration, EngineConfig, EngineError,
    Executor, GenerationResult, Mode, DEFAULT_BUDGET, DEFAULT_BUDGET_CAP,
};
use crate::fidelity::{fidelity_report, MIN_SAMPLES};
use crate::kv;
use crate::model::{load_model, ModelSpec};
use crate::simclock::{to_ms, Clock, DeviceProfile, WallClock};
use crate::types::{Distribution, Token};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_LOAD: i32 = 3;
pub const EXIT_FIDELITY: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "duodec", version, about = "Parallel draft/target speculative decoding on toy models")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate tokens and print the run as JSON.
    Generate(RunArgs),
    /// Compare modes on the same prompt, one JSON line per mode.
    Bench(BenchArgs),
    /// Measure the cost coefficient and pick a draft budget.
    Calibrate(CalibrateArgs),
    /// Compare each mode's per-position token law with the target's.
    Fidelity(FidelityArgs),
    /// One JSON line per iteration, then a summary line.
    Profile(RunArgs),
}

#[derive(Debug, Args, Default)]
struct RunArgs {
    /// Key-value file with any of the options below; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// vanilla, sps or duo.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long)]
    draft: Option<PathBuf>,
    /// Device profile file. Without one, measured wall time is used.
    #[arg(long, conflicts_with = "preset")]
    profile: Option<PathBuf>,
    /// Built-in profile: balanced, matched, cpu-bound or equal.
    #[arg(long)]
    preset: Option<String>,
    /// Draft budget, or `auto` to calibrate.
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long)]
    smax: Option<usize>,
    #[arg(long)]
    max_tokens: Option<usize>,
    #[arg(long)]
    seed_draft: Option<u64>,
    #[arg(long)]
    seed_verify: Option<u64>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Comma-separated token ids.
    #[arg(long, conflicts_with = "prompt_file")]
    prompt: Option<String>,
    /// One token id per line.
    #[arg(long)]
    prompt_file: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run both roles on one thread.
    #[arg(long)]
    inline: bool,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated modes.
    #[arg(long)]
    modes: Option<String>,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    trials: Option<usize>,
    /// Target width to time. Default: iterate until the budget settles.
    #[arg(long)]
    probe_len: Option<usize>,
}

#[derive(Debug, Args)]
struct FidelityArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    modes: Option<String>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    positions: Option<usize>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Load(String),
    Fidelity,
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Load(_) => EXIT_LOAD,
            CliError::Fidelity => EXIT_FIDELITY,
            CliError::Other(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Load(m) | CliError::Other(m) => f.write_str(m),
            CliError::Fidelity => f.write_str("fidelity check failed"),
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::WorkerFailed => CliError::Other(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

fn usage(m: impl Into<String>) -> CliError {
    CliError::Usage(m.into())
}

/// Options from the config file, keyed by flag name with `_` separators.
struct FileConfig {
    dir: PathBuf,
    values: BTreeMap<String, (usize, String)>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self {
                dir: PathBuf::new(),
                values: BTreeMap::new(),
            });
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Load(format!("cannot read config {}: {e}", path.display())))?;
        let values = kv::parse_pairs(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        Ok(Self {
            dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            values,
        })
    }

    fn string(&self, key: &str) -> Option<String> {
        self.values.get(key).map(|(_, v)| v.clone())
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.string(key).map(|v| self.dir.join(v))
    }

    fn number<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        self.values
            .get(key)
            .map(|(line, v)| kv::parse_number(*line, key, v).map_err(|e| usage(format!("config: {e}"))))
            .transpose()
    }
}

/// Everything a run needs, after flags and config file are merged.
struct Manifest {
    config: EngineConfig,
    target: ModelSpec,
    draft: Option<ModelSpec>,
    profile: Option<DeviceProfile>,
    prompt: Vec<Token>,
    out: Option<PathBuf>,
}

impl Manifest {
    fn clock(&self) -> &dyn Clock {
        match &self.profile {
            Some(p) => p,
            None => &WallClock,
        }
    }
}

fn parse_tokens(text: &str) -> Result<Vec<Token>, CliError> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<u32>()
                .map(Token)
                .map_err(|_| usage(format!("bad prompt token `{s}`")))
        })
        .collect()
}

fn load_prompt(args: &RunArgs, file: &FileConfig) -> Result<Vec<Token>, CliError> {
    if let Some(p) = &args.prompt {
        return parse_tokens(p);
    }
    let path = args.prompt_file.clone().or_else(|| file.path("prompt_file"));
    if let Some(path) = path {
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::Load(format!("cannot read prompt {}: {e}", path.display())))?;
        let body: String = kv::content_lines(&text).map(|(_, l)| l).collect::<Vec<_>>().join("\n");
        return parse_tokens(&body);
    }
    file.string("prompt").map_or(Ok(Vec::new()), |p| parse_tokens(&p))
}

fn load(path: &Path) -> Result<ModelSpec, CliError> {
    load_model(path).map_err(|e| CliError::Load(format!("{}: {e}", path.display())))
}

fn parse_modes(text: &str) -> Result<Vec<Mode>, CliError> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<Mode>().map_err(usage))
        .collect()
}

fn load_profile(args: &RunArgs, file: &FileConfig) -> Result<Option<DeviceProfile>, CliError> {
    let from_path = |path: PathBuf| {
        DeviceProfile::load(&path).map_err(|e| CliError::Load(format!("{}: {e}", path.display())))
    };
    let from_name =
        |name: String| DeviceProfile::preset(&name).ok_or_else(|| usage(format!("unknown preset `{name}`")));
    match (&args.profile, &args.preset) {
        (Some(p), _) => from_path(p.clone()).map(Some),
        (None, Some(n)) => from_name(n.clone()).map(Some),
        (None, None) => match (file.path("profile"), file.string("preset")) {
            (Some(p), _) => from_path(p).map(Some),
            (None, Some(n)) => from_name(n).map(Some),
            (None, None) => Ok(None),
        },
    }
}

/// Merges flags over the config file. `needs_draft` says whether a missing
/// draft model is an error.
fn manifest(args: &RunArgs, needs_draft: impl Fn(Mode) -> bool) -> Result<Manifest, CliError> {
    let file = FileConfig::load(args.config.as_deref())?;

    let mode = match args.mode.clone().or_else(|| file.string("mode")) {
        Some(m) => m.parse::<Mode>().map_err(usage)?,
        None => Mode::Duo,
    };

    let profile = load_profile(args, &file)?;

    let budget = match args.gamma.clone().or_else(|| file.string("gamma")) {
        Some(g) if g == "auto" => BudgetPolicy::Calibrated,
        Some(g) => BudgetPolicy::Fixed(g.parse().map_err(|_| usage(format!("bad gamma `{g}`")))?),
        None if profile.is_some() => BudgetPolicy::Calibrated,
        None => BudgetPolicy::Fixed(DEFAULT_BUDGET),
    };

    let defaults = EngineConfig::default();
    let config = EngineConfig {
        mode,
        budget,
        max_sequences: args.smax.map_or_else(|| file.number("smax"), |v| Ok(Some(v)))?.unwrap_or(defaults.max_sequences),
        max_new_tokens: args
            .max_tokens
            .map_or_else(|| file.number("max_tokens"), |v| Ok(Some(v)))?
            .unwrap_or(defaults.max_new_tokens),
        temperature: args.temperature.map_or_else(|| file.number("temperature"), |v| Ok(Some(v)))?,
        draft_seed: args.seed_draft.map_or_else(|| file.number("seed_draft"), |v| Ok(Some(v)))?.unwrap_or(defaults.draft_seed),
        verify_seed: args
            .seed_verify
            .map_or_else(|| file.number("seed_verify"), |v| Ok(Some(v)))?
            .unwrap_or(defaults.verify_seed),
        budget_cap: DEFAULT_BUDGET_CAP,
        executor: if args.inline { Executor::Inline } else { Executor::Threaded },
        jitter: None,
    };
    config.validate()?;

    let target_path = args
        .target
        .clone()
        .or_else(|| file.path("target"))
        .ok_or_else(|| usage("no target model given (--target)"))?;
    let draft_path = args.draft.clone().or_else(|| file.path("draft"));
    if draft_path.is_none() && needs_draft(mode) {
        return Err(usage(format!("{} mode needs a draft model (--draft)", mode.as_str())));
    }
    let target = load(&target_path)?;
    let draft = draft_path.as_deref().map(load).transpose()?;
    let prompt = load_prompt(args, &file)?;
    let out = args.out.clone().or_else(|| file.path("out"));

    Ok(Manifest {
        config,
        target,
        draft,
        profile,
        prompt,
        out,
    })
}

struct Output(Box<dyn Write>);

impl Output {
    fn open(path: Option<&Path>) -> Result<Self, CliError> {
        Ok(Output(match path {
            Some(p) => Box::new(std::io::BufWriter::new(
                std::fs::File::create(p).map_err(|e| CliError::Other(format!("cannot write {}: {e}", p.display())))?,
            )),
            None => Box::new(std::io::stdout().lock()),
        }))
    }

    fn line(&mut self, value: &impl Serialize) -> Result<(), CliError> {
        let text = serde_json::to_string(value).map_err(|e| CliError::Other(e.to_string()))?;
        writeln!(self.0, "{text}").map_err(|e| CliError::Other(e.to_string()))
    }

    fn finish(mut self) -> Result<(), CliError> {
        self.0.flush().map_err(|e| CliError::Other(e.to_string()))
    }
}

fn run_mode(m: &Manifest, mode: Mode) -> Result<GenerationResult, CliError> {
    let config = EngineConfig { mode, ..m.config.clone() };
    Ok(generate(&m.target, m.draft.as_ref(), &m.prompt, &config, m.clock())?)
}

fn cmd_generate(args: &RunArgs) -> Result<(), CliError> {
    let m = manifest(args, Mode::needs_draft)?;
    let result = run_mode(&m, m.config.mode)?;
    let mut out = Output::open(m.out.as_deref())?;
    out.line(&result)?;
    out.finish()
}

fn cmd_profile(args: &RunArgs) -> Result<(), CliError> {
    let m = manifest(args, Mode::needs_draft)?;
    let result = run_mode(&m, m.config.mode)?;
    let mut out = Output::open(m.out.as_deref())?;
    for (i, it) in result.iterations.iter().enumerate() {
        let mut v = serde_json::to_value(it).map_err(|e| CliError::Other(e.to_string()))?;
        v["record"] = json!("iteration");
        v["iteration"] = json!(i);
        out.line(&v)?;
    }
    let histogram: BTreeMap<String, usize> = result
        .sequence_histogram()
        .into_iter()
        .map(|(s, n)| (s.to_string(), n))
        .collect();
    out.line(&json!({
        "record": "summary",
        "mode": result.mode,
        "budget": result.budget,
        "iterations": result.iterations.len(),
        "tokens": result.tokens.len(),
        "tokens_per_iteration": result.mean_tokens_per_iteration(),
        "tps": result.tps,
        "ttft_ms": to_ms(result.ttft),
        "total_ms": to_ms(result.total_time),
        "sequence_histogram": histogram,
    }))?;
    out.finish()
}

fn cmd_bench(args: &BenchArgs) -> Result<(), CliError> {
    let file = FileConfig::load(args.run.config.as_deref())?;
    let modes = parse_modes(&args.modes.clone().or_else(|| file.string("modes")).unwrap_or("vanilla,sps,duo".into()))?;
    if modes.is_empty() {
        return Err(usage("no modes given"));
    }
    let any_draft = modes.iter().any(|m| m.needs_draft());
    let m = manifest(&args.run, |_| any_draft)?;
    let results = modes
        .iter()
        .map(|&mode| run_mode(&m, mode))
        .collect::<Result<Vec<_>, _>>()?;
    let vanilla = results.iter().find(|r| r.mode == Mode::Vanilla);
    let mut out = Output::open(m.out.as_deref())?;
    for r in &results {
        out.line(&json!({
            "mode": r.mode,
            "budget": r.budget,
            "tokens": r.tokens.len(),
            "tps": r.tps,
            "phi": vanilla.map(|v| r.tps / v.tps),
            "ttft_ms": to_ms(r.ttft),
            "relative_ttft": vanilla.map(|v| to_ms(r.ttft) / to_ms(v.ttft)),
            "total_ms": to_ms(r.total_time),
        }))?;
    }
    out.finish()
}

/// Stand-in pair for timing when no models are given; only their shape
/// matters to the measurement.
fn toy_pair() -> (ModelSpec, ModelSpec) {
    let m = ModelSpec::context_free(Distribution::uniform(8)).expect("uniform model");
    (m.clone(), m)
}

fn cmd_calibrate(args: &CalibrateArgs) -> Result<(), CliError> {
    let file = FileConfig::load(args.run.config.as_deref())?;
    let trials = match args.trials {
        Some(t) => t,
        None => file.number("trials")?.unwrap_or(crate::engine::CALIBRATION_TRIALS),
    };
    let probe_len = match args.probe_len {
        Some(p) => Some(p),
        None => file.number("probe_len")?,
    };
    let has_models = args.run.target.is_some() || file.string("target").is_some();
    let (m, (target, draft)) = if has_models {
        let m = manifest(&args.run, |_| true)?;
        let pair = (m.target.clone(), m.draft.clone().expect("draft required"));
        (Some(m), pair)
    } else {
        (None, toy_pair())
    };
    let profile = match &m {
        Some(m) => m.profile.clone(),
        None => load_profile(&args.run, &file)?,
    };
    let clock: &dyn Clock = match &profile {
        Some(p) => p,
        None => &WallClock,
    };
    let cal = match probe_len {
        Some(p) => {
            let c = calibrate(&target, &draft, clock, p, trials)?;
            Calibration {
                cost_coefficient: c,
                gamma: choose_budget(c).min(DEFAULT_BUDGET_CAP),
                probe_len: p,
            }
        }
        None => calibrated_budget(&target, &draft, clock, trials, DEFAULT_BUDGET_CAP)?,
    };
    let out_path = args.run.out.clone().or_else(|| file.path("out"));
    let mut out = Output::open(out_path.as_deref())?;
    out.line(&json!({
        "cost_coefficient": cal.cost_coefficient,
        "gamma": cal.gamma,
        "probe_len": cal.probe_len,
        "trials": trials,
        "clock": if profile.is_some() { "simulated" } else { "wall" },
    }))?;
    out.finish()
}

fn cmd_fidelity(args: &FidelityArgs) -> Result<(), CliError> {
    let file = FileConfig::load(args.run.config.as_deref())?;
    let samples = match args.samples {
        Some(s) => s,
        None => file.number("samples")?.unwrap_or(200_000),
    };
    if samples < MIN_SAMPLES {
        return Err(usage(format!("fidelity needs at least {MIN_SAMPLES} samples, got {samples}")));
    }
    let positions = match args.positions {
        Some(p) => p,
        None => file.number("positions")?.unwrap_or(4),
    };
    if positions == 0 {
        return Err(usage("positions must be at least 1"));
    }
    let modes = match args.modes.clone().or_else(|| file.string("modes")) {
        Some(text) => parse_modes(&text)?,
        None => {
            let explicit = args.run.mode.clone().or_else(|| file.string("mode"));
            match explicit {
                Some(m) => vec![m.parse::<Mode>().map_err(usage)?],
                None => vec![Mode::Vanilla, Mode::Sps, Mode::Duo],
            }
        }
    };
    let any_draft = modes.iter().any(|m| m.needs_draft());
    let m = manifest(&args.run, |_| any_draft)?;
    let mut out = Output::open(m.out.as_deref())?;
    let mut all_pass = true;
    for (i, &mode) in modes.iter().enumerate() {
        let config = EngineConfig { mode, ..m.config.clone() };
        let seed = crate::rng::derive_seed(m.config.verify_seed ^ m.config.draft_seed.rotate_left(32), i as u64);
        let report = fidelity_report(&m.target, m.draft.as_ref(), &m.prompt, &config, positions, samples, seed)?;
        all_pass &= report.pass;
        out.line(&report)?;
    }
    out.finish()?;
    if all_pass {
        Ok(())
    } else {
        Err(CliError::Fidelity)
    }
}

/// Parses `args` and runs the command. Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Fidelity(a) => cmd_fidelity(a),
        Command::Profile(a) => cmd_profile(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("duodec: {e}");
            e.exit_code()
        }
    }
}
