//! Command-line driver: rectify a single image, or run one of the solver
//! experiments and write its tables.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use toml::Value;

pub mod commands;
pub mod config;
pub mod output;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, configuration or input paths; nothing was computed.
    Usage(String),
    Io(String),
    Solver(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Io(_) => 2,
            CliError::Solver(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::Solver(m) => write!(f, "solver error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

#[derive(Debug, Parser)]
#[command(name = "tilt", version, about = "Low-rank texture rectification and solver experiments")]
struct Cli {
    /// TOML file overlaid on the built-in defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set outer.inner.rho0=1.5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Base RNG seed; falls back to `TILT_SEED`, then to the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Success threshold on the relative transform error.
    #[arg(long, global = true)]
    rel_err_tol: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Rectify one image window.
    Rectify(RectifyArgs),
    /// Inner solvers on random instances.
    BenchInner(BenchArgs),
    /// Rotation/shear grid on a synthetic checkerboard.
    Range(RangeArgs),
    /// Success rate against salt-and-pepper corruption on a corpus.
    Corruption(CorruptionArgs),
    /// End-to-end wall time of every method on a corpus.
    Speed(SpeedArgs),
    /// Write the procedural texture corpus to the output directory.
    GenCorpus,
    /// Write an undeformed checkerboard with a sidecar describing the
    /// deformation to apply.
    GenBoard(GenBoardArgs),
}

#[derive(Debug, Args)]
struct RectifyArgs {
    /// Grayscale or color PNG.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Window as `x0,y0,width,height` in pixels.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    window: Option<Vec<f64>>,
    /// JSON sidecar; defaults to the input path with a `.json` extension
    /// when that file exists.
    #[arg(long)]
    sidecar: Option<PathBuf>,
    #[arg(long)]
    solver: Option<String>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    #[arg(long)]
    trials: Option<usize>,
}

#[derive(Debug, Args)]
struct RangeArgs {
    /// Use the 6×6 sub-grid.
    #[arg(long)]
    reduced: bool,
    #[arg(long, value_delimiter = ',')]
    solvers: Option<Vec<String>>,
}

#[derive(Debug, Args)]
struct CorruptionArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    levels: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    solvers: Option<Vec<String>>,
}

#[derive(Debug, Args)]
struct SpeedArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    solvers: Option<Vec<String>>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Restrict to these corpus entries.
    #[arg(long, value_delimiter = ',')]
    cases: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct GenBoardArgs {
    #[arg(long, default_value_t = 10.0, allow_hyphen_values = true)]
    pub theta_deg: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub shear: f64,
    #[arg(long, default_value_t = 10)]
    pub cells: usize,
    #[arg(long, default_value_t = 8)]
    pub cell_px: usize,
    #[arg(long, default_value_t = 40)]
    pub window: usize,
}

/// Nested table holding `value` at the dotted `key`.
fn at(key: &str, value: impl Serialize) -> Result<Value, CliError> {
    let mut v = Value::try_from(value).map_err(|e| CliError::Usage(format!("{key}: {e}")))?;
    for part in key.rsplit('.') {
        let mut t = toml::Table::new();
        t.insert(part.to_string(), v);
        v = Value::Table(t);
    }
    Ok(v)
}

fn check_solver(name: &str) -> Result<(), CliError> {
    if tilt_core::outer::Method::parse(name).is_some() {
        return Ok(());
    }
    let valid: Vec<&str> = tilt_core::outer::Method::ALL.iter().map(|m| m.name()).collect();
    Err(CliError::Usage(format!("unknown solver `{name}`; expected one of {}", valid.join(", "))))
}

fn solver_names(key: &str, names: &[String]) -> Result<Value, CliError> {
    names.iter().try_for_each(|n| check_solver(n))?;
    at(key, names)
}

fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var("TILT_SEED") {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("TILT_SEED must be an unsigned integer, got `{s}`"))),
        Err(_) => Ok(None),
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let mut overrides = cli.set.iter().map(|s| config::dotted(s)).collect::<Result<Vec<_>, _>>()?;
    if let Some(out) = &cli.out {
        overrides.push(at("out", out)?);
    }
    if let Some(seed) = cli.seed {
        overrides.push(at("seed", seed)?);
    }
    if let Some(jobs) = cli.jobs {
        overrides.push(at("jobs", jobs)?);
    }
    if let Some(tol) = cli.rel_err_tol {
        overrides.push(at("rel_err_tol", tol)?);
    }
    match &cli.command {
        Command::Rectify(a) => {
            if let Some(p) = &a.input {
                overrides.push(at("rectify.input", p)?);
            }
            if let Some(w) = &a.window {
                if w.len() != 4 {
                    return Err(CliError::Usage(format!("--window needs x0,y0,width,height, got {} values", w.len())));
                }
                overrides.push(at("rectify.window", w)?);
            }
            if let Some(p) = &a.sidecar {
                overrides.push(at("rectify.sidecar", p)?);
            }
            if let Some(s) = &a.solver {
                check_solver(s)?;
                overrides.push(at("rectify.solver", s)?);
            }
        }
        Command::BenchInner(a) => {
            if let Some(s) = &a.sizes {
                overrides.push(at("bench.sizes", s)?);
            }
            if let Some(t) = a.trials {
                overrides.push(at("bench.trials", t)?);
            }
        }
        Command::Range(a) => {
            if a.reduced {
                overrides.push(at("range.grid", "reduced")?);
            }
            if let Some(s) = &a.solvers {
                overrides.push(solver_names("range.methods", s)?);
            }
        }
        Command::Corruption(a) => {
            if let Some(c) = &a.corpus {
                overrides.push(at("corruption.corpus", c)?);
            }
            if let Some(l) = &a.levels {
                overrides.push(at("corruption.levels", l)?);
            }
            if let Some(s) = &a.solvers {
                overrides.push(solver_names("corruption.methods", s)?);
            }
        }
        Command::Speed(a) => {
            if let Some(c) = &a.corpus {
                overrides.push(at("speed.corpus", c)?);
            }
            if let Some(s) = &a.solvers {
                overrides.push(solver_names("speed.methods", s)?);
            }
            if let Some(r) = a.repeats {
                overrides.push(at("speed.repeats", r)?);
            }
            if let Some(c) = &a.cases {
                overrides.push(at("speed.cases", c)?);
            }
        }
        Command::GenCorpus | Command::GenBoard(_) => {}
    }
    let cfg = config::resolve(cli.config.as_deref(), env_seed()?, &overrides)?;
    match cli.command {
        Command::Rectify(_) => commands::rectify(&cfg),
        Command::BenchInner(_) => commands::bench_inner(&cfg),
        Command::Range(_) => commands::range(&cfg),
        Command::Corruption(_) => commands::corruption(&cfg),
        Command::Speed(_) => commands::speed(&cfg),
        Command::GenCorpus => commands::gen_corpus(&cfg),
        Command::GenBoard(a) => commands::gen_board(&cfg, &a),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            e.print().ok();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("tilt: {e}");
            e.exit_code()
        }
    }
}
