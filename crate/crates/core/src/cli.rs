//! Command-line front end. Every subcommand reads one JSON run config, runs
//! the matching workflow and writes `<name>.csv` and/or `<name>.json` into the
//! output directory, plus `<name>.meta.json` carrying timestamps.
//!
//! Exit codes: 0 success, 1 a check failed, 2 config or parse error,
//! 3 runtime evaluation or I/O error.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::coeffexpr::{build_coefficient_set, field_from_source, ExprError, NetworkConfig, Var};
use crate::error::SpiderError;
use crate::feynman_kac::{fk_estimate, fk_vs_pde, FkProblem, Query};
use crate::localtime::{downcrossing_estimate, occupation_estimate};
use crate::network::{CoefficientSet, EdgeIndex, Field, SamplingPlan, ValidationReport};
use crate::pde::{residual, solve, Direction, PdeData, PdeGrid, PdeProblem};
use crate::simulator::{map_paths, simulate_path, with_workers, SimConfig, SpiderState};
use crate::stats::{half_normal_cdf, Moments};
use crate::testfn::TestFunction;
use crate::verify::{
    atom_test, config_hash, ito_convergence, ito_residual, martingale_residual, mean_exit_stats,
    scattering_distribution, strong_markov_test, Check, EstimatorReport, Observable, StoppingSpec,
};

// ------------------------------------------------------------------ config

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub sim: SimConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<StartConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub localtime: Option<LocalTimeBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scatter: Option<ScatterBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exitstats: Option<ExitBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub atom: Option<AtomBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub martingale: Option<MartingaleBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ito: Option<ItoBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub markov: Option<MarkovBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pde: Option<PdeBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fk: Option<FkBlock>,
    /// Output directory; `--out` takes precedence. Not part of the config hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

/// Initial state; `x = 0` means the vertex and ignores `edge`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartConfig {
    #[serde(default)]
    pub t: f64,
    #[serde(default)]
    pub x: f64,
    #[serde(default = "first_edge")]
    pub edge: usize,
    #[serde(default)]
    pub l: f64,
}

fn first_edge() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalTimeBlock {
    pub eps: Vec<f64>,
    pub times: Vec<f64>,
    /// Edges (1-based) for the occupation estimate; all edges when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScatterBlock {
    #[serde(default)]
    pub t: f64,
    #[serde(default)]
    pub ell: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExitBlock {
    #[serde(default)]
    pub t: f64,
    #[serde(default)]
    pub ell: f64,
    pub deltas: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AtomOracle {
    /// `P(|B_t| <= delta)` for a driftless unit-variance radius.
    HalfNormal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomBlock {
    pub deltas: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<AtomOracle>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MartingaleBlock {
    pub window: [f64; 2],
    pub bias_c: f64,
    pub functions: Vec<TestFunction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ItoBlock {
    pub function: TestFunction,
    pub steps: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkovBlock {
    pub stopping: StoppingSpec,
    pub functionals: Vec<Observable>,
    pub lag: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryConfig {
    pub t: f64,
    pub x: f64,
    #[serde(default = "first_edge")]
    pub edge: usize,
    #[serde(default)]
    pub l: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdeBlock {
    pub direction: Direction,
    pub grid: PdeGrid,
    pub running: Vec<String>,
    pub vertex: String,
    pub terminal: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ceiling: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub killing: Option<Vec<String>>,
    pub queries: Vec<QueryConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FkBlock {
    pub running: Vec<String>,
    pub vertex: String,
    pub terminal: Vec<String>,
    pub h_bound: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ceiling: Option<Vec<String>>,
    pub queries: Vec<QueryConfig>,
    /// Coarse grid for `fk-compare`; the comparison also solves its refinement.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<PdeGrid>,
}

// ------------------------------------------------------------------ errors

#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

impl From<SpiderError> for CliError {
    fn from(e: SpiderError) -> Self {
        match e {
            SpiderError::Config(_) | SpiderError::Network(_) | SpiderError::LevelTooSmall { .. } => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<ExprError> for CliError {
    fn from(e: ExprError) -> Self {
        match e {
            ExprError::Network(inner) => inner.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn bad(key: &str, msg: impl Display) -> CliError {
    CliError::Config(format!("{key}: {msg}"))
}

fn positive(key: &str, v: f64) -> CliResult<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(bad(key, format!("must be positive and finite, got {v}")))
    }
}

fn nonneg(key: &str, v: f64) -> CliResult<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(bad(key, format!("must be nonnegative and finite, got {v}")))
    }
}

fn nonempty<T>(key: &str, v: &[T]) -> CliResult<()> {
    if v.is_empty() {
        Err(bad(key, "must not be empty"))
    } else {
        Ok(())
    }
}

fn edge_in_range(key: &str, edge: usize, edges: usize) -> CliResult<()> {
    if edge == 0 || edge > edges {
        Err(bad(key, format!("edge {edge} outside 1..={edges}")))
    } else {
        Ok(())
    }
}

/// Byte offset of a 1-based line/column position.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (start + column.saturating_sub(1)).min(text.len())
}

impl RunConfig {
    /// Reads and range-checks a config; diagnostics cite the file, the key
    /// and the byte offset of the failure.
    pub fn load(path: &Path) -> CliResult<Self> {
        let name = path.display();
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{name}: {e}")))?;
        let mut de = serde_json::Deserializer::from_str(&text);
        let cfg: RunConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
            let inner = e.inner();
            let offset = byte_offset(&text, inner.line(), inner.column());
            CliError::Config(format!("{name}: key '{}' at byte {offset}: {inner}", e.path()))
        })?;
        cfg.check().map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{name}: {m}")),
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    /// Range checks that do not need the parsed coefficients.
    pub fn check(&self) -> CliResult<()> {
        let edges = self.network.edges;
        if edges < 2 {
            return Err(bad("network.edges", format!("need at least 2 edges, got {edges}")));
        }
        let b = &self.network.bounds;
        positive("network.bounds.a_lower", b.a_lower)?;
        positive("network.bounds.sigma_lower", b.sigma_lower)?;
        positive("network.bounds.sigma_bound", b.sigma_bound)?;
        nonneg("network.bounds.b_bound", b.b_bound)?;
        nonneg("network.bounds.alpha_lip", b.alpha_lip)?;
        let s = &self.sim;
        positive("sim.h", s.h)?;
        positive("sim.horizon", s.horizon)?;
        positive("sim.delta_shell", s.delta_shell)?;
        if s.h >= s.horizon {
            return Err(bad("sim.h", format!("step {} must be below the horizon {}", s.h, s.horizon)));
        }
        if s.n_paths == 0 {
            return Err(bad("sim.n_paths", "must be at least 1"));
        }
        if let Some(st) = &self.start {
            nonneg("start.t", st.t)?;
            nonneg("start.x", st.x)?;
            nonneg("start.l", st.l)?;
            edge_in_range("start.edge", st.edge, edges)?;
            if st.t >= s.horizon {
                return Err(bad("start.t", "must be before sim.horizon"));
            }
        }
        if let Some(lt) = &self.localtime {
            nonempty("localtime.eps", &lt.eps)?;
            nonempty("localtime.times", &lt.times)?;
            lt.eps.iter().try_for_each(|&e| positive("localtime.eps", e))?;
            lt.times.iter().try_for_each(|&t| nonneg("localtime.times", t))?;
            if let Some(sub) = &lt.subset {
                nonempty("localtime.subset", sub)?;
                sub.iter().try_for_each(|&e| edge_in_range("localtime.subset", e, edges))?;
            }
        }
        if let Some(sc) = &self.scatter {
            nonneg("scatter.t", sc.t)?;
            nonneg("scatter.ell", sc.ell)?;
            positive("scatter.delta", sc.delta)?;
        }
        if let Some(ex) = &self.exitstats {
            nonneg("exitstats.t", ex.t)?;
            nonneg("exitstats.ell", ex.ell)?;
            nonempty("exitstats.deltas", &ex.deltas)?;
            ex.deltas.iter().try_for_each(|&d| positive("exitstats.deltas", d))?;
        }
        if let Some(at) = &self.atom {
            nonempty("atom.deltas", &at.deltas)?;
            at.deltas.iter().try_for_each(|&d| positive("atom.deltas", d))?;
        }
        if let Some(m) = &self.martingale {
            nonneg("martingale.window[0]", m.window[0])?;
            positive("martingale.window[1]", m.window[1])?;
            nonneg("martingale.bias_c", m.bias_c)?;
            nonempty("martingale.functions", &m.functions)?;
            for (k, f) in m.functions.iter().enumerate() {
                if f.edges() != edges {
                    return Err(bad(&format!("martingale.functions[{k}]"), format!("has {} edges, network has {edges}", f.edges())));
                }
            }
        }
        if let Some(it) = &self.ito {
            nonempty("ito.steps", &it.steps)?;
            it.steps.iter().try_for_each(|&h| positive("ito.steps", h))?;
            if it.function.edges() != edges {
                return Err(bad("ito.function", format!("has {} edges, network has {edges}", it.function.edges())));
            }
        }
        if let Some(mk) = &self.markov {
            positive("markov.lag", mk.lag)?;
            nonempty("markov.functionals", &mk.functionals)?;
        }
        if let Some(p) = &self.pde {
            nonempty("pde.queries", &p.queries)?;
            check_queries("pde.queries", &p.queries, edges)?;
        }
        if let Some(fk) = &self.fk {
            positive("fk.h_bound", fk.h_bound)?;
            nonempty("fk.queries", &fk.queries)?;
            check_queries("fk.queries", &fk.queries, edges)?;
        }
        Ok(())
    }

    /// Hash of everything that determines the results.
    pub fn hash(&self) -> String {
        config_hash(&RunConfig { output: None, ..self.clone() })
    }

    pub fn start_state(&self) -> CliResult<SpiderState> {
        let st = self.start.unwrap_or(StartConfig { t: 0.0, x: 0.0, edge: 1, l: 0.0 });
        if st.x == 0.0 {
            Ok(SpiderState::vertex(st.t, st.l))
        } else {
            Ok(SpiderState::new(st.t, st.x, EdgeIndex::new(st.edge, self.network.edges)?, st.l))
        }
    }
}

fn check_queries(key: &str, qs: &[QueryConfig], edges: usize) -> CliResult<()> {
    for (k, q) in qs.iter().enumerate() {
        let key = format!("{key}[{k}]");
        nonneg(&format!("{key}.t"), q.t)?;
        nonneg(&format!("{key}.x"), q.x)?;
        nonneg(&format!("{key}.l"), q.l)?;
        edge_in_range(&format!("{key}.edge"), q.edge, edges)?;
    }
    Ok(())
}

fn to_query(q: &QueryConfig, edges: usize) -> CliResult<Query> {
    Ok(Query { t: q.t, x: q.x, edge: EdgeIndex::new(q.edge, edges)?, l: q.l })
}

const ALL_VARS: [Var; 3] = [Var::T, Var::X, Var::L];

fn fields(key: &str, srcs: &[String], edges: usize) -> CliResult<Vec<Field>> {
    if srcs.len() != edges {
        return Err(bad(key, format!("has {} entries for {edges} edges", srcs.len())));
    }
    srcs.iter()
        .enumerate()
        .map(|(k, s)| field_from_source(s, &format!("{key}[{k}]"), &ALL_VARS).map_err(CliError::from))
        .collect()
}

fn vertex_field(key: &str, src: &str) -> CliResult<Field> {
    Ok(field_from_source(src, key, &[Var::T, Var::L])?)
}

fn pde_data(b: &PdeBlock, edges: usize) -> CliResult<PdeData> {
    Ok(PdeData {
        running: fields("pde.running", &b.running, edges)?,
        vertex: vertex_field("pde.vertex", &b.vertex)?,
        terminal: fields("pde.terminal", &b.terminal, edges)?,
        ceiling: b.ceiling.as_deref().map(|c| fields("pde.ceiling", c, edges)).transpose()?,
        killing: b.killing.as_deref().map(|c| fields("pde.killing", c, edges)).transpose()?,
    })
}

fn fk_problem(b: &FkBlock, edges: usize) -> CliResult<FkProblem> {
    let mut prob = FkProblem::new(
        fields("fk.running", &b.running, edges)?,
        vertex_field("fk.vertex", &b.vertex)?,
        fields("fk.terminal", &b.terminal, edges)?,
        b.h_bound,
    )?;
    prob.ceiling = b.ceiling.as_deref().map(|c| fields("fk.ceiling", c, edges)).transpose()?;
    Ok(prob)
}

// ------------------------------------------------------------------ output

/// Output sink for one run: every file carries the config hash.
pub struct Output {
    dir: PathBuf,
    hash: String,
}

impl Output {
    pub fn new(dir: PathBuf, hash: String) -> CliResult<Self> {
        fs::create_dir_all(&dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
        Ok(Output { dir, hash })
    }

    fn write(&self, file: &str, contents: &str) -> CliResult<()> {
        let path = self.dir.join(file);
        fs::write(&path, contents).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
    }

    /// CSV with a header row; a trailing `config_hash` column is appended.
    pub fn csv(&self, name: &str, header: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
        let mut s = header.join(",");
        s.push_str(",config_hash\n");
        for row in rows {
            s.push_str(&row.join(","));
            s.push(',');
            s.push_str(&self.hash);
            s.push('\n');
        }
        self.write(&format!("{name}.csv"), &s)
    }

    /// JSON object tagged with a schema name and the config hash.
    pub fn json(&self, name: &str, body: Value) -> CliResult<()> {
        let mut obj = match body {
            Value::Object(m) => m,
            other => {
                let mut m = serde_json::Map::new();
                m.insert("value".into(), other);
                m
            }
        };
        obj.insert("schema".into(), json!(format!("spider.{name}.v1")));
        obj.insert("config_hash".into(), json!(self.hash));
        let mut s = serde_json::to_string_pretty(&Value::Object(obj)).expect("json values serialize");
        s.push('\n');
        self.write(&format!("{name}.json"), &s)
    }

    pub fn report(&self, name: &str, report: &EstimatorReport) -> CliResult<()> {
        self.json(name, serde_json::to_value(report).expect("reports serialize"))
    }

    fn metadata(&self, name: &str, started: SystemTime, elapsed: f64, workers: Option<usize>) -> CliResult<()> {
        let unix = |t: SystemTime| t.duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        let meta = json!({
            "subcommand": name,
            "config_hash": self.hash,
            "started_unix": unix(started),
            "elapsed_seconds": elapsed,
            "workers": workers,
            "version": env!("CARGO_PKG_VERSION"),
        });
        self.write(&format!("{name}.meta.json"), &format!("{}\n", serde_json::to_string_pretty(&meta).expect("json")))
    }
}

fn num(v: f64) -> String {
    format!("{v}")
}

/// Copies the estimates and checks of `part` into `into` under `prefix`.
fn absorb(into: &mut EstimatorReport, prefix: &str, part: EstimatorReport) {
    for (k, v) in part.estimates {
        into.estimates.insert(format!("{prefix}{k}"), v);
    }
    for (k, v) in part.stderr {
        into.stderr.insert(format!("{prefix}{k}"), v);
    }
    for mut c in part.checks {
        c.label = format!("{prefix}{}", c.label);
        into.check(c);
    }
}

// ------------------------------------------------------------------ commands

#[derive(Debug, Parser)]
#[command(name = "spider", version, about = "Walsh spider diffusions: simulation, local time, PDE and Feynman-Kac checks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON run config.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `sim.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Output directory (default: config `output`, else `out`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Simulate paths and write terminal states.
    Simulate(CommonArgs),
    /// Downcrossing and occupation local-time estimates.
    Localtime(CommonArgs),
    /// Exit-edge law at the vertex.
    Scatter(CommonArgs),
    /// Exit time and local time at small levels.
    Exitstats(CommonArgs),
    /// Mass near the vertex at a fixed time.
    Atom(CommonArgs),
    /// Martingale residuals for a battery of test functions.
    Martingale(CommonArgs),
    /// Ito residuals on matched skeletons.
    Ito(CommonArgs),
    /// Strong Markov property via restarts and KS tests.
    Markov(CommonArgs),
    /// Finite-difference solve.
    Pde(CommonArgs),
    /// Monte Carlo Feynman-Kac estimates.
    Fk(CommonArgs),
    /// Monte Carlo against the PDE solution.
    #[command(name = "fk-compare")]
    FkCompare(CommonArgs),
    /// Validate the coefficients and every config block.
    Validate(CommonArgs),
}

impl Command {
    fn parts(&self) -> (&'static str, &CommonArgs) {
        match self {
            Command::Simulate(a) => ("simulate", a),
            Command::Localtime(a) => ("localtime", a),
            Command::Scatter(a) => ("scatter", a),
            Command::Exitstats(a) => ("exitstats", a),
            Command::Atom(a) => ("atom", a),
            Command::Martingale(a) => ("martingale", a),
            Command::Ito(a) => ("ito", a),
            Command::Markov(a) => ("markov", a),
            Command::Pde(a) => ("pde", a),
            Command::Fk(a) => ("fk", a),
            Command::FkCompare(a) => ("fk-compare", a),
            Command::Validate(a) => ("validate", a),
        }
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code. Diagnostics go to stderr as a single line.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("spider: {}", e.to_string().replace('\n', " "));
            e.exit_code()
        }
    }
}

/// Runs a subcommand; `Ok(pass)` reports whether every check passed.
pub fn execute(command: &Command) -> CliResult<bool> {
    let (name, args) = command.parts();
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.sim.seed = seed;
    }
    let dir = args.out.clone().or_else(|| cfg.output.clone()).unwrap_or_else(|| PathBuf::from("out"));
    let out = Output::new(dir, cfg.hash())?;
    let started = SystemTime::now();
    let clock = Instant::now();
    let file = args.config.display().to_string();
    let pass = with_workers(args.workers, || dispatch(name, &cfg, &out))?.map_err(|e| match e {
        CliError::Config(m) => CliError::Config(format!("{file}: {m}")),
        other => other,
    })?;
    out.metadata(name, started, clock.elapsed().as_secs_f64(), args.workers)?;
    Ok(pass)
}

fn dispatch(name: &str, cfg: &RunConfig, out: &Output) -> CliResult<bool> {
    if name == "validate" {
        return validate(cfg, out);
    }
    let built = build_coefficient_set(&cfg.network, cfg.sim.horizon)?;
    let c = &built.coefficients;
    cfg.sim.validate(c)?;
    match name {
        "simulate" => simulate(cfg, c, out),
        "localtime" => localtime(cfg, c, out),
        "scatter" => scatter(cfg, c, out),
        "exitstats" => exitstats(cfg, c, out),
        "atom" => atom(cfg, c, out),
        "martingale" => martingale(cfg, c, out),
        "ito" => ito(cfg, c, out),
        "markov" => markov(cfg, c, out),
        "pde" => pde(cfg, c, out),
        "fk" => fk(cfg, c, out),
        "fk-compare" => fk_compare(cfg, c, out),
        other => Err(CliError::Config(format!("unknown subcommand {other}"))),
    }
}

fn block<'a, T>(b: &'a Option<T>, key: &str) -> CliResult<&'a T> {
    b.as_ref().ok_or_else(|| bad(key, "block is required by this subcommand"))
}

#[derive(Serialize)]
struct ValidateReport<'a> {
    name: &'static str,
    pass: bool,
    seed: u64,
    coefficients: &'a ValidationReport,
    blocks: Vec<&'static str>,
}

fn validate(cfg: &RunConfig, out: &Output) -> CliResult<bool> {
    let built = build_coefficient_set(&cfg.network, cfg.sim.horizon)?;
    cfg.sim.validate(&built.coefficients)?;
    cfg.start_state()?;
    let edges = cfg.network.edges;
    let mut blocks = Vec::new();
    if let Some(p) = &cfg.pde {
        PdeProblem::new(built.coefficients.clone(), pde_data(p, edges)?, p.direction)?;
        blocks.push("pde");
    }
    if let Some(f) = &cfg.fk {
        let prob = fk_problem(f, edges)?;
        prob.check(&SamplingPlan::default_for(cfg.sim.horizon), cfg.sim.horizon)?;
        blocks.push("fk");
    }
    for (present, key) in [
        (cfg.localtime.is_some(), "localtime"),
        (cfg.scatter.is_some(), "scatter"),
        (cfg.exitstats.is_some(), "exitstats"),
        (cfg.atom.is_some(), "atom"),
        (cfg.martingale.is_some(), "martingale"),
        (cfg.ito.is_some(), "ito"),
        (cfg.markov.is_some(), "markov"),
    ] {
        if present {
            blocks.push(key);
        }
    }
    let pass = built.report.passed();
    let report = ValidateReport { name: "validate", pass, seed: cfg.sim.seed, coefficients: &built.report, blocks };
    out.json("validate", serde_json::to_value(&report).expect("json"))?;
    Ok(pass)
}

fn simulate(cfg: &RunConfig, c: &CoefficientSet, out: &Output) -> CliResult<bool> {
    let init = cfg.start_state()?;
    let store = cfg.sim.store_paths;
    let per_path = map_paths(c, &init, &cfg.sim, |p| {
        let s = p.last();
        let contacts = p.contact.iter().filter(|&&b| b).count();
        let trace = store.then(|| {
            (0..p.len())
                .map(|k| vec![num(p.time(k)), p.edge[k].to_string(), num(p.x[k]), num(p.l[k]), u8::from(p.contact[k]).to_string()])
                .collect::<Vec<_>>()
        });
        Ok((s, contacts, trace))
    })?;
    let mut rows = Vec::with_capacity(per_path.len());
    let mut traces = Vec::new();
    let (mut xm, mut lm, mut cm) = (Moments::default(), Moments::default(), Moments::default());
    for (k, (s, contacts, trace)) in per_path.into_iter().enumerate() {
        xm.push(s.x);
        lm.push(s.l);
        cm.push(contacts as f64);
        rows.push(vec![k.to_string(), s.edge.to_string(), num(s.x), num(s.l), contacts.to_string()]);
        for mut r in trace.into_iter().flatten() {
            r.insert(0, k.to_string());
            traces.push(r);
        }
    }
    out.csv("simulate", &["path", "edge", "x", "l", "contacts"], &rows)?;
    if store {
        out.csv("paths", &["path", "t", "edge", "x", "l", "contact"], &traces)?;
    }
    let mut rep = EstimatorReport::new("simulate", json!({ "start": init }), cfg.sim.n_paths, &cfg.sim);
    rep.estimate("terminal_x", xm.mean, Some(xm.std_err()));
    rep.estimate("terminal_l", lm.mean, Some(lm.std_err()));
    rep.estimate("contacts", cm.mean, Some(cm.std_err()));
    out.report("simulate", &rep)?;
    Ok(true)
}

fn localtime(cfg: &RunConfig, c: &CoefficientSet, out: &Output) -> CliResult<bool> {
    let b = block(&cfg.localtime, "localtime")?;
    let init = cfg.start_state()?;
    let subset: Vec<EdgeIndex> = match &b.subset {
        Some(s) => s.iter().map(|&e| EdgeIndex::new(e, c.edges())).collect::<Result<_, _>>()?,
        None => c.edge_indices().collect(),
    };
    let per_path = map_paths(c, &init, &cfg.sim, |p| {
        b.eps
            .iter()
            .map(|&eps| Ok((downcrossing_estimate(p, eps, &b.times)?, occupation_estimate(p, c, eps, &b.times, &subset)?)))
            .collect::<crate::Result<Vec<_>>>()
    })?;
    let mut rows = Vec::new();
    let mut rep = EstimatorReport::new("localtime", json!({ "eps": b.eps, "times": b.times, "subset": subset }), per_path.len(), &cfg.sim);
    for (j, &eps) in b.eps.iter().enumerate() {
        for (q, &t) in b.times.iter().enumerate() {
            for method in ["downcrossing", "occupation"] {
                let vals: Vec<f64> = per_path
                    .iter()
                    .map(|r| if method == "downcrossing" { r[j].0.values[q].1 } else { r[j].1.values[q].1 })
                    .collect();
                let m = Moments::from_slice(&vals);
                rows.push(vec![method.to_string(), num(eps), num(t), num(m.mean), num(m.std_err())]);
                rep.estimate(format!("{method}[eps={eps},t={t}]"), m.mean, Some(m.std_err()));
            }
        }
    }
    out.csv("localtime", &["method", "eps", "t", "mean", "stderr"], &rows)?;
    out.report("localtime", &rep)?;
    Ok(true)
}

fn scatter(cfg: &RunConfig, c: &CoefficientSet, out: &Output) -> CliResult<bool> {
    let b = block(&cfg.scatter, "scatter")?;
    let sc = scattering_distribution(c, b.t, b.ell, b.delta, &cfg.sim)?;
    let rows: Vec<Vec<String>> = sc
        .rows
        .iter()
        .map(|r| vec![r.edge.to_string(), num(r.freq), num(r.stderr), num(r.alpha_target), r.pass.to_string()])
        .collect();
    out.csv("scatter", &["edge", "freq", "stderr", "alpha_target", "pass"], &rows)?;
    out.report("scatter", &sc.report)?;
    Ok(sc.report.pass)
}

fn exitstats(cfg: &RunConfig, c: &CoefficientSet, out: &Output) -> CliResult<bool> {
    let b = block(&cfg.exitstats, "exitstats")?;
    let ex = mean_exit_stats(c, b.t, b.ell, &b.deltas, &cfg.sim)?;
    let rows: Vec<Vec<String>> = ex
        .rows
        .iter()
        .map(|r| {
            vec![num(r.delta), num(r.local_time_ratio), num(r.local_time_se), num(r.time_ratio), num(r.time_se), r.censored.to_string()]
        })
        .collect();
    out.csv("exitstats", &["delta", "l_ratio", "l_ratio_stderr", "theta_ratio", "theta_ratio_stderr", "censored"], &rows)?;
    out.report("exitstats", &ex.report)?;
    Ok(ex.report.pass)
}

fn atom(cfg: &RunConfig, c: &CoefficientSet, out: &Output) -> CliResult<bool> {
    let b = block(&cfg.atom, "atom")?;
    let init = cfg.start_state()?;
    let t = cfg.sim.horizon - init.t;
    let radii = map_paths(c, &init, &cfg.sim, |p| Ok(p.last().x))?;
    let oracle = |d: f64| half_normal_cdf(d, t);
    let oracle_ref: Option<&dyn Fn(f64) -> f64> = b.oracle.map(|_| &oracle as &dyn Fn(f64) -> f64);
    let at = atom_test(&radii, t, &b.deltas, oracle_ref, &cfg.sim)?;
    let rows: Vec<Vec<String>> = at
        .rows
        .iter()
        .map(|r| vec![num(r.delta), num(r.prob), num(r.stderr), r.oracle.map(num).unwrap_or_default()])
        .collect();
    out.csv("atom", &["delta", "prob", "stderr", "oracle"], &rows)?;
    out.report("atom", &at.report)?;
    Ok(at.report.pass)
}

fn martingale(cfg: &RunConfig, c: &CoefficientSet, out: &Output) -> CliResult<bool> {
    let b = block(&cfg.martingale, "martingale")?;
    let init = cfg.start_state()?;
    let window = (b.window[0], b.window[1]);
    let mut rep = EstimatorReport::new("martingale", json!({ "window": b.window, "bias_c": b.bias_c }), cfg.sim.n_paths, &cfg.sim);
    let mut rows = Vec::new();
    for (k, f) in b.functions.iter().enumerate() {
        let part = martingale_residual(c, &init, &cfg.sim, f, window, b.bias_c)?;
        let mean = part.estimates["mean"];
        let se = part.stderr["mean"];
        rows.push(vec![k.to_string(), num(mean), num(se), num(b.bias_c * cfg.sim.h.sqrt()), part.pass.to_string()]);
        absorb(&mut rep, &format!("f{k}."), part);
    }
    out.csv("martingale", &["function", "mean", "stderr", "bias_budget", "pass"], &rows)?;
    out.report("martingale", &rep)?;
    Ok(rep.pass)
}

fn ito(cfg: &RunConfig, c: &CoefficientSet, out: &Output) -> CliResult<bool> {
    let b = block(&cfg.ito, "ito")?;
    let init = cfg.start_state()?;
    let mut steps = b.steps.clone();
    steps.sort_by(|a, b| b.total_cmp(a));
    let rows = ito_convergence(c, &init, &cfg.sim, &b.function, &steps)?;
    let mut rep = EstimatorReport::new("ito", json!({ "steps": steps, "function": b.function }), cfg.sim.n_paths, &cfg.sim);
    for r in &rows {
        rep.estimate(format!("max_residual[h={}]", r.h), r.mean, Some(r.stderr));
    }
    for w in rows.windows(2) {
        rep.check(Check::new(format!("residual[h={}] < residual[h={}]", w[1].h, w[0].h), w[1].mean - w[0].mean, None, Some(0.0)));
    }
    let path = simulate_path(c, &init, &SimConfig { h: steps[steps.len() - 1], ..cfg.sim }, 0)?;
    let edges = c.edges();
    let constant = ito_residual(&path, c, &TestFunction::constant(edges, 1.0))?;
    let identity = ito_residual(&path, c, &TestFunction::identity(edges))?;
    rep.check(Check::new("constant residual", constant, None, Some(0.0)));
    rep.check(Check::new("identity residual (roundoff)", identity, None, Some(1e-12)));
    let table: Vec<Vec<String>> =
        rows.iter().map(|r| vec![num(r.h), num(r.mean), num(r.stderr), num(r.worst)]).collect();
    out.csv("ito", &["h", "mean_max_residual", "stderr", "worst"], &table)?;
    out.report("ito", &rep)?;
    Ok(rep.pass)
}

fn markov(cfg: &RunConfig, c: &CoefficientSet, out: &Output) -> CliResult<bool> {
    let b = block(&cfg.markov, "markov")?;
    let init = cfg.start_state()?;
    let mut rep = EstimatorReport::new("markov", json!({ "stopping": b.stopping, "lag": b.lag }), cfg.sim.n_paths, &cfg.sim);
    let mut rows = Vec::new();
    for &f in &b.functionals {
        let mt = strong_markov_test(c, &init, b.stopping, f, b.lag, &cfg.sim)?;
        let label = serde_json::to_value(f).expect("json").as_str().unwrap_or_default().to_string();
        rows.push(vec![
            label.clone(),
            num(mt.ks.statistic),
            num(mt.ks.p_value),
            mt.ks.n1.to_string(),
            mt.censored.to_string(),
            mt.report.pass.to_string(),
        ]);
        absorb(&mut rep, &format!("{label}."), mt.report);
    }
    out.csv("markov", &["functional", "ks_statistic", "p_value", "n", "censored", "pass"], &rows)?;
    out.report("markov", &rep)?;
    Ok(rep.pass)
}

fn pde(cfg: &RunConfig, c: &CoefficientSet, out: &Output) -> CliResult<bool> {
    let b = block(&cfg.pde, "pde")?;
    let prob = PdeProblem::new(c.clone(), pde_data(b, c.edges())?, b.direction)?;
    let sol = solve(&prob, &b.grid)?;
    let res = residual(&sol, &prob)?;
    let mut rows = Vec::new();
    for q in &b.queries {
        let q = to_query(q, c.edges())?;
        rows.push(vec![num(q.t), num(q.x), q.edge.to_string(), num(q.l), num(sol.value_at(q.t, q.x, q.edge, q.l))]);
    }
    out.csv("pde", &["t", "x", "edge", "l", "value"], &rows)?;
    out.json(
        "pde",
        json!({
            "name": "pde",
            "params": { "grid": b.grid, "direction": b.direction },
            "residual": res,
            "warnings": sol.warnings,
            "pass": true,
            "seed": cfg.sim.seed,
        }),
    )?;
    Ok(true)
}

fn fk(cfg: &RunConfig, c: &CoefficientSet, out: &Output) -> CliResult<bool> {
    let b = block(&cfg.fk, "fk")?;
    let prob = fk_problem(b, c.edges())?;
    let data = prob.check(&SamplingPlan::default_for(cfg.sim.horizon), cfg.sim.horizon)?;
    let mut rep = EstimatorReport::new("fk", json!({ "h_bound": b.h_bound, "data_check": data }), cfg.sim.n_paths, &cfg.sim);
    rep.check(Check::new("payoff continuity at the vertex", data.payoff_continuity, None, Some(1e-9)));
    rep.check(Check::new("cost regularity <= h_bound", data.cost_regularity, None, Some(b.h_bound)));
    let mut rows = Vec::new();
    for (k, q) in b.queries.iter().enumerate() {
        let est = fk_estimate(&prob, c, &to_query(q, c.edges())?, &cfg.sim)?;
        rows.push(vec![num(q.t), num(q.x), q.edge.to_string(), num(q.l), num(est.mean), num(est.stderr), est.n_paths.to_string()]);
        rep.estimate(format!("q{k}"), est.mean, Some(est.stderr));
    }
    out.csv("fk", &["t", "x", "edge", "l", "mean", "stderr", "n_paths"], &rows)?;
    out.report("fk", &rep)?;
    Ok(rep.pass)
}

fn fk_compare(cfg: &RunConfig, c: &CoefficientSet, out: &Output) -> CliResult<bool> {
    let b = block(&cfg.fk, "fk")?;
    let grid = b.grid.ok_or_else(|| bad("fk.grid", "required by fk-compare"))?;
    let prob = fk_problem(b, c.edges())?;
    let queries = b.queries.iter().map(|q| to_query(q, c.edges())).collect::<CliResult<Vec<_>>>()?;
    let cmp = fk_vs_pde(&prob, c, &queries, &cfg.sim, &grid)?;
    let mut rep = EstimatorReport::new("fk-compare", json!({ "grid": grid, "warnings": cmp.pde_warnings }), cfg.sim.n_paths, &cfg.sim);
    let mut rows = Vec::new();
    for (k, r) in cmp.rows.iter().enumerate() {
        let q = r.query;
        rows.push(vec![
            num(q.t),
            num(q.x),
            q.edge.to_string(),
            num(q.l),
            num(r.mc_mean),
            num(r.mc_stderr),
            num(r.pde_value),
            num(r.pde_coarse),
            num(r.grid_budget),
            num(r.diff),
            num(r.tolerance),
            r.pass.to_string(),
        ]);
        rep.estimate(format!("q{k}.mc"), r.mc_mean, Some(r.mc_stderr));
        rep.estimate(format!("q{k}.pde"), r.pde_value, None);
        rep.check(Check::new(format!("q{k} |mc - pde| <= 3 se + grid budget"), r.diff, None, Some(r.tolerance)));
    }
    out.csv(
        "fk-compare",
        &["t", "x", "edge", "l", "mc_mean", "mc_stderr", "pde_value", "pde_coarse", "grid_budget", "diff", "tolerance", "pass"],
        &rows,
    )?;
    out.report("fk-compare", &rep)?;
    Ok(rep.pass)
}
