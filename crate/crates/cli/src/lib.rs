//! Batch front end: loads a model document, applies option overrides, runs one
//! analysis and writes CSV/JSON artifacts into an output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use mjp_core::bayes::{self, PosteriorResult};
use mjp_core::bridge::{self, BridgingSolution, Problem, RefinementTrace};
use mjp_core::dsl::{parse_model, ModelDocument, TerminalSpec};
use mjp_core::geometry::LumpedSpace;
use mjp_core::solver::{Method, SolverStats};
use mjp_core::{Error, SparseGenerator};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "mjp", version, about = "Bridging distributions of population Markov jump processes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Bridging distribution between the initial and terminal constraint.
    Bridge(BridgeArgs),
    /// Lower bounds on a terminal event probability for several thresholds.
    Rare(RareArgs),
    /// Smoothing under a noisy terminal observation.
    Smooth(CommonArgs),
    /// Expected occupation times under the bridging law.
    Occupation(CommonArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Model file in the `.mjp` format.
    pub model: PathBuf,
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Truncation threshold.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Initial macro-states have side 2^m.
    #[arg(long = "grid-exponent")]
    pub grid_exponent: Option<u32>,
    /// Number of equispaced time points on [0, T].
    #[arg(long = "time-points")]
    pub time_points: Option<usize>,
    #[arg(long)]
    pub rtol: Option<f64>,
    #[arg(long)]
    pub atol: Option<f64>,
    /// Integrator: bdf or rk45.
    #[arg(long)]
    pub solver: Option<Method>,
}

#[derive(Debug, Clone, Args)]
pub struct BridgeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Write the final generator as `row col rate` lines to this file.
    #[arg(long = "dump-generator")]
    pub dump_generator: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct RareArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Comma-separated truncation thresholds, one table row each.
    #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
    pub deltas: Vec<f64>,
    /// Exact probability, used for the relative-error column.
    #[arg(long)]
    pub reference: Option<f64>,
}

/// Failure with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: anyhow::Error,
}

impl Failure {
    fn input(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: 1,
            error: error.into(),
        }
    }

    fn output(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: 2,
            error: error.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Parse(_)
            | Error::InvalidModel(_)
            | Error::Query(_)
            | Error::DimensionMismatch { .. }
            | Error::NegativeState { .. }
            | Error::Overlap { .. } => 1,
            _ => 2,
        };
        Self {
            code,
            error: e.into(),
        }
    }
}

/// Runs one subcommand and prints a short report to standard output.
pub fn run(cli: Cli) -> Result<(), Failure> {
    let start = Instant::now();
    match cli.command {
        Command::Bridge(a) => {
            let s = cmd_bridge(&a)?;
            println!(
                "normalizer {:e}  duality gap {:e}  final states {}  overall states {}",
                s.normalizer, s.duality_gap, s.final_states, s.overall_states
            );
        }
        Command::Rare(a) => {
            let s = cmd_rare(&a)?;
            let table = fs::read_to_string(a.common.out.join("table.csv")).map_err(Failure::output)?;
            print!("{table}");
            for n in &s.notes {
                eprintln!("note: {n}");
            }
        }
        Command::Smooth(a) => {
            let (s, r) = cmd_smooth(&a)?;
            let name = &s.bridge.options.species[r.likelihood.species];
            println!(
                "evidence {:e}  posterior mean of {name} {:.4}  final states {}",
                s.evidence, s.posterior_mean, s.bridge.final_states
            );
        }
        Command::Occupation(a) => {
            let s = cmd_occupation(&a)?;
            println!(
                "normalizer {:e}  total occupation {:.4}  busiest state {:?}",
                s.bridge.normalizer, s.total_occupation, s.argmax_state
            );
        }
    }
    eprintln!("wall time: {:.3} s", start.elapsed().as_secs_f64());
    Ok(())
}

/// Reads the model and applies command-line overrides on top of its options.
pub fn load(args: &CommonArgs) -> Result<ModelDocument, Failure> {
    let text = fs::read_to_string(&args.model)
        .with_context(|| format!("cannot read model file {}", args.model.display()))
        .map_err(Failure::input)?;
    let mut doc = parse_model(&text).map_err(|e| Failure::input(anyhow::anyhow!("{}: {e}", args.model.display())))?;
    let o = &mut doc.options;
    if let Some(v) = args.delta {
        o.delta = v;
    }
    if let Some(v) = args.grid_exponent {
        o.grid_exponent = v;
    }
    if let Some(v) = args.time_points {
        o.time_points = v;
    }
    if let Some(v) = args.rtol {
        o.rtol = v;
    }
    if let Some(v) = args.atol {
        o.atol = v;
    }
    if let Some(v) = args.solver {
        o.solver = v;
    }
    mjp_core::dsl::validate_options(o, doc.network.dims()).map_err(|m| Failure::input(anyhow::anyhow!(m)))?;
    Ok(doc)
}

#[derive(Debug, Clone, Serialize)]
pub struct OptionsReport {
    pub species: Vec<String>,
    pub bounds: Vec<i64>,
    pub delta: f64,
    pub grid_exponent: u32,
    pub time_points: usize,
    pub rtol: f64,
    pub atol: f64,
    pub solver: Method,
    pub unlumped: Vec<String>,
}

fn options_report(doc: &ModelDocument) -> OptionsReport {
    let o = &doc.options;
    OptionsReport {
        species: doc.network.species().iter().map(|s| s.name.clone()).collect(),
        bounds: o.bounds.clone(),
        delta: o.delta,
        grid_exponent: o.grid_exponent,
        time_points: o.time_points,
        rtol: o.rtol,
        atol: o.atol,
        solver: o.solver,
        unlumped: o.unlumped.iter().map(|&d| doc.network.species()[d].name.clone()).collect(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BridgeSummary {
    pub schema_version: u32,
    pub query: &'static str,
    pub model: String,
    pub options: OptionsReport,
    pub horizon: f64,
    /// `Σ π̂(·,0) β̂(·,0)` on the final truncation.
    pub normalizer: f64,
    /// `Σ π̂(·,T) β̂(·,T)` on the final truncation.
    pub terminal_reach: f64,
    pub duality_gap: f64,
    pub duality_ok: bool,
    /// Largest relative deviation of `Σ π̂ β̂` from the normalizer over the grid.
    pub mass_drift: f64,
    pub sink_mass: f64,
    pub final_states: usize,
    pub overall_states: usize,
    pub iterations: usize,
    pub solver: SolverStats,
}

fn summarize(
    query: &'static str,
    args: &CommonArgs,
    doc: &ModelDocument,
    sol: &BridgingSolution,
    trace: &RefinementTrace,
) -> BridgeSummary {
    let mut solver = SolverStats::default();
    for it in &trace.iterations {
        solver.merge(it.forward);
        solver.merge(it.backward);
    }
    let gap = sol.duality_gap();
    let o = &doc.options;
    BridgeSummary {
        schema_version: SCHEMA_VERSION,
        query,
        model: file_name(&args.model),
        options: options_report(doc),
        horizon: doc.horizon,
        normalizer: sol.normalizer,
        terminal_reach: sol.terminal_reach(),
        duality_gap: gap,
        duality_ok: gap <= 10.0 * (o.rtol * sol.normalizer + o.atol),
        mass_drift: sol.mass_drift,
        sink_mass: sol.sink_mass(),
        final_states: trace.final_states,
        overall_states: trace.overall_states,
        iterations: trace.iterations.len(),
        solver,
    }
}

fn file_name(p: &Path) -> String {
    p.file_name().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn prepare(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir)
        .with_context(|| format!("cannot create output directory {}", dir.display()))
        .map_err(Failure::output)
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), Failure> {
    let path = dir.join(name);
    fs::write(&path, contents)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(Failure::output)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(Failure::output)?;
    text.push('\n');
    write(dir, name, &text)
}

fn header(doc: &ModelDocument, tail: &[&str]) -> String {
    let mut cols: Vec<&str> = doc.network.species().iter().map(|s| s.name.as_str()).collect();
    cols.extend_from_slice(tail);
    cols.join(",") + "\n"
}

fn coords(out: &mut String, x: &[i64]) {
    for v in x {
        let _ = write!(out, "{v},");
    }
}

/// One CSV per grid time: state coordinates and bridging probability.
fn write_gamma(dir: &Path, doc: &ModelDocument, sol: &BridgingSolution) -> Result<(), Failure> {
    for (k, g) in sol.gamma.iter().enumerate() {
        let mut text = header(doc, &["probability"]);
        for (s, p) in sol.space.states().iter().zip(g) {
            coords(&mut text, s.lower());
            let _ = writeln!(text, "{p:e}");
        }
        write(dir, &format!("gamma_t{k}.csv"), &text)?;
    }
    Ok(())
}

/// Box corners of every refinement pass.
fn write_snapshots(dir: &Path, doc: &ModelDocument, trace: &RefinementTrace) -> Result<(), Failure> {
    let names: Vec<&str> = doc.network.species().iter().map(|s| s.name.as_str()).collect();
    for (i, boxes) in trace.snapshots.iter().enumerate() {
        let mut cols: Vec<String> = names.iter().map(|n| format!("{n}_lower")).collect();
        cols.extend(names.iter().map(|n| format!("{n}_upper")));
        let mut text = cols.join(",") + "\n";
        for b in boxes {
            let parts: Vec<String> = b.lower().iter().chain(b.upper()).map(i64::to_string).collect();
            text.push_str(&parts.join(","));
            text.push('\n');
        }
        write(dir, &format!("snapshot_{i}.csv"), &text)?;
    }
    Ok(())
}

fn write_timing(dir: &Path, start: Instant) -> Result<(), Failure> {
    let secs = start.elapsed().as_secs_f64();
    write_json(dir, "timing.json", &serde_json::json!({ "wall_time_seconds": secs }))
}

fn check_probabilities(sol: &BridgingSolution) -> Result<(), Failure> {
    let bad = sol.gamma.iter().flatten().any(|p| !(0.0..=1.0 + 1e-9).contains(p));
    if bad || !(0.0..=1.0 + 1e-9).contains(&sol.normalizer) {
        return Err(Failure::output(anyhow::anyhow!(
            "a reported probability left [0, 1]; tighten rtol/atol"
        )));
    }
    Ok(())
}

pub fn cmd_bridge(args: &BridgeArgs) -> Result<BridgeSummary, Failure> {
    let start = Instant::now();
    let c = &args.common;
    let doc = load(c)?;
    let problem = Problem::from_document(&doc)?;
    if matches!(doc.terminal, TerminalSpec::Observe(_)) {
        return Err(Failure::input(anyhow::anyhow!("observation terminals are handled by `mjp smooth`")));
    }
    let (sol, trace) = bridge::refine(&problem)?;
    check_probabilities(&sol)?;
    prepare(&c.out)?;
    write_gamma(&c.out, &doc, &sol)?;
    write_snapshots(&c.out, &doc, &trace)?;
    write_json(&c.out, "trace.json", &trace)?;
    let summary = summarize("bridge", c, &doc, &sol, &trace);
    write_json(&c.out, "summary.json", &summary)?;
    if let Some(path) = &args.dump_generator {
        let mut generator = SparseGenerator::assemble(&sol.space, &doc.network)?;
        if let TerminalSpec::Point {
            state,
            first_passage: true,
        } = &doc.terminal
        {
            if let Some(g) = sol.space.locate(state) {
                generator = generator.make_absorbing(&[g]);
            }
        }
        fs::write(path, generator.to_coo_text())
            .with_context(|| format!("cannot write {}", path.display()))
            .map_err(Failure::output)?;
    }
    write_timing(&c.out, start)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct RareRow {
    pub delta: f64,
    pub truncation_size: usize,
    pub overall_states: usize,
    pub estimate: f64,
    pub relative_error: Option<f64>,
    pub duality_gap: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RareSummary {
    pub schema_version: u32,
    pub query: &'static str,
    pub model: String,
    pub options: OptionsReport,
    pub reference: Option<f64>,
    pub rows: Vec<RareRow>,
    pub notes: Vec<String>,
}

pub fn cmd_rare(args: &RareArgs) -> Result<RareSummary, Failure> {
    let start = Instant::now();
    let c = &args.common;
    if args.deltas.is_empty() {
        return Err(Failure::input(anyhow::anyhow!("--deltas needs at least one threshold")));
    }
    let doc = load(c)?;
    if !matches!(doc.terminal, TerminalSpec::Predicate(_) | TerminalSpec::Point { .. }) {
        return Err(Failure::input(anyhow::anyhow!("rare-event bounds need a point or predicate terminal")));
    }
    prepare(&c.out)?;
    let mut rows = Vec::new();
    let mut notes = Vec::new();
    for &delta in &args.deltas {
        let mut problem = Problem::from_document(&doc)?;
        problem.options.delta = delta;
        mjp_core::dsl::validate_options(&problem.options, doc.network.dims())
            .map_err(|m| Failure::input(anyhow::anyhow!(m)))?;
        let r = bridge::rare_event_bound(&problem)?;
        for n in &r.trace.notes {
            if !notes.contains(n) {
                notes.push(n.clone());
            }
        }
        rows.push(RareRow {
            delta,
            truncation_size: r.trace.final_states,
            overall_states: r.trace.overall_states,
            estimate: r.bound,
            relative_error: args.reference.map(|v| (v - r.bound).abs() / v),
            duality_gap: r.solution.as_ref().map_or(0.0, BridgingSolution::duality_gap),
        });
        write_json(&c.out, &format!("trace_delta{}.json", rows.len() - 1), &r.trace)?;
    }
    let mut table = String::from("delta,truncation_size,overall_states,estimate,relative_error\n");
    for r in &rows {
        let rel = r.relative_error.map(|e| format!("{e:.4e}")).unwrap_or_default();
        let _ = writeln!(
            table,
            "{:e},{},{},{:.4e},{rel}",
            r.delta, r.truncation_size, r.overall_states, r.estimate
        );
    }
    write(&c.out, "table.csv", &table)?;
    let summary = RareSummary {
        schema_version: SCHEMA_VERSION,
        query: "rare",
        model: file_name(&c.model),
        options: options_report(&doc),
        reference: args.reference,
        rows,
        notes,
    };
    write_json(&c.out, "summary.json", &summary)?;
    write_timing(&c.out, start)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct SmoothSummary {
    #[serde(flatten)]
    pub bridge: BridgeSummary,
    /// `P(Y = observed)` under the truncated forward law at the horizon.
    pub evidence: f64,
    pub posterior_mean: f64,
}

pub fn cmd_smooth(args: &CommonArgs) -> Result<(SmoothSummary, PosteriorResult), Failure> {
    let start = Instant::now();
    let doc = load(args)?;
    let result = bayes::smooth(&doc)?;
    check_probabilities(&result.bridging)?;
    prepare(&args.out)?;
    write_gamma(&args.out, &doc, &result.bridging)?;
    write_snapshots(&args.out, &doc, &result.trace)?;
    write_json(&args.out, "trace.json", &result.trace)?;

    let obs_name = &doc.network.species()[result.likelihood.species].name;
    let mut text = format!("{obs_name},prior,likelihood,posterior\n");
    let mut mean = 0.0;
    for (n, (prior, lik, post)) in result.observed_marginal() {
        mean += n as f64 * post;
        let _ = writeln!(text, "{n},{prior:e},{lik:e},{post:e}");
    }
    write(&args.out, "posterior.csv", &text)?;

    let latent: Vec<&str> = doc
        .network
        .species()
        .iter()
        .filter(|s| s.index != result.likelihood.species)
        .map(|s| s.name.as_str())
        .collect();
    let mut text = latent.join(",");
    text.push_str(if latent.is_empty() { "prior,posterior\n" } else { ",prior,posterior\n" });
    for (x, (prior, post)) in result.latent_joint() {
        coords(&mut text, &x);
        let _ = writeln!(text, "{prior:e},{post:e}");
    }
    write(&args.out, "marginals.csv", &text)?;

    let summary = SmoothSummary {
        bridge: summarize("smooth", args, &doc, &result.bridging, &result.trace),
        evidence: result.terminal.normalizer,
        posterior_mean: mean,
    };
    write_json(&args.out, "summary.json", &summary)?;
    write_timing(&args.out, start)?;
    Ok((summary, result))
}

#[derive(Debug, Clone, Serialize)]
pub struct OccupationSummary {
    #[serde(flatten)]
    pub bridge: BridgeSummary,
    /// Expected time spent outside the initial and terminal states.
    pub total_occupation: f64,
    pub argmax_state: Vec<i64>,
}

fn endpoint_flags(doc: &ModelDocument, space: &LumpedSpace) -> Vec<bool> {
    let mut flags = vec![false; space.len()];
    for (x, _) in doc.initial.support() {
        if let Some(i) = space.locate(&x) {
            flags[i] = true;
        }
    }
    if let TerminalSpec::Point { state, .. } = &doc.terminal {
        if let Some(i) = space.locate(state) {
            flags[i] = true;
        }
    }
    flags
}

pub fn cmd_occupation(args: &CommonArgs) -> Result<OccupationSummary, Failure> {
    let start = Instant::now();
    let doc = load(args)?;
    if matches!(doc.terminal, TerminalSpec::Observe(_)) {
        return Err(Failure::input(anyhow::anyhow!("observation terminals are handled by `mjp smooth`")));
    }
    let problem = Problem::from_document(&doc)?;
    let (sol, trace) = bridge::refine(&problem)?;
    check_probabilities(&sol)?;
    let occ = bridge::occupation_time(&sol);
    let flags = endpoint_flags(&doc, &sol.space);
    prepare(&args.out)?;
    let mut text = header(&doc, &["occupation", "endpoint"]);
    let mut total = 0.0;
    let mut best = (f64::NEG_INFINITY, 0usize);
    for (i, s) in sol.space.states().iter().enumerate() {
        coords(&mut text, s.lower());
        let _ = writeln!(text, "{:e},{}", occ[i], u8::from(flags[i]));
        if !flags[i] {
            total += occ[i];
            if occ[i] > best.0 {
                best = (occ[i], i);
            }
        }
    }
    write(&args.out, "occupation.csv", &text)?;
    write_snapshots(&args.out, &doc, &trace)?;
    write_json(&args.out, "trace.json", &trace)?;
    let summary = OccupationSummary {
        bridge: summarize("occupation", args, &doc, &sol, &trace),
        total_occupation: total,
        argmax_state: sol.space.states().get(best.1).map(|s| s.lower().to_vec()).unwrap_or_default(),
    };
    write_json(&args.out, "summary.json", &summary)?;
    write_timing(&args.out, start)?;
    Ok(summary)
}

/// Applies `MJP_THREADS` to the global worker pool.
pub fn configure_threads() -> Result<(), Failure> {
    if let Ok(v) = std::env::var("MJP_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Failure::input(anyhow::anyhow!("MJP_THREADS must be a positive integer, got '{v}'")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(Failure::input)?;
    }
    Ok(())
}
