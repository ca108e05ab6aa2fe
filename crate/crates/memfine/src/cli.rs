//! Command-line front end.
//!
//! Exit status: 0 success, 1 configuration or input error, 2 infeasible
//! memory plan, 3 kernel property failure.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use memfine_core::mact::{self, Bins, ChunkPlan, MethodEstimate, Strategy};
use memfine_core::routing_sim::{self, Distribution, LayerStats, RoutingTrace};
use memfine_core::throughput::{self, ThroughputReport};
use memfine_core::{validate, ValidatedScenario};
use serde::Serialize;

use crate::error::{Exit, Result, RunError};
use crate::formats;
use crate::io::write_atomic;
use crate::manifest::RunManifest;
use crate::report::{self, LayerPlanSummary};
use crate::scenario::{self, LoadedScenario, ScenarioFile};
use crate::verify::{self, Size, VerifyOptions};

#[derive(Debug, Parser)]
#[command(name = "memfine", version, about = "Memory planner and routing simulator for chunked MoE training")]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Static and activation memory of one pipeline stage, per method.
    Estimate(EstimateArgs),
    /// Generate a routing trace, plan chunk counts and model throughput.
    Simulate(SimulateArgs),
    /// Plan chunk counts for an existing trace.
    Plan(PlanArgs),
    /// Check chunked execution and gradients of the MoE kernel.
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    All,
    /// No chunking, full recomputation.
    Unchunked,
    /// The fixed chunk count everywhere.
    Fixed,
    /// Memory-aware chunk tuning.
    Mact,
}

#[derive(Debug, Clone, Args)]
pub struct PlannerArgs {
    /// Chunk-count bins, e.g. `1,2,4,8` (default: scenario `[planner]` or 1,2,4,8).
    #[arg(long, value_delimiter = ',')]
    pub bins: Vec<u64>,
    /// Chunk count of the fixed method (default: scenario `[planner]` or 8).
    #[arg(long)]
    pub fixed_chunks: Option<u64>,
}

impl PlannerArgs {
    fn resolve(&self, file: &ScenarioFile) -> Result<(Bins, u64)> {
        let pl = file.planner.clone().unwrap_or_default();
        let bins = if self.bins.is_empty() { pl.bins } else { Bins::new(self.bins.clone())? };
        let fixed = self.fixed_chunks.unwrap_or(pl.fixed_chunks);
        if fixed == 0 {
            return Err(RunError::Config("--fixed-chunks must be at least 1".into()));
        }
        Ok((bins, fixed))
    }
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// Scenario file, or a name looked up in $MEMFINE_SCENARIO_DIR.
    #[arg(short, long)]
    pub scenario: String,
    /// Copies received per sequence (default: the routing peak e·s·t_k).
    #[arg(long, conflicts_with = "trace")]
    pub s_prime: Option<u64>,
    /// Take the stage's peak load from a trace file.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Pipeline stage (default: the scenario's pp_rank).
    #[arg(long)]
    pub stage: Option<u64>,
    #[arg(long, value_enum, default_value_t = MethodArg::All)]
    pub method: MethodArg,
    #[command(flatten)]
    pub planner: PlannerArgs,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    pub format: Format,
    /// Also write the report (in `--format`, CSV for `table`) to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write a run manifest here.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario file, or a name looked up in $MEMFINE_SCENARIO_DIR.
    #[arg(short, long, required_unless_present = "from_manifest")]
    pub scenario: Option<String>,
    /// `uniform`, `dirichlet:alpha=A`, `hot_expert:rho=R` or `depth_skew:alpha0=A,decay=D`.
    #[arg(long, value_parser = parse_distribution, default_value = "depth_skew:alpha0=1,decay=0.7")]
    pub dist: Distribution,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub iters: usize,
    #[command(flatten)]
    pub planner: PlannerArgs,
    /// Output directory.
    #[arg(short, long, default_value = "memfine-out")]
    pub out: PathBuf,
    /// Summary printed to standard output.
    #[arg(long, value_enum, default_value_t = Format::Table)]
    pub format: Format,
    /// Use this trace file instead of generating one.
    #[arg(long, conflicts_with = "from_manifest")]
    pub replay: Option<PathBuf>,
    /// Rerun the simulation recorded in a manifest.
    #[arg(long)]
    pub from_manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Unchunked,
    Fixed,
    Mact,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(short, long)]
    pub scenario: String,
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long, value_enum, default_value_t = StrategyArg::Mact)]
    pub strategy: StrategyArg,
    #[command(flatten)]
    pub planner: PlannerArgs,
    /// Plan file to write.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    pub format: Format,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, value_enum, default_value_t = Size::Default)]
    pub size: Size,
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub first_seed: u64,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    pub format: Format,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Harness self-test: corrupt the chunked side and expect a failure.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

/// Parse `kind[:key=value,...]`.
pub fn parse_distribution(s: &str) -> std::result::Result<Distribution, String> {
    let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
    let mut params = std::collections::BTreeMap::new();
    for kv in rest.split(',').filter(|p| !p.trim().is_empty()) {
        let (k, v) = kv.split_once('=').ok_or_else(|| format!("expected key=value, got `{kv}`"))?;
        let v: f64 = v.trim().parse().map_err(|_| format!("`{k}` is not a number"))?;
        params.insert(k.trim().to_string(), v);
    }
    let mut take = |k: &str| params.remove(k).ok_or_else(|| format!("`{kind}` needs `{k}`"));
    let d = match kind.trim() {
        "uniform" => Distribution::Uniform,
        "dirichlet" => Distribution::Dirichlet { alpha: take("alpha")? },
        "hot_expert" => Distribution::HotExpert { rho: take("rho")? },
        "depth_skew" => Distribution::DepthSkew { alpha0: take("alpha0")?, decay: take("decay")? },
        other => return Err(format!("unknown distribution `{other}`")),
    };
    if let Some(k) = params.keys().next() {
        return Err(format!("unexpected parameter `{k}` for `{kind}`"));
    }
    d.validate().map_err(|e| e.to_string())?;
    Ok(d)
}

fn strategies(bins: &Bins, fixed: u64) -> [Strategy; 3] {
    [Strategy::Unchunked, Strategy::Fixed { chunks: fixed }, Strategy::Mact { bins: bins.clone() }]
}

fn load_trace(path: &Path) -> Result<RoutingTrace> {
    let text = std::fs::read_to_string(path).map_err(|e| RunError::io(path, e))?;
    formats::parse_trace(&text, path)
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("plain data") + "\n"
}

fn write_manifest(path: &Path, mut m: RunManifest, started: Instant) -> Result<()> {
    m.wall_clock_seconds = started.elapsed().as_secs_f64();
    write_atomic(path, m.to_json().as_bytes())
}

fn warn_clamped(plan: &ChunkPlan) {
    let clamped = plan.cells.iter().filter(|c| c.clamped).count();
    if clamped > 0 {
        let worst = plan.cells.iter().filter_map(|c| c.c_theoretical).max().unwrap_or(0);
        warn!("{clamped} cell(s) need more chunks than the largest bin (up to c={worst}); clamped");
    }
}

#[derive(Debug, Serialize)]
struct EstimateReport<'a> {
    scenario: &'a str,
    stage: u64,
    s_peak: u64,
    s_prime_max: Option<i64>,
    methods: &'a [MethodEstimate],
}

/// Peak per-sequence load of `stage` over all cells of `trace`.
fn stage_peak(scn: &ValidatedScenario, trace: &RoutingTrace, stage: u64) -> Result<u64> {
    if trace.layers as u64 != scn.moe_layers() || trace.gpus as u64 != scn.parallel().ep {
        return Err(RunError::Config("trace does not match the scenario's MoE layers or EP size".into()));
    }
    let b = trace.micro_batch.max(1);
    let mut peak = 0;
    for l in 0..trace.layers {
        if scn.stage_of_layer(trace.first_layer + l as u64) == stage {
            for it in 0..trace.iterations {
                peak = peak.max(trace.max_in_cell(it, l).div_ceil(b));
            }
        }
    }
    Ok(peak)
}

fn estimate(args: &EstimateArgs, out: &mut dyn Write) -> Result<Exit> {
    let started = Instant::now();
    let loaded = scenario::load(&scenario::resolve(&args.scenario))?;
    let (bins, fixed) = args.planner.resolve(&loaded.file)?;
    let stage = args.stage.unwrap_or(loaded.scenario.parallel().pp_rank);
    let scn = loaded.scenario.with_stage(stage)?;
    let s_peak = match (&args.trace, args.s_prime) {
        (Some(t), _) => stage_peak(&scn, &load_trace(t)?, stage)?,
        (None, Some(s)) => s,
        (None, None) => routing_sim::theoretical_peak(&scn).copies,
    };
    let all = strategies(&bins, fixed);
    let chosen: Vec<&Strategy> = match args.method {
        MethodArg::All => all.iter().collect(),
        MethodArg::Unchunked => vec![&all[0]],
        MethodArg::Fixed => vec![&all[1]],
        MethodArg::Mact => vec![&all[2]],
    };
    let rows = chosen.iter().map(|s| mact::method_estimate(&scn, s_peak, s)).collect::<memfine_core::Result<Vec<_>>>()?;
    for r in rows.iter().filter(|r| r.clamped) {
        warn!("{}: chunk count clamped to the largest bin {}", r.method, r.chunks);
    }
    let s_prime_max = mact::s_prime_max(&scn, stage).ok();
    let label = loaded.path.display().to_string();
    let report = EstimateReport { scenario: &label, stage, s_peak, s_prime_max, methods: &rows };

    let text = match args.format {
        Format::Table => {
            let mut t = format!("{label}: stage {stage}, s' = {s_peak}");
            if let Some(m) = s_prime_max {
                t.push_str(&format!(", s'_max = {m}"));
            }
            t.push('\n');
            t + &report::estimate_table(&rows)
        }
        Format::Json => json(&report),
        Format::Csv => formats::estimate_csv(&rows),
    };
    out.write_all(text.as_bytes()).map_err(|e| RunError::io("<stdout>", e))?;

    let mut manifest = RunManifest::new("estimate");
    manifest.scenario_path = Some(label.clone());
    manifest.scenario = Some(loaded.file.clone());
    manifest.bins = Some(bins.as_slice().to_vec());
    manifest.fixed_chunks = Some(fixed);
    if let Some(path) = &args.out {
        let body = match args.format {
            Format::Json => json(&report),
            _ => formats::estimate_csv(&rows),
        };
        write_atomic(path, body.as_bytes())?;
        manifest.outputs.push(path.display().to_string());
    }
    if let Some(path) = &args.manifest {
        write_manifest(path, manifest, started)?;
    }

    let infeasible: Vec<&str> = rows.iter().filter(|r| !r.estimate.feasible).map(|r| r.method).collect();
    if infeasible.is_empty() {
        Ok(Exit::Ok)
    } else {
        eprintln!("infeasible on stage {stage}: {}", infeasible.join(", "));
        Ok(Exit::Infeasible)
    }
}

#[derive(Debug, Serialize)]
struct PlanReport {
    method: &'static str,
    all_feasible: bool,
    layers: Vec<LayerPlanSummary>,
}

#[derive(Debug, Serialize)]
struct SimulationReport {
    scenario: String,
    generator: Option<routing_sim::GeneratorSpec>,
    iterations: usize,
    s_prime_max_by_stage: Vec<(u64, i64)>,
    layer_stats: Vec<LayerStats>,
    plans: Vec<PlanReport>,
    throughput: ThroughputReport,
}

struct SimInputs {
    loaded: LoadedScenario,
    label: String,
    dist: Distribution,
    seed: u64,
    iters: usize,
    replay: Option<PathBuf>,
    bins: Bins,
    fixed: u64,
}

fn sim_inputs(args: &SimulateArgs) -> Result<SimInputs> {
    if let Some(mpath) = &args.from_manifest {
        let m = RunManifest::load(mpath)?;
        if m.subcommand != "simulate" {
            return Err(RunError::Config(format!("{} records `{}`, not `simulate`", mpath.display(), m.subcommand)));
        }
        let file = m.scenario.ok_or_else(|| RunError::Config("manifest has no embedded scenario".into()))?;
        let label = m.scenario_path.unwrap_or_else(|| "<manifest>".into());
        let scenario = validate(file.scenario())?;
        let bins = Bins::new(m.bins.unwrap_or_else(|| Bins::default().into()))?;
        let fixed = m.fixed_chunks.unwrap_or(8);
        let loaded = LoadedScenario { path: PathBuf::from(&label), file, scenario, unknown_keys: Vec::new() };
        return Ok(SimInputs {
            loaded,
            label,
            dist: m.distribution.unwrap_or(args.dist),
            seed: m.seed.unwrap_or(0),
            iters: m.iterations.unwrap_or(0),
            replay: m.replay_trace.map(PathBuf::from),
            bins,
            fixed,
        });
    }
    let name = args.scenario.as_deref().expect("required by clap");
    let loaded = scenario::load(&scenario::resolve(name))?;
    let (bins, fixed) = args.planner.resolve(&loaded.file)?;
    Ok(SimInputs {
        label: loaded.path.display().to_string(),
        loaded,
        dist: args.dist,
        seed: args.seed,
        iters: args.iters,
        replay: args.replay.clone(),
        bins,
        fixed,
    })
}

fn simulate(args: &SimulateArgs, out: &mut dyn Write) -> Result<Exit> {
    let started = Instant::now();
    let inp = sim_inputs(args)?;
    let scn = &inp.loaded.scenario;
    let cost = inp.loaded.cost();
    let trace = match &inp.replay {
        Some(p) => load_trace(p)?,
        None => routing_sim::generate_trace(scn, inp.dist, inp.iters, inp.seed)?,
    };
    let stats = routing_sim::trace_stats(&trace);
    let plans = strategies(&inp.bins, inp.fixed)
        .into_iter()
        .map(|s| mact::plan(scn, &trace, s))
        .collect::<memfine_core::Result<Vec<_>>>()?;
    let mact_plan = &plans[2];
    warn_clamped(mact_plan);
    let tp = throughput::report(scn, &plans, &cost)?;

    let stages: std::collections::BTreeSet<u64> =
        (0..trace.layers).map(|l| scn.stage_of_layer(trace.first_layer + l as u64)).collect();
    let s_prime_max_by_stage =
        stages.into_iter().map(|st| Ok((st, mact::s_prime_max(scn, st)?))).collect::<memfine_core::Result<Vec<_>>>()?;
    let report = SimulationReport {
        scenario: inp.label.clone(),
        generator: trace.generator,
        iterations: trace.iterations,
        s_prime_max_by_stage,
        layer_stats: stats.clone(),
        plans: plans
            .iter()
            .map(|p| PlanReport { method: p.strategy.name(), all_feasible: p.all_feasible(), layers: report::summarize_plan(p) })
            .collect(),
        throughput: tp.clone(),
    };

    let files: [(&str, String); 5] = [
        ("trace.csv", formats::trace_csv(&trace)),
        ("layer_stats.csv", formats::stats_csv(&stats)),
        ("plan.csv", formats::plan_csv(mact_plan)),
        ("throughput.csv", formats::throughput_csv(&tp)),
        ("report.json", json(&report)),
    ];
    let mut manifest = RunManifest::new("simulate");
    manifest.scenario_path = Some(inp.label.clone());
    manifest.scenario = Some(inp.loaded.file.clone());
    manifest.seed = Some(inp.seed);
    manifest.distribution = Some(inp.dist);
    manifest.iterations = Some(inp.iters);
    manifest.replay_trace = inp.replay.as_ref().map(|p| p.display().to_string());
    manifest.bins = Some(inp.bins.as_slice().to_vec());
    manifest.fixed_chunks = Some(inp.fixed);
    manifest.cost = Some(cost);
    for (name, body) in &files {
        let path = args.out.join(name);
        write_atomic(&path, body.as_bytes())?;
        manifest.outputs.push(path.display().to_string());
    }
    write_manifest(&args.out.join("manifest.json"), manifest, started)?;
    info!("wrote {} files to {}", files.len() + 1, args.out.display());

    let text = match args.format {
        Format::Table => format!(
            "routing ({} iterations)\n{}\n{}\nthroughput\n{}",
            trace.iterations,
            report::stats_table(&stats),
            report::plan_table(mact_plan),
            report::throughput_table(&tp)
        ),
        Format::Json => json(&report),
        Format::Csv => formats::plan_csv(mact_plan),
    };
    out.write_all(text.as_bytes()).map_err(|e| RunError::io("<stdout>", e))?;

    if mact_plan.all_feasible() {
        Ok(Exit::Ok)
    } else {
        eprintln!("memory-aware plan has infeasible cells");
        Ok(Exit::Infeasible)
    }
}

fn plan_cmd(args: &PlanArgs, out: &mut dyn Write) -> Result<Exit> {
    let started = Instant::now();
    let loaded = scenario::load(&scenario::resolve(&args.scenario))?;
    let (bins, fixed) = args.planner.resolve(&loaded.file)?;
    let trace = load_trace(&args.trace)?;
    let strategy = match args.strategy {
        StrategyArg::Unchunked => Strategy::Unchunked,
        StrategyArg::Fixed => Strategy::Fixed { chunks: fixed },
        StrategyArg::Mact => Strategy::Mact { bins: bins.clone() },
    };
    let plan = mact::plan(&loaded.scenario, &trace, strategy)?;
    warn_clamped(&plan);
    let csv = formats::plan_csv(&plan);
    let text = match args.format {
        Format::Table => report::plan_table(&plan),
        Format::Json => json(&plan),
        Format::Csv => csv.clone(),
    };
    out.write_all(text.as_bytes()).map_err(|e| RunError::io("<stdout>", e))?;

    let mut manifest = RunManifest::new("plan");
    manifest.scenario_path = Some(loaded.path.display().to_string());
    manifest.scenario = Some(loaded.file.clone());
    manifest.replay_trace = Some(args.trace.display().to_string());
    manifest.bins = Some(bins.as_slice().to_vec());
    manifest.fixed_chunks = Some(fixed);
    if let Some(p) = &args.out {
        write_atomic(p, csv.as_bytes())?;
        manifest.outputs.push(p.display().to_string());
    }
    if let Some(p) = &args.manifest {
        write_manifest(p, manifest, started)?;
    }
    if plan.all_feasible() {
        Ok(Exit::Ok)
    } else {
        eprintln!("plan has infeasible cells");
        Ok(Exit::Infeasible)
    }
}

fn verify_cmd(args: &VerifyArgs, out: &mut dyn Write) -> Result<Exit> {
    let started = Instant::now();
    let opts = VerifyOptions { size: args.size, seeds: args.seeds, first_seed: args.first_seed, inject_fault: args.inject_fault };
    let summary = verify::run(&opts);
    let text = match args.format {
        Format::Json => json(&summary),
        Format::Table | Format::Csv => {
            let worst = |f: fn(&verify::SeedResult) -> f64| summary.results.iter().map(f).fold(0.0, f64::max);
            format!(
                "seeds {}..{} ({:?} size)\n  chunked forward exact (c = 1..{}): {}\n  max chunked grad rel. diff: {:.3e} (x), {:.3e} (w); tol {:e}\n  max finite-difference rel. error: {:.3e}; tol {:e}\n{}\n",
                opts.first_seed,
                opts.first_seed + opts.seeds,
                opts.size,
                verify::MAX_CHUNKS,
                summary.results.iter().all(|r| r.forward_exact),
                worst(|r| r.x_grad_rel),
                worst(|r| r.w_grad_rel),
                verify::EQUIVALENCE_TOL,
                worst(|r| r.fd_max_rel),
                verify::FD_TOL,
                if summary.passed() { "PASS" } else { "FAIL" }
            )
        }
    };
    out.write_all(text.as_bytes()).map_err(|e| RunError::io("<stdout>", e))?;
    if let Some(p) = &args.manifest {
        let mut m = RunManifest::new("verify");
        m.seed = Some(opts.first_seed);
        m.iterations = Some(opts.seeds as usize);
        write_manifest(p, m, started)?;
    }
    let failures: Vec<_> = summary.failures().collect();
    if let Some(first) = failures.first() {
        for f in &failures {
            eprintln!("FAIL seed {}: {}", f.seed, f.failure.as_deref().unwrap_or(""));
        }
        return Err(RunError::Property { seed: first.seed, what: format!("{} of {} seeds failed", failures.len(), opts.seeds) });
    }
    Ok(Exit::Ok)
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<Exit> {
    match &cli.command {
        Command::Estimate(a) => estimate(a, out),
        Command::Simulate(a) => simulate(a, out),
        Command::Plan(a) => plan_cmd(a, out),
        Command::Verify(a) => verify_cmd(a, out),
    }
}

pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { Exit::Config as u8 } else { Exit::Ok as u8 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let stdout = std::io::stdout();
    let code = match run(&cli, &mut stdout.lock()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit()
        }
    };
    ExitCode::from(code as u8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distribution_specs() {
        assert_eq!(parse_distribution("uniform"), Ok(Distribution::Uniform));
        assert_eq!(parse_distribution("dirichlet:alpha=0.5"), Ok(Distribution::Dirichlet { alpha: 0.5 }));
        assert_eq!(
            parse_distribution("depth_skew:alpha0=2, decay=0.5"),
            Ok(Distribution::DepthSkew { alpha0: 2.0, decay: 0.5 })
        );
        assert!(parse_distribution("dirichlet").is_err());
        assert!(parse_distribution("dirichlet:alpha=-1").is_err());
        assert!(parse_distribution("hot_expert:rho=0.5,x=1").is_err());
        assert!(parse_distribution("zipf:s=1").is_err());
    }

    #[test]
    fn cli_shape() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
