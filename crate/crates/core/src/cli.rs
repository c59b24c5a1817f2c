//! The `cdr` command line: `metrics`, `pareto`, `plot`, `simulate` and
//! `validate`.
//!
//! Exit codes: 0 success, 1 I/O fault, 2 invalid input.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::knob::{self, FilterCriterion, SweepInputs, SweepPlan};
use crate::marginal::DEFAULT_K;
use crate::model::{self, axis, AxisRegistry, Direction, MetricAxis, ModelError};
use crate::report::{self, MetricsDoc, ObjectiveAxes, ParetoDoc, PlotSpec, ReportError, RunManifest};
use crate::sim::{self, ToyWorld};
use crate::store::{self, StoreError, TablePaths};

pub const THREADS_ENV: &str = "CDR_THREADS";

#[derive(Debug, Parser)]
#[command(name = "cdr", version, about = "Consistency, diversity and realism metrics with Pareto fronts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute metrics for every config of a sweep.
    Metrics(MetricsArgs),
    /// Extract Pareto fronts from metrics.json.
    Pareto(ParetoArgs),
    /// Draw one SVG per objective pair and group.
    Plot(PlotArgs),
    /// Generate a toy-world dataset.
    Simulate(SimulateArgs),
    /// Check an embedding table (and optionally verdicts) for violations.
    Validate(ValidateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GroupBy {
    Group,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Table prefix; reads `<prefix>.cdre` and `<prefix>.meta.jsonl`.
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub verdicts: Option<PathBuf>,
    /// Prompt embeddings (JSONL of prompt_id and vector).
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    #[arg(long)]
    pub sweep: PathBuf,
    /// Comma-separated axes, each `name` or `name:min|max`. Defaults to
    /// every axis, maximized.
    #[arg(long, value_delimiter = ',')]
    pub axes: Option<Vec<String>>,
    /// Neighbourhood size for precision, recall, density and coverage.
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    #[arg(long, value_enum)]
    pub group_by: Option<GroupBy>,
    /// Top-m criterion: `prompt-cosine` or `score:<name>`.
    #[arg(long, default_value = "prompt-cosine")]
    pub filter: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ParetoArgs {
    #[arg(long)]
    pub metrics: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = axis::DSG_CONSISTENCY)]
    pub consistency_axis: String,
    #[arg(long, default_value = axis::COND_DIVERSITY)]
    pub diversity_axis: String,
    #[arg(long, default_value = axis::COND_REALISM)]
    pub realism_axis: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Facet {
    Group,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub pareto: PathBuf,
    #[arg(long)]
    pub metrics: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Only plot these pairs (e.g. `consistency-diversity`).
    #[arg(long)]
    pub pair: Vec<String>,
    /// One plot per group instead of the pooled `all` group.
    #[arg(long, value_enum)]
    pub facet: Option<Facet>,
    #[arg(long, default_value_t = 640)]
    pub width: u32,
    #[arg(long, default_value_t = 480)]
    pub height: u32,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub world: PathBuf,
    #[arg(long)]
    pub sweep: PathBuf,
    /// Overrides the seed stored in the world file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Samples per prompt and config.
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub verdicts: Option<PathBuf>,
}

/// A failed command: message plus exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn input(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<StoreError> for Failure {
    fn from(e: StoreError) -> Self {
        Self {
            code: if e.is_io() { 1 } else { 2 },
            message: e.to_string(),
        }
    }
}

impl From<ReportError> for Failure {
    fn from(e: ReportError) -> Self {
        Self {
            code: if e.is_io() { 1 } else { 2 },
            message: e.to_string(),
        }
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        Self::input(e.to_string())
    }
}

fn ensure_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure {
        code: 1,
        message: format!("{}: {e}", dir.display()),
    })
}

/// Parses `name` or `name:direction` tokens.
pub fn parse_axes(tokens: &[String]) -> Result<AxisRegistry, ModelError> {
    let axes = tokens
        .iter()
        .map(|t| {
            let (name, dir) = match t.split_once(':') {
                Some((n, d)) => (n.trim(), d.trim().parse()?),
                None => (t.trim(), Direction::Maximize),
            };
            if !axis::ALL.contains(&name) {
                return Err(ModelError::UnknownAxis(name.to_string()));
            }
            Ok(MetricAxis::new(name, dir))
        })
        .collect::<Result<Vec<_>, _>>()?;
    AxisRegistry::new(axes)
}

pub fn parse_filter(s: &str) -> Result<FilterCriterion, String> {
    match s {
        "prompt-cosine" => Ok(FilterCriterion::PromptCosine),
        _ => match s.strip_prefix("score:") {
            Some(name) if !name.is_empty() => Ok(FilterCriterion::ScoreField(name.to_string())),
            _ => Err(format!("unknown filter `{s}`; use prompt-cosine or score:<name>")),
        },
    }
}

pub fn cmd_metrics(args: &MetricsArgs) -> Result<(), Failure> {
    let registry = match &args.axes {
        Some(tokens) => parse_axes(tokens)?,
        None => AxisRegistry::default(),
    };
    if registry.contains(axis::DSG_CONSISTENCY) && args.verdicts.is_none() {
        return Err(Failure::input(
            "MissingVerdicts: axis dsg-consistency needs --verdicts",
        ));
    }
    if registry.contains(axis::CLIP_CONSISTENCY) && args.prompts.is_none() {
        return Err(Failure::input(
            "MissingPromptEmbedding: axis clip-consistency needs --prompts",
        ));
    }
    if args.k == 0 {
        return Err(Failure::input("--k must be at least 1"));
    }
    let filter = parse_filter(&args.filter).map_err(Failure::input)?;

    let paths = TablePaths::from_prefix(&args.embeddings);
    let table = store::read_table(&paths)?;
    let report = model::validate_table(&table);
    if !report.is_clean() {
        return Err(Failure::input(violation_text(&report)));
    }
    let verdicts = args.verdicts.as_deref().map(store::read_verdicts).transpose()?;
    if let Some(v) = &verdicts {
        let report = model::validate_verdicts(v, &table);
        if !report.is_clean() {
            return Err(Failure::input(violation_text(&report)));
        }
    }
    let prompts = args.prompts.as_deref().map(store::read_prompt_embeddings).transpose()?;
    let configs = store::read_sweep(&args.sweep)?;

    let mut plan = SweepPlan::new(configs, registry.clone());
    plan.k = args.k;
    plan.group_by = args.group_by.is_some();
    plan.filter = filter;
    let points = knob::run_sweep(
        &plan,
        SweepInputs {
            table: &table,
            verdicts: verdicts.as_ref(),
            prompt_embeddings: prompts.as_ref(),
        },
    )
    .map_err(|e| Failure::input(e.to_string()))?;

    ensure_dir(&args.out)?;
    let mut manifest = RunManifest::new(&registry, &args.sweep, &args.out);
    manifest.add_input("embeddings", &paths.payload)?;
    manifest.add_input("sidecar", &paths.sidecar)?;
    if let Some(p) = &args.verdicts {
        manifest.add_input("verdicts", p)?;
    }
    if let Some(p) = &args.prompts {
        manifest.add_input("prompts", p)?;
    }
    manifest.add_input("sweep", &args.sweep)?;

    let complete = points.iter().filter(|p| p.is_complete()).count();
    report::write_file(&args.out.join("metrics.csv"), report::metrics_csv(&points, &registry))?;
    let doc = MetricsDoc::new(&registry, points);
    report::write_file(&args.out.join("metrics.json"), doc.to_json())?;
    report::write_file(&args.out.join("manifest.json"), manifest.to_json())?;
    println!(
        "{} points ({} complete) on {} axes -> {}",
        doc.points.len(),
        complete,
        registry.len(),
        args.out.display()
    );
    Ok(())
}

fn violation_text(report: &model::ValidationReport) -> String {
    let lines: Vec<String> = report.violations.iter().map(|v| v.to_string()).collect();
    format!("{} violation(s):\n{}", lines.len(), lines.join("\n"))
}

pub fn cmd_pareto(args: &ParetoArgs) -> Result<(), Failure> {
    let metrics = MetricsDoc::read(&args.metrics)?;
    let objectives = ObjectiveAxes {
        consistency: args.consistency_axis.clone(),
        diversity: args.diversity_axis.clone(),
        realism: args.realism_axis.clone(),
    };
    let doc = ParetoDoc::build(&metrics, &objectives)?;
    ensure_dir(&args.out)?;
    report::write_file(&args.out.join("pareto.json"), doc.to_json())?;
    for pair in &doc.fronts {
        for (group, result) in &pair.groups {
            let ids: Vec<&str> = result.front.iter().map(|e| e.config_id.as_str()).collect();
            println!("{} [{}]: front {}", pair.name, group, ids.join(" "));
        }
    }
    for name in &doc.skipped {
        eprintln!("skipped {name}: axis not registered");
    }
    Ok(())
}

pub fn cmd_plot(args: &PlotArgs) -> Result<(), Failure> {
    if args.width == 0 || args.height == 0 {
        return Err(Failure::input("plot dimensions must be positive"));
    }
    let pareto = ParetoDoc::read(&args.pareto)?;
    let metrics = MetricsDoc::read(&args.metrics)?;
    let registry = AxisRegistry::new(pareto.axes.clone())?;
    for name in &args.pair {
        if !pareto.fronts.iter().any(|f| &f.name == name && f.axes.len() == 2) {
            return Err(ReportError::UnknownPair(name.clone()).into());
        }
    }
    ensure_dir(&args.out)?;
    let spec = PlotSpec {
        width: args.width,
        height: args.height,
    };
    for pair in pareto.fronts.iter().filter(|f| f.axes.len() == 2) {
        if !args.pair.is_empty() && !args.pair.contains(&pair.name) {
            continue;
        }
        let faceted: Vec<_> = pair.groups.iter().filter(|(g, _)| !g.is_all()).collect();
        let chosen: Vec<_> = match args.facet {
            Some(Facet::Group) if !faceted.is_empty() => faceted,
            _ => pair.groups.iter().filter(|(g, _)| g.is_all()).collect(),
        };
        for (group, result) in chosen {
            let svg = report::render_svg(result, &metrics.points, &registry, spec)?;
            let file = args
                .out
                .join(format!("{}__{}.svg", pair.name, report::file_stem(group.as_str())));
            report::write_file(&file, svg)?;
            println!("{}", file.display());
        }
    }
    Ok(())
}

pub const SIM_PREFIX: &str = "toy";

pub fn cmd_simulate(args: &SimulateArgs) -> Result<(), Failure> {
    let text = report::read_file(&args.world)?;
    let world = ToyWorld::from_json(&text).map_err(|e| Failure::input(e.to_string()))?;
    let sweep = store::read_sweep(&args.sweep)?;
    let seed = args.seed.unwrap_or(world.seed);
    let data = sim::emit_world_dataset(&world, &sweep, args.n, seed)
        .map_err(|e| Failure::input(e.to_string()))?;
    ensure_dir(&args.out)?;
    store::write_table(&data.table, &TablePaths::from_prefix(args.out.join(SIM_PREFIX)))?;
    store::write_verdicts(&data.verdicts, &args.out.join("verdicts.jsonl"))?;
    store::write_prompt_embeddings(&data.prompt_embeddings, &args.out.join("prompts.jsonl"))?;
    println!(
        "real rows: {}\ngenerated rows: {}\nverdicts: {}",
        data.real_rows(),
        data.generated_rows(),
        data.verdicts.len()
    );
    Ok(())
}

pub fn cmd_validate(args: &ValidateArgs) -> Result<(), Failure> {
    let table = store::read_table(&TablePaths::from_prefix(&args.embeddings))?;
    let mut report = model::validate_table(&table);
    if let Some(p) = &args.verdicts {
        let log = store::read_verdicts(p)?;
        report.violations.extend(model::validate_verdicts(&log, &table).violations);
    }
    if !report.is_clean() {
        return Err(Failure::input(violation_text(&report)));
    }
    println!("ok: {} rows, dim {}", table.len(), table.dim);
    Ok(())
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Failure::input(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::input(e.to_string()))
}

pub fn run(cli: &Cli) -> Result<(), Failure> {
    configure_threads()?;
    match &cli.command {
        Command::Metrics(a) => cmd_metrics(a),
        Command::Pareto(a) => cmd_pareto(a),
        Command::Plot(a) => cmd_plot(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Validate(a) => cmd_validate(a),
    }
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
