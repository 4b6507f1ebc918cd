//! `mother`: simulate model populations, recover their heritage graphs and
//! score the result.

mod population;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mother_core::clustering::{self, ClusterAssignment, ClusterMode};
use mother_core::matrices::{self, matrix_to_csv, CostMatrices, Matrix};
use mother_core::metrics::{DirectionalStatistic, MetricConfig, DEFAULT_SCORE_PATTERN};
use mother_core::recovery::{self, GraphFormat, PopulationSummary, RecoveredGraph};
use mother_core::simgen::{self, default_lora_layers, vit_architecture, Preset};
use mother_core::{
    DistanceMetric, Error, LayerFilter, ModelNode, NodeSet, RecoveryConfig, RootPolicy, Stage,
    TOOL_VERSION,
};
use serde::Serialize;

use population::{emit, find_manifest, load_models, recorded_patterns, resolve_stages};

#[derive(Parser, Debug, Serialize)]
#[command(
    name = "mother",
    version,
    about = "Recover the heritage graph of model checkpoints from their weights"
)]
struct Cli {
    /// Worker threads for distance and matrix computation (default: all cores).
    #[arg(long, global = true, env = "MOTHER_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Generate a population with known ground truth.
    Simulate(SimulateArgs),
    /// Recover the heritage graph of a population.
    Recover(RecoverArgs),
    /// Score a recovered graph against a manifest.
    Evaluate(EvaluateArgs),
    /// Write a pairwise matrix (D, K, T or M) of a population.
    Distances(DistancesArgs),
    /// Cluster a population into trees.
    Cluster(ClusterArgs),
    /// Convert a recovered graph to another format.
    Export(ExportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    Json,
    Dot,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum MatrixKind {
    D,
    K,
    T,
    M,
}

#[derive(Args, Debug, Serialize)]
struct SimulateArgs {
    /// ft, lora-f, lora-v, mixed or deep.
    #[arg(long, default_value = "ft", env = "MOTHER_PRESET")]
    preset: Preset,
    #[arg(long, default_value_t = 0, env = "MOTHER_SEED")]
    seed: u64,
    /// Output population directory.
    #[arg(long)]
    out: PathBuf,
    /// Training stage of every fine-tuning step.
    #[arg(long)]
    stage: Option<Stage>,
    #[arg(long)]
    trees: Option<usize>,
    /// Levels per tree, including the root.
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    branching: Option<usize>,
    /// Hidden width of the generated architecture (default 128).
    #[arg(long)]
    width: Option<usize>,
    /// Transformer blocks of the generated architecture (default 5).
    #[arg(long)]
    blocks: Option<usize>,
    /// Comma-separated LoRA ranks to sample from.
    #[arg(long, value_delimiter = ',')]
    lora_ranks: Option<Vec<usize>>,
}

#[derive(Args, Debug, Clone, Serialize)]
struct MetricArgs {
    #[arg(long, default_value = "ft", env = "MOTHER_METRIC")]
    metric: DistanceMetric,
    /// Relative singular-value threshold of the rank distance.
    #[arg(long, default_value_t = mother_core::metrics::DEFAULT_EPSILON_REL, env = "MOTHER_EPSILON_REL")]
    epsilon_rel: f64,
    /// Regex selecting the layers scored by the directional statistic.
    /// Defaults to the population's recorded pattern, else "dense".
    #[arg(long, env = "MOTHER_LAYER_FILTER")]
    layer_filter: Option<String>,
    /// Regex selecting the layers compared by distances ("" = all).
    /// Defaults to the population's recorded pattern, else all layers.
    #[arg(long, env = "MOTHER_DISTANCE_FILTER")]
    distance_filter: Option<String>,
    /// Statistic for the direction matrix K.
    #[arg(long, default_value = "kurtosis", env = "MOTHER_STATISTIC")]
    statistic: DirectionalStatistic,
}

impl MetricArgs {
    fn config(&self, population: &Path) -> Result<MetricConfig, CliError> {
        let recorded = recorded_patterns(population);
        let filter = |p: &str| {
            if p.is_empty() {
                Ok(LayerFilter::all())
            } else {
                LayerFilter::pattern(p)
            }
        };
        let score = self
            .layer_filter
            .clone()
            .or(recorded.score)
            .unwrap_or_else(|| DEFAULT_SCORE_PATTERN.to_string());
        let distance = self.distance_filter.clone().or(recorded.distance).unwrap_or_default();
        let cfg = MetricConfig {
            epsilon_rel: self.epsilon_rel,
            score_filter: filter(&score).map_err(usage)?,
            distance_filter: filter(&distance).map_err(usage)?,
            directional_statistic: self.statistic,
        };
        cfg.validate().map_err(usage)?;
        Ok(cfg)
    }
}

#[derive(Args, Debug, Clone, Serialize)]
struct StageArgs {
    /// Ground-truth manifest (default: <population>/manifest.json).
    #[arg(long, env = "MOTHER_MANIFEST")]
    manifest: Option<PathBuf>,
    /// JSON object mapping model id to "generalization" or "specialization";
    /// takes precedence over the manifest.
    #[arg(long, env = "MOTHER_STAGE_MAP")]
    stage_map: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize)]
struct ClusterCountArgs {
    /// Number of trees in the population.
    #[arg(long, short = 'k', env = "MOTHER_CLUSTERS", required_unless_present = "auto_k")]
    clusters: Option<usize>,
    /// Pick the cluster count at the largest relative gap between
    /// successive single-linkage merge heights.
    #[arg(long, conflicts_with = "clusters")]
    auto_k: bool,
    /// full, concatenated or layer:<name>.
    #[arg(long, default_value = "full", value_parser = parse_cluster_mode, env = "MOTHER_CLUSTER_MODE")]
    cluster_mode: ClusterMode,
}

#[derive(Args, Debug, Serialize)]
struct RecoverArgs {
    population: PathBuf,
    #[command(flatten)]
    metric: MetricArgs,
    #[command(flatten)]
    stages: StageArgs,
    #[command(flatten)]
    count: ClusterCountArgs,
    /// Weight of the direction/stage penalty relative to the mean distance.
    #[arg(long, default_value_t = matrices::DEFAULT_C, env = "MOTHER_C")]
    c: f64,
    #[arg(long, default_value = "all", env = "MOTHER_ROOT_POLICY")]
    root_policy: RootPolicy,
    #[arg(long, value_enum, default_value = "json", env = "MOTHER_FORMAT")]
    format: Format,
    /// Output file (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct EvaluateArgs {
    /// Recovered graph (JSON).
    graph: PathBuf,
    #[arg(long, env = "MOTHER_MANIFEST")]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value = "json", env = "MOTHER_FORMAT")]
    format: Format,
    /// JSON report file; a table is printed to stdout either way.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct DistancesArgs {
    population: PathBuf,
    #[command(flatten)]
    metric: MetricArgs,
    #[command(flatten)]
    stages: StageArgs,
    #[arg(long, value_enum, default_value = "d")]
    matrix: MatrixKind,
    #[arg(long, default_value_t = matrices::DEFAULT_C, env = "MOTHER_C")]
    c: f64,
    #[arg(long, value_enum, default_value = "csv", env = "MOTHER_FORMAT")]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct ClusterArgs {
    population: PathBuf,
    #[command(flatten)]
    metric: MetricArgs,
    #[command(flatten)]
    count: ClusterCountArgs,
    #[arg(long, value_enum, default_value = "json", env = "MOTHER_FORMAT")]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct ExportArgs {
    /// Recovered graph (JSON).
    graph: PathBuf,
    #[arg(long, value_enum, default_value = "dot", env = "MOTHER_FORMAT")]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_cluster_mode(s: &str) -> Result<ClusterMode, String> {
    match s {
        "full" => Ok(ClusterMode::Full),
        "concatenated" => Ok(ClusterMode::Concatenated),
        _ => match s.strip_prefix("layer:") {
            Some(name) if !name.is_empty() => Ok(ClusterMode::SingleLayer(name.to_string())),
            _ => Err(format!("expected full, concatenated or layer:<name>, got `{s}`")),
        },
    }
}

/// Snapshot of the invocation written next to every output.
#[derive(Serialize)]
struct RunConfig<'a> {
    tool_version: &'static str,
    threads: Option<usize>,
    command: &'a Command,
}

#[derive(Debug)]
enum CliError {
    /// Bad flags or missing required input (exit 2).
    Usage(String),
    /// Bad data or a failed computation (exit 1).
    Domain(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Domain(e)
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Domain(Error::Io { source, .. })
                if source.kind() == std::io::ErrorKind::NotFound =>
            {
                2
            }
            CliError::Domain(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Domain(e) => {
                write!(f, "{e}")?;
                let mut src = std::error::Error::source(e);
                while let Some(s) = src {
                    write!(f, ": {s}")?;
                    src = s.source();
                }
                Ok(())
            }
        }
    }
}

fn simulate(a: &SimulateArgs) -> Result<(), CliError> {
    let mut cfg = a.preset.config(a.seed);
    if let Some(s) = a.stage {
        cfg.stage = s;
    }
    if let Some(n) = a.trees {
        cfg.n_trees = n;
    }
    if let Some(n) = a.levels {
        cfg.levels = n;
    }
    if let Some(n) = a.branching {
        cfg.branching = n;
    }
    if a.width.is_some() || a.blocks.is_some() {
        cfg.architecture = vit_architecture(a.width.unwrap_or(128), a.blocks.unwrap_or(5), 4);
        cfg.lora_layers = default_lora_layers(&cfg.architecture);
    }
    if let Some(r) = &a.lora_ranks {
        cfg.lora_ranks = r.clone();
    }
    cfg.validate().map_err(usage)?;
    let (models, manifest) = simgen::generate_graph(&cfg)?;
    let config = serde_json::json!({
        "tool_version": TOOL_VERSION,
        "preset": a.preset.as_str(),
        "simulation": cfg,
    });
    simgen::save_population(&a.out, &models, &manifest, &config)?;
    log::info!("wrote {} models to {}", models.len(), a.out.display());
    eprintln!("wrote {} models to {}", models.len(), a.out.display());
    Ok(())
}

/// Loads a population and attaches stages.
fn node_set(
    dir: &Path,
    metric: &MetricArgs,
    stages: &StageArgs,
) -> Result<(NodeSet, Option<mother_core::GraphManifest>), CliError> {
    let mc = metric.config(dir)?;
    let manifest = find_manifest(Some(dir), stages.manifest.as_deref())?;
    let models = load_models(dir)?;
    let ids: Vec<String> = models.iter().map(|m| m.model_id().to_string()).collect();
    let st = resolve_stages(&ids, manifest.as_ref(), stages.stage_map.as_deref())?;
    let nodes = models
        .into_iter()
        .zip(st)
        .map(|(m, s)| ModelNode::new(m, s))
        .collect();
    Ok((NodeSet::new(nodes, metric.metric, mc)?, manifest))
}

fn cluster_count(count: &ClusterCountArgs, d: &Matrix) -> Result<usize, CliError> {
    match count.clusters {
        Some(0) => Err(usage("--clusters must be ≥ 1")),
        Some(k) if k > d.len() => Err(usage(format!(
            "--clusters {k} exceeds the population size {}",
            d.len()
        ))),
        Some(k) => Ok(k),
        None => {
            let k = clustering::suggest_k(d);
            eprintln!("auto-k chose {k} clusters");
            Ok(k)
        }
    }
}

fn recover(a: &RecoverArgs, snapshot: &RunConfig) -> Result<(), CliError> {
    let fmt = match a.format {
        Format::Json => GraphFormat::Json,
        Format::Dot => GraphFormat::Dot,
        Format::Csv => return Err(usage("recover writes json or dot")),
    };
    if !(a.c >= 0.0 && a.c.is_finite()) {
        return Err(usage(format!("--c must be finite and ≥ 0, got {}", a.c)));
    }
    let (s, _) = node_set(&a.population, &a.metric, &a.stages)?;
    let cfg = RecoveryConfig {
        metric: a.metric.metric,
        c: a.c,
        metric_config: s.metric_config.clone(),
        cluster_mode: a.count.cluster_mode.clone(),
        root_policy: a.root_policy,
    };
    let summary = PopulationSummary::of(&s, &cfg)?;
    let k = cluster_count(&a.count, &summary.cluster_distances)?;
    let g = recovery::recover_summarized(&summary, Some(&s), k, &cfg)?;
    emit(a.out.as_deref(), &render_graph(&g, fmt)?, snapshot)
}

fn render_graph(g: &RecoveredGraph, fmt: GraphFormat) -> Result<String, CliError> {
    Ok(match fmt {
        GraphFormat::Json => g.to_json()?,
        GraphFormat::Dot => g.to_dot(),
    })
}

fn read_graph(path: &Path) -> Result<RecoveredGraph, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RecoveredGraph::from_json(&text).map_err(|e| {
        Error::InvalidInput(format!("recovered graph {}: {e}", path.display())).into()
    })
}

fn evaluate(a: &EvaluateArgs, snapshot: &RunConfig) -> Result<(), CliError> {
    if a.format != Format::Json {
        return Err(usage("evaluate writes json reports"));
    }
    let g = read_graph(&a.graph)?;
    let manifest = mother_core::load_manifest(&a.manifest)?;
    let report = recovery::evaluate(&g, &manifest)?;
    print!("{}", report.to_table());
    if let Some(out) = &a.out {
        let body = serde_json::json!({
            "report": report,
            "graph_provenance": g.provenance,
            "config": snapshot,
        });
        let text = serde_json::to_string_pretty(&body).map_err(Error::from)?;
        emit(Some(out), &text, snapshot)?;
    }
    Ok(())
}

fn distances(a: &DistancesArgs, snapshot: &RunConfig) -> Result<(), CliError> {
    if a.format == Format::Dot {
        return Err(usage("distances writes csv or json"));
    }
    let needs_stages = matches!(a.matrix, MatrixKind::T | MatrixKind::M);
    let (s, ids) = if needs_stages {
        let (s, _) = node_set(&a.population, &a.metric, &a.stages)?;
        let ids = s.ids();
        (s, ids)
    } else {
        // D and K do not depend on stages; label everything alike.
        let mc = a.metric.config(&a.population)?;
        let models = load_models(&a.population)?;
        let nodes: Vec<ModelNode> = models
            .into_iter()
            .map(|m| ModelNode::new(m, Stage::Specialization))
            .collect();
        let s = NodeSet::new(nodes, a.metric.metric, mc)?;
        let ids = s.ids();
        (s, ids)
    };
    let to_f64 = |b: matrices::BinaryMatrix| -> Matrix {
        b.into_iter()
            .map(|r| r.into_iter().map(f64::from).collect())
            .collect()
    };
    let m: Matrix = match a.matrix {
        MatrixKind::D => matrices::build_distance_matrix(&s)?,
        MatrixKind::K => to_f64(matrices::build_direction_matrix(&s)?),
        MatrixKind::T => to_f64(matrices::build_stage_matrix(&s)),
        MatrixKind::M => CostMatrices::build(&s, a.c)?.m,
    };
    let text = match a.format {
        Format::Csv => matrix_to_csv(&ids, &m),
        _ => {
            // JSON has no infinity; the diagonal is written as null.
            let rows: Vec<Vec<Option<f64>>> = m
                .iter()
                .map(|r| r.iter().map(|&v| v.is_finite().then_some(v)).collect())
                .collect();
            serde_json::to_string_pretty(&serde_json::json!({
                "ids": ids,
                "matrix": rows,
                "config": snapshot,
            }))
            .map_err(Error::from)?
        }
    };
    emit(a.out.as_deref(), &text, snapshot)
}

fn cluster(a: &ClusterArgs, snapshot: &RunConfig) -> Result<(), CliError> {
    let mc = a.metric.config(&a.population)?;
    let models = load_models(&a.population)?;
    let nodes = models
        .into_iter()
        .map(|m| ModelNode::new(m, Stage::Specialization))
        .collect();
    let s = NodeSet::new(nodes, a.metric.metric, mc)?;
    let ids = s.ids();
    let assignment = if s.len() == 1 {
        ClusterAssignment {
            labels: vec![0],
            k: 1,
        }
    } else {
        let d = clustering::clustering_distances(&s, &a.count.cluster_mode)?;
        let k = cluster_count(&a.count, &d)?;
        clustering::single_linkage(&d, k)?
    };
    let text = match a.format {
        Format::Csv => {
            let mut t = String::from("model_id,cluster\n");
            for (id, l) in ids.iter().zip(&assignment.labels) {
                t.push_str(&format!("{id},{l}\n"));
            }
            t
        }
        Format::Json => serde_json::to_string_pretty(&serde_json::json!({
            "k": assignment.k,
            "ids": ids,
            "labels": assignment.labels,
            "config": snapshot,
        }))
        .map_err(Error::from)?,
        Format::Dot => return Err(usage("cluster writes json or csv")),
    };
    emit(a.out.as_deref(), &text, snapshot)
}

fn export(a: &ExportArgs, snapshot: &RunConfig) -> Result<(), CliError> {
    let fmt = match a.format {
        Format::Json => GraphFormat::Json,
        Format::Dot => GraphFormat::Dot,
        Format::Csv => return Err(usage("export writes dot or json")),
    };
    let g = read_graph(&a.graph)?;
    emit(a.out.as_deref(), &render_graph(&g, fmt)?, snapshot)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be ≥ 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(usage)?;
    }
    let snapshot = RunConfig {
        tool_version: TOOL_VERSION,
        threads: cli.threads,
        command: &cli.command,
    };
    match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Recover(a) => recover(a, &snapshot),
        Command::Evaluate(a) => evaluate(a, &snapshot),
        Command::Distances(a) => distances(a, &snapshot),
        Command::Cluster(a) => cluster(a, &snapshot),
        Command::Export(a) => export(a, &snapshot),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
