//! Command-line front end: each subcommand wraps one library operation,
//! prints a machine-readable JSON report to stdout (or `--out`), and keeps
//! human commentary on stderr. Exit codes: 0 success, 2 usage error, 1 data
//! error.

use anyhow::{anyhow, bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use g2kit::corpus_tools::{
    self, augment_none_pairs, build_prompt, clean_vg, corpus_stats, default_object_lexicon,
    default_relation_lexicon, graph_inventory, load_json_records, load_qa_file, load_vg_file,
    scene_graph_from_vg, Lexicon, PromptSpec, PromptTemplates, QaRecord, Task, VgImageRecord,
};
use g2kit::fusion_kernel::{grad_check_at, GradDims, DEFAULT_STEP};
use g2kit::nle_metrics::{
    evaluate_corpus, EvilConfig, ExplanationMetric, HashEmbedder, NleGold, NlePrediction,
};
use g2kit::sg_matching::{corpus_recall, MatchConfig, MatchMethod, Ranking, RecallPair};
use g2kit::sg_model::{load_graph_file, LoadedGraph, SceneGraphRecord};
use g2kit::sg_selection::{
    graph_token_spans, normalize_confidences, select_by_threshold, subgraph, token_weights,
    ConfidenceProvider, FileProvider, NormalizeMode, StubProvider,
};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "g2kit",
    version,
    about = "Scene-graph corpus preparation and evaluation toolkit",
    propagate_version = true
)]
struct Cli {
    /// Write the JSON report to this file instead of stdout.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse triplet-sequence text into scene-graph records.
    Parse(ParseArgs),
    /// Score predicted graphs against gold graphs with Recall@k.
    SggEval(SggEvalArgs),
    /// Keep each graph's confident core by cumulative-mass threshold.
    Select(SelectArgs),
    /// Emit per-token loss weights from triplet confidences.
    Weight(WeightArgs),
    /// Check the fusion block's analytic gradients against finite differences.
    FuseCheck(FuseCheckArgs),
    /// Score generated answer/explanation text against references.
    NleEval(NleEvalArgs),
    /// Lexicon statistics over question/answer/explanation text.
    Stats(StatsArgs),
    /// Rank region-graph relationships by box area and keep the largest.
    CleanVg(CleanVgArgs),
    /// Render prompt/label text for a task.
    Prompt(PromptArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(message) = configure_threads() {
        // A malformed environment knob is a usage problem, not a data one.
        Cli::command().error(ErrorKind::InvalidValue, message).exit();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

/// Honor `G2KIT_THREADS` before any parallel work starts.
fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("G2KIT_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("G2KIT_THREADS must be a positive integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| e.to_string())
}

fn run(cli: Cli) -> Result<()> {
    let out = cli.out.as_deref();
    match cli.command {
        Command::Parse(args) => cmd_parse(args, out),
        Command::SggEval(args) => cmd_sgg_eval(args, out),
        Command::Select(args) => cmd_select(args, out),
        Command::Weight(args) => cmd_weight(args, out),
        Command::FuseCheck(args) => cmd_fuse_check(args, out),
        Command::NleEval(args) => cmd_nle_eval(args, out),
        Command::Stats(args) => cmd_stats(args, out),
        Command::CleanVg(args) => cmd_clean_vg(args, out),
        Command::Prompt(args) => cmd_prompt(args, out),
    }
}

/// Report sink shared by every subcommand.
fn emit<T: Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value).context("serializing report")?;
    match out {
        Some(path) => std::fs::write(path, json + "\n")
            .with_context(|| format!("writing {}", path.display()))?,
        None => println!("{json}"),
    }
    Ok(())
}

fn usage_error(message: String) -> ! {
    Cli::command().error(ErrorKind::InvalidValue, message).exit();
}

/// Render flag enums in help text by their command-line spelling.
macro_rules! display_by_value_enum {
    ($($ty:ty),* $(,)?) => {$(
        impl std::fmt::Display for $ty {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                self.to_possible_value().expect("no skipped variants").get_name().fmt(f)
            }
        }
    )*};
}

display_by_value_enum!(MethodArg, RankingArg, ModeArg, NormArg, MetricArg, EmitArg, TaskArg);

// ---------------------------------------------------------------------------
// Flag value parsers
// ---------------------------------------------------------------------------

fn parse_unit_interval(raw: &str) -> Result<f64, String> {
    let v: f64 = raw.parse().map_err(|_| format!("{raw:?} is not a number"))?;
    if v.is_finite() && (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{raw} is outside [0, 1]"))
    }
}

fn parse_positive_f64(raw: &str) -> Result<f64, String> {
    let v: f64 = raw.parse().map_err(|_| format!("{raw:?} is not a number"))?;
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(format!("{raw} must be positive and finite"))
    }
}

fn parse_positive_usize(raw: &str) -> Result<usize, String> {
    let v: usize = raw.parse().map_err(|_| format!("{raw:?} is not a whole number"))?;
    if v > 0 {
        Ok(v)
    } else {
        Err("must be at least 1".to_string())
    }
}

// ---------------------------------------------------------------------------
// parse
// ---------------------------------------------------------------------------

#[derive(Args)]
struct ParseArgs {
    /// Graph file: `.sgl` sequence lines, or JSON records (array or lines).
    #[arg(long, value_name = "PATH")]
    input: PathBuf,
}

#[derive(Serialize)]
struct ParseReport {
    graphs: usize,
    warnings: usize,
    records: Vec<ParsedRecord>,
}

#[derive(Serialize)]
struct ParsedRecord {
    #[serde(flatten)]
    record: SceneGraphRecord,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    warnings: Vec<String>,
}

fn cmd_parse(args: ParseArgs, out: Option<&Path>) -> Result<()> {
    let loaded = load_graph_file(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))?;
    let mut total_warnings = 0;
    let records: Vec<ParsedRecord> = loaded
        .into_iter()
        .map(|g| {
            total_warnings += g.warnings.len();
            for w in &g.warnings {
                eprintln!("image {}: {w}", g.graph.image_id);
            }
            ParsedRecord {
                record: SceneGraphRecord::from_graph(&g.graph, g.confidences.as_deref()),
                warnings: g.warnings.iter().map(|w| w.to_string()).collect(),
            }
        })
        .collect();
    let report =
        ParseReport { graphs: records.len(), warnings: total_warnings, records };
    eprintln!("parsed {} graph(s), {} warning(s)", report.graphs, report.warnings);
    emit(out, &report)
}

// ---------------------------------------------------------------------------
// sgg-eval
// ---------------------------------------------------------------------------

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    /// Beam search over instance correspondences.
    Heuristic,
    /// Exhaustive correspondence search (guarded).
    Exact,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum RankingArg {
    /// Top-k by generation order.
    Generation,
    /// Top-k by per-triplet confidence, descending.
    Confidence,
}

#[derive(Args)]
struct SggEvalArgs {
    /// Predicted graphs.
    #[arg(long, value_name = "PATH")]
    pred: PathBuf,
    /// Gold graphs; ids must match the predictions one-to-one.
    #[arg(long, value_name = "PATH")]
    gold: PathBuf,
    /// Comma-separated recall cutoffs.
    #[arg(long, value_delimiter = ',', default_values_t = [20usize, 50, 100])]
    k: Vec<usize>,
    /// Beam width of the heuristic search.
    #[arg(long, default_value_t = 5, value_parser = parse_positive_usize)]
    branching: usize,
    #[arg(long, value_enum, default_value_t = MethodArg::Heuristic)]
    method: MethodArg,
    #[arg(long, value_enum, default_value_t = RankingArg::Generation)]
    ranking: RankingArg,
    /// Largest correspondence count the exact method may enumerate.
    #[arg(long, default_value_t = 1_000_000)]
    guard: u64,
}

fn load_graphs(path: &Path) -> Result<Vec<LoadedGraph>> {
    let loaded =
        load_graph_file(path).with_context(|| format!("reading {}", path.display()))?;
    for g in &loaded {
        for w in &g.warnings {
            eprintln!("image {}: {w}", g.graph.image_id);
        }
    }
    Ok(loaded)
}

fn cmd_sgg_eval(args: SggEvalArgs, out: Option<&Path>) -> Result<()> {
    if args.k.is_empty() {
        usage_error("--k needs at least one cutoff".into());
    }
    let preds = load_graphs(&args.pred)?;
    let golds = load_graphs(&args.gold)?;

    let mut gold_by_id: std::collections::BTreeMap<&str, &LoadedGraph> =
        golds.iter().map(|g| (g.graph.image_id.as_str(), g)).collect();
    if gold_by_id.len() != golds.len() {
        bail!("gold file repeats an image id");
    }
    let mut pairs = Vec::with_capacity(preds.len());
    for p in &preds {
        let id = p.graph.image_id.as_str();
        let gold = gold_by_id
            .remove(id)
            .ok_or_else(|| anyhow!("prediction {id}: no gold graph with this id"))?;
        if args.ranking == RankingArg::Confidence && p.confidences.is_none() {
            bail!("prediction {id}: confidence ranking needs per-triplet confidences");
        }
        pairs.push(RecallPair {
            gold: gold.graph.clone(),
            pred: p.graph.clone(),
            confidences: p.confidences.clone(),
        });
    }
    if let Some(id) = gold_by_id.keys().next() {
        bail!("gold {id}: no prediction with this id");
    }

    let cfg = MatchConfig {
        method: match args.method {
            MethodArg::Heuristic => MatchMethod::Heuristic { branching: args.branching },
            MethodArg::Exact => MatchMethod::Exact,
        },
        ranking: match args.ranking {
            RankingArg::Generation => Ranking::GenerationOrder,
            RankingArg::Confidence => Ranking::ConfidenceDesc,
        },
        guard_limit: args.guard,
    };
    let report = corpus_recall(&pairs, &args.k, &cfg)?;
    for (k, r) in &report.recall {
        eprintln!(
            "R@{k}: micro {:.4} macro {:.4} ({}/{} gold triplets)",
            r.micro, r.macro_, r.matched, r.gold
        );
    }
    emit(out, &report)
}

// ---------------------------------------------------------------------------
// select / weight
// ---------------------------------------------------------------------------

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    /// Smallest prefix of the ranked triplets reaching the mass threshold.
    Threshold,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum NormArg {
    /// Divide by the sum.
    Sum,
    /// Softmax over the scores.
    Softmax,
}

impl From<NormArg> for NormalizeMode {
    fn from(value: NormArg) -> Self {
        match value {
            NormArg::Sum => NormalizeMode::SumToOne,
            NormArg::Softmax => NormalizeMode::Softmax,
        }
    }
}

/// Where per-triplet confidences come from: a score file, scores inlined in
/// the graph records, or a seeded stub.
fn confidences_for(
    graph: &g2kit::sg_model::SceneGraph,
    inline: Option<&[f64]>,
    conf: Option<&FileProvider>,
    stub: Option<&StubProvider>,
) -> Result<Vec<f64>> {
    let id = &graph.image_id;
    if let Some(provider) = conf {
        return provider
            .confidences(graph)
            .with_context(|| format!("image {id}: confidence file"));
    }
    if let Some(provider) = stub {
        return Ok(provider.confidences(graph).expect("stub scores are total"));
    }
    inline
        .map(<[f64]>::to_vec)
        .ok_or_else(|| anyhow!("image {id}: records carry no confidences; pass --conf or --stub-seed"))
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long, value_enum, default_value_t = ModeArg::Threshold)]
    mode: ModeArg,
    /// Cumulative-mass threshold θ.
    #[arg(long, default_value_t = 0.8, value_parser = parse_unit_interval)]
    theta: f64,
    /// Graph records (confidences may be inlined).
    #[arg(long, value_name = "PATH")]
    graphs: PathBuf,
    /// JSON confidence file: {"image_id": [scores...]}.
    #[arg(long, value_name = "PATH")]
    conf: Option<PathBuf>,
    /// Deterministic stand-in confidences derived from this seed.
    #[arg(long, conflicts_with = "conf")]
    stub_seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = NormArg::Sum)]
    normalize: NormArg,
}

#[derive(Serialize)]
struct SelectedGraph {
    image_id: String,
    total: usize,
    /// Indices kept from the input graph, ascending.
    kept: Vec<usize>,
    mass: f64,
    record: SceneGraphRecord,
}

fn cmd_select(args: SelectArgs, out: Option<&Path>) -> Result<()> {
    let ModeArg::Threshold = args.mode;
    let graphs = load_graphs(&args.graphs)?;
    let conf = args.conf.as_deref().map(FileProvider::from_path).transpose()?;
    let stub = args.stub_seed.map(|seed| StubProvider { seed });

    let mut report = Vec::with_capacity(graphs.len());
    for g in &graphs {
        let id = &g.graph.image_id;
        let raw = confidences_for(&g.graph, g.confidences.as_deref(), conf.as_ref(), stub.as_ref())?;
        let normalized = normalize_confidences(&raw, args.normalize.into())
            .with_context(|| format!("image {id}"))?;
        let kept = select_by_threshold(&normalized, args.theta);
        let mass: f64 = kept.iter().map(|&i| normalized[i]).sum();
        let sub = subgraph(&g.graph, &kept);
        let sub_conf: Vec<f64> = kept.iter().map(|&i| raw[i]).collect();
        eprintln!(
            "image {id}: kept {}/{} triplet(s) at θ={} (mass {mass:.4})",
            kept.len(),
            g.graph.triplets.len(),
            args.theta
        );
        report.push(SelectedGraph {
            image_id: id.clone(),
            total: g.graph.triplets.len(),
            kept,
            mass,
            record: SceneGraphRecord::from_graph(&sub, Some(&sub_conf)),
        });
    }
    emit(out, &report)
}

#[derive(Args)]
struct WeightArgs {
    /// Graph records (confidences may be inlined).
    #[arg(long, value_name = "PATH")]
    graphs: PathBuf,
    /// JSON confidence file: {"image_id": [scores...]}.
    #[arg(long, value_name = "PATH")]
    conf: Option<PathBuf>,
    /// Deterministic stand-in confidences derived from this seed.
    #[arg(long, conflicts_with = "conf")]
    stub_seed: Option<u64>,
    /// Token length of the full training sequence (default: the graph span).
    #[arg(long)]
    seq_len: Option<usize>,
}

#[derive(Serialize)]
struct WeightedGraph {
    image_id: String,
    seq_len: usize,
    spans: Vec<(usize, usize)>,
    weights: Vec<f64>,
}

fn cmd_weight(args: WeightArgs, out: Option<&Path>) -> Result<()> {
    let graphs = load_graphs(&args.graphs)?;
    let conf = args.conf.as_deref().map(FileProvider::from_path).transpose()?;
    let stub = args.stub_seed.map(|seed| StubProvider { seed });

    let mut report = Vec::with_capacity(graphs.len());
    for g in &graphs {
        let id = &g.graph.image_id;
        let raw = confidences_for(&g.graph, g.confidences.as_deref(), conf.as_ref(), stub.as_ref())?;
        let spans = graph_token_spans(g.graph.triplets.len());
        let seq_len = args.seq_len.unwrap_or(3 * g.graph.triplets.len());
        let weights = token_weights(seq_len, &spans, &raw)
            .with_context(|| format!("image {id}"))?;
        eprintln!("image {id}: {} token weight(s) over {} span(s)", weights.len(), spans.len());
        report.push(WeightedGraph { image_id: id.clone(), seq_len, spans, weights });
    }
    emit(out, &report)
}

// ---------------------------------------------------------------------------
// fuse-check
// ---------------------------------------------------------------------------

#[derive(Args)]
struct FuseCheckArgs {
    /// Text-stream width d.
    #[arg(long, default_value_t = 5, value_parser = parse_positive_usize)]
    dim: usize,
    /// Visual-stream width (default: dim + 2).
    #[arg(long, value_parser = parse_positive_usize)]
    dim_v: Option<usize>,
    /// Text sequence length.
    #[arg(long, default_value_t = 3, value_parser = parse_positive_usize)]
    len_t: usize,
    /// Visual sequence length.
    #[arg(long, default_value_t = 4, value_parser = parse_positive_usize)]
    len_v: usize,
    /// Seed for parameters and inputs.
    #[arg(long)]
    seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = DEFAULT_STEP, value_parser = parse_positive_f64)]
    h: f64,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-4, value_parser = parse_positive_f64)]
    tolerance: f64,
    /// Entries checked per gradient block (0 = every entry).
    #[arg(long, default_value_t = 0)]
    samples: usize,
}

fn cmd_fuse_check(args: FuseCheckArgs, out: Option<&Path>) -> Result<()> {
    let dims = GradDims {
        l_t: args.len_t,
        l_v: args.len_v,
        d: args.dim,
        d_v: args.dim_v.unwrap_or(args.dim + 2),
    };
    let report = grad_check_at(dims, args.seed, args.tolerance, args.samples, args.h)?;
    eprintln!(
        "max relative error {:.3e} in {} ({} entries checked)",
        report.max_rel_error, report.worst_block, report.checks
    );
    let passed = report.passed;
    emit(out, &report)?;
    if !passed {
        bail!("gradient check failed: {:.3e} ≥ {:.1e}", report.max_rel_error, report.tolerance);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// nle-eval
// ---------------------------------------------------------------------------

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum MetricArg {
    RougeL,
    Meteor,
    CiderD,
    Bertscore,
}

impl From<MetricArg> for ExplanationMetric {
    fn from(value: MetricArg) -> Self {
        match value {
            MetricArg::RougeL => ExplanationMetric::RougeL,
            MetricArg::Meteor => ExplanationMetric::Meteor,
            MetricArg::CiderD => ExplanationMetric::CiderD,
            MetricArg::Bertscore => ExplanationMetric::BertScore,
        }
    }
}

#[derive(Args)]
struct NleEvalArgs {
    /// Predictions: {"id", "text"} records.
    #[arg(long, value_name = "PATH")]
    pred: PathBuf,
    /// References: {"id", "answer", "explanations"} records.
    #[arg(long, value_name = "PATH")]
    gold: PathBuf,
    /// Answer-similarity threshold for counting a pair as correct.
    #[arg(long, default_value_t = 0.92, value_parser = parse_unit_interval)]
    filter: f64,
    /// Comma-separated explanation metrics.
    #[arg(
        long,
        value_delimiter = ',',
        default_values_t = [MetricArg::RougeL, MetricArg::Meteor, MetricArg::CiderD, MetricArg::Bertscore]
    )]
    metrics: Vec<MetricArg>,
    /// Length-penalty width of the consensus metric.
    #[arg(long, default_value_t = 6.0, value_parser = parse_positive_f64)]
    cider_sigma: f64,
    /// Recall bias of the longest-common-subsequence metric.
    #[arg(long, default_value_t = 1.2, value_parser = parse_positive_f64)]
    rouge_beta: f64,
}

fn cmd_nle_eval(args: NleEvalArgs, out: Option<&Path>) -> Result<()> {
    if args.metrics.is_empty() {
        usage_error("--metrics needs at least one metric".into());
    }
    let predictions: Vec<NlePrediction> = load_json_records(&args.pred)
        .with_context(|| format!("reading {}", args.pred.display()))?;
    let golds: Vec<NleGold> = load_json_records(&args.gold)
        .with_context(|| format!("reading {}", args.gold.display()))?;
    let mut metrics: Vec<ExplanationMetric> =
        args.metrics.iter().map(|&m| m.into()).collect();
    metrics.dedup();
    let cfg = EvilConfig {
        answer_filter: args.filter,
        metrics,
        cider_sigma: args.cider_sigma,
        rouge_beta: args.rouge_beta,
        ..EvilConfig::default()
    };
    let report = evaluate_corpus(&predictions, &golds, &cfg, &HashEmbedder::default())?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    eprintln!(
        "S_T {:.4}  S_E {:.4}  S_O {:.4}  ({}/{} answers correct)",
        report.s_t, report.s_e, report.s_o, report.correct, report.pairs
    );
    emit(out, &report)
}

// ---------------------------------------------------------------------------
// stats
// ---------------------------------------------------------------------------

#[derive(Args)]
struct StatsArgs {
    /// Question/answer/explanation records.
    #[arg(long, value_name = "PATH")]
    qa: PathBuf,
    /// Object phrase file overriding the built-in lexicon.
    #[arg(long, value_name = "PATH")]
    objects: Option<PathBuf>,
    /// Relation phrase file overriding the built-in lexicon.
    #[arg(long, value_name = "PATH")]
    relations: Option<PathBuf>,
}

fn load_lexicon(path: Option<&Path>, default: fn() -> Lexicon) -> Result<Lexicon> {
    match path {
        None => Ok(default()),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            Ok(Lexicon::from_text(&text)?)
        }
    }
}

fn cmd_stats(args: StatsArgs, out: Option<&Path>) -> Result<()> {
    let records = load_qa_file(&args.qa)
        .with_context(|| format!("reading {}", args.qa.display()))?;
    let objects = load_lexicon(args.objects.as_deref(), default_object_lexicon)?;
    let relations = load_lexicon(args.relations.as_deref(), default_relation_lexicon)?;
    let stats = corpus_stats(&records, &objects, &relations)?;
    for (name, f) in
        [("question", &stats.question), ("answer", &stats.answer), ("explanation", &stats.explanation)]
    {
        eprintln!(
            "{name:<12} objects/rec {:.2}  relations/rec {:.2}  both present {:.1}%",
            f.mean_objects,
            f.mean_relations,
            100.0 * f.proportion
        );
    }
    emit(out, &stats)
}

// ---------------------------------------------------------------------------
// clean-vg
// ---------------------------------------------------------------------------

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum EmitArg {
    /// Scene-graph records built from the kept relationships.
    Graphs,
    /// The input records with relationships filtered.
    Records,
}

#[derive(Args)]
struct CleanVgArgs {
    /// Region-graph records (JSON array or lines).
    #[arg(long, value_name = "PATH")]
    input: PathBuf,
    /// Relationships kept per image.
    #[arg(long, default_value_t = corpus_tools::DEFAULT_TOP)]
    top: usize,
    #[arg(long, value_enum, default_value_t = EmitArg::Graphs)]
    emit: EmitArg,
    /// Append this many no-relation pairs per graph (graphs output only).
    #[arg(long, requires = "seed")]
    none_pairs: Option<usize>,
    /// Seed for the no-relation pair draw.
    #[arg(long)]
    seed: Option<u64>,
}

fn cmd_clean_vg(args: CleanVgArgs, out: Option<&Path>) -> Result<()> {
    if args.none_pairs.is_some() && args.emit == EmitArg::Records {
        usage_error("--none-pairs needs --emit graphs".into());
    }
    let records = load_vg_file(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))?;

    match args.emit {
        EmitArg::Records => {
            let mut cleaned: Vec<VgImageRecord> = Vec::with_capacity(records.len());
            for rec in &records {
                let kept = clean_vg(rec, args.top)?;
                eprintln!(
                    "image {}: kept {}/{} relationship(s)",
                    rec.image_id,
                    kept.len(),
                    rec.relationships.len()
                );
                cleaned.push(VgImageRecord { relationships: kept, ..rec.clone() });
            }
            emit(out, &cleaned)
        }
        EmitArg::Graphs => {
            let mut graphs: Vec<SceneGraphRecord> = Vec::with_capacity(records.len());
            for rec in &records {
                let kept = clean_vg(rec, args.top)?;
                let (mut graph, issues) = scene_graph_from_vg(rec, &kept)?;
                for issue in &issues {
                    eprintln!("image {}: {issue}", rec.image_id);
                }
                if let Some(count) = args.none_pairs {
                    let seed = args.seed.expect("clap enforces --seed with --none-pairs");
                    let inventory = graph_inventory(&graph);
                    graph = augment_none_pairs(&graph, &inventory, count, seed);
                }
                eprintln!(
                    "image {}: {} relationship(s) in, {} triplet(s) out",
                    rec.image_id,
                    rec.relationships.len(),
                    graph.triplets.len()
                );
                graphs.push(SceneGraphRecord::from_graph(&graph, None));
            }
            emit(out, &graphs)
        }
    }
}

// ---------------------------------------------------------------------------
// prompt
// ---------------------------------------------------------------------------

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum TaskArg {
    /// Object pairs in, scene graph out.
    Sgg,
    /// Question in, combined answer-plus-explanation out.
    AnswerExplain,
    /// Question in, answer out.
    Answer,
    /// Question and answer in, explanation out.
    Explain,
}

impl From<TaskArg> for Task {
    fn from(value: TaskArg) -> Self {
        match value {
            TaskArg::Sgg => Task::Sgg,
            TaskArg::AnswerExplain => Task::AnswerExplain,
            TaskArg::Answer => Task::Answer,
            TaskArg::Explain => Task::Explain,
        }
    }
}

#[derive(Args)]
struct PromptArgs {
    #[arg(long, value_enum)]
    task: TaskArg,
    /// Graph records keyed by image id.
    #[arg(long, value_name = "PATH")]
    graphs: PathBuf,
    /// Question/answer/explanation records (QA tasks only).
    #[arg(long, value_name = "PATH")]
    qa: Option<PathBuf>,
    /// Triplets a serialized graph may show.
    #[arg(long, default_value_t = corpus_tools::DEFAULT_TOP)]
    sigma: usize,
}

#[derive(Serialize)]
struct RenderedPrompt {
    task: Task,
    #[serde(skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    image_id: String,
    prompt: String,
    label: String,
}

fn cmd_prompt(args: PromptArgs, out: Option<&Path>) -> Result<()> {
    let task: Task = args.task.into();
    if task != Task::Sgg && args.qa.is_none() {
        usage_error(format!("--task {task} needs --qa"));
    }
    let graphs = load_graphs(&args.graphs)?;
    let spec = PromptSpec {
        task,
        max_triplets: args.sigma,
        templates: PromptTemplates::default(),
    };

    let mut rendered = Vec::new();
    if task == Task::Sgg {
        for g in &graphs {
            let (prompt, label) = build_prompt(&spec, &g.graph, None)?;
            rendered.push(RenderedPrompt {
                task,
                id: None,
                image_id: g.graph.image_id.clone(),
                prompt,
                label,
            });
        }
    } else {
        let qa_path = args.qa.as_deref().expect("checked above");
        let qa_records: Vec<QaRecord> =
            load_qa_file(qa_path).with_context(|| format!("reading {}", qa_path.display()))?;
        let by_id: std::collections::BTreeMap<&str, &LoadedGraph> =
            graphs.iter().map(|g| (g.graph.image_id.as_str(), g)).collect();
        for qa in &qa_records {
            let graph = by_id.get(qa.image_id.as_str()).ok_or_else(|| {
                anyhow!("record {}: no graph for image {}", qa.id, qa.image_id)
            })?;
            let (prompt, label) = build_prompt(&spec, &graph.graph, Some(qa))
                .with_context(|| format!("record {}", qa.id))?;
            rendered.push(RenderedPrompt {
                task,
                id: Some(qa.id.clone()),
                image_id: qa.image_id.clone(),
                prompt,
                label,
            });
        }
    }
    eprintln!("rendered {} prompt/label pair(s)", rendered.len());
    emit(out, &rendered)
}
