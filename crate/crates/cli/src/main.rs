//! Command-line front door: every pipeline stage as a subcommand, for
//! scripting and reproduction.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/config error, 3 annotator
//! backend error. With `--json`, each command prints one machine-readable
//! JSON line as its final stdout output. The LLM API key is env-only and
//! never appears in flags or logs.

use clap::{Args, Parser, Subcommand};
use kgalign::annotate::{
    annotate_batch, AnnotateError, AnnotatorBackend, Budget, LabelCache, LlmBackend, LlmConfig,
    NoisyOracleBackend, OracleBackend,
};
use kgalign::kg::{load_openea, write_openea, EntityId, KgOptions, KgPair};
use kgalign::matcher::{evaluate, evaluate_confident, train, MatcherConfig};
use kgalign::pipeline::{
    ablate, parse_config_str, run, synth_pair, BackendChoice, DataSource, PipelineError, RunConfig,
    RunReport, SynthSpec, Variant,
};
use kgalign::reasoning::AlignmentState;
use kgalign::refine::{refine, PseudoLabelSet, RefinerConfig};
use kgalign::select::{aggregate, neighbor_uncertainty, relational_uncertainty, select, UrWeight};
use std::collections::BTreeSet;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_BACKEND: u8 = 3;

#[derive(Parser)]
#[command(
    name = "kgalign",
    version,
    about = "Entity alignment for knowledge graph pairs under an annotation budget"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full iterative alignment pipeline.
    Run(RunArgs),
    /// Run the pipeline with one component replaced.
    Ablate(AblateArgs),
    /// Generate a synthetic OpenEA-format benchmark directory.
    Synth(SynthArgs),
    /// Refine a pseudo-label file against a dataset.
    Refine(RefineArgs),
    /// Score source entities by uncertainty and pick the top ones.
    Select(SelectArgs),
    /// Annotate selected source entities with a backend.
    Annotate(AnnotateArgs),
    /// Train a matcher on labels and report Hit@k / MRR.
    Eval(EvalArgs),
    /// Show dataset statistics.
    Inspect(InspectArgs),
}

#[derive(Args, Clone)]
struct PipelineFlags {
    /// Config file of `key = value` lines; individual flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// OpenEA-format dataset directory. Without it a synthetic pair is used.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Synthetic pair: entity count [default: 500]
    #[arg(long)]
    synth_entities: Option<usize>,
    /// Synthetic pair: relation count [default: 10]
    #[arg(long)]
    synth_relations: Option<usize>,
    /// Synthetic pair: mean total degree [default: 8]
    #[arg(long)]
    synth_mean_degree: Option<f64>,
    /// Synthetic pair: target edge dropout [default: 0.1]
    #[arg(long)]
    synth_dropout: Option<f64>,
    /// Synthetic pair: perturbed-name fraction [default: 0.1]
    #[arg(long)]
    synth_name_noise: Option<f64>,
    /// Annotator backend: oracle | noisy | llm [default: oracle]
    #[arg(long)]
    backend: Option<String>,
    /// Noisy oracle truth probability [default: 0.6]
    #[arg(long)]
    p_true: Option<f64>,
    /// Query budget as a fraction of |E| [default: 0.1]
    #[arg(long)]
    budget: Option<f64>,
    /// Active-selection iterations n [default: 3]
    #[arg(long)]
    iterations: Option<usize>,
    /// Candidate-filtering cutoff k [default: 20]
    #[arg(long)]
    k: Option<usize>,
    /// Run seed; all randomness derives from it [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Refiner initialization probability delta0 [default: 0.5]
    #[arg(long)]
    delta0: Option<f64>,
    /// Refiner elevation threshold delta1 [default: 0.9]
    #[arg(long)]
    delta1: Option<f64>,
    /// Label-refinement iterations n_lr [default: 10]
    #[arg(long)]
    n_lr: Option<usize>,
    /// Sparse-probability pruning threshold [default: 0.0001]
    #[arg(long)]
    theta_min: Option<f64>,
    /// Include inferred pairs above delta1 in refined sets [default: true]
    #[arg(long)]
    augment_inferred: Option<bool>,
    /// Admit seeds at exactly delta0 in the first refinement pass [default: true]
    #[arg(long)]
    seed_admit: Option<bool>,
    /// Relational-uncertainty weight: fun | inv-fun [default: fun]
    #[arg(long)]
    ur_weight: Option<String>,
    /// Optional token ceiling checked before each query
    #[arg(long)]
    max_tokens: Option<u64>,
    /// Materialize reversed relations [default: true]
    #[arg(long)]
    reverse_relations: Option<bool>,
    /// Matcher embedding dimension [default: 64]
    #[arg(long)]
    matcher_dim: Option<usize>,
    /// Matcher training epochs [default: 200]
    #[arg(long)]
    matcher_epochs: Option<usize>,
    /// Matcher learning rate [default: 0.01]
    #[arg(long)]
    matcher_lr: Option<f64>,
    /// Label cache file shared with the annotator (never re-bills)
    #[arg(long)]
    label_cache: Option<PathBuf>,
    /// Write the per-iteration report as CSV
    #[arg(long)]
    report_csv: Option<PathBuf>,
    /// Write the JSON summary to a file
    #[arg(long)]
    report_json: Option<PathBuf>,
    /// Print one machine-readable JSON line on stdout
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    flags: PipelineFlags,
}

#[derive(Args)]
struct AblateArgs {
    /// Variant: full | no-refiner | no-active | ur-only | nu-only | degree |
    /// funcSum | random-select
    #[arg(long)]
    variant: String,
    #[command(flatten)]
    flags: PipelineFlags,
}

#[derive(Args)]
struct SynthArgs {
    /// Entity count per side [default: 500]
    #[arg(long, default_value_t = 500)]
    entities: usize,
    /// Relation count [default: 10]
    #[arg(long, default_value_t = 10)]
    relations: usize,
    /// Mean total degree [default: 8]
    #[arg(long, default_value_t = 8.0)]
    mean_degree: f64,
    /// Target-side edge dropout [default: 0.1]
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
    /// Fraction of perturbed entity names [default: 0.1]
    #[arg(long, default_value_t = 0.1)]
    name_noise: f64,
    /// Generator seed [default: 0]
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (OpenEA layout)
    #[arg(long)]
    out: PathBuf,
    /// Print one machine-readable JSON line on stdout
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct RefineArgs {
    /// OpenEA-format dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Labels file: source_id<TAB>target_id with optional provenance column
    #[arg(long)]
    labels: PathBuf,
    /// Initialization probability delta0 [default: 0.5]
    #[arg(long, default_value_t = 0.5)]
    delta0: f64,
    /// Elevation threshold delta1 [default: 0.9]
    #[arg(long, default_value_t = 0.9)]
    delta1: f64,
    /// Refinement iterations n_lr [default: 10]
    #[arg(long, default_value_t = 10)]
    n_lr: usize,
    /// Pruning threshold [default: 0.0001]
    #[arg(long, default_value_t = 1e-4)]
    theta_min: f64,
    /// Include inferred pairs above delta1 [default: true]
    #[arg(long, default_value_t = true)]
    augment_inferred: bool,
    /// Admit seeds at exactly delta0 in the first pass [default: true]
    #[arg(long, default_value_t = true)]
    seed_admit: bool,
    /// Materialize reversed relations [default: true]
    #[arg(long, default_value_t = true)]
    reverse_relations: bool,
    /// Write the refined labels here
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the per-iteration trace CSV here
    #[arg(long)]
    trace_csv: Option<PathBuf>,
    /// Dump the final reasoning snapshot (source_id, target_id, probability)
    #[arg(long)]
    dump_state: Option<PathBuf>,
    /// Print one machine-readable JSON line on stdout
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SelectArgs {
    /// OpenEA-format dataset directory
    #[arg(long)]
    data: PathBuf,
    /// How many entities to select [default: 10% of |E|]
    #[arg(long)]
    count: Option<usize>,
    /// Labels file; when given, selection uses the state refined from it
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Relational-uncertainty weight: fun | inv-fun [default: fun]
    #[arg(long, default_value = "fun")]
    ur_weight: String,
    /// Materialize reversed relations [default: true]
    #[arg(long, default_value_t = true)]
    reverse_relations: bool,
    /// Dump the full score table as CSV
    #[arg(long)]
    scores_csv: Option<PathBuf>,
    /// Print one machine-readable JSON line on stdout
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct AnnotateArgs {
    /// OpenEA-format dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Annotator backend: oracle | noisy | llm [default: oracle]
    #[arg(long, default_value = "oracle")]
    backend: String,
    /// Noisy oracle truth probability [default: 0.6]
    #[arg(long, default_value_t = 0.6)]
    p_true: f64,
    /// Candidate-filtering cutoff k [default: 20]
    #[arg(long, default_value_t = 20)]
    k: usize,
    /// File of source entity ids, one per line; otherwise active selection
    #[arg(long)]
    sources: Option<PathBuf>,
    /// Number of sources to select when --sources is absent [default: 10% of |E|]
    #[arg(long)]
    count: Option<usize>,
    /// Maximum queries to spend [default: number of sources]
    #[arg(long)]
    budget_queries: Option<u64>,
    /// Label cache file (hits are replayed without billing)
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Seed for noisy/llm sampling [default: 0]
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Materialize reversed relations [default: true]
    #[arg(long, default_value_t = true)]
    reverse_relations: bool,
    /// Write the produced labels here
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print one machine-readable JSON line on stdout
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// OpenEA-format dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Labels file to train the matcher on
    #[arg(long)]
    labels: PathBuf,
    /// Embedding dimension [default: 64]
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Training epochs [default: 200]
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    /// Learning rate [default: 0.01]
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    /// Margin gamma [default: 1.0]
    #[arg(long, default_value_t = 1.0)]
    margin: f64,
    /// Negatives per positive [default: 5]
    #[arg(long, default_value_t = 5)]
    negatives: usize,
    /// Mean-aggregation rounds [default: 2]
    #[arg(long, default_value_t = 2)]
    agg_rounds: usize,
    /// Training seed [default: 0]
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also report precision/recall/F1 of mutual-top-1 confident pairs
    #[arg(long)]
    confident: bool,
    /// Dump trained embeddings to PREFIX.src and PREFIX.tgt (text header,
    /// little-endian f32 rows)
    #[arg(long)]
    dump_embeddings: Option<PathBuf>,
    /// Dump each source entity's top-k targets by score as CSV
    #[arg(long)]
    topk_csv: Option<PathBuf>,
    /// k for --topk-csv [default: 10]
    #[arg(long, default_value_t = 10)]
    topk: usize,
    /// Materialize reversed relations [default: true]
    #[arg(long, default_value_t = true)]
    reverse_relations: bool,
    /// Print one machine-readable JSON line on stdout
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct InspectArgs {
    /// OpenEA-format dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Print one machine-readable JSON line on stdout
    #[arg(long)]
    json: bool,
}

enum CliError {
    Data(String),
    Backend(String),
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match &e {
            PipelineError::BackendAborted { .. } => CliError::Backend(e.to_string()),
            PipelineError::Annotate(AnnotateError::Backend(_)) => CliError::Backend(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

macro_rules! impl_data_error {
    ($($ty:ty),*) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Data(e.to_string())
            }
        }
    )*};
}

impl_data_error!(
    kgalign::kg::KgError,
    kgalign::refine::RefineError,
    kgalign::refine::LabelIoError,
    kgalign::matcher::MatcherError,
    kgalign::reasoning::ReasoningError,
    std::io::Error,
    csv::Error
);

use kgalign::csv;

impl From<kgalign::annotate::BackendError> for CliError {
    fn from(e: kgalign::annotate::BackendError) -> Self {
        CliError::Backend(e.to_string())
    }
}

impl From<AnnotateError> for CliError {
    fn from(e: AnnotateError) -> Self {
        match e {
            AnnotateError::Backend(_) => CliError::Backend(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders --help/--version through the error path too.
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let result = match cli.command {
        Command::Run(args) => cmd_run(args.flags, None),
        Command::Ablate(args) => match args.variant.parse::<Variant>() {
            Ok(v) => cmd_run(args.flags, Some(v)),
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(EXIT_USAGE);
            }
        },
        Command::Synth(args) => cmd_synth(args),
        Command::Refine(args) => cmd_refine(args),
        Command::Select(args) => cmd_select(args),
        Command::Annotate(args) => cmd_annotate(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Inspect(args) => cmd_inspect(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_DATA)
        }
        Err(CliError::Backend(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_BACKEND)
        }
    }
}

impl PipelineFlags {
    fn build_config(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Data(format!("config {}: {e}", path.display())))?;
            cfg = parse_config_str(&text, cfg)?;
        }
        if let Some(d) = &self.data {
            cfg.data = DataSource::OpenEa(d.clone());
        }
        let synth_flags = [
            self.synth_entities.is_some(),
            self.synth_relations.is_some(),
            self.synth_mean_degree.is_some(),
            self.synth_dropout.is_some(),
            self.synth_name_noise.is_some(),
        ];
        if synth_flags.iter().any(|&b| b) {
            let mut spec = match &cfg.data {
                DataSource::Synth(s) => *s,
                DataSource::OpenEa(_) => SynthSpec::default(),
            };
            if let Some(v) = self.synth_entities {
                spec.entity_count = v;
            }
            if let Some(v) = self.synth_relations {
                spec.relation_count = v;
            }
            if let Some(v) = self.synth_mean_degree {
                spec.mean_degree = v;
            }
            if let Some(v) = self.synth_dropout {
                spec.edge_dropout = v;
            }
            if let Some(v) = self.synth_name_noise {
                spec.name_noise = v;
            }
            cfg.data = DataSource::Synth(spec);
        }
        if let Some(b) = &self.backend {
            cfg.backend = match b.as_str() {
                "oracle" => BackendChoice::Oracle,
                "noisy" => BackendChoice::NoisyOracle {
                    p_true: self.p_true.unwrap_or(0.6),
                },
                "llm" => BackendChoice::Llm(LlmConfig::default()),
                other => return Err(CliError::Data(format!("unknown backend: {other}"))),
            };
        } else if let Some(p) = self.p_true {
            cfg.backend = BackendChoice::NoisyOracle { p_true: p };
        }
        if let Some(v) = self.budget {
            cfg.budget_fraction = v;
        }
        if let Some(v) = self.iterations {
            cfg.iterations = v;
        }
        if let Some(v) = self.k {
            cfg.k = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
            if let DataSource::Synth(spec) = &mut cfg.data {
                spec.seed = v;
            }
        }
        if let Some(v) = self.delta0 {
            cfg.refiner.delta0 = v;
        }
        if let Some(v) = self.delta1 {
            cfg.refiner.delta1 = v;
        }
        if let Some(v) = self.n_lr {
            cfg.refiner.n_lr = v;
        }
        if let Some(v) = self.theta_min {
            cfg.refiner.theta_min = v;
        }
        if let Some(v) = self.augment_inferred {
            cfg.refiner.augment_inferred = v;
        }
        if let Some(v) = self.seed_admit {
            cfg.refiner.seed_admit = v;
        }
        if let Some(w) = &self.ur_weight {
            cfg.ur_weight = parse_ur_weight(w)?;
        }
        if let Some(v) = self.max_tokens {
            cfg.max_tokens = Some(v);
        }
        if let Some(v) = self.reverse_relations {
            cfg.reverse_relations = v;
        }
        if let Some(v) = self.matcher_dim {
            cfg.matcher.embedding_dim = v;
        }
        if let Some(v) = self.matcher_epochs {
            cfg.matcher.epochs = v;
        }
        if let Some(v) = self.matcher_lr {
            cfg.matcher.learning_rate = v;
        }
        if let Some(v) = &self.label_cache {
            cfg.label_cache = Some(v.clone());
        }
        Ok(cfg)
    }
}

fn write_reports(report: &RunReport, flags: &PipelineFlags) -> Result<(), CliError> {
    if let Some(path) = &flags.report_csv {
        let file = std::fs::File::create(path)?;
        report.write_csv(file)?;
    }
    if let Some(path) = &flags.report_json {
        std::fs::write(path, report.to_json())?;
    }
    Ok(())
}

fn print_report(report: &RunReport, flags: &PipelineFlags) {
    for it in &report.iterations {
        eprintln!(
            "iteration {}: {} queries, |L|={}, |L*|={}, tpr={}, hit@1={}, {} ms",
            it.iteration,
            it.queries_spent,
            it.labels_total,
            it.refined_total,
            fmt_opt(it.tpr),
            fmt_opt(it.hit1),
            it.wall_ms
        );
    }
    if flags.json {
        println!("{}", report.to_json());
    } else {
        println!(
            "variant={} budget={} queries={} tokens={} hit@1={} hit@10={} mrr={}",
            report.variant,
            report.budget,
            report.total_queries,
            report.total_tokens,
            fmt_opt(report.final_hit1),
            fmt_opt(report.final_hit10),
            fmt_opt(report.final_mrr)
        );
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}"))
        .unwrap_or_else(|| "n/a".to_string())
}

fn cmd_run(flags: PipelineFlags, variant: Option<Variant>) -> Result<(), CliError> {
    let cfg = flags.build_config()?;
    let report = match variant {
        None => run(&cfg)?,
        Some(v) => ablate(&cfg, v)?,
    };
    write_reports(&report, &flags)?;
    print_report(&report, &flags);
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    let spec = SynthSpec {
        entity_count: args.entities,
        relation_count: args.relations,
        mean_degree: args.mean_degree,
        edge_dropout: args.dropout,
        name_noise: args.name_noise,
        seed: args.seed,
    };
    let (pair, report) = synth_pair(&spec, KgOptions::default())?;
    if report.isolated_majority {
        eprintln!("warning: more than half the entities are isolated");
    }
    write_openea(&pair, &args.out)?;
    let summary = serde_json::json!({
        "out": args.out.display().to_string(),
        "entities": args.entities,
        "source_triples": pair.source.forward_triple_count(),
        "target_triples": pair.target.forward_triple_count(),
        "links": pair.ground_truth.as_ref().map_or(0, |g| g.len()),
        "isolated_majority": report.isolated_majority,
    });
    if args.json {
        println!("{summary}");
    } else {
        println!(
            "wrote {} ({} + {} triples, {} links)",
            args.out.display(),
            pair.source.forward_triple_count(),
            pair.target.forward_triple_count(),
            pair.ground_truth.as_ref().map_or(0, |g| g.len())
        );
    }
    Ok(())
}

fn load_pair(dir: &Path, reverse: bool) -> Result<KgPair, CliError> {
    let (pair, _) = load_openea(
        dir,
        KgOptions {
            reverse_relations: reverse,
        },
    )?;
    Ok(pair)
}

fn read_labels(path: &Path) -> Result<PseudoLabelSet, CliError> {
    let file = std::fs::File::open(path)
        .map_err(|e| CliError::Data(format!("labels {}: {e}", path.display())))?;
    Ok(PseudoLabelSet::read_tsv(std::io::BufReader::new(file))?)
}

fn cmd_refine(args: RefineArgs) -> Result<(), CliError> {
    let pair = load_pair(&args.data, args.reverse_relations)?;
    let labels = read_labels(&args.labels)?;
    let cfg = RefinerConfig {
        delta0: args.delta0,
        delta1: args.delta1,
        n_lr: args.n_lr,
        theta_min: args.theta_min,
        augment_inferred: args.augment_inferred,
        seed_admit: args.seed_admit,
    };
    let out = refine(&labels, &pair, &cfg)?;
    if let Some(path) = &args.out {
        let mut buf = Vec::new();
        out.refined.write_tsv(&mut buf)?;
        std::fs::write(path, buf)?;
    }
    if let Some(path) = &args.trace_csv {
        let mut buf = Vec::new();
        out.trace.write_csv(&mut buf)?;
        std::fs::write(path, buf)?;
    }
    if let Some(path) = &args.dump_state {
        let mut buf = Vec::new();
        out.state.dump_snapshot(&mut buf)?;
        std::fs::write(path, buf)?;
    }
    let last = out.trace.rows().last();
    let summary = serde_json::json!({
        "input_labels": labels.len(),
        "refined": out.refined.len(),
        "annotated": out.refined.annotated().len(),
        "tpr": last.and_then(|r| r.tpr),
        "recall": last.and_then(|r| r.recall),
        "phi": last.map(|r| r.phi),
    });
    if args.json {
        println!("{summary}");
    } else {
        println!(
            "refined {} -> {} labels (tpr={}, recall={})",
            labels.len(),
            out.refined.len(),
            fmt_opt(last.and_then(|r| r.tpr)),
            fmt_opt(last.and_then(|r| r.recall)),
        );
    }
    Ok(())
}

fn parse_ur_weight(s: &str) -> Result<UrWeight, CliError> {
    match s {
        "fun" => Ok(UrWeight::Functionality),
        "inv-fun" => Ok(UrWeight::InverseFunctionality),
        other => Err(CliError::Data(format!("unknown ur_weight: {other}"))),
    }
}

fn cmd_select(args: SelectArgs) -> Result<(), CliError> {
    let pair = load_pair(&args.data, args.reverse_relations)?;
    let state = match &args.labels {
        Some(path) => {
            let labels = read_labels(path)?;
            refine(&labels, &pair, &RefinerConfig::default())?.state
        }
        None => AlignmentState::new(),
    };
    let count = args
        .count
        .unwrap_or_else(|| ((pair.source.entity_count() as f64) * 0.1).floor().max(1.0) as usize);
    let pool: Vec<EntityId> = pair.source.entity_ids().collect();
    let ur = relational_uncertainty(&pair, &state, parse_ur_weight(&args.ur_weight)?);
    let un = neighbor_uncertainty(&pair, &state);
    let scores = aggregate(&pool, &ur, &un);
    if let Some(path) = &args.scores_csv {
        let file = std::fs::File::create(path)?;
        scores.write_csv(&pair, file)?;
    }
    let picked = select(&scores, &BTreeSet::new(), count);
    let summary = serde_json::json!({
        "selected": picked.iter().map(|e| e.0).collect::<Vec<_>>(),
        "pool": pool.len(),
    });
    if args.json {
        println!("{summary}");
    } else {
        for e in &picked {
            println!("{e}\t{}", pair.source.entity_name(*e));
        }
    }
    Ok(())
}

fn cmd_annotate(args: AnnotateArgs) -> Result<(), CliError> {
    let pair = load_pair(&args.data, args.reverse_relations)?;
    let sources: Vec<EntityId> = match &args.sources {
        Some(path) => {
            let file = std::fs::File::open(path)
                .map_err(|e| CliError::Data(format!("sources {}: {e}", path.display())))?;
            let mut out = Vec::new();
            for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
                let line = line?;
                let trimmed = line.trim();
                if trimmed.is_empty() {
                    continue;
                }
                let id: u32 = trimmed.parse().map_err(|_| {
                    CliError::Data(format!("sources line {}: not an id: {trimmed}", lineno + 1))
                })?;
                out.push(EntityId(id));
            }
            out
        }
        None => {
            let count = args.count.unwrap_or_else(|| {
                ((pair.source.entity_count() as f64) * 0.1).floor().max(1.0) as usize
            });
            let pool: Vec<EntityId> = pair.source.entity_ids().collect();
            let state = AlignmentState::new();
            let ur = relational_uncertainty(&pair, &state, UrWeight::Functionality);
            let un = neighbor_uncertainty(&pair, &state);
            select(&aggregate(&pool, &ur, &un), &BTreeSet::new(), count)
        }
    };
    let mut backend: Box<dyn AnnotatorBackend> = match args.backend.as_str() {
        "oracle" => Box::new(OracleBackend),
        "noisy" => Box::new(NoisyOracleBackend::new(args.p_true, args.seed)),
        "llm" => Box::new(LlmBackend::new(LlmConfig {
            prompt_seed: args.seed,
            ..Default::default()
        })?),
        other => return Err(CliError::Data(format!("unknown backend: {other}"))),
    };
    let mut budget = Budget::new(args.budget_queries.unwrap_or(sources.len() as u64));
    let mut cache = match &args.cache {
        Some(path) => Some(LabelCache::open(path)?),
        None => None,
    };
    let outcome = annotate_batch(
        backend.as_mut(),
        &pair,
        &sources,
        args.k,
        &mut budget,
        cache.as_mut(),
    )?;
    if let Some(c) = &cache {
        c.save()?;
    }
    if let Some(path) = &args.out {
        let mut buf = Vec::new();
        outcome.labels.write_tsv(&mut buf)?;
        std::fs::write(path, buf)?;
    }
    let summary = serde_json::json!({
        "queried": budget.spent_queries,
        "labels": outcome.labels.len(),
        "none": outcome.none_count,
        "skipped": outcome.skipped,
        "cache_hits": outcome.cache_hits,
        "spent_tokens": budget.spent_tokens,
    });
    if let Some(err) = outcome.error {
        eprintln!("error: backend failed mid-batch: {err}");
        eprintln!("partial results: {summary}");
        return Err(CliError::Backend(err.to_string()));
    }
    if args.json {
        println!("{summary}");
    } else {
        println!(
            "annotated {} sources: {} labels, {} abstentions, {} skipped",
            budget.spent_queries,
            outcome.labels.len(),
            outcome.none_count,
            outcome.skipped
        );
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let pair = load_pair(&args.data, args.reverse_relations)?;
    let labels = read_labels(&args.labels)?;
    let cfg = MatcherConfig {
        embedding_dim: args.dim,
        epochs: args.epochs,
        learning_rate: args.lr,
        margin: args.margin,
        negatives_per_positive: args.negatives,
        aggregation_rounds: args.agg_rounds,
        seed: args.seed,
    };
    let matcher = train(&cfg, &pair, &labels)?;
    if let Some(prefix) = &args.dump_embeddings {
        let dump = |mat, ext: &str| -> Result<(), CliError> {
            let mut buf = Vec::new();
            kgalign::matcher::Matcher::write_embeddings(mat, &mut buf)?;
            std::fs::write(prefix.with_extension(ext), buf)?;
            Ok(())
        };
        dump(matcher.source_embeddings(), "src")?;
        dump(matcher.target_embeddings(), "tgt")?;
    }
    if let Some(path) = &args.topk_csv {
        let file = std::fs::File::create(path)?;
        matcher.write_topk_csv(args.topk, file)?;
    }
    let truth = pair
        .ground_truth
        .as_ref()
        .filter(|g| !g.is_empty())
        .ok_or_else(|| CliError::Data("dataset has no ground truth to evaluate against".into()))?;
    let report = evaluate(&matcher, truth)?;
    let confident = if args.confident {
        let pairs = matcher.confident_pairs();
        Some((pairs.len(), evaluate_confident(&pairs, truth)))
    } else {
        None
    };
    let summary = serde_json::json!({
        "hit1": report.hit1,
        "hit10": report.hit10,
        "mrr": report.mrr,
        "confident_pairs": confident.as_ref().map(|(n, _)| n),
        "confident_precision": confident.as_ref().and_then(|(_, e)| e.precision),
        "confident_recall": confident.as_ref().map(|(_, e)| e.recall),
        "confident_f1": confident.as_ref().and_then(|(_, e)| e.f1),
    });
    if args.json {
        println!("{summary}");
    } else {
        println!(
            "hit@1={:.4} hit@10={:.4} mrr={:.4}",
            report.hit1, report.hit10, report.mrr
        );
        if let Some((n, e)) = confident {
            println!(
                "confident pairs: {} (precision={}, recall={:.4}, f1={})",
                n,
                e.precision
                    .map(|p| format!("{p:.4}"))
                    .unwrap_or_else(|| "n/a".into()),
                e.recall,
                e.f1.map(|f| format!("{f:.4}"))
                    .unwrap_or_else(|| "n/a".into()),
            );
        }
    }
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> Result<(), CliError> {
    let (pair, report) = load_openea(&args.data, KgOptions::default())?;
    let fun_stats = |kg: &kgalign::kg::KnowledgeGraph| {
        let mut vals: Vec<f64> = (0..kg.forward_relation_count())
            .filter_map(|r| kg.functionality(kgalign::kg::RelationId(r as u32)).ok())
            .collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if vals.is_empty() {
            (0.0, 0.0, 0.0)
        } else {
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            (vals[0], mean, vals[vals.len() - 1])
        }
    };
    let (smin, smean, smax) = fun_stats(&pair.source);
    let (tmin, tmean, tmax) = fun_stats(&pair.target);
    let summary = serde_json::json!({
        "source": {
            "entities": pair.source.entity_count(),
            "relations": pair.source.forward_relation_count(),
            "triples": pair.source.forward_triple_count(),
            "duplicates_dropped": report.source_duplicate_triples,
            "functionality_min_mean_max": [smin, smean, smax],
        },
        "target": {
            "entities": pair.target.entity_count(),
            "relations": pair.target.forward_relation_count(),
            "triples": pair.target.forward_triple_count(),
            "duplicates_dropped": report.target_duplicate_triples,
            "functionality_min_mean_max": [tmin, tmean, tmax],
        },
        "links": pair.ground_truth.as_ref().map_or(0, |g| g.len()),
        "duplicate_links": report.duplicate_links,
    });
    if args.json {
        println!("{summary}");
    } else {
        println!(
            "{}",
            serde_json::to_string_pretty(&summary).expect("serializable")
        );
    }
    Ok(())
}
