use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde_json::json;

use compexp::analysis::{
    class_contributions, correlation_by_length_from_curves, filter_active, input_activity,
    neuron_accuracy, pearson_pairs, uniqueness_stats, UniquenessStats, DEFAULT_MIN_ACTIVATIONS,
};
use compexp::concepts::{ConceptId, TaskKind};
use compexp::container::{validate_container, Container};
use compexp::formula::{CanonicalKey, Formula};
use compexp::report::{emit_report, top_classes, FailureRow, Report, ReportFormat, ReportRow};
use compexp::search::{
    exhaustive_explain, explain_all, explain_neuron, OperatorSet, SearchConfig,
    DEFAULT_BEAM_SIZE, DEFAULT_EXHAUSTIVE_BUDGET, DEFAULT_MAX_LENGTH,
};
use compexp::synth::{generate, SynthSpec};
use compexp::thresholding::{threshold_all, NeuronMask, QuantileOptions, ThresholdMode};
use compexp::{with_jobs, Error, Result};

const DEFAULT_QUANTILE: f64 = 0.005;

#[derive(Parser)]
#[command(name = "compexp", version, about = "Compositional explanations of neurons")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Explain every neuron in a container by beam search.
    Explain(ExplainArgs),
    /// Best single concept per neuron.
    Netdissect(ExplainArgs),
    /// Concept uniqueness over a report.
    Stats(StatsArgs),
    /// Correlate explanation IoU with model accuracy.
    Correlate(CorrelateArgs),
    /// Neurons contributing most to an output class.
    Contrib(ContribArgs),
    /// Write a synthetic container with planted formulas.
    Synth(SynthArgs),
    /// Check a container's structure.
    Validate { container: PathBuf },
    /// Compare beam search against exhaustive enumeration.
    Oracle(OracleArgs),
}

#[derive(Args, Clone)]
struct ThresholdArgs {
    /// Fraction of units left active per neuron [default: 0.005 for vision].
    #[arg(long, conflicts_with = "positive_threshold")]
    threshold_quantile: Option<f64>,
    /// Active iff activation > 0 [default for NLI].
    #[arg(long)]
    positive_threshold: bool,
    /// Estimate quantiles from this many sampled units.
    #[arg(long)]
    quantile_sample: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_MIN_ACTIVATIONS)]
    min_activations: u64,
    /// Comma-separated neuron ids (default: all).
    #[arg(long, value_delimiter = ',')]
    neurons: Vec<u32>,
}

#[derive(Args)]
struct ExplainArgs {
    container: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MAX_LENGTH)]
    max_length: usize,
    #[arg(long, default_value_t = DEFAULT_BEAM_SIZE)]
    beam_size: usize,
    #[command(flatten)]
    threshold: ThresholdArgs,
    /// Comma-separated subset of and,or,not,neighbors [default: by task].
    #[arg(long)]
    operators: Option<OperatorSet>,
    #[arg(long, default_value_t = 1)]
    results_per_neuron: usize,
    /// Worker threads [default: all cores].
    #[arg(long)]
    jobs: Option<usize>,
    /// Class weights listed per neuron, when the container has them.
    #[arg(long, default_value_t = 3)]
    top_classes: usize,
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "json,csv,html")]
    format: Vec<ReportFormat>,
}

#[derive(Args)]
struct StatsArgs {
    report: PathBuf,
    #[arg(long, default_value_t = 10)]
    top: usize,
    /// Also summarize the best formula at each max length.
    #[arg(long)]
    by_length: bool,
}

#[derive(Args)]
struct CorrelateArgs {
    report: PathBuf,
}

#[derive(Args)]
struct ContribArgs {
    container: PathBuf,
    /// Class name or index.
    #[arg(long)]
    class: String,
    #[arg(long, short, default_value_t = 10)]
    k: usize,
    /// Report to take explanations from.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, default_value_t = 4096)]
    units: usize,
    #[arg(long, default_value_t = 20)]
    primitives: usize,
    #[arg(long, default_value_t = 16)]
    neurons: usize,
    #[arg(long, default_value_t = 3)]
    planted_length: usize,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0.4)]
    density: f64,
    /// Lowest active fraction of a planted neuron mask.
    #[arg(long, default_value_t = 0.2)]
    min_fraction: f64,
    #[arg(long, default_value_t = 0.6)]
    max_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct OracleArgs {
    container: PathBuf,
    #[arg(long, default_value_t = 2)]
    max_length: usize,
    /// Beam width [default: large enough to keep every candidate].
    #[arg(long)]
    beam_size: Option<usize>,
    #[command(flatten)]
    threshold: ThresholdArgs,
    #[arg(long)]
    operators: Option<OperatorSet>,
    #[arg(long, default_value_t = DEFAULT_EXHAUSTIVE_BUDGET)]
    budget: u128,
    #[arg(long)]
    jobs: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Explain(a) => explain(a, false),
        Command::Netdissect(a) => explain(a, true),
        Command::Stats(a) => stats(a),
        Command::Correlate(a) => correlate(a),
        Command::Contrib(a) => contrib(a),
        Command::Synth(a) => synth(a),
        Command::Validate { container } => {
            let s = validate_container(&container)?;
            print_json(&s)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Oracle(a) => oracle(a),
    }
}

/// Prints a line to stdout; a closed pipe ends output quietly.
fn say(line: &str) {
    let mut out = std::io::stdout().lock();
    if let Err(e) = writeln!(out, "{line}") {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
    }
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    say(&serde_json::to_string_pretty(v)?);
    Ok(())
}

fn threshold_mode(args: &ThresholdArgs, task: TaskKind) -> ThresholdMode {
    match (args.threshold_quantile, args.positive_threshold, task) {
        (Some(p), _, _) => ThresholdMode::Quantile { p },
        (None, true, _) | (None, false, TaskKind::Nli) => ThresholdMode::Positive,
        (None, false, TaskKind::Vision) => ThresholdMode::Quantile { p: DEFAULT_QUANTILE },
    }
}

/// Thresholded, activity-filtered neuron masks in container order.
fn neuron_masks(container: &Container, args: &ThresholdArgs) -> Result<Vec<NeuronMask>> {
    let m = container.manifest();
    let mut acts = container.load_activations()?;
    if !args.neurons.is_empty() {
        for id in &args.neurons {
            if !m.neurons.iter().any(|n| n.0 == *id) {
                return Err(Error::Config(format!("neuron {id} not in container")));
            }
        }
        acts.retain(|a| args.neurons.contains(&a.neuron.0));
    }
    let opts = QuantileOptions {
        subsample: args.quantile_sample.map(|size| compexp::thresholding::Subsample { size, seed: 0 }),
    };
    let masks = threshold_all(&acts, threshold_mode(args, m.task), m.mask_dims(), &opts)?;
    let total = masks.len();
    let kept = filter_active(masks, args.min_activations);
    if kept.len() < total {
        warn!(
            "{} of {total} neurons have fewer than {} active units and are skipped",
            total - kept.len(),
            args.min_activations
        );
    }
    Ok(kept)
}

fn explain(a: ExplainArgs, netdissect: bool) -> Result<ExitCode> {
    let container = Container::open(&a.container)?;
    let m = container.manifest();
    let store = container.load_concepts()?;
    let mut operators = a.operators.unwrap_or_else(|| OperatorSet::for_task(m.task));
    if operators.neighbors && store.neighborhoods().next().is_none() {
        if a.operators.is_some() {
            return Err(Error::Config("NEIGHBORS requested but the container has no embeddings".into()));
        }
        operators.neighbors = false;
    }
    let cfg = SearchConfig {
        max_length: if netdissect { 1 } else { a.max_length },
        beam_size: a.beam_size,
        operators,
        results_per_neuron: a.results_per_neuron,
    };
    cfg.validate(&store)?;
    let masks = with_jobs(a.jobs, || neuron_masks(&container, &a.threshold))??;
    if masks.is_empty() {
        return Err(Error::Degenerate(format!(
            "no neuron has at least {} active units",
            a.threshold.min_activations
        )));
    }
    info!("explaining {} neurons over {} concepts", masks.len(), store.len());
    let outcomes = with_jobs(a.jobs, || explain_all(&masks, &store, &cfg))??;

    let predictions = container.load_labels()?;
    let weights = container.load_class_weights()?;
    let neuron_index: HashMap<u32, usize> = m.neurons.iter().enumerate().map(|(i, n)| (n.0, i)).collect();
    let by_id: HashMap<u32, &NeuronMask> = masks.iter().map(|n| (n.neuron.0, n)).collect();

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => {
                let accuracy = match &predictions {
                    Some(p) => {
                        let active = input_activity(&by_id[&r.neuron.0].mask, m.units_per_input())?;
                        neuron_accuracy(&active, p)?
                    }
                    None => None,
                };
                let classes = match &weights {
                    Some(w) => top_classes(w, neuron_index[&r.neuron.0], a.top_classes),
                    None => Vec::new(),
                };
                rows.push(ReportRow::from_result(&r, &store, accuracy, classes)?);
            }
            Err(f) => {
                warn!("neuron {}: {}", f.neuron.0, f.reason);
                failures.push(FailureRow {
                    neuron: f.neuron.0,
                    reason: f.reason,
                });
            }
        }
    }
    let report = Report::new(m.task, cfg, rows, failures);
    emit_report(&report, &a.format, &a.out)?;
    say(&format!(
        "{} neurons explained, {} failed; report in {}",
        report.rows.len(),
        report.failures.len(),
        a.out.display()
    ));
    Ok(ExitCode::SUCCESS)
}

/// Canonical keys for formulas read back from a report. Concept names are
/// interned in first-seen order so equal formulas share a key.
struct Interner {
    ids: HashMap<String, ConceptId>,
}

impl Interner {
    fn new() -> Self {
        Self { ids: HashMap::new() }
    }

    fn key(&mut self, text: &str) -> Result<CanonicalKey> {
        let ids = &mut self.ids;
        let f = Formula::parse_with(text, |name| {
            let next = ConceptId(ids.len() as u32);
            Ok(*ids.entry(name.to_string()).or_insert(next))
        })?;
        Ok(f.canonical_key())
    }
}

fn stats_json(s: &UniquenessStats, labels: &BTreeMap<CanonicalKey, String>) -> serde_json::Value {
    json!({
        "neurons": s.neurons,
        "distinct": s.distinct,
        "mean_count": s.mean_count,
        "percent_unique": s.percent_unique,
        "histogram": s.histogram,
        "top": s.top.iter().map(|(k, c)| json!({"formula": labels[k], "count": c})).collect::<Vec<_>>(),
    })
}

fn stats(a: StatsArgs) -> Result<ExitCode> {
    let report = Report::read_json(&a.report)?;
    let mut interner = Interner::new();
    let mut labels = BTreeMap::new();
    let mut best = Vec::with_capacity(report.rows.len());
    for r in &report.rows {
        let k = interner.key(&r.formula)?;
        labels.entry(k.clone()).or_insert_with(|| r.formula.clone());
        best.push(k);
    }
    let overall = uniqueness_stats(&best, a.top)?;
    let mut out = json!({ "best": stats_json(&overall, &labels) });
    if a.by_length {
        let max_len = report.rows.iter().map(|r| r.per_length.len()).max().unwrap_or(0);
        let mut levels = Vec::with_capacity(max_len);
        for l in 0..max_len {
            let mut keys = Vec::new();
            for r in report.rows.iter().filter_map(|r| r.per_length.get(l)) {
                let k = interner.key(r)?;
                labels.entry(k.clone()).or_insert_with(|| r.clone());
                keys.push(k);
            }
            let s = uniqueness_stats(&keys, a.top)?;
            levels.push(json!({ "length": l + 1, "stats": stats_json(&s, &labels) }));
        }
        out["by_length"] = json!(levels);
    }
    print_json(&out)?;
    Ok(ExitCode::SUCCESS)
}

fn correlate(a: CorrelateArgs) -> Result<ExitCode> {
    let report = Report::read_json(&a.report)?;
    let accuracy: Vec<Option<f64>> = report.rows.iter().map(|r| r.accuracy).collect();
    if accuracy.iter().all(Option::is_none) {
        return Err(Error::Data("report has no accuracies; the container needs predictions".into()));
    }
    let ious: Vec<Option<f64>> = report.rows.iter().map(|r| Some(r.iou)).collect();
    let curves: Vec<Vec<f64>> = report.rows.iter().map(|r| r.curve.clone()).collect();
    let r = pearson_pairs(&ious, &accuracy)?;
    let by_length = correlation_by_length_from_curves(&curves, &accuracy)?;
    print_json(&json!({
        "neurons": report.rows.len(),
        "with_accuracy": accuracy.iter().flatten().count(),
        "pearson_r": r,
        "by_length": by_length,
    }))?;
    Ok(ExitCode::SUCCESS)
}

fn contrib(a: ContribArgs) -> Result<ExitCode> {
    let container = Container::open(&a.container)?;
    let weights = container
        .load_class_weights()?
        .ok_or_else(|| Error::Data("container has no class weights".into()))?;
    let class = match weights.class_index(&a.class) {
        Some(i) => i,
        None => a
            .class
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("unknown class {:?}", a.class)))?,
    };
    let formulas: HashMap<u32, ReportRow> = match &a.report {
        Some(p) => Report::read_json(p)?.rows.into_iter().map(|r| (r.neuron, r)).collect(),
        None => HashMap::new(),
    };
    let neurons = &container.manifest().neurons;
    let rows: Vec<serde_json::Value> = class_contributions(&weights, class, a.k)?
        .into_iter()
        .map(|(idx, w)| {
            let id = neurons[idx.0 as usize].0;
            let row = formulas.get(&id);
            json!({
                "neuron": id,
                "weight": w,
                "formula": row.map(|r| r.formula.clone()),
                "iou": row.map(|r| r.iou),
            })
        })
        .collect();
    print_json(&json!({ "class": weights.class_names()[class], "neurons": rows }))?;
    Ok(ExitCode::SUCCESS)
}

fn synth(a: SynthArgs) -> Result<ExitCode> {
    let spec = SynthSpec {
        units: a.units,
        primitives: a.primitives,
        neurons: a.neurons,
        planted_length: a.planted_length,
        noise: a.noise,
        density: a.density,
        min_fraction: a.min_fraction,
        max_fraction: a.max_fraction,
        seed: a.seed,
    };
    generate(&spec)?.to_container()?.write(&a.out)?;
    say(&format!("wrote {}", a.out.display()));
    Ok(ExitCode::SUCCESS)
}

fn oracle(a: OracleArgs) -> Result<ExitCode> {
    let container = Container::open(&a.container)?;
    let store = container.load_concepts()?;
    let mut operators = a.operators.unwrap_or_else(|| OperatorSet::for_task(container.manifest().task));
    if a.operators.is_none() && store.neighborhoods().next().is_none() {
        operators.neighbors = false;
    }
    let cfg = SearchConfig {
        max_length: a.max_length,
        beam_size: a.beam_size.unwrap_or(usize::MAX),
        operators,
        results_per_neuron: 1,
    };
    let masks = with_jobs(a.jobs, || neuron_masks(&container, &a.threshold))??;
    let mut disagreements = 0;
    for n in &masks {
        let (beam, exact) = with_jobs(a.jobs, || {
            (
                explain_neuron(n, &store, &cfg),
                exhaustive_explain(n, &store, a.max_length, operators, a.budget),
            )
        })?;
        let (beam, exact) = (beam?, exact?);
        let agree = beam.best.key == exact.best.key && beam.best.iou == exact.best.iou;
        disagreements += usize::from(!agree);
        say(&json!({
                "neuron": n.neuron,
                "beam": beam.best.formula.render(&store)?,
                "beam_iou": beam.best.iou.value(),
                "exhaustive": exact.best.formula.render(&store)?,
                "exhaustive_iou": exact.best.iou.value(),
                "agree": agree,
            })
            .to_string(),
        );
    }
    if disagreements > 0 {
        eprintln!("{disagreements} of {} neurons disagree", masks.len());
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}
