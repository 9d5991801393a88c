use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Subcommand};
use kcforge::corpus::{load_bank, synth_fixture, validate_paired, word_count, PairedBenchmark, QuestionBank};
use kcforge::evaluation::{
    aggregate_preferences, chi_square_independence, evaluate_strategy, exact_binomial_two_sided, two_proportion_z, EvalError,
    EvaluationReport, Judge, JudgeError, JudgeKind, Ledger, LlmJudge, NormalizedExactJudge, PreferenceVote, StatResult,
};
use kcforge::gateway::{parallel_map, Gateway};
use kcforge::generation::{
    generate_all, shorten_label, FailureKind, GenerationConfig, GenerationFailure, GenerationRecord, ShorteningPolicy, StrategyKind,
    DEFAULT_SELECTION_THRESHOLD,
};
use kcforge::ontology::{export_tree, induce_ontology, InductionConfig, OntologyError};
use serde::Serialize;

use crate::provider::{ProviderArgs, UsageSummary};
use crate::{sibling, write_atomic, CliError};

fn read_bank(path: &Path) -> Result<QuestionBank, CliError> {
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    load_bank(file)
        .with_context(|| format!("invalid bank {}", path.display()))
        .map_err(CliError::validation)
}

fn paired_view(bank: &QuestionBank) -> Option<PairedBenchmark> {
    match validate_paired(bank.clone()) {
        Ok(p) => Some(p),
        Err(e) => {
            log::info!("bank is not a paired benchmark ({e}); pair metrics omitted");
            None
        }
    }
}

fn to_json_line<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s
}

// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: StrategyKind,
    /// Records output (JSON lines).
    #[arg(long)]
    pub out: PathBuf,
    /// Reword selected labels to at most 1.5x the gold label's word count.
    #[arg(long)]
    pub shorten: bool,
    #[arg(long, default_value_t = 2)]
    pub shorten_retries: u32,
    /// Minimum token overlap for resolving a selection by similarity.
    #[arg(long, default_value_t = DEFAULT_SELECTION_THRESHOLD)]
    pub selection_threshold: f64,
    #[command(flatten)]
    pub provider: ProviderArgs,
}

fn parse_strategy(s: &str) -> Result<StrategyKind, String> {
    s.parse()
}

#[derive(Serialize)]
struct GenerateSummary {
    strategy: StrategyKind,
    records: usize,
    failures: usize,
    #[serde(flatten)]
    usage: UsageSummary,
}

fn shorten_records(
    records: &mut [GenerationRecord],
    bank: &QuestionBank,
    gw: &Gateway,
    args: &GenerateArgs,
    config: &GenerationConfig,
) -> Vec<GenerationFailure> {
    let policy = ShorteningPolicy {
        retry_limit: args.shorten_retries,
        ..Default::default()
    };
    let outcomes = parallel_map(records, gw.concurrency(), |r| {
        let gold = bank.gold_label(&r.question_id)?;
        Some(shorten_label(&r.selected, word_count(gold).max(1), &policy, gw, &config.templates))
    });
    let mut failures = Vec::new();
    for (r, outcome) in records.iter_mut().zip(outcomes) {
        match outcome {
            Some(Ok(o)) => r.shortened = Some(o),
            Some(Err(e)) => failures.push(GenerationFailure {
                question_id: r.question_id.clone(),
                kind: if e.is_provider() {
                    FailureKind::Provider
                } else {
                    FailureKind::Parse
                },
                message: format!("shortening: {e}"),
            }),
            None => {}
        }
    }
    failures
}

pub fn generate(args: GenerateArgs) -> Result<(), CliError> {
    let bank = read_bank(&args.bank)?;
    let gw = args.provider.gateway(&bank)?;
    let config = GenerationConfig {
        templates: args.provider.templates()?,
        selection_threshold: args.selection_threshold,
    };
    let mut outcome = generate_all(&bank, args.strategy, &gw, &config);
    if args.shorten {
        let failed = shorten_records(&mut outcome.records, &bank, &gw, &args, &config);
        let ids: Vec<&str> = failed.iter().map(|f| f.question_id.as_str()).collect();
        outcome.records.retain(|r| !ids.contains(&r.question_id.as_str()));
        outcome.failures.extend(failed);
        outcome.failures.sort_by(|a, b| a.question_id.cmp(&b.question_id));
    }

    write_atomic(&args.out, &GenerationRecord::to_jsonl(&outcome.records))?;
    let manifest = sibling(&args.out, "failures.json");
    if outcome.failures.is_empty() {
        if manifest.exists() {
            std::fs::remove_file(&manifest).with_context(|| format!("removing stale {}", manifest.display()))?;
        }
    } else {
        write_atomic(&manifest, &to_json_line(&outcome.failures))?;
    }
    let summary = GenerateSummary {
        strategy: args.strategy,
        records: outcome.records.len(),
        failures: outcome.failures.len(),
        usage: UsageSummary::new(&args.provider, &gw, gw.total_usage())?,
    };
    let text = to_json_line(&summary);
    write_atomic(&sibling(&args.out, "summary.json"), &text)?;
    eprint!("{text}");

    if let Some(f) = outcome.failures.iter().find(|f| f.kind == FailureKind::Provider) {
        return Err(CliError::provider(anyhow!(
            "{} question(s) failed; first: {}: {}",
            outcome.failures.len(),
            f.question_id,
            f.message
        )));
    }
    if let Some(f) = outcome.failures.first() {
        return Err(CliError::parse(anyhow!(
            "{} question(s) failed; first: {}: {}",
            outcome.failures.len(),
            f.question_id,
            f.message
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub bank: PathBuf,
    /// Records of the first strategy.
    #[arg(long)]
    pub records: PathBuf,
    /// Records of a second strategy to compare against.
    #[arg(long)]
    pub records_b: Option<PathBuf>,
    #[arg(long, default_value = "normalized_exact", value_parser = parse_judge)]
    pub judge: JudgeKind,
    /// Adjudication ledger CSV for `--judge ledger`.
    #[arg(long)]
    pub ledger: Option<PathBuf>,
    /// Preference votes JSON (`[{"question_id", "votes": ["llm"|"human"; 3]}]`).
    #[arg(long)]
    pub preferences: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub provider: ProviderArgs,
}

fn parse_judge(s: &str) -> Result<JudgeKind, String> {
    s.parse()
}

fn read_records(path: &Path) -> Result<Vec<GenerationRecord>, CliError> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    GenerationRecord::from_jsonl(&text)
        .with_context(|| format!("invalid records {}", path.display()))
        .map_err(CliError::validation)
}

fn eval_error(e: EvalError) -> CliError {
    match e {
        EvalError::Judge(JudgeError::Provider(p)) => CliError::provider(p),
        EvalError::Judge(e @ JudgeError::Unparseable(_)) => CliError::parse(e),
        other => CliError::validation(other),
    }
}

pub fn evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let bank = read_bank(&args.bank)?;
    let paired = paired_view(&bank);
    let mut sets = vec![read_records(&args.records)?];
    if let Some(b) = &args.records_b {
        sets.push(read_records(b)?);
    }

    let templates = args.provider.templates()?;
    let gateway;
    let ledger;
    let judge: Box<dyn Judge + '_> = match args.judge {
        JudgeKind::NormalizedExact => Box::new(NormalizedExactJudge),
        JudgeKind::Ledger => {
            let path = args
                .ledger
                .as_ref()
                .ok_or_else(|| CliError::validation(anyhow!("--ledger is required for the ledger judge")))?;
            ledger = Ledger::load(path).map_err(CliError::validation)?;
            Box::new(ledger)
        }
        JudgeKind::LlmJudge => {
            gateway = args.provider.gateway(&bank)?;
            Box::new(LlmJudge::new(&gateway, &templates, bank.subject(), bank.context()))
        }
    };

    let mut reports = Vec::new();
    for records in &sets {
        let strategy = records
            .first()
            .map(|r| r.strategy)
            .ok_or_else(|| CliError::validation(anyhow!("records file is empty")))?;
        reports.push(evaluate_strategy(strategy, records, &bank, judge.as_ref()).map_err(eval_error)?);
    }
    let mut report = EvaluationReport::build(bank.subject(), args.judge, reports, paired.as_ref()).map_err(eval_error)?;
    if let Some(path) = &args.preferences {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let votes: Vec<PreferenceVote> = serde_json::from_str(&text).with_context(|| format!("invalid votes {}", path.display()))?;
        report = report.with_preferences(aggregate_preferences(&votes).map_err(eval_error)?);
    }
    write_atomic(&args.out, &report.to_json())?;
    for block in &report.strategies {
        let r = &block.report;
        eprintln!(
            "{}: direct {}/{} top-five {}/{}",
            r.strategy, r.direct_match.count, r.direct_match.total, r.top_five.count, r.top_five.total
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct OntologyArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u32).range(1..))]
    pub max_iterations: u32,
    #[command(flatten)]
    pub provider: ProviderArgs,
}

fn ontology_error(e: OntologyError) -> CliError {
    if e.is_provider() {
        CliError::provider(e)
    } else if e.is_parse() {
        CliError::parse(e)
    } else {
        CliError::validation(e)
    }
}

pub fn ontology(args: OntologyArgs) -> Result<(), CliError> {
    let bank = read_bank(&args.bank)?;
    let paired = paired_view(&bank);
    let gw = args.provider.gateway(&bank)?;
    let config = InductionConfig {
        max_iterations: args.max_iterations as usize,
        templates: args.provider.templates()?,
    };
    let result = induce_ontology(&bank, &gw, &config).map_err(ontology_error)?;
    let doc = export_tree(&result, paired.as_ref()).map_err(ontology_error)?;
    write_atomic(&args.out, &doc.to_json())?;
    let last = doc.levels.last().expect("root level");
    eprintln!(
        "{} after {} iteration(s): {} groups{}",
        if doc.converged { "converged" } else { "NOT converged" },
        doc.iterations,
        last.group_count,
        match (last.accuracy, last.refinement) {
            (Some(a), Some(r)) => format!(", accuracy {a:.3}, refinement {r:.3}"),
            _ => String::new(),
        }
    );
    eprint!("{}", to_json_line(&UsageSummary::new(&args.provider, &gw, result.usage)?));
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Subcommand)]
pub enum StatsCommand {
    /// Pooled two-proportion z-test.
    Z { k1: u64, n1: u64, k2: u64, n2: u64 },
    /// Chi-square independence test; rows separated by `;`, cells by `,`.
    Chi2 { table: String },
    /// Exact two-sided binomial test.
    Binom {
        k: u64,
        n: u64,
        #[arg(default_value_t = 0.5)]
        p0: f64,
    },
}

fn parse_table(s: &str) -> anyhow::Result<Vec<Vec<u64>>> {
    s.split(';')
        .map(|row| {
            row.split(',')
                .map(|c| c.trim().parse::<u64>().with_context(|| format!("bad count `{}`", c.trim())))
                .collect()
        })
        .collect()
}

pub fn format_stat(cmd: &StatsCommand, r: &StatResult) -> String {
    match cmd {
        StatsCommand::Z { .. } => format!("Z={:.6}, p={:.6}", r.statistic, r.p_value),
        StatsCommand::Chi2 { .. } => format!("X2={:.6}, df={}, p={:.6}", r.statistic, r.df.unwrap_or(0), r.p_value),
        StatsCommand::Binom { .. } => format!("p={:.6}", r.p_value),
    }
}

pub fn stats(cmd: StatsCommand) -> Result<(), CliError> {
    let result = match &cmd {
        StatsCommand::Z { k1, n1, k2, n2 } => two_proportion_z(*k1, *n1, *k2, *n2),
        StatsCommand::Chi2 { table } => chi_square_independence(&parse_table(table)?),
        StatsCommand::Binom { k, n, p0 } => exact_binomial_two_sided(*k, *n, *p0),
    }
    .map_err(CliError::validation)?;
    println!("{}", format_stat(&cmd, &result));
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct FixtureArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of KCs; the bank gets two questions per KC.
    #[arg(long, default_value_t = 40)]
    pub kcs: usize,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn fixture(args: FixtureArgs) -> Result<(), CliError> {
    let bench = synth_fixture(args.seed, args.kcs).map_err(CliError::validation)?;
    write_atomic(&args.out, &bench.bank().to_json())?;
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub bank: PathBuf,
    /// Fail unless every KC has exactly two questions.
    #[arg(long)]
    pub paired: bool,
}

pub fn validate(args: ValidateArgs) -> Result<(), CliError> {
    let bank = read_bank(&args.bank)?;
    let (q, k) = (bank.questions().len(), bank.kcs().len());
    match validate_paired(bank) {
        Ok(_) => println!("ok: {q} questions, {k} KCs, paired"),
        Err(e) if args.paired => return Err(CliError::validation(e)),
        Err(e) => println!("ok: {q} questions, {k} KCs, not paired ({e})"),
    }
    Ok(())
}
