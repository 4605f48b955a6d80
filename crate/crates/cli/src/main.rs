use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use uqrank_core::consistency::{load_option_map, OptionMap};
use uqrank_core::geometry::{fd_vs_correlation, write_fd_pairs_csv};
use uqrank_core::ingest::{parse_log_files, write_jsonl, CorrectnessRule, ValidationReport};
use uqrank_core::pipeline::{
    aol_fits, effective_rules, effective_threads, evaluate_all, load_scores, replay_config,
    run_pipeline, score_method, truth_from_logs, write_rankings_csv, LogSet, RunConfig,
    ScoringInputs, SubsetConfig,
};
use uqrank_core::rankeval::performance_correlation_matrix;
use uqrank_core::synth::{
    consistency_embeddings, generate_ensemble, option_map, prompt_embeddings, EnsembleConfig,
};
use uqrank_core::transfer::{aol_fit, aol_scores, subset_baseline_draws};
use uqrank_core::{EmbeddingSet, Error, MethodKind, PerformanceTable, ScoreTable, TaskKind};

#[derive(Parser)]
#[command(
    name = "uqrank",
    version,
    about = "Rank generative models from inference logs without labels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check JSONL logs against the record schema.
    Validate(ValidateArgs),
    /// Compute proxy scores for one or more methods.
    Score(ScoreArgs),
    /// Rank models per dataset from a scores file.
    Rank(RankArgs),
    /// Correlate scores with ground-truth performance.
    Eval(EvalArgs),
    /// Average-thresholded-confidence accuracy estimates for one target dataset.
    Atc(AtcArgs),
    /// Accuracy-on-the-line scores and fit between two datasets.
    Aol(AolArgs),
    /// Accuracy on a seeded labeled subset of one dataset.
    Subset(SubsetArgs),
    /// Fréchet distances between per-dataset prompt embeddings.
    Fd(FdArgs),
    /// Generate a synthetic model ensemble.
    Simulate(SimulateArgs),
    /// Write report tables from existing scores and ground truth.
    Report(ReportArgs),
    /// Run the full pipeline from a config file or a previous run's manifest.
    Run(RunArgs),
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(required = true)]
    logs: Vec<PathBuf>,
    /// Print the full report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct LogArgs {
    /// JSONL log files.
    #[arg(long = "logs", required = true, num_args = 1..)]
    logs: Vec<PathBuf>,
    /// Correctness rule per dataset, e.g. `d1=mcvq_option_letter` or
    /// `d2=relaxed_numeric:0.05`.
    #[arg(long = "rule", value_parser = parse_rule)]
    rules: Vec<(String, CorrectnessRule)>,
}

#[derive(Args)]
struct ScoreArgs {
    #[command(flatten)]
    logs: LogArgs,
    /// Methods to score (default: the eight probability-based methods).
    #[arg(long = "method", value_parser = parse_method)]
    methods: Vec<MethodKind>,
    /// Embedding prefix template with {model} and {dataset}.
    #[arg(long)]
    embeddings: Option<String>,
    /// Embedding prefix template for expanded answers.
    #[arg(long)]
    expanded: Option<String>,
    /// Option map per dataset, `DATASET=PATH`.
    #[arg(long = "options", value_parser = parse_assignment)]
    options: Vec<(String, PathBuf)>,
    /// Ground-truth CSV for AoL.
    #[arg(long)]
    performance: Option<PathBuf>,
    #[arg(long)]
    proxy: Option<String>,
    #[arg(long, default_value = "nll_min", value_parser = parse_method)]
    atc_method: MethodKind,
    #[arg(long, default_value_t = 50)]
    subset_n: usize,
    #[arg(long, default_value_t = 0)]
    subset_seed: u64,
    #[arg(long, default_value_t = 1)]
    subset_draws: usize,
    /// Write scores JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RankArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long, value_parser = parse_method)]
    method: Option<MethodKind>,
    #[arg(long)]
    dataset: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct AtcArgs {
    #[command(flatten)]
    logs: LogArgs,
    #[arg(long)]
    target: String,
    /// Proxy dataset; all other labeled datasets are averaged when omitted.
    #[arg(long)]
    proxy: Option<String>,
    #[arg(long, default_value = "nll_min", value_parser = parse_method)]
    method: MethodKind,
}

#[derive(Args)]
struct AolArgs {
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    source: String,
    #[arg(long)]
    target: String,
}

#[derive(Args)]
struct SubsetArgs {
    #[command(flatten)]
    logs: LogArgs,
    #[arg(long)]
    dataset: String,
    #[arg(long, default_value_t = 50)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    draws: usize,
}

#[derive(Args)]
struct FdArgs {
    /// Prompt embedding prefix per dataset, `DATASET=PREFIX`.
    #[arg(long = "prompts", value_parser = parse_assignment, required = true, num_args = 1..)]
    prompts: Vec<(String, PathBuf)>,
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 10)]
    n_models: usize,
    #[arg(long, default_value_t = 200)]
    n_samples: usize,
    #[arg(long, default_value = "vqa", value_parser = parse_task_kind)]
    task_kind: TaskKind,
    #[arg(long, default_value_t = 0.2)]
    accuracy_lo: f64,
    #[arg(long, default_value_t = 0.9)]
    accuracy_hi: f64,
    #[arg(long, default_value_t = 0.0)]
    calibration_noise: f64,
    #[arg(long = "vocab-size", default_values_t = [32000u64])]
    vocab_sizes: Vec<u64>,
    #[arg(long, default_value_t = 5)]
    resamples: usize,
    #[arg(long, default_value_t = 0.7)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "sim")]
    dataset_id: String,
    /// JSONL output path.
    #[arg(long)]
    out: PathBuf,
    /// Realized accuracy CSV.
    #[arg(long)]
    truth_out: Option<PathBuf>,
    /// Option map JSON (MCVQ only).
    #[arg(long)]
    options_out: Option<PathBuf>,
    /// Directory for hashed answer embeddings: `raw/` and `expanded/`
    /// subdirectories laid out as `{model}/{dataset}`.
    #[arg(long)]
    embeddings_dir: Option<PathBuf>,
    /// Prefix for hashed prompt embeddings.
    #[arg(long)]
    prompts_out: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    embedding_dim: usize,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct RunArgs {
    /// TOML or JSON run config.
    #[arg(long, conflicts_with = "replay", required_unless_present = "replay")]
    config: Option<PathBuf>,
    /// Replay the run recorded in a `run_manifest.json`.
    #[arg(long)]
    replay: Option<PathBuf>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

fn parse_method(s: &str) -> Result<MethodKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_task_kind(s: &str) -> Result<TaskKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_assignment(s: &str) -> Result<(String, PathBuf), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected KEY=VALUE, got '{s}'"))?;
    Ok((k.to_owned(), PathBuf::from(v)))
}

fn parse_rule(s: &str) -> Result<(String, CorrectnessRule), String> {
    let (d, rule) = s
        .split_once('=')
        .ok_or_else(|| format!("expected DATASET=RULE, got '{s}'"))?;
    let rule = match rule.split_once(':') {
        Some(("relaxed_numeric", tol)) => {
            let tol: f64 = tol.parse().map_err(|_| format!("bad tolerance '{tol}'"))?;
            CorrectnessRule::relaxed_numeric(tol).map_err(|e| e.to_string())?
        }
        None => match rule {
            "exact_normalized" => CorrectnessRule::ExactNormalized,
            "mcvq_option_letter" => CorrectnessRule::McvqOptionLetter,
            "contains_normalized" => CorrectnessRule::ContainsNormalized,
            other => return Err(format!("unknown rule '{other}'")),
        },
        Some(_) => return Err(format!("unknown rule '{rule}'")),
    };
    Ok((d.to_owned(), rule))
}

fn print_warnings(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn stdout_json(value: &impl serde::Serialize) -> anyhow::Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn load_logs(args: &LogArgs) -> anyhow::Result<(LogSet, BTreeMap<String, CorrectnessRule>)> {
    let (records, report) = parse_log_files(&args.logs)?;
    if !report.is_clean() {
        print_report(&report);
        return Err(Error::Validation(report.errors.len()).into());
    }
    Ok((LogSet::new(records), args.rules.iter().cloned().collect()))
}

fn print_report(report: &ValidationReport) {
    for (label, issues) in [("error", &report.errors), ("warning", &report.warnings)] {
        for i in issues {
            eprintln!(
                "{label}: {}:{}: {:?}: {}",
                i.source.as_deref().unwrap_or("-"),
                i.line,
                i.code,
                i.message
            );
        }
    }
}

fn cmd_validate(args: ValidateArgs) -> anyhow::Result<()> {
    let (_, report) = parse_log_files(&args.logs)?;
    if args.json {
        stdout_json(&report)?;
    } else {
        print_report(&report);
        println!(
            "{} record(s) accepted, {} error(s), {} warning(s)",
            report.records_accepted,
            report.errors.len(),
            report.warnings.len()
        );
    }
    if report.is_clean() {
        Ok(())
    } else {
        Err(Error::Validation(report.errors.len()).into())
    }
}

fn cmd_score(args: ScoreArgs) -> anyhow::Result<()> {
    let (logs, rules) = load_logs(&args.logs)?;
    let mut warnings = Vec::new();
    let rules = effective_rules(&rules, &logs, &mut warnings);
    let mut options: BTreeMap<String, OptionMap> = BTreeMap::new();
    for (d, p) in &args.options {
        options.insert(d.clone(), load_option_map(p)?);
    }
    let truth = match &args.performance {
        Some(p) => PerformanceTable::load_csv(p, "accuracy")?,
        None => truth_from_logs(&logs, &rules, &mut warnings)?,
    };
    let inputs = ScoringInputs {
        rules,
        truth,
        options,
        consistency_template: args.embeddings,
        expanded_template: args.expanded,
        proxy_dataset: args.proxy,
        atc_method: args.atc_method,
        subset: SubsetConfig {
            n: args.subset_n,
            seed: args.subset_seed,
            draws: args.subset_draws,
        },
    };
    let methods = if args.methods.is_empty() {
        MethodKind::PROBABILITY.to_vec()
    } else {
        args.methods
    };
    let tables = methods
        .iter()
        .map(|&m| score_method(&logs, m, &inputs, &mut warnings))
        .collect::<Result<Vec<_>, _>>()?;
    print_warnings(&warnings);
    match args.out {
        Some(p) => fs::write(&p, serde_json::to_vec_pretty(&tables)?)
            .with_context(|| format!("writing {}", p.display()))?,
        None => stdout_json(&tables)?,
    }
    Ok(())
}

fn cmd_rank(args: RankArgs) -> anyhow::Result<()> {
    let tables: Vec<ScoreTable> = load_scores(&args.scores)?
        .into_iter()
        .filter(|t| args.method.is_none_or(|m| t.method() == m))
        .map(|t| match &args.dataset {
            None => Ok(t),
            Some(d) => {
                let mut only = ScoreTable::new(t.method());
                for (k, v) in t.entries().iter().filter(|(k, _)| &k.dataset_id == d) {
                    only.insert(k.clone(), *v)?;
                }
                Ok(only)
            }
        })
        .collect::<Result<_, Error>>()?;
    write_rankings_csv(&tables, io::stdout().lock())?;
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let tables = load_scores(&args.scores)?;
    let truth = PerformanceTable::load_csv(&args.truth, "accuracy")?;
    let mut warnings = Vec::new();
    let eval = evaluate_all(&tables, &truth, &mut warnings);
    print_warnings(&warnings);
    if args.json {
        stdout_json(&eval)?;
    } else {
        eval.write_csv(io::stdout().lock())?;
    }
    Ok(())
}

fn cmd_atc(args: AtcArgs) -> anyhow::Result<()> {
    let (logs, rules) = load_logs(&args.logs)?;
    if logs.dataset_range(&args.target).is_none() {
        bail!(Error::Config(format!(
            "target dataset '{}' not in logs",
            args.target
        )));
    }
    let mut warnings = Vec::new();
    let inputs = ScoringInputs {
        rules: effective_rules(&rules, &logs, &mut warnings),
        proxy_dataset: args.proxy,
        atc_method: args.method,
        ..ScoringInputs::default()
    };
    let all = score_method(&logs, MethodKind::Atc, &inputs, &mut warnings)?;
    let mut table = ScoreTable::new(MethodKind::Atc);
    for (k, v) in all
        .entries()
        .iter()
        .filter(|(k, _)| k.dataset_id == args.target)
    {
        table.insert(k.clone(), *v)?;
    }
    print_warnings(&warnings);
    stdout_json(&table)
}

fn cmd_aol(args: AolArgs) -> anyhow::Result<()> {
    let truth = PerformanceTable::load_csv(&args.truth, "accuracy")?;
    let models: Vec<String> = truth
        .dataset_values(&args.source)
        .keys()
        .map(|m| m.to_string())
        .collect();
    let scores = aol_scores(&truth, &args.source, &args.target, &models)?;
    let fit = match aol_fit(&truth, &args.source, &args.target) {
        Ok(f) => Some(f),
        Err(e) => {
            eprintln!("warning: no fit: {e}");
            None
        }
    };
    stdout_json(&serde_json::json!({ "scores": scores, "fit": fit }))
}

fn cmd_subset(args: SubsetArgs) -> anyhow::Result<()> {
    let (logs, rules) = load_logs(&args.logs)?;
    let records = logs.dataset(&args.dataset);
    if records.is_empty() {
        bail!(Error::Config(format!(
            "dataset '{}' not in logs",
            args.dataset
        )));
    }
    let mut warnings = Vec::new();
    let rules = effective_rules(&rules, &logs, &mut warnings);
    print_warnings(&warnings);
    let table = subset_baseline_draws(
        records,
        args.n,
        args.seed,
        args.draws,
        rules.get(&args.dataset),
    )?;
    stdout_json(&table)
}

fn cmd_fd(args: FdArgs) -> anyhow::Result<()> {
    let sets = args
        .prompts
        .iter()
        .map(|(d, p)| Ok((d.clone(), EmbeddingSet::load(p)?)))
        .collect::<Result<Vec<_>, Error>>()?;
    let truth = match &args.truth {
        Some(p) => PerformanceTable::load_csv(p, "accuracy")?,
        None => PerformanceTable::new("accuracy"),
    };
    let pairs = fd_vs_correlation(&sets, &truth)?;
    write_fd_pairs_csv(&pairs, io::stdout().lock())?;
    Ok(())
}

fn create_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> anyhow::Result<()> {
    let cfg = EnsembleConfig {
        n_models: args.n_models,
        n_samples: args.n_samples,
        task_kind: args.task_kind,
        accuracy_range: (args.accuracy_lo, args.accuracy_hi),
        calibration_noise: args.calibration_noise,
        vocab_sizes: args.vocab_sizes,
        resamples_per_record: args.resamples,
        temperature: args.temperature,
        seed: args.seed,
        dataset_id: args.dataset_id,
    };
    let ensemble = generate_ensemble(&cfg)?;
    create_parent(&args.out)?;
    let mut buf = Vec::new();
    write_jsonl(&ensemble.records, &mut buf)?;
    fs::write(&args.out, buf).with_context(|| format!("writing {}", args.out.display()))?;
    if let Some(p) = &args.truth_out {
        create_parent(p)?;
        let mut buf = Vec::new();
        ensemble.truth.write_csv(&mut buf)?;
        fs::write(p, buf).with_context(|| format!("writing {}", p.display()))?;
    }
    let options = option_map(&cfg)?;
    if let Some(p) = &args.options_out {
        create_parent(p)?;
        fs::write(p, serde_json::to_vec_pretty(&options)?)
            .with_context(|| format!("writing {}", p.display()))?;
    }
    if args.embedding_dim == 0 {
        bail!(Error::Config("embedding dim must be positive".into()));
    }
    if let Some(dir) = &args.embeddings_dir {
        let expanded_opts = (cfg.task_kind == TaskKind::Mcvq).then_some(&options);
        for (sub, opts) in [("raw", None), ("expanded", expanded_opts)] {
            for (cell, set) in consistency_embeddings(&ensemble.records, args.embedding_dim, opts)?
            {
                let prefix = dir.join(sub).join(&cell.model_id).join(&cell.dataset_id);
                create_parent(&prefix)?;
                set.save(&prefix)?;
            }
        }
    }
    if let Some(p) = &args.prompts_out {
        create_parent(p)?;
        prompt_embeddings(&ensemble.records, args.embedding_dim)?.save(p)?;
    }
    eprintln!(
        "simulated {} records; true order: {}",
        ensemble.records.len(),
        ensemble.true_order.join(" ")
    );
    Ok(())
}

fn cmd_report(args: ReportArgs) -> anyhow::Result<()> {
    let tables = load_scores(&args.scores)?;
    let truth = PerformanceTable::load_csv(&args.truth, "accuracy")?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let file = |name: &str| -> anyhow::Result<fs::File> {
        let p = args.out.join(name);
        fs::File::create(&p).with_context(|| format!("writing {}", p.display()))
    };
    let mut warnings = Vec::new();
    write_rankings_csv(&tables, file("rankings.csv")?)?;
    let eval = evaluate_all(&tables, &truth, &mut warnings);
    eval.write_csv(file("eval.csv")?)?;
    let matrix = performance_correlation_matrix(&truth, &truth.datasets());
    matrix.write_csv(file("perf_corr.csv")?)?;
    serde_json::to_writer_pretty(file("aol_fit.json")?, &aol_fits(&truth))?;
    if args.json {
        serde_json::to_writer_pretty(file("eval.json")?, &eval)?;
        serde_json::to_writer_pretty(file("perf_corr.json")?, &matrix)?;
    }
    print_warnings(&warnings);
    Ok(())
}

fn cmd_run(args: RunArgs) -> anyhow::Result<()> {
    let mut cfg = match (&args.config, &args.replay) {
        (Some(c), _) => RunConfig::load(c)?,
        (None, Some(m)) => replay_config(m)?,
        (None, None) => {
            return Err(anyhow!(Error::Config(
                "--config or --replay is required".into()
            )))
        }
    };
    if let Some(out) = args.out {
        cfg.output_dir = out;
    }
    if args.threads.is_some() {
        cfg.threads = args.threads;
    }
    effective_threads(cfg.threads)?;
    let outcome = run_pipeline(&cfg)?;
    print_warnings(&outcome.warnings);
    eprintln!(
        "wrote {} file(s) to {}",
        outcome.files.len(),
        outcome.output_dir.display()
    );
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) => e.exit_code() as u8,
        None => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(3)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Validate(a) => cmd_validate(a),
        Command::Score(a) => cmd_score(a),
        Command::Rank(a) => cmd_rank(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Atc(a) => cmd_atc(a),
        Command::Aol(a) => cmd_aol(a),
        Command::Subset(a) => cmd_subset(a),
        Command::Fd(a) => cmd_fd(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Report(a) => cmd_report(a),
        Command::Run(a) => cmd_run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = exit_code(&err);
            let kind = match code {
                2 => "validation",
                4 => "numeric",
                _ => "config",
            };
            eprintln!("error[{kind}]: {err:#}");
            ExitCode::from(code)
        }
    }
}
