//! Command-line front end: validate benchmarks, reformat sources, run
//! evaluations, and emit analysis tables.
//!
//! Exit codes: 0 success, 2 config error, 3 partial (some records failed),
//! 4 validation failure, 1 anything else.

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};
use softeval_core::analysis::{self, GroupBy};
use softeval_core::bench::{self, BenchmarkManifest, TaskCategory};
use softeval_core::metrics::Metric;
use softeval_core::provider::ProviderRegistry;
use softeval_core::reformat::{
    self,
    ingest::{self, SourceConfig},
    llm::{HttpChatClient, LlmClient},
    DistractorPolicy,
};
use softeval_core::runner::{self, RunConfig, RunnerError};
use std::path::{Path, PathBuf};

const EXIT_CONFIG: i32 = 2;
const EXIT_PARTIAL: i32 = 3;
const EXIT_VALIDATION: i32 = 4;

#[derive(Parser)]
#[command(
    name = "softeval",
    version,
    about = "Decoding-free candidate-scoring evaluation for pre-trained multi-modal checkpoints"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a benchmark manifest: files, per-entry counts, grand total.
    Validate { manifest: PathBuf },
    /// Reformat a source benchmark into the unified candidate format.
    Reformat {
        source_config: PathBuf,
        policy: PathBuf,
    },
    /// Score a benchmark under a provider and emit reports.
    Evaluate { run_config: PathBuf },
    /// Aggregate a results log into a report table.
    Report {
        results: PathBuf,
        #[arg(long, default_value = "source", value_parser = parse_group_by)]
        group_by: GroupBy,
        /// Comma-separated metric subset; defaults to the run's metrics.
        #[arg(long)]
        metrics: Option<String>,
        /// Round values half-even to 3 decimals for display (files keep full
        /// precision without this flag).
        #[arg(long)]
        round: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pearson correlation between two step/label/score tables.
    Correlate {
        pre: PathBuf,
        post: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Metric stability across evaluation sample sizes.
    Reliability {
        results: PathBuf,
        /// Comma-separated subsample sizes, strictly increasing.
        #[arg(long)]
        sizes: String,
        #[arg(long, default_value_t = 1)]
        resamples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Steps-by-tasks metric matrix over a directory of checkpoint runs.
    Series {
        results_dir: PathBuf,
        #[arg(long, default_value = "sds", value_parser = parse_metric)]
        metric: Metric,
        /// Comma-separated task filter.
        #[arg(long)]
        tasks: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_group_by(s: &str) -> Result<GroupBy, String> {
    GroupBy::parse_name(s).ok_or_else(|| format!("unknown group-by {s:?} (source|task|ability)"))
}

fn parse_metric(s: &str) -> Result<Metric, String> {
    Metric::parse_name(s)
        .ok_or_else(|| format!("unknown metric {s:?} (sds|acc_logits|acc_ppl|ppl|nll)"))
}

fn parse_metric_list(s: &str) -> Result<Vec<Metric>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| parse_metric(p).map_err(|e| anyhow!(e)))
        .collect()
}

fn parse_task_list(s: &str) -> Result<Vec<TaskCategory>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| TaskCategory::parse_name(p).ok_or_else(|| anyhow!("unknown task {p:?}")))
        .collect()
}

fn write_or_print(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => {
            std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            err.downcast_ref::<RunnerError>()
                .map(exit_code_for)
                .unwrap_or(1)
        }
    };
    std::process::exit(code);
}

fn exit_code_for(err: &RunnerError) -> i32 {
    match err {
        RunnerError::Config(_) | RunnerError::DigestMismatch { .. } => EXIT_CONFIG,
        RunnerError::Validation(_) => EXIT_VALIDATION,
        RunnerError::Provider(_) => EXIT_CONFIG,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Validate { manifest } => cmd_validate(&manifest),
        Command::Reformat {
            source_config,
            policy,
        } => cmd_reformat(&source_config, &policy),
        Command::Evaluate { run_config } => cmd_evaluate(&run_config),
        Command::Report {
            results,
            group_by,
            metrics,
            round,
            out,
        } => cmd_report(
            &results,
            group_by,
            metrics.as_deref(),
            round,
            out.as_deref(),
        ),
        Command::Correlate { pre, post, out } => cmd_correlate(&pre, &post, out.as_deref()),
        Command::Reliability {
            results,
            sizes,
            resamples,
            seed,
            out,
        } => cmd_reliability(&results, &sizes, resamples, seed, out.as_deref()),
        Command::Series {
            results_dir,
            metric,
            tasks,
            out,
        } => cmd_series(&results_dir, metric, tasks.as_deref(), out.as_deref()),
    }
}

fn cmd_validate(manifest_path: &Path) -> Result<i32> {
    let manifest = BenchmarkManifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let report = bench::validate_manifest(&manifest, base);
    for entry in &report.entries {
        let status = if entry.passed { "PASS" } else { "FAIL" };
        let found = entry
            .found
            .map(|f| f.to_string())
            .unwrap_or_else(|| "-".into());
        let detail = entry
            .detail
            .as_deref()
            .map(|d| format!(" ({d})"))
            .unwrap_or_default();
        println!(
            "{status} {} [{}]: declared {}, found {found}{detail}",
            entry.source, entry.task, entry.declared
        );
    }
    println!(
        "{}: declared_total {}, counted {} -> {}",
        report.manifest_name,
        report.declared_total,
        report.counted_total,
        if report.passed { "PASS" } else { "FAIL" }
    );
    Ok(if report.passed { 0 } else { EXIT_VALIDATION })
}

fn cmd_reformat(source_config_path: &Path, policy_path: &Path) -> Result<i32> {
    let config = SourceConfig::load(source_config_path)?;
    let policy = DistractorPolicy::load(policy_path)?;
    let base = source_config_path.parent().unwrap_or(Path::new("."));
    let records = ingest::read_source_records(&config, base)?;

    let client: Option<Box<dyn LlmClient>> = match &policy.llm {
        Some(llm_config) => Some(Box::new(
            HttpChatClient::new(llm_config.clone())
                .map_err(|e| RunnerError::Config(e.to_string()))?,
        )),
        None => None,
    };
    let batch = reformat::reformat_records(&records, &policy, client.as_deref());

    let output = if config.output.is_relative() {
        base.join(&config.output)
    } else {
        config.output.clone()
    };
    let review = if config.review_output().is_relative() {
        base.join(config.review_output())
    } else {
        config.review_output()
    };
    let audit = if config.audit_output().is_relative() {
        base.join(config.audit_output())
    } else {
        config.audit_output()
    };
    reformat::write_batch(&batch, &output, &review, &audit)?;

    println!(
        "reformatted {}: {} samples written to {}, {} failure(s)",
        config.source,
        batch.samples.len(),
        output.display(),
        batch.failures.len()
    );
    for failure in &batch.failures {
        eprintln!("failed {}: {}", failure.record_id, failure.error);
    }
    Ok(if batch.failures.is_empty() {
        0
    } else {
        EXIT_PARTIAL
    })
}

fn cmd_evaluate(run_config_path: &Path) -> Result<i32> {
    let config = RunConfig::load(run_config_path)?;
    let registry = ProviderRegistry::new();
    match runner::evaluate(&config, &registry) {
        Ok(summary) => {
            println!(
                "run {}: {} samples ({} scored, {} resumed, {} failed) in {} ms",
                summary.digest,
                summary.total,
                summary.scored,
                summary.resumed,
                summary.failed,
                summary.wall_ms
            );
            println!("results: {}", summary.results_path.display());
            for path in &summary.report_paths {
                println!("report: {}", path.display());
            }
            Ok(if summary.failed > 0 { EXIT_PARTIAL } else { 0 })
        }
        Err(RunnerError::Validation(report)) => {
            for entry in &report.entries {
                if !entry.passed {
                    eprintln!(
                        "FAIL {}: {}",
                        entry.source,
                        entry.detail.as_deref().unwrap_or("count mismatch")
                    );
                }
            }
            eprintln!(
                "manifest {} failed validation (declared {}, counted {})",
                report.manifest_name, report.declared_total, report.counted_total
            );
            Ok(EXIT_VALIDATION)
        }
        Err(err) => Err(err.into()),
    }
}

fn cmd_report(
    results: &Path,
    group_by: GroupBy,
    metrics: Option<&str>,
    round: bool,
    out: Option<&Path>,
) -> Result<i32> {
    let metric_list = metrics.map(parse_metric_list).transpose()?;
    let (header, mut reports) = runner::report(results, group_by, metric_list.as_deref())?;
    if round {
        for r in &mut reports {
            r.value = analysis::round_half_even(r.value, 3);
        }
    }
    write_or_print(&runner::reports_to_tsv(&reports, &header.digest), out)?;
    Ok(0)
}

fn cmd_correlate(pre: &Path, post: &Path, out: Option<&Path>) -> Result<i32> {
    let pre_rows = analysis::read_score_table(pre)?;
    let post_rows = analysis::read_score_table(post)?;
    let pairs = analysis::correlation_pairs(&pre_rows, &post_rows)?;
    if pairs.is_empty() {
        return Err(anyhow!("no label appears in both tables"));
    }
    let mut text = String::from("label\tn\tpearson_r\n");
    let mut failures = 0usize;
    for pair in &pairs {
        match analysis::pearson(pair) {
            Ok(r) => text.push_str(&format!(
                "{}\t{}\t{}\n",
                pair.label,
                pair.pre_scores.len(),
                r
            )),
            Err(err) => {
                failures += 1;
                eprintln!("skipping {}: {err}", pair.label);
            }
        }
    }
    write_or_print(&text, out)?;
    Ok(if failures == 0 { 0 } else { EXIT_PARTIAL })
}

fn cmd_reliability(
    results: &Path,
    sizes: &str,
    resamples: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<i32> {
    let sizes: Vec<usize> = sizes
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().with_context(|| format!("bad size {p:?}")))
        .collect::<Result<_>>()?;
    let store = runner::load_store(&runner::resolve_results_path(results))?;
    if store.results.is_empty() {
        return Err(RunnerError::EmptyResults.into());
    }
    let mut sorted = store.results;
    sorted.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let curve = analysis::reliability_curve(&sorted, &sizes, resamples, seed)?;
    let mut text = String::from("size\tsds\tresample_std\n");
    for ((size, value), std) in curve
        .sample_sizes
        .iter()
        .zip(&curve.values)
        .zip(&curve.resample_std)
    {
        text.push_str(&format!("{size}\t{value}\t{std}\n"));
    }
    write_or_print(&text, out)?;
    Ok(0)
}

fn cmd_series(
    results_dir: &Path,
    metric: Metric,
    tasks: Option<&str>,
    out: Option<&Path>,
) -> Result<i32> {
    let task_filter = tasks.map(parse_task_list).transpose()?;
    let series = runner::collect_series(results_dir, metric)?;
    let table = analysis::series_table(&series, metric, task_filter.as_deref())?;
    write_or_print(&table.to_tsv(), out)?;
    Ok(0)
}
