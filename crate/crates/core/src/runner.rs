//! Run orchestration: config loading, batched provider scoring with a worker
//! pool, an append-only results store with per-sample resume, and report
//! emission.
//!
//! The results log and report files are byte-deterministic: per-sample work
//! is pure, batch outputs are written back in benchmark order, and the
//! embedded config digest covers only semantic fields (benchmark content,
//! provider, metrics, seed, checkpoint label) — never execution parameters
//! like worker count or batch size. Interrupted runs resume per sample and
//! converge to the same bytes as an uninterrupted run.

use crate::analysis::{self, AnalysisError, GroupBy};
use crate::bench::{self, BenchError, BenchmarkManifest, Sample, ValidationReport};
use crate::hash;
use crate::metrics::{self, CandidateScore, Metric, MetricsError, SampleResult};
use crate::provider::{self, LogitProvider, ProviderError, ProviderRegistry, ProviderSpec};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

fn default_batch_size() -> usize {
    64
}

fn default_worker_count() -> usize {
    1
}

/// Everything one evaluation run needs. Relative paths resolve against the
/// config file's directory when loaded from disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub provider: ProviderSpec,
    pub metrics: Vec<Metric>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub checkpoint_step: Option<u64>,
    #[serde(default = "default_worker_count")]
    pub worker_count: usize,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, RunnerError> {
        let text = fs::read_to_string(path).map_err(|err| RunnerError::Io {
            path: path.to_path_buf(),
            err,
        })?;
        let mut config: RunConfig = serde_json::from_str(&text)
            .map_err(|err| RunnerError::Config(format!("{}: {err}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if config.manifest.is_relative() {
            config.manifest = base.join(&config.manifest);
        }
        if config.output_dir.is_relative() {
            config.output_dir = base.join(&config.output_dir);
        }
        if let ProviderSpec::Table { path } | ProviderSpec::Precomputed { path } =
            &mut config.provider
        {
            if path.is_relative() {
                *path = base.join(&path);
            }
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), RunnerError> {
        if self.metrics.is_empty() {
            return Err(RunnerError::Config("no metrics requested".into()));
        }
        if self.batch_size == 0 {
            return Err(RunnerError::Config("batch_size must be >= 1".into()));
        }
        if self.worker_count == 0 {
            return Err(RunnerError::Config("worker_count must be >= 1".into()));
        }
        Ok(())
    }

    /// Requested metrics, deduplicated in stable enum order.
    pub fn sorted_metrics(&self) -> Vec<Metric> {
        let set: BTreeSet<Metric> = self.metrics.iter().copied().collect();
        set.into_iter().collect()
    }
}

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("config error: {0}")]
    Config(String),
    #[error("manifest validation failed for {0}")]
    Validation(Box<ValidationReport>),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("results store digest mismatch: store has {found}, run expects {expected}")]
    DigestMismatch { expected: String, found: String },
    #[error("duplicate result for sample {0}")]
    DuplicateResult(String),
    #[error("{0} has no header line")]
    MissingHeader(PathBuf),
    #[error("no results in store")]
    EmptyResults,
    #[error("io error on {path}: {err}")]
    Io { path: PathBuf, err: std::io::Error },
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.manifest_name)
    }
}

/// Self-describing identity of a results log. Execution parameters (worker
/// count, batch size, output paths) are deliberately not part of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreHeader {
    pub digest: String,
    pub manifest_name: String,
    pub benchmark_digest: String,
    pub provider: ProviderSpec,
    pub metrics: Vec<Metric>,
    pub seed: u64,
    #[serde(default)]
    pub checkpoint_step: Option<u64>,
}

impl StoreHeader {
    fn build(
        manifest_name: String,
        benchmark_digest: String,
        provider: ProviderSpec,
        metrics: Vec<Metric>,
        seed: u64,
        checkpoint_step: Option<u64>,
    ) -> StoreHeader {
        let core = serde_json::json!({
            "manifest_name": manifest_name,
            "benchmark_digest": benchmark_digest,
            "provider": provider,
            "metrics": metrics,
            "seed": seed,
            "checkpoint_step": checkpoint_step,
        });
        let digest = hash::hex_digest(core.to_string().as_bytes());
        StoreHeader {
            digest,
            manifest_name,
            benchmark_digest,
            provider,
            metrics,
            seed,
            checkpoint_step,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum StoreLine {
    Header(StoreHeader),
    Result(SampleResult),
    Failure { sample_id: String, error: String },
}

/// A record that could not be scored.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FailureRecord {
    pub sample_id: String,
    pub error: String,
}

/// Parsed contents of a results log.
#[derive(Debug)]
pub struct StoreContents {
    pub header: StoreHeader,
    /// Successful results in file order, one per sample.
    pub results: Vec<SampleResult>,
    /// Failure records; a sample with a later success is not failed.
    pub failures: Vec<FailureRecord>,
}

impl StoreContents {
    /// Failures without a subsequent successful result.
    pub fn unresolved_failures(&self) -> Vec<&FailureRecord> {
        let done: BTreeSet<&str> = self.results.iter().map(|r| r.sample_id.as_str()).collect();
        let mut seen = BTreeSet::new();
        self.failures
            .iter()
            .filter(|f| !done.contains(f.sample_id.as_str()) && seen.insert(f.sample_id.as_str()))
            .collect()
    }
}

/// Reads a results log, rejecting duplicate sample results and mixed
/// headers. A trailing partial line (interrupted write) is ignored.
pub fn load_store(path: &Path) -> Result<StoreContents, RunnerError> {
    let io_err = |err| RunnerError::Io {
        path: path.to_path_buf(),
        err,
    };
    let bytes = fs::read(path).map_err(io_err)?;
    let mut header: Option<StoreHeader> = None;
    let mut results = Vec::new();
    let mut failures = Vec::new();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    let complete = match bytes.iter().rposition(|&b| b == b'\n') {
        Some(pos) => &bytes[..=pos],
        None => &[][..],
    };
    for line in complete.split(|&b| b == b'\n') {
        if line.is_empty() {
            continue;
        }
        let text = std::str::from_utf8(line).map_err(|e| {
            RunnerError::Config(format!("{}: non-UTF-8 store line: {e}", path.display()))
        })?;
        let parsed: StoreLine = serde_json::from_str(text).map_err(|e| {
            RunnerError::Config(format!("{}: malformed store line: {e}", path.display()))
        })?;
        match parsed {
            StoreLine::Header(h) => match &header {
                None => header = Some(h),
                Some(existing) if existing.digest == h.digest => {}
                Some(existing) => {
                    return Err(RunnerError::DigestMismatch {
                        expected: existing.digest.clone(),
                        found: h.digest,
                    })
                }
            },
            StoreLine::Result(r) => {
                if !seen.insert(r.sample_id.clone()) {
                    return Err(RunnerError::DuplicateResult(r.sample_id));
                }
                results.push(r);
            }
            StoreLine::Failure { sample_id, error } => {
                failures.push(FailureRecord { sample_id, error })
            }
        }
    }
    let header = header.ok_or_else(|| RunnerError::MissingHeader(path.to_path_buf()))?;
    Ok(StoreContents {
        header,
        results,
        failures,
    })
}

#[derive(Debug, Error)]
enum ScoreError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

fn score_one(
    provider: &dyn LogitProvider,
    sample: &Sample,
    want_nll: bool,
) -> Result<SampleResult, ScoreError> {
    let mut scores = Vec::with_capacity(sample.candidates.len());
    for j in 0..sample.candidates.len() {
        let tl = provider::score_tokens(provider, sample, j)?;
        let mut cs = CandidateScore::from_logits(j, &tl);
        if want_nll {
            let nlls = provider::label_nll(provider, sample, j)?;
            cs = cs.with_nll(&nlls);
        }
        scores.push(cs);
    }
    Ok(metrics::score_sample(sample, &scores)?)
}

/// Scores samples one by one on the calling thread.
pub fn score_samples_sequential(
    provider: &dyn LogitProvider,
    samples: &[Sample],
    want_nll: bool,
) -> Vec<Result<SampleResult, String>> {
    samples
        .iter()
        .map(|s| score_one(provider, s, want_nll).map_err(|e| e.to_string()))
        .collect()
}

/// Scores samples on a dedicated pool of `workers` threads. Output order and
/// content are identical to the sequential path.
#[cfg(feature = "parallel")]
pub fn score_samples_parallel(
    provider: &dyn LogitProvider,
    samples: &[Sample],
    want_nll: bool,
    workers: usize,
) -> Vec<Result<SampleResult, String>> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .expect("worker pool");
    pool.install(|| {
        samples
            .par_iter()
            .map(|s| score_one(provider, s, want_nll).map_err(|e| e.to_string()))
            .collect()
    })
}

/// Summary of one evaluate run. Wall time is informational and excluded from
/// all deterministic outputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub digest: String,
    pub total: usize,
    pub scored: usize,
    pub resumed: usize,
    pub failed: usize,
    pub wall_ms: u128,
    pub results_path: PathBuf,
    pub report_paths: Vec<PathBuf>,
}

fn append_lines(path: &Path, lines: &[String]) -> Result<(), RunnerError> {
    let io_err = |err| RunnerError::Io {
        path: path.to_path_buf(),
        err,
    };
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err)?;
    for line in lines {
        writeln!(file, "{line}").map_err(io_err)?;
    }
    file.flush().map_err(io_err)
}

/// Truncates a trailing partial line left by an interrupted writer.
fn repair_tail(path: &Path) -> Result<(), RunnerError> {
    let io_err = |err| RunnerError::Io {
        path: path.to_path_buf(),
        err,
    };
    let bytes = fs::read(path).map_err(io_err)?;
    if let Some(pos) = bytes.iter().rposition(|&b| b == b'\n') {
        if pos + 1 != bytes.len() {
            let file = fs::OpenOptions::new()
                .write(true)
                .open(path)
                .map_err(io_err)?;
            file.set_len((pos + 1) as u64).map_err(io_err)?;
        }
    }
    Ok(())
}

/// Runs one evaluation: loads and validates the benchmark, scores every
/// sample not already in the results log, and emits reports. Rerunning after
/// an interruption scores only the missing samples and produces byte-identical
/// outputs.
pub fn evaluate(
    config: &RunConfig,
    registry: &ProviderRegistry,
) -> Result<RunSummary, RunnerError> {
    let started = Instant::now();
    config.validate()?;
    let metrics_wanted = config.sorted_metrics();

    let manifest = BenchmarkManifest::load(&config.manifest)?;
    let manifest_dir = config
        .manifest
        .parent()
        .unwrap_or(Path::new("."))
        .to_path_buf();
    let validation = bench::validate_manifest(&manifest, &manifest_dir);
    if !validation.passed {
        return Err(RunnerError::Validation(Box::new(validation)));
    }

    let mut samples = Vec::new();
    for entry in &manifest.entries {
        let path = if entry.file.is_absolute() {
            entry.file.clone()
        } else {
            manifest_dir.join(&entry.file)
        };
        samples.extend(bench::load_samples(&path, Some(entry.task))?);
    }

    let provider = provider::build_provider(&config.provider, registry)?;
    let want_nll = metrics_wanted.iter().any(|m| m.needs_nll());
    if want_nll && !provider.supports_nll() {
        return Err(RunnerError::Config(format!(
            "metrics {:?} need label NLLs but the {} provider does not expose them",
            metrics_wanted
                .iter()
                .filter(|m| m.needs_nll())
                .map(|m| m.name())
                .collect::<Vec<_>>(),
            provider.kind(),
        )));
    }

    let mut bench_hasher = hash::Hasher64::new();
    for s in &samples {
        bench_hasher.update(bench::canonical_line(s).as_bytes());
        bench_hasher.update(b"\n");
    }
    let header = StoreHeader::build(
        manifest.name.clone(),
        format!("{:016x}", bench_hasher.finish()),
        config.provider.clone(),
        metrics_wanted.clone(),
        config.seed,
        config.checkpoint_step,
    );

    fs::create_dir_all(&config.output_dir).map_err(|err| RunnerError::Io {
        path: config.output_dir.clone(),
        err,
    })?;
    let results_path = config.output_dir.join("results.jsonl");

    let mut completed: BTreeSet<String> = BTreeSet::new();
    let mut accumulated: Vec<SampleResult> = Vec::new();
    let mut failures_by_id: std::collections::BTreeMap<String, String> = Default::default();
    if results_path.exists() {
        repair_tail(&results_path)?;
        let existing = load_store(&results_path)?;
        if existing.header != header {
            return Err(RunnerError::DigestMismatch {
                expected: header.digest,
                found: existing.header.digest,
            });
        }
        completed.extend(existing.results.iter().map(|r| r.sample_id.clone()));
        for f in existing.unresolved_failures() {
            failures_by_id.insert(f.sample_id.clone(), f.error.clone());
        }
        accumulated = existing.results;
    } else {
        let line =
            serde_json::to_string(&StoreLine::Header(header.clone())).expect("header serializes");
        append_lines(&results_path, &[line])?;
    }

    let workers = if provider.reentrant() {
        config.worker_count
    } else {
        1
    };
    let pending: Vec<&Sample> = samples
        .iter()
        .filter(|s| !completed.contains(&s.id))
        .collect();
    let resumed = samples.len() - pending.len();

    let mut scored = 0usize;
    for batch in pending.chunks(config.batch_size) {
        let owned: Vec<Sample> = batch.iter().map(|s| (*s).clone()).collect();
        let outcomes = run_batch(provider.as_ref(), &owned, want_nll, workers);
        let mut lines = Vec::with_capacity(outcomes.len());
        for (sample, outcome) in owned.iter().zip(outcomes) {
            let line = match outcome {
                Ok(result) => {
                    scored += 1;
                    failures_by_id.remove(&result.sample_id);
                    accumulated.push(result.clone());
                    StoreLine::Result(result)
                }
                Err(error) => {
                    failures_by_id.insert(sample.id.clone(), error.clone());
                    StoreLine::Failure {
                        sample_id: sample.id.clone(),
                        error,
                    }
                }
            };
            lines.push(serde_json::to_string(&line).expect("store line serializes"));
        }
        append_lines(&results_path, &lines)?;
    }

    // Metrics never see failures: denominators cover successes only.
    accumulated.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let mut report_paths = Vec::new();
    if !accumulated.is_empty() {
        report_paths = emit_reports(
            &accumulated,
            &metrics_wanted,
            config.checkpoint_step,
            &header.digest,
            &config.output_dir.join("reports"),
        )?;
    }

    // failures listed separately, next to the log they came from
    let failures_path = config.output_dir.join("failures.jsonl");
    if failures_by_id.is_empty() {
        let _ = fs::remove_file(&failures_path);
    } else {
        let lines: Vec<String> = failures_by_id
            .iter()
            .map(|(sample_id, error)| {
                serde_json::to_string(&FailureRecord {
                    sample_id: sample_id.clone(),
                    error: error.clone(),
                })
                .expect("failure record serializes")
            })
            .collect();
        fs::write(&failures_path, format!("{}\n", lines.join("\n"))).map_err(|err| {
            RunnerError::Io {
                path: failures_path.clone(),
                err,
            }
        })?;
    }

    let summary = RunSummary {
        digest: header.digest,
        total: samples.len(),
        scored,
        resumed,
        failed: failures_by_id.len(),
        wall_ms: started.elapsed().as_millis(),
        results_path,
        report_paths,
    };
    let summary_path = config.output_dir.join("summary.json");
    fs::write(
        &summary_path,
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )
    .map_err(|err| RunnerError::Io {
        path: summary_path,
        err,
    })?;
    Ok(summary)
}

fn run_batch(
    provider: &dyn LogitProvider,
    batch: &[Sample],
    want_nll: bool,
    workers: usize,
) -> Vec<Result<SampleResult, String>> {
    #[cfg(feature = "parallel")]
    {
        if workers > 1 {
            return score_samples_parallel(provider, batch, want_nll, workers);
        }
    }
    let _ = workers;
    score_samples_sequential(provider, batch, want_nll)
}

/// Renders reports as TSV with a stable column order; values keep full
/// precision.
pub fn reports_to_tsv(reports: &[metrics::TaskReport], digest: &str) -> String {
    let mut out = format!("# digest\t{digest}\n");
    out.push_str("metric\tability\ttask\tsource\tvalue\tn\tcheckpoint_step\n");
    for r in reports {
        let task = r.task.map(|t| t.name().to_owned()).unwrap_or("-".into());
        let source = r.source.clone().unwrap_or("-".into());
        let step = r
            .checkpoint_step
            .map(|s| s.to_string())
            .unwrap_or("-".into());
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.metric, r.ability, task, source, r.value, r.n, step
        ));
    }
    out
}

fn emit_reports(
    results: &[SampleResult],
    metrics_wanted: &[Metric],
    checkpoint_step: Option<u64>,
    digest: &str,
    dir: &Path,
) -> Result<Vec<PathBuf>, RunnerError> {
    fs::create_dir_all(dir).map_err(|err| RunnerError::Io {
        path: dir.to_path_buf(),
        err,
    })?;
    let mut paths = Vec::new();
    for (group_by, name) in [
        (GroupBy::Source, "by_source.tsv"),
        (GroupBy::Task, "by_task.tsv"),
        (GroupBy::Ability, "by_ability.tsv"),
    ] {
        let reports = analysis::aggregate(results, group_by, metrics_wanted, checkpoint_step)?;
        let path = dir.join(name);
        fs::write(&path, reports_to_tsv(&reports, digest)).map_err(|err| RunnerError::Io {
            path: path.clone(),
            err,
        })?;
        paths.push(path);
    }
    Ok(paths)
}

/// Resolves a results locator: either the log file itself or a directory
/// containing `results.jsonl`.
pub fn resolve_results_path(locator: &Path) -> PathBuf {
    if locator.is_dir() {
        locator.join("results.jsonl")
    } else {
        locator.to_path_buf()
    }
}

/// Loads a store and aggregates it at one grouping level. Metrics default to
/// the ones recorded in the header. Deterministic and idempotent.
pub fn report(
    locator: &Path,
    group_by: GroupBy,
    metrics_override: Option<&[Metric]>,
) -> Result<(StoreHeader, Vec<metrics::TaskReport>), RunnerError> {
    let store = load_store(&resolve_results_path(locator))?;
    if store.results.is_empty() {
        return Err(RunnerError::EmptyResults);
    }
    let metrics_wanted: Vec<Metric> = match metrics_override {
        Some(m) => m.to_vec(),
        None => store.header.metrics.clone(),
    };
    let mut results = store.results;
    results.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let reports = analysis::aggregate(
        &results,
        group_by,
        &metrics_wanted,
        store.header.checkpoint_step,
    )?;
    Ok((store.header, reports))
}

/// Builds a checkpoint series from a directory of run outputs. Every store
/// must carry a checkpoint step label; task-level reports for `metric` become
/// the series points, ordered by step.
pub fn collect_series(
    dir: &Path,
    metric: Metric,
) -> Result<analysis::CheckpointSeries, RunnerError> {
    let io_err = |err| RunnerError::Io {
        path: dir.to_path_buf(),
        err,
    };
    let mut stores = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err)? {
        let entry = entry.map_err(io_err)?;
        let path = entry.path();
        let candidate = if path.is_dir() {
            path.join("results.jsonl")
        } else if path.file_name().is_some_and(|n| n == "results.jsonl") {
            path.clone()
        } else {
            continue;
        };
        if candidate.exists() {
            stores.push(candidate);
        }
    }
    if stores.is_empty() {
        return Err(RunnerError::EmptyResults);
    }
    let mut points = Vec::new();
    for store_path in stores {
        let store = load_store(&store_path)?;
        let step = store.header.checkpoint_step.ok_or_else(|| {
            RunnerError::Config(format!(
                "{} has no checkpoint_step label",
                store_path.display()
            ))
        })?;
        if store.results.is_empty() {
            return Err(RunnerError::EmptyResults);
        }
        let mut results = store.results;
        results.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        let reports = analysis::aggregate(&results, GroupBy::Task, &[metric], Some(step))?;
        points.push((step, reports));
    }
    points.sort_by_key(|(step, _)| *step);
    let mut series = analysis::CheckpointSeries::new(&dir.display().to_string());
    for (step, reports) in points {
        series.push(step, reports)?;
    }
    Ok(series)
}
