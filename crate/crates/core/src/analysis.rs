//! Aggregation and trajectory analysis over scored results.
//!
//! Reports are computed bottom-up: metric values are evaluated per source
//! group, and task- and ability-level rows are unweighted means of their
//! source-level values (the convention the per-ability "average" columns
//! follow), with `n` summing the samples involved.

use crate::bench::{Ability, TaskCategory};
use crate::hash;
use crate::metrics::{self, Metric, MetricsError, RankStrategy, SampleResult, TaskReport};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("no results to analyze")]
    Empty,
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("correlation pair {label:?}: {pre} pre scores vs {post} post scores")]
    LengthMismatch {
        label: String,
        pre: usize,
        post: usize,
    },
    #[error("correlation pair {label:?} has {n} point(s), need at least 2")]
    TooFewPoints { label: String, n: usize },
    #[error("correlation pair {label:?}: the {axis} scores are constant, r is undefined")]
    ConstantVector { label: String, axis: &'static str },
    #[error("correlation pair {label:?}: non-finite {axis} score")]
    NonFinite { label: String, axis: &'static str },
    #[error("sample sizes must be strictly increasing and >= 1")]
    SizesNotIncreasing,
    #[error("sample size {size} exceeds available results {available}")]
    SizeTooLarge { size: usize, available: usize },
    #[error("resample count must be >= 1")]
    ZeroResamples,
    #[error("checkpoint steps must be strictly increasing: {prev} then {next}")]
    StepsNotIncreasing { prev: u64, next: u64 },
    #[error("task {0:?} does not appear in the series")]
    UnknownTask(String),
    #[error("metric {0} has no rows in the series")]
    UnknownMetric(Metric),
    #[error("duplicate score row for step {step}, label {label:?}")]
    DuplicateScoreRow { step: u64, label: String },
    #[error("{path}:{line}: malformed score table: {msg}")]
    MalformedTable {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("io error on {path}: {err}")]
    Io { path: PathBuf, err: std::io::Error },
}

/// Grouping level for [`aggregate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupBy {
    Source,
    Task,
    Ability,
}

impl GroupBy {
    pub fn parse_name(name: &str) -> Option<GroupBy> {
        match name {
            "source" => Some(GroupBy::Source),
            "task" => Some(GroupBy::Task),
            "ability" => Some(GroupBy::Ability),
            _ => None,
        }
    }
}

struct SourceCell {
    ability: Ability,
    task: TaskCategory,
    source: String,
    value: f64,
    n: usize,
}

fn metric_over(results: &[&SampleResult], metric: Metric) -> Result<f64, MetricsError> {
    let owned: Vec<SampleResult> = results.iter().map(|r| (*r).clone()).collect();
    match metric {
        Metric::Sds => metrics::sds(&owned),
        Metric::AccLogits => metrics::accuracy(&owned, RankStrategy::Logits),
        Metric::AccPpl => metrics::accuracy(&owned, RankStrategy::Ppl),
        Metric::Ppl | Metric::Nll => {
            let mut total = 0.0;
            let mut tokens = 0usize;
            for r in results {
                let sum = r.answer_nll_sum.ok_or(MetricsError::MissingNll)?;
                total += sum;
                tokens += r.answer_token_count;
            }
            if tokens == 0 {
                return Err(MetricsError::Empty);
            }
            let nll = total / tokens as f64;
            Ok(if metric == Metric::Ppl {
                nll.exp()
            } else {
                nll
            })
        }
    }
}

/// Aggregates results into one report per group per metric. Source-level
/// values are the metric over the group's samples; task- and ability-level
/// values are unweighted means of their source-level values.
pub fn aggregate(
    results: &[SampleResult],
    group_by: GroupBy,
    requested: &[Metric],
    checkpoint_step: Option<u64>,
) -> Result<Vec<TaskReport>, AnalysisError> {
    if results.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let mut groups: BTreeMap<(Ability, TaskCategory, &str), Vec<&SampleResult>> = BTreeMap::new();
    for r in results {
        groups
            .entry((r.task.ability(), r.task, r.source.as_str()))
            .or_default()
            .push(r);
    }

    let mut reports = Vec::new();
    for &metric in requested {
        let mut cells = Vec::with_capacity(groups.len());
        for ((ability, task, source), members) in &groups {
            cells.push(SourceCell {
                ability: *ability,
                task: *task,
                source: (*source).to_owned(),
                value: metric_over(members, metric)?,
                n: members.len(),
            });
        }
        match group_by {
            GroupBy::Source => {
                for cell in cells {
                    reports.push(TaskReport {
                        metric,
                        ability: cell.ability,
                        task: Some(cell.task),
                        source: Some(cell.source),
                        value: cell.value,
                        n: cell.n,
                        checkpoint_step,
                    });
                }
            }
            GroupBy::Task => {
                let mut by_task: BTreeMap<(Ability, TaskCategory), Vec<&SourceCell>> =
                    BTreeMap::new();
                for cell in &cells {
                    by_task
                        .entry((cell.ability, cell.task))
                        .or_default()
                        .push(cell);
                }
                for ((ability, task), members) in by_task {
                    reports.push(TaskReport {
                        metric,
                        ability,
                        task: Some(task),
                        source: None,
                        value: unweighted_mean(members.iter().map(|c| c.value)),
                        n: members.iter().map(|c| c.n).sum(),
                        checkpoint_step,
                    });
                }
            }
            GroupBy::Ability => {
                let mut by_ability: BTreeMap<Ability, Vec<&SourceCell>> = BTreeMap::new();
                for cell in &cells {
                    by_ability.entry(cell.ability).or_default().push(cell);
                }
                for (ability, members) in by_ability {
                    reports.push(TaskReport {
                        metric,
                        ability,
                        task: None,
                        source: None,
                        value: unweighted_mean(members.iter().map(|c| c.value)),
                        n: members.iter().map(|c| c.n).sum(),
                        checkpoint_step,
                    });
                }
            }
        }
    }
    Ok(reports)
}

fn unweighted_mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for v in values {
        total += v;
        count += 1;
    }
    total / count as f64
}

/// Half-even rounding for display at table precision; raw values stay at
/// full precision everywhere else.
pub fn round_half_even(value: f64, decimals: u32) -> f64 {
    let scale = 10f64.powi(decimals as i32);
    let scaled = value * scale;
    let floor = scaled.floor();
    let frac = scaled - floor;
    let eps = 1e-9 * scaled.abs().max(1.0);
    let rounded = if (frac - 0.5).abs() <= eps {
        if (floor as i64).rem_euclid(2) == 0 {
            floor
        } else {
            floor + 1.0
        }
    } else {
        scaled.round()
    };
    rounded / scale
}

/// Paired pre-training and post-fine-tuning scores for one label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationPair {
    pub label: String,
    pub pre_scores: Vec<f64>,
    pub post_scores: Vec<f64>,
}

/// Sample Pearson correlation coefficient. Constant input on either axis is
/// an error (r is undefined there), never silently zero.
pub fn pearson(pair: &CorrelationPair) -> Result<f64, AnalysisError> {
    let n = pair.pre_scores.len();
    if n != pair.post_scores.len() {
        return Err(AnalysisError::LengthMismatch {
            label: pair.label.clone(),
            pre: n,
            post: pair.post_scores.len(),
        });
    }
    if n < 2 {
        return Err(AnalysisError::TooFewPoints {
            label: pair.label.clone(),
            n,
        });
    }
    for (axis, scores) in [("pre", &pair.pre_scores), ("post", &pair.post_scores)] {
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(AnalysisError::NonFinite {
                label: pair.label.clone(),
                axis,
            });
        }
    }
    let mean_x = pair.pre_scores.iter().sum::<f64>() / n as f64;
    let mean_y = pair.post_scores.iter().sum::<f64>() / n as f64;
    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for (x, y) in pair.pre_scores.iter().zip(&pair.post_scores) {
        let dx = x - mean_x;
        let dy = y - mean_y;
        cov += dx * dy;
        var_x += dx * dx;
        var_y += dy * dy;
    }
    if var_x == 0.0 {
        return Err(AnalysisError::ConstantVector {
            label: pair.label.clone(),
            axis: "pre",
        });
    }
    if var_y == 0.0 {
        return Err(AnalysisError::ConstantVector {
            label: pair.label.clone(),
            axis: "post",
        });
    }
    Ok((cov / (var_x * var_y).sqrt()).clamp(-1.0, 1.0))
}

/// Metric stability as a function of evaluation sample size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityCurve {
    pub sample_sizes: Vec<usize>,
    /// Mean soft discrimination score over the resamples at each size.
    pub values: Vec<f64>,
    /// Population standard deviation over the resamples at each size.
    pub resample_std: Vec<f64>,
}

fn check_curve_inputs(
    results: &[SampleResult],
    sizes: &[usize],
    resamples: usize,
) -> Result<(), AnalysisError> {
    if results.is_empty() {
        return Err(AnalysisError::Empty);
    }
    if resamples == 0 {
        return Err(AnalysisError::ZeroResamples);
    }
    if sizes.is_empty() || sizes[0] == 0 || sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(AnalysisError::SizesNotIncreasing);
    }
    if let Some(&max) = sizes.last() {
        if max > results.len() {
            return Err(AnalysisError::SizeTooLarge {
                size: max,
                available: results.len(),
            });
        }
    }
    let first = results[0].candidate_count;
    for r in results {
        if r.candidate_count != first {
            return Err(MetricsError::MixedCandidateCount {
                first,
                other: r.candidate_count,
            }
            .into());
        }
    }
    Ok(())
}

fn resample_value(
    results: &[SampleResult],
    size: usize,
    seed: u64,
    size_index: usize,
    resample: usize,
) -> f64 {
    // A full-size subsample without replacement is the whole set; skip the
    // draw so every resample is identical (and exactly zero-variance).
    if size == results.len() {
        return results.iter().map(|r| r.p_correct).sum::<f64>() / size as f64;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hash::combine(
        hash::combine(seed, size_index as u64),
        resample as u64,
    ));
    let mut indices: Vec<usize> =
        rand::seq::index::sample(&mut rng, results.len(), size).into_vec();
    // canonical summation order, independent of draw order
    indices.sort_unstable();
    indices.iter().map(|&i| results[i].p_correct).sum::<f64>() / size as f64
}

fn curve_from_values(sizes: &[usize], per_size: Vec<Vec<f64>>) -> ReliabilityCurve {
    let mut values = Vec::with_capacity(sizes.len());
    let mut stds = Vec::with_capacity(sizes.len());
    for samples in per_size {
        let first = samples[0];
        if samples.iter().all(|v| *v == first) {
            // identical draws (e.g. full-size subsamples) have zero variance
            // exactly; the summed mean would smuggle in rounding noise
            values.push(first);
            stds.push(0.0);
            continue;
        }
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / samples.len() as f64;
        values.push(mean);
        stds.push(var.sqrt());
    }
    ReliabilityCurve {
        sample_sizes: sizes.to_vec(),
        values,
        resample_std: stds,
    }
}

/// Soft discrimination score over seeded without-replacement subsamples of
/// each size, sequentially.
pub fn reliability_curve_sequential(
    results: &[SampleResult],
    sizes: &[usize],
    resamples: usize,
    seed: u64,
) -> Result<ReliabilityCurve, AnalysisError> {
    check_curve_inputs(results, sizes, resamples)?;
    let per_size: Vec<Vec<f64>> = sizes
        .iter()
        .enumerate()
        .map(|(si, &size)| {
            (0..resamples)
                .map(|r| resample_value(results, size, seed, si, r))
                .collect()
        })
        .collect();
    Ok(curve_from_values(sizes, per_size))
}

/// Parallel variant; resamples are independent and seeded per (size, draw),
/// so the curve is identical to the sequential one.
#[cfg(feature = "parallel")]
pub fn reliability_curve_parallel(
    results: &[SampleResult],
    sizes: &[usize],
    resamples: usize,
    seed: u64,
) -> Result<ReliabilityCurve, AnalysisError> {
    use rayon::prelude::*;
    check_curve_inputs(results, sizes, resamples)?;
    let per_size: Vec<Vec<f64>> = sizes
        .par_iter()
        .enumerate()
        .map(|(si, &size)| {
            (0..resamples)
                .into_par_iter()
                .map(|r| resample_value(results, size, seed, si, r))
                .collect()
        })
        .collect();
    Ok(curve_from_values(sizes, per_size))
}

/// Reliability curve with the default execution mode for this build.
pub fn reliability_curve(
    results: &[SampleResult],
    sizes: &[usize],
    resamples: usize,
    seed: u64,
) -> Result<ReliabilityCurve, AnalysisError> {
    #[cfg(feature = "parallel")]
    {
        reliability_curve_parallel(results, sizes, resamples, seed)
    }
    #[cfg(not(feature = "parallel"))]
    {
        reliability_curve_sequential(results, sizes, resamples, seed)
    }
}

/// One evaluated checkpoint: training step plus its reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub step: u64,
    pub reports: Vec<TaskReport>,
}

/// Ordered metric trajectory across training checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSeries {
    pub run_id: String,
    points: Vec<SeriesPoint>,
}

impl CheckpointSeries {
    pub fn new(run_id: &str) -> CheckpointSeries {
        CheckpointSeries {
            run_id: run_id.to_owned(),
            points: Vec::new(),
        }
    }

    /// Appends a checkpoint; steps must arrive strictly increasing.
    pub fn push(&mut self, step: u64, reports: Vec<TaskReport>) -> Result<(), AnalysisError> {
        if let Some(last) = self.points.last() {
            if step <= last.step {
                return Err(AnalysisError::StepsNotIncreasing {
                    prev: last.step,
                    next: step,
                });
            }
        }
        self.points.push(SeriesPoint { step, reports });
        Ok(())
    }

    pub fn points(&self) -> &[SeriesPoint] {
        &self.points
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Dense steps-by-tasks value matrix for one metric, with explicit missing
/// markers (no interpolation).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeriesTable {
    pub metric: Metric,
    pub steps: Vec<u64>,
    pub tasks: Vec<TaskCategory>,
    /// Row-major: `cells[step_index][task_index]`.
    pub cells: Vec<Vec<Option<f64>>>,
}

impl SeriesTable {
    /// Plot-ready TSV with `NA` for missing cells.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("step");
        for t in &self.tasks {
            let _ = write!(out, "\t{t}");
        }
        out.push('\n');
        for (row, step) in self.cells.iter().zip(&self.steps) {
            let _ = write!(out, "{step}");
            for cell in row {
                match cell {
                    Some(v) => {
                        let _ = write!(out, "\t{v}");
                    }
                    None => out.push_str("\tNA"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Extracts the (steps x tasks) matrix of task-level values for one metric.
/// `task_filter` restricts and orders columns; tasks named there must appear
/// somewhere in the series.
pub fn series_table(
    series: &CheckpointSeries,
    metric: Metric,
    task_filter: Option<&[TaskCategory]>,
) -> Result<SeriesTable, AnalysisError> {
    if series.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let mut present: Vec<TaskCategory> = Vec::new();
    let mut metric_seen = false;
    for point in series.points() {
        for report in &point.reports {
            if report.metric != metric {
                continue;
            }
            metric_seen = true;
            if let (Some(task), None) = (report.task, &report.source) {
                if !present.contains(&task) {
                    present.push(task);
                }
            }
        }
    }
    if !metric_seen {
        return Err(AnalysisError::UnknownMetric(metric));
    }
    present.sort();
    let tasks: Vec<TaskCategory> = match task_filter {
        Some(filter) => {
            for t in filter {
                if !present.contains(t) {
                    return Err(AnalysisError::UnknownTask(t.name().to_owned()));
                }
            }
            filter.to_vec()
        }
        None => present,
    };

    let steps: Vec<u64> = series.points().iter().map(|p| p.step).collect();
    let cells = series
        .points()
        .iter()
        .map(|point| {
            tasks
                .iter()
                .map(|task| {
                    point
                        .reports
                        .iter()
                        .find(|r| r.metric == metric && r.task == Some(*task) && r.source.is_none())
                        .map(|r| r.value)
                })
                .collect()
        })
        .collect();
    Ok(SeriesTable {
        metric,
        steps,
        tasks,
        cells,
    })
}

/// Advisory saturation heuristic: the first step whose trailing-window slope
/// magnitude falls below `epsilon` (value units per step). This is a
/// stand-in detector, not a calibrated definition; treat its output as a
/// hint. Returns `None` when no window qualifies or data is too sparse.
pub fn saturation_step(
    series: &CheckpointSeries,
    metric: Metric,
    task: TaskCategory,
    window: usize,
    epsilon: f64,
) -> Result<Option<u64>, AnalysisError> {
    let table = series_table(series, metric, Some(&[task]))?;
    let points: Vec<(u64, f64)> = table
        .steps
        .iter()
        .zip(&table.cells)
        .filter_map(|(step, row)| row[0].map(|v| (*step, v)))
        .collect();
    if points.len() <= window || window == 0 {
        return Ok(None);
    }
    for i in window..points.len() {
        let (step_lo, v_lo) = points[i - window];
        let (step_hi, v_hi) = points[i];
        let slope = (v_hi - v_lo) / (step_hi - step_lo) as f64;
        if slope.abs() < epsilon {
            return Ok(Some(step_hi));
        }
    }
    Ok(None)
}

/// One row of a simple tabular score file: step, label, score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub step: u64,
    pub label: String,
    pub score: f64,
}

/// Reads a tab-separated score table with header `step<TAB>label<TAB>score`.
/// This is the ingestion surface for externally produced fine-tuned scores.
pub fn read_score_table(path: &Path) -> Result<Vec<ScoreRow>, AnalysisError> {
    let text = std::fs::read_to_string(path).map_err(|err| AnalysisError::Io {
        path: path.to_path_buf(),
        err,
    })?;
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if idx == 0 {
            if line.trim() != "step\tlabel\tscore" {
                return Err(AnalysisError::MalformedTable {
                    path: path.to_path_buf(),
                    line: 1,
                    msg: format!("expected header 'step\\tlabel\\tscore', got {line:?}"),
                });
            }
            continue;
        }
        let mut parts = line.split('\t');
        let malformed = |msg: String| AnalysisError::MalformedTable {
            path: path.to_path_buf(),
            line: idx + 1,
            msg,
        };
        let step = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed("bad step".into()))?;
        let label = parts
            .next()
            .filter(|s| !s.is_empty())
            .ok_or_else(|| malformed("missing label".into()))?
            .to_owned();
        let score = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed("bad score".into()))?;
        if parts.next().is_some() {
            return Err(malformed("trailing columns".into()));
        }
        rows.push(ScoreRow { step, label, score });
    }
    Ok(rows)
}

/// Assembles per-label correlation pairs from two score tables, keeping only
/// steps present in both; nothing is imputed. Labels appear sorted; a label
/// missing from either table yields no pair.
pub fn correlation_pairs(
    pre: &[ScoreRow],
    post: &[ScoreRow],
) -> Result<Vec<CorrelationPair>, AnalysisError> {
    fn index(rows: &[ScoreRow]) -> Result<BTreeMap<&str, BTreeMap<u64, f64>>, AnalysisError> {
        let mut map: BTreeMap<&str, BTreeMap<u64, f64>> = BTreeMap::new();
        for row in rows {
            if map
                .entry(row.label.as_str())
                .or_default()
                .insert(row.step, row.score)
                .is_some()
            {
                return Err(AnalysisError::DuplicateScoreRow {
                    step: row.step,
                    label: row.label.clone(),
                });
            }
        }
        Ok(map)
    }
    let pre_idx = index(pre)?;
    let post_idx = index(post)?;
    let mut pairs = Vec::new();
    for (label, pre_steps) in &pre_idx {
        let Some(post_steps) = post_idx.get(label) else {
            continue;
        };
        let mut pre_scores = Vec::new();
        let mut post_scores = Vec::new();
        for (step, pre_score) in pre_steps {
            if let Some(post_score) = post_steps.get(step) {
                pre_scores.push(*pre_score);
                post_scores.push(*post_score);
            }
        }
        if !pre_scores.is_empty() {
            pairs.push(CorrelationPair {
                label: (*label).to_owned(),
                pre_scores,
                post_scores,
            });
        }
    }
    Ok(pairs)
}
