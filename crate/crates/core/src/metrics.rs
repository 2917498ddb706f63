//! Pure scoring metrics over candidate sets.
//!
//! Everything here is stateless and deterministic. The per-sample pipeline is
//! mean token logit per candidate -> stable softmax across candidates ->
//! normalized score of the correct answer, plus argmax/argmin answer-ranking
//! decisions. Corpus-level metrics (soft discrimination score, accuracies,
//! perplexity, mean label NLL) are averages over per-sample outputs.

use crate::bench::{Ability, Sample, TaskCategory};
use crate::provider::TokenLogits;
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Per-candidate aggregate produced from a provider's token logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub candidate_index: usize,
    pub mean_logit: f64,
    pub token_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_nll: Option<f64>,
}

impl CandidateScore {
    /// Builds the logit side of a score from provider output.
    pub fn from_logits(candidate_index: usize, tl: &TokenLogits) -> CandidateScore {
        CandidateScore {
            candidate_index,
            mean_logit: mean_logit(tl),
            token_count: tl.token_count(),
            mean_nll: None,
        }
    }

    pub fn with_nll(mut self, nlls: &[f64]) -> CandidateScore {
        self.mean_nll = Some(nlls.iter().sum::<f64>() / nlls.len() as f64);
        self
    }
}

/// Scored outcome for one sample, carrying enough context (task, source,
/// candidate count) to aggregate without re-reading the benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub sample_id: String,
    pub task: TaskCategory,
    pub source: String,
    pub candidate_count: usize,
    pub answer_index: usize,
    pub normalized_scores: Vec<f64>,
    pub p_correct: f64,
    pub chosen_logits: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen_ppl: Option<usize>,
    pub correct_logits: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct_ppl: Option<bool>,
    /// Summed per-token NLL of the answer candidate, for token-weighted
    /// corpus pooling.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_nll_sum: Option<f64>,
    /// Token count of the answer candidate.
    pub answer_token_count: usize,
}

/// The metrics a run can request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Sds,
    AccLogits,
    AccPpl,
    Ppl,
    Nll,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::Sds,
        Metric::AccLogits,
        Metric::AccPpl,
        Metric::Ppl,
        Metric::Nll,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Sds => "sds",
            Metric::AccLogits => "acc_logits",
            Metric::AccPpl => "acc_ppl",
            Metric::Ppl => "ppl",
            Metric::Nll => "nll",
        }
    }

    pub fn parse_name(name: &str) -> Option<Metric> {
        Metric::ALL.iter().copied().find(|m| m.name() == name)
    }

    /// Metrics that can only be computed from NLL-bearing results.
    pub fn needs_nll(self) -> bool {
        matches!(self, Metric::AccPpl | Metric::Ppl | Metric::Nll)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.name())
    }
}

/// Which ranking rule decides the chosen candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankStrategy {
    /// Highest mean token logit wins.
    Logits,
    /// Lowest mean NLL (lowest perplexity) wins.
    Ppl,
}

/// One aggregated metric value for a group of results. `task` is unset for
/// ability-level rows and `source` is unset above source level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub metric: Metric,
    pub ability: Ability,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskCategory>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    pub value: f64,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_step: Option<u64>,
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no results to aggregate")]
    Empty,
    #[error("need at least 2 candidates, got {0}")]
    TooFewCandidates(usize),
    #[error("sample {sample_id}: {got} candidate scores for {expected} candidates")]
    Misaligned {
        sample_id: String,
        expected: usize,
        got: usize,
    },
    #[error("sample {sample_id}: candidate scores out of order at position {position}")]
    OutOfOrder { sample_id: String, position: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("results lack NLL data required by the requested metric")]
    MissingNll,
    #[error(
        "mixed candidate counts in one report ({first} vs {other}); aggregate them separately"
    )]
    MixedCandidateCount { first: usize, other: usize },
}

/// Arithmetic mean of a candidate's token logits.
pub fn mean_logit(tl: &TokenLogits) -> f64 {
    // TokenLogits construction guarantees a nonempty, finite list.
    tl.logits.iter().sum::<f64>() / tl.logits.len() as f64
}

/// Softmax over candidate mean logits, computed in double precision with
/// max-subtraction so extreme logits cannot overflow.
pub fn normalize_scores(scores: &[CandidateScore]) -> Result<Vec<f64>, MetricsError> {
    if scores.len() < 2 {
        return Err(MetricsError::TooFewCandidates(scores.len()));
    }
    let mut max = f64::NEG_INFINITY;
    for s in scores {
        if !s.mean_logit.is_finite() {
            return Err(MetricsError::NonFinite("mean logit"));
        }
        max = max.max(s.mean_logit);
    }
    let exps: Vec<f64> = scores.iter().map(|s| (s.mean_logit - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

fn argmax_by<T, F: Fn(&T) -> f64>(items: &[T], key: F) -> usize {
    // Ties resolve to the lowest index: only a strictly greater key advances.
    let mut best = 0;
    for (i, item) in items.iter().enumerate().skip(1) {
        if key(item) > key(&items[best]) {
            best = i;
        }
    }
    best
}

fn argmin_by<T, F: Fn(&T) -> f64>(items: &[T], key: F) -> usize {
    let mut best = 0;
    for (i, item) in items.iter().enumerate().skip(1) {
        if key(item) < key(&items[best]) {
            best = i;
        }
    }
    best
}

/// Scores one sample from its per-candidate aggregates: normalized scores,
/// the correct answer's score, and the chosen index under each ranking rule.
/// The score list must be index-aligned with the sample's candidates.
pub fn score_sample(
    sample: &Sample,
    scores: &[CandidateScore],
) -> Result<SampleResult, MetricsError> {
    if scores.len() != sample.candidates.len() {
        return Err(MetricsError::Misaligned {
            sample_id: sample.id.clone(),
            expected: sample.candidates.len(),
            got: scores.len(),
        });
    }
    for (i, s) in scores.iter().enumerate() {
        if s.candidate_index != i {
            return Err(MetricsError::OutOfOrder {
                sample_id: sample.id.clone(),
                position: i,
            });
        }
    }
    let normalized = normalize_scores(scores)?;
    let chosen_logits = argmax_by(scores, |s| s.mean_logit);
    let p_correct = normalized[sample.answer_index];

    let nll_count = scores.iter().filter(|s| s.mean_nll.is_some()).count();
    let (chosen_ppl, correct_ppl) = if nll_count == scores.len() {
        let chosen = argmin_by(scores, |s| s.mean_nll.unwrap());
        (Some(chosen), Some(chosen == sample.answer_index))
    } else if nll_count == 0 {
        (None, None)
    } else {
        return Err(MetricsError::MissingNll);
    };

    let answer_score = &scores[sample.answer_index];
    Ok(SampleResult {
        sample_id: sample.id.clone(),
        task: sample.task,
        source: sample.source.clone(),
        candidate_count: sample.candidates.len(),
        answer_index: sample.answer_index,
        normalized_scores: normalized,
        p_correct,
        chosen_logits,
        chosen_ppl,
        correct_logits: chosen_logits == sample.answer_index,
        correct_ppl,
        answer_nll_sum: answer_score
            .mean_nll
            .map(|m| m * answer_score.token_count as f64),
        answer_token_count: answer_score.token_count,
    })
}

fn check_uniform_candidate_count(results: &[SampleResult]) -> Result<(), MetricsError> {
    let first = results[0].candidate_count;
    for r in results {
        if r.candidate_count != first {
            return Err(MetricsError::MixedCandidateCount {
                first,
                other: r.candidate_count,
            });
        }
    }
    Ok(())
}

/// Soft discrimination score: the mean normalized score of the correct
/// answer. All results must share one candidate count — scores over different
/// numbers of candidates are not comparable and must be aggregated
/// separately.
pub fn sds(results: &[SampleResult]) -> Result<f64, MetricsError> {
    if results.is_empty() {
        return Err(MetricsError::Empty);
    }
    check_uniform_candidate_count(results)?;
    Ok(results.iter().map(|r| r.p_correct).sum::<f64>() / results.len() as f64)
}

/// Answer-ranking accuracy: the fraction of samples whose chosen candidate is
/// the correct answer, under the given ranking rule.
pub fn accuracy(results: &[SampleResult], strategy: RankStrategy) -> Result<f64, MetricsError> {
    if results.is_empty() {
        return Err(MetricsError::Empty);
    }
    let correct = match strategy {
        RankStrategy::Logits => results.iter().filter(|r| r.correct_logits).count(),
        RankStrategy::Ppl => {
            let mut correct = 0;
            for r in results {
                match r.correct_ppl {
                    Some(true) => correct += 1,
                    Some(false) => {}
                    None => return Err(MetricsError::MissingNll),
                }
            }
            correct
        }
    };
    Ok(correct as f64 / results.len() as f64)
}

fn pooled_mean_nll(nlls: &[Vec<f64>]) -> Result<f64, MetricsError> {
    if nlls.is_empty() || nlls.iter().all(|seq| seq.is_empty()) {
        return Err(MetricsError::Empty);
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for seq in nlls {
        for &v in seq {
            if !v.is_finite() {
                return Err(MetricsError::NonFinite("NLL"));
            }
            total += v;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Perplexity over label sequences: the exponentiated mean per-token NLL,
/// pooled token-weighted across all sequences.
pub fn perplexity(nlls: &[Vec<f64>]) -> Result<f64, MetricsError> {
    pooled_mean_nll(nlls).map(f64::exp)
}

/// Mean per-token NLL pooled across all sequences; the loss the perplexity
/// exponentiates.
pub fn mean_nll(nlls: &[Vec<f64>]) -> Result<f64, MetricsError> {
    pooled_mean_nll(nlls)
}
