//! Converters from heterogeneous source benchmarks into the unified
//! candidate-scoring format.
//!
//! Four reformatting routes cover the source kinds: option-content rewriting
//! for multiple-choice questions, exact ± perturbation for numeric answers,
//! client-generated variants for expression answers, and same-category title
//! pools for image-title records. Spatial records go through a triplet
//! generator client and come back flagged for manual review.
//!
//! Every record draws its RNG stream from (policy seed, record id), so batch
//! output is independent of scheduling order and byte-identical across runs.

pub mod ingest;
pub mod llm;

use crate::bench::{normalize_whitespace, BenchError, Sample, TaskCategory};
use crate::hash;
use llm::{AuditRecord, AuditVerdict, LlmClient, LlmConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// A multiple-choice option as it appears in a source benchmark.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqOption {
    pub letter: String,
    pub content: String,
}

/// One record of a source benchmark, tagged by its raw question kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "raw_kind", rename_all = "snake_case")]
pub enum SourceRecord {
    Mcq {
        id: String,
        source: String,
        task: TaskCategory,
        #[serde(default)]
        image_ref: Option<String>,
        question: String,
        options: Vec<McqOption>,
        answer_letter: String,
    },
    FreeFormNumeric {
        id: String,
        source: String,
        task: TaskCategory,
        #[serde(default)]
        image_ref: Option<String>,
        question: String,
        answer: String,
    },
    FreeFormExpression {
        id: String,
        source: String,
        task: TaskCategory,
        #[serde(default)]
        image_ref: Option<String>,
        question: String,
        answer: String,
    },
    WikiTitle {
        id: String,
        source: String,
        task: TaskCategory,
        #[serde(default)]
        image_ref: Option<String>,
        title: String,
        /// Other titles of the same category, excluding this record's title.
        pool: Vec<String>,
    },
    SpatialTriplet {
        id: String,
        source: String,
        task: TaskCategory,
        #[serde(default)]
        image_ref: Option<String>,
        description: String,
    },
}

impl SourceRecord {
    pub fn id(&self) -> &str {
        match self {
            SourceRecord::Mcq { id, .. }
            | SourceRecord::FreeFormNumeric { id, .. }
            | SourceRecord::FreeFormExpression { id, .. }
            | SourceRecord::WikiTitle { id, .. }
            | SourceRecord::SpatialTriplet { id, .. } => id,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            SourceRecord::Mcq { .. } => "mcq",
            SourceRecord::FreeFormNumeric { .. } => "free_form_numeric",
            SourceRecord::FreeFormExpression { .. } => "free_form_expression",
            SourceRecord::WikiTitle { .. } => "wiki_title",
            SourceRecord::SpatialTriplet { .. } => "spatial_triplet",
        }
    }

    fn context(&self) -> (&str, &str, TaskCategory, Option<&str>) {
        match self {
            SourceRecord::Mcq {
                id,
                source,
                task,
                image_ref,
                ..
            }
            | SourceRecord::FreeFormNumeric {
                id,
                source,
                task,
                image_ref,
                ..
            }
            | SourceRecord::FreeFormExpression {
                id,
                source,
                task,
                image_ref,
                ..
            }
            | SourceRecord::WikiTitle {
                id,
                source,
                task,
                image_ref,
                ..
            }
            | SourceRecord::SpatialTriplet {
                id,
                source,
                task,
                image_ref,
                ..
            } => (id, source, *task, image_ref.as_deref()),
        }
    }
}

fn default_target_count() -> usize {
    2
}

fn default_int_delta() -> f64 {
    1.0
}

fn default_dec_delta() -> f64 {
    0.1
}

fn default_true() -> bool {
    true
}

/// How distractors are built and how many candidates every emitted sample
/// must have.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistractorPolicy {
    /// Answer plus distractors; every emitted sample has exactly this many
    /// candidates.
    #[serde(default = "default_target_count")]
    pub target_candidate_count: usize,
    #[serde(default)]
    pub seed: u64,
    /// Perturbation applied to integer answers.
    #[serde(default = "default_int_delta")]
    pub int_delta: f64,
    /// Perturbation applied to decimal answers.
    #[serde(default = "default_dec_delta")]
    pub dec_delta: f64,
    /// When false, perturbations that would go negative flip to the other
    /// sign instead (for domain-restricted benchmarks).
    #[serde(default = "default_true")]
    pub allow_negative: bool,
    /// Endpoint for expression and spatial generation; absent means those
    /// record kinds cannot be reformatted.
    #[serde(default)]
    pub llm: Option<LlmConfig>,
    #[serde(default)]
    pub expression_prompt: Option<String>,
    #[serde(default)]
    pub spatial_prompt: Option<String>,
}

impl Default for DistractorPolicy {
    fn default() -> Self {
        DistractorPolicy {
            target_candidate_count: default_target_count(),
            seed: 0,
            int_delta: default_int_delta(),
            dec_delta: default_dec_delta(),
            allow_negative: true,
            llm: None,
            expression_prompt: None,
            spatial_prompt: None,
        }
    }
}

impl DistractorPolicy {
    pub fn validate(&self) -> Result<(), ReformatError> {
        if self.target_candidate_count < 2 {
            return Err(ReformatError::BadPolicy(format!(
                "target_candidate_count {} < 2",
                self.target_candidate_count
            )));
        }
        if self.int_delta <= 0.0 || self.dec_delta <= 0.0 {
            return Err(ReformatError::BadPolicy("deltas must be positive".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<DistractorPolicy, ReformatError> {
        let text = fs::read_to_string(path).map_err(|err| ReformatError::Io {
            path: path.to_path_buf(),
            err,
        })?;
        let policy: DistractorPolicy = serde_json::from_str(&text)
            .map_err(|err| ReformatError::BadPolicy(format!("{}: {err}", path.display())))?;
        policy.validate()?;
        Ok(policy)
    }

    fn max_retries(&self) -> u32 {
        self.llm.as_ref().map(|c| c.max_retries).unwrap_or(3)
    }
}

/// Whether a sample still needs human verification before use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewStatus {
    Approved,
    PendingReview,
}

/// A reformatted sample plus its review status.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReformattedSample {
    pub sample: Sample,
    pub review: ReviewStatus,
}

#[derive(Debug, Error)]
pub enum ReformatError {
    #[error("record {id}: expected kind {expected}, got {got}")]
    WrongKind {
        id: String,
        expected: &'static str,
        got: &'static str,
    },
    #[error("record {id}: answer letter {letter:?} not among options")]
    UnknownAnswerLetter { id: String, letter: String },
    #[error("record {id}: duplicate option letter {letter:?}")]
    DuplicateOptionLetter { id: String, letter: String },
    #[error("record {id}: {have} options but policy needs {need} candidates")]
    TooFewOptions {
        id: String,
        have: usize,
        need: usize,
    },
    #[error("answer {0:?} is not an integer or decimal")]
    NonNumericAnswer(String),
    #[error("delta {0} cannot be represented as a decimal perturbation")]
    DeltaNotRepresentable(f64),
    #[error("perturbing {answer:?} cannot stay nonnegative under the policy")]
    NegativeNotAllowed { answer: String },
    #[error("record {id}: kind {kind} can produce at most {have} distractors, need {need}")]
    CannotSatisfyCount {
        id: String,
        kind: &'static str,
        have: usize,
        need: usize,
    },
    #[error("record {id}: title pool has {have} usable titles, need {need}")]
    PoolTooSmall {
        id: String,
        have: usize,
        need: usize,
    },
    #[error("record {id} needs an LLM client but none is configured")]
    LlmUnavailable { id: String },
    #[error("record {id}: generator failed after {attempts} attempt(s): {last}")]
    LlmFailed {
        id: String,
        attempts: u32,
        last: String,
    },
    #[error("record {id}: malformed triplet from generator: {reason}")]
    MalformedTriplet { id: String, reason: String },
    #[error(transparent)]
    InvalidSample(#[from] BenchError),
    #[error("bad policy: {0}")]
    BadPolicy(String),
    #[error("bad source config: {0}")]
    BadConfig(String),
    #[error("io error on {path}: {err}")]
    Io { path: PathBuf, err: std::io::Error },
}

/// The RNG stream for one record, independent of processing order.
pub fn record_rng(seed: u64, record_id: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(hash::combine(seed, hash::fnv1a(record_id.as_bytes())))
}

/// Places the answer at a seeded-random position among the distractors and
/// returns (candidates, answer_index). Fixed answer positions would
/// reintroduce the positional bias that option-letter stripping removes.
fn assemble_candidates(
    answer: String,
    distractors: Vec<String>,
    rng: &mut ChaCha8Rng,
) -> (Vec<String>, usize) {
    let mut candidates = Vec::with_capacity(distractors.len() + 1);
    candidates.push(answer.clone());
    candidates.extend(distractors);
    candidates.shuffle(rng);
    let answer_index = candidates
        .iter()
        .position(|c| *c == answer)
        .expect("answer present");
    (candidates, answer_index)
}

fn build_sample(
    rec: &SourceRecord,
    question: String,
    candidates: Vec<String>,
    answer_index: usize,
) -> Result<Sample, ReformatError> {
    let (id, source, task, image_ref) = rec.context();
    let sample = Sample {
        id: id.to_owned(),
        task,
        source: source.to_owned(),
        image_ref: image_ref.map(str::to_owned),
        question,
        candidates,
        answer_index,
    };
    sample.validate()?;
    Ok(sample)
}

/// Rewrites a multiple-choice record so the prediction target is the option
/// content rather than the option letter. When the source has more options
/// than the policy's candidate count, distractors are subsampled (seeded),
/// always retaining the answer.
pub fn reformat_mcq(
    rec: &SourceRecord,
    policy: &DistractorPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<Sample, ReformatError> {
    let SourceRecord::Mcq {
        id,
        question,
        options,
        answer_letter,
        ..
    } = rec
    else {
        return Err(ReformatError::WrongKind {
            id: rec.id().to_owned(),
            expected: "mcq",
            got: rec.kind_name(),
        });
    };
    policy.validate()?;

    let norm_letter = |l: &str| l.trim().to_ascii_uppercase();
    let mut seen = Vec::new();
    for opt in options {
        let l = norm_letter(&opt.letter);
        if seen.contains(&l) {
            return Err(ReformatError::DuplicateOptionLetter {
                id: id.clone(),
                letter: opt.letter.clone(),
            });
        }
        seen.push(l);
    }
    let wanted = norm_letter(answer_letter);
    let answer = options
        .iter()
        .find(|o| norm_letter(&o.letter) == wanted)
        .ok_or_else(|| ReformatError::UnknownAnswerLetter {
            id: id.clone(),
            letter: answer_letter.clone(),
        })?
        .content
        .clone();

    if options.len() < policy.target_candidate_count {
        return Err(ReformatError::TooFewOptions {
            id: id.clone(),
            have: options.len(),
            need: policy.target_candidate_count,
        });
    }
    let mut distractors: Vec<String> = options
        .iter()
        .filter(|o| norm_letter(&o.letter) != wanted)
        .map(|o| o.content.clone())
        .collect();
    let need = policy.target_candidate_count - 1;
    if distractors.len() > need {
        let picked = rand::seq::index::sample(rng, distractors.len(), need);
        let mut indices: Vec<usize> = picked.into_iter().collect();
        indices.sort_unstable();
        distractors = indices
            .into_iter()
            .map(|i| distractors[i].clone())
            .collect();
    }

    let (candidates, answer_index) = assemble_candidates(answer, distractors, rng);
    build_sample(rec, question.clone(), candidates, answer_index)
}

/// A decimal number as scaled integer `value / 10^places`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ScaledDecimal {
    value: i128,
    places: u32,
}

impl ScaledDecimal {
    fn rescale(self, places: u32) -> ScaledDecimal {
        let factor = 10i128.pow(places - self.places);
        ScaledDecimal {
            value: self.value * factor,
            places,
        }
    }

    fn format(self) -> String {
        if self.places == 0 {
            return self.value.to_string();
        }
        let scale = 10i128.pow(self.places);
        let sign = if self.value < 0 { "-" } else { "" };
        let abs = self.value.abs();
        format!(
            "{sign}{}.{:0width$}",
            abs / scale,
            abs % scale,
            width = self.places as usize
        )
    }
}

/// Parses an integer or plain decimal string. Returns the scaled value and
/// whether the text used a radix point.
fn parse_numeric(text: &str) -> Option<(ScaledDecimal, bool)> {
    let t = text.trim();
    let (sign, digits) = match t.strip_prefix('-') {
        Some(rest) => (-1i128, rest),
        None => (1i128, t.strip_prefix('+').unwrap_or(t)),
    };
    let (int_part, frac_part, is_decimal) = match digits.split_once('.') {
        Some((i, f)) => (i, f, true),
        None => (digits, "", false),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    if !int_part.chars().all(|c| c.is_ascii_digit())
        || !frac_part.chars().all(|c| c.is_ascii_digit())
    {
        return None;
    }
    if int_part.len() + frac_part.len() > 30 {
        return None;
    }
    let places = frac_part.len() as u32;
    let int_value: i128 = if int_part.is_empty() {
        0
    } else {
        int_part.parse().ok()?
    };
    let frac_value: i128 = if frac_part.is_empty() {
        0
    } else {
        frac_part.parse().ok()?
    };
    let value = sign * (int_value * 10i128.pow(places) + frac_value);
    Some((ScaledDecimal { value, places }, is_decimal))
}

/// Snaps a configured delta to an exact decimal (value, places).
fn snap_delta(delta: f64) -> Option<(i128, u32)> {
    for places in 0..=12u32 {
        let scaled = delta * 10f64.powi(places as i32);
        let rounded = scaled.round();
        if rounded >= 1.0 && (scaled - rounded).abs() < 1e-9 {
            return Some((rounded as i128, places));
        }
    }
    None
}

fn perturb_scaled(
    answer: &str,
    parsed: ScaledDecimal,
    delta: f64,
    positive: bool,
    allow_negative: bool,
) -> Result<ScaledDecimal, ReformatError> {
    let (delta_value, delta_places) =
        snap_delta(delta).ok_or(ReformatError::DeltaNotRepresentable(delta))?;
    // Work at whichever precision is finer: the answer's printed precision
    // or the delta's.
    let places = parsed.places.max(delta_places);
    let value = parsed.rescale(places);
    let delta_scaled = delta_value * 10i128.pow(places - delta_places);
    let offset = if positive {
        delta_scaled
    } else {
        -delta_scaled
    };
    let mut out = ScaledDecimal {
        value: value.value + offset,
        places,
    };
    if !allow_negative && out.value < 0 {
        out.value = value.value - offset;
        if out.value < 0 {
            return Err(ReformatError::NegativeNotAllowed {
                answer: answer.to_owned(),
            });
        }
    }
    Ok(out)
}

/// Builds one numeric distractor: integers move by the integer delta,
/// decimals by the decimal delta, with the perturbation sign drawn from the
/// seeded RNG. The distractor keeps the answer's printed decimal precision.
pub fn perturb_numeric(
    answer: &str,
    policy: &DistractorPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<String, ReformatError> {
    let (parsed, is_decimal) =
        parse_numeric(answer).ok_or_else(|| ReformatError::NonNumericAnswer(answer.to_owned()))?;
    let delta = if is_decimal {
        policy.dec_delta
    } else {
        policy.int_delta
    };
    let positive = rng.gen_bool(0.5);
    let out = perturb_scaled(answer, parsed, delta, positive, policy.allow_negative)?;
    Ok(out.format())
}

/// Both-signs variant used when the policy needs two numeric distractors.
fn numeric_distractors(
    rec_id: &str,
    answer: &str,
    policy: &DistractorPolicy,
    rng: &mut ChaCha8Rng,
    need: usize,
) -> Result<Vec<String>, ReformatError> {
    if need > 2 {
        return Err(ReformatError::CannotSatisfyCount {
            id: rec_id.to_owned(),
            kind: "free_form_numeric",
            have: 2,
            need,
        });
    }
    if need == 1 {
        return Ok(vec![perturb_numeric(answer, policy, rng)?]);
    }
    let (parsed, is_decimal) =
        parse_numeric(answer).ok_or_else(|| ReformatError::NonNumericAnswer(answer.to_owned()))?;
    let delta = if is_decimal {
        policy.dec_delta
    } else {
        policy.int_delta
    };
    let up = perturb_scaled(answer, parsed, delta, true, false)?;
    let down = perturb_scaled(answer, parsed, delta, false, policy.allow_negative)?;
    if up == down {
        return Err(ReformatError::CannotSatisfyCount {
            id: rec_id.to_owned(),
            kind: "free_form_numeric",
            have: 1,
            need,
        });
    }
    Ok(vec![up.format(), down.format()])
}

/// Built-in prompt for expression-distractor generation; override per policy.
pub const DEFAULT_EXPRESSION_PROMPT: &str = "You are given a question and its correct answer expression. Produce one plausible but incorrect variant of the expression, altering only a variable or quantity while keeping the expression well-formed. Reply with the variant expression only.\nQuestion: {question}\nAnswer: {answer}";

/// Built-in prompt for spatial triplet generation. This is a generic
/// stand-in template, not a vetted production prompt; deployments should
/// supply their own via the policy.
pub const DEFAULT_SPATIAL_PROMPT: &str = "From the following spatial description of an image, write one question about a spatial relationship between described elements, the correct answer, and one distractor that states the opposite spatial relationship. Reply with JSON of the form {\"question\": \"...\", \"answer\": \"...\", \"distractor\": \"...\"} and nothing else.\nDescription: {description}";

/// Asks the client for an expression distractor, retrying up to
/// `max_retries` calls. Empty replies, replies equal to the answer, and
/// replies already used are rejected; every call lands in the audit log.
pub fn generate_expression_distractor(
    record_id: &str,
    answer: &str,
    prompt: &str,
    existing: &[String],
    client: &dyn LlmClient,
    max_retries: u32,
    audit: &mut Vec<AuditRecord>,
) -> Result<String, ReformatError> {
    let digest = hash::hex_digest(prompt.as_bytes());
    let mut last = String::from("no attempts made");
    for attempt in 1..=max_retries.max(1) {
        let mut push = |response: String, verdict: AuditVerdict| {
            audit.push(AuditRecord {
                record_id: record_id.to_owned(),
                purpose: "expression_distractor",
                attempt,
                request_digest: digest.clone(),
                response,
                verdict,
            });
        };
        match client.complete(prompt) {
            Ok(reply) => {
                let trimmed = reply.trim().to_owned();
                if trimmed.is_empty() {
                    last = "empty reply".into();
                    push(reply, AuditVerdict::RejectedEmpty);
                } else if normalize_whitespace(&trimmed) == normalize_whitespace(answer) {
                    last = "reply equals the answer".into();
                    push(reply, AuditVerdict::RejectedEqualsAnswer);
                } else if existing
                    .iter()
                    .any(|e| normalize_whitespace(e) == normalize_whitespace(&trimmed))
                {
                    last = "reply duplicates an earlier distractor".into();
                    push(reply, AuditVerdict::RejectedDuplicate);
                } else {
                    push(trimmed.clone(), AuditVerdict::Accepted);
                    return Ok(trimmed);
                }
            }
            Err(err) => {
                last = err.to_string();
                push(last.clone(), AuditVerdict::ClientError);
            }
        }
    }
    Err(ReformatError::LlmFailed {
        id: record_id.to_owned(),
        attempts: max_retries.max(1),
        last,
    })
}

/// Reformats an image-title record: the question is fixed to
/// "The image shows" and distractors are seeded picks from the record's
/// same-category title pool.
pub fn reformat_wiki(
    rec: &SourceRecord,
    policy: &DistractorPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<Sample, ReformatError> {
    let SourceRecord::WikiTitle {
        id, title, pool, ..
    } = rec
    else {
        return Err(ReformatError::WrongKind {
            id: rec.id().to_owned(),
            expected: "wiki_title",
            got: rec.kind_name(),
        });
    };
    policy.validate()?;

    let answer_norm = normalize_whitespace(title);
    let mut usable: Vec<String> = Vec::new();
    let mut seen: Vec<String> = Vec::new();
    for t in pool {
        let n = normalize_whitespace(t);
        if n == answer_norm || seen.contains(&n) {
            continue;
        }
        seen.push(n);
        usable.push(t.clone());
    }
    let need = policy.target_candidate_count - 1;
    if usable.len() < need {
        return Err(ReformatError::PoolTooSmall {
            id: id.clone(),
            have: usable.len(),
            need,
        });
    }
    let picked = rand::seq::index::sample(rng, usable.len(), need);
    let mut indices: Vec<usize> = picked.into_iter().collect();
    indices.sort_unstable();
    let distractors: Vec<String> = indices.into_iter().map(|i| usable[i].clone()).collect();

    let (candidates, answer_index) = assemble_candidates(title.clone(), distractors, rng);
    build_sample(rec, "The image shows".to_owned(), candidates, answer_index)
}

#[derive(Deserialize)]
struct Triplet {
    question: String,
    answer: String,
    distractor: String,
}

fn strip_code_fence(text: &str) -> &str {
    let trimmed = text.trim();
    if let Some(inner) = trimmed.strip_prefix("```") {
        let inner = inner.strip_prefix("json").unwrap_or(inner);
        if let Some(end) = inner.rfind("```") {
            return inner[..end].trim();
        }
    }
    trimmed
}

/// Builds a spatial-reasoning sample from a description via the triplet
/// generator client. The triplet is validated structurally (non-empty parts,
/// distractor differs from the answer) and the sample is flagged
/// pending-review: correctness verification is a human step.
pub fn build_spatial_sample(
    rec: &SourceRecord,
    policy: &DistractorPolicy,
    client: &dyn LlmClient,
    rng: &mut ChaCha8Rng,
    audit: &mut Vec<AuditRecord>,
) -> Result<ReformattedSample, ReformatError> {
    let SourceRecord::SpatialTriplet {
        id, description, ..
    } = rec
    else {
        return Err(ReformatError::WrongKind {
            id: rec.id().to_owned(),
            expected: "spatial_triplet",
            got: rec.kind_name(),
        });
    };
    policy.validate()?;
    if policy.target_candidate_count != 2 {
        return Err(ReformatError::CannotSatisfyCount {
            id: id.clone(),
            kind: "spatial_triplet",
            have: 2,
            need: policy.target_candidate_count,
        });
    }

    let template = policy
        .spatial_prompt
        .as_deref()
        .unwrap_or(DEFAULT_SPATIAL_PROMPT);
    let prompt = template.replace("{description}", description);
    let digest = hash::hex_digest(prompt.as_bytes());
    let mut push = |response: String, verdict: AuditVerdict| {
        audit.push(AuditRecord {
            record_id: id.clone(),
            purpose: "spatial_triplet",
            attempt: 1,
            request_digest: digest.clone(),
            response,
            verdict,
        });
    };

    let reply = match client.complete(&prompt) {
        Ok(reply) => reply,
        Err(err) => {
            push(err.to_string(), AuditVerdict::ClientError);
            return Err(ReformatError::LlmFailed {
                id: id.clone(),
                attempts: 1,
                last: err.to_string(),
            });
        }
    };
    let malformed = |reason: String| ReformatError::MalformedTriplet {
        id: id.clone(),
        reason,
    };
    let triplet: Triplet = match serde_json::from_str(strip_code_fence(&reply)) {
        Ok(t) => t,
        Err(err) => {
            push(reply.clone(), AuditVerdict::Malformed);
            return Err(malformed(err.to_string()));
        }
    };
    let question = triplet.question.trim().to_owned();
    let answer = triplet.answer.trim().to_owned();
    let distractor = triplet.distractor.trim().to_owned();
    if question.is_empty() || answer.is_empty() || distractor.is_empty() {
        push(reply.clone(), AuditVerdict::Malformed);
        return Err(malformed("empty question, answer, or distractor".into()));
    }
    if normalize_whitespace(&answer) == normalize_whitespace(&distractor) {
        push(reply.clone(), AuditVerdict::RejectedEqualsAnswer);
        return Err(malformed("distractor equals the answer".into()));
    }
    push(reply, AuditVerdict::Accepted);

    let (candidates, answer_index) = assemble_candidates(answer, vec![distractor], rng);
    let sample = build_sample(rec, question, candidates, answer_index)?;
    Ok(ReformattedSample {
        sample,
        review: ReviewStatus::PendingReview,
    })
}

/// Reformats one record of any kind. `client` is required for expression and
/// spatial records.
pub fn reformat_record(
    rec: &SourceRecord,
    policy: &DistractorPolicy,
    client: Option<&dyn LlmClient>,
) -> Result<(ReformattedSample, Vec<AuditRecord>), ReformatError> {
    policy.validate()?;
    let mut rng = record_rng(policy.seed, rec.id());
    let mut audit = Vec::new();
    let need_client = || ReformatError::LlmUnavailable {
        id: rec.id().to_owned(),
    };
    let approved = |sample: Sample| ReformattedSample {
        sample,
        review: ReviewStatus::Approved,
    };
    let reformatted = match rec {
        SourceRecord::Mcq { .. } => approved(reformat_mcq(rec, policy, &mut rng)?),
        SourceRecord::WikiTitle { .. } => approved(reformat_wiki(rec, policy, &mut rng)?),
        SourceRecord::FreeFormNumeric {
            id,
            question,
            answer,
            ..
        } => {
            let need = policy.target_candidate_count - 1;
            let distractors = numeric_distractors(id, answer, policy, &mut rng, need)?;
            let (candidates, answer_index) =
                assemble_candidates(answer.clone(), distractors, &mut rng);
            approved(build_sample(
                rec,
                question.clone(),
                candidates,
                answer_index,
            )?)
        }
        SourceRecord::FreeFormExpression {
            id,
            question,
            answer,
            ..
        } => {
            let client = client.ok_or_else(need_client)?;
            let template = policy
                .expression_prompt
                .as_deref()
                .unwrap_or(DEFAULT_EXPRESSION_PROMPT);
            let base_prompt = template
                .replace("{question}", question)
                .replace("{answer}", answer);
            let need = policy.target_candidate_count - 1;
            let mut distractors: Vec<String> = Vec::with_capacity(need);
            for variant in 0..need {
                let prompt = if need == 1 {
                    base_prompt.clone()
                } else {
                    format!("{base_prompt}\nVariant: {variant}")
                };
                let d = generate_expression_distractor(
                    id,
                    answer,
                    &prompt,
                    &distractors,
                    client,
                    policy.max_retries(),
                    &mut audit,
                )?;
                distractors.push(d);
            }
            let (candidates, answer_index) =
                assemble_candidates(answer.clone(), distractors, &mut rng);
            approved(build_sample(
                rec,
                question.clone(),
                candidates,
                answer_index,
            )?)
        }
        SourceRecord::SpatialTriplet { .. } => {
            let client = client.ok_or_else(need_client)?;
            build_spatial_sample(rec, policy, client, &mut rng, &mut audit)?
        }
    };
    Ok((reformatted, audit))
}

/// A record that could not be reformatted.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReformatFailure {
    pub record_id: String,
    pub error: String,
}

/// Output of a batch reformat: samples and audit records in input order,
/// plus per-record failures.
#[derive(Debug, Default)]
pub struct ReformatBatch {
    pub samples: Vec<ReformattedSample>,
    pub audit: Vec<AuditRecord>,
    pub failures: Vec<ReformatFailure>,
}

fn collect_batch(
    outcomes: Vec<Result<(ReformattedSample, Vec<AuditRecord>), ReformatError>>,
    records: &[SourceRecord],
) -> ReformatBatch {
    let mut batch = ReformatBatch::default();
    for (rec, outcome) in records.iter().zip(outcomes) {
        match outcome {
            Ok((sample, audit)) => {
                batch.samples.push(sample);
                batch.audit.extend(audit);
            }
            Err(err) => batch.failures.push(ReformatFailure {
                record_id: rec.id().to_owned(),
                error: err.to_string(),
            }),
        }
    }
    batch
}

/// Reformats records sequentially, preserving input order.
pub fn reformat_records_sequential(
    records: &[SourceRecord],
    policy: &DistractorPolicy,
    client: Option<&dyn LlmClient>,
) -> ReformatBatch {
    let outcomes = records
        .iter()
        .map(|rec| reformat_record(rec, policy, client))
        .collect();
    collect_batch(outcomes, records)
}

/// Reformats records in parallel. Each record's RNG stream depends only on
/// (seed, record id), so the output is identical to the sequential path.
#[cfg(feature = "parallel")]
pub fn reformat_records_parallel(
    records: &[SourceRecord],
    policy: &DistractorPolicy,
    client: Option<&dyn LlmClient>,
) -> ReformatBatch {
    use rayon::prelude::*;
    let outcomes: Vec<_> = records
        .par_iter()
        .map(|rec| reformat_record(rec, policy, client))
        .collect();
    collect_batch(outcomes, records)
}

/// Batch reformat with the default execution mode for this build.
pub fn reformat_records(
    records: &[SourceRecord],
    policy: &DistractorPolicy,
    client: Option<&dyn LlmClient>,
) -> ReformatBatch {
    #[cfg(feature = "parallel")]
    {
        reformat_records_parallel(records, policy, client)
    }
    #[cfg(not(feature = "parallel"))]
    {
        reformat_records_sequential(records, policy, client)
    }
}

/// Writes batch outputs: canonical samples, a review-status sidecar, and the
/// audit log. All three files are deterministic for a fixed seed.
pub fn write_batch(
    batch: &ReformatBatch,
    samples_path: &Path,
    review_path: &Path,
    audit_path: &Path,
) -> Result<(), ReformatError> {
    let io_err = |path: &Path, err| ReformatError::Io {
        path: path.to_path_buf(),
        err,
    };
    if let Some(parent) = samples_path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(samples_path, e))?;
    }
    let samples: Vec<Sample> = batch.samples.iter().map(|r| r.sample.clone()).collect();
    crate::bench::write_samples(samples_path, &samples)?;

    let mut review = fs::File::create(review_path).map_err(|e| io_err(review_path, e))?;
    for r in &batch.samples {
        let line = serde_json::json!({"id": r.sample.id, "status": r.review});
        writeln!(review, "{line}").map_err(|e| io_err(review_path, e))?;
    }
    let mut audit = fs::File::create(audit_path).map_err(|e| io_err(audit_path, e))?;
    for rec in &batch.audit {
        writeln!(
            audit,
            "{}",
            serde_json::to_string(rec).expect("audit record serializes")
        )
        .map_err(|e| io_err(audit_path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use llm::{ScriptedClient, ScriptedReply};

    fn policy(seed: u64) -> DistractorPolicy {
        DistractorPolicy {
            seed,
            ..DistractorPolicy::default()
        }
    }

    fn mcq_record() -> SourceRecord {
        SourceRecord::Mcq {
            id: "q1".into(),
            source: "MMBench".into(),
            task: TaskCategory::GeneralVqa,
            image_ref: Some("img/q1.png".into()),
            question: "Which animal is shown?".into(),
            options: vec![
                McqOption {
                    letter: "A".into(),
                    content: "cat".into(),
                },
                McqOption {
                    letter: "B".into(),
                    content: "dog".into(),
                },
                McqOption {
                    letter: "C".into(),
                    content: "fox".into(),
                },
                McqOption {
                    letter: "D".into(),
                    content: "owl".into(),
                },
            ],
            answer_letter: "B".into(),
        }
    }

    #[test]
    fn mcq_keeps_answer_and_subsamples_distractors() {
        let rec = mcq_record();
        let p = policy(11);
        let sample = reformat_mcq(&rec, &p, &mut record_rng(p.seed, rec.id())).unwrap();
        assert_eq!(sample.candidates.len(), 2);
        assert_eq!(sample.answer(), "dog");
        let other = sample
            .candidates
            .iter()
            .find(|c| *c != "dog")
            .unwrap()
            .clone();
        assert!(["cat", "fox", "owl"].contains(&other.as_str()));
        assert_eq!(sample.question, "Which animal is shown?");
    }

    #[test]
    fn mcq_two_options_pass_through_contents() {
        let rec = SourceRecord::Mcq {
            id: "q2".into(),
            source: "unit".into(),
            task: TaskCategory::GeneralVqa,
            image_ref: None,
            question: "Pick one".into(),
            options: vec![
                McqOption {
                    letter: "A".into(),
                    content: "x".into(),
                },
                McqOption {
                    letter: "B".into(),
                    content: "y".into(),
                },
            ],
            answer_letter: "A".into(),
        };
        let p = policy(0);
        let sample = reformat_mcq(&rec, &p, &mut record_rng(p.seed, rec.id())).unwrap();
        let mut contents = sample.candidates.clone();
        contents.sort();
        assert_eq!(contents, vec!["x".to_string(), "y".to_string()]);
        assert_eq!(sample.answer(), "x");
    }

    #[test]
    fn mcq_unknown_letter_and_too_few_options() {
        let mut rec = mcq_record();
        if let SourceRecord::Mcq { answer_letter, .. } = &mut rec {
            *answer_letter = "Z".into();
        }
        let p = policy(0);
        assert!(matches!(
            reformat_mcq(&rec, &p, &mut record_rng(0, "q1")),
            Err(ReformatError::UnknownAnswerLetter { .. })
        ));

        let rec = mcq_record();
        let big = DistractorPolicy {
            target_candidate_count: 5,
            ..policy(0)
        };
        assert!(matches!(
            reformat_mcq(&rec, &big, &mut record_rng(0, "q1")),
            Err(ReformatError::TooFewOptions { .. })
        ));
    }

    #[test]
    fn mcq_same_seed_is_byte_identical() {
        let rec = mcq_record();
        let p = policy(99);
        let a = reformat_record(&rec, &p, None).unwrap().0;
        let b = reformat_record(&rec, &p, None).unwrap().0;
        assert_eq!(
            crate::bench::canonical_line(&a.sample),
            crate::bench::canonical_line(&b.sample)
        );
        let other_seed = reformat_record(&rec, &policy(100), None).unwrap().0;
        // contents come from the same option set either way
        assert_eq!(other_seed.sample.answer(), "dog");
    }

    #[test]
    fn perturb_integer_by_one() {
        let p = policy(1);
        for seed in 0..20 {
            let mut rng = record_rng(seed, "n");
            let d = perturb_numeric("7", &p, &mut rng).unwrap();
            assert!(d == "6" || d == "8", "{d}");
        }
        let mut rng = record_rng(0, "n");
        let d = perturb_numeric("0", &p, &mut rng).unwrap();
        assert!(d == "-1" || d == "1", "{d}");
    }

    #[test]
    fn perturb_decimal_by_tenth_keeps_precision() {
        let p = policy(1);
        for seed in 0..20 {
            let mut rng = record_rng(seed, "d");
            let d = perturb_numeric("3.5", &p, &mut rng).unwrap();
            assert!(d == "3.4" || d == "3.6", "{d}");
        }
        let mut rng = record_rng(3, "d2");
        let d = perturb_numeric("2.50", &p, &mut rng).unwrap();
        assert!(d == "2.40" || d == "2.60", "{d}");
        let mut rng = record_rng(4, "d3");
        let d = perturb_numeric("0.05", &p, &mut rng).unwrap();
        assert!(d == "-0.05" || d == "0.15", "{d}");
    }

    #[test]
    fn perturb_trailing_dot_uses_delta_precision() {
        // "3." cannot express +/-0.1 at zero printed decimals; the distractor
        // comes out at the delta's own precision
        let p = policy(1);
        for seed in 0..20 {
            let mut rng = record_rng(seed, "td");
            let d = perturb_numeric("3.", &p, &mut rng).unwrap();
            assert!(d == "2.9" || d == "3.1", "{d}");
        }
    }

    #[test]
    fn perturb_rejects_non_numeric() {
        let p = policy(0);
        let mut rng = record_rng(0, "x");
        assert!(matches!(
            perturb_numeric("mgh", &p, &mut rng),
            Err(ReformatError::NonNumericAnswer(_))
        ));
        assert!(matches!(
            perturb_numeric("1e3", &p, &mut rng),
            Err(ReformatError::NonNumericAnswer(_))
        ));
    }

    #[test]
    fn negative_flip_when_disallowed() {
        let p = DistractorPolicy {
            allow_negative: false,
            ..policy(0)
        };
        for seed in 0..20 {
            let mut rng = record_rng(seed, "z");
            let d = perturb_numeric("0", &p, &mut rng).unwrap();
            assert_eq!(d, "1");
        }
        let mut rng = record_rng(0, "z");
        assert!(matches!(
            perturb_numeric("-5", &p, &mut rng),
            Err(ReformatError::NegativeNotAllowed { .. })
        ));
    }

    #[test]
    fn expression_distractor_accepts_stub() {
        let client = ScriptedClient::always("2mgh");
        let mut audit = Vec::new();
        let d = generate_expression_distractor("e1", "mgh", "prompt", &[], &client, 3, &mut audit)
            .unwrap();
        assert_eq!(d, "2mgh");
        assert_eq!(audit.len(), 1);
        assert_eq!(audit[0].verdict, AuditVerdict::Accepted);
    }

    #[test]
    fn expression_distractor_rejects_echoed_answer() {
        let client = ScriptedClient::always("mgh");
        let mut audit = Vec::new();
        let err = generate_expression_distractor("e2", "mgh", "p", &[], &client, 3, &mut audit)
            .unwrap_err();
        assert!(matches!(err, ReformatError::LlmFailed { attempts: 3, .. }));
        assert_eq!(audit.len(), 3);
        assert!(audit
            .iter()
            .all(|a| a.verdict == AuditVerdict::RejectedEqualsAnswer));
    }

    #[test]
    fn expression_distractor_times_out_with_attempt_count() {
        let client = ScriptedClient::sequence(vec![ScriptedReply::Timeout, ScriptedReply::Timeout]);
        let mut audit = Vec::new();
        let err = generate_expression_distractor("e3", "mgh", "p", &[], &client, 2, &mut audit)
            .unwrap_err();
        match err {
            ReformatError::LlmFailed { attempts, .. } => assert_eq!(attempts, 2),
            other => panic!("unexpected error {other}"),
        }
    }

    fn wiki_record(pool: &[&str]) -> SourceRecord {
        SourceRecord::WikiTitle {
            id: "w1".into(),
            source: "Wiki-Plant".into(),
            task: TaskCategory::NaturalConceptIdentification,
            image_ref: Some("img/rosa.jpg".into()),
            title: "Rosa canina".into(),
            pool: pool.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn wiki_question_and_candidates() {
        let rec = wiki_record(&["Quercus robur", "Acer rubrum"]);
        let p = policy(5);
        let sample = reformat_wiki(&rec, &p, &mut record_rng(p.seed, rec.id())).unwrap();
        assert_eq!(sample.question, "The image shows");
        assert_eq!(sample.candidates.len(), 2);
        assert_eq!(sample.answer(), "Rosa canina");
        let other = sample
            .candidates
            .iter()
            .find(|c| *c != "Rosa canina")
            .unwrap();
        assert!(["Quercus robur", "Acer rubrum"].contains(&other.as_str()));
    }

    #[test]
    fn wiki_empty_pool_errors() {
        let rec = wiki_record(&[]);
        let p = policy(0);
        assert!(matches!(
            reformat_wiki(&rec, &p, &mut record_rng(0, "w1")),
            Err(ReformatError::PoolTooSmall { .. })
        ));
    }

    #[test]
    fn wiki_pool_excludes_answer_even_if_present() {
        let rec = wiki_record(&["Rosa canina", "Acer rubrum"]);
        let p = policy(0);
        let sample = reformat_wiki(&rec, &p, &mut record_rng(0, "w1")).unwrap();
        assert_eq!(
            sample
                .candidates
                .iter()
                .filter(|c| *c == "Rosa canina")
                .count(),
            1
        );
    }

    #[test]
    fn wiki_same_seed_identical() {
        let rec = wiki_record(&["A1", "B2", "C3", "D4"]);
        let p = policy(17);
        let a = reformat_wiki(&rec, &p, &mut record_rng(p.seed, rec.id())).unwrap();
        let b = reformat_wiki(&rec, &p, &mut record_rng(p.seed, rec.id())).unwrap();
        assert_eq!(a, b);
    }

    fn spatial_record() -> SourceRecord {
        SourceRecord::SpatialTriplet {
            id: "sp1".into(),
            source: "Web-Spatial".into(),
            task: TaskCategory::SpatialReasoning,
            image_ref: Some("img/scene.jpg".into()),
            description: "A cup sits to the left of a book.".into(),
        }
    }

    #[test]
    fn spatial_triplet_builds_pending_sample() {
        let client = ScriptedClient::always(
            r#"{"question": "Where is the cup relative to the book?", "answer": "left of the book", "distractor": "right of the book"}"#,
        );
        let rec = spatial_record();
        let p = policy(2);
        let mut audit = Vec::new();
        let out = build_spatial_sample(
            &rec,
            &p,
            &client,
            &mut record_rng(p.seed, rec.id()),
            &mut audit,
        )
        .unwrap();
        assert_eq!(out.review, ReviewStatus::PendingReview);
        assert_eq!(out.sample.candidates.len(), 2);
        assert_eq!(out.sample.answer(), "left of the book");
        assert!(out.sample.candidates.contains(&"right of the book".into()));
        assert_eq!(audit.len(), 1);
    }

    #[test]
    fn spatial_rejects_equal_distractor_and_empty_question() {
        let rec = spatial_record();
        let p = policy(0);
        let equal =
            ScriptedClient::always(r#"{"question": "q?", "answer": "left", "distractor": "left"}"#);
        let mut audit = Vec::new();
        assert!(matches!(
            build_spatial_sample(&rec, &p, &equal, &mut record_rng(0, "sp1"), &mut audit),
            Err(ReformatError::MalformedTriplet { .. })
        ));
        let empty = ScriptedClient::always(
            r#"{"question": "  ", "answer": "left", "distractor": "right"}"#,
        );
        assert!(matches!(
            build_spatial_sample(&rec, &p, &empty, &mut record_rng(0, "sp1"), &mut audit),
            Err(ReformatError::MalformedTriplet { .. })
        ));
    }

    #[test]
    fn batch_reports_failures_and_preserves_order() {
        let records = vec![
            mcq_record(),
            SourceRecord::FreeFormNumeric {
                id: "n1".into(),
                source: "MathVista".into(),
                task: TaskCategory::MathematicalReasoning,
                image_ref: None,
                question: "How many apples?".into(),
                answer: "not-a-number".into(),
            },
            wiki_record(&["Quercus robur"]),
        ];
        let batch = reformat_records_sequential(&records, &policy(1), None);
        assert_eq!(batch.samples.len(), 2);
        assert_eq!(batch.failures.len(), 1);
        assert_eq!(batch.failures[0].record_id, "n1");
        assert_eq!(batch.samples[0].sample.id, "q1");
        assert_eq!(batch.samples[1].sample.id, "w1");
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_batch_matches_sequential() {
        let records: Vec<SourceRecord> = (0..40)
            .map(|i| SourceRecord::FreeFormNumeric {
                id: format!("num-{i}"),
                source: "MathVista".into(),
                task: TaskCategory::MathematicalReasoning,
                image_ref: None,
                question: format!("Value of item {i}?"),
                answer: format!("{}.{}", i, i % 10),
            })
            .collect();
        let p = policy(7);
        let seq = reformat_records_sequential(&records, &p, None);
        let par = reformat_records_parallel(&records, &p, None);
        assert_eq!(seq.samples, par.samples);
        assert_eq!(seq.failures.len(), par.failures.len());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn numeric_closure_integers(n in -10_000i64..10_000, seed in 0u64..500) {
                let p = policy(seed);
                let answer = n.to_string();
                let mut rng = record_rng(seed, &answer);
                let d = perturb_numeric(&answer, &p, &mut rng).unwrap();
                let diff = d.parse::<i64>().unwrap() - n;
                prop_assert!(diff == 1 || diff == -1);
            }

            #[test]
            fn numeric_closure_decimals(
                whole in -1000i64..1000,
                frac in 0u32..100,
                seed in 0u64..500,
            ) {
                let p = policy(seed);
                let answer = format!("{whole}.{frac:02}");
                let mut rng = record_rng(seed, &answer);
                let d = perturb_numeric(&answer, &p, &mut rng).unwrap();
                let diff = d.parse::<f64>().unwrap() - answer.parse::<f64>().unwrap();
                prop_assert!((diff.abs() - 0.1).abs() < 1e-9, "diff {diff}");
                prop_assert_ne!(&d, &answer);
            }

            #[test]
            fn candidate_count_uniformity_and_answer_position(seed in 0u64..200) {
                let records = vec![
                    mcq_record(),
                    wiki_record(&["Quercus robur", "Acer rubrum", "Picea abies"]),
                    SourceRecord::FreeFormNumeric {
                        id: "n7".into(),
                        source: "MathVista".into(),
                        task: TaskCategory::MathematicalReasoning,
                        image_ref: None,
                        question: "Count?".into(),
                        answer: "41".into(),
                    },
                ];
                let p = policy(seed);
                let batch = reformat_records_sequential(&records, &p, None);
                prop_assert!(batch.failures.is_empty());
                for r in &batch.samples {
                    prop_assert_eq!(r.sample.candidates.len(), p.target_candidate_count);
                    // the answer appears exactly once, at answer_index
                    let answer = r.sample.answer().to_string();
                    let count = r.sample.candidates.iter().filter(|c| **c == answer).count();
                    prop_assert_eq!(count, 1);
                }
            }
        }
    }
}
