//! Logit-provider contract abstracting the scored model, plus deterministic
//! in-process providers for testing and offline evaluation.
//!
//! Providers only ever see a [`CandidateQuery`] — the sample id, image
//! locator, question, and the one candidate being scored. The answer index
//! and the sibling candidates are structurally out of reach, so every
//! provider is answer-blind and candidates are scored independently by
//! construction.
//!
//! Providers own tokenization: they report the token ids and the per-token
//! logits, and the metrics layer never re-tokenizes. Tokens that are not part
//! of the candidate string (BOS and similar framing tokens) are excluded from
//! what a provider reports. Conversation templates and other model-specific
//! input framing are plugin-provider parameters; nothing outside a provider
//! knows about them.

use crate::bench::Sample;
use crate::hash;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Per-token raw scores for one candidate, as reported by a provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogits {
    pub tokens: Vec<String>,
    pub logits: Vec<f64>,
}

impl TokenLogits {
    pub fn new(tokens: Vec<String>, logits: Vec<f64>) -> Result<TokenLogits, ProviderError> {
        if tokens.is_empty() || tokens.len() != logits.len() {
            return Err(ProviderError::MalformedLogits(format!(
                "{} tokens vs {} logits (need equal and >= 1)",
                tokens.len(),
                logits.len()
            )));
        }
        if let Some(bad) = logits.iter().find(|l| !l.is_finite()) {
            return Err(ProviderError::MalformedLogits(format!(
                "non-finite logit {bad}"
            )));
        }
        Ok(TokenLogits { tokens, logits })
    }

    pub fn token_count(&self) -> usize {
        self.tokens.len()
    }
}

/// The narrowed view of a sample a provider is allowed to condition on.
#[derive(Debug, Clone, Copy)]
pub struct CandidateQuery<'a> {
    pub sample_id: &'a str,
    pub image_ref: Option<&'a str>,
    pub question: &'a str,
    pub candidate: &'a str,
    pub candidate_index: usize,
}

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("sample {sample_id} candidate {candidate_index} tokenizes to zero tokens")]
    EmptyCandidate {
        sample_id: String,
        candidate_index: usize,
    },
    #[error("candidate index {index} out of range for sample {sample_id} ({len} candidates)")]
    CandidateOutOfRange {
        sample_id: String,
        index: usize,
        len: usize,
    },
    #[error("no stored logits for sample {sample_id} candidate {candidate_index}")]
    MissingEntry {
        sample_id: String,
        candidate_index: usize,
    },
    #[error("sample {sample_id} has no image but provider requires one")]
    MissingImage { sample_id: String },
    #[error("provider does not expose label NLLs")]
    NllUnsupported,
    #[error("malformed logits: {0}")]
    MalformedLogits(String),
    #[error("malformed NLLs: {0}")]
    MalformedNlls(String),
    #[error("provider backend unavailable: {0}")]
    Unavailable(String),
    #[error("unknown plugin {0:?}")]
    UnknownPlugin(String),
    #[error("bad provider spec: {0}")]
    BadSpec(String),
    #[error("io error on {path}: {err}")]
    Io { path: PathBuf, err: std::io::Error },
}

/// Anything that can assign per-token logits (and optionally per-token label
/// NLLs) to a candidate under a fixed conditioning context.
///
/// Implementations must be deterministic: the same query against the same
/// provider state yields bit-identical output, in any call order.
pub trait LogitProvider: Send + Sync {
    fn kind(&self) -> &str;

    /// One raw logit per candidate token.
    fn score_tokens(&self, query: &CandidateQuery<'_>) -> Result<TokenLogits, ProviderError>;

    /// One negative log-likelihood per candidate token, under full-vocabulary
    /// normalization (mock providers simulate it from a declared vocabulary
    /// size). Values are >= 0.
    fn label_nll(&self, query: &CandidateQuery<'_>) -> Result<Vec<f64>, ProviderError>;

    /// Whether [`LogitProvider::label_nll`] is usable. Metrics that need NLLs
    /// are rejected up front when this is false.
    fn supports_nll(&self) -> bool {
        true
    }

    /// Non-reentrant providers force single-worker scoring in the runner.
    fn reentrant(&self) -> bool {
        true
    }
}

fn query_for<'a>(
    sample: &'a Sample,
    candidate_index: usize,
) -> Result<CandidateQuery<'a>, ProviderError> {
    let candidate = sample.candidates.get(candidate_index).ok_or_else(|| {
        ProviderError::CandidateOutOfRange {
            sample_id: sample.id.clone(),
            index: candidate_index,
            len: sample.candidates.len(),
        }
    })?;
    Ok(CandidateQuery {
        sample_id: &sample.id,
        image_ref: sample.image_ref.as_deref(),
        question: &sample.question,
        candidate,
        candidate_index,
    })
}

/// Scores one candidate of a sample, re-validating the provider's output.
pub fn score_tokens(
    provider: &dyn LogitProvider,
    sample: &Sample,
    candidate_index: usize,
) -> Result<TokenLogits, ProviderError> {
    let query = query_for(sample, candidate_index)?;
    let tl = provider.score_tokens(&query)?;
    // Re-validate across the trust boundary; plugins may misbehave.
    TokenLogits::new(tl.tokens, tl.logits)
}

/// Per-token label NLLs for one candidate, validated nonnegative and finite.
pub fn label_nll(
    provider: &dyn LogitProvider,
    sample: &Sample,
    candidate_index: usize,
) -> Result<Vec<f64>, ProviderError> {
    let query = query_for(sample, candidate_index)?;
    let nlls = provider.label_nll(&query)?;
    validate_nlls(&nlls)?;
    Ok(nlls)
}

fn validate_nlls(nlls: &[f64]) -> Result<(), ProviderError> {
    if nlls.is_empty() {
        return Err(ProviderError::MalformedNlls("empty NLL list".into()));
    }
    if let Some(bad) = nlls.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(ProviderError::MalformedNlls(format!(
            "NLL {bad} is negative or non-finite"
        )));
    }
    Ok(())
}

/// Mock tokenization rule shared by the in-process providers: whitespace
/// splitting over the candidate text.
pub fn whitespace_tokens(candidate: &str) -> Vec<String> {
    candidate.split_whitespace().map(str::to_owned).collect()
}

fn mock_tokens(query: &CandidateQuery<'_>) -> Result<Vec<String>, ProviderError> {
    let tokens = whitespace_tokens(query.candidate);
    if tokens.is_empty() {
        return Err(ProviderError::EmptyCandidate {
            sample_id: query.sample_id.to_owned(),
            candidate_index: query.candidate_index,
        });
    }
    Ok(tokens)
}

/// Assigns logit 0.0 to every token: a model with no preference at all.
/// Label NLLs are `ln(vocab_size)` per token, the uniform distribution over
/// the declared vocabulary.
#[derive(Debug, Clone)]
pub struct MockUniformProvider {
    pub vocab_size: u64,
}

impl MockUniformProvider {
    pub fn new(vocab_size: u64) -> MockUniformProvider {
        MockUniformProvider { vocab_size }
    }
}

impl LogitProvider for MockUniformProvider {
    fn kind(&self) -> &str {
        "mock-uniform"
    }

    fn score_tokens(&self, query: &CandidateQuery<'_>) -> Result<TokenLogits, ProviderError> {
        let tokens = mock_tokens(query)?;
        let logits = vec![0.0; tokens.len()];
        TokenLogits::new(tokens, logits)
    }

    fn label_nll(&self, query: &CandidateQuery<'_>) -> Result<Vec<f64>, ProviderError> {
        let tokens = mock_tokens(query)?;
        Ok(vec![(self.vocab_size as f64).ln(); tokens.len()])
    }
}

/// Deterministic pseudo-random logits derived by hashing the conditioning
/// context. Answer-blind by construction: the hash sees the sample id,
/// question, and the candidate's own token prefix, nothing else.
#[derive(Debug, Clone)]
pub struct MockHashProvider {
    pub seed: u64,
    pub vocab_size: u64,
}

const LOGIT_CHANNEL: u64 = 0x5c;
const NLL_CHANNEL: u64 = 0x11;

impl MockHashProvider {
    pub fn new(seed: u64, vocab_size: u64) -> MockHashProvider {
        MockHashProvider { seed, vocab_size }
    }

    fn context_hash(&self, query: &CandidateQuery<'_>, channel: u64) -> u64 {
        let mut h = hash::combine(self.seed, channel);
        h = hash::combine(h, hash::fnv1a(query.sample_id.as_bytes()));
        h = hash::combine(h, hash::fnv1a(query.question.as_bytes()));
        h
    }
}

impl LogitProvider for MockHashProvider {
    fn kind(&self) -> &str {
        "mock-hash"
    }

    fn score_tokens(&self, query: &CandidateQuery<'_>) -> Result<TokenLogits, ProviderError> {
        let tokens = mock_tokens(query)?;
        let base = self.context_hash(query, LOGIT_CHANNEL);
        // Autoregressive-style conditioning: each token's hash folds in the
        // running prefix of the candidate's own tokens.
        let mut prefix = 0xcbf29ce484222325u64;
        let logits = tokens
            .iter()
            .map(|tok| {
                prefix = hash::combine(prefix, hash::fnv1a(tok.as_bytes()));
                let h = hash::combine(base, prefix);
                // uniform in [-1, 1]
                2.0 * hash::unit_f64(h) - 1.0
            })
            .collect();
        TokenLogits::new(tokens, logits)
    }

    fn label_nll(&self, query: &CandidateQuery<'_>) -> Result<Vec<f64>, ProviderError> {
        let tokens = mock_tokens(query)?;
        let base = self.context_hash(query, NLL_CHANNEL);
        let ln_vocab = (self.vocab_size as f64).ln();
        let mut prefix = 0xcbf29ce484222325u64;
        Ok(tokens
            .iter()
            .map(|tok| {
                prefix = hash::combine(prefix, hash::fnv1a(tok.as_bytes()));
                let h = hash::combine(base, prefix);
                // uniform in [0, 2 ln V): mean ln V, the uniform-vocab level
                2.0 * ln_vocab * hash::unit_f64(h)
            })
            .collect())
    }
}

/// One stored scoring record, keyed by (sample_id, candidate_index). Also the
/// line format of precomputed-logits files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogitRecord {
    pub sample_id: String,
    pub candidate_index: usize,
    pub tokens: Vec<String>,
    pub logits: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nlls: Option<Vec<f64>>,
}

/// Serves logits from an in-memory table. NLLs are available only when every
/// entry carries them.
pub struct TableProvider {
    kind: &'static str,
    entries: BTreeMap<(String, usize), LogitRecord>,
    all_nlls: bool,
}

impl TableProvider {
    pub fn from_records(records: Vec<LogitRecord>) -> Result<TableProvider, ProviderError> {
        Self::build("table", records)
    }

    fn build(
        kind: &'static str,
        records: Vec<LogitRecord>,
    ) -> Result<TableProvider, ProviderError> {
        let mut entries = BTreeMap::new();
        let mut all_nlls = true;
        for rec in records {
            TokenLogits::new(rec.tokens.clone(), rec.logits.clone())?;
            match &rec.nlls {
                Some(nlls) => {
                    validate_nlls(nlls)?;
                    if nlls.len() != rec.tokens.len() {
                        return Err(ProviderError::MalformedNlls(format!(
                            "sample {} candidate {}: {} NLLs vs {} tokens",
                            rec.sample_id,
                            rec.candidate_index,
                            nlls.len(),
                            rec.tokens.len()
                        )));
                    }
                }
                None => all_nlls = false,
            }
            let key = (rec.sample_id.clone(), rec.candidate_index);
            if entries.insert(key, rec).is_some() {
                return Err(ProviderError::BadSpec(
                    "duplicate (sample_id, candidate_index) entry".into(),
                ));
            }
        }
        Ok(TableProvider {
            kind,
            entries,
            all_nlls,
        })
    }

    /// Loads a single-document table file: `{"entries": [ ... ]}`.
    pub fn from_table_file(path: &Path) -> Result<TableProvider, ProviderError> {
        #[derive(Deserialize)]
        struct TableFile {
            entries: Vec<LogitRecord>,
        }
        let text = fs::read_to_string(path).map_err(|err| ProviderError::Io {
            path: path.to_path_buf(),
            err,
        })?;
        let table: TableFile = serde_json::from_str(&text)
            .map_err(|err| ProviderError::BadSpec(format!("{}: {err}", path.display())))?;
        Self::build("table", table.entries)
    }

    /// Loads a precomputed-logits file: one record per line.
    pub fn from_precomputed_file(path: &Path) -> Result<TableProvider, ProviderError> {
        let file = fs::File::open(path).map_err(|err| ProviderError::Io {
            path: path.to_path_buf(),
            err,
        })?;
        let mut records = Vec::new();
        for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|err| ProviderError::Io {
                path: path.to_path_buf(),
                err,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: LogitRecord = serde_json::from_str(&line).map_err(|err| {
                ProviderError::BadSpec(format!("{}:{}: {err}", path.display(), idx + 1))
            })?;
            records.push(rec);
        }
        Self::build("precomputed", records)
    }

    fn lookup(&self, query: &CandidateQuery<'_>) -> Result<&LogitRecord, ProviderError> {
        self.entries
            .get(&(query.sample_id.to_owned(), query.candidate_index))
            .ok_or_else(|| ProviderError::MissingEntry {
                sample_id: query.sample_id.to_owned(),
                candidate_index: query.candidate_index,
            })
    }
}

impl LogitProvider for TableProvider {
    fn kind(&self) -> &str {
        self.kind
    }

    fn score_tokens(&self, query: &CandidateQuery<'_>) -> Result<TokenLogits, ProviderError> {
        let rec = self.lookup(query)?;
        TokenLogits::new(rec.tokens.clone(), rec.logits.clone())
    }

    fn label_nll(&self, query: &CandidateQuery<'_>) -> Result<Vec<f64>, ProviderError> {
        let rec = self.lookup(query)?;
        rec.nlls.clone().ok_or(ProviderError::NllUnsupported)
    }

    fn supports_nll(&self) -> bool {
        self.all_nlls
    }
}

fn default_vocab_size() -> u64 {
    32000
}

/// Declarative provider selection, as written in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ProviderSpec {
    MockUniform {
        #[serde(default = "default_vocab_size")]
        vocab_size: u64,
    },
    MockHash {
        seed: u64,
        #[serde(default = "default_vocab_size")]
        vocab_size: u64,
    },
    Table {
        path: PathBuf,
    },
    Precomputed {
        path: PathBuf,
    },
    Plugin {
        plugin: String,
        #[serde(default)]
        params: BTreeMap<String, String>,
    },
}

type PluginCtor = Box<
    dyn Fn(&BTreeMap<String, String>) -> Result<Box<dyn LogitProvider>, ProviderError>
        + Send
        + Sync,
>;

/// Maps plugin identifiers to provider constructors. Real checkpoint backends
/// register here; none ship with the crate.
#[derive(Default)]
pub struct ProviderRegistry {
    ctors: BTreeMap<String, PluginCtor>,
}

impl ProviderRegistry {
    pub fn new() -> ProviderRegistry {
        ProviderRegistry::default()
    }

    pub fn register<F>(&mut self, name: &str, ctor: F)
    where
        F: Fn(&BTreeMap<String, String>) -> Result<Box<dyn LogitProvider>, ProviderError>
            + Send
            + Sync
            + 'static,
    {
        self.ctors.insert(name.to_owned(), Box::new(ctor));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.ctors.keys().map(String::as_str)
    }
}

/// Instantiates the provider a spec describes. Plugin kinds are resolved
/// through the registry; everything else is built in-process.
pub fn build_provider(
    spec: &ProviderSpec,
    registry: &ProviderRegistry,
) -> Result<Box<dyn LogitProvider>, ProviderError> {
    match spec {
        ProviderSpec::MockUniform { vocab_size } => {
            Ok(Box::new(MockUniformProvider::new(*vocab_size)))
        }
        ProviderSpec::MockHash { seed, vocab_size } => {
            Ok(Box::new(MockHashProvider::new(*seed, *vocab_size)))
        }
        ProviderSpec::Table { path } => Ok(Box::new(TableProvider::from_table_file(path)?)),
        ProviderSpec::Precomputed { path } => {
            Ok(Box::new(TableProvider::from_precomputed_file(path)?))
        }
        ProviderSpec::Plugin { plugin, params } => {
            let ctor = registry
                .ctors
                .get(plugin)
                .ok_or_else(|| ProviderError::UnknownPlugin(plugin.clone()))?;
            ctor(params)
        }
    }
}
