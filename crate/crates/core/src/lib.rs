//! Decoding-free evaluation toolkit for pre-trained multi-modal checkpoints.
//!
//! The crate scores fixed candidate sets under a pluggable logit provider and
//! derives soft discrimination scores, answer-ranking accuracies, perplexity,
//! and label NLL per task category. It also ships the machinery around that
//! core: a unified benchmark data model with manifest validation, reformatters
//! that turn heterogeneous source benchmarks into the unified format, analysis
//! utilities (aggregation, checkpoint series, Pearson correlation, reliability
//! curves), and a resumable batch runner with an append-only results store.
//!
//! Scoring and resampling inner loops are data-parallel via rayon when the
//! `parallel` feature (default) is enabled; builds without it fall back to
//! sequential execution with identical outputs.

pub mod analysis;
pub mod bench;
pub mod hash;
pub mod metrics;
pub mod provider;
pub mod reformat;
pub mod runner;

pub use bench::{Ability, BenchmarkManifest, Sample, TaskCategory};
pub use metrics::{CandidateScore, Metric, SampleResult, TaskReport};
pub use provider::{LogitProvider, ProviderSpec, TokenLogits};
pub use runner::RunConfig;
