//! Unified benchmark data model: samples, task taxonomy, manifests.
//!
//! The on-disk sample format is UTF-8 JSON lines with a fixed key order
//! (`id`, `task`, `source`, `image_ref`, `question`, `candidates`,
//! `answer_index`). [`canonical_line`] is the single source of truth for that
//! encoding; loading a canonical file and re-serializing it is byte-identical.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Top-level ability split of the task taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ability {
    Perception,
    Reasoning,
}

impl fmt::Display for Ability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ability::Perception => write!(f, "perception"),
            Ability::Reasoning => write!(f, "reasoning"),
        }
    }
}

/// One of the seven task categories. The ability each category rolls up to is
/// fixed: three perception categories, four reasoning categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskCategory {
    NaturalConceptIdentification,
    CulturalConceptIdentification,
    GeneralVqa,
    SpatialReasoning,
    MathematicalReasoning,
    PhysicalReasoning,
    MultiDisciplineVqa,
}

impl TaskCategory {
    /// All seven categories in taxonomy order.
    pub const ALL: [TaskCategory; 7] = [
        TaskCategory::NaturalConceptIdentification,
        TaskCategory::CulturalConceptIdentification,
        TaskCategory::GeneralVqa,
        TaskCategory::SpatialReasoning,
        TaskCategory::MathematicalReasoning,
        TaskCategory::PhysicalReasoning,
        TaskCategory::MultiDisciplineVqa,
    ];

    pub fn ability(self) -> Ability {
        match self {
            TaskCategory::NaturalConceptIdentification
            | TaskCategory::CulturalConceptIdentification
            | TaskCategory::GeneralVqa => Ability::Perception,
            TaskCategory::SpatialReasoning
            | TaskCategory::MathematicalReasoning
            | TaskCategory::PhysicalReasoning
            | TaskCategory::MultiDisciplineVqa => Ability::Reasoning,
        }
    }

    /// Stable snake_case name, matching the serialized form.
    pub fn name(self) -> &'static str {
        match self {
            TaskCategory::NaturalConceptIdentification => "natural_concept_identification",
            TaskCategory::CulturalConceptIdentification => "cultural_concept_identification",
            TaskCategory::GeneralVqa => "general_vqa",
            TaskCategory::SpatialReasoning => "spatial_reasoning",
            TaskCategory::MathematicalReasoning => "mathematical_reasoning",
            TaskCategory::PhysicalReasoning => "physical_reasoning",
            TaskCategory::MultiDisciplineVqa => "multi_discipline_vqa",
        }
    }

    pub fn parse_name(name: &str) -> Option<TaskCategory> {
        TaskCategory::ALL.iter().copied().find(|t| t.name() == name)
    }
}

impl fmt::Display for TaskCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.name())
    }
}

/// One benchmark question in the unified candidate-scoring format.
///
/// Field declaration order is the canonical on-disk key order; do not reorder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub task: TaskCategory,
    pub source: String,
    #[serde(default)]
    pub image_ref: Option<String>,
    pub question: String,
    pub candidates: Vec<String>,
    pub answer_index: usize,
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("io error on {path}: {err}")]
    Io { path: PathBuf, err: std::io::Error },
    #[error("{path}:{line}: malformed record: {err}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        err: String,
    },
    #[error("sample {id}: {reason}")]
    InvalidSample { id: String, reason: String },
    #[error("sample {id}: task {found} does not match expected {expected}")]
    TaskMismatch {
        id: String,
        expected: TaskCategory,
        found: TaskCategory,
    },
}

/// Collapses runs of whitespace and trims, so that candidates differing only
/// in formatting are treated as duplicates.
pub fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl Sample {
    /// Checks every structural invariant; called on load and after reformat.
    pub fn validate(&self) -> Result<(), BenchError> {
        let invalid = |reason: String| BenchError::InvalidSample {
            id: self.id.clone(),
            reason,
        };
        if self.id.is_empty() {
            return Err(BenchError::InvalidSample {
                id: "<empty>".into(),
                reason: "empty id".into(),
            });
        }
        if self.question.trim().is_empty() {
            return Err(invalid("empty question".into()));
        }
        if self.candidates.len() < 2 {
            return Err(invalid(format!(
                "{} candidate(s), need at least 2",
                self.candidates.len()
            )));
        }
        let mut normalized = Vec::with_capacity(self.candidates.len());
        for (i, c) in self.candidates.iter().enumerate() {
            let n = normalize_whitespace(c);
            if n.is_empty() {
                return Err(invalid(format!("candidate {i} is empty")));
            }
            if normalized.contains(&n) {
                return Err(invalid(format!("duplicate candidate {c:?}")));
            }
            normalized.push(n);
        }
        if self.answer_index >= self.candidates.len() {
            return Err(invalid(format!(
                "answer_index {} out of range for {} candidates",
                self.answer_index,
                self.candidates.len()
            )));
        }
        Ok(())
    }

    /// The correct answer's content.
    pub fn answer(&self) -> &str {
        &self.candidates[self.answer_index]
    }
}

/// Canonical single-line encoding of a sample (no trailing newline).
pub fn canonical_line(sample: &Sample) -> String {
    // Struct field order gives the canonical key order; serde_json emits
    // `image_ref: null` when absent, which is part of the canonical form.
    serde_json::to_string(sample).expect("sample serialization cannot fail")
}

/// Loads samples from a JSON-lines file, validating every record. Blank lines
/// are not allowed except a trailing newline. With `expected_task`, every
/// sample must carry that task.
pub fn load_samples(
    path: &Path,
    expected_task: Option<TaskCategory>,
) -> Result<Vec<Sample>, BenchError> {
    let file = fs::File::open(path).map_err(|err| BenchError::Io {
        path: path.to_path_buf(),
        err,
    })?;
    let reader = BufReader::new(file);
    let mut samples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|err| BenchError::Io {
            path: path.to_path_buf(),
            err,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample =
            serde_json::from_str(&line).map_err(|err| BenchError::MalformedLine {
                path: path.to_path_buf(),
                line: idx + 1,
                err: err.to_string(),
            })?;
        sample.validate()?;
        if let Some(expected) = expected_task {
            if sample.task != expected {
                return Err(BenchError::TaskMismatch {
                    id: sample.id,
                    expected,
                    found: sample.task,
                });
            }
        }
        samples.push(sample);
    }
    Ok(samples)
}

/// Writes samples in canonical form, one record per line.
pub fn write_samples(path: &Path, samples: &[Sample]) -> Result<(), BenchError> {
    let io_err = |err| BenchError::Io {
        path: path.to_path_buf(),
        err,
    };
    let mut out = fs::File::create(path).map_err(io_err)?;
    for s in samples {
        writeln!(out, "{}", canonical_line(s)).map_err(io_err)?;
    }
    Ok(())
}

/// One line of a benchmark manifest: a sample file with its declared shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub source: String,
    pub task: TaskCategory,
    pub sample_count: u64,
    pub file: PathBuf,
}

/// Declares the files making up a benchmark and the expected grand total.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkManifest {
    pub name: String,
    pub entries: Vec<ManifestEntry>,
    pub declared_total: u64,
}

impl BenchmarkManifest {
    pub fn load(path: &Path) -> Result<BenchmarkManifest, BenchError> {
        let text = fs::read_to_string(path).map_err(|err| BenchError::Io {
            path: path.to_path_buf(),
            err,
        })?;
        serde_json::from_str(&text).map_err(|err| BenchError::MalformedLine {
            path: path.to_path_buf(),
            line: 0,
            err: err.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), BenchError> {
        let io_err = |err| BenchError::Io {
            path: path.to_path_buf(),
            err,
        };
        let mut out = fs::File::create(path).map_err(io_err)?;
        let text = serde_json::to_string_pretty(self).expect("manifest serialization cannot fail");
        writeln!(out, "{text}").map_err(io_err)
    }

    /// Sum of declared per-entry counts; invariant under entry reordering.
    pub fn entry_total(&self) -> u64 {
        self.entries.iter().map(|e| e.sample_count).sum()
    }
}

/// Outcome for a single manifest entry.
#[derive(Debug, Clone, Serialize)]
pub struct EntryReport {
    pub source: String,
    pub task: TaskCategory,
    pub declared: u64,
    pub found: Option<u64>,
    pub passed: bool,
    pub detail: Option<String>,
}

/// Validation outcome for a whole manifest. Failures are reported entries,
/// never errors.
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub manifest_name: String,
    pub entries: Vec<EntryReport>,
    pub declared_total: u64,
    pub counted_total: u64,
    pub passed: bool,
}

/// Checks every entry of a manifest: the referenced file must load cleanly,
/// every sample must validate and carry the entry's task, and the parsed count
/// must equal the declared count. Passes iff all entries pass and the declared
/// total matches the sum of entry counts. Entry files are resolved relative to
/// `base_dir`.
pub fn validate_manifest(manifest: &BenchmarkManifest, base_dir: &Path) -> ValidationReport {
    let mut entries = Vec::with_capacity(manifest.entries.len());
    let mut counted_total = 0u64;
    for entry in &manifest.entries {
        let path = if entry.file.is_absolute() {
            entry.file.clone()
        } else {
            base_dir.join(&entry.file)
        };
        let report = match load_samples(&path, Some(entry.task)) {
            Ok(samples) => {
                let found = samples.len() as u64;
                counted_total += found;
                if found == entry.sample_count {
                    EntryReport {
                        source: entry.source.clone(),
                        task: entry.task,
                        declared: entry.sample_count,
                        found: Some(found),
                        passed: true,
                        detail: None,
                    }
                } else {
                    EntryReport {
                        source: entry.source.clone(),
                        task: entry.task,
                        declared: entry.sample_count,
                        found: Some(found),
                        passed: false,
                        detail: Some(format!(
                            "declared {} but file contains {} (discrepancy {})",
                            entry.sample_count,
                            found,
                            entry.sample_count.abs_diff(found)
                        )),
                    }
                }
            }
            Err(err) => EntryReport {
                source: entry.source.clone(),
                task: entry.task,
                declared: entry.sample_count,
                found: None,
                passed: false,
                detail: Some(err.to_string()),
            },
        };
        entries.push(report);
    }
    let totals_match = manifest.declared_total == manifest.entry_total()
        && manifest.declared_total == counted_total;
    let passed = totals_match && entries.iter().all(|e| e.passed);
    ValidationReport {
        manifest_name: manifest.name.clone(),
        entries,
        declared_total: manifest.declared_total,
        counted_total,
        passed,
    }
}
