//! Per-source ingestion: maps arbitrary JSON-lines benchmark dumps onto
//! [`SourceRecord`]s using a declarative field mapping.

use super::{McqOption, ReformatError, SourceRecord};
use crate::bench::{normalize_whitespace, TaskCategory};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::fs;
use std::io::BufRead;
use std::path::{Path, PathBuf};

/// The five raw question kinds a source file can declare.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RawKind {
    Mcq,
    FreeFormNumeric,
    FreeFormExpression,
    WikiTitle,
    SpatialTriplet,
}

/// Column/field names in the source dump; unset fields use the defaults.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldMap {
    pub id: Option<String>,
    pub question: Option<String>,
    pub image: Option<String>,
    pub options: Option<String>,
    pub answer: Option<String>,
    pub title: Option<String>,
    pub description: Option<String>,
}

impl FieldMap {
    fn id(&self) -> &str {
        self.id.as_deref().unwrap_or("id")
    }
    fn question(&self) -> &str {
        self.question.as_deref().unwrap_or("question")
    }
    fn image(&self) -> &str {
        self.image.as_deref().unwrap_or("image_ref")
    }
    fn options(&self) -> &str {
        self.options.as_deref().unwrap_or("options")
    }
    fn answer(&self) -> &str {
        self.answer.as_deref().unwrap_or("answer")
    }
    fn title(&self) -> &str {
        self.title.as_deref().unwrap_or("title")
    }
    fn description(&self) -> &str {
        self.description.as_deref().unwrap_or("description")
    }
}

/// Declares how one source benchmark is read and where its reformatted
/// output goes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceConfig {
    pub source: String,
    pub task: TaskCategory,
    pub raw_kind: RawKind,
    /// Source dump, JSON lines; relative paths resolve against the config
    /// file location.
    pub data: PathBuf,
    /// Reformatted samples output path.
    pub output: PathBuf,
    #[serde(default)]
    pub fields: FieldMap,
}

impl SourceConfig {
    pub fn load(path: &Path) -> Result<SourceConfig, ReformatError> {
        let text = fs::read_to_string(path).map_err(|err| ReformatError::Io {
            path: path.to_path_buf(),
            err,
        })?;
        serde_json::from_str(&text)
            .map_err(|err| ReformatError::BadConfig(format!("{}: {err}", path.display())))
    }

    /// Review-status sidecar path, derived from the output path.
    pub fn review_output(&self) -> PathBuf {
        self.output.with_extension("review.jsonl")
    }

    /// Audit-log path, derived from the output path.
    pub fn audit_output(&self) -> PathBuf {
        self.output.with_extension("audit.jsonl")
    }
}

fn bad(line: usize, msg: impl std::fmt::Display) -> ReformatError {
    ReformatError::BadConfig(format!("data line {line}: {msg}"))
}

fn string_field(obj: &Value, field: &str, line: usize) -> Result<String, ReformatError> {
    match obj.get(field) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(Value::Number(n)) => Ok(n.to_string()),
        Some(other) => Err(bad(
            line,
            format!("field {field:?} has non-scalar value {other}"),
        )),
        None => Err(bad(line, format!("missing field {field:?}"))),
    }
}

fn optional_string_field(obj: &Value, field: &str) -> Option<String> {
    match obj.get(field) {
        Some(Value::String(s)) if !s.is_empty() => Some(s.clone()),
        _ => None,
    }
}

fn letter_for(index: usize) -> String {
    // A..Z then AA, AB, ... for pathological option counts
    let mut n = index;
    let mut out = String::new();
    loop {
        out.insert(0, (b'A' + (n % 26) as u8) as char);
        if n < 26 {
            break;
        }
        n = n / 26 - 1;
    }
    out
}

fn extract_options(obj: &Value, field: &str, line: usize) -> Result<Vec<McqOption>, ReformatError> {
    match obj.get(field) {
        // {"A": "cat", "B": "dog"} -- serde_json objects iterate in key order
        Some(Value::Object(map)) => map
            .iter()
            .map(|(letter, content)| {
                let content = match content {
                    Value::String(s) => s.clone(),
                    Value::Number(n) => n.to_string(),
                    other => {
                        return Err(bad(
                            line,
                            format!("option {letter:?} has non-scalar value {other}"),
                        ))
                    }
                };
                Ok(McqOption {
                    letter: letter.clone(),
                    content,
                })
            })
            .collect(),
        // ["cat", "dog"] -- letters assigned by position
        Some(Value::Array(items)) => items
            .iter()
            .enumerate()
            .map(|(i, item)| {
                let content = match item {
                    Value::String(s) => s.clone(),
                    Value::Number(n) => n.to_string(),
                    other => {
                        return Err(bad(
                            line,
                            format!("option {i} has non-scalar value {other}"),
                        ))
                    }
                };
                Ok(McqOption {
                    letter: letter_for(i),
                    content,
                })
            })
            .collect(),
        Some(other) => Err(bad(
            line,
            format!("options field is {other}, need object or array"),
        )),
        None => Err(bad(line, format!("missing options field {field:?}"))),
    }
}

fn extract_answer_letter(
    obj: &Value,
    field: &str,
    options: &[McqOption],
    line: usize,
) -> Result<String, ReformatError> {
    match obj.get(field) {
        Some(Value::String(s)) => Ok(s.clone()),
        // numeric answers are treated as an index into the option order
        Some(Value::Number(n)) => {
            let idx = n
                .as_u64()
                .ok_or_else(|| bad(line, format!("answer index {n} is not a valid index")))?
                as usize;
            options
                .get(idx)
                .map(|o| o.letter.clone())
                .ok_or_else(|| bad(line, format!("answer index {idx} out of range")))
        }
        Some(other) => Err(bad(line, format!("answer field is {other}"))),
        None => Err(bad(line, format!("missing answer field {field:?}"))),
    }
}

/// Reads a source dump into records. Wiki-title sources get their distractor
/// pools built here: every record's pool is the other distinct titles in the
/// same file (the same-category pool), excluding its own title.
pub fn read_source_records(
    config: &SourceConfig,
    base_dir: &Path,
) -> Result<Vec<SourceRecord>, ReformatError> {
    let data_path = if config.data.is_absolute() {
        config.data.clone()
    } else {
        base_dir.join(&config.data)
    };
    let file = fs::File::open(&data_path).map_err(|err| ReformatError::Io {
        path: data_path.clone(),
        err,
    })?;
    let mut rows: Vec<(usize, Value)> = Vec::new();
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|err| ReformatError::Io {
            path: data_path.clone(),
            err,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|err| bad(idx + 1, err))?;
        rows.push((idx + 1, value));
    }

    let f = &config.fields;
    let mut records = Vec::with_capacity(rows.len());
    match config.raw_kind {
        RawKind::Mcq => {
            for (line, obj) in &rows {
                let options = extract_options(obj, f.options(), *line)?;
                let answer_letter = extract_answer_letter(obj, f.answer(), &options, *line)?;
                records.push(SourceRecord::Mcq {
                    id: string_field(obj, f.id(), *line)?,
                    source: config.source.clone(),
                    task: config.task,
                    image_ref: optional_string_field(obj, f.image()),
                    question: string_field(obj, f.question(), *line)?,
                    options,
                    answer_letter,
                });
            }
        }
        RawKind::FreeFormNumeric | RawKind::FreeFormExpression => {
            for (line, obj) in &rows {
                let id = string_field(obj, f.id(), *line)?;
                let question = string_field(obj, f.question(), *line)?;
                let answer = string_field(obj, f.answer(), *line)?;
                let image_ref = optional_string_field(obj, f.image());
                records.push(match config.raw_kind {
                    RawKind::FreeFormNumeric => SourceRecord::FreeFormNumeric {
                        id,
                        source: config.source.clone(),
                        task: config.task,
                        image_ref,
                        question,
                        answer,
                    },
                    _ => SourceRecord::FreeFormExpression {
                        id,
                        source: config.source.clone(),
                        task: config.task,
                        image_ref,
                        question,
                        answer,
                    },
                });
            }
        }
        RawKind::WikiTitle => {
            let titles: Vec<String> = rows
                .iter()
                .map(|(line, obj)| string_field(obj, f.title(), *line))
                .collect::<Result<_, _>>()?;
            for (i, (line, obj)) in rows.iter().enumerate() {
                let title = titles[i].clone();
                let own = normalize_whitespace(&title);
                let mut pool = Vec::new();
                let mut seen = Vec::new();
                for (j, t) in titles.iter().enumerate() {
                    if i == j {
                        continue;
                    }
                    let n = normalize_whitespace(t);
                    if n == own || seen.contains(&n) {
                        continue;
                    }
                    seen.push(n);
                    pool.push(t.clone());
                }
                records.push(SourceRecord::WikiTitle {
                    id: string_field(obj, f.id(), *line)?,
                    source: config.source.clone(),
                    task: config.task,
                    image_ref: optional_string_field(obj, f.image()),
                    title,
                    pool,
                });
            }
        }
        RawKind::SpatialTriplet => {
            for (line, obj) in &rows {
                records.push(SourceRecord::SpatialTriplet {
                    id: string_field(obj, f.id(), *line)?,
                    source: config.source.clone(),
                    task: config.task,
                    image_ref: optional_string_field(obj, f.image()),
                    description: string_field(obj, f.description(), *line)?,
                });
            }
        }
    }
    Ok(records)
}
