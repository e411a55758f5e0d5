//! Task identities, per-task field/label schemas, and data ingestion.
//!
//! Task files are UTF-8 line-delimited JSON records. Each record carries the
//! task's documented fields plus an optional `"label"`. For `record`-style
//! tasks the candidate entity list is per example and doubles as its label
//! set.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskId {
    BoolQ,
    Cb,
    Rte,
    Copa,
    Wic,
    Wsc,
    MultiRc,
    Record,
}

impl TaskId {
    pub const ALL: [TaskId; 8] = [
        TaskId::BoolQ,
        TaskId::Cb,
        TaskId::Rte,
        TaskId::Copa,
        TaskId::Wic,
        TaskId::Wsc,
        TaskId::MultiRc,
        TaskId::Record,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskId::BoolQ => "boolq",
            TaskId::Cb => "cb",
            TaskId::Rte => "rte",
            TaskId::Copa => "copa",
            TaskId::Wic => "wic",
            TaskId::Wsc => "wsc",
            TaskId::MultiRc => "multirc",
            TaskId::Record => "record",
        }
    }

    pub fn parse(name: &str) -> Result<Self, TaskError> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == name)
            .ok_or_else(|| TaskError::UnknownTask(name.to_string()))
    }

    /// Required text fields, in record order.
    pub fn fields(self) -> &'static [&'static str] {
        match self {
            TaskId::BoolQ => &["passage", "question"],
            TaskId::Cb | TaskId::Rte => &["premise", "hypothesis"],
            TaskId::Copa => &["premise", "choice1", "choice2", "question"],
            TaskId::Wic => &["word", "sentence1", "sentence2"],
            TaskId::Wsc => &["text", "span1", "span2"],
            TaskId::MultiRc => &["passage", "question", "answer"],
            TaskId::Record => &["passage", "question"],
        }
    }

    /// Fixed label set, in index order. Empty for `record`, whose label set
    /// is each example's entity list.
    pub fn labels(self) -> &'static [&'static str] {
        match self {
            TaskId::BoolQ | TaskId::Wic | TaskId::MultiRc => &["false", "true"],
            TaskId::Cb => &["entailment", "contradiction", "neutral"],
            TaskId::Rte => &["entailment", "not_entailment"],
            TaskId::Copa => &["choice1", "choice2"],
            TaskId::Wsc => &["true"],
            TaskId::Record => &[],
        }
    }

    /// Whether the label verbalizations can span more than one token.
    pub fn multi_token(self) -> bool {
        matches!(self, TaskId::Copa | TaskId::Wsc | TaskId::Record)
    }

    /// Headline dev metric used for checkpoint selection.
    pub fn primary_metric(self) -> crate::metrics::MetricKind {
        use crate::metrics::MetricKind;
        match self {
            TaskId::Cb => MetricKind::MacroF1,
            TaskId::MultiRc => MetricKind::MultiRcF1a,
            _ => MetricKind::Accuracy,
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("line {line}: missing field {field:?}")]
    MissingField { line: usize, field: String },
    #[error("line {line}: field {field:?} must be a string")]
    BadFieldType { line: usize, field: String },
    #[error("line {line}: unknown label {label:?}")]
    UnknownLabel { line: usize, label: String },
    #[error("line {line}: {msg}")]
    BadRecord { line: usize, msg: String },
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One task example: named text fields plus an optional gold label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskExample {
    pub task: TaskId,
    pub fields: BTreeMap<String, String>,
    /// Candidate entities for `record`; empty elsewhere.
    pub entities: Vec<String>,
    pub label: Option<String>,
}

impl TaskExample {
    pub fn new(task: TaskId, fields: &[(&str, &str)], label: Option<&str>) -> Self {
        Self {
            task,
            fields: fields
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
            entities: Vec::new(),
            label: label.map(str::to_string),
        }
    }

    pub fn field(&self, name: &str) -> Option<&str> {
        self.fields.get(name).map(String::as_str)
    }

    /// The label set this example is classified over, in index order.
    pub fn label_set(&self) -> Vec<String> {
        if self.task == TaskId::Record {
            self.entities.clone()
        } else {
            self.task.labels().iter().map(|s| s.to_string()).collect()
        }
    }

    /// Index of the gold label within [`TaskExample::label_set`].
    pub fn label_index(&self) -> Option<usize> {
        let label = self.label.as_deref()?;
        self.label_set().iter().position(|l| l == label)
    }

    /// Concatenated field text, used as one document for importance scoring.
    pub fn document_text(&self) -> String {
        self.fields
            .values()
            .map(String::as_str)
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Loads line-delimited task records from `path`, validating fields and
/// labels. Errors name the offending 1-based line number.
pub fn load_task_examples(path: &Path, task: TaskId) -> Result<Vec<TaskExample>, TaskError> {
    let text = std::fs::read_to_string(path).map_err(|source| TaskError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_task_examples(&text, task)
}

/// Parses the line-delimited record format from a string.
pub fn parse_task_examples(text: &str, task: TaskId) -> Result<Vec<TaskExample>, TaskError> {
    let mut examples = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(raw)
            .map_err(|e| TaskError::BadRecord { line, msg: e.to_string() })?;
        let obj = value.as_object().ok_or_else(|| TaskError::BadRecord {
            line,
            msg: "expected a JSON object".into(),
        })?;

        let mut fields = BTreeMap::new();
        for &name in task.fields() {
            let v = obj.get(name).ok_or_else(|| TaskError::MissingField {
                line,
                field: name.to_string(),
            })?;
            let s = v.as_str().ok_or_else(|| TaskError::BadFieldType {
                line,
                field: name.to_string(),
            })?;
            fields.insert(name.to_string(), s.to_string());
        }
        if task == TaskId::Copa {
            let q = fields.get("question").map(String::as_str).unwrap_or("");
            if q != "cause" && q != "effect" {
                return Err(TaskError::BadRecord {
                    line,
                    msg: format!("question must be \"cause\" or \"effect\", found {q:?}"),
                });
            }
        }

        let entities = if task == TaskId::Record {
            let v = obj.get("entities").ok_or_else(|| TaskError::MissingField {
                line,
                field: "entities".into(),
            })?;
            let arr = v.as_array().ok_or_else(|| TaskError::BadFieldType {
                line,
                field: "entities".into(),
            })?;
            let mut entities = Vec::with_capacity(arr.len());
            for e in arr {
                let s = e.as_str().ok_or_else(|| TaskError::BadFieldType {
                    line,
                    field: "entities".into(),
                })?;
                entities.push(s.to_string());
            }
            if entities.is_empty() {
                return Err(TaskError::BadRecord { line, msg: "entities is empty".into() });
            }
            entities
        } else {
            Vec::new()
        };

        let label = match obj.get("label") {
            None | Some(Value::Null) => None,
            Some(v) => {
                let s = v
                    .as_str()
                    .map(str::to_string)
                    .or_else(|| v.as_bool().map(|b| b.to_string()))
                    .ok_or_else(|| TaskError::BadFieldType { line, field: "label".into() })?;
                Some(s)
            }
        };
        let example = TaskExample { task, fields, entities, label };
        if let Some(label) = &example.label {
            if !example.label_set().iter().any(|l| l == label) {
                return Err(TaskError::UnknownLabel { line, label: label.clone() });
            }
        }
        examples.push(example);
    }
    Ok(examples)
}

/// Serializes examples back to the line-delimited record format.
pub fn examples_to_jsonl(examples: &[TaskExample]) -> String {
    let mut out = String::new();
    for ex in examples {
        let mut obj = serde_json::Map::new();
        for (k, v) in &ex.fields {
            obj.insert(k.clone(), Value::String(v.clone()));
        }
        if !ex.entities.is_empty() {
            obj.insert(
                "entities".into(),
                Value::Array(ex.entities.iter().cloned().map(Value::String).collect()),
            );
        }
        if let Some(label) = &ex.label {
            obj.insert("label".into(), Value::String(label.clone()));
        }
        out.push_str(&Value::Object(obj).to_string());
        out.push('\n');
    }
    out
}
