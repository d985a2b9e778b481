//! Line-oriented JSON datasets.

use std::collections::HashMap;
use std::path::Path;

use atomic_nli::model::{DefeasibleExample, DefeasibleLabel, NliExample, NliLabel};
use atomic_nli::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Nli,
    Defeasible,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Nli => "nli",
            TaskKind::Defeasible => "defeasible",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Dataset {
    Nli(Vec<NliExample>),
    Defeasible(Vec<DefeasibleExample>),
}

impl Dataset {
    pub fn kind(&self) -> TaskKind {
        match self {
            Dataset::Nli(_) => TaskKind::Nli,
            Dataset::Defeasible(_) => TaskKind::Defeasible,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Dataset::Nli(v) => v.len(),
            Dataset::Defeasible(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// (id, premise, hypothesis) per example, in file order.
    pub fn triples(&self) -> Vec<(&str, &str, &str)> {
        match self {
            Dataset::Nli(v) => v.iter().map(|e| (e.id.as_str(), e.premise.as_str(), e.hypothesis.as_str())).collect(),
            Dataset::Defeasible(v) => {
                v.iter().map(|e| (e.id.as_str(), e.premise.as_str(), e.hypothesis.as_str())).collect()
            }
        }
    }
}

fn text_field(obj: &Map<String, Value>, line: usize, field: &str) -> Result<String> {
    match obj.get(field) {
        None => Err(Error::Parse(format!("line {line}: missing field `{field}`"))),
        Some(Value::String(s)) if !s.trim().is_empty() => Ok(s.clone()),
        Some(Value::String(_)) => Err(Error::Parse(format!("line {line}: field `{field}` is empty"))),
        Some(other) => Err(Error::Parse(format!("line {line}: field `{field}` must be a string, got {other}"))),
    }
}

fn label_field<T: std::str::FromStr>(obj: &Map<String, Value>, line: usize, expected: &str) -> Result<T> {
    let raw = text_field(obj, line, "gold")?;
    raw.parse()
        .map_err(|_| Error::Parse(format!("line {line}: field `gold` must be one of {expected}, got {raw:?}")))
}

/// Parses dataset text. Blank lines are skipped; line numbers are 1-based.
pub fn parse_dataset(text: &str, kind: TaskKind) -> Result<Dataset> {
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut nli = Vec::new();
    let mut defeasible = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: Value =
            serde_json::from_str(raw).map_err(|e| Error::Parse(format!("line {line}: invalid JSON: {e}")))?;
        let obj = value.as_object().ok_or_else(|| Error::Parse(format!("line {line}: expected a JSON object")))?;
        let id = text_field(obj, line, "id")?;
        let premise = text_field(obj, line, "premise")?;
        let hypothesis = text_field(obj, line, "hypothesis")?;
        match kind {
            TaskKind::Nli => {
                let gold: NliLabel = label_field(obj, line, "e, n, c")?;
                nli.push(NliExample { id: id.clone(), premise, hypothesis, gold });
            }
            TaskKind::Defeasible => {
                let update = text_field(obj, line, "update")?;
                let gold: DefeasibleLabel = label_field(obj, line, "strengthener, weakener")?;
                defeasible.push(DefeasibleExample { id: id.clone(), premise, hypothesis, update, gold });
            }
        }
        if let Some(first) = seen.insert(id.clone(), line) {
            return Err(Error::Integrity(format!("line {line}: duplicate id `{id}` (first on line {first})")));
        }
    }
    Ok(match kind {
        TaskKind::Nli => Dataset::Nli(nli),
        TaskKind::Defeasible => Dataset::Defeasible(defeasible),
    })
}

pub fn load_dataset(path: &Path, kind: TaskKind) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).context(path.display().to_string()))?;
    parse_dataset(&text, kind).map_err(|e| e.context(path.display().to_string()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    const NLI: &str = r#"{"id":"1","premise":"A dog runs.","hypothesis":"An animal moves.","gold":"e"}
{"id":"2","premise":"A dog runs.","hypothesis":"A cat sleeps.","gold":"n"}

{"id":"3","premise":"A dog runs.","hypothesis":"The dog sits still.","gold":"contradiction"}
"#;

    #[test]
    fn well_formed_lines_load() {
        let d = parse_dataset(NLI, TaskKind::Nli).unwrap();
        assert_eq!(d.len(), 3);
        let Dataset::Nli(v) = d else { panic!() };
        assert_eq!(v[2].gold, NliLabel::Contradiction);
    }

    #[test]
    fn duplicate_id_is_reported_at_second_occurrence() {
        let text = format!("{NLI}{}", r#"{"id":"2","premise":"p","hypothesis":"h","gold":"e"}"#);
        let err = parse_dataset(&text, TaskKind::Nli).unwrap_err();
        assert!(matches!(err, Error::Integrity(ref m) if m.contains("line 5") && m.contains("line 2")), "{err}");
    }

    #[test]
    fn missing_update_names_line_and_field() {
        let text = r#"{"id":"1","premise":"p","hypothesis":"h","gold":"weakener"}"#;
        let err = parse_dataset(text, TaskKind::Defeasible).unwrap_err();
        assert_eq!(err.to_string(), "parse error: line 1: missing field `update`");
    }

    #[test]
    fn schema_errors_are_specific() {
        let bad_label = r#"{"id":"1","premise":"p","hypothesis":"h","gold":"maybe"}"#;
        assert!(parse_dataset(bad_label, TaskKind::Nli).unwrap_err().to_string().contains("field `gold`"));
        let not_string = r#"{"id":1,"premise":"p","hypothesis":"h","gold":"e"}"#;
        assert!(parse_dataset(not_string, TaskKind::Nli).unwrap_err().to_string().contains("field `id`"));
        assert!(parse_dataset("{nope", TaskKind::Nli).unwrap_err().to_string().contains("line 1"));
    }
}
