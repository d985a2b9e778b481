//! Exemplar-prompted decomposition of hypotheses into atoms, and question
//! generation for critical atoms.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backends::Backend;
use crate::error::{Error, Result};
use crate::model::{normalize_text, Atom};
use crate::prompts::{before_end, PromptTemplate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExemplarPurpose {
    Decomposition,
    Qud,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub sentence: String,
    pub atoms: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExemplarSet {
    pub purpose: ExemplarPurpose,
    pub items: Vec<Exemplar>,
}

impl ExemplarSet {
    pub fn new(purpose: ExemplarPurpose, items: Vec<Exemplar>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Precondition("exemplar set must be non-empty".into()));
        }
        if let Some(bad) = items.iter().find(|e| e.sentence.trim().is_empty() || e.atoms.is_empty()) {
            return Err(Error::Precondition(format!("exemplar {:?} needs a sentence and at least one entry", bad.sentence)));
        }
        Ok(ExemplarSet { purpose, items })
    }

    pub fn from_json(text: &str, purpose: ExemplarPurpose) -> Result<Self> {
        Self::new(purpose, serde_json::from_str(text)?)
    }

    pub fn load(path: &Path, purpose: ExemplarPurpose) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).context(path.display().to_string()))?;
        Self::from_json(&text, purpose).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn builtin_decomposition() -> Self {
        Self::from_json(include_str!("../data/decomposition_exemplars.json"), ExemplarPurpose::Decomposition)
            .expect("bundled exemplars are valid")
    }

    pub fn builtin_qud() -> Self {
        Self::from_json(include_str!("../data/qud_exemplars.json"), ExemplarPurpose::Qud)
            .expect("bundled exemplars are valid")
    }

    fn require(&self, purpose: ExemplarPurpose) -> Result<()> {
        if self.purpose != purpose {
            return Err(Error::Precondition(format!("expected {purpose:?} exemplars, got {:?}", self.purpose)));
        }
        Ok(())
    }
}

fn numbered(atoms: &[String]) -> String {
    let mut out: String = atoms.iter().enumerate().map(|(i, a)| format!("{}. {a}\n", i + 1)).collect();
    out.push_str("[END]");
    out
}

pub fn build_decomposition_prompt(hypothesis: &str, exemplars: &ExemplarSet) -> Result<String> {
    exemplars.require(ExemplarPurpose::Decomposition)?;
    if exemplars.items.is_empty() {
        return Err(Error::Precondition("exemplar set must be non-empty".into()));
    }
    let shots: Vec<_> = exemplars
        .items
        .iter()
        .map(|ex| (HashMap::from([("sentence", ex.sentence.as_str())]), numbered(&ex.atoms)))
        .collect();
    PromptTemplate::decomposition().render(&shots, &HashMap::from([("sentence", hypothesis)]))
}

fn strip_list_marker(line: &str) -> &str {
    let line = line.trim();
    for bullet in ["-", "*", "•"] {
        if let Some(rest) = line.strip_prefix(bullet) {
            return rest.trim();
        }
    }
    let digits = line.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits > 0 {
        let rest = &line[digits..];
        if let Some(rest) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            return rest.trim();
        }
    }
    line
}

/// Atom texts from a raw decomposition response. Never fails; an empty result
/// is the empty-decomposition signal.
pub fn parse_atoms(raw: &str) -> Vec<String> {
    let mut seen = HashSet::new();
    before_end(raw)
        .lines()
        .map(strip_list_marker)
        .filter(|line| !line.is_empty() && !line.eq_ignore_ascii_case("facts:"))
        .filter(|line| !normalize_text(line).is_empty())
        .filter(|line| seen.insert(normalize_text(line)))
        .map(str::to_string)
        .collect()
}

const STOPWORDS: &[&str] = &[
    "a", "an", "the", "is", "are", "was", "were", "be", "been", "being", "am", "of", "to", "in", "on", "at", "by",
    "for", "with", "and", "or", "but", "his", "her", "their", "its", "it", "they", "he", "she", "them", "this",
    "that", "these", "those", "there", "some", "as", "from", "up", "down", "into", "onto", "while", "who", "which",
    "has", "have", "had", "do", "does", "did", "not", "no",
];

fn content_words(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric() && c != '\'')
        .map(|w| w.trim_matches('\'').to_lowercase())
        .filter(|w| !w.is_empty() && !STOPWORDS.contains(&w.as_str()))
        .collect()
}

/// Content words of the hypothesis that appear in none of the atoms. Exact
/// token matching, no lemmatization; a non-empty result is a warning only.
pub fn coverage_gaps(hypothesis: &str, atoms: &[Atom]) -> Vec<String> {
    let covered: BTreeSet<String> = atoms.iter().flat_map(|a| content_words(&a.text)).collect();
    content_words(hypothesis).into_iter().filter(|w| !covered.contains(w)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decomposition {
    pub example_id: String,
    pub atom_ids: Vec<String>,
    pub raw_response: String,
    /// No atom survived parsing.
    pub empty: bool,
    pub coverage_gaps: Vec<String>,
}

/// Generates atoms for one hypothesis. Atom order follows the model output.
pub async fn decompose(
    example_id: &str,
    hypothesis: &str,
    generator: &Backend,
    exemplars: &ExemplarSet,
) -> Result<(Vec<Atom>, Decomposition)> {
    let prompt = build_decomposition_prompt(hypothesis, exemplars)?;
    let raw = generator.generate(&prompt).await.map_err(|e| e.context(format!("decomposing {example_id}")))?;
    let texts = parse_atoms(&raw);
    let atoms = Atom::collect_unique(example_id, texts.iter().map(String::as_str));
    if atoms.is_empty() {
        log::warn!("empty decomposition for {example_id}");
    }
    let record = Decomposition {
        example_id: example_id.to_string(),
        atom_ids: atoms.iter().map(|a| a.atom_id.clone()).collect(),
        raw_response: raw,
        empty: atoms.is_empty(),
        coverage_gaps: coverage_gaps(hypothesis, &atoms),
    };
    Ok((atoms, record))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Qud {
    pub atom_id: String,
    pub question: String,
    /// False when the response did not end in a question mark; `question`
    /// then holds the raw response.
    pub well_formed: bool,
}

pub fn build_qud_prompt(atom_text: &str, exemplars: &ExemplarSet) -> Result<String> {
    exemplars.require(ExemplarPurpose::Qud)?;
    let shots: Vec<_> = exemplars
        .items
        .iter()
        .map(|ex| (HashMap::from([("critical_atom", ex.sentence.as_str())]), ex.atoms[0].clone()))
        .collect();
    PromptTemplate::qud().render(&shots, &HashMap::from([("critical_atom", atom_text)]))
}

pub fn parse_qud(atom_id: &str, raw: &str) -> Qud {
    let line = before_end(raw).lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    let question = line.strip_prefix("Question:").map(str::trim).unwrap_or(line);
    if !question.is_empty() && question.ends_with('?') {
        Qud { atom_id: atom_id.to_string(), question: question.to_string(), well_formed: true }
    } else {
        log::warn!("question for {atom_id} is malformed: {raw:?}");
        Qud { atom_id: atom_id.to_string(), question: raw.trim().to_string(), well_formed: false }
    }
}

pub async fn generate_qud(atom: &Atom, generator: &Backend, exemplars: &ExemplarSet) -> Result<Qud> {
    if atom.human_valid != Some(true) {
        return Err(Error::Precondition(format!("atom {} is not human-valid", atom.atom_id)));
    }
    let prompt = build_qud_prompt(&atom.text, exemplars)?;
    let raw = generator.generate(&prompt).await.map_err(|e| e.context(format!("question for {}", atom.atom_id)))?;
    Ok(parse_qud(&atom.atom_id, &raw))
}
