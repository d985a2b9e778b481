//! Deterministic offline backends driven by fixture files.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{BackendRequest, Transport, TransportError};
use crate::error::{Error, Result};
use crate::model::{normalize_text, NliLabel};

/// Key under which a generation fixture is stored: SHA-256 of the prompt.
pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

/// Text generation by table lookup on the prompt hash.
#[derive(Debug, Clone, Default)]
pub struct MockGenerator {
    table: BTreeMap<String, String>,
}

impl MockGenerator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Loads a JSON object mapping prompt hashes to completions.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).context(path.display().to_string()))?;
        let table: BTreeMap<String, String> =
            serde_json::from_str(&text).map_err(|e| Error::from(e).context(path.display().to_string()))?;
        Ok(MockGenerator { table })
    }

    pub fn insert(&mut self, prompt: &str, response: impl Into<String>) {
        self.table.insert(prompt_hash(prompt), response.into());
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn table(&self) -> &BTreeMap<String, String> {
        &self.table
    }

    pub fn extend(&mut self, other: MockGenerator) {
        self.table.extend(other.table);
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(&self.table).expect("string map serializes")
    }
}

#[async_trait]
impl Transport for MockGenerator {
    async fn send(&self, request: &BackendRequest) -> std::result::Result<Value, TransportError> {
        match request {
            BackendRequest::Generate { prompt } => {
                let hash = prompt_hash(prompt);
                self.table
                    .get(&hash)
                    .map(|s| Value::String(s.clone()))
                    .ok_or_else(|| TransportError::NoFixture(format!("no fixture for prompt hash {hash}")))
            }
            other => Err(TransportError::Fatal(format!("mock generator cannot serve {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierFixture {
    pub premise: String,
    pub hypothesis: String,
    pub label: NliLabel,
}

/// Entailment classification by fixture lookup on normalized text pairs,
/// falling back to: equal texts, or a premise containing the hypothesis,
/// are entailed; everything else is neutral.
#[derive(Debug, Clone, Default)]
pub struct MockClassifier {
    table: HashMap<(String, String), NliLabel>,
}

impl MockClassifier {
    pub fn new() -> Self {
        Self::default()
    }

    /// Loads one [`ClassifierFixture`] per line. Blank lines are skipped.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).context(path.display().to_string()))?;
        let mut mock = MockClassifier::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fixture: ClassifierFixture = serde_json::from_str(line)
                .map_err(|e| Error::from(e).context(format!("{}:{}", path.display(), i + 1)))?;
            mock.insert(&fixture.premise, &fixture.hypothesis, fixture.label);
        }
        Ok(mock)
    }

    pub fn insert(&mut self, premise: &str, hypothesis: &str, label: NliLabel) {
        self.table.insert((normalize_text(premise), normalize_text(hypothesis)), label);
    }

    pub fn classify(&self, premise: &str, hypothesis: &str) -> NliLabel {
        let p = normalize_text(premise);
        let h = normalize_text(hypothesis);
        if let Some(label) = self.table.get(&(p.clone(), h.clone())) {
            return *label;
        }
        if p == h || contains_phrase(&p, &h) {
            NliLabel::Entailment
        } else {
            NliLabel::Neutral
        }
    }
}

/// Word-boundary containment of `needle` in `haystack`.
fn contains_phrase(haystack: &str, needle: &str) -> bool {
    if needle.is_empty() {
        return false;
    }
    haystack.match_indices(needle).any(|(start, _)| {
        let end = start + needle.len();
        let before_ok = haystack[..start].chars().next_back().is_none_or(|c| !c.is_alphanumeric());
        let after_ok = haystack[end..].chars().next().is_none_or(|c| !c.is_alphanumeric());
        before_ok && after_ok
    })
}

#[async_trait]
impl Transport for MockClassifier {
    async fn send(&self, request: &BackendRequest) -> std::result::Result<Value, TransportError> {
        match request {
            BackendRequest::Classify { premise, hypothesis } => {
                Ok(Value::String(self.classify(premise, hypothesis).as_str().to_string()))
            }
            other => Err(TransportError::Fatal(format!("mock classifier cannot serve {other:?}"))),
        }
    }
}

/// Hashed bag-of-words embedding: each normalized token maps to a seeded
/// pseudo-random vector, the vectors are summed and scaled to unit length.
/// Texts sharing most tokens land close together; identical normalized texts
/// coincide exactly.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    dim: usize,
    seed: u64,
}

impl Default for MockEmbedder {
    fn default() -> Self {
        MockEmbedder { dim: 64, seed: 0x5eed }
    }
}

impl MockEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0);
        MockEmbedder { dim, seed }
    }

    fn token_vector(&self, token: &str, out: &mut [f64]) {
        let mut filled = 0;
        let mut block: u32 = 0;
        while filled < out.len() {
            let mut hasher = Sha256::new();
            hasher.update(self.seed.to_le_bytes());
            hasher.update(token.as_bytes());
            hasher.update(block.to_le_bytes());
            let digest = hasher.finalize();
            for chunk in digest.chunks_exact(4) {
                if filled == out.len() {
                    break;
                }
                let x = u32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
                out[filled] += f64::from(x) / f64::from(u32::MAX) * 2.0 - 1.0;
                filled += 1;
            }
            block += 1;
        }
    }

    pub fn embed(&self, text: &str) -> Vec<f64> {
        let normalized = normalize_text(text);
        let mut v = vec![0.0; self.dim];
        let mut any = false;
        for token in normalized.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
            self.token_vector(token, &mut v);
            any = true;
        }
        if !any {
            self.token_vector(&normalized, &mut v);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        } else {
            v[0] = 1.0;
        }
        v
    }
}

#[async_trait]
impl Transport for MockEmbedder {
    async fn send(&self, request: &BackendRequest) -> std::result::Result<Value, TransportError> {
        match request {
            BackendRequest::Embed { text } => Ok(Value::from(self.embed(text))),
            other => Err(TransportError::Fatal(format!("mock embedder cannot serve {other:?}"))),
        }
    }
}
