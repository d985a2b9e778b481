//! Pipeline configuration: one TOML file plus environment variables for
//! credentials.

use std::path::{Path, PathBuf};
use std::time::Duration;

use atomic_nli::backends::{Adapter, BackendDescriptor, BackendOptions, RetryPolicy};
use atomic_nli::grouping::{BucketWeighting, DEFAULT_THRESHOLD};
use atomic_nli::model::DefeasibleLabel;
use atomic_nli::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Backends {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generator: Option<BackendDescriptor>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classifier: Option<BackendDescriptor>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embedder: Option<BackendDescriptor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Execution {
    pub parallelism: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rate_per_sec: Option<f64>,
    pub burst: u32,
    pub retry_attempts: u32,
    pub retry_base_delay_ms: u64,
}

impl Default for Execution {
    fn default() -> Self {
        Execution { parallelism: 8, rate_per_sec: None, burst: 8, retry_attempts: 3, retry_base_delay_ms: 250 }
    }
}

impl Execution {
    pub fn backend_options(&self) -> BackendOptions {
        BackendOptions {
            parallelism: self.parallelism.max(1),
            rate_per_sec: self.rate_per_sec,
            burst: self.burst,
            retry: RetryPolicy {
                attempts: self.retry_attempts.max(1),
                base_delay: Duration::from_millis(self.retry_base_delay_ms),
            },
        }
    }
}

/// Optional replacements for the bundled in-context exemplars.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExemplarFiles {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decomposition: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub qud: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nli: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub defeasible: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub defeasible_atoms: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Evaluation {
    /// Label recorded for an unparseable full-example defeasible answer.
    pub unparsed_full: DefeasibleLabel,
}

impl Default for Evaluation {
    fn default() -> Self {
        Evaluation { unparsed_full: DefeasibleLabel::Weakener }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Annotation {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub primary_annotator: Option<String>,
    /// Hand each atom to two annotators for agreement statistics.
    pub dual: bool,
    pub lease_seconds: u64,
}

impl Default for Annotation {
    fn default() -> Self {
        Annotation { primary_annotator: None, dual: false, lease_seconds: 600 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grouping {
    pub threshold: f64,
    pub weighting: BucketWeighting,
}

impl Default for Grouping {
    fn default() -> Self {
        Grouping { threshold: DEFAULT_THRESHOLD, weighting: BucketWeighting::Uniform }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub backends: Backends,
    pub execution: Execution,
    pub exemplars: ExemplarFiles,
    pub evaluation: Evaluation,
    pub annotation: Annotation,
    pub grouping: Grouping,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Config = toml::from_str(text).map_err(|e| Error::Parse(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).context(path.display().to_string()))?;
        Self::from_toml(&text).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.grouping.threshold >= -1.0 && self.grouping.threshold <= 1.0) {
            return Err(Error::Precondition(format!(
                "grouping.threshold must lie in [-1, 1], got {}",
                self.grouping.threshold
            )));
        }
        if self.execution.rate_per_sec.is_some_and(|r| r.is_nan() || r <= 0.0) {
            return Err(Error::Precondition("execution.rate_per_sec must be positive".into()));
        }
        let roles = [
            ("generator", &self.backends.generator, Adapter::OpenaiChat),
            ("classifier", &self.backends.classifier, Adapter::NliHttp),
            ("embedder", &self.backends.embedder, Adapter::OpenaiEmbeddings),
        ];
        for (role, descriptor, expected) in roles {
            if let Some(d) = descriptor {
                if d.adapter != Adapter::Mock && d.adapter != expected {
                    return Err(Error::Precondition(format!(
                        "backends.{role} uses adapter {:?}, which cannot serve this role",
                        d.adapter
                    )));
                }
            }
        }
        Ok(())
    }

    /// Swaps every backend for the offline fixture backends. `fingerprint`
    /// identifies the fixture contents so a changed fixture yields new
    /// backend ids and cache keys.
    pub fn with_mock(mut self, fingerprint: &str) -> Self {
        let mock = |name: &str| {
            let mut d = BackendDescriptor::mock(name);
            d.endpoint = format!("fixtures:{fingerprint}");
            d
        };
        self.backends = Backends {
            generator: Some(mock("generator")),
            classifier: Some(mock("classifier")),
            embedder: Some(mock("embedder")),
        };
        self
    }

    pub fn uses_mock(&self) -> bool {
        [&self.backends.generator, &self.backends.classifier, &self.backends.embedder]
            .iter()
            .any(|d| d.as_ref().is_some_and(|d| d.adapter == Adapter::Mock))
    }

    /// SHA-256 over the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = Config::from_toml("").unwrap();
        assert_eq!(c, Config::default());
        assert_eq!(c.grouping.threshold, 0.75);
        assert_eq!(c.evaluation.unparsed_full, DefeasibleLabel::Weakener);
    }

    #[test]
    fn full_file_parses() {
        let c = Config::from_toml(
            r#"
            [backends.generator]
            name = "gpt"
            adapter = "openai-chat"
            endpoint = "https://api.example.com/v1/chat/completions"
            auth_env_var = "GEN_KEY"
            params = { model = "m", temperature = 0.0, max_tokens = 256 }

            [backends.classifier]
            name = "roberta"
            adapter = "nli-http"
            endpoint = "http://localhost:9000/classify"

            [execution]
            parallelism = 4
            rate_per_sec = 2.5

            [grouping]
            threshold = 0.8
            weighting = "by_weight"
            "#,
        )
        .unwrap();
        assert_eq!(c.backends.generator.unwrap().params.max_tokens, 256);
        assert_eq!(c.grouping.weighting, BucketWeighting::ByWeight);
        assert_eq!(c.execution.backend_options().parallelism, 4);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(Config::from_toml("[grouping]\nthreshhold = 0.7").is_err());
        assert!(Config::from_toml("[grouping]\nthreshold = 3.0").is_err());
        let wrong_role = "[backends.embedder]\nname = \"x\"\nadapter = \"openai-chat\"\nendpoint = \"http://x\"";
        assert!(Config::from_toml(wrong_role).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = Config::default();
        let mut b = Config::default();
        b.grouping.threshold = 0.7;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), Config::default().hash());
        assert_ne!(a.clone().with_mock("x").hash(), a.with_mock("y").hash());
    }
}
