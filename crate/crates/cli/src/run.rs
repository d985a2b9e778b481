//! Run directories: the manifest, stage bookkeeping, and run-stamped
//! line-oriented JSON files.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use atomic_nli::backends::BackendDescriptor;
use atomic_nli::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::dataset::{sha256_hex, TaskKind};

pub const MANIFEST: &str = "manifest.json";
pub const DATASET: &str = "dataset.jsonl";
pub const ANNOTATIONS: &str = "annotations.jsonl";
pub const CACHE_DIR: &str = "cache";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Decompose,
    Prune,
    EvalNli,
    EvalDefeasible,
    Group,
    Report,
    Rugplot,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Decompose => "decompose",
            Stage::Prune => "prune",
            Stage::EvalNli => "eval-nli",
            Stage::EvalDefeasible => "eval-defeasible",
            Stage::Group => "group",
            Stage::Report => "report",
            Stage::Rugplot => "rugplot",
        }
    }

    pub const ALL: [Stage; 7] = [
        Stage::Decompose,
        Stage::Prune,
        Stage::EvalNli,
        Stage::EvalDefeasible,
        Stage::Group,
        Stage::Report,
        Stage::Rugplot,
    ];

    /// Stages whose outputs this one reads.
    pub fn inputs(self) -> &'static [Stage] {
        match self {
            Stage::Decompose => &[],
            Stage::Prune | Stage::EvalNli => &[Stage::Decompose],
            Stage::EvalDefeasible => &[Stage::Prune],
            Stage::Group | Stage::Rugplot => &[Stage::EvalDefeasible],
            Stage::Report => &[Stage::EvalNli, Stage::EvalDefeasible, Stage::Group],
        }
    }

    /// True when `self` reads, directly or transitively, what `other` wrote.
    pub fn depends_on(self, other: Stage) -> bool {
        self.inputs().iter().any(|s| *s == other || s.depends_on(other))
    }
}

/// A record written to a run file, tagged with the run it belongs to.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub run_id: String,
    #[serde(flatten)]
    pub record: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendUse {
    pub backend_id: String,
    pub descriptor: BackendDescriptor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub outputs: Vec<String>,
    pub completed_at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub task: TaskKind,
    pub dataset_sha256: String,
    pub examples: usize,
    pub config_hash: String,
    pub config: Config,
    /// Fixture directory backing the mock backends, as given on the command line.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixtures: Option<String>,
    /// Backend descriptors by role, recorded when a stage first uses them.
    #[serde(default)]
    pub backends: BTreeMap<String, BackendUse>,
    #[serde(default)]
    pub stages: BTreeMap<String, StageEntry>,
    pub created_at: String,
}

/// Deterministic run identity: the task, the dataset bytes and the config.
pub fn run_id(task: TaskKind, dataset_sha256: &str, config_hash: &str) -> String {
    let digest = sha256_hex(format!("{}\n{dataset_sha256}\n{config_hash}", task.as_str()).as_bytes());
    format!("r{}", &digest[..12])
}

/// Wall-clock time, or `SOURCE_DATE_EPOCH` when set so that reruns can be
/// made byte-identical.
pub fn timestamp() -> String {
    let fixed = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|s| s.trim().parse::<i64>().ok());
    let time = match fixed.and_then(|secs| chrono::DateTime::from_timestamp(secs, 0)) {
        Some(t) => t,
        None => chrono::Utc::now(),
    };
    time.to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    pub manifest: RunManifest,
}

impl RunDir {
    pub fn manifest_exists(root: &Path) -> bool {
        root.join(MANIFEST).is_file()
    }

    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::from(e).context(format!("no run at {}", root.display())))?;
        let manifest: RunManifest =
            serde_json::from_str(&text).map_err(|e| Error::from(e).context(path.display().to_string()))?;
        Ok(RunDir { root: root.to_path_buf(), manifest })
    }

    /// Creates the directory, copies the dataset in, and writes a fresh manifest.
    pub fn create(root: &Path, manifest: RunManifest, dataset_bytes: &[u8]) -> Result<Self> {
        std::fs::create_dir_all(root.join("reports"))?;
        std::fs::write(root.join(DATASET), dataset_bytes)?;
        let run = RunDir { root: root.to_path_buf(), manifest };
        run.save()?;
        Ok(run)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_id(&self) -> &str {
        &self.manifest.run_id
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn save(&self) -> Result<()> {
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        write_atomic(&self.path(MANIFEST), text.as_bytes())
    }

    pub fn has_stage(&self, stage: Stage) -> bool {
        self.manifest
            .stages
            .get(stage.name())
            .is_some_and(|s| s.outputs.iter().all(|o| self.path(o).is_file()))
    }

    pub fn require(&self, stage: Stage) -> Result<()> {
        if self.has_stage(stage) {
            Ok(())
        } else {
            Err(Error::Precondition(format!(
                "stage `{}` has not run for {}; run `atomic-nli {}` first",
                stage.name(),
                self.run_id(),
                stage.name()
            )))
        }
    }

    /// Records a finished stage and forgets every stage downstream of it,
    /// since those outputs were computed from the previous version.
    pub fn complete(&mut self, stage: Stage, outputs: &[&str]) -> Result<()> {
        self.invalidate_after(stage);
        let entry = StageEntry { outputs: outputs.iter().map(|s| s.to_string()).collect(), completed_at: timestamp() };
        self.manifest.stages.insert(stage.name().to_string(), entry);
        self.save()
    }

    pub fn invalidate_after(&mut self, stage: Stage) {
        for s in Stage::ALL.iter().filter(|s| s.depends_on(stage)) {
            self.manifest.stages.remove(s.name());
        }
    }

    pub fn note_backend(&mut self, role: &str, descriptor: &BackendDescriptor) -> Result<()> {
        let entry = BackendUse { backend_id: descriptor.backend_id(), descriptor: descriptor.clone() };
        if self.manifest.backends.get(role) != Some(&entry) {
            self.manifest.backends.insert(role.to_string(), entry);
            self.save()?;
        }
        Ok(())
    }

    pub fn write_jsonl<T: Serialize>(&self, rel: &str, records: &[T]) -> Result<()> {
        let mut out = Vec::new();
        for record in records {
            serde_json::to_writer(&mut out, &Stamped { run_id: self.run_id().to_string(), record })?;
            out.push(b'\n');
        }
        write_atomic(&self.path(rel), &out)
    }

    pub fn append_jsonl<T: Serialize>(&self, rel: &str, record: &T) -> Result<()> {
        let mut line = serde_json::to_vec(&Stamped { run_id: self.run_id().to_string(), record })?;
        line.push(b'\n');
        let mut file = std::fs::OpenOptions::new().create(true).append(true).open(self.path(rel))?;
        file.write_all(&line)?;
        file.sync_data()?;
        Ok(())
    }

    /// Reads a run file, rejecting lines stamped with another run id.
    pub fn read_jsonl<T: DeserializeOwned>(&self, rel: &str) -> Result<Vec<T>> {
        let path = self.path(rel);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::from(e).context(path.display().to_string()))?;
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let stamped: Stamped<T> = serde_json::from_str(line)
                .map_err(|e| Error::from(e).context(format!("{}:{}", path.display(), i + 1)))?;
            if stamped.run_id != self.run_id() {
                return Err(Error::Integrity(format!(
                    "{}:{} belongs to run {}, not {}",
                    path.display(),
                    i + 1,
                    stamped.run_id,
                    self.run_id()
                )));
            }
            out.push(stamped.record);
        }
        Ok(out)
    }

    pub fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(&Stamped { run_id: self.run_id().to_string(), record: value })?;
        text.push('\n');
        write_atomic(&self.path(rel), text.as_bytes())
    }

    pub fn read_json<T: DeserializeOwned>(&self, rel: &str) -> Result<T> {
        let path = self.path(rel);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::from(e).context(path.display().to_string()))?;
        let stamped: Stamped<T> =
            serde_json::from_str(&text).map_err(|e| Error::from(e).context(path.display().to_string()))?;
        if stamped.run_id != self.run_id() {
            return Err(Error::Integrity(format!("{} belongs to run {}", path.display(), stamped.run_id)));
        }
        Ok(stamped.record)
    }

    /// Writes a text artifact whose first line names the run.
    pub fn write_text(&self, rel: &str, body: &str) -> Result<()> {
        write_atomic(&self.path(rel), format!("run_id: {}\n{body}", self.run_id()).as_bytes())
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp~");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(run_id: &str) -> RunManifest {
        RunManifest {
            run_id: run_id.into(),
            task: TaskKind::Nli,
            dataset_sha256: "d".into(),
            examples: 1,
            config_hash: Config::default().hash(),
            config: Config::default(),
            fixtures: None,
            backends: BTreeMap::new(),
            stages: BTreeMap::new(),
            created_at: timestamp(),
        }
    }

    #[test]
    fn run_id_depends_on_every_input() {
        let base = run_id(TaskKind::Nli, "abc", "cfg");
        assert_eq!(base, run_id(TaskKind::Nli, "abc", "cfg"));
        assert_ne!(base, run_id(TaskKind::Defeasible, "abc", "cfg"));
        assert_ne!(base, run_id(TaskKind::Nli, "abd", "cfg"));
        assert_ne!(base, run_id(TaskKind::Nli, "abc", "cfg2"));
    }

    #[test]
    fn jsonl_round_trip_checks_run_id() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::create(dir.path(), manifest("r1"), b"").unwrap();
        run.write_jsonl("x.jsonl", &[BTreeMap::from([("k", 1)])]).unwrap();
        let back: Vec<BTreeMap<String, i32>> = run.read_jsonl("x.jsonl").unwrap();
        assert_eq!(back[0]["k"], 1);
        let text = std::fs::read_to_string(run.path("x.jsonl")).unwrap();
        assert_eq!(text, "{\"run_id\":\"r1\",\"k\":1}\n");

        let other = RunDir::create(&dir.path().join("b"), manifest("r2"), b"").unwrap();
        std::fs::copy(run.path("x.jsonl"), other.path("x.jsonl")).unwrap();
        assert!(matches!(other.read_jsonl::<BTreeMap<String, i32>>("x.jsonl"), Err(Error::Integrity(_))));
    }

    #[test]
    fn stage_requires_recorded_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = RunDir::create(dir.path(), manifest("r1"), b"").unwrap();
        let err = run.require(Stage::Prune).unwrap_err();
        assert!(err.to_string().contains("`prune`"));
        run.write_jsonl::<u8>("prune.jsonl", &[]).unwrap();
        run.complete(Stage::Prune, &["prune.jsonl"]).unwrap();
        assert!(run.require(Stage::Prune).is_ok());
        std::fs::remove_file(run.path("prune.jsonl")).unwrap();
        assert!(run.require(Stage::Prune).is_err());
        assert!(RunDir::open(dir.path()).unwrap().manifest.stages.contains_key("prune"));
    }
}
