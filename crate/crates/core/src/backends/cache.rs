use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::BackendError;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub backend_id: String,
    pub request: Value,
    pub response: Value,
    pub created_at: String,
}

/// Content-addressed response store: one `<key>.json` file per request.
///
/// Writes go through a temporary file and a rename, so concurrent writers of
/// the same key leave one complete record behind (last write wins; records
/// for one key are identical by construction).
#[derive(Debug)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(|e| BackendError::Cache(format!("{}: {e}", dir.display())))?;
        Ok(ResponseCache { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Result<Option<CacheEntry>> {
        let path = self.path_for(key);
        let text = match fs::read_to_string(&path) {
            Ok(text) => text,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(BackendError::Cache(format!("{}: {e}", path.display())).into()),
        };
        let entry: CacheEntry = serde_json::from_str(&text)
            .map_err(|e| BackendError::Cache(format!("corrupt cache record {}: {e}", path.display())))?;
        if entry.key != key {
            return Err(BackendError::Cache(format!("cache record {} carries key {}", path.display(), entry.key)).into());
        }
        Ok(Some(entry))
    }

    pub fn put(&self, entry: &CacheEntry) -> Result<()> {
        let target = self.path_for(&entry.key);
        let write = || -> std::io::Result<()> {
            let mut file = tempfile::NamedTempFile::new_in(&self.dir)?;
            serde_json::to_writer(&mut file, entry)?;
            file.write_all(b"\n")?;
            file.as_file().sync_all()?;
            file.persist(&target).map_err(|e| e.error)?;
            Ok(())
        };
        write().map_err(|e| BackendError::Cache(format!("{}: {e}", target.display())).into())
    }

    pub fn len(&self) -> usize {
        fs::read_dir(&self.dir)
            .map(|entries| {
                entries
                    .filter_map(|e| e.ok())
                    .filter(|e| e.path().extension().is_some_and(|ext| ext == "json"))
                    .count()
            })
            .unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(key: &str, response: &str) -> CacheEntry {
        CacheEntry {
            key: key.into(),
            backend_id: "b".into(),
            request: serde_json::json!({"op": "generate", "prompt": "p"}),
            response: Value::String(response.into()),
            created_at: "2026-01-01T00:00:00Z".into(),
        }
    }

    #[test]
    fn put_then_get() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        assert!(cache.get("k1").unwrap().is_none());
        cache.put(&entry("k1", "r")).unwrap();
        assert_eq!(cache.get("k1").unwrap().unwrap().response, Value::String("r".into()));
        cache.put(&entry("k1", "r")).unwrap();
        assert_eq!(cache.len(), 1);
    }

    #[test]
    fn corrupt_records_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        fs::write(dir.path().join("bad.json"), "{").unwrap();
        assert!(cache.get("bad").is_err());
    }

    #[test]
    fn concurrent_writers_leave_one_record() {
        let dir = tempfile::tempdir().unwrap();
        let cache = std::sync::Arc::new(ResponseCache::open(dir.path()).unwrap());
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let cache = cache.clone();
                std::thread::spawn(move || cache.put(&entry("same", "r")).unwrap())
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(cache.len(), 1);
        assert!(cache.get("same").unwrap().is_some());
    }
}
