use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ScoreCacheKey;
use crate::dataset::ImportanceScores;
use crate::io::write_atomic;

/// Persistent content-addressed score store: one `<key>.json` file per entry.
#[derive(Debug, Clone)]
pub struct DiskCache {
    dir: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    scores: Vec<f64>,
}

impl DiskCache {
    pub fn open(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, key: &ScoreCacheKey) -> PathBuf {
        self.dir.join(format!("{}.json", key.as_str()))
    }

    pub fn get(&self, key: &ScoreCacheKey) -> std::io::Result<Option<ImportanceScores>> {
        match std::fs::read(self.path(key)) {
            Ok(bytes) => {
                let entry: Entry = serde_json::from_slice(&bytes)
                    .map_err(|e| std::io::Error::new(ErrorKind::InvalidData, e))?;
                Ok(Some(ImportanceScores(entry.scores)))
            }
            Err(e) if e.kind() == ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn put(&self, key: &ScoreCacheKey, scores: &ImportanceScores) -> std::io::Result<()> {
        let body = serde_json::to_vec(&Entry {
            scores: scores.0.clone(),
        })?;
        write_atomic(&self.path(key), &body)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn put_then_get() {
        let dir = tempfile::tempdir().unwrap();
        let cache = DiskCache::open(dir.path().join("nested")).unwrap();
        let key = ScoreCacheKey::new("p", &["a".to_string()], "m");
        assert_eq!(cache.get(&key).unwrap(), None);
        let scores = ImportanceScores(vec![0.1 + 0.2]);
        cache.put(&key, &scores).unwrap();
        assert_eq!(cache.get(&key).unwrap(), Some(scores));
    }

    #[test]
    fn corrupt_entry_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let cache = DiskCache::open(dir.path()).unwrap();
        let key = ScoreCacheKey::new("p", &[], "m");
        std::fs::write(cache.path(&key), b"{oops").unwrap();
        assert!(cache.get(&key).is_err());
    }
}
