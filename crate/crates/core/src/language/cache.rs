//! File-backed description cache: one JSON entry per (prompt, provider,
//! seed) key, named by the key's hex digest. Writes go through a temp file
//! and an atomic rename, so concurrent readers never observe a partial
//! entry.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::util::sha256_hex;

use super::LanguageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub prompt_hash: String,
    pub provider: String,
    pub seed: u64,
    pub k: usize,
    pub chosen_index: usize,
    pub texts: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct DescriptionCache {
    dir: PathBuf,
}

impl DescriptionCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self, LanguageError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|source| LanguageError::CacheIo {
            path: dir.display().to_string(),
            source,
        })?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Cache key digest for (prompt, provider id, seed).
    pub fn key(prompt: &str, provider_id: &str, seed: u64) -> String {
        let mut blob = Vec::with_capacity(prompt.len() + provider_id.len() + 9);
        blob.extend_from_slice(prompt.as_bytes());
        blob.push(0);
        blob.extend_from_slice(provider_id.as_bytes());
        blob.push(0);
        blob.extend_from_slice(&seed.to_le_bytes());
        sha256_hex(&blob)
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Result<Option<CacheEntry>, LanguageError> {
        let path = self.path_for(key);
        let data = match std::fs::read_to_string(&path) {
            Ok(d) => d,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(source) => {
                return Err(LanguageError::CacheIo {
                    path: path.display().to_string(),
                    source,
                })
            }
        };
        let entry =
            serde_json::from_str(&data).map_err(|e| LanguageError::CacheFormat(e.to_string()))?;
        Ok(Some(entry))
    }

    pub fn put(&self, key: &str, entry: &CacheEntry) -> Result<(), LanguageError> {
        let path = self.path_for(key);
        let tmp = self.dir.join(format!(".{key}.tmp"));
        let json = serde_json::to_string_pretty(entry)
            .map_err(|e| LanguageError::CacheFormat(e.to_string()))?;
        std::fs::write(&tmp, json).map_err(|source| LanguageError::CacheIo {
            path: tmp.display().to_string(),
            source,
        })?;
        std::fs::rename(&tmp, &path).map_err(|source| LanguageError::CacheIo {
            path: path.display().to_string(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry() -> CacheEntry {
        CacheEntry {
            prompt_hash: "ph".to_string(),
            provider: "stub-v1".to_string(),
            seed: 7,
            k: 10,
            chosen_index: 3,
            texts: (0..10).map(|i| format!("text {i}")).collect(),
        }
    }

    #[test]
    fn put_get_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cache = DescriptionCache::new(dir.path()).unwrap();
        let key = DescriptionCache::key("prompt", "stub-v1", 7);
        assert_eq!(cache.get(&key).unwrap(), None);
        cache.put(&key, &entry()).unwrap();
        assert_eq!(cache.get(&key).unwrap(), Some(entry()));
    }

    #[test]
    fn keys_separate_prompt_provider_and_seed() {
        let a = DescriptionCache::key("p", "s", 1);
        assert_ne!(a, DescriptionCache::key("q", "s", 1));
        assert_ne!(a, DescriptionCache::key("p", "t", 1));
        assert_ne!(a, DescriptionCache::key("p", "s", 2));
        assert_eq!(a, DescriptionCache::key("p", "s", 1));
    }

    #[test]
    fn concurrent_writers_leave_a_readable_entry() {
        let dir = tempfile::tempdir().unwrap();
        let cache = DescriptionCache::new(dir.path()).unwrap();
        let key = DescriptionCache::key("p", "s", 1);
        std::thread::scope(|s| {
            for t in 0..8 {
                let cache = cache.clone();
                let key = key.clone();
                s.spawn(move || {
                    let mut e = entry();
                    e.chosen_index = t;
                    // interleave reads and writes
                    for _ in 0..20 {
                        cache.put(&key, &e).unwrap();
                        if let Some(read) = cache.get(&key).unwrap() {
                            assert_eq!(read.texts.len(), 10);
                        }
                    }
                });
            }
        });
        assert!(cache.get(&key).unwrap().is_some());
    }
}
