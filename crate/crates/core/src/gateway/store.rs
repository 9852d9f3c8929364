//! Directory of `<digest>.json` files, each holding `{"text": ...}`.
//!
//! Used both as the replay store and as the response cache.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::GatewayError;

/// Environment variable overriding the cache directory.
pub const CACHE_DIR_ENV: &str = "ENSEMBLE_VQA_CACHE_DIR";
pub const DEFAULT_CACHE_DIR: &str = ".ensemble-vqa-cache";

#[derive(Debug, Serialize, Deserialize)]
struct StoredResponse {
    text: String,
}

#[derive(Debug)]
pub struct ResponseStore {
    dir: PathBuf,
    write_lock: Mutex<()>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StoreStats {
    pub entries: usize,
    pub bytes: u64,
}

impl ResponseStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            write_lock: Mutex::new(()),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, digest: &str) -> PathBuf {
        self.dir.join(format!("{digest}.json"))
    }

    pub fn get(&self, digest: &str) -> Result<Option<String>, GatewayError> {
        let path = self.path_for(digest);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(GatewayError::Store(format!("{}: {e}", path.display()))),
        };
        let stored: StoredResponse =
            serde_json::from_slice(&bytes).map_err(|e| GatewayError::Store(format!("{}: {e}", path.display())))?;
        Ok(Some(stored.text))
    }

    /// Writes through a temp file and renames, so readers never see a torn entry.
    pub fn put(&self, digest: &str, text: &str) -> Result<(), GatewayError> {
        let io = |e: std::io::Error| GatewayError::Store(format!("{}: {e}", self.dir.display()));
        let _guard = self.write_lock.lock().unwrap_or_else(|p| p.into_inner());
        std::fs::create_dir_all(&self.dir).map_err(io)?;
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(io)?;
        let body = serde_json::to_vec(&StoredResponse { text: text.to_string() }).expect("string serializes");
        tmp.write_all(&body).map_err(io)?;
        tmp.persist(self.path_for(digest)).map_err(|e| io(e.error))?;
        Ok(())
    }

    fn entries(&self) -> Result<Vec<PathBuf>, GatewayError> {
        let read = match std::fs::read_dir(&self.dir) {
            Ok(r) => r,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(GatewayError::Store(format!("{}: {e}", self.dir.display()))),
        };
        let mut out = Vec::new();
        for entry in read {
            let path = entry.map_err(|e| GatewayError::Store(e.to_string()))?.path();
            if path.extension().is_some_and(|x| x == "json") {
                out.push(path);
            }
        }
        Ok(out)
    }

    pub fn stats(&self) -> Result<StoreStats, GatewayError> {
        let mut stats = StoreStats::default();
        for path in self.entries()? {
            stats.entries += 1;
            stats.bytes += std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
        }
        Ok(stats)
    }

    /// Removes every entry; returns how many were deleted.
    pub fn clear(&self) -> Result<usize, GatewayError> {
        let _guard = self.write_lock.lock().unwrap_or_else(|p| p.into_inner());
        let entries = self.entries()?;
        for path in &entries {
            std::fs::remove_file(path).map_err(|e| GatewayError::Store(format!("{}: {e}", path.display())))?;
        }
        Ok(entries.len())
    }
}

/// Picks the cache directory: explicit flag, then the environment
/// variable, then the configured value, then the default.
pub fn resolve_cache_dir(flag: Option<&Path>, configured: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(env) = std::env::var_os(CACHE_DIR_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(env);
    }
    configured
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_CACHE_DIR))
}
