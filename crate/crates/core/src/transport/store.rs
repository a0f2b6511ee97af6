use std::fs;
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::TransportError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content-addressed directory of canonical envelopes: `<dir>/<sha256>.bin`.
#[derive(Debug, Clone)]
pub struct PayloadStore {
    dir: PathBuf,
}

impl PayloadStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, TransportError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| TransportError::StoreWrite(e.to_string()))?;
        Ok(PayloadStore { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.bin"))
    }

    /// Writes `bytes` under their hash. Existing keys are left untouched.
    pub fn put(&self, bytes: &[u8]) -> Result<String, TransportError> {
        let key = sha256_hex(bytes);
        let path = self.path_for(&key);
        if path.exists() {
            return Ok(key);
        }
        let write = || -> std::io::Result<()> {
            let mut tmp = tempfile::NamedTempFile::new_in(&self.dir)?;
            tmp.write_all(bytes)?;
            tmp.as_file().sync_all()?;
            tmp.persist(&path).map_err(|e| e.error)?;
            Ok(())
        };
        write().map_err(|e| TransportError::StoreWrite(e.to_string()))?;
        Ok(key)
    }

    pub fn get(&self, key: &str) -> Result<Vec<u8>, TransportError> {
        let bytes = match fs::read(self.path_for(key)) {
            Ok(b) => b,
            Err(e) if e.kind() == ErrorKind::NotFound => {
                return Err(TransportError::MissingKey(key.to_string()))
            }
            Err(e) => return Err(TransportError::StoreRead(e.to_string())),
        };
        let actual = sha256_hex(&bytes);
        if actual != key {
            return Err(TransportError::HashMismatch {
                key: key.to_string(),
                actual,
            });
        }
        Ok(bytes)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.path_for(key).exists()
    }

    pub fn len(&self) -> usize {
        fs::read_dir(&self.dir)
            .map(|it| {
                it.filter_map(Result::ok)
                    .filter(|e| e.path().extension().is_some_and(|x| x == "bin"))
                    .count()
            })
            .unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
