use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::executor::StageSession;
use super::WorkerError;
use crate::model::ArtefactId;
use crate::transport::sha256_hex;

/// The in-memory side: at most one open session.
#[derive(Default)]
pub struct SessionCache {
    active: Option<ActiveSession>,
}

struct ActiveSession {
    artefact: ArtefactId,
    footprint: u64,
    session: Box<dyn StageSession>,
}

impl SessionCache {
    pub fn active(&self) -> Option<&str> {
        self.active.as_ref().map(|a| a.artefact.as_str())
    }

    /// Footprint of the active session, or 0.
    pub fn tracked_rss_bytes(&self) -> u64 {
        self.active.as_ref().map_or(0, |a| a.footprint)
    }

    /// Installs a session. Refuses while a different one is active.
    pub fn activate(
        &mut self,
        artefact: ArtefactId,
        footprint: u64,
        session: Box<dyn StageSession>,
    ) -> Result<(), WorkerError> {
        if let Some(a) = &self.active {
            return Err(WorkerError::ResidencyViolation {
                active: a.artefact.clone(),
                requested: artefact,
            });
        }
        self.active = Some(ActiveSession {
            artefact,
            footprint,
            session,
        });
        Ok(())
    }

    pub fn release(&mut self, artefact: &str) -> Result<(), WorkerError> {
        match &self.active {
            Some(a) if a.artefact == artefact => {
                self.active = None;
                Ok(())
            }
            _ => Err(WorkerError::NotResident(artefact.to_string())),
        }
    }

    pub fn session_for(&mut self, artefact: &str) -> Result<&mut dyn StageSession, WorkerError> {
        if self.active() != Some(artefact) {
            return Err(WorkerError::PartitionNotResident {
                requested: artefact.to_string(),
                active: self.active().map(str::to_string),
            });
        }
        Ok(self
            .active
            .as_mut()
            .expect("checked above")
            .session
            .as_mut())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct CacheEntry {
    checksum: String,
    size: u64,
    last_used: u64,
}

/// Partition files on disk, named by checksum, with an artefact index kept
/// alongside so the cache survives restarts.
#[derive(Debug)]
pub struct DiskCache {
    dir: PathBuf,
    entries: BTreeMap<ArtefactId, CacheEntry>,
    clock: u64,
    budget_bytes: Option<u64>,
}

const INDEX: &str = "index.json";

impl DiskCache {
    pub fn open(dir: impl Into<PathBuf>, budget_bytes: Option<u64>) -> Result<Self, WorkerError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| WorkerError::Io(e.to_string()))?;
        let mut entries: BTreeMap<ArtefactId, CacheEntry> = match fs::read(dir.join(INDEX)) {
            Ok(bytes) => crate::canonical::from_slice(&bytes).unwrap_or_default(),
            Err(_) => BTreeMap::new(),
        };
        entries.retain(|_, e| dir.join(format!("{}.bin", e.checksum)).is_file());
        let clock = entries.values().map(|e| e.last_used).max().unwrap_or(0);
        Ok(DiskCache {
            dir,
            entries,
            clock,
            budget_bytes,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn artefacts(&self) -> impl Iterator<Item = &ArtefactId> {
        self.entries.keys()
    }

    pub fn contains(&self, artefact: &str) -> bool {
        self.entries.contains_key(artefact)
    }

    pub fn total_bytes(&self) -> u64 {
        self.entries.values().map(|e| e.size).sum()
    }

    fn path(&self, checksum: &str) -> PathBuf {
        self.dir.join(format!("{checksum}.bin"))
    }

    pub fn put(&mut self, artefact: &str, checksum: &str, blob: &[u8]) -> Result<(), WorkerError> {
        let path = self.path(checksum);
        if !path.is_file() {
            let mut tmp = tempfile::NamedTempFile::new_in(&self.dir)
                .map_err(|e| WorkerError::Io(e.to_string()))?;
            std::io::Write::write_all(&mut tmp, blob)
                .map_err(|e| WorkerError::Io(e.to_string()))?;
            tmp.persist(&path)
                .map_err(|e| WorkerError::Io(e.to_string()))?;
        }
        self.clock += 1;
        self.entries.insert(
            artefact.to_string(),
            CacheEntry {
                checksum: checksum.to_string(),
                size: blob.len() as u64,
                last_used: self.clock,
            },
        );
        self.save_index()
    }

    /// Reads a cached partition and checks it against `checksum`.
    pub fn get(&mut self, artefact: &str, checksum: &str) -> Result<Vec<u8>, WorkerError> {
        let entry = self
            .entries
            .get(artefact)
            .ok_or_else(|| WorkerError::CacheMiss(artefact.to_string()))?;
        if entry.checksum != checksum {
            return Err(WorkerError::ChecksumMismatch(artefact.to_string()));
        }
        let bytes = fs::read(self.path(checksum)).map_err(|e| WorkerError::Io(e.to_string()))?;
        if sha256_hex(&bytes) != checksum {
            return Err(WorkerError::ChecksumMismatch(artefact.to_string()));
        }
        self.clock += 1;
        self.entries.get_mut(artefact).unwrap().last_used = self.clock;
        Ok(bytes)
    }

    /// Drops least recently used files until the budget is met. `pinned`
    /// entries are never removed.
    pub fn evict_to_budget(
        &mut self,
        pinned: &BTreeSet<&str>,
    ) -> Result<Vec<ArtefactId>, WorkerError> {
        let Some(budget) = self.budget_bytes else {
            return Ok(Vec::new());
        };
        let mut evicted = Vec::new();
        while self.total_bytes() > budget {
            let victim = self
                .entries
                .iter()
                .filter(|(id, _)| !pinned.contains(id.as_str()))
                .min_by_key(|(_, e)| e.last_used)
                .map(|(id, _)| id.clone());
            let Some(id) = victim else { break };
            let entry = self.entries.remove(&id).unwrap();
            if !self.entries.values().any(|e| e.checksum == entry.checksum) {
                let _ = fs::remove_file(self.path(&entry.checksum));
            }
            evicted.push(id);
        }
        if !evicted.is_empty() {
            self.save_index()?;
        }
        Ok(evicted)
    }

    fn save_index(&self) -> Result<(), WorkerError> {
        let bytes = crate::canonical::to_vec(&self.entries).expect("index serializes");
        fs::write(self.dir.join(INDEX), bytes).map_err(|e| WorkerError::Io(e.to_string()))
    }
}
