use crate::model::{ArtefactId, JobId, TaskId, WorkerDescriptor, WorkerId};

/// An instruction sent to a worker and not yet acknowledged.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct PendingLoad {
    pub artefact: ArtefactId,
    pub job: JobId,
    pub stage: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct WorkerEntry {
    pub desc: WorkerDescriptor,
    pub gpu_available: bool,
    pub busy: Option<(JobId, TaskId)>,
    pub pending_load: Option<PendingLoad>,
    pub last_seen_ms: u64,
    /// Residency has been taken from a heartbeat since (re)registration.
    pub synced: bool,
    pub peak_rss_bytes: u64,
}

impl WorkerEntry {
    pub fn new(id: WorkerId, gpu_available: bool, now: u64) -> Self {
        WorkerEntry {
            desc: WorkerDescriptor::new(id),
            gpu_available,
            busy: None,
            pending_load: None,
            last_seen_ms: now,
            synced: false,
            peak_rss_bytes: 0,
        }
    }

    /// Free to take a task or a load instruction.
    pub fn available(&self) -> bool {
        self.desc.connected && self.synced && self.busy.is_none() && self.pending_load.is_none()
    }

    /// Holds `artefact` in memory, or is loading it. A worker whose
    /// acknowledged partition is being replaced no longer counts for it.
    pub fn holds(&self, artefact: &str) -> bool {
        if !self.desc.connected {
            return false;
        }
        match &self.pending_load {
            Some(p) => p.artefact == artefact,
            None => self.desc.resident_partition.as_deref() == Some(artefact),
        }
    }
}

/// Workers in registration order.
#[derive(Debug, Clone, Default)]
pub(crate) struct Registry {
    entries: Vec<WorkerEntry>,
}

impl Registry {
    pub fn get(&self, id: &str) -> Option<&WorkerEntry> {
        self.entries.iter().find(|e| e.desc.worker_id == id)
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut WorkerEntry> {
        self.entries.iter_mut().find(|e| e.desc.worker_id == id)
    }

    pub fn insert(&mut self, entry: WorkerEntry) {
        self.entries.push(entry);
    }

    pub fn iter(&self) -> impl Iterator<Item = &WorkerEntry> {
        self.entries.iter()
    }

    pub fn holders(&self, artefact: &str) -> usize {
        self.entries.iter().filter(|e| e.holds(artefact)).count()
    }

    pub fn connected(&self) -> usize {
        self.entries.iter().filter(|e| e.desc.connected).count()
    }
}
