//! Worker selection: model gating, residency tiers, telemetry ranking and
//! two-phase batch assignment. Everything here is a pure function over a fleet
//! snapshot; the foreman decides which workers make up that snapshot.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mcdm::{entropy_weights, CriteriaMatrix};
use crate::model::{ArtefactId, TaskId, WorkerDescriptor, WorkerId};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchedulerError {
    #[error("no eligible workers to rank")]
    EmptyEligibleSet,
    #[error("no connected workers available")]
    NoWorkersAvailable,
}

#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum RankingStrategy {
    Fifo,
    #[default]
    EntropyWeightedSum,
}

impl fmt::Display for RankingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RankingStrategy::Fifo => "fifo",
            RankingStrategy::EntropyWeightedSum => "entropy_weighted_sum",
        })
    }
}

impl std::str::FromStr for RankingStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fifo" => Ok(RankingStrategy::Fifo),
            "entropy_weighted_sum" => Ok(RankingStrategy::EntropyWeightedSum),
            other => Err(format!("unknown scheduler strategy `{other}`")),
        }
    }
}

/// Preference order for placing a partition load; lower is better.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidencyTier {
    /// Partition already in session memory.
    Resident = 1,
    /// Partition file on disk.
    Cached = 2,
    /// Nothing resident.
    Idle = 3,
    /// Another partition must be unloaded first.
    Evict = 4,
}

impl ResidencyTier {
    pub fn number(self) -> u8 {
        self as u8
    }
}

pub fn compute_tier(target: &str, w: &WorkerDescriptor) -> ResidencyTier {
    match &w.resident_partition {
        Some(r) if r == target => ResidencyTier::Resident,
        _ if w.disk_cache.contains(target) => ResidencyTier::Cached,
        None => ResidencyTier::Idle,
        Some(_) => ResidencyTier::Evict,
    }
}

/// Connected workers with `target` confirmed resident.
pub fn gate_workers<'a>(target: &str, fleet: &[&'a WorkerDescriptor]) -> Vec<&'a WorkerDescriptor> {
    fleet
        .iter()
        .copied()
        .filter(|w| w.connected && w.resident_partition.as_deref() == Some(target))
        .collect()
}

/// Orders `eligible`. FIFO keeps the given (registration) order; the entropy
/// strategy sorts by descending score with ties broken by worker id.
pub fn rank_workers<'a>(
    eligible: &[&'a WorkerDescriptor],
    strategy: RankingStrategy,
) -> Result<Vec<&'a WorkerDescriptor>, SchedulerError> {
    if eligible.is_empty() {
        return Err(SchedulerError::EmptyEligibleSet);
    }
    match strategy {
        RankingStrategy::Fifo => Ok(eligible.to_vec()),
        RankingStrategy::EntropyWeightedSum => {
            let scores = telemetry_scores(eligible);
            let mut order: Vec<usize> = (0..eligible.len()).collect();
            order.sort_by(|&a, &b| {
                scores[b]
                    .total_cmp(&scores[a])
                    .then_with(|| eligible[a].worker_id.cmp(&eligible[b].worker_id))
            });
            Ok(order.into_iter().map(|i| eligible[i]).collect())
        }
    }
}

/// Entropy-weighted telemetry scores; a lone worker scores 0.
pub fn telemetry_scores(workers: &[&WorkerDescriptor]) -> Vec<f64> {
    if workers.len() < 2 {
        return vec![0.0; workers.len()];
    }
    let snaps: Vec<_> = workers.iter().map(|w| &w.last_heartbeat).collect();
    let m = CriteriaMatrix::<f64>::from_telemetry(&snaps);
    let w = entropy_weights(&m).expect("at least two rows");
    m.scores(&w)
}

/// Where and how to bring a partition into memory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadPlan {
    pub worker_id: WorkerId,
    pub tier: ResidencyTier,
    /// Set whenever a different partition is resident on the chosen worker.
    pub unload_first: Option<ArtefactId>,
    pub load: ArtefactId,
}

impl LoadPlan {
    /// Tier-1 plans need no instruction at all.
    pub fn is_noop(&self) -> bool {
        self.tier == ResidencyTier::Resident
    }

    pub fn for_worker(target: &str, w: &WorkerDescriptor) -> LoadPlan {
        let tier = compute_tier(target, w);
        LoadPlan {
            worker_id: w.worker_id.clone(),
            tier,
            unload_first: w.resident_partition.clone().filter(|r| r != target),
            load: target.to_string(),
        }
    }
}

/// Lowest tier wins; within the tier, `strategy` ranks the candidates.
pub fn select_load_target(
    target: &str,
    fleet: &[&WorkerDescriptor],
    strategy: RankingStrategy,
) -> Result<LoadPlan, SchedulerError> {
    let connected: Vec<&WorkerDescriptor> = fleet.iter().copied().filter(|w| w.connected).collect();
    let best = connected
        .iter()
        .map(|w| compute_tier(target, w))
        .min()
        .ok_or(SchedulerError::NoWorkersAvailable)?;
    let tier_members: Vec<_> = connected
        .into_iter()
        .filter(|w| compute_tier(target, w) == best)
        .collect();
    let chosen = rank_workers(&tier_members, strategy)?[0];
    Ok(LoadPlan::for_worker(target, chosen))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignPhase {
    Claimed,
    Mcdm,
}

/// A pending task and the partition it needs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingTask {
    pub task_id: TaskId,
    pub artefact: ArtefactId,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AssignmentPlan {
    /// Assignments in the order they were made.
    pub assignments: Vec<(TaskId, WorkerId, AssignPhase)>,
    /// Tasks left without a gated worker.
    pub deferred: Vec<TaskId>,
}

impl AssignmentPlan {
    pub fn worker_for(&self, task: TaskId) -> Option<&str> {
        self.assignments
            .iter()
            .find(|(t, _, _)| *t == task)
            .map(|(_, w, _)| w.as_str())
    }

    pub fn as_map(&self) -> BTreeMap<TaskId, WorkerId> {
        self.assignments
            .iter()
            .map(|(t, w, _)| (*t, w.clone()))
            .collect()
    }
}

/// Phase 1: resident workers claim work, rarest resident partition first.
/// Phase 2: leftover tasks, in id order, go to the best-ranked unassigned gated worker.
/// Each worker is used at most once.
pub fn two_phase_assign(
    pending: &[PendingTask],
    fleet: &[&WorkerDescriptor],
    strategy: RankingStrategy,
) -> AssignmentPlan {
    let mut tasks: Vec<&PendingTask> = pending.iter().collect();
    tasks.sort_by_key(|t| t.task_id);
    let connected: Vec<&WorkerDescriptor> = fleet.iter().copied().filter(|w| w.connected).collect();

    let mut replicas: BTreeMap<&str, usize> = BTreeMap::new();
    for w in &connected {
        if let Some(r) = &w.resident_partition {
            *replicas.entry(r.as_str()).or_default() += 1;
        }
    }

    let mut claimers: Vec<&WorkerDescriptor> = connected
        .iter()
        .copied()
        .filter(|w| w.resident_partition.is_some())
        .collect();
    claimers.sort_by(|a, b| {
        let ra = replicas[a.resident_partition.as_deref().unwrap()];
        let rb = replicas[b.resident_partition.as_deref().unwrap()];
        ra.cmp(&rb).then_with(|| a.worker_id.cmp(&b.worker_id))
    });

    let mut plan = AssignmentPlan::default();
    let mut taken: BTreeSet<TaskId> = BTreeSet::new();
    let mut busy: BTreeSet<&str> = BTreeSet::new();

    for w in claimers {
        let resident = w.resident_partition.as_deref().unwrap();
        if let Some(t) = tasks
            .iter()
            .find(|t| t.artefact == resident && !taken.contains(&t.task_id))
        {
            taken.insert(t.task_id);
            busy.insert(&w.worker_id);
            plan.assignments
                .push((t.task_id, w.worker_id.clone(), AssignPhase::Claimed));
        }
    }

    for t in tasks.iter().filter(|t| !taken.contains(&t.task_id)) {
        let gated: Vec<&WorkerDescriptor> = gate_workers(&t.artefact, &connected)
            .into_iter()
            .filter(|w| !busy.contains(w.worker_id.as_str()))
            .collect();
        match rank_workers(&gated, strategy) {
            Ok(ranked) => {
                let w = ranked[0];
                busy.insert(&w.worker_id);
                plan.assignments
                    .push((t.task_id, w.worker_id.clone(), AssignPhase::Mcdm));
            }
            Err(_) => plan.deferred.push(t.task_id),
        }
    }
    plan
}
