//! Independent makespan model. It re-derives the scheduling policy from its
//! rules over plain index-based state and shares no code with the foreman or
//! the scheduler, so agreement between the two is evidence rather than
//! tautology.
//!
//! Policy, per scheduling round:
//! 1. Each stage's pending tasks (by input) go to idle workers holding that
//!    stage in memory (by worker id).
//! 2. For each stage in order that may be loaded (stage 0, or any stage whose
//!    predecessor has completed a task), still has unfinished tasks and has no
//!    worker holding or loading it, one idle worker is chosen: lowest residency
//!    tier first, then by ranking. Idle workers that are the last holder of a
//!    stage with unfinished work are skipped unless nobody else is idle and
//!    the stage has pending tasks.
//!
//! Worker replies that take zero time are seen by the next round at the same
//! instant. The harness spends one extra sub-batch delivering the instruction,
//! during which its round has nothing new to act on, so both produce the same
//! schedule.

use std::collections::{BTreeMap, BTreeSet};

use super::config::FleetConfig;
use super::SimError;
use crate::model::{ExecutionMode, TelemetrySnapshot};
use crate::scheduler::RankingStrategy;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Blocked,
    Pending,
    Running,
    Done,
}

#[derive(Debug, Clone)]
struct OWorker {
    id: String,
    resident: Option<usize>,
    cached: BTreeSet<usize>,
    loading: Option<usize>,
    busy: bool,
}

impl OWorker {
    fn idle(&self) -> bool {
        !self.busy && self.loading.is_none()
    }

    fn holds(&self, stage: usize) -> bool {
        match self.loading {
            Some(l) => l == stage,
            None => self.resident == Some(stage),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Done {
    Task {
        worker: usize,
        stage: usize,
        input: usize,
    },
    Load {
        worker: usize,
        stage: usize,
    },
}

struct Model<'a> {
    cfg: &'a FleetConfig,
    mode: ExecutionMode,
    n: usize,
    s: usize,
    slots: Vec<Vec<Slot>>,
    done_per_stage: Vec<usize>,
    loadable: BTreeSet<usize>,
    workers: Vec<OWorker>,
    events: BTreeMap<(u64, u64), Done>,
    seq: u64,
    loads: [u64; 4],
}

impl Model<'_> {
    fn at(&mut self, t: u64, d: Done) {
        self.events.insert((t, self.seq), d);
        self.seq += 1;
    }

    fn unfinished(&self, stage: usize) -> bool {
        self.done_per_stage[stage] < self.n
    }

    fn holders(&self, stage: usize) -> usize {
        self.workers.iter().filter(|w| w.holds(stage)).count()
    }

    fn tier(&self, w: usize, stage: usize) -> usize {
        let w = &self.workers[w];
        if w.resident == Some(stage) {
            1
        } else if w.cached.contains(&stage) {
            2
        } else if w.resident.is_none() {
            3
        } else {
            4
        }
    }

    fn start_load(&mut self, now: u64, w: usize, stage: usize) {
        let tier = self.tier(w, stage);
        self.loads[tier - 1] += 1;
        if tier == 1 {
            return;
        }
        let spec = &self.cfg.workers[w];
        let delay = if tier == 2 {
            spec.warm_load_ms
        } else {
            spec.cold_load_ms
        };
        let wk = &mut self.workers[w];
        wk.resident = None;
        wk.loading = Some(stage);
        self.at(now + delay, Done::Load { worker: w, stage });
    }

    fn apply(&mut self, d: Done) -> bool {
        match d {
            Done::Load { worker, stage } => {
                let w = &mut self.workers[worker];
                w.loading = None;
                w.resident = Some(stage);
                w.cached.insert(stage);
            }
            Done::Task {
                worker,
                stage,
                input,
            } => {
                self.workers[worker].busy = false;
                self.slots[stage][input] = Slot::Done;
                self.done_per_stage[stage] += 1;
                if stage + 1 < self.s {
                    self.loadable.insert(stage + 1);
                    match self.mode {
                        ExecutionMode::Streaming => self.slots[stage + 1][input] = Slot::Pending,
                        ExecutionMode::Barrier => {
                            if self.done_per_stage[stage] == self.n {
                                self.slots[stage + 1].fill(Slot::Pending);
                            }
                        }
                    }
                }
                return self.done_per_stage[self.s - 1] == self.n;
            }
        }
        false
    }

    fn round(&mut self, now: u64) {
        for stage in 0..self.s {
            let mut holders: Vec<usize> = (0..self.workers.len())
                .filter(|&w| self.workers[w].idle() && self.workers[w].resident == Some(stage))
                .collect();
            holders.sort_by(|&a, &b| self.workers[a].id.cmp(&self.workers[b].id));
            let pending: Vec<usize> = (0..self.n)
                .filter(|&i| self.slots[stage][i] == Slot::Pending)
                .collect();
            for (w, i) in holders.into_iter().zip(pending) {
                self.slots[stage][i] = Slot::Running;
                self.workers[w].busy = true;
                let d = self.cfg.workers[w].compute_for(stage);
                self.at(
                    now + d,
                    Done::Task {
                        worker: w,
                        stage,
                        input: i,
                    },
                );
            }
        }

        for stage in 0..self.s {
            if !(stage == 0 || self.loadable.contains(&stage))
                || !self.unfinished(stage)
                || self.holders(stage) > 0
            {
                continue;
            }
            let idle: Vec<usize> = (0..self.workers.len())
                .filter(|&w| self.workers[w].idle())
                .collect();
            if idle.is_empty() {
                continue;
            }
            let free: Vec<usize> = idle
                .iter()
                .copied()
                .filter(|&w| match self.workers[w].resident {
                    Some(r) => !(self.unfinished(r) && self.holders(r) == 1),
                    None => true,
                })
                .collect();
            let ready = self.slots[stage].contains(&Slot::Pending);
            let pool = if !free.is_empty() {
                free
            } else if ready {
                idle
            } else {
                continue;
            };
            let best = pool.iter().map(|&w| self.tier(w, stage)).min().unwrap();
            let tied: Vec<usize> = pool
                .into_iter()
                .filter(|&w| self.tier(w, stage) == best)
                .collect();
            let chosen = self.pick(&tied);
            self.start_load(now, chosen, stage);
        }
    }

    fn pick(&self, tied: &[usize]) -> usize {
        match self.cfg.strategy {
            RankingStrategy::Fifo => tied[0],
            RankingStrategy::EntropyWeightedSum => {
                let scores =
                    entropy_scores(&tied.iter().map(|&w| self.telemetry(w)).collect::<Vec<_>>());
                let mut best = 0;
                for i in 1..tied.len() {
                    let better = scores[i] > scores[best]
                        || (scores[i] == scores[best]
                            && self.workers[tied[i]].id < self.workers[tied[best]].id);
                    if better {
                        best = i;
                    }
                }
                tied[best]
            }
        }
    }

    fn telemetry(&self, w: usize) -> TelemetrySnapshot {
        self.cfg.workers[w]
            .telemetry
            .first()
            .cloned()
            .unwrap_or_default()
    }
}

/// Entropy-weighted scores over (cpu, ram, battery, rtt, temperature), with
/// cpu, rtt and temperature as costs.
fn entropy_scores(rows: &[TelemetrySnapshot]) -> Vec<f64> {
    let m = rows.len();
    if m < 2 {
        return vec![0.0; m];
    }
    let cols: [(Vec<f64>, bool); 5] = [
        (rows.iter().map(|t| t.cpu_load).collect(), false),
        (rows.iter().map(|t| t.ram_free_bytes as f64).collect(), true),
        (rows.iter().map(|t| t.battery_fraction).collect(), true),
        (rows.iter().map(|t| t.rtt_ms).collect(), false),
        (rows.iter().map(|t| t.temperature_c).collect(), false),
    ];
    let mut norm = Vec::new();
    let mut div = Vec::new();
    for (col, benefit) in &cols {
        let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: Vec<f64> = if hi == lo {
            vec![0.5; m]
        } else if *benefit {
            col.iter().map(|x| (x - lo) / (hi - lo)).collect()
        } else {
            col.iter().map(|x| (hi - x) / (hi - lo)).collect()
        };
        let d = if hi == lo {
            0.0
        } else {
            let total: f64 = z.iter().sum();
            let h: f64 = z
                .iter()
                .map(|&v| v / total)
                .filter(|&p| p > 0.0)
                .map(|p| p * p.ln())
                .sum();
            1.0 + h / (m as f64).ln()
        };
        norm.push(z);
        div.push(d);
    }
    let dsum: f64 = div.iter().sum();
    let w: Vec<f64> = if dsum == 0.0 {
        vec![0.2; 5]
    } else {
        div.iter().map(|d| d / dsum).collect()
    };
    (0..m)
        .map(|i| (0..5).map(|j| w[j] * norm[j][i]).sum())
        .collect()
}

/// What the oracle predicts for one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OraclePrediction {
    pub makespan_ms: u64,
    /// Load plans per tier, index 0 = tier 1.
    pub tier_hits: [u64; 4],
}

/// Makespan the harness must reproduce for a failure-free run with static
/// telemetry.
pub fn makespan_oracle(cfg: &FleetConfig, mode: ExecutionMode) -> Result<u64, SimError> {
    oracle_prediction(cfg, mode).map(|p| p.makespan_ms)
}

pub fn oracle_prediction(
    cfg: &FleetConfig,
    mode: ExecutionMode,
) -> Result<OraclePrediction, SimError> {
    cfg.validate()?;
    if !cfg.failures.is_empty() {
        return Err(SimError::UnsupportedConfig("failure injection".into()));
    }
    if !cfg.has_static_telemetry() {
        return Err(SimError::UnsupportedConfig("time-varying telemetry".into()));
    }
    let n = cfg.input_count;
    let s = cfg.stages.len();
    let mut slots = vec![vec![Slot::Blocked; n]; s];
    slots[0].fill(Slot::Pending);
    let workers = cfg
        .workers
        .iter()
        .map(|w| {
            let mut cached: BTreeSet<usize> = w.preload_cached.iter().copied().collect();
            cached.extend(w.preload_resident);
            OWorker {
                id: w.id.clone(),
                resident: w.preload_resident,
                cached,
                loading: None,
                busy: false,
            }
        })
        .collect();
    let mut m = Model {
        cfg,
        mode,
        n,
        s,
        slots,
        done_per_stage: vec![0; s],
        loadable: BTreeSet::new(),
        workers,
        events: BTreeMap::new(),
        seq: 0,
        loads: [0; 4],
    };

    // Job creation: stage 0 goes to every worker, then the first round.
    for w in 0..m.workers.len() {
        m.start_load(0, w, 0);
    }
    m.round(0);

    while let Some((&(now, _), _)) = m.events.first_key_value() {
        if now > cfg.horizon_ms {
            break;
        }
        let later = m.events.split_off(&(now + 1, 0));
        let batch = std::mem::replace(&mut m.events, later);
        let mut finished = false;
        for d in batch.into_values() {
            finished |= m.apply(d);
        }
        if finished {
            return Ok(OraclePrediction {
                makespan_ms: now,
                tier_hits: m.loads,
            });
        }
        m.round(now);
    }
    Err(SimError::Stalled(cfg.horizon_ms))
}
