//! Per-job task graph: N inputs × S stages, wired 1:1 (streaming) or 1:N (barrier).
//!
//! Task ids are `stage * N + input`, so for N=5, S=3 stage 0 owns t0-t4,
//! stage 1 owns t5-t9 and stage 2 owns t10-t14.

use thiserror::Error;

use crate::model::{ExecutionMode, TaskId, TaskRecord, TaskState, ValidatedPipeline, WorkerId};
use crate::transport::PayloadRouting;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("unknown task {0}")]
    UnknownTask(TaskId),
    #[error("task {task} is {state:?}, cannot {action}")]
    InvalidState {
        task: TaskId,
        state: TaskState,
        action: &'static str,
    },
    #[error("task {task}: output shape {actual:?} does not match stage shape {expected:?}")]
    ShapeMismatch {
        task: TaskId,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskGraph {
    mode: ExecutionMode,
    inputs: usize,
    stages: usize,
    tasks: Vec<TaskRecord>,
    reverse_deps: Vec<Vec<TaskId>>,
    outputs: Vec<Option<PayloadRouting>>,
    output_shapes: Vec<Vec<usize>>,
    completed_per_stage: Vec<usize>,
}

pub fn task_id(stage: usize, input: usize, inputs: usize) -> TaskId {
    stage * inputs + input
}

pub fn materialize_tasks(pipeline: &ValidatedPipeline) -> TaskGraph {
    let spec = pipeline.spec();
    let n = spec.input_count;
    let s = spec.stage_count();
    let mode = spec.execution_mode;

    let mut tasks = Vec::with_capacity(n * s);
    for stage in 0..s {
        for input in 0..n {
            let dependency_ids: Vec<TaskId> = match (stage, mode) {
                (0, _) => Vec::new(),
                (_, ExecutionMode::Streaming) => vec![task_id(stage - 1, input, n)],
                (_, ExecutionMode::Barrier) => (0..n).map(|i| task_id(stage - 1, i, n)).collect(),
            };
            let deps = dependency_ids.len();
            tasks.push(TaskRecord {
                task_id: task_id(stage, input, n),
                stage_index: stage,
                input_index: input,
                state: if deps == 0 {
                    TaskState::Pending
                } else {
                    TaskState::Blocked
                },
                deps_remaining: deps,
                dependency_ids,
                input_payload: None,
                assigned_worker: None,
                attempt_count: 0,
            });
        }
    }

    let mut reverse_deps = vec![Vec::new(); tasks.len()];
    for t in &tasks {
        for &d in &t.dependency_ids {
            reverse_deps[d].push(t.task_id);
        }
    }

    TaskGraph {
        mode,
        inputs: n,
        stages: s,
        outputs: vec![None; tasks.len()],
        tasks,
        reverse_deps,
        output_shapes: spec.stages.iter().map(|m| m.output_shape.clone()).collect(),
        completed_per_stage: vec![0; s],
    }
}

impl TaskGraph {
    pub fn mode(&self) -> ExecutionMode {
        self.mode
    }

    pub fn input_count(&self) -> usize {
        self.inputs
    }

    pub fn stage_count(&self) -> usize {
        self.stages
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn task(&self, id: TaskId) -> Result<&TaskRecord, GraphError> {
        self.tasks.get(id).ok_or(GraphError::UnknownTask(id))
    }

    pub fn tasks(&self) -> &[TaskRecord] {
        &self.tasks
    }

    pub fn dependents(&self, id: TaskId) -> &[TaskId] {
        &self.reverse_deps[id]
    }

    pub fn completed_in_stage(&self, stage: usize) -> usize {
        self.completed_per_stage[stage]
    }

    pub fn output(&self, id: TaskId) -> Option<&PayloadRouting> {
        self.outputs.get(id).and_then(Option::as_ref)
    }

    pub fn stage_output_shape(&self, stage: usize) -> &[usize] {
        &self.output_shapes[stage]
    }

    pub fn is_complete(&self) -> bool {
        self.completed_per_stage.iter().sum::<usize>() == self.tasks.len()
    }

    /// Tasks in stage `stage` that have not completed yet.
    pub fn unfinished_in_stage(&self, stage: usize) -> usize {
        self.inputs - self.completed_per_stage[stage]
    }

    pub fn pending_in_stage(&self, stage: usize) -> usize {
        self.tasks
            .iter()
            .filter(|t| t.stage_index == stage && t.state == TaskState::Pending)
            .count()
    }

    pub fn pending_tasks(&self) -> Vec<&TaskRecord> {
        self.tasks
            .iter()
            .filter(|t| t.state == TaskState::Pending)
            .collect()
    }

    /// Attaches the job input for a stage-0 task.
    pub fn set_input(&mut self, id: TaskId, payload: PayloadRouting) -> Result<(), GraphError> {
        let t = self.tasks.get_mut(id).ok_or(GraphError::UnknownTask(id))?;
        t.input_payload = Some(payload);
        Ok(())
    }

    pub fn dispatch(&mut self, id: TaskId, worker: WorkerId) -> Result<(), GraphError> {
        let t = self.tasks.get_mut(id).ok_or(GraphError::UnknownTask(id))?;
        if t.state != TaskState::Pending {
            return Err(GraphError::InvalidState {
                task: id,
                state: t.state,
                action: "dispatch",
            });
        }
        t.state = TaskState::Dispatched;
        t.assigned_worker = Some(worker);
        Ok(())
    }

    pub fn mark_running(&mut self, id: TaskId) -> Result<(), GraphError> {
        let t = self.tasks.get_mut(id).ok_or(GraphError::UnknownTask(id))?;
        if t.state != TaskState::Dispatched {
            return Err(GraphError::InvalidState {
                task: id,
                state: t.state,
                action: "start",
            });
        }
        t.state = TaskState::Running;
        Ok(())
    }

    /// Marks `id` complete and unlocks dependents. Each unlocked task receives the
    /// output of its same-input predecessor; in barrier mode the barrier only
    /// gates timing. Returns newly pending ids in ascending order.
    pub fn complete_task(
        &mut self,
        id: TaskId,
        output: PayloadRouting,
        output_shape: &[usize],
    ) -> Result<Vec<TaskId>, GraphError> {
        let t = self.tasks.get(id).ok_or(GraphError::UnknownTask(id))?;
        if !matches!(t.state, TaskState::Dispatched | TaskState::Running) {
            return Err(GraphError::InvalidState {
                task: id,
                state: t.state,
                action: "complete",
            });
        }
        let stage = t.stage_index;
        if self.output_shapes[stage] != output_shape {
            return Err(GraphError::ShapeMismatch {
                task: id,
                expected: self.output_shapes[stage].clone(),
                actual: output_shape.to_vec(),
            });
        }

        self.tasks[id].state = TaskState::Complete;
        self.outputs[id] = Some(output);
        self.completed_per_stage[stage] += 1;

        let mut unlocked = Vec::new();
        for &dep in &self.reverse_deps[id] {
            let d = &mut self.tasks[dep];
            d.deps_remaining -= 1;
            if d.deps_remaining == 0 {
                d.state = TaskState::Pending;
                unlocked.push(dep);
            }
        }
        for &dep in &unlocked {
            let input = self.tasks[dep].input_index;
            let upstream = task_id(stage, input, self.inputs);
            self.tasks[dep].input_payload = self.outputs[upstream].clone();
        }
        unlocked.sort_unstable();
        Ok(unlocked)
    }

    /// Returns a dispatched or running task to pending. Its input payload is kept.
    pub fn fail_task(&mut self, id: TaskId) -> Result<&TaskRecord, GraphError> {
        let t = self.tasks.get_mut(id).ok_or(GraphError::UnknownTask(id))?;
        if !matches!(t.state, TaskState::Dispatched | TaskState::Running) {
            return Err(GraphError::InvalidState {
                task: id,
                state: t.state,
                action: "fail",
            });
        }
        t.state = TaskState::Pending;
        t.assigned_worker = None;
        t.attempt_count += 1;
        Ok(t)
    }

    /// Marks every unfinished task failed; used when a job is abandoned.
    pub fn abort(&mut self) {
        for t in &mut self.tasks {
            if t.state != TaskState::Complete {
                t.state = TaskState::Failed;
                t.assigned_worker = None;
            }
        }
    }

    /// Sink outputs by input index, once available.
    pub fn sink_outputs(&self) -> Vec<Option<&PayloadRouting>> {
        let last = self.stages - 1;
        (0..self.inputs)
            .map(|i| self.output(task_id(last, i, self.inputs)))
            .collect()
    }

    /// Checks the structural invariants; returns a description of the first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        for t in &self.tasks {
            let open = t
                .dependency_ids
                .iter()
                .filter(|&&d| self.tasks[d].state != TaskState::Complete)
                .count();
            if t.deps_remaining != open {
                return Err(format!(
                    "t{}: deps_remaining {} != {}",
                    t.task_id, t.deps_remaining, open
                ));
            }
            if (t.state == TaskState::Blocked) != (t.deps_remaining > 0) {
                return Err(format!("t{}: blocked/deps mismatch", t.task_id));
            }
            if t.stage_index == 0 && !t.dependency_ids.is_empty() {
                return Err(format!("t{}: stage-0 task with dependencies", t.task_id));
            }
            for &d in &t.dependency_ids {
                if !self.reverse_deps[d].contains(&t.task_id) {
                    return Err(format!("reverse_deps missing t{} -> t{}", d, t.task_id));
                }
            }
        }
        let reverse_edges: usize = self.reverse_deps.iter().map(Vec::len).sum();
        let forward_edges: usize = self.tasks.iter().map(|t| t.dependency_ids.len()).sum();
        if reverse_edges != forward_edges {
            return Err("reverse_deps is not the transpose".into());
        }
        let complete = self
            .tasks
            .iter()
            .filter(|t| t.state == TaskState::Complete)
            .count();
        if self.completed_per_stage.iter().sum::<usize>() != complete {
            return Err("completed counters disagree with task states".into());
        }
        Ok(())
    }
}
