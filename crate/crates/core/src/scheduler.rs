//! Dynamic scheduling with boosting.
//!
//! Each pass runs three phases over the running queue:
//!
//! 1. admission: pending jobs enter in arrival order while fewer than `M` jobs run;
//! 2. allocation: jobs past the observation gate get a share of the global
//!    rollout budget `M` proportional to their parallelism-degree score, and
//!    the rounding residual goes to the highest scores first;
//! 3. reconciliation: jobs above target lose their lowest-reward in-flight
//!    rollouts, jobs below target launch new ones.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::scoring::{AggregationScheme, ExitDecision, ExitKind};
use crate::search_tree::{Rollout, SearchTree, SelectionParams, TreeError};

pub type JobId = u64;
pub type RolloutId = u64;

#[derive(Debug, Error, PartialEq)]
pub enum SchedulerError {
    #[error("invalid scheduler config: {0}")]
    InvalidConfig(&'static str),
    #[error("time {now} precedes arrival {arrival}")]
    NowBeforeArrival { now: f64, arrival: f64 },
    #[error("job {0} is not running")]
    UnknownJob(JobId),
    #[error("job {job} has no active rollout {rollout}")]
    UnknownRollout { job: JobId, rollout: RolloutId },
    #[error(transparent)]
    Tree(#[from] TreeError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerConfig {
    /// `M`: maximum running jobs and maximum in-flight rollouts overall.
    pub max_concurrency: usize,
    pub beta: f64,
    /// Fraction of the exit threshold above which a job is boosted.
    pub proximity: f64,
    /// Completed rollouts a job needs before it may run in parallel.
    pub obs_threshold: u32,
    pub boosting_enabled: bool,
    /// Seconds between periodic reallocation passes.
    pub tick_interval: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            max_concurrency: 16,
            beta: 2.0,
            proximity: 0.9,
            obs_threshold: 2,
            boosting_enabled: true,
            tick_interval: 0.05,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<(), SchedulerError> {
        if self.max_concurrency == 0 {
            return Err(SchedulerError::InvalidConfig("max_concurrency must be at least 1"));
        }
        if !(self.beta > 0.0) {
            return Err(SchedulerError::InvalidConfig("beta must be positive"));
        }
        if !(self.proximity > 0.0 && self.proximity < 1.0) {
            return Err(SchedulerError::InvalidConfig("proximity must lie in (0, 1)"));
        }
        if self.obs_threshold == 0 {
            return Err(SchedulerError::InvalidConfig("obs_threshold must be positive"));
        }
        if !(self.tick_interval > 0.0) {
            return Err(SchedulerError::InvalidConfig("tick_interval must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JobState {
    Pending,
    Running,
    Finished(ExitKind),
}

#[derive(Clone, Debug)]
pub struct ActiveRollout {
    pub id: RolloutId,
    pub rollout: Rollout,
}

/// One reasoning request and its tree search.
#[derive(Clone, Debug)]
pub struct Job<T> {
    pub id: JobId,
    pub arrival_time: f64,
    pub tree: SearchTree<T>,
    pub completed_rollouts: u32,
    pub preempted_rollouts: u32,
    pub best_score: T,
    pub target_parallelism: usize,
    pub active: Vec<ActiveRollout>,
    pub state: JobState,
}

impl<T: Scalar> Job<T> {
    pub fn new(id: JobId, arrival_time: f64, tree: SearchTree<T>) -> Self {
        Self {
            id,
            arrival_time,
            tree,
            completed_rollouts: 0,
            preempted_rollouts: 0,
            best_score: T::zero(),
            target_parallelism: 1,
            active: Vec::new(),
            state: JobState::Pending,
        }
    }

    /// Rollouts this job may still start without overrunning its budget.
    fn remaining_budget(&self) -> usize {
        self.tree.rollout_budget().saturating_sub(self.completed_rollouts) as usize
    }
}

/// `ln(1 + elapsed) + beta * [best / exit_threshold > proximity]`.
pub fn degree_score(elapsed: f64, best_score: f64, exit_threshold: f64, config: &SchedulerConfig) -> f64 {
    let progress = best_score / exit_threshold;
    let boost = if progress > config.proximity { config.beta } else { 0.0 };
    elapsed.ln_1p() + boost
}

pub fn parallelism_score<T: Scalar>(
    job: &Job<T>,
    now: f64,
    positive_exit_threshold: T,
    config: &SchedulerConfig,
) -> Result<f64, SchedulerError> {
    if now < job.arrival_time {
        return Err(SchedulerError::NowBeforeArrival {
            now,
            arrival: job.arrival_time,
        });
    }
    Ok(degree_score(
        now - job.arrival_time,
        job.best_score.to_f64_lossy(),
        positive_exit_threshold.to_f64_lossy(),
        config,
    ))
}

/// Phase 2 over plain vectors, indexed in arrival order.
///
/// `caps[i]` bounds job `i`'s target (its remaining rollout budget). Gated jobs
/// get one slot; the others get `max(1, floor(S_i / sum(S) * M))`, where the sum
/// spans gated jobs too. Any overshoot from the `max(1, ..)` floor is taken back
/// from the largest targets, then the residual is handed out one slot at a time
/// in descending score order, earlier arrival first on ties.
pub fn allocate(scores: &[f64], gated: &[bool], caps: &[usize], max_concurrency: usize) -> Vec<usize> {
    let n = scores.len();
    let total: f64 = scores.iter().sum();
    let mut targets: Vec<usize> = (0..n)
        .map(|i| {
            let share = if gated[i] || total <= 0.0 {
                1
            } else {
                ((scores[i] / total * max_concurrency as f64).floor() as usize).max(1)
            };
            share.min(caps[i].max(1))
        })
        .collect();

    let mut sum: usize = targets.iter().sum();
    while sum > max_concurrency {
        let victim = (0..n).filter(|&i| !gated[i] && targets[i] > 1).max_by(|&a, &b| {
            targets[a]
                .cmp(&targets[b])
                .then(scores[b].total_cmp(&scores[a]))
                .then(a.cmp(&b))
        });
        match victim {
            Some(i) => {
                targets[i] -= 1;
                sum -= 1;
            }
            None => break,
        }
    }

    let mut order: Vec<usize> = (0..n).filter(|&i| !gated[i]).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut residual = max_concurrency.saturating_sub(sum);
    while residual > 0 {
        let mut progressed = false;
        for &i in &order {
            if residual == 0 {
                break;
            }
            if targets[i] < caps[i] {
                targets[i] += 1;
                residual -= 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    targets
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Allocation {
    pub scores: BTreeMap<JobId, f64>,
    pub targets: BTreeMap<JobId, usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    Preempt { job: JobId, rollout: RolloutId },
    Launch { job: JobId },
}

/// What happened to a job when one of its rollouts completed.
#[derive(Debug)]
pub struct Completion<T> {
    /// Rollouts cancelled because the job exited.
    pub preempted: Vec<ActiveRollout>,
    /// The job, removed from the running queue, when it exited.
    pub finished: Option<Job<T>>,
}

#[derive(Clone, Debug)]
pub struct SchedulerState<T> {
    pub pending: VecDeque<Job<T>>,
    /// Running jobs in admission order.
    pub run_queue: Vec<Job<T>>,
    pub now: f64,
    next_rollout: RolloutId,
}

impl<T: Scalar> Default for SchedulerState<T> {
    fn default() -> Self {
        Self {
            pending: VecDeque::new(),
            run_queue: Vec::new(),
            now: 0.0,
            next_rollout: 0,
        }
    }
}

impl<T: Scalar> SchedulerState<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn enqueue(&mut self, job: Job<T>) {
        self.pending.push_back(job);
    }

    pub fn job(&self, id: JobId) -> Option<&Job<T>> {
        self.run_queue.iter().find(|j| j.id == id)
    }

    pub fn job_mut(&mut self, id: JobId) -> Result<&mut Job<T>, SchedulerError> {
        self.run_queue
            .iter_mut()
            .find(|j| j.id == id)
            .ok_or(SchedulerError::UnknownJob(id))
    }

    /// Total in-flight rollouts over the running queue.
    pub fn active_rollouts(&self) -> usize {
        self.run_queue.iter().map(|j| j.active.len()).sum()
    }

    /// Phase 1. Returns the ids of newly admitted jobs.
    pub fn admit_jobs(&mut self, config: &SchedulerConfig) -> Vec<JobId> {
        let mut admitted = Vec::new();
        while self.run_queue.len() < config.max_concurrency {
            let Some(mut job) = self.pending.pop_front() else {
                break;
            };
            job.state = JobState::Running;
            job.target_parallelism = 1;
            admitted.push(job.id);
            self.run_queue.push(job);
        }
        admitted
    }

    /// Phase 2.
    pub fn compute_targets(
        &self,
        config: &SchedulerConfig,
        positive_exit_threshold: T,
    ) -> Result<Allocation, SchedulerError> {
        let mut scores = Vec::with_capacity(self.run_queue.len());
        for job in &self.run_queue {
            scores.push(parallelism_score(job, self.now, positive_exit_threshold, config)?);
        }
        let caps: Vec<usize> = self.run_queue.iter().map(Job::remaining_budget).collect();
        let targets = if config.boosting_enabled {
            let gated: Vec<bool> = self
                .run_queue
                .iter()
                .map(|j| j.completed_rollouts < config.obs_threshold)
                .collect();
            allocate(&scores, &gated, &caps, config.max_concurrency)
        } else {
            vec![1; caps.len()]
        };
        let ids = self.run_queue.iter().map(|j| j.id);
        Ok(Allocation {
            scores: ids.clone().zip(scores).collect(),
            targets: ids.zip(targets).collect(),
        })
    }

    /// Phase 3: the preemptions and launches that bring every job to its target.
    /// Victims are the in-flight rollouts with the lowest prefix score; among
    /// equal scores the most recently launched goes first.
    pub fn reconcile(&self, targets: &BTreeMap<JobId, usize>, scheme: AggregationScheme) -> Vec<Action> {
        let mut actions = Vec::new();
        for job in &self.run_queue {
            let target = targets.get(&job.id).copied().unwrap_or(1);
            let active = job.active.len();
            if active > target {
                let mut ranked: Vec<(T, RolloutId)> = job
                    .active
                    .iter()
                    .map(|a| (a.rollout.prefix_score(&job.tree, scheme), a.id))
                    .collect();
                ranked.sort_by(|a, b| {
                    a.0.partial_cmp(&b.0)
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then(b.1.cmp(&a.1))
                });
                actions.extend(ranked.into_iter().take(active - target).map(|(_, id)| Action::Preempt {
                    job: job.id,
                    rollout: id,
                }));
            } else {
                actions.extend((active..target).map(|_| Action::Launch { job: job.id }));
            }
        }
        actions
    }

    /// Cancels one in-flight rollout and releases its unobserved counts.
    pub fn preempt(&mut self, job: JobId, rollout: RolloutId) -> Result<ActiveRollout, SchedulerError> {
        let j = self.job_mut(job)?;
        let pos = j
            .active
            .iter()
            .position(|a| a.id == rollout)
            .ok_or(SchedulerError::UnknownRollout { job, rollout })?;
        let victim = j.active.remove(pos);
        j.tree.cancel_inflight(victim.rollout.path())?;
        j.preempted_rollouts += 1;
        Ok(victim)
    }

    /// Starts a rollout with WU-PUCT selection. `Ok(None)` when the tree has no
    /// expandable leaf left.
    pub fn launch_rollout(
        &mut self,
        job: JobId,
        params: &SelectionParams<T>,
    ) -> Result<Option<RolloutId>, SchedulerError> {
        let id = self.next_rollout;
        let j = self.job_mut(job)?;
        match Rollout::launch(&mut j.tree, params) {
            Ok(rollout) => {
                j.active.push(ActiveRollout { id, rollout });
                self.next_rollout += 1;
                Ok(Some(id))
            }
            Err(TreeError::NoExpandableLeaf) => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Removes a finished job from the running queue.
    pub fn finish(&mut self, job: JobId, kind: ExitKind) -> Result<Completion<T>, SchedulerError> {
        let ids: Vec<RolloutId> = self.job_mut(job)?.active.iter().map(|a| a.id).collect();
        let mut preempted = Vec::with_capacity(ids.len());
        for id in ids {
            preempted.push(self.preempt(job, id)?);
        }
        let pos = self.run_queue.iter().position(|j| j.id == job).expect("job present");
        let mut done = self.run_queue.remove(pos);
        done.state = JobState::Finished(kind);
        done.target_parallelism = 0;
        Ok(Completion {
            preempted,
            finished: Some(done),
        })
    }

    /// Bookkeeping after a rollout's trajectory was backpropagated: drops it
    /// from the active set, refreshes counters, and retires the job on any exit.
    pub fn on_rollout_complete(
        &mut self,
        job: JobId,
        rollout: RolloutId,
        decision: ExitDecision<T>,
    ) -> Result<Completion<T>, SchedulerError> {
        let j = self.job_mut(job)?;
        let pos = j
            .active
            .iter()
            .position(|a| a.id == rollout)
            .ok_or(SchedulerError::UnknownRollout { job, rollout })?;
        j.active.remove(pos);
        j.completed_rollouts = j.tree.completed_rollouts();
        j.best_score = j.best_score.max(decision.best_score);
        match decision.kind {
            ExitKind::Continue => Ok(Completion {
                preempted: Vec::new(),
                finished: None,
            }),
            kind => self.finish(job, kind),
        }
    }
}
