//! Discrete-event serving simulator.
//!
//! A logical clock advances over arrivals, step completions, scheduler ticks
//! and job retirements. Rollouts are interleaved events, never threads, and
//! candidates come from a keyed generator, so a run is a pure function of its
//! inputs: the same workload, config and seed reproduce every event.
//!
//! A generation request is priced when issued: its duration is the service
//! time of its longest candidate at the engine load seen at that moment, plus
//! the reward latency. Tokens are charged at issue too, so preempted work
//! still counts.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::backend::{service_time, BackendError, CostModel, StepCandidate, StepGenerator, StepRef};
use crate::beam::{BeamConfig, BeamError, BeamSearch};
use crate::metrics::{RequestExit, RequestRecord};
use crate::scalar::Scalar;
use crate::scheduler::{Action, Completion, Job, JobId, RolloutId, SchedulerConfig, SchedulerError, SchedulerState};
use crate::scoring::{decide_exit, ExitKind, ScoringConfig, ScoringError};
use crate::search_tree::{NodeId, RolloutStep, SearchTree, SelectionParams, TreeError, DEFAULT_DEPTH_CAP};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulator config: {0}")]
    InvalidConfig(String),
    #[error("event cap of {0} reached before all requests finished")]
    EventCapExceeded(u64),
    #[error("event at {event} precedes clock {clock}")]
    TimeRegression { event: f64, clock: f64 },
    #[error("{0}")]
    Stalled(String),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Beam(#[from] BeamError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    Mcts,
    Beam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalProcess {
    /// Exponential inter-arrival times.
    Poisson,
    /// One request every `1 / rate` seconds.
    Fixed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchConfig<T> {
    pub selection: SelectionParams<T>,
    pub rollout_budget: u32,
    /// Candidates generated per expansion.
    pub expand_width: usize,
    pub depth_cap: u32,
}

impl<T: Scalar> Default for SearchConfig<T> {
    fn default() -> Self {
        Self {
            selection: SelectionParams::default(),
            rollout_budget: 32,
            expand_width: 4,
            depth_cap: DEFAULT_DEPTH_CAP,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig<T> {
    pub system: SystemKind,
    pub search: SearchConfig<T>,
    pub scoring: ScoringConfig<T>,
    pub scheduler: SchedulerConfig,
    pub beam: BeamConfig,
    pub cost: CostModel,
    pub arrival: ArrivalProcess,
    pub event_cap: u64,
    /// Record a JSON Lines event trace.
    pub trace: bool,
}

impl<T: Scalar> Default for SimConfig<T> {
    fn default() -> Self {
        Self {
            system: SystemKind::Mcts,
            search: SearchConfig::default(),
            scoring: ScoringConfig::default(),
            scheduler: SchedulerConfig::default(),
            beam: BeamConfig::default(),
            cost: CostModel::default(),
            arrival: ArrivalProcess::Poisson,
            event_cap: 10_000_000,
            trace: false,
        }
    }
}

impl<T: Scalar> SimConfig<T> {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |e: String| SimError::InvalidConfig(e);
        self.scoring.validate().map_err(|e| bad(e.to_string()))?;
        self.scheduler.validate().map_err(|e| bad(e.to_string()))?;
        self.beam.validate().map_err(|e| bad(e.to_string()))?;
        self.cost.validate().map_err(|e| bad(e.to_string()))?;
        SelectionParams::new(self.search.selection.c_puct).map_err(|e| bad(e.to_string()))?;
        if self.search.rollout_budget == 0 {
            return Err(bad("rollout_budget must be at least 1".into()));
        }
        if self.search.expand_width == 0 {
            return Err(bad("expand_width must be at least 1".into()));
        }
        if self.search.depth_cap == 0 {
            return Err(bad("depth_cap must be at least 1".into()));
        }
        if self.event_cap == 0 {
            return Err(bad("event_cap must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventKind {
    Arrival { request: usize },
    StepComplete { job: JobId, rollout: RolloutId },
    BeamStepComplete { job: JobId },
    SchedulerTick,
    JobFinished { job: JobId },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event {
    pub time: f64,
    pub sequence: u64,
    pub kind: EventKind,
}

impl Eq for Event {}

impl Ord for Event {
    // reversed so that BinaryHeap pops the earliest (time, sequence)
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then(other.sequence.cmp(&self.sequence))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Arrival times for `count` requests at `rate` requests per second.
pub fn arrival_times(count: usize, rate: f64, process: ArrivalProcess, seed: u64) -> Result<Vec<f64>, SimError> {
    if !(rate > 0.0) || !rate.is_finite() {
        return Err(SimError::InvalidConfig(format!(
            "arrival rate must be positive, got {rate}"
        )));
    }
    Ok(match process {
        ArrivalProcess::Fixed => (0..count).map(|i| i as f64 / rate).collect(),
        ArrivalProcess::Poisson => {
            let exp = Exp::new(rate).map_err(|e| SimError::InvalidConfig(e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(0xA7);
            let mut t = 0.0;
            (0..count)
                .map(|_| {
                    t += exp.sample(&mut rng);
                    t
                })
                .collect()
        }
    })
}

/// Counters and invariant checks gathered over a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RunStats {
    pub events: u64,
    pub launched: u64,
    pub backpropagated: u64,
    pub preempted: u64,
    /// Largest total of in-flight rollouts seen after any event.
    pub max_active: usize,
    /// Events after which more than `M` rollouts were in flight.
    pub capacity_violations: u64,
    /// Events after which a job below the observation gate ran in parallel.
    pub gate_violations: u64,
    /// Events whose time was earlier than the clock.
    pub time_regressions: u64,
}

/// What a request's search produced, for replay comparisons.
#[derive(Clone, Debug, PartialEq)]
pub struct RequestOutcome {
    pub request: usize,
    /// Step handles of each completed rollout, in completion order.
    pub trajectories: Vec<Vec<StepRef>>,
    /// The highest-scoring trajectory.
    pub best: Option<Vec<StepRef>>,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    /// One record per request, in request order.
    pub records: Vec<RequestRecord>,
    pub outcomes: Vec<RequestOutcome>,
    /// Tokens charged by the engine, counted independently of the records.
    pub total_tokens: u64,
    pub stats: RunStats,
    /// JSON Lines, empty unless tracing was enabled.
    pub trace: Vec<String>,
}

/// A generation request issued for an MCTS rollout.
struct PendingStep<T> {
    job: JobId,
    /// `None` when the rollout reached a terminal without generating.
    candidates: Option<Vec<StepCandidate<T>>>,
    width: u64,
}

struct BeamJob<T> {
    search: BeamSearch<T>,
    pending: Option<(Vec<Vec<StepCandidate<T>>>, u64)>,
}

struct Finished {
    exit: RequestExit,
    best_score: f64,
    solved: bool,
    rollouts_completed: u32,
    rollouts_preempted: u32,
}

pub struct Simulator<'a, T, G> {
    config: &'a SimConfig<T>,
    workload: &'a [G],
    arrivals: Vec<f64>,
    clock: f64,
    sequence: u64,
    queue: BinaryHeap<Event>,
    engine_load: u64,
    tokens: Vec<u64>,
    total_tokens: u64,
    sched: SchedulerState<T>,
    pending_steps: BTreeMap<RolloutId, PendingStep<T>>,
    beam_pending: VecDeque<usize>,
    beam_jobs: BTreeMap<JobId, BeamJob<T>>,
    finished: BTreeMap<JobId, Finished>,
    tick_queued: bool,
    records: Vec<Option<RequestRecord>>,
    outcomes: Vec<RequestOutcome>,
    stats: RunStats,
    trace: Vec<String>,
}

/// Runs every request of `workload` to completion.
pub fn run<T: Scalar, G: StepGenerator<T>>(
    workload: &[G],
    arrival_rate: f64,
    config: &SimConfig<T>,
    seed: u64,
) -> Result<RunOutput, SimError> {
    let arrivals = arrival_times(workload.len(), arrival_rate, config.arrival, seed)?;
    run_with_arrivals(workload, &arrivals, config)
}

/// Like [`run`] with explicit arrival times (non-decreasing, one per request).
pub fn run_with_arrivals<T: Scalar, G: StepGenerator<T>>(
    workload: &[G],
    arrivals: &[f64],
    config: &SimConfig<T>,
) -> Result<RunOutput, SimError> {
    config.validate()?;
    if arrivals.len() != workload.len() {
        return Err(SimError::InvalidConfig(
            "one arrival time per request is required".into(),
        ));
    }
    let mut sim = Simulator::new(workload, arrivals.to_vec(), config);
    sim.run()?;
    sim.into_output()
}

impl<'a, T: Scalar, G: StepGenerator<T>> Simulator<'a, T, G> {
    fn new(workload: &'a [G], arrivals: Vec<f64>, config: &'a SimConfig<T>) -> Self {
        let n = workload.len();
        Self {
            config,
            workload,
            arrivals,
            clock: 0.0,
            sequence: 0,
            queue: BinaryHeap::new(),
            engine_load: 0,
            tokens: vec![0; n],
            total_tokens: 0,
            sched: SchedulerState::new(),
            pending_steps: BTreeMap::new(),
            beam_pending: VecDeque::new(),
            beam_jobs: BTreeMap::new(),
            finished: BTreeMap::new(),
            tick_queued: false,
            records: vec![None; n],
            outcomes: (0..n)
                .map(|request| RequestOutcome {
                    request,
                    trajectories: Vec::new(),
                    best: None,
                })
                .collect(),
            stats: RunStats::default(),
            trace: Vec::new(),
        }
    }

    fn push(&mut self, time: f64, kind: EventKind) {
        let sequence = self.sequence;
        self.sequence += 1;
        self.queue.push(Event { time, sequence, kind });
    }

    fn log(&mut self, value: serde_json::Value) {
        if self.config.trace {
            self.trace.push(value.to_string());
        }
    }

    fn run(&mut self) -> Result<(), SimError> {
        for i in 0..self.arrivals.len() {
            self.push(self.arrivals[i], EventKind::Arrival { request: i });
        }
        while let Some(ev) = self.queue.pop() {
            if self.stats.events >= self.config.event_cap {
                return Err(SimError::EventCapExceeded(self.config.event_cap));
            }
            self.stats.events += 1;
            if ev.time < self.clock {
                self.stats.time_regressions += 1;
                return Err(SimError::TimeRegression {
                    event: ev.time,
                    clock: self.clock,
                });
            }
            self.clock = ev.time;
            self.step_event(ev)?;
            self.check_invariants();
        }
        Ok(())
    }

    fn step_event(&mut self, ev: Event) -> Result<(), SimError> {
        match ev.kind {
            EventKind::Arrival { request } => {
                self.log(json!({"time": ev.time, "seq": ev.sequence, "kind": "arrival", "job": request}));
                match self.config.system {
                    SystemKind::Mcts => {
                        let root = self.workload[request].root_ref();
                        let tree = SearchTree::new(root, self.config.search.rollout_budget)?;
                        self.sched.enqueue(Job::new(request as JobId, ev.time, tree));
                        self.scheduler_pass()?;
                        self.ensure_tick();
                    }
                    SystemKind::Beam => {
                        self.beam_pending.push_back(request);
                        self.admit_beams()?;
                    }
                }
            }
            EventKind::StepComplete { job, rollout } => {
                let Some(step) = self.pending_steps.remove(&rollout) else {
                    // the rollout was preempted after this step was issued
                    return Ok(());
                };
                self.log(json!({"time": ev.time, "seq": ev.sequence, "kind": "step_complete", "job": job, "rollout": rollout}));
                self.engine_load -= step.width;
                self.continue_rollout(step.job, rollout, step.candidates)?;
            }
            EventKind::BeamStepComplete { job } => {
                self.log(json!({"time": ev.time, "seq": ev.sequence, "kind": "beam_step_complete", "job": job}));
                self.finish_beam_step(job)?;
            }
            EventKind::SchedulerTick => {
                self.tick_queued = false;
                self.log(json!({"time": ev.time, "seq": ev.sequence, "kind": "scheduler_tick"}));
                self.scheduler_pass()?;
                self.ensure_tick();
            }
            EventKind::JobFinished { job } => {
                self.log(json!({"time": ev.time, "seq": ev.sequence, "kind": "job_finished", "job": job}));
                self.write_record(job)?;
            }
        }
        Ok(())
    }

    fn ensure_tick(&mut self) {
        let busy = !self.sched.run_queue.is_empty() || !self.sched.pending.is_empty();
        if busy && !self.tick_queued {
            self.tick_queued = true;
            self.push(
                self.clock + self.config.scheduler.tick_interval,
                EventKind::SchedulerTick,
            );
        }
    }

    fn check_invariants(&mut self) {
        let active = self.sched.active_rollouts();
        self.stats.max_active = self.stats.max_active.max(active);
        if active > self.config.scheduler.max_concurrency {
            self.stats.capacity_violations += 1;
        }
        let gate = self.config.scheduler.obs_threshold;
        if self
            .sched
            .run_queue
            .iter()
            .any(|j| j.completed_rollouts < gate && j.active.len() > 1)
        {
            self.stats.gate_violations += 1;
        }
    }

    fn charge(&mut self, job: JobId, candidates: &[StepCandidate<T>]) -> u32 {
        let tokens: u64 = candidates.iter().map(|c| u64::from(c.token_count)).sum();
        self.tokens[job as usize] += tokens;
        self.total_tokens += tokens;
        candidates.iter().map(|c| c.token_count).max().unwrap_or(0)
    }

    fn issue_duration(&mut self, longest: u32, width: u64) -> f64 {
        self.engine_load += width;
        service_time(longest, &self.config.cost, self.engine_load) + self.config.cost.reward_latency
    }

    // ---- MCTS path ----

    fn scheduler_pass(&mut self) -> Result<(), SimError> {
        let cfg = &self.config.scheduler;
        self.sched.now = self.clock;
        self.sched.admit_jobs(cfg);
        if self.sched.run_queue.is_empty() {
            return Ok(());
        }
        let alloc = self
            .sched
            .compute_targets(cfg, self.config.scoring.positive_exit_threshold)?;
        for job in &mut self.sched.run_queue {
            job.target_parallelism = alloc.targets[&job.id];
        }
        let actions = self.sched.reconcile(&alloc.targets, self.config.scoring.scheme);
        if self.config.trace {
            for job in &self.sched.run_queue {
                let acts: Vec<String> = actions
                    .iter()
                    .filter_map(|a| match *a {
                        Action::Preempt { job: j, rollout } if j == job.id => Some(format!("preempt:{rollout}")),
                        Action::Launch { job: j } if j == job.id => Some("launch".to_string()),
                        _ => None,
                    })
                    .collect();
                let line = json!({
                    "time": self.clock,
                    "kind": "decision",
                    "job_id": job.id,
                    "S": alloc.scores[&job.id],
                    "target": alloc.targets[&job.id],
                    "action": acts,
                });
                self.trace.push(line.to_string());
            }
        }
        // free slots before filling them
        for action in &actions {
            if let Action::Preempt { job, rollout } = *action {
                self.preempt(job, rollout)?;
            }
        }
        for action in &actions {
            if let Action::Launch { job } = *action {
                if let Some(rollout) = self.sched.launch_rollout(job, &self.config.search.selection)? {
                    self.stats.launched += 1;
                    self.log(json!({"time": self.clock, "kind": "launch", "job": job, "rollout": rollout}));
                    self.advance_rollout(job, rollout, true)?;
                }
            }
        }
        // jobs whose tree ran out of leaves with nothing left in flight
        let stuck: Vec<JobId> = self
            .sched
            .run_queue
            .iter()
            .filter(|j| j.active.is_empty() && !j.tree.has_expandable_leaf())
            .map(|j| j.id)
            .collect();
        for job in stuck {
            let tree = &self.sched.job(job).expect("running job").tree;
            let kind = match decide_exit(tree, &self.config.scoring)?.kind {
                ExitKind::Continue => ExitKind::BudgetExhausted,
                k => k,
            };
            self.retire(job, kind)?;
        }
        Ok(())
    }

    fn preempt(&mut self, job: JobId, rollout: RolloutId) -> Result<(), SimError> {
        self.sched.preempt(job, rollout)?;
        if let Some(step) = self.pending_steps.remove(&rollout) {
            self.engine_load -= step.width;
        }
        self.stats.preempted += 1;
        self.log(json!({"time": self.clock, "kind": "preempt", "job": job, "rollout": rollout}));
        Ok(())
    }

    /// Applies generated candidates (if any) and walks the rollout forward until
    /// it needs a new generation or reaches a terminal node.
    fn continue_rollout(
        &mut self,
        job: JobId,
        rollout: RolloutId,
        candidates: Option<Vec<StepCandidate<T>>>,
    ) -> Result<(), SimError> {
        if let Some(cands) = candidates {
            let j = self.sched.job_mut(job)?;
            let slot = j
                .active
                .iter_mut()
                .find(|a| a.id == rollout)
                .ok_or(SchedulerError::UnknownRollout { job, rollout })?;
            slot.rollout.advance(&mut j.tree, &cands)?;
        }
        self.advance_rollout(job, rollout, false)
    }

    /// `deferred`: when the rollout is already terminal, complete it through a
    /// zero-delay event instead of inline (used while a scheduler pass runs).
    fn advance_rollout(&mut self, job: JobId, rollout: RolloutId, deferred: bool) -> Result<(), SimError> {
        let depth_cap = self.config.search.depth_cap;
        let width = self.config.search.expand_width;
        loop {
            let j = self.sched.job_mut(job)?;
            let slot = j
                .active
                .iter_mut()
                .find(|a| a.id == rollout)
                .ok_or(SchedulerError::UnknownRollout { job, rollout })?;
            match slot.rollout.next_step(&mut j.tree, depth_cap)? {
                RolloutStep::Finished => {
                    let terminal = slot.rollout.current();
                    if deferred {
                        self.pending_steps.insert(
                            rollout,
                            PendingStep {
                                job,
                                candidates: None,
                                width: 0,
                            },
                        );
                        self.push(self.clock, EventKind::StepComplete { job, rollout });
                        return Ok(());
                    }
                    return self.complete_rollout(job, rollout, terminal);
                }
                RolloutStep::Expand(node) if !j.tree.node(node).is_leaf() => {
                    // another rollout already expanded this node
                    slot.rollout.advance(&mut j.tree, &[])?;
                }
                RolloutStep::Expand(node) => {
                    let context = j.tree.context(node);
                    let cands = self.workload[job as usize].generate_steps(&context, width)?;
                    let longest = self.charge(job, &cands);
                    let duration = self.issue_duration(longest, width as u64);
                    self.pending_steps.insert(
                        rollout,
                        PendingStep {
                            job,
                            candidates: Some(cands),
                            width: width as u64,
                        },
                    );
                    self.push(self.clock + duration, EventKind::StepComplete { job, rollout });
                    return Ok(());
                }
            }
        }
    }

    fn complete_rollout(&mut self, job: JobId, rollout: RolloutId, terminal: NodeId) -> Result<(), SimError> {
        let scoring = &self.config.scoring;
        let j = self.sched.job_mut(job)?;
        let trajectory = j.tree.trajectory_to(terminal, scoring.scheme, j.completed_rollouts)?;
        let refs = j.tree.context(terminal);
        j.tree.backpropagate(trajectory)?;
        let decision = decide_exit(&j.tree, scoring)?;
        self.stats.backpropagated += 1;
        self.outcomes[job as usize].trajectories.push(refs);
        self.log(json!({"time": self.clock, "kind": "rollout_complete", "job": job, "rollout": rollout}));
        let completion = self.sched.on_rollout_complete(job, rollout, decision)?;
        self.settle(job, completion);
        self.scheduler_pass()
    }

    fn retire(&mut self, job: JobId, kind: ExitKind) -> Result<(), SimError> {
        let completion = self.sched.finish(job, kind)?;
        self.settle(job, completion);
        Ok(())
    }

    /// Releases the engine slots of rollouts cancelled by a job exit.
    fn settle(&mut self, job: JobId, completion: Completion<T>) {
        for victim in &completion.preempted {
            if let Some(step) = self.pending_steps.remove(&victim.id) {
                self.engine_load -= step.width;
            }
            self.stats.preempted += 1;
            self.log(json!({"time": self.clock, "kind": "preempt", "job": job, "rollout": victim.id}));
        }
        if let Some(done) = completion.finished {
            self.stash_finished(done);
        }
    }

    fn stash_finished(&mut self, job: Job<T>) {
        let exit = match job.state {
            crate::scheduler::JobState::Finished(ExitKind::PositiveExit) => RequestExit::Positive,
            crate::scheduler::JobState::Finished(ExitKind::NegativeExit) => RequestExit::Negative,
            _ => RequestExit::BudgetExhausted,
        };
        let best = job.tree.best_trajectory().map(|b| {
            let terminal = *b.node_path.last().expect("trajectories are non-empty");
            (b.aggregate_score.to_f64_lossy(), job.tree.context(terminal))
        });
        let gen = &self.workload[job.id as usize];
        let solved = best
            .as_ref()
            .and_then(|(_, refs)| refs.last())
            .is_some_and(|&last| gen.is_golden_terminal(last));
        self.outcomes[job.id as usize].best = best.as_ref().map(|(_, r)| r.clone());
        self.finished.insert(
            job.id,
            Finished {
                exit,
                best_score: best.map_or(0.0, |(s, _)| s),
                solved,
                rollouts_completed: job.completed_rollouts,
                rollouts_preempted: job.preempted_rollouts,
            },
        );
        self.push(self.clock, EventKind::JobFinished { job: job.id });
    }

    fn write_record(&mut self, job: JobId) -> Result<(), SimError> {
        let f = self
            .finished
            .remove(&job)
            .ok_or_else(|| SimError::Stalled(format!("job {job} finished twice")))?;
        let arrival = self.arrivals[job as usize];
        self.records[job as usize] = Some(RequestRecord {
            request_id: job,
            arrival_time: arrival,
            completion_time: self.clock,
            latency: self.clock - arrival,
            rollouts_completed: f.rollouts_completed,
            rollouts_preempted: f.rollouts_preempted,
            tokens_generated: self.tokens[job as usize],
            exit_kind: f.exit,
            best_score: f.best_score,
            solved: f.solved,
        });
        Ok(())
    }

    // ---- beam path ----

    fn admit_beams(&mut self) -> Result<(), SimError> {
        while self.beam_jobs.len() < self.config.scheduler.max_concurrency {
            let Some(request) = self.beam_pending.pop_front() else {
                break;
            };
            let search = BeamSearch::new(self.config.beam.clone())?;
            self.beam_jobs
                .insert(request as JobId, BeamJob { search, pending: None });
            self.issue_beam_step(request as JobId)?;
        }
        Ok(())
    }

    fn issue_beam_step(&mut self, job: JobId) -> Result<(), SimError> {
        let n = self.config.beam.candidates_per_beam;
        let contexts = self.beam_jobs[&job].search.requests();
        let generated = contexts
            .iter()
            .map(|ctx| self.workload[job as usize].generate_steps(ctx, n))
            .collect::<Result<Vec<_>, _>>()?;
        let longest = generated.iter().map(|c| self.charge(job, c)).max().unwrap_or(0);
        let width = (n * contexts.len()) as u64;
        let duration = self.issue_duration(longest, width);
        self.beam_jobs.get_mut(&job).expect("beam job").pending = Some((generated, width));
        self.push(self.clock + duration, EventKind::BeamStepComplete { job });
        Ok(())
    }

    fn finish_beam_step(&mut self, job: JobId) -> Result<(), SimError> {
        let bj = self.beam_jobs.get_mut(&job).expect("beam job");
        let (generated, width) = bj.pending.take().expect("beam step in flight");
        self.engine_load -= width;
        bj.search.apply(&generated, &self.config.scoring)?;
        if !bj.search.is_done() {
            return self.issue_beam_step(job);
        }
        let bj = self.beam_jobs.remove(&job).expect("beam job");
        let outcome = bj.search.outcome();
        let gen = &self.workload[job as usize];
        let solved = outcome.complete
            && outcome
                .best
                .as_ref()
                .and_then(|b| b.refs.last())
                .is_some_and(|&last| gen.is_golden_terminal(last));
        let out = &mut self.outcomes[job as usize];
        out.trajectories = bj.search.finished().iter().map(|t| t.refs.clone()).collect();
        out.best = outcome.best.as_ref().map(|b| b.refs.clone());
        let exit = if outcome.positive_exit {
            RequestExit::Positive
        } else {
            RequestExit::BeamFinished
        };
        self.finished.insert(
            job,
            Finished {
                exit,
                best_score: outcome.best.map_or(0.0, |b| b.score.to_f64_lossy()),
                solved,
                rollouts_completed: 0,
                rollouts_preempted: 0,
            },
        );
        self.push(self.clock, EventKind::JobFinished { job });
        self.admit_beams()
    }

    fn into_output(self) -> Result<RunOutput, SimError> {
        let unfinished = self.records.iter().filter(|r| r.is_none()).count();
        if unfinished > 0 {
            return Err(SimError::Stalled(format!("{unfinished} requests never finished")));
        }
        if self.engine_load != 0 || !self.pending_steps.is_empty() {
            return Err(SimError::Stalled("generation requests left in flight".into()));
        }
        Ok(RunOutput {
            records: self.records.into_iter().map(|r| r.expect("checked")).collect(),
            outcomes: self.outcomes,
            total_tokens: self.total_tokens,
            stats: self.stats,
            trace: self.trace,
        })
    }
}

/// Result of running one request with plain sequential MCTS.
#[derive(Clone, Debug, PartialEq)]
pub struct SerialOutcome {
    pub outcome: RequestOutcome,
    pub exit: ExitKind,
    pub rollouts: u32,
    pub tokens: u64,
    /// Time from `start` to the final decision.
    pub latency: f64,
}

/// One request searched alone, one rollout at a time, on an otherwise idle
/// engine. Time accumulates from `start` exactly as an event clock would.
pub fn run_serial_mcts<T: Scalar, G: StepGenerator<T>>(
    generator: &G,
    request: usize,
    start: f64,
    search: &SearchConfig<T>,
    scoring: &ScoringConfig<T>,
    cost: &CostModel,
) -> Result<SerialOutcome, SimError> {
    let mut tree = SearchTree::new(generator.root_ref(), search.rollout_budget)?;
    let mut outcome = RequestOutcome {
        request,
        trajectories: Vec::new(),
        best: None,
    };
    let mut clock = start;
    let mut tokens = 0u64;
    let exit = loop {
        if !tree.has_expandable_leaf() {
            break match decide_exit(&tree, scoring)?.kind {
                ExitKind::Continue => ExitKind::BudgetExhausted,
                k => k,
            };
        }
        let mut rollout = crate::search_tree::Rollout::launch(&mut tree, &search.selection)?;
        let terminal = loop {
            match rollout.next_step(&mut tree, search.depth_cap)? {
                RolloutStep::Finished => break rollout.current(),
                RolloutStep::Expand(node) => {
                    let cands = generator.generate_steps(&tree.context(node), search.expand_width)?;
                    tokens += cands.iter().map(|c| u64::from(c.token_count)).sum::<u64>();
                    let longest = cands.iter().map(|c| c.token_count).max().unwrap_or(0);
                    clock += service_time(longest, cost, search.expand_width as u64) + cost.reward_latency;
                    rollout.advance(&mut tree, &cands)?;
                }
            }
        };
        let trajectory = tree.trajectory_to(terminal, scoring.scheme, tree.completed_rollouts())?;
        outcome.trajectories.push(tree.context(terminal));
        tree.backpropagate(trajectory)?;
        let kind = decide_exit(&tree, scoring)?.kind;
        if kind != ExitKind::Continue {
            break kind;
        }
    };
    outcome.best = tree
        .best_trajectory()
        .map(|b| tree.context(*b.node_path.last().expect("non-empty")));
    Ok(SerialOutcome {
        outcome,
        exit,
        rollouts: tree.completed_rollouts(),
        tokens,
        latency: clock - start,
    })
}
