//! Reference implementations shared by the integration tests and the
//! acceptance runner. Nothing here calls into the crate's scoring or
//! scheduling logic; the oracles recompute everything from raw rewards.

#![allow(dead_code)]

use std::collections::BTreeMap;

use adaptive_mcts::backend::{StepCandidate, StepRef};
use adaptive_mcts::scheduler::{Action, Job, JobId, SchedulerConfig, SchedulerState};
use adaptive_mcts::search_tree::{NodeId, SearchTree, SelectionParams};
use adaptive_mcts::AggregationScheme;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Plain PUCT written out directly: `q + c * p * sqrt(N) / (1 + N_a)`.
pub fn puct(q: f64, prior: f64, parent_visits: u32, child_visits: u32, c: f64) -> f64 {
    q + c * prior * f64::from(parent_visits).sqrt() / (1.0 + f64::from(child_visits))
}

pub fn aggregate(rewards: &[f64], scheme: AggregationScheme) -> f64 {
    match scheme {
        AggregationScheme::Minimum => rewards.iter().fold(1.0, |a: f64, &r| a.min(r)),
        AggregationScheme::CumulativeProduct => rewards.iter().product(),
        AggregationScheme::CumulativeSum => rewards.iter().sum(),
        AggregationScheme::Average => rewards.iter().sum::<f64>() / rewards.len() as f64,
    }
}

#[derive(Clone, Debug)]
pub struct HiddenNode {
    pub reward: f64,
    pub terminal: bool,
    pub children: Vec<usize>,
}

/// A fully materialized reasoning tree. Index 0 is the root.
#[derive(Clone, Debug)]
pub struct HiddenTree {
    pub nodes: Vec<HiddenNode>,
}

impl HiddenTree {
    /// Random tree of depth at most `max_depth` where every node below the root
    /// has a reward in `[0, reward_hi]`. Steps at `max_depth` are terminal.
    pub fn random(rng: &mut ChaCha8Rng, max_depth: u32, max_branching: usize, reward_hi: f64) -> Self {
        let mut tree = Self {
            nodes: vec![HiddenNode {
                reward: 1.0,
                terminal: false,
                children: Vec::new(),
            }],
        };
        let mut frontier = vec![(0usize, 0u32)];
        while let Some((id, depth)) = frontier.pop() {
            let branching = rng.random_range(1..=max_branching);
            for _ in 0..branching {
                let child_depth = depth + 1;
                let terminal = child_depth >= max_depth || rng.random_bool(0.3);
                let child = tree.nodes.len();
                tree.nodes.push(HiddenNode {
                    reward: rng.random_range(0.0..=reward_hi),
                    terminal,
                    children: Vec::new(),
                });
                tree.nodes[id].children.push(child);
                if !terminal {
                    frontier.push((child, child_depth));
                }
            }
        }
        tree
    }

    pub fn candidates(&self, id: usize) -> Vec<StepCandidate<f64>> {
        let kids = &self.nodes[id].children;
        kids.iter()
            .map(|&c| StepCandidate {
                step_ref: StepRef(c as u64),
                token_count: 1,
                prior: 1.0 / kids.len() as f64,
                prm_reward: self.nodes[c].reward,
                is_terminal: self.nodes[c].terminal,
            })
            .collect()
    }

    /// Reward sequences of every root-to-terminal completion through `id`,
    /// each prefixed with `prefix`.
    pub fn completions(&self, id: usize, prefix: &[f64]) -> Vec<Vec<f64>> {
        let node = &self.nodes[id];
        if node.terminal {
            return vec![prefix.to_vec()];
        }
        node.children
            .iter()
            .flat_map(|&c| {
                let mut p = prefix.to_vec();
                p.push(self.nodes[c].reward);
                self.completions(c, &p)
            })
            .collect()
    }
}

/// A search tree grown by expanding `expansions` random open leaves with their
/// full hidden child sets. `map[node id]` is the matching hidden index.
pub fn grow_partial(hidden: &HiddenTree, rng: &mut ChaCha8Rng, expansions: usize) -> (SearchTree<f64>, Vec<usize>) {
    let mut tree = SearchTree::new(StepRef(0), 1_000).expect("tree");
    let mut map = vec![0usize];
    for _ in 0..expansions {
        let open: Vec<NodeId> = tree.expandable_leaves().map(|n| n.id).collect();
        let Some(&leaf) = open.choose(rng) else { break };
        let ids = tree
            .expand(leaf, &hidden.candidates(map[leaf.index()]))
            .expect("expand");
        for (id, &h) in ids.iter().zip(&hidden.nodes[map[leaf.index()]].children) {
            assert_eq!(id.index(), map.len());
            map.push(h);
        }
    }
    (tree, map)
}

/// Rewards from the first step down to `id`, read from the hidden tree.
pub fn hidden_prefix(tree: &SearchTree<f64>, map: &[usize], hidden: &HiddenTree, id: NodeId) -> Vec<f64> {
    tree.path_from_root(id)
        .iter()
        .skip(1)
        .map(|n| hidden.nodes[map[n.index()]].reward)
        .collect()
}

/// Number of completions reachable from open leaves whose aggregate is at
/// least `tau`.
pub fn reachable_above(
    tree: &SearchTree<f64>,
    map: &[usize],
    hidden: &HiddenTree,
    scheme: AggregationScheme,
    tau: f64,
) -> usize {
    tree.expandable_leaves()
        .map(|leaf| {
            let prefix = hidden_prefix(tree, map, hidden, leaf.id);
            hidden
                .completions(map[leaf.id.index()], &prefix)
                .iter()
                .filter(|c| aggregate(c, scheme) >= tau)
                .count()
        })
        .sum()
}

/// A scheduler with a few running jobs, each holding several in-flight
/// rollouts, plus the rewards assigned to every generated step.
pub struct ReconcileCase {
    pub state: SchedulerState<f64>,
    pub targets: BTreeMap<JobId, usize>,
    pub scheme: AggregationScheme,
    pub rewards: BTreeMap<(JobId, u32), f64>,
}

pub fn reconcile_case(rng: &mut ChaCha8Rng) -> ReconcileCase {
    let scheme = *[
        AggregationScheme::Minimum,
        AggregationScheme::CumulativeProduct,
        AggregationScheme::CumulativeSum,
        AggregationScheme::Average,
    ]
    .choose(rng)
    .unwrap();
    let config = SchedulerConfig::default();
    let params = SelectionParams::new(1.0).unwrap();
    let mut state = SchedulerState::new();
    let mut rewards = BTreeMap::new();
    let jobs = rng.random_range(1..=3u64);
    for job in 0..jobs {
        let mut tree = SearchTree::new(StepRef(job), 64).unwrap();
        let mut next = 1u64;
        let mut cands = |rng: &mut ChaCha8Rng, n: usize| -> Vec<StepCandidate<f64>> {
            (0..n)
                .map(|_| {
                    next += 1;
                    StepCandidate {
                        step_ref: StepRef(next),
                        token_count: 1,
                        prior: rng.random_range(0.05..1.0),
                        // a coarse grid so equal prefix scores actually occur
                        prm_reward: f64::from(rng.random_range(0..=4u32)) / 4.0,
                        is_terminal: false,
                    }
                })
                .collect()
        };
        let width = rng.random_range(2..=4);
        let first = cands(rng, width);
        let kids = tree.expand(tree.root_id(), &first).unwrap();
        for &k in &kids {
            if rng.random_bool(0.5) {
                let n = rng.random_range(1..=3);
                let c = cands(rng, n);
                tree.expand(k, &c).unwrap();
            }
        }
        for n in tree.nodes() {
            if n.id != tree.root_id() {
                rewards.insert((job, n.id.0), n.prm_reward);
            }
        }
        state.enqueue(Job::new(job, 0.0, tree));
    }
    state.admit_jobs(&config);
    let mut targets = BTreeMap::new();
    for job in 0..jobs {
        let launches = rng.random_range(1..=6);
        for _ in 0..launches {
            state.launch_rollout(job, &params).unwrap();
        }
        targets.insert(job, rng.random_range(0..=launches + 2));
    }
    ReconcileCase {
        state,
        targets,
        scheme,
        rewards,
    }
}

/// The expected reconcile output: per job, in queue order, either the
/// `A - P` victims with the lowest prefix score (newest first among equals)
/// or `P - A` launches.
pub fn expected_actions(case: &ReconcileCase) -> Vec<Action> {
    let mut out = Vec::new();
    for job in &case.state.run_queue {
        let target = case.targets[&job.id];
        let mut scored: Vec<(f64, u64)> = job
            .active
            .iter()
            .map(|a| {
                let rewards: Vec<f64> = a.rollout.path()[1..]
                    .iter()
                    .map(|n| case.rewards[&(job.id, n.0)])
                    .collect();
                (aggregate(&rewards, case.scheme), a.id)
            })
            .collect();
        scored.sort_by(|x, y| x.0.total_cmp(&y.0).then(y.1.cmp(&x.1)));
        let active = scored.len();
        if active > target {
            out.extend(scored[..active - target].iter().map(|&(_, id)| Action::Preempt {
                job: job.id,
                rollout: id,
            }));
        } else {
            out.extend((active..target).map(|_| Action::Launch { job: job.id }));
        }
    }
    out
}

#[derive(Debug, Default, PartialEq)]
pub struct TraceAudit {
    pub events: usize,
    pub max_active: usize,
    pub capacity_violations: usize,
    pub gate_violations: usize,
    pub launches: usize,
}

/// Rebuilds per-job in-flight and completed rollout counts from the event
/// trace and checks both invariants at every event boundary.
pub fn audit_trace(lines: &[String], max_concurrency: usize, obs_threshold: u32) -> TraceAudit {
    let mut audit = TraceAudit::default();
    let mut active: BTreeMap<u64, usize> = BTreeMap::new();
    let mut completed: BTreeMap<u64, u32> = BTreeMap::new();
    let check = |audit: &mut TraceAudit, active: &BTreeMap<u64, usize>, completed: &BTreeMap<u64, u32>| {
        let total: usize = active.values().sum();
        audit.max_active = audit.max_active.max(total);
        if total > max_concurrency {
            audit.capacity_violations += 1;
        }
        if active
            .iter()
            .any(|(job, &a)| a > 1 && completed.get(job).copied().unwrap_or(0) < obs_threshold)
        {
            audit.gate_violations += 1;
        }
    };
    for line in lines {
        let v: serde_json::Value = serde_json::from_str(line).expect("trace line is JSON");
        if v.get("seq").is_some() {
            check(&mut audit, &active, &completed);
            audit.events += 1;
        }
        let job = || v["job"].as_u64().expect("job id");
        match v["kind"].as_str().expect("kind") {
            "launch" => {
                *active.entry(job()).or_default() += 1;
                audit.launches += 1;
            }
            "rollout_complete" => {
                *active.get_mut(&job()).expect("completed rollout was launched") -= 1;
                *completed.entry(job()).or_default() += 1;
            }
            "preempt" => *active.get_mut(&job()).expect("preempted rollout was launched") -= 1,
            _ => {}
        }
    }
    check(&mut audit, &active, &completed);
    audit
}
