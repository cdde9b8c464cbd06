//! Node-reusing MCTS with WU-PUCT selection.
//!
//! Every rollout walks selection, expansion, greedy simulation and
//! backpropagation. Nodes created during simulation stay in the tree, and the
//! unobserved count `O` of each node records how many launched rollouts still
//! pass through it. Selection adds `O` to the visit counts so that concurrent
//! rollouts spread over the tree.

use serde::Serialize;
use thiserror::Error;

use crate::backend::{BackendError, StepCandidate, StepGenerator, StepRef};
use crate::scalar::Scalar;
use crate::scoring::{aggregate_trajectory, AggregationScheme, ScoringError};

/// Default maximum trajectory depth.
pub const DEFAULT_DEPTH_CAP: u32 = 16;

#[derive(Debug, Error, PartialEq)]
pub enum TreeError {
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
    #[error("no expandable leaf left in the tree")]
    NoExpandableLeaf,
    #[error("structural error: {0}")]
    Structural(&'static str),
    #[error("in-flight count underflow at node {0}")]
    InflightUnderflow(NodeId),
    #[error("rollout budget of {0} already consumed")]
    BudgetExceeded(u32),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// One reasoning step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepNode<T> {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    pub step_ref: StepRef,
    pub prm_reward: T,
    pub prior: T,
    /// `N`: completed rollouts through this node.
    pub visit_count: u32,
    /// `O`: launched, not yet completed rollouts through this node.
    pub inflight_count: u32,
    /// `W`: sum of backpropagated trajectory scores.
    pub value_sum: T,
    pub is_terminal: bool,
    /// Set when the depth cap, not the generator, ended the trajectory here.
    pub force_terminated: bool,
    pub depth: u32,
    pub children: Vec<NodeId>,
    /// Non-terminal leaves in this subtree.
    open_leaves: u32,
}

impl<T: Scalar> StepNode<T> {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    pub fn is_expandable(&self) -> bool {
        self.is_leaf() && !self.is_terminal
    }

    pub fn mean_value(&self) -> Option<T> {
        (self.visit_count > 0).then(|| self.value_sum / T::from_u32(self.visit_count).unwrap())
    }
}

/// A root-to-terminal path and its aggregate score.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<T> {
    /// From the root's child down to the terminal node.
    pub node_path: Vec<NodeId>,
    pub aggregate_score: T,
    pub rollout_index: u32,
    pub force_terminated: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelectionParams<T> {
    pub c_puct: T,
}

impl<T: Scalar> SelectionParams<T> {
    pub fn new(c_puct: T) -> Result<Self, TreeError> {
        if !(c_puct > T::zero()) || !c_puct.is_finite() {
            return Err(TreeError::InvalidArgument("c_puct must be positive"));
        }
        Ok(Self { c_puct })
    }
}

impl<T: Scalar> Default for SelectionParams<T> {
    fn default() -> Self {
        Self { c_puct: T::one() }
    }
}

/// `Q + c * P * sqrt(N(s) + O(s)) / (1 + N(s,a) + O(s,a))`.
///
/// With both unobserved counts at zero this is bit-for-bit the plain PUCT
/// score, since the integer sums are exact before conversion.
pub fn wu_puct_score<T: Scalar>(
    q_value: T,
    prior: T,
    parent_visits: u32,
    parent_inflight: u32,
    child_visits: u32,
    child_inflight: u32,
    params: &SelectionParams<T>,
) -> Result<T, TreeError> {
    if !prior.is_unit() {
        return Err(TreeError::InvalidArgument("prior outside [0, 1]"));
    }
    if !q_value.is_unit() {
        return Err(TreeError::InvalidArgument("q value outside [0, 1]"));
    }
    let parent_total = T::from_u64(u64::from(parent_visits) + u64::from(parent_inflight)).unwrap();
    let child_total = T::from_u64(u64::from(child_visits) + u64::from(child_inflight)).unwrap();
    Ok(q_value + params.c_puct * prior * parent_total.sqrt() / (T::one() + child_total))
}

#[derive(Serialize)]
struct NodeDump {
    id: u32,
    parent: Option<u32>,
    reward: f64,
    prior: f64,
    #[serde(rename = "N")]
    n: u32,
    #[serde(rename = "O")]
    o: u32,
    #[serde(rename = "W")]
    w: f64,
    terminal: bool,
    depth: u32,
}

#[derive(Serialize)]
struct TreeDump {
    root: u32,
    completed_rollouts: u32,
    nodes: Vec<NodeDump>,
}

#[derive(Clone, Debug)]
pub struct SearchTree<T> {
    nodes: Vec<StepNode<T>>,
    completed_rollouts: u32,
    best_trajectory: Option<Trajectory<T>>,
    rollout_budget: u32,
}

impl<T: Scalar> SearchTree<T> {
    pub fn new(root_ref: StepRef, rollout_budget: u32) -> Result<Self, TreeError> {
        if rollout_budget == 0 {
            return Err(TreeError::InvalidArgument("rollout budget must be positive"));
        }
        let root = StepNode {
            id: NodeId(0),
            parent: None,
            step_ref: root_ref,
            prm_reward: T::one(),
            prior: T::one(),
            visit_count: 0,
            inflight_count: 0,
            value_sum: T::zero(),
            is_terminal: false,
            force_terminated: false,
            depth: 0,
            children: Vec::new(),
            open_leaves: 1,
        };
        Ok(Self {
            nodes: vec![root],
            completed_rollouts: 0,
            best_trajectory: None,
            rollout_budget,
        })
    }

    pub fn root_id(&self) -> NodeId {
        NodeId(0)
    }

    pub fn root(&self) -> &StepNode<T> {
        &self.nodes[0]
    }

    pub fn node(&self, id: NodeId) -> &StepNode<T> {
        &self.nodes[id.index()]
    }

    pub fn get(&self, id: NodeId) -> Option<&StepNode<T>> {
        self.nodes.get(id.index())
    }

    /// Raw mutable access for building fixtures; callers own the invariants.
    pub fn node_mut(&mut self, id: NodeId) -> &mut StepNode<T> {
        &mut self.nodes[id.index()]
    }

    pub fn nodes(&self) -> &[StepNode<T>] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn completed_rollouts(&self) -> u32 {
        self.completed_rollouts
    }

    pub fn rollout_budget(&self) -> u32 {
        self.rollout_budget
    }

    pub fn best_trajectory(&self) -> Option<&Trajectory<T>> {
        self.best_trajectory.as_ref()
    }

    pub fn has_expandable_leaf(&self) -> bool {
        self.nodes[0].open_leaves > 0
    }

    pub fn expandable_leaves(&self) -> impl Iterator<Item = &StepNode<T>> + '_ {
        self.nodes.iter().filter(|n| n.is_expandable())
    }

    /// Node ids from the root down to `id`, inclusive.
    pub fn path_from_root(&self, id: NodeId) -> Vec<NodeId> {
        let mut path = vec![id];
        let mut cur = id;
        while let Some(p) = self.nodes[cur.index()].parent {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    /// Step handles from the root's child down to `id`; the generator context.
    pub fn context(&self, id: NodeId) -> Vec<StepRef> {
        self.path_from_root(id)[1..]
            .iter()
            .map(|&n| self.nodes[n.index()].step_ref)
            .collect()
    }

    /// PRM rewards from the root's child down to `id`.
    pub fn rewards_to(&self, id: NodeId) -> Vec<T> {
        self.path_from_root(id)[1..]
            .iter()
            .map(|&n| self.nodes[n.index()].prm_reward)
            .collect()
    }

    /// The depth-1 ancestor of `id` (itself at depth 1, `None` for the root).
    pub fn first_step_of(&self, id: NodeId) -> Option<NodeId> {
        self.path_from_root(id).get(1).copied()
    }

    fn q_for_child(&self, parent: &StepNode<T>, child: &StepNode<T>) -> T {
        child
            .mean_value()
            .or_else(|| parent.mean_value())
            .unwrap_or_else(|| T::lit(0.5))
    }

    /// The child of `parent` that WU-PUCT prefers, among children that still
    /// lead to an expandable leaf. Ties go to the lowest child index.
    fn best_child(&self, parent: NodeId, params: &SelectionParams<T>) -> Result<NodeId, TreeError> {
        let p = &self.nodes[parent.index()];
        let mut best: Option<(NodeId, T)> = None;
        for &cid in &p.children {
            let c = &self.nodes[cid.index()];
            if c.open_leaves == 0 {
                continue;
            }
            let score = wu_puct_score(
                self.q_for_child(p, c),
                c.prior,
                p.visit_count,
                p.inflight_count,
                c.visit_count,
                c.inflight_count,
                params,
            )?;
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((cid, score));
            }
        }
        best.map(|(id, _)| id)
            .ok_or(TreeError::Structural("open subtree without open child"))
    }

    /// Descends by WU-PUCT to an expandable leaf and registers one in-flight
    /// rollout on every node of the path, root and leaf included.
    pub fn select_leaf(&mut self, params: &SelectionParams<T>) -> Result<NodeId, TreeError> {
        if !self.has_expandable_leaf() {
            return Err(TreeError::NoExpandableLeaf);
        }
        let mut path = vec![self.root_id()];
        let mut cur = self.root_id();
        while !self.nodes[cur.index()].is_leaf() {
            cur = self.best_child(cur, params)?;
            path.push(cur);
        }
        for id in path {
            self.nodes[id.index()].inflight_count += 1;
        }
        Ok(cur)
    }

    fn add_open_leaves(&mut self, from: NodeId, delta: i64) {
        let mut cur = Some(from);
        while let Some(id) = cur {
            let n = &mut self.nodes[id.index()];
            n.open_leaves = (i64::from(n.open_leaves) + delta) as u32;
            cur = n.parent;
        }
    }

    /// Appends one child per candidate under `leaf`, in candidate order.
    pub fn expand(&mut self, leaf: NodeId, candidates: &[StepCandidate<T>]) -> Result<Vec<NodeId>, TreeError> {
        let node = self.get(leaf).ok_or(TreeError::Structural("unknown node"))?;
        if node.is_terminal {
            return Err(TreeError::Structural("cannot expand a terminal node"));
        }
        if !node.is_leaf() {
            return Err(TreeError::Structural("cannot expand a non-leaf node"));
        }
        if candidates.is_empty() {
            return Err(TreeError::InvalidArgument("empty candidate list"));
        }
        if candidates.iter().any(|c| !c.prior.is_unit() || !c.prm_reward.is_unit()) {
            return Err(TreeError::InvalidArgument("candidate reward or prior outside [0, 1]"));
        }
        let depth = node.depth + 1;
        let mut ids = Vec::with_capacity(candidates.len());
        let mut open = 0i64;
        for c in candidates {
            let id = NodeId(self.nodes.len() as u32);
            self.nodes.push(StepNode {
                id,
                parent: Some(leaf),
                step_ref: c.step_ref,
                prm_reward: c.prm_reward,
                prior: c.prior,
                visit_count: 0,
                inflight_count: 0,
                value_sum: T::zero(),
                is_terminal: c.is_terminal,
                force_terminated: false,
                depth,
                children: Vec::new(),
                open_leaves: u32::from(!c.is_terminal),
            });
            open += i64::from(!c.is_terminal);
            ids.push(id);
        }
        self.nodes[leaf.index()].children = ids.clone();
        self.add_open_leaves(leaf, open - 1);
        Ok(ids)
    }

    /// Marks an expandable leaf as terminal because the depth cap was hit.
    pub fn force_terminate(&mut self, id: NodeId) -> Result<(), TreeError> {
        if !self.node(id).is_expandable() {
            return Err(TreeError::Structural("only expandable leaves can be force-terminated"));
        }
        let n = &mut self.nodes[id.index()];
        n.is_terminal = true;
        n.force_terminated = true;
        self.add_open_leaves(id, -1);
        Ok(())
    }

    /// Child of `id` with the largest PRM reward; lowest index on ties.
    pub fn greedy_child(&self, id: NodeId) -> Option<NodeId> {
        let mut best: Option<(NodeId, T)> = None;
        for &c in &self.nodes[id.index()].children {
            let r = self.nodes[c.index()].prm_reward;
            if best.is_none_or(|(_, b)| r > b) {
                best = Some((c, r));
            }
        }
        best.map(|(c, _)| c)
    }

    /// Greedy rollout from `start` to a terminal node. New nodes are registered
    /// as in-flight for the calling rollout and kept in the tree.
    pub fn simulate_to_terminal<G: StepGenerator<T> + ?Sized>(
        &mut self,
        start: NodeId,
        backend: &G,
        expand_width: usize,
        depth_cap: u32,
    ) -> Result<NodeId, TreeError> {
        let mut cur = start;
        loop {
            match next_step(self, cur, depth_cap)? {
                RolloutStep::Finished => return Ok(cur),
                RolloutStep::Expand(node) => {
                    let cands = backend.generate_steps(&self.context(node), expand_width)?;
                    cur = self.advance_greedy(node, &cands)?;
                }
            }
        }
    }

    /// Expands `node` with `candidates` unless another rollout already did,
    /// then moves to and registers the greedy child.
    fn advance_greedy(&mut self, node: NodeId, candidates: &[StepCandidate<T>]) -> Result<NodeId, TreeError> {
        if self.node(node).is_leaf() {
            self.expand(node, candidates)?;
        }
        let next = self
            .greedy_child(node)
            .ok_or(TreeError::Structural("expanded node has no children"))?;
        self.nodes[next.index()].inflight_count += 1;
        Ok(next)
    }

    /// Scores the path ending at `terminal`.
    pub fn trajectory_to(
        &self,
        terminal: NodeId,
        scheme: AggregationScheme,
        rollout_index: u32,
    ) -> Result<Trajectory<T>, TreeError> {
        let node = self.node(terminal);
        if !node.is_terminal {
            return Err(TreeError::Structural("trajectory must end at a terminal node"));
        }
        let path = self.path_from_root(terminal);
        let rewards = self.rewards_to(terminal);
        Ok(Trajectory {
            node_path: path[1..].to_vec(),
            aggregate_score: aggregate_trajectory(&rewards, scheme)?,
            rollout_index,
            force_terminated: node.force_terminated,
        })
    }

    fn validate_rollout_path(&self, path: &[NodeId]) -> Result<(), TreeError> {
        for w in path.windows(2) {
            if self.get(w[1]).and_then(|n| n.parent) != Some(w[0]) {
                return Err(TreeError::Structural("path is not parent-linked"));
            }
        }
        for &id in path {
            if self.node(id).inflight_count == 0 {
                return Err(TreeError::InflightUnderflow(id));
            }
        }
        Ok(())
    }

    /// Adds the trajectory score to every node on root..terminal, counts the
    /// visit, and releases the rollout's in-flight registration.
    pub fn backpropagate(&mut self, trajectory: Trajectory<T>) -> Result<(), TreeError> {
        if self.completed_rollouts >= self.rollout_budget {
            return Err(TreeError::BudgetExceeded(self.rollout_budget));
        }
        let first = *trajectory
            .node_path
            .first()
            .ok_or(TreeError::InvalidArgument("empty trajectory"))?;
        if self.get(first).and_then(|n| n.parent) != Some(self.root_id()) {
            return Err(TreeError::Structural("trajectory must start at a root child"));
        }
        let mut path = Vec::with_capacity(trajectory.node_path.len() + 1);
        path.push(self.root_id());
        path.extend_from_slice(&trajectory.node_path);
        self.validate_rollout_path(&path)?;
        if !self.node(*path.last().unwrap()).is_terminal {
            return Err(TreeError::Structural("trajectory must end at a terminal node"));
        }
        let score = trajectory.aggregate_score;
        for id in path {
            let n = &mut self.nodes[id.index()];
            n.value_sum = n.value_sum + score;
            n.visit_count += 1;
            n.inflight_count -= 1;
        }
        self.completed_rollouts += 1;
        if self.best_trajectory.as_ref().is_none_or(|b| score > b.aggregate_score) {
            self.best_trajectory = Some(trajectory);
        }
        Ok(())
    }

    /// Releases an abandoned rollout's registration without touching values.
    pub fn cancel_inflight(&mut self, rollout_path: &[NodeId]) -> Result<(), TreeError> {
        self.validate_rollout_path(rollout_path)?;
        for &id in rollout_path {
            self.nodes[id.index()].inflight_count -= 1;
        }
        Ok(())
    }

    /// Verifies the link structure and the cached open-leaf counters.
    pub fn check_invariants(&self) -> Result<(), TreeError> {
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id.index() != i {
                return Err(TreeError::Structural("node id mismatch"));
            }
            match n.parent {
                None if i != 0 => return Err(TreeError::Structural("orphan node")),
                Some(p) => {
                    if p.index() >= i || !self.nodes[p.index()].children.contains(&n.id) {
                        return Err(TreeError::Structural("parent/child link mismatch"));
                    }
                    if self.nodes[p.index()].depth + 1 != n.depth {
                        return Err(TreeError::Structural("depth mismatch"));
                    }
                }
                None => {}
            }
            if n.is_terminal && !n.children.is_empty() {
                return Err(TreeError::Structural("terminal node has children"));
            }
            let open = if n.is_leaf() {
                u32::from(!n.is_terminal)
            } else {
                n.children.iter().map(|c| self.nodes[c.index()].open_leaves).sum()
            };
            if open != n.open_leaves {
                return Err(TreeError::Structural("open-leaf counter out of sync"));
            }
            if let Some(q) = n.mean_value() {
                let eps = T::lit(1e-9);
                if q < -eps || q > T::one() + eps {
                    return Err(TreeError::Structural("mean value outside [0, 1]"));
                }
            }
        }
        if self.completed_rollouts > self.rollout_budget {
            return Err(TreeError::BudgetExceeded(self.rollout_budget));
        }
        Ok(())
    }

    /// JSON document `{root, completed_rollouts, nodes: [{id, parent, reward,
    /// prior, N, O, W, terminal, depth}]}`.
    pub fn dump_json(&self) -> String {
        let dump = TreeDump {
            root: 0,
            completed_rollouts: self.completed_rollouts,
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeDump {
                    id: n.id.0,
                    parent: n.parent.map(|p| p.0),
                    reward: n.prm_reward.to_f64_lossy(),
                    prior: n.prior.to_f64_lossy(),
                    n: n.visit_count,
                    o: n.inflight_count,
                    w: n.value_sum.to_f64_lossy(),
                    terminal: n.is_terminal,
                    depth: n.depth,
                })
                .collect(),
        };
        serde_json::to_string(&dump).expect("tree dump serializes")
    }
}

/// What a rollout positioned at a node has to do next.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RolloutStep {
    /// Generate candidates for this node (or reuse its children).
    Expand(NodeId),
    /// The node is terminal; the trajectory is complete.
    Finished,
}

fn next_step<T: Scalar>(tree: &mut SearchTree<T>, at: NodeId, depth_cap: u32) -> Result<RolloutStep, TreeError> {
    let node = tree.node(at);
    if node.is_terminal {
        return Ok(RolloutStep::Finished);
    }
    if node.is_leaf() && node.depth >= depth_cap {
        tree.force_terminate(at)?;
        return Ok(RolloutStep::Finished);
    }
    Ok(RolloutStep::Expand(at))
}

/// One in-flight rollout, advanced one generation step at a time so that an
/// event loop can interleave many of them.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    path: Vec<NodeId>,
}

impl Rollout {
    /// Selects a leaf with WU-PUCT and registers the rollout along the path.
    pub fn launch<T: Scalar>(tree: &mut SearchTree<T>, params: &SelectionParams<T>) -> Result<Self, TreeError> {
        let leaf = tree.select_leaf(params)?;
        Ok(Self {
            path: tree.path_from_root(leaf),
        })
    }

    /// Root to current node.
    pub fn path(&self) -> &[NodeId] {
        &self.path
    }

    pub fn current(&self) -> NodeId {
        *self.path.last().expect("rollout path is never empty")
    }

    pub fn next_step<T: Scalar>(&self, tree: &mut SearchTree<T>, depth_cap: u32) -> Result<RolloutStep, TreeError> {
        next_step(tree, self.current(), depth_cap)
    }

    /// Applies the candidates generated for the current node and moves on to
    /// the greedy child.
    pub fn advance<T: Scalar>(
        &mut self,
        tree: &mut SearchTree<T>,
        candidates: &[StepCandidate<T>],
    ) -> Result<NodeId, TreeError> {
        let next = tree.advance_greedy(self.current(), candidates)?;
        self.path.push(next);
        Ok(next)
    }

    /// Aggregate of the rewards gathered so far; zero before the first step.
    pub fn prefix_score<T: Scalar>(&self, tree: &SearchTree<T>, scheme: AggregationScheme) -> T {
        let rewards = tree.rewards_to(self.current());
        aggregate_trajectory(&rewards, scheme).unwrap_or_else(|_| T::zero())
    }

    pub fn cancel<T: Scalar>(self, tree: &mut SearchTree<T>) -> Result<(), TreeError> {
        tree.cancel_inflight(&self.path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cand(i: u64, prior: f64, reward: f64, terminal: bool) -> StepCandidate<f64> {
        StepCandidate {
            step_ref: StepRef(i),
            token_count: 10,
            prior,
            prm_reward: reward,
            is_terminal: terminal,
        }
    }

    fn params() -> SelectionParams<f64> {
        SelectionParams::new(1.0).unwrap()
    }

    #[test]
    fn wu_puct_examples() {
        let p = params();
        let s = wu_puct_score(0.5, 0.4, 8, 1, 2, 1, &p).unwrap();
        assert!((s - 0.8).abs() < 1e-12);
        assert_eq!(wu_puct_score(0.0, 1.0, 4, 0, 1, 0, &p).unwrap(), 1.0);
        assert_eq!(wu_puct_score(0.9, 0.0, 17, 3, 5, 2, &p).unwrap(), 0.9);
    }

    #[test]
    fn wu_puct_rejects_out_of_range() {
        let p = params();
        assert!(wu_puct_score(0.5, 1.2, 1, 0, 0, 0, &p).is_err());
        assert!(wu_puct_score(-0.1, 0.5, 1, 0, 0, 0, &p).is_err());
        assert!(wu_puct_score(0.5, f64::NAN, 1, 0, 0, 0, &p).is_err());
        assert!(SelectionParams::new(0.0f64).is_err());
    }

    proptest! {
        #[test]
        fn wu_puct_decreases_with_child_inflight(
            q in 0.0f64..=1.0, prior in 0.01f64..=1.0,
            n in 0u32..100, o in 0u32..10, na in 0u32..50, oa in 0u32..10,
        ) {
            let p = params();
            let a = wu_puct_score(q, prior, n + 1, o, na, oa, &p).unwrap();
            let b = wu_puct_score(q, prior, n + 1, o, na, oa + 1, &p).unwrap();
            prop_assert!(b < a);
        }
    }

    /// root -> A, B with fixed statistics.
    fn two_children(qa: f64, qb: f64, n: u32) -> SearchTree<f64> {
        let mut t = SearchTree::new(StepRef(0), 32).unwrap();
        let root = t.root_id();
        t.expand(root, &[cand(1, 0.5, 0.5, false), cand(2, 0.5, 0.5, false)])
            .unwrap();
        for (id, q) in [(NodeId(1), qa), (NodeId(2), qb)] {
            let node = t.node_mut(id);
            node.visit_count = n;
            node.value_sum = q * n as f64;
        }
        // the children stay leaves, so the root needs consistent counts
        let r = t.node_mut(root);
        r.visit_count = 2 * n;
        r.value_sum = (qa + qb) * n as f64;
        t
    }

    #[test]
    fn select_prefers_exploitation_when_exploration_ties() {
        let mut t = two_children(0.8, 0.2, 3);
        assert_eq!(t.select_leaf(&params()).unwrap(), NodeId(1));
        assert_eq!(t.root().inflight_count, 1);
        assert_eq!(t.node(NodeId(1)).inflight_count, 1);
        assert_eq!(t.node(NodeId(2)).inflight_count, 0);
    }

    #[test]
    fn second_concurrent_rollout_avoids_inflight_child() {
        let mut t = two_children(0.5, 0.5, 3);
        let a = t.select_leaf(&params()).unwrap();
        let b = t.select_leaf(&params()).unwrap();
        assert_eq!(a, NodeId(1));
        assert_eq!(b, NodeId(2));
    }

    #[test]
    fn single_child_is_always_selected() {
        let mut t = SearchTree::new(StepRef(0), 4).unwrap();
        t.expand(t.root_id(), &[cand(1, 0.0, 0.0, false)]).unwrap();
        assert_eq!(t.select_leaf(&params()).unwrap(), NodeId(1));
    }

    #[test]
    fn unvisited_child_uses_parent_mean() {
        let mut t = SearchTree::new(StepRef(0), 4).unwrap();
        t.expand(t.root_id(), &[cand(1, 0.5, 0.5, false), cand(2, 0.5, 0.5, false)])
            .unwrap();
        assert_eq!(t.q_for_child(t.root(), t.node(NodeId(1))), 0.5);
        t.node_mut(NodeId(0)).visit_count = 2;
        t.node_mut(NodeId(0)).value_sum = 0.4;
        assert!((t.q_for_child(t.root(), t.node(NodeId(1))) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn terminal_only_tree_is_exhausted() {
        let mut t = SearchTree::new(StepRef(0), 4).unwrap();
        t.expand(t.root_id(), &[cand(1, 1.0, 0.5, true)]).unwrap();
        assert_eq!(t.select_leaf(&params()), Err(TreeError::NoExpandableLeaf));
    }

    #[test]
    fn expand_contract() {
        let mut t = SearchTree::new(StepRef(0), 4).unwrap();
        let ids = t
            .expand(
                t.root_id(),
                &[
                    cand(1, 0.6, 0.1, false),
                    cand(2, 0.3, 0.2, false),
                    cand(3, 0.1, 0.3, true),
                ],
            )
            .unwrap();
        assert_eq!(ids, vec![NodeId(1), NodeId(2), NodeId(3)]);
        assert!(!t.root().is_leaf());
        let priors: Vec<f64> = ids.iter().map(|&i| t.node(i).prior).collect();
        assert_eq!(priors, vec![0.6, 0.3, 0.1]);
        assert!(ids.iter().all(|&i| t.node(i).visit_count == 0 && t.node(i).depth == 1));
        assert!(t.expand(NodeId(1), &[]).is_err());
        assert!(t.expand(t.root_id(), &[cand(9, 1.0, 0.5, false)]).is_err());
        assert!(t.expand(NodeId(3), &[cand(9, 1.0, 0.5, false)]).is_err());
        t.check_invariants().unwrap();
    }

    #[test]
    fn backprop_updates_and_best_is_strict() {
        let mut t = SearchTree::new(StepRef(0), 4).unwrap();
        t.expand(t.root_id(), &[cand(1, 0.5, 0.6, true), cand(2, 0.5, 0.6, true)])
            .unwrap();
        for id in [0, 1, 0, 2] {
            t.node_mut(NodeId(id)).inflight_count += 1;
        }
        let first = Trajectory {
            node_path: vec![NodeId(1)],
            aggregate_score: 0.5,
            rollout_index: 0,
            force_terminated: false,
        };
        t.backpropagate(first.clone()).unwrap();
        assert_eq!(t.node(NodeId(1)).visit_count, 1);
        assert_eq!(t.node(NodeId(1)).value_sum, 0.5);
        let second = Trajectory {
            node_path: vec![NodeId(2)],
            aggregate_score: 0.5,
            rollout_index: 1,
            force_terminated: false,
        };
        t.backpropagate(second).unwrap();
        assert_eq!(t.best_trajectory(), Some(&first));
        assert_eq!(t.root().visit_count, 2);
        assert_eq!(t.root().inflight_count, 0);
        // released registration cannot be released again
        let again = Trajectory {
            node_path: vec![NodeId(2)],
            aggregate_score: 0.9,
            rollout_index: 2,
            force_terminated: false,
        };
        assert_eq!(t.backpropagate(again), Err(TreeError::InflightUnderflow(NodeId(0))));
    }

    #[test]
    fn mean_after_two_backprops() {
        let mut t = SearchTree::new(StepRef(0), 4).unwrap();
        t.expand(t.root_id(), &[cand(1, 1.0, 0.6, true)]).unwrap();
        for score in [0.5, 0.3] {
            t.node_mut(NodeId(0)).inflight_count += 1;
            t.node_mut(NodeId(1)).inflight_count += 1;
            t.backpropagate(Trajectory {
                node_path: vec![NodeId(1)],
                aggregate_score: score,
                rollout_index: 0,
                force_terminated: false,
            })
            .unwrap();
        }
        assert!((t.node(NodeId(1)).mean_value().unwrap() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn cancel_shared_prefix() {
        let mut t = SearchTree::new(StepRef(0), 4).unwrap();
        t.expand(t.root_id(), &[cand(1, 1.0, 0.6, false)]).unwrap();
        t.expand(NodeId(1), &[cand(2, 0.5, 0.6, false), cand(3, 0.5, 0.6, false)])
            .unwrap();
        let a = [NodeId(0), NodeId(1), NodeId(2)];
        let b = [NodeId(0), NodeId(1), NodeId(3)];
        for id in a.iter().chain(&b) {
            t.node_mut(*id).inflight_count += 1;
        }
        t.cancel_inflight(&b).unwrap();
        assert_eq!(t.node(NodeId(1)).inflight_count, 1);
        assert_eq!(t.node(NodeId(3)).inflight_count, 0);
        assert_eq!(t.node(NodeId(2)).inflight_count, 1);
        t.cancel_inflight(&[]).unwrap();
        t.cancel_inflight(&a).unwrap();
        assert!(t.nodes().iter().all(|n| n.inflight_count == 0 && n.visit_count == 0));
        assert_eq!(t.cancel_inflight(&a), Err(TreeError::InflightUnderflow(NodeId(0))));
    }

    struct Chain;
    impl StepGenerator<f64> for Chain {
        fn root_ref(&self) -> StepRef {
            StepRef(0)
        }
        fn generate_steps(&self, ctx: &[StepRef], width: usize) -> Result<Vec<StepCandidate<f64>>, BackendError> {
            let depth = ctx.len() as u64 + 1;
            Ok((0..width as u64)
                .map(|i| {
                    cand(
                        depth * 10 + i,
                        1.0 / width as f64,
                        if i == 0 { 0.9 } else { 0.4 },
                        depth == 2,
                    )
                })
                .collect())
        }
    }

    #[test]
    fn simulate_greedy_to_terminal() {
        let mut t = SearchTree::new(StepRef(0), 4).unwrap();
        let leaf = t.select_leaf(&params()).unwrap();
        let end = t.simulate_to_terminal(leaf, &Chain, 2, 16).unwrap();
        assert_eq!(t.node(end).depth, 2);
        assert_eq!(t.node(end).prm_reward, 0.9);
        assert_eq!(t.len(), 5);
        assert_eq!(t.simulate_to_terminal(end, &Chain, 2, 16).unwrap(), end);
        let traj = t.trajectory_to(end, AggregationScheme::CumulativeProduct, 0).unwrap();
        assert!((traj.aggregate_score - 0.81).abs() < 1e-12);
        t.backpropagate(traj).unwrap();
        assert!(t.nodes().iter().all(|n| n.inflight_count == 0));
        t.check_invariants().unwrap();
    }

    #[test]
    fn depth_cap_force_terminates() {
        let mut t = SearchTree::new(StepRef(0), 4).unwrap();
        let leaf = t.select_leaf(&params()).unwrap();
        let end = t.simulate_to_terminal(leaf, &Chain, 2, 1).unwrap();
        let n = t.node(end);
        assert!(n.force_terminated && n.is_terminal && n.depth == 1);
        let traj = t.trajectory_to(end, AggregationScheme::Minimum, 0).unwrap();
        assert!(traj.force_terminated);
        t.check_invariants().unwrap();
    }

    #[test]
    fn dump_lists_every_node() {
        let mut t = SearchTree::new(StepRef(0), 4).unwrap();
        t.expand(t.root_id(), &[cand(1, 0.5, 0.25, false), cand(2, 0.5, 0.5, true)])
            .unwrap();
        let v: serde_json::Value = serde_json::from_str(&t.dump_json()).unwrap();
        let nodes = v["nodes"].as_array().unwrap();
        assert_eq!(nodes.len(), 3);
        assert_eq!(nodes[1]["parent"], 0);
        assert_eq!(nodes[1]["reward"], 0.25);
        assert_eq!(nodes[2]["terminal"], true);
        assert_eq!(nodes[2]["N"], 0);
    }
}
