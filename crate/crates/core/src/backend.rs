//! Step-generation and cost interfaces standing in for the LLM and reward model.
//!
//! [`SyntheticProblemSpec`] is a seeded, stateless problem generator: every
//! candidate is a pure function of `(seed, parent step, candidate index)`, so
//! the order in which a scheduler happens to expand nodes never changes what a
//! node looks like. That property is what lets the event-driven simulator and
//! a plain serial search produce identical trees.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

const TERMINAL_SALT: u64 = 0x5445_524d_494e_414c;
const DECOY_SALT: u64 = 0x4445_434f_5953_4c54;
const GOLDEN_FLOOR_MARGIN: f64 = 1e-3;
/// Gap kept between unsolvable rewards and the acceptance threshold.
const UNSOLVABLE_MARGIN: f64 = 1e-3;
const PRIOR_SHARPNESS: f64 = 8.0;

#[derive(Debug, Error, PartialEq)]
pub enum BackendError {
    #[error("context depth {depth} exceeds maximum depth {max}")]
    ContextTooDeep { depth: usize, max: u32 },
    #[error("context ends at a terminal step")]
    TerminalContext,
    #[error("width must be at least 1")]
    ZeroWidth,
    #[error("mixture fractions sum to {0}, expected 1")]
    BadMixture(f64),
    #[error("invalid workload profile: {0}")]
    BadProfile(&'static str),
    #[error("invalid cost model: {0}")]
    BadCostModel(&'static str),
}

/// Opaque handle naming a generated step. Children are derived by hashing the
/// parent handle with the candidate index, so a handle identifies a whole prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StepRef(pub u64);

impl StepRef {
    pub fn child(self, index: usize) -> StepRef {
        StepRef(mix64(
            self.0 ^ mix64((index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        ))
    }
}

/// splitmix64 finalizer.
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One generated reasoning step together with its reward-model score.
#[derive(Clone, Debug, PartialEq)]
pub struct StepCandidate<T> {
    pub step_ref: StepRef,
    pub token_count: u32,
    pub prior: T,
    pub prm_reward: T,
    pub is_terminal: bool,
}

/// Source of candidate steps. `context` lists the step handles from the root's
/// first child down to the node being expanded; it is empty for the root.
pub trait StepGenerator<T: Scalar> {
    fn root_ref(&self) -> StepRef;

    fn generate_steps(&self, context: &[StepRef], width: usize) -> Result<Vec<StepCandidate<T>>, BackendError>;

    /// Whether the step is the final step of the designated correct answer.
    fn is_golden_terminal(&self, _step: StepRef) -> bool {
        false
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    HardSolvable,
    Unsolvable,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardRange {
    pub lo: f64,
    pub hi: f64,
}

impl RewardRange {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    fn sample(self, rng: &mut ChaCha8Rng) -> f64 {
        if self.hi <= self.lo {
            return self.lo;
        }
        rng.random_range(self.lo..self.hi)
    }
}

/// Per-difficulty reward distributions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardProfile {
    /// Reward of steps on the golden path.
    pub golden: RewardRange,
    /// Lower bound applied to golden rewards so the golden product clears the
    /// positive-exit threshold (the `golden_len`-th root of it, plus a margin).
    pub golden_floor: f64,
    /// A misleading sibling of the golden step that outscores it near the root.
    pub decoy: Option<RewardRange>,
    /// Decoys are only placed on children shallower than this depth.
    pub decoy_below_depth: u32,
    /// Reward of every other step.
    pub other: RewardRange,
}

/// Knobs shared by every problem in a generated workload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadProfile {
    pub depth_min: u32,
    pub depth_max: u32,
    pub branching: u32,
    /// Probability that a non-golden step at depth `>= depth_min` ends the answer.
    pub terminal_prob: f64,
    /// Weight of the step reward in the prior logits; zero gives priors that
    /// carry no information about step quality.
    pub prior_sharpness: f64,
    pub token_min: u32,
    pub token_max: u32,
    pub accept_threshold: f64,
    pub positive_exit_threshold: f64,
}

impl Default for WorkloadProfile {
    fn default() -> Self {
        Self {
            depth_min: 3,
            depth_max: 6,
            branching: 4,
            terminal_prob: 0.3,
            prior_sharpness: PRIOR_SHARPNESS,
            token_min: 40,
            token_max: 120,
            accept_threshold: 0.3,
            positive_exit_threshold: 0.5,
        }
    }
}

impl WorkloadProfile {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.depth_min == 0 || self.depth_min > self.depth_max {
            return Err(BackendError::BadProfile("need 1 <= depth_min <= depth_max"));
        }
        if self.branching < 2 {
            return Err(BackendError::BadProfile("branching must be at least 2"));
        }
        if !(0.0..=1.0).contains(&self.terminal_prob) {
            return Err(BackendError::BadProfile("terminal_prob must lie in [0, 1]"));
        }
        if !(self.prior_sharpness >= 0.0) || !self.prior_sharpness.is_finite() {
            return Err(BackendError::BadProfile(
                "prior_sharpness must be finite and non-negative",
            ));
        }
        if self.token_min == 0 || self.token_min > self.token_max {
            return Err(BackendError::BadProfile("need 1 <= token_min <= token_max"));
        }
        let unit = |x: f64| x > 0.0 && x < 1.0;
        if !unit(self.accept_threshold) || !unit(self.positive_exit_threshold) {
            return Err(BackendError::BadProfile("thresholds must lie in (0, 1)"));
        }
        Ok(())
    }

    fn reward_profile(&self, difficulty: Difficulty, golden_len: u32) -> RewardProfile {
        let floor = self.positive_exit_threshold.powf(1.0 / golden_len as f64) + GOLDEN_FLOOR_MARGIN;
        let other = RewardRange::new(0.3, 0.7);
        match difficulty {
            Difficulty::Easy => RewardProfile {
                golden: RewardRange::new(0.90, 0.99),
                golden_floor: floor,
                decoy: None,
                decoy_below_depth: 0,
                other,
            },
            Difficulty::HardSolvable => RewardProfile {
                golden: RewardRange::new(0.75, 0.9),
                golden_floor: floor,
                decoy: Some(RewardRange::new(0.9, 0.99)),
                decoy_below_depth: 3,
                other,
            },
            Difficulty::Unsolvable => RewardProfile {
                golden: RewardRange::new(0.0, 0.0),
                golden_floor: 0.0,
                decoy: None,
                decoy_below_depth: 0,
                other: RewardRange::new(0.05, self.accept_threshold - UNSOLVABLE_MARGIN),
            },
        }
    }
}

/// Fractions of each difficulty class in a workload.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Mixture {
    pub easy: f64,
    pub hard: f64,
    pub unsolvable: f64,
}

impl Mixture {
    pub const fn new(easy: f64, hard: f64, unsolvable: f64) -> Self {
        Self { easy, hard, unsolvable }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let sum = self.easy + self.hard + self.unsolvable;
        let parts = [self.easy, self.hard, self.unsolvable];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) || (sum - 1.0).abs() > 1e-9 {
            return Err(BackendError::BadMixture(sum));
        }
        Ok(())
    }
}

impl Default for Mixture {
    fn default() -> Self {
        Self::new(0.60, 0.25, 0.15)
    }
}

/// A seeded synthetic reasoning problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticProblemSpec {
    pub problem_id: u64,
    pub seed: u64,
    pub difficulty: Difficulty,
    /// Inclusive `[min, max]` answer depth. Every step at `max` is terminal.
    pub depth_range: (u32, u32),
    pub branching: u32,
    pub terminal_prob: f64,
    pub prior_sharpness: f64,
    pub token_range: (u32, u32),
    pub reward_profile: RewardProfile,
    /// Candidate index chosen at each depth along the correct answer.
    pub golden_path: Option<Vec<u32>>,
}

impl SyntheticProblemSpec {
    /// Builds a problem deterministically from `seed`.
    pub fn generate(
        problem_id: u64,
        seed: u64,
        difficulty: Difficulty,
        profile: &WorkloadProfile,
    ) -> Result<Self, BackendError> {
        profile.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let golden_len = rng.random_range(profile.depth_min..=profile.depth_max);
        let golden_path = match difficulty {
            Difficulty::Unsolvable => None,
            _ => Some(
                (0..golden_len)
                    .map(|_| rng.random_range(0..profile.branching))
                    .collect(),
            ),
        };
        Ok(Self {
            problem_id,
            seed,
            difficulty,
            depth_range: (profile.depth_min, profile.depth_max),
            branching: profile.branching,
            terminal_prob: profile.terminal_prob,
            prior_sharpness: profile.prior_sharpness,
            token_range: (profile.token_min, profile.token_max),
            reward_profile: profile.reward_profile(difficulty, golden_len),
            golden_path,
        })
    }

    pub fn root(&self) -> StepRef {
        StepRef(mix64(self.seed ^ mix64(self.problem_id)))
    }

    /// Handles of the golden steps, from depth 1 to the golden terminal.
    pub fn golden_refs(&self) -> Vec<StepRef> {
        let mut cur = self.root();
        self.golden_path
            .iter()
            .flatten()
            .map(|&idx| {
                cur = cur.child(idx as usize);
                cur
            })
            .collect()
    }

    fn rng_for(&self, key: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(key);
        rng
    }

    /// Golden-path position of `step` at `depth`, if it lies on the golden path.
    fn golden_depth_of(&self, golden: &[StepRef], step: StepRef, depth: usize) -> bool {
        depth >= 1 && golden.get(depth - 1) == Some(&step)
    }

    fn step_is_terminal(&self, golden: &[StepRef], step: StepRef, depth: usize) -> bool {
        if self.golden_depth_of(golden, step, depth) {
            return depth == golden.len();
        }
        let (min, max) = self.depth_range;
        if depth as u32 >= max {
            return true;
        }
        if (depth as u32) < min {
            return false;
        }
        self.rng_for(step.0 ^ TERMINAL_SALT).random::<f64>() < self.terminal_prob
    }

    fn decoy_index(&self, parent: StepRef, golden_idx: u32) -> u32 {
        let offset = 1 + self.rng_for(parent.0 ^ DECOY_SALT).random_range(0..self.branching - 1);
        (golden_idx + offset) % self.branching
    }
}

impl<T: Scalar> StepGenerator<T> for SyntheticProblemSpec {
    fn root_ref(&self) -> StepRef {
        self.root()
    }

    fn generate_steps(&self, context: &[StepRef], width: usize) -> Result<Vec<StepCandidate<T>>, BackendError> {
        if width == 0 {
            return Err(BackendError::ZeroWidth);
        }
        let depth = context.len();
        let max = self.depth_range.1;
        if depth as u32 >= max {
            return Err(BackendError::ContextTooDeep { depth, max });
        }
        let golden = self.golden_refs();
        let parent = context.last().copied().unwrap_or_else(|| self.root());
        if depth > 0 && self.step_is_terminal(&golden, parent, depth) {
            return Err(BackendError::TerminalContext);
        }
        let on_golden_prefix = depth == 0 || self.golden_depth_of(&golden, parent, depth);
        let golden_idx = self
            .golden_path
            .as_ref()
            .and_then(|p| p.get(depth).copied())
            .filter(|_| on_golden_prefix);
        let profile = &self.reward_profile;
        let child_depth = depth + 1;
        let decoy_idx = match (golden_idx, profile.decoy) {
            (Some(g), Some(_)) if (child_depth as u32) < profile.decoy_below_depth => Some(self.decoy_index(parent, g)),
            _ => None,
        };

        let (tmin, tmax) = self.token_range;
        let mut logits = Vec::with_capacity(width);
        let mut out = Vec::with_capacity(width);
        for idx in 0..width {
            let step_ref = parent.child(idx);
            let mut rng = self.rng_for(step_ref.0);
            let reward = if golden_idx == Some(idx as u32) {
                let lo = profile.golden.lo.max(profile.golden_floor);
                RewardRange::new(lo, profile.golden.hi.max(lo)).sample(&mut rng)
            } else if decoy_idx == Some(idx as u32) {
                profile.decoy.map_or(0.0, |d| d.sample(&mut rng))
            } else {
                profile.other.sample(&mut rng)
            };
            let token_count = rng.random_range(tmin..=tmax);
            logits.push((rng.random_range(-1.0..1.0f64) + self.prior_sharpness * reward).exp());
            out.push(StepCandidate {
                step_ref,
                token_count,
                prior: T::zero(),
                prm_reward: T::lit(reward),
                is_terminal: self.step_is_terminal(&golden, step_ref, child_depth),
            });
        }
        let total: f64 = logits.iter().sum();
        for (cand, l) in out.iter_mut().zip(&logits) {
            cand.prior = T::lit(l / total);
        }
        Ok(out)
    }

    fn is_golden_terminal(&self, step: StepRef) -> bool {
        self.golden_refs().last() == Some(&step)
    }
}

/// Latency model for the serving engine.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    /// Seconds per generated token on an uncontended engine.
    pub per_token_latency: f64,
    /// In-flight completion requests the engine absorbs before slowing down.
    pub engine_capacity: u32,
    /// Seconds per reward-model query batch.
    pub reward_latency: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            per_token_latency: 0.001,
            engine_capacity: 64,
            reward_latency: 0.01,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<(), BackendError> {
        if !(self.per_token_latency > 0.0) {
            return Err(BackendError::BadCostModel("per_token_latency must be positive"));
        }
        if self.engine_capacity == 0 {
            return Err(BackendError::BadCostModel("engine_capacity must be positive"));
        }
        if !(self.reward_latency >= 0.0) {
            return Err(BackendError::BadCostModel("reward_latency must be non-negative"));
        }
        Ok(())
    }
}

/// Seconds needed to generate `token_count` tokens while `inflight_load`
/// completion requests (including this one) share the engine.
pub fn service_time(token_count: u32, model: &CostModel, inflight_load: u64) -> f64 {
    let contention = (inflight_load as f64 / model.engine_capacity as f64).max(1.0);
    token_count as f64 * model.per_token_latency * contention
}

/// Generates `count` problems with the requested difficulty mixture, shuffled so
/// classes interleave in arrival order.
pub fn make_workload(
    count: usize,
    mixture: Mixture,
    seed: u64,
    profile: &WorkloadProfile,
) -> Result<Vec<SyntheticProblemSpec>, BackendError> {
    mixture.validate()?;
    profile.validate()?;
    let fractions = [
        (Difficulty::Easy, mixture.easy),
        (Difficulty::HardSolvable, mixture.hard),
        (Difficulty::Unsolvable, mixture.unsolvable),
    ];
    let mut counts: Vec<usize> = fractions
        .iter()
        .map(|(_, f)| (f * count as f64 + 1e-9).floor() as usize)
        .collect();
    let assigned: usize = counts.iter().sum();
    // remainder goes to the largest fraction, earliest class on ties
    let largest = fractions
        .iter()
        .enumerate()
        .fold(0, |best, (i, (_, f))| if *f > fractions[best].1 { i } else { best });
    counts[largest] += count - assigned;

    let mut classes: Vec<Difficulty> = fractions
        .iter()
        .zip(&counts)
        .flat_map(|((d, _), &n)| std::iter::repeat_n(*d, n))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    classes.shuffle(&mut rng);

    classes
        .into_iter()
        .enumerate()
        .map(|(i, difficulty)| {
            let id = i as u64;
            SyntheticProblemSpec::generate(id, mix64(seed ^ mix64(id ^ 0xA5A5)), difficulty, profile)
        })
        .collect()
}
