//! Trajectory scoring and early-exit decisions.
//!
//! Under minimum or cumulative-product aggregation with rewards in `[0, 1]`, a
//! trajectory never scores above any of its step rewards. A leaf whose reward
//! is below the acceptance threshold is therefore *futile*: nothing grown from
//! it can be accepted. Negative exit fires once every expandable leaf that
//! still matters is futile.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::search_tree::SearchTree;

#[derive(Debug, Error, PartialEq)]
pub enum ScoringError {
    #[error("cannot aggregate an empty reward list")]
    EmptyRewards,
    #[error("reward outside [0, 1]")]
    RewardOutOfRange,
    #[error("{0:?} aggregation does not bound completions by the leaf reward")]
    UnsupportedScheme(AggregationScheme),
    #[error("invalid scoring config: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationScheme {
    Minimum,
    CumulativeProduct,
    CumulativeSum,
    Average,
}

impl AggregationScheme {
    /// Whether a completion's score is bounded above by each of its step rewards.
    pub fn bounded_by_leaf(self) -> bool {
        matches!(self, Self::Minimum | Self::CumulativeProduct)
    }
}

/// Which quantity is compared against the acceptance threshold.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FutilityBound {
    LeafReward,
    /// `min(leaf reward, aggregate of the path down to the leaf)`; tighter
    /// under product aggregation.
    PrefixAggregate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoringConfig<T> {
    pub scheme: AggregationScheme,
    /// Acceptance threshold `tau`.
    pub accept_threshold: T,
    pub positive_exit_threshold: T,
    /// Depth-1 reward below which a subtree is ignored by the selective check.
    pub first_step_threshold: T,
    /// Disables the selective relaxation.
    pub strict_negative_exit: bool,
    pub futility_bound: FutilityBound,
    pub positive_exit_enabled: bool,
    pub negative_exit_enabled: bool,
}

impl<T: Scalar> Default for ScoringConfig<T> {
    fn default() -> Self {
        Self {
            scheme: AggregationScheme::CumulativeProduct,
            accept_threshold: T::lit(0.3),
            positive_exit_threshold: T::lit(0.5),
            first_step_threshold: T::lit(0.1),
            strict_negative_exit: false,
            futility_bound: FutilityBound::LeafReward,
            positive_exit_enabled: true,
            negative_exit_enabled: true,
        }
    }
}

impl<T: Scalar> ScoringConfig<T> {
    pub fn validate(&self) -> Result<(), ScoringError> {
        let open_unit = |x: T| x > T::zero() && x < T::one();
        if !open_unit(self.accept_threshold) {
            return Err(ScoringError::InvalidConfig("accept_threshold must lie in (0, 1)"));
        }
        if !open_unit(self.positive_exit_threshold) {
            return Err(ScoringError::InvalidConfig(
                "positive_exit_threshold must lie in (0, 1)",
            ));
        }
        if !(self.first_step_threshold >= T::zero() && self.first_step_threshold < T::one()) {
            return Err(ScoringError::InvalidConfig("first_step_threshold must lie in [0, 1)"));
        }
        if self.negative_exit_enabled && !self.scheme.bounded_by_leaf() {
            return Err(ScoringError::UnsupportedScheme(self.scheme));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LeafClass {
    Futile,
    Viable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitKind {
    Continue,
    PositiveExit,
    NegativeExit,
    BudgetExhausted,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExitDecision<T> {
    pub kind: ExitKind,
    pub best_score: T,
}

pub fn aggregate_trajectory<T: Scalar>(rewards: &[T], scheme: AggregationScheme) -> Result<T, ScoringError> {
    if rewards.is_empty() {
        return Err(ScoringError::EmptyRewards);
    }
    if rewards.iter().any(|r| !r.is_unit()) {
        return Err(ScoringError::RewardOutOfRange);
    }
    let it = rewards.iter().copied();
    Ok(match scheme {
        AggregationScheme::Minimum => it.fold(T::one(), T::min),
        AggregationScheme::CumulativeProduct => it.fold(T::one(), |a, r| a * r),
        AggregationScheme::CumulativeSum => it.sum(),
        AggregationScheme::Average => it.sum::<T>() / T::from_usize(rewards.len()).unwrap(),
    })
}

pub fn classify_leaf<T: Scalar>(
    leaf_reward: T,
    prefix_aggregate: T,
    config: &ScoringConfig<T>,
) -> Result<LeafClass, ScoringError> {
    if !config.scheme.bounded_by_leaf() {
        return Err(ScoringError::UnsupportedScheme(config.scheme));
    }
    let bound = match config.futility_bound {
        FutilityBound::LeafReward => leaf_reward,
        FutilityBound::PrefixAggregate => leaf_reward.min(prefix_aggregate),
    };
    Ok(if bound < config.accept_threshold {
        LeafClass::Futile
    } else {
        LeafClass::Viable
    })
}

/// `true` when no expandable leaf that the check considers can still reach the
/// acceptance threshold. In selective mode, leaves under a depth-1 step whose
/// reward is below `first_step_threshold` are left out of the check.
pub fn check_negative_exit<T: Scalar>(tree: &SearchTree<T>, config: &ScoringConfig<T>) -> Result<bool, ScoringError> {
    if !config.scheme.bounded_by_leaf() {
        return Err(ScoringError::UnsupportedScheme(config.scheme));
    }
    if tree.root().is_leaf() {
        return Ok(false);
    }
    for leaf in tree.expandable_leaves() {
        if !config.strict_negative_exit {
            let first = tree.first_step_of(leaf.id).expect("leaf below root");
            if tree.node(first).prm_reward < config.first_step_threshold {
                continue;
            }
        }
        let prefix = match config.futility_bound {
            FutilityBound::LeafReward => leaf.prm_reward,
            FutilityBound::PrefixAggregate => aggregate_trajectory(&tree.rewards_to(leaf.id), config.scheme)?,
        };
        if classify_leaf(leaf.prm_reward, prefix, config)? == LeafClass::Viable {
            return Ok(false);
        }
    }
    Ok(true)
}

pub fn check_positive_exit<T: Scalar>(tree: &SearchTree<T>, config: &ScoringConfig<T>) -> bool {
    tree.best_trajectory()
        .is_some_and(|b| b.aggregate_score >= config.positive_exit_threshold)
}

/// Positive exit beats negative exit, which beats budget exhaustion. Disabled
/// exits are skipped.
pub fn decide_exit<T: Scalar>(
    tree: &SearchTree<T>,
    config: &ScoringConfig<T>,
) -> Result<ExitDecision<T>, ScoringError> {
    let best_score = tree.best_trajectory().map_or(T::zero(), |b| b.aggregate_score);
    let kind = if config.positive_exit_enabled && check_positive_exit(tree, config) {
        ExitKind::PositiveExit
    } else if config.negative_exit_enabled && check_negative_exit(tree, config)? {
        ExitKind::NegativeExit
    } else if tree.completed_rollouts() >= tree.rollout_budget() {
        ExitKind::BudgetExhausted
    } else {
        ExitKind::Continue
    };
    Ok(ExitDecision { kind, best_score })
}
