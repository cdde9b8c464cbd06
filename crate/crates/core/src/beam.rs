//! Beam search over the same step generator, used as the baseline.
//!
//! Every step expands each active beam into `n` candidates, ranks all of them
//! by accumulated aggregate reward and keeps the best `k`. Survivors that end
//! in a terminal step retire to the finished set.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, StepCandidate, StepGenerator, StepRef};
use crate::scalar::Scalar;
use crate::scoring::{aggregate_trajectory, AggregationScheme, ScoringConfig, ScoringError};

#[derive(Debug, Error, PartialEq)]
pub enum BeamError {
    #[error("invalid beam config: {0}")]
    InvalidConfig(&'static str),
    #[error("expected candidates for {expected} beams, got {got}")]
    CandidateMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamConfig {
    /// `k`: beams kept after each step.
    pub beam_width: usize,
    /// `n`: candidates sampled per beam.
    pub candidates_per_beam: usize,
    /// `T`: maximum number of steps.
    pub max_depth: u32,
    pub positive_exit_enabled: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_width: 8,
            candidates_per_beam: 4,
            max_depth: 16,
            positive_exit_enabled: true,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<(), BeamError> {
        if self.beam_width == 0 {
            return Err(BeamError::InvalidConfig("beam_width must be at least 1"));
        }
        if self.candidates_per_beam == 0 {
            return Err(BeamError::InvalidConfig("candidates_per_beam must be at least 1"));
        }
        if self.max_depth == 0 {
            return Err(BeamError::InvalidConfig("max_depth must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartialTrajectory<T> {
    /// Step handles below the root.
    pub refs: Vec<StepRef>,
    pub rewards: Vec<T>,
    /// Aggregate of `rewards`; zero for the empty root beam.
    pub score: T,
    pub terminal: bool,
}

impl<T: Scalar> PartialTrajectory<T> {
    pub fn root() -> Self {
        Self {
            refs: Vec::new(),
            rewards: Vec::new(),
            score: T::zero(),
            terminal: false,
        }
    }

    fn extend(&self, cand: &StepCandidate<T>, scheme: AggregationScheme) -> Result<Self, ScoringError> {
        let mut refs = self.refs.clone();
        refs.push(cand.step_ref);
        let mut rewards = self.rewards.clone();
        rewards.push(cand.prm_reward);
        let score = aggregate_trajectory(&rewards, scheme)?;
        Ok(Self {
            refs,
            rewards,
            score,
            terminal: cand.is_terminal,
        })
    }
}

/// Result of one expansion-pruning step.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamStep<T> {
    pub survivors: Vec<PartialTrajectory<T>>,
    /// Survivors that reached a terminal step.
    pub finished: Vec<PartialTrajectory<T>>,
    /// Tokens of every generated candidate, kept or not.
    pub tokens: u64,
    pub candidates: usize,
}

/// Keeps the `k` highest-scoring candidates; equal scores keep the lower index.
pub fn prune<T: Scalar>(
    candidates: Vec<PartialTrajectory<T>>,
    k: usize,
) -> (Vec<PartialTrajectory<T>>, Vec<PartialTrajectory<T>>) {
    let mut indexed: Vec<(usize, PartialTrajectory<T>)> = candidates.into_iter().enumerate().collect();
    indexed.sort_by(|a, b| {
        b.1.score
            .partial_cmp(&a.1.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    indexed.truncate(k);
    indexed.into_iter().map(|(_, c)| c).partition(|c| !c.terminal)
}

/// Applies already generated candidates: `generated[i]` belongs to `beams[i]`.
pub fn apply_candidates<T: Scalar>(
    beams: &[PartialTrajectory<T>],
    generated: &[Vec<StepCandidate<T>>],
    k: usize,
    scheme: AggregationScheme,
) -> Result<BeamStep<T>, BeamError> {
    if beams.len() != generated.len() {
        return Err(BeamError::CandidateMismatch {
            expected: beams.len(),
            got: generated.len(),
        });
    }
    let mut pool = Vec::new();
    let mut tokens = 0u64;
    for (beam, cands) in beams.iter().zip(generated) {
        for c in cands {
            tokens += u64::from(c.token_count);
            pool.push(beam.extend(c, scheme)?);
        }
    }
    let candidates = pool.len();
    let (survivors, finished) = prune(pool, k);
    Ok(BeamStep {
        survivors,
        finished,
        tokens,
        candidates,
    })
}

pub fn beam_step<T: Scalar, G: StepGenerator<T> + ?Sized>(
    beams: &[PartialTrajectory<T>],
    config: &BeamConfig,
    scheme: AggregationScheme,
    backend: &G,
) -> Result<BeamStep<T>, BeamError> {
    let generated = beams
        .iter()
        .map(|b| backend.generate_steps(&b.refs, config.candidates_per_beam))
        .collect::<Result<Vec<_>, _>>()?;
    apply_candidates(beams, &generated, config.beam_width, scheme)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamOutcome<T> {
    /// Highest-scoring finished trajectory, or the best partial one.
    pub best: Option<PartialTrajectory<T>>,
    /// False when `best` never reached a terminal step.
    pub complete: bool,
    pub positive_exit: bool,
    pub tokens: u64,
    pub steps: u32,
}

/// Incremental beam search, driven either by [`run_beam_search`] or by the
/// event loop, which generates the candidates itself.
#[derive(Clone, Debug)]
pub struct BeamSearch<T> {
    config: BeamConfig,
    active: Vec<PartialTrajectory<T>>,
    finished: Vec<PartialTrajectory<T>>,
    steps: u32,
    tokens: u64,
    positive_exit: bool,
}

fn best_of<T: Scalar>(items: &[PartialTrajectory<T>]) -> Option<&PartialTrajectory<T>> {
    // first maximum wins
    items
        .iter()
        .fold(None, |best: Option<&PartialTrajectory<T>>, c| match best {
            Some(b) if b.score >= c.score => Some(b),
            _ => Some(c),
        })
}

impl<T: Scalar> BeamSearch<T> {
    pub fn new(config: BeamConfig) -> Result<Self, BeamError> {
        config.validate()?;
        Ok(Self {
            config,
            active: vec![PartialTrajectory::root()],
            finished: Vec::new(),
            steps: 0,
            tokens: 0,
            positive_exit: false,
        })
    }

    pub fn config(&self) -> &BeamConfig {
        &self.config
    }

    pub fn active(&self) -> &[PartialTrajectory<T>] {
        &self.active
    }

    pub fn finished(&self) -> &[PartialTrajectory<T>] {
        &self.finished
    }

    pub fn tokens(&self) -> u64 {
        self.tokens
    }

    pub fn is_done(&self) -> bool {
        self.positive_exit || self.active.is_empty() || self.steps >= self.config.max_depth
    }

    /// Contexts to generate `candidates_per_beam` candidates for, one per active beam.
    pub fn requests(&self) -> Vec<Vec<StepRef>> {
        if self.is_done() {
            return Vec::new();
        }
        self.active.iter().map(|b| b.refs.clone()).collect()
    }

    pub fn apply(&mut self, generated: &[Vec<StepCandidate<T>>], scoring: &ScoringConfig<T>) -> Result<(), BeamError> {
        let step = apply_candidates(&self.active, generated, self.config.beam_width, scoring.scheme)?;
        self.tokens += step.tokens;
        self.steps += 1;
        self.active = step.survivors;
        self.finished.extend(step.finished);
        if self.config.positive_exit_enabled {
            self.positive_exit = best_of(&self.finished).is_some_and(|b| b.score >= scoring.positive_exit_threshold);
        }
        Ok(())
    }

    pub fn outcome(&self) -> BeamOutcome<T> {
        let (best, complete) = match best_of(&self.finished) {
            Some(b) => (Some(b.clone()), true),
            None => (best_of(&self.active).cloned(), false),
        };
        BeamOutcome {
            best,
            complete,
            positive_exit: self.positive_exit,
            tokens: self.tokens,
            steps: self.steps,
        }
    }
}

pub fn run_beam_search<T: Scalar, G: StepGenerator<T> + ?Sized>(
    config: &BeamConfig,
    scoring: &ScoringConfig<T>,
    backend: &G,
) -> Result<BeamOutcome<T>, BeamError> {
    let mut search = BeamSearch::new(config.clone())?;
    while !search.is_done() {
        let generated = search
            .requests()
            .iter()
            .map(|ctx| backend.generate_steps(ctx, config.candidates_per_beam))
            .collect::<Result<Vec<_>, _>>()?;
        search.apply(&generated, scoring)?;
    }
    Ok(search.outcome())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{Difficulty, SyntheticProblemSpec, WorkloadProfile};

    fn partial(score: f64, terminal: bool) -> PartialTrajectory<f64> {
        PartialTrajectory {
            refs: vec![StepRef((score * 1000.0) as u64)],
            rewards: vec![score],
            score,
            terminal,
        }
    }

    fn problem(d: Difficulty, seed: u64) -> SyntheticProblemSpec {
        SyntheticProblemSpec::generate(1, seed, d, &WorkloadProfile::default()).unwrap()
    }

    #[test]
    fn prune_keeps_top_k_with_index_ties() {
        let pool = vec![
            partial(0.9, false),
            partial(0.5, false),
            partial(0.9, false),
            partial(0.1, false),
        ];
        let (kept, done) = prune(pool.clone(), 2);
        assert!(done.is_empty());
        assert_eq!(kept, vec![pool[0].clone(), pool[2].clone()]);
    }

    #[test]
    fn terminal_survivors_retire() {
        let pool = vec![partial(0.9, true), partial(0.8, false), partial(0.2, false)];
        let (kept, done) = prune(pool, 2);
        assert_eq!(done.len(), 1);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.8);
    }

    #[test]
    fn width_two_four_candidates() {
        let p = problem(Difficulty::Easy, 3);
        let cfg = BeamConfig {
            beam_width: 2,
            candidates_per_beam: 4,
            ..BeamConfig::default()
        };
        let scheme = AggregationScheme::CumulativeProduct;
        let first = beam_step::<f64, _>(&[PartialTrajectory::root()], &cfg, scheme, &p).unwrap();
        assert_eq!(first.candidates, 4);
        assert_eq!(first.survivors.len() + first.finished.len(), 2);
        let second = beam_step(&first.survivors, &cfg, scheme, &p).unwrap();
        assert_eq!(second.candidates, 4 * first.survivors.len());
        assert_eq!(second.survivors.len() + second.finished.len(), 2);
    }

    #[test]
    fn greedy_degenerate_case() {
        let p = problem(Difficulty::Easy, 4);
        let cfg = BeamConfig {
            beam_width: 1,
            candidates_per_beam: 1,
            ..BeamConfig::default()
        };
        let step = beam_step::<f64, _>(
            &[PartialTrajectory::root()],
            &cfg,
            AggregationScheme::CumulativeProduct,
            &p,
        )
        .unwrap();
        assert_eq!(step.survivors.len() + step.finished.len(), 1);
    }

    #[test]
    fn tokens_count_every_candidate() {
        let p = problem(Difficulty::HardSolvable, 8);
        let cfg = BeamConfig::default();
        let scoring = ScoringConfig::<f64>::default();
        let mut search = BeamSearch::<f64>::new(cfg.clone()).unwrap();
        let mut oracle = 0u64;
        while !search.is_done() {
            let generated: Vec<_> = search
                .requests()
                .iter()
                .map(|ctx| StepGenerator::<f64>::generate_steps(&p, ctx, cfg.candidates_per_beam).unwrap())
                .collect();
            oracle += generated
                .iter()
                .flatten()
                .map(|c| u64::from(c.token_count))
                .sum::<u64>();
            search.apply(&generated, &scoring).unwrap();
        }
        assert_eq!(search.tokens(), oracle);
    }

    #[test]
    fn easy_problem_exits_early() {
        let scoring = ScoringConfig::<f64>::default();
        let mut exits = 0;
        for seed in 0..20 {
            let p = problem(Difficulty::Easy, seed);
            let out = run_beam_search(&BeamConfig::default(), &scoring, &p).unwrap();
            if out.positive_exit {
                exits += 1;
                assert!(out.best.unwrap().score >= 0.5);
                assert!(out.steps < 16);
            }
        }
        assert!(exits > 0);
    }

    #[test]
    fn exit_disabled_runs_until_beams_run_out() {
        let scoring = ScoringConfig::<f64>::default();
        let cfg = BeamConfig {
            positive_exit_enabled: false,
            ..BeamConfig::default()
        };
        let p = problem(Difficulty::Easy, 2);
        let mut search = BeamSearch::<f64>::new(cfg.clone()).unwrap();
        while !search.is_done() {
            let generated: Vec<_> = search
                .requests()
                .iter()
                .map(|ctx| StepGenerator::<f64>::generate_steps(&p, ctx, cfg.candidates_per_beam).unwrap())
                .collect();
            search.apply(&generated, &scoring).unwrap();
        }
        assert!(search.active().is_empty() || search.outcome().steps == cfg.max_depth);
        assert!(!search.outcome().positive_exit);
    }

    #[test]
    fn unsolvable_stays_below_threshold() {
        let scoring = ScoringConfig::<f64>::default();
        let p = problem(Difficulty::Unsolvable, 5);
        let out = run_beam_search(&BeamConfig::default(), &scoring, &p).unwrap();
        assert!(!out.positive_exit);
        assert!(out.best.unwrap().score < scoring.accept_threshold);
        assert!(out.tokens > 0);
    }

    #[test]
    fn mismatched_candidate_lists_rejected() {
        let err = apply_candidates::<f64>(&[PartialTrajectory::root()], &[], 2, AggregationScheme::Minimum);
        assert!(matches!(err, Err(BeamError::CandidateMismatch { .. })));
    }
}
