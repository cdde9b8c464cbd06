//! Experiment files, system presets and arrival-rate sweeps.
//!
//! An experiment file is TOML with the sections `[experiment]`, `[workload]`,
//! `[search]`, `[scoring]`, `[scheduler]`, `[beam]`, `[cost]` and
//! `[simulator]`. Every key is optional. The preset decides which exits are on,
//! whether boosting runs, and whether beam search replaces MCTS.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{make_workload, CostModel, Mixture, SyntheticProblemSpec, WorkloadProfile};
use crate::beam::BeamConfig;
use crate::metrics::{records_csv, summarize, summary_json, RequestExit, SummaryStats};
use crate::scheduler::SchedulerConfig;
use crate::scoring::{AggregationScheme, FutilityBound, ScoringConfig};
use crate::search_tree::SelectionParams;
use crate::simulator::{run, ArrivalProcess, RunOutput, SearchConfig, SimConfig, SimError, SystemKind};

#[derive(Debug, Error)]
pub enum ExperimentError {
    /// `line` is 1-based; zero when no location is known.
    #[error("{}", fmt_located(*line, message))]
    Config { line: usize, message: String },
    #[error("run {preset} at rate {rate}: {source}")]
    Run {
        preset: Preset,
        rate: f64,
        #[source]
        source: SimError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn fmt_located(line: usize, message: &str) -> String {
    if line == 0 {
        message.to_string()
    } else {
        format!("line {line}: {message}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Beam,
    Vanilla,
    Pe,
    PeNe,
    PeNeBoost,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Self::Beam, Self::Vanilla, Self::Pe, Self::PeNe, Self::PeNeBoost];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Beam => "beam",
            Self::Vanilla => "vanilla",
            Self::Pe => "pe",
            Self::PeNe => "pe_ne",
            Self::PeNeBoost => "pe_ne_boost",
        }
    }

    /// `(positive exit, negative exit, boosting)` for the MCTS presets.
    pub fn flags(self) -> (bool, bool, bool) {
        match self {
            Self::Beam | Self::Vanilla => (false, false, false),
            Self::Pe => (true, false, false),
            Self::PeNe => (true, true, false),
            Self::PeNeBoost => (true, true, true),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown preset `{s}` (expected one of beam, vanilla, pe, pe_ne, pe_ne_boost)"))
    }
}

/// One preset or a list of them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PresetList {
    One(Preset),
    Many(Vec<Preset>),
}

impl PresetList {
    pub fn to_vec(&self) -> Vec<Preset> {
        match self {
            Self::One(p) => vec![*p],
            Self::Many(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub preset: PresetList,
    /// Seeds the workload (unless `[workload] seed` is set) and the arrivals.
    pub seed: u64,
    pub arrival_rates: Vec<f64>,
    pub output_dir: PathBuf,
    pub trace: bool,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            preset: PresetList::One(Preset::PeNeBoost),
            seed: 7,
            arrival_rates: vec![0.5, 1.0, 2.0],
            output_dir: PathBuf::from("results"),
            trace: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSection {
    pub count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub mixture: Mixture,
    pub depth_min: u32,
    pub depth_max: u32,
    pub branching: u32,
    pub terminal_prob: f64,
    pub prior_sharpness: f64,
    pub token_min: u32,
    pub token_max: u32,
}

impl Default for WorkloadSection {
    fn default() -> Self {
        let p = WorkloadProfile::default();
        Self {
            count: 500,
            seed: None,
            mixture: Mixture::default(),
            depth_min: p.depth_min,
            depth_max: p.depth_max,
            branching: p.branching,
            terminal_prob: p.terminal_prob,
            prior_sharpness: p.prior_sharpness,
            token_min: p.token_min,
            token_max: p.token_max,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    pub c_puct: f64,
    pub rollout_budget: u32,
    pub expand_width: usize,
    pub depth_cap: u32,
}

impl Default for SearchSection {
    fn default() -> Self {
        let s = SearchConfig::<f64>::default();
        Self {
            c_puct: s.selection.c_puct,
            rollout_budget: s.rollout_budget,
            expand_width: s.expand_width,
            depth_cap: s.depth_cap,
        }
    }
}

/// Thresholds and aggregation. Which exits run is decided by the preset; the
/// two `*_exit_enabled` keys appear in `--print-config` output and, when
/// given, must agree with the preset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringSection {
    pub scheme: AggregationScheme,
    pub accept_threshold: f64,
    pub positive_exit_threshold: f64,
    pub first_step_threshold: f64,
    pub strict_negative_exit: bool,
    pub futility_bound: FutilityBound,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub positive_exit_enabled: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub negative_exit_enabled: Option<bool>,
}

impl Default for ScoringSection {
    fn default() -> Self {
        let s = ScoringConfig::<f64>::default();
        Self {
            scheme: s.scheme,
            accept_threshold: s.accept_threshold,
            positive_exit_threshold: s.positive_exit_threshold,
            first_step_threshold: s.first_step_threshold,
            strict_negative_exit: s.strict_negative_exit,
            futility_bound: s.futility_bound,
            positive_exit_enabled: None,
            negative_exit_enabled: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulatorSection {
    pub arrival: ArrivalProcess,
    pub event_cap: u64,
}

impl Default for SimulatorSection {
    fn default() -> Self {
        Self {
            arrival: ArrivalProcess::Poisson,
            event_cap: 10_000_000,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub workload: WorkloadSection,
    pub search: SearchSection,
    pub scoring: ScoringSection,
    pub scheduler: SchedulerConfig,
    pub beam: BeamConfig,
    pub cost: CostModel,
    pub simulator: SimulatorSection,
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line of `key = ...` inside `[section]`, if present.
fn line_of_key(text: &str, section: &str, key: &str) -> usize {
    let mut current = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = name.trim().to_string();
            continue;
        }
        let matches_key = line
            .split_once('=')
            .is_some_and(|(k, _)| k.trim() == key || k.trim().starts_with(&format!("{key}.")));
        if matches_key && (current == section || current.starts_with(&format!("{section}."))) {
            return i + 1;
        }
    }
    0
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ExperimentError::Config {
            line: e.span().map_or(0, |s| line_of_offset(text, s.start)),
            message: e.message().to_string(),
        })?;
        cfg.validate(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(|source| ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Semantic checks; `text` is only used to point at the offending line.
    pub fn validate(&self, text: &str) -> Result<(), ExperimentError> {
        let err = |section: &str, key: &str, message: String| ExperimentError::Config {
            line: line_of_key(text, section, key),
            message: format!("[{section}] {key}: {message}"),
        };
        if self.experiment.arrival_rates.is_empty() {
            return Err(err(
                "experiment",
                "arrival_rates",
                "at least one rate is required".into(),
            ));
        }
        if let Some(r) = self
            .experiment
            .arrival_rates
            .iter()
            .find(|r| !(**r > 0.0) || !r.is_finite())
        {
            return Err(err("experiment", "arrival_rates", format!("rate {r} is not positive")));
        }
        if self.experiment.preset.to_vec().is_empty() {
            return Err(err("experiment", "preset", "at least one preset is required".into()));
        }
        if self.workload.count == 0 {
            return Err(err("workload", "count", "must be at least 1".into()));
        }
        self.workload
            .mixture
            .validate()
            .map_err(|e| err("workload", "mixture", e.to_string()))?;
        for preset in self.presets() {
            let (pe, ne, boost) = preset.flags();
            let pinned = [
                (
                    "scoring",
                    "positive_exit_enabled",
                    self.scoring.positive_exit_enabled,
                    pe,
                ),
                (
                    "scoring",
                    "negative_exit_enabled",
                    self.scoring.negative_exit_enabled,
                    ne,
                ),
            ];
            for (section, key, given, wanted) in pinned {
                if preset != Preset::Beam && given.is_some_and(|g| g != wanted) {
                    return Err(err(section, key, format!("preset {preset} sets this to {wanted}")));
                }
            }
            if self.scheduler.boosting_enabled != boost && text.contains("boosting_enabled") {
                return Err(err(
                    "scheduler",
                    "boosting_enabled",
                    format!("preset {preset} sets this to {boost}"),
                ));
            }
            self.resolve(preset).validate().map_err(|e| {
                let (section, key) = guess_key(&e.to_string());
                err(section, key, e.to_string())
            })?;
        }
        self.profile().validate().map_err(|e| {
            let msg = e.to_string();
            let key = [
                "depth_min",
                "branching",
                "terminal_prob",
                "prior_sharpness",
                "token_min",
            ]
            .into_iter()
            .find(|k| msg.contains(k))
            .unwrap_or("depth_min");
            err("workload", key, msg)
        })?;
        Ok(())
    }

    pub fn presets(&self) -> Vec<Preset> {
        self.experiment.preset.to_vec()
    }

    pub fn workload_seed(&self) -> u64 {
        self.workload.seed.unwrap_or(self.experiment.seed)
    }

    pub fn profile(&self) -> WorkloadProfile {
        let w = &self.workload;
        WorkloadProfile {
            depth_min: w.depth_min,
            depth_max: w.depth_max,
            branching: w.branching,
            terminal_prob: w.terminal_prob,
            prior_sharpness: w.prior_sharpness,
            token_min: w.token_min,
            token_max: w.token_max,
            accept_threshold: self.scoring.accept_threshold,
            positive_exit_threshold: self.scoring.positive_exit_threshold,
        }
    }

    pub fn workload(&self) -> Result<Vec<SyntheticProblemSpec>, ExperimentError> {
        make_workload(
            self.workload.count,
            self.workload.mixture,
            self.workload_seed(),
            &self.profile(),
        )
        .map_err(|e| ExperimentError::Config {
            line: 0,
            message: format!("[workload] {e}"),
        })
    }

    /// The simulator config a preset runs with.
    pub fn resolve(&self, preset: Preset) -> SimConfig<f64> {
        let (pe, ne, boost) = preset.flags();
        let s = &self.scoring;
        let mut scheduler = self.scheduler.clone();
        scheduler.boosting_enabled = boost;
        SimConfig {
            system: if preset == Preset::Beam {
                SystemKind::Beam
            } else {
                SystemKind::Mcts
            },
            search: SearchConfig {
                selection: SelectionParams {
                    c_puct: self.search.c_puct,
                },
                rollout_budget: self.search.rollout_budget,
                expand_width: self.search.expand_width,
                depth_cap: self.search.depth_cap,
            },
            scoring: ScoringConfig {
                scheme: s.scheme,
                accept_threshold: s.accept_threshold,
                positive_exit_threshold: s.positive_exit_threshold,
                first_step_threshold: s.first_step_threshold,
                strict_negative_exit: s.strict_negative_exit,
                futility_bound: s.futility_bound,
                positive_exit_enabled: pe,
                negative_exit_enabled: ne,
            },
            scheduler,
            beam: self.beam.clone(),
            cost: self.cost.clone(),
            arrival: self.simulator.arrival,
            event_cap: self.simulator.event_cap,
            trace: self.experiment.trace,
        }
    }

    /// The file as it would read for a single preset with every flag resolved.
    pub fn effective(&self, preset: Preset) -> Self {
        let (pe, ne, boost) = preset.flags();
        let mut out = self.clone();
        out.experiment.preset = PresetList::One(preset);
        out.workload.seed = Some(self.workload_seed());
        out.scheduler.boosting_enabled = boost;
        if preset != Preset::Beam {
            out.scoring.positive_exit_enabled = Some(pe);
            out.scoring.negative_exit_enabled = Some(ne);
        }
        out
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }
}

fn guess_key(message: &str) -> (&'static str, &'static str) {
    const KEYS: [(&str, &str); 16] = [
        ("scheduler", "max_concurrency"),
        ("scheduler", "beta"),
        ("scheduler", "proximity"),
        ("scheduler", "obs_threshold"),
        ("scheduler", "tick_interval"),
        ("scoring", "accept_threshold"),
        ("scoring", "positive_exit_threshold"),
        ("scoring", "first_step_threshold"),
        ("beam", "beam_width"),
        ("beam", "candidates_per_beam"),
        ("beam", "max_depth"),
        ("cost", "per_token_latency"),
        ("cost", "engine_capacity"),
        ("cost", "reward_latency"),
        ("search", "rollout_budget"),
        ("search", "expand_width"),
    ];
    for (section, key) in KEYS {
        if message.contains(key) {
            return (section, key);
        }
    }
    if message.contains("c_puct") {
        return ("search", "c_puct");
    }
    if message.contains("depth_cap") {
        return ("search", "depth_cap");
    }
    if message.contains("event_cap") {
        return ("simulator", "event_cap");
    }
    if message.contains("scheme") || message.contains("aggregation") {
        return ("scoring", "scheme");
    }
    ("experiment", "preset")
}

/// One simulated run of the sweep.
pub struct SweepPoint {
    pub preset: Preset,
    pub rate: f64,
    pub output: RunOutput,
    pub summary: SummaryStats,
}

/// Runs every `(preset, rate)` pair on the same workload and arrival seed.
/// Pairs run on separate threads; each run is independent and deterministic.
pub fn run_sweep(
    config: &ExperimentConfig,
    presets: &[Preset],
    rates: &[f64],
) -> Result<Vec<SweepPoint>, ExperimentError> {
    let workload = config.workload()?;
    let seed = config.experiment.seed;
    let jobs: Vec<(Preset, f64)> = presets
        .iter()
        .flat_map(|&p| rates.iter().map(move |&r| (p, r)))
        .collect();
    let results: Vec<Result<SweepPoint, ExperimentError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|&(preset, rate)| {
                let sim = config.resolve(preset);
                let workload = &workload;
                scope.spawn(move || {
                    let output = run(workload, rate, &sim, seed).map_err(|source| ExperimentError::Run {
                        preset,
                        rate,
                        source,
                    })?;
                    let summary = summarize(&output.records).map_err(|e| ExperimentError::Run {
                        preset,
                        rate,
                        source: SimError::Stalled(e.to_string()),
                    })?;
                    Ok(SweepPoint {
                        preset,
                        rate,
                        output,
                        summary,
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep worker panicked"))
            .collect()
    });
    results.into_iter().collect()
}

/// `0.5 -> "0.5"`, `2.0 -> "2"`.
pub fn rate_label(rate: f64) -> String {
    format!("{rate}")
}

pub const SWEEP_HEADER: &str = "preset,rate,requests,p50_latency,p99_latency,throughput,total_tokens,solve_rate,positive,negative,budget_exhausted,beam_finished";

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for p in points {
        let s = &p.summary;
        let count = |k: RequestExit| s.exit_histogram.get(&k).copied().unwrap_or(0);
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{},{:.6},{},{},{},{}\n",
            p.preset,
            rate_label(p.rate),
            s.requests,
            s.p50_latency,
            s.p99_latency,
            s.throughput,
            s.total_tokens,
            s.solve_rate,
            count(RequestExit::Positive),
            count(RequestExit::Negative),
            count(RequestExit::BudgetExhausted),
            count(RequestExit::BeamFinished),
        ));
    }
    out
}

/// File name and contents of every output of a sweep.
pub fn render_outputs(points: &[SweepPoint]) -> Vec<(String, String)> {
    let mut files = Vec::new();
    for p in points {
        let stem = format!("{}_{}", p.preset, rate_label(p.rate));
        files.push((format!("{stem}.csv"), records_csv(&p.output.records)));
        files.push((format!("{stem}.json"), summary_json(&p.summary)));
        if !p.output.trace.is_empty() {
            let mut trace = p.output.trace.join("\n");
            trace.push('\n');
            files.push((format!("{stem}.trace.jsonl"), trace));
        }
    }
    files.push(("sweep.csv".to_string(), sweep_csv(points)));
    files
}

pub fn write_outputs(dir: &Path, files: &[(String, String)]) -> Result<(), ExperimentError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ExperimentError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    for (name, body) in files {
        let path = dir.join(name);
        fs::write(&path, body).map_err(io(&path))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::parse("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.presets(), vec![Preset::PeNeBoost]);
    }

    #[test]
    fn preset_flag_matrix() {
        let cfg = ExperimentConfig::default();
        let flags = |p| {
            let s = cfg.resolve(p);
            (
                s.scoring.positive_exit_enabled,
                s.scoring.negative_exit_enabled,
                s.scheduler.boosting_enabled,
                s.system,
            )
        };
        assert_eq!(flags(Preset::Vanilla), (false, false, false, SystemKind::Mcts));
        assert_eq!(flags(Preset::Pe), (true, false, false, SystemKind::Mcts));
        assert_eq!(flags(Preset::PeNe), (true, true, false, SystemKind::Mcts));
        assert_eq!(flags(Preset::PeNeBoost), (true, true, true, SystemKind::Mcts));
        assert_eq!(flags(Preset::Beam).3, SystemKind::Beam);
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let text = "[experiment]\nseed = 3\n\n[scheduler]\nbeta = \"x\"\n";
        let err = ExperimentConfig::parse(text).unwrap_err();
        assert!(err.to_string().starts_with("line 5:"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::parse("[cost]\nper_token = 1.0\n").unwrap_err();
        assert!(err.to_string().starts_with("line 2:"), "{err}");
    }

    #[test]
    fn semantic_errors_point_at_the_key() {
        let text = "[experiment]\npreset = \"pe\"\n\n[scheduler]\nmax_concurrency = 4\nproximity = 1.5\n";
        let err = ExperimentConfig::parse(text).unwrap_err();
        assert!(err.to_string().starts_with("line 6:"), "{err}");
        let err = ExperimentConfig::parse("[experiment]\narrival_rates = [1.0, -2.0]\n").unwrap_err();
        assert!(err.to_string().starts_with("line 2:"), "{err}");
        let err = ExperimentConfig::parse("[workload]\nmixture = { easy = 0.5, hard = 0.1, unsolvable = 0.1 }\n")
            .unwrap_err();
        assert!(err.to_string().starts_with("line 2:"), "{err}");
    }

    #[test]
    fn preset_lists_parse() {
        let cfg = ExperimentConfig::parse("[experiment]\npreset = [\"beam\", \"vanilla\"]\n").unwrap();
        assert_eq!(cfg.presets(), vec![Preset::Beam, Preset::Vanilla]);
        assert!("nope".parse::<Preset>().is_err());
        assert_eq!("pe_ne".parse::<Preset>().unwrap(), Preset::PeNe);
    }

    #[test]
    fn effective_config_round_trips() {
        let cfg = ExperimentConfig::default();
        let text = cfg.effective(Preset::Pe).to_toml();
        assert!(text.contains("positive_exit_enabled = true"));
        assert!(text.contains("negative_exit_enabled = false"));
        assert!(text.contains("boosting_enabled = false"));
        let back = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(back.presets(), vec![Preset::Pe]);
        assert_eq!(back.resolve(Preset::Pe), cfg.resolve(Preset::Pe));
    }

    #[test]
    fn flags_must_agree_with_the_preset() {
        let err = ExperimentConfig::parse("[experiment]\npreset = \"vanilla\"\n[scheduler]\nboosting_enabled = true\n")
            .unwrap_err();
        assert!(err.to_string().starts_with("line 4:"), "{err}");
        let err = ExperimentConfig::parse("[experiment]\npreset = \"pe\"\n[scoring]\nnegative_exit_enabled = true\n")
            .unwrap_err();
        assert!(err.to_string().contains("preset pe sets this to false"), "{err}");
    }

    #[test]
    fn rate_labels() {
        assert_eq!(rate_label(0.5), "0.5");
        assert_eq!(rate_label(2.0), "2");
    }
}
