//! Training regimes on the maze and the four-way comparison.
//!
//! Every rollout, evaluation episode and bootstrap draw has its own seed
//! derived from the run seed, so runs are bit-reproducible and rollouts can be
//! sampled in parallel.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grpo::{
    policy_step, surrogate_with_gradient, Gradient, GrpoError, Mode, RolloutGroup, SampledResponse, TabularPolicy,
    TokenStep,
};
use crate::maze::{accuracy_reward, latent_utility, rollout, Action, Maze, MazeError, MazeSpec, Trajectory};
use crate::prob::{exact_kl, make_distribution};
use crate::seeds::{derive_seed, stream_rng, Stream};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error(transparent)]
    Maze(#[from] MazeError),
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: &'static str, step: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Unrewarded,
    Rewarded,
    TwoStage,
    RewardedThroughout,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::Unrewarded, Regime::Rewarded, Regime::TwoStage, Regime::RewardedThroughout];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Unrewarded => "unrewarded",
            Regime::Rewarded => "rewarded",
            Regime::TwoStage => "two_stage",
            Regime::RewardedThroughout => "rewarded_throughout",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Unrewarded,
    Rewarded,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Unrewarded => "unrewarded",
            Phase::Rewarded => "rewarded",
        }
    }

    fn mode(self) -> Mode {
        match self {
            Phase::Unrewarded => Mode::Unrewarded,
            Phase::Rewarded => Mode::Rewarded,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub regime: Regime,
    pub steps_phase1: usize,
    pub steps_phase2: usize,
    pub group_size: usize,
    pub batch_prompts: usize,
    pub eps: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub temperature: f64,
    /// Gradient steps per sampled batch.
    pub inner_epochs: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// Re-anchor the KL reference at each phase entry; otherwise keep the
    /// initial policy as reference throughout.
    pub reset_reference_each_phase: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::TwoStage,
            steps_phase1: 200,
            steps_phase2: 100,
            group_size: 5,
            batch_prompts: 8,
            eps: 0.2,
            beta: 0.01,
            learning_rate: 20.0,
            temperature: 1.0,
            inner_epochs: 1,
            seed: 0,
            eval_every: 20,
            eval_episodes: 500,
            reset_reference_each_phase: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.group_size < 2 {
            return fail(format!("group_size must be at least 2, got {}", self.group_size));
        }
        if self.batch_prompts == 0 || self.inner_epochs == 0 || self.eval_every == 0 || self.eval_episodes == 0 {
            return fail("batch_prompts, inner_epochs, eval_every and eval_episodes must be positive".into());
        }
        // Both zero is the untrained no-op; one zero would silently drop a stage.
        if self.regime == Regime::TwoStage && (self.steps_phase1 == 0) != (self.steps_phase2 == 0) {
            return fail("two_stage needs both phase step counts > 0".into());
        }
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return fail(format!("eps must lie in (0, 1), got {}", self.eps));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return fail(format!("beta must be nonnegative, got {}", self.beta));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail(format!("temperature must be positive, got {}", self.temperature));
        }
        Ok(())
    }

    /// Phases run by the configured regime. Single regimes use phase 1 only;
    /// rewarded_throughout spends both budgets rewarded, under one reference.
    pub fn phases(&self) -> Vec<(Phase, usize)> {
        match self.regime {
            Regime::Unrewarded => vec![(Phase::Unrewarded, self.steps_phase1)],
            Regime::Rewarded => vec![(Phase::Rewarded, self.steps_phase1)],
            Regime::TwoStage => vec![(Phase::Unrewarded, self.steps_phase1), (Phase::Rewarded, self.steps_phase2)],
            Regime::RewardedThroughout => vec![(Phase::Rewarded, self.steps_phase1 + self.steps_phase2)],
        }
    }
}

/// One evaluation row. Training statistics are empty for the step-0 row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub phase: String,
    pub goal_rate: f64,
    pub mean_len: f64,
    pub surrogate: Option<f64>,
    pub clip_frac: Option<f64>,
    pub kl_ref: f64,
    pub mlr_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunMetrics {
    pub records: Vec<MetricsRecord>,
}

impl RunMetrics {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), TrainError> {
        let mut writer = csv::Writer::from_writer(out);
        for r in &self.records {
            writer.serialize(r)?;
        }
        if self.records.is_empty() {
            writer.write_record([
                "step",
                "phase",
                "goal_rate",
                "mean_len",
                "surrogate",
                "clip_frac",
                "kl_ref",
                "mlr_rate",
            ])?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn final_goal_rate(&self) -> Option<f64> {
        self.records.last().map(|r| r.goal_rate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Evaluation {
    pub goal_rate: f64,
    pub mean_len: f64,
}

/// Goal-reaching frequency over `episodes` temperature-1 rollouts drawn from
/// the evaluation stream of `seed`.
pub fn evaluate(policy: &TabularPolicy, maze: &Maze, episodes: usize, seed: u64) -> Result<Evaluation, TrainError> {
    if episodes == 0 {
        return Err(TrainError::Config("episodes must be positive".into()));
    }
    let trajectories: Vec<Trajectory> = (0..episodes)
        .into_par_iter()
        .map(|e| rollout(maze, policy, derive_seed(seed, Stream::Evaluation, e as u64)))
        .collect::<Result<_, _>>()?;
    let n = episodes as f64;
    Ok(Evaluation {
        goal_rate: trajectories.iter().filter(|t| t.reached_goal).count() as f64 / n,
        mean_len: trajectories.iter().map(|t| t.length as f64).sum::<f64>() / n,
    })
}

/// Share of (non-goal cell, unordered action pair) combinations on which
/// `h = π/π_ref` does not order the pair against the latent utility. Ties in
/// either `h` or the utility are not violations.
pub fn mlr_diagnostic(policy: &TabularPolicy, reference: &TabularPolicy, maze: &Maze) -> f64 {
    let mut pairs = 0usize;
    let mut violations = 0usize;
    for id in 0..maze.cell_count() as u32 {
        let cell = maze.cell(id);
        if maze.is_goal(cell) || maze.distance(cell).is_none() {
            continue;
        }
        let state = maze.state(cell);
        let pi = policy.action_probs(state);
        let pr = reference.action_probs(state);
        let h: Vec<f64> = pi.iter().zip(&pr).map(|(a, b)| a / b).collect();
        let u: Vec<f64> = Action::ALL.iter().map(|&a| latent_utility(maze, cell, a)).collect();
        for a in 0..Action::COUNT {
            for b in a + 1..Action::COUNT {
                pairs += 1;
                let dh = h[a] - h[b];
                if dh.abs() > 1e-12 * h[a].max(h[b]) && dh * (u[a] - u[b]) < 0.0 {
                    violations += 1;
                }
            }
        }
    }
    if pairs == 0 {
        return 1.0;
    }
    1.0 - violations as f64 / pairs as f64
}

/// Mean over reachable non-goal cells of `KL(π(·|s) ‖ π_ref(·|s))`.
pub fn mean_kl_to_reference(policy: &TabularPolicy, reference: &TabularPolicy, maze: &Maze) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for id in 0..maze.cell_count() as u32 {
        let cell = maze.cell(id);
        if maze.is_goal(cell) || maze.distance(cell).is_none() {
            continue;
        }
        let state = maze.state(cell);
        let (Ok(p), Ok(q)) =
            (make_distribution(&policy.action_probs(state)), make_distribution(&reference.action_probs(state)))
        else {
            return f64::NAN;
        };
        total += exact_kl(&p, &q).unwrap_or(f64::INFINITY);
        count += 1;
    }
    total / count.max(1) as f64
}

fn to_response(trajectory: &Trajectory, reference: &TabularPolicy, reward: f64) -> SampledResponse {
    let steps = trajectory
        .states
        .iter()
        .zip(&trajectory.actions)
        .zip(&trajectory.behavior_probs)
        .map(|((&state, &action), &old_prob)| TokenStep {
            state,
            action: action.index(),
            old_prob,
            ref_prob: reference.prob(state, action.index()),
        })
        .collect();
    SampledResponse { steps, reward }
}

/// Seed of rollout `index` sampled at global step `step`.
fn rollout_seed(seed: u64, step: usize, index: usize) -> u64 {
    derive_seed(derive_seed(seed, Stream::Rollout, step as u64), Stream::Rollout, index as u64)
}

pub type RewardFn<'a> = &'a (dyn Fn(&Trajectory) -> f64 + Sync);

/// Running state shared by consecutive phases of one run.
pub struct PhaseContext<'a> {
    pub maze: &'a Maze,
    pub config: &'a TrainConfig,
    /// Rewards for rewarded phases. Unrewarded phases never call it.
    pub reward: RewardFn<'a>,
    /// Global step at phase entry.
    pub start_step: usize,
}

/// Runs `steps` GRPO updates of one phase. `reference` anchors the KL term.
/// Appends an evaluation record every `eval_every` global steps and at the end
/// of the phase.
pub fn run_phase(
    policy: TabularPolicy,
    reference: &TabularPolicy,
    ctx: &PhaseContext<'_>,
    phase: Phase,
    steps: usize,
    metrics: &mut RunMetrics,
) -> Result<TabularPolicy, TrainError> {
    let config = ctx.config;
    let maze = ctx.maze;
    let mode = phase.mode();
    let mut policy = policy;
    let per_step = config.batch_prompts * config.group_size;
    for k in 0..steps {
        let global = ctx.start_step + k;
        let trajectories: Vec<Trajectory> = (0..per_step)
            .into_par_iter()
            .map(|i| rollout(maze, &policy, rollout_seed(config.seed, global, i)))
            .collect::<Result<_, _>>()?;
        let groups: Vec<RolloutGroup> = trajectories
            .chunks(config.group_size)
            .map(|chunk| {
                let responses = chunk
                    .iter()
                    .map(|t| {
                        let reward = match phase {
                            Phase::Rewarded => (ctx.reward)(t),
                            Phase::Unrewarded => 0.0,
                        };
                        to_response(t, reference, reward)
                    })
                    .collect();
                RolloutGroup::new(maze.state(maze.start()), responses, maze.max_steps())
            })
            .collect::<Result<_, _>>()?;

        let mut surrogate = 0.0;
        let mut clip_frac = 0.0;
        for epoch in 0..config.inner_epochs {
            let evals: Vec<_> = groups
                .par_iter()
                .map(|g| surrogate_with_gradient(&policy, g, config.eps, config.beta, mode))
                .collect::<Result<_, _>>()?;
            let scale = 1.0 / groups.len() as f64;
            let mut gradient = Gradient::default();
            for (eval, g) in &evals {
                gradient.add_scaled(g, scale);
                if epoch == 0 {
                    surrogate += scale * eval.value;
                    clip_frac += scale * eval.clip_fraction;
                }
            }
            if !surrogate.is_finite() {
                return Err(TrainError::NonFinite { what: "surrogate", step: global });
            }
            policy = policy_step(&policy, &gradient, config.learning_rate).map_err(|e| match e {
                GrpoError::NonFiniteGradient(_) => TrainError::NonFinite { what: "gradient", step: global },
                other => other.into(),
            })?;
        }

        let done = global + 1;
        if done.is_multiple_of(config.eval_every) || k + 1 == steps {
            metrics.records.push(record(
                &policy,
                reference,
                maze,
                config,
                done,
                phase.as_str(),
                Some((surrogate, clip_frac)),
            )?);
        }
    }
    Ok(policy)
}

fn record(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    maze: &Maze,
    config: &TrainConfig,
    step: usize,
    phase: &str,
    training: Option<(f64, f64)>,
) -> Result<MetricsRecord, TrainError> {
    let eval = evaluate(policy, maze, config.eval_episodes, config.seed)?;
    let kl_ref = mean_kl_to_reference(policy, reference, maze);
    if !kl_ref.is_finite() {
        return Err(TrainError::NonFinite { what: "policy", step });
    }
    Ok(MetricsRecord {
        step,
        phase: phase.to_string(),
        goal_rate: eval.goal_rate,
        mean_len: eval.mean_len,
        surrogate: training.map(|t| t.0),
        clip_frac: training.map(|t| t.1),
        kl_ref,
        mlr_rate: mlr_diagnostic(policy, reference, maze),
    })
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub metrics: RunMetrics,
    pub policy: TabularPolicy,
}

/// One regime from the uniform policy, with an evaluation row at step 0.
pub fn run_regime(maze: &Maze, config: &TrainConfig, reward: RewardFn<'_>) -> Result<RunResult, TrainError> {
    config.validate()?;
    let initial = TabularPolicy::with_temperature(Action::COUNT, config.temperature)?;
    let mut metrics = RunMetrics::default();
    metrics.records.push(record(&initial, &initial, maze, config, 0, "base", None)?);
    let mut policy = initial.clone();
    let mut step = 0;
    for (phase, steps) in config.phases() {
        let reference = if config.reset_reference_each_phase { policy.clone() } else { initial.clone() };
        let ctx = PhaseContext { maze, config, reward, start_step: step };
        policy = run_phase(policy, &reference, &ctx, phase, steps, &mut metrics)?;
        step += steps;
    }
    Ok(RunResult { metrics, policy })
}

pub fn run_regime_with_accuracy(maze: &Maze, config: &TrainConfig) -> Result<RunResult, TrainError> {
    run_regime(maze, config, &accuracy_reward)
}

/// Maze, training settings and seed count for `train` and `compare`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub maze: MazeSpec,
    pub train: TrainConfig,
    pub seeds: usize,
    pub bootstrap_resamples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self { maze: MazeSpec::default(), train: TrainConfig::default(), seeds: 10, bootstrap_resamples: 2000 }
    }
}

impl ExperimentConfig {
    /// Run seed of replicate `i`.
    pub fn run_seed(&self, i: usize) -> u64 {
        derive_seed(self.train.seed, Stream::Experiment, i as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Spread {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub best: f64,
}

impl Spread {
    fn of(values: &[f64]) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Self {
            median: quantile(&sorted, 0.5),
            q1: quantile(&sorted, 0.25),
            q3: quantile(&sorted, 0.75),
            best: *sorted.last().unwrap_or(&f64::NAN),
        }
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn median(values: &[f64]) -> f64 {
    Spread::of(values).median
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegimeRow {
    pub regime: Regime,
    pub steps: usize,
    pub final_goal_rates: Vec<f64>,
    pub goal_rate: Spread,
    /// Median of per-seed `final - base`.
    pub delta_vs_base: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairedDelta {
    pub median: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub seeds: Vec<u64>,
    pub base_goal_rates: Vec<f64>,
    pub base: Spread,
    pub regimes: Vec<RegimeRow>,
    pub unrewarded_vs_base: PairedDelta,
    pub two_stage_vs_throughout: PairedDelta,
}

impl ComparisonReport {
    pub fn row(&self, regime: Regime) -> Option<&RegimeRow> {
        self.regimes.iter().find(|r| r.regime == regime)
    }
}

/// Median of paired differences with a percentile bootstrap interval over seeds.
fn paired_delta(a: &[f64], b: &[f64], resamples: usize, seed: u64) -> PairedDelta {
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mut rng = stream_rng(seed, Stream::Bootstrap, 0);
    let mut stats: Vec<f64> = (0..resamples)
        .map(|_| {
            let sample: Vec<f64> = (0..diffs.len()).map(|_| diffs[rng.gen_range(0..diffs.len())]).collect();
            median(&sample)
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    PairedDelta {
        median: median(&diffs),
        ci_low: quantile(&stats, 0.025),
        ci_high: quantile(&stats, 0.975),
        confidence: 0.95,
    }
}

/// All four regimes on every replicate seed, each starting from the uniform
/// policy. The two-stage and rewarded-throughout runs spend the same number of
/// steps and rollouts.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ComparisonReport, TrainError> {
    run_experiment_with_reward(config, &accuracy_reward)
}

pub fn run_experiment_with_reward(
    config: &ExperimentConfig,
    reward: RewardFn<'_>,
) -> Result<ComparisonReport, TrainError> {
    if config.seeds == 0 {
        return Err(TrainError::Config("seeds must be positive".into()));
    }
    let maze = Maze::from_spec(&config.maze)?;
    let seeds: Vec<u64> = (0..config.seeds).map(|i| config.run_seed(i)).collect();
    let jobs: Vec<(u64, Regime)> = seeds.iter().flat_map(|&s| Regime::ALL.map(|r| (s, r))).collect();
    let runs: Vec<RunMetrics> = jobs
        .par_iter()
        .map(|&(seed, regime)| {
            let mut train = config.train.clone();
            train.seed = seed;
            train.regime = regime;
            run_regime(&maze, &train, reward).map(|r| r.metrics)
        })
        .collect::<Result<_, _>>()?;

    let final_rate = |m: &RunMetrics| m.final_goal_rate().unwrap_or(f64::NAN);
    let base_goal_rates: Vec<f64> = runs.iter().step_by(Regime::ALL.len()).map(|m| m.records[0].goal_rate).collect();
    let mut per_regime: Vec<Vec<f64>> = vec![Vec::new(); Regime::ALL.len()];
    for (i, m) in runs.iter().enumerate() {
        per_regime[i % Regime::ALL.len()].push(final_rate(m));
    }
    let regimes = Regime::ALL
        .iter()
        .zip(&per_regime)
        .map(|(&regime, rates)| {
            let mut train = config.train.clone();
            train.regime = regime;
            let deltas: Vec<f64> = rates.iter().zip(&base_goal_rates).map(|(r, b)| r - b).collect();
            RegimeRow {
                regime,
                steps: train.phases().iter().map(|p| p.1).sum(),
                final_goal_rates: rates.clone(),
                goal_rate: Spread::of(rates),
                delta_vs_base: median(&deltas),
            }
        })
        .collect();
    let resamples = config.bootstrap_resamples.max(1);
    Ok(ComparisonReport {
        base: Spread::of(&base_goal_rates),
        unrewarded_vs_base: paired_delta(&per_regime[0], &base_goal_rates, resamples, config.train.seed),
        two_stage_vs_throughout: paired_delta(
            &per_regime[2],
            &per_regime[3],
            resamples,
            config.train.seed.wrapping_add(1),
        ),
        seeds,
        base_goal_rates,
        regimes,
    })
}
