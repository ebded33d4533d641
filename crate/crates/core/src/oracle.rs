//! Independent verifiers for the water-filling update.
//!
//! Nothing here reuses the solver path in [`crate::waterfill`]: the surrogate
//! is maximized by exhaustive simplex search or projected supergradient
//! ascent, improvement is measured by direct expectations, and the
//! association margin and covariance are computed by two separate formulas.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::prob::{exact_kl, Distribution, UtilityVector};
use crate::seeds::{derive_seed, stream_rng, Stream};
use crate::waterfill::{
    delta_j_decomposition, expected_utility, mass_balance_residual, waterfill_update, StateInstance, WaterfillError,
    WaterfillResult, DEFAULT_TOL,
};

/// Margin floor for sign checks; anything below is a failure.
pub const VERIFY_TOL: f64 = 1e-12;
/// Margin floor for the surrogate-optimality comparison.
pub const SURROGATE_TOL: f64 = 1e-8;
/// Bound on `|mass-balance residual|`.
pub const MASS_TOL: f64 = 1e-10;
/// Coarsest grid step accepted by the exhaustive search.
pub const MAX_RESOLUTION: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("grid resolution {0} must lie in (0, {MAX_RESOLUTION}]")]
    Resolution(f64),
    #[error("vocabulary size must be at least 2, got {0}")]
    VocabSize(usize),
    #[error("resolutions must be strictly increasing and at least 16, got {0:?}")]
    Resolutions(Vec<usize>),
    #[error("empty parameter grid `{0}`")]
    EmptyGrid(&'static str),
    #[error(transparent)]
    Waterfill(#[from] WaterfillError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckName {
    SurrogateOptimality,
    ImprovementVsRef,
    ImprovementVsProp,
    AssociationInequality,
    MassBalance,
    FirstOrderCovariance,
}

impl CheckName {
    pub const ALL: [CheckName; 6] = [
        CheckName::SurrogateOptimality,
        CheckName::ImprovementVsRef,
        CheckName::ImprovementVsProp,
        CheckName::AssociationInequality,
        CheckName::MassBalance,
        CheckName::FirstOrderCovariance,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CheckName::SurrogateOptimality => "surrogate_optimality",
            CheckName::ImprovementVsRef => "improvement_vs_ref",
            CheckName::ImprovementVsProp => "improvement_vs_prop",
            CheckName::AssociationInequality => "association_inequality",
            CheckName::MassBalance => "mass_balance",
            CheckName::FirstOrderCovariance => "first_order_covariance",
        }
    }

    /// `J(π*) ≥ J(π_prop)` is recorded but does not decide `passed`: under
    /// the likelihood-ratio ordering the update moves mass back toward the
    /// reference on low-ratio tokens, so it generally lands below the proposal.
    pub fn gating(self) -> bool {
        !matches!(self, CheckName::ImprovementVsProp)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: CheckName,
    pub pass: bool,
    pub margin: f64,
    pub tolerance: f64,
    pub gating: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resolution: Option<usize>,
}

impl Check {
    fn new(name: CheckName, margin: f64, tolerance: f64) -> Self {
        Self { name, pass: margin >= -tolerance, margin, tolerance, gating: name.gating(), resolution: None }
    }

    fn at(mut self, n: usize) -> Self {
        self.resolution = Some(n);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    Theorem1,
    Theorem2,
    AntiMlrControl,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolutionRow {
    pub n: usize,
    pub tau: f64,
    pub delta_j: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Refinement {
    /// `|τ(N_{k+1}) - τ(N_k)|` for consecutive resolutions.
    pub tau_diffs: Vec<f64>,
    pub strictly_decreasing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    pub instance_id: u64,
    pub kind: ReportKind,
    pub vocab_size: usize,
    pub eps: f64,
    pub beta: f64,
    pub tau: f64,
    pub checks: Vec<Check>,
    pub worst_margin: f64,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resolutions: Option<Vec<ResolutionRow>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub refinement: Option<Refinement>,
}

impl VerificationReport {
    fn assemble(instance_id: u64, kind: ReportKind, inst: &StateInstance, tau: f64, checks: Vec<Check>) -> Self {
        let gating = checks.iter().filter(|c| c.gating);
        let worst_margin = gating.clone().map(|c| c.margin).fold(f64::INFINITY, f64::min);
        let passed = gating.clone().all(|c| c.pass);
        Self {
            instance_id,
            kind,
            vocab_size: inst.vocab_size(),
            eps: inst.eps(),
            beta: inst.beta(),
            tau,
            checks,
            worst_margin,
            passed,
            resolutions: None,
            refinement: None,
        }
    }

    pub fn check(&self, name: CheckName) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(move |c| c.name == name)
    }

    /// Smallest margin recorded for `name`.
    pub fn margin(&self, name: CheckName) -> Option<f64> {
        self.check(name).map(|c| c.margin).reduce(f64::min)
    }
}

/// Settings for the discrete verification population.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Theorem1Config {
    pub vocab_min: usize,
    pub vocab_max: usize,
    pub eps_grid: Vec<f64>,
    pub beta_grid: Vec<f64>,
    /// Grid step for the exhaustive search used when `V ≤ 3`.
    pub grid_resolution: f64,
    /// Iteration budget of projected ascent used when `V > 3`.
    pub ascent_iters: usize,
}

impl Default for Theorem1Config {
    fn default() -> Self {
        Self {
            vocab_min: 2,
            vocab_max: 64,
            eps_grid: vec![0.1, 0.2, 0.5],
            beta_grid: vec![0.001, 0.01],
            grid_resolution: 1e-3,
            ascent_iters: 2_000,
        }
    }
}

/// Settings for the discretized density population.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Theorem2Config {
    pub resolutions: Vec<usize>,
    pub eps_grid: Vec<f64>,
    pub beta: f64,
    pub ascent_iters: usize,
}

impl Default for Theorem2Config {
    fn default() -> Self {
        Self { resolutions: vec![64, 128, 256, 512], eps_grid: vec![0.1, 0.2, 0.5], beta: 0.01, ascent_iters: 500 }
    }
}

/// Densities on `[0, 1]` sampled at `N` midpoints, each normalized so the
/// midpoint rule integrates it to one.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityInstance {
    pub grid: Vec<f64>,
    pub cell_width: f64,
    pub f_ref: Vec<f64>,
    pub f_prop: Vec<f64>,
    pub u_star: Vec<f64>,
    pub eps: f64,
    pub beta: f64,
}

impl DensityInstance {
    pub fn from_fns(
        n: usize,
        f_ref: impl Fn(f64) -> f64,
        f_prop: impl Fn(f64) -> f64,
        u_star: impl Fn(f64) -> f64,
        eps: f64,
        beta: f64,
    ) -> Self {
        let cell_width = 1.0 / n as f64;
        let grid: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) * cell_width).collect();
        let normalize = |f: &dyn Fn(f64) -> f64| {
            let raw: Vec<f64> = grid.iter().map(|&y| f(y)).collect();
            let integral = raw.iter().sum::<f64>() * cell_width;
            raw.into_iter().map(|v| v / integral).collect::<Vec<_>>()
        };
        let f_ref = normalize(&f_ref);
        let f_prop = normalize(&f_prop);
        let u_star = grid.iter().map(|&y| u_star(y)).collect();
        Self { grid, cell_width, f_ref, f_prop, u_star, eps, beta }
    }

    pub fn resolution(&self) -> usize {
        self.grid.len()
    }

    /// Midpoint cell masses as a discrete token state.
    pub fn to_state_instance(&self) -> Result<StateInstance, WaterfillError> {
        let masses = |f: &[f64]| f.iter().map(|v| v * self.cell_width).collect::<Vec<_>>();
        let to_dist = |field, m: Vec<f64>| {
            Distribution::from_weights(&m).map_err(|source| WaterfillError::Distribution { field, source })
        };
        let pi_ref = to_dist("f_ref", masses(&self.f_ref))?;
        let pi_prop = to_dist("f_prop", masses(&self.f_prop))?;
        let u = UtilityVector::new(self.u_star.clone())
            .map_err(|source| WaterfillError::Distribution { field: "u_star", source })?;
        StateInstance::new(pi_ref, pi_prop, Some(u), self.eps, self.beta)
    }
}

fn uniform_in(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

/// Random instance whose likelihood ratio is a nondecreasing function of
/// the utility: `π_prop ∝ π_ref · exp(κ · rank(u*))` with `κ > 0`.
pub fn sample_mlr_instance(seed: u64, vocab_size: usize, eps: f64, beta: f64) -> Result<StateInstance, OracleError> {
    if vocab_size < 2 {
        return Err(OracleError::VocabSize(vocab_size));
    }
    let mut rng = stream_rng(seed, Stream::Instance, vocab_size as u64);
    // Exponential weights give a flat Dirichlet draw; the offset keeps π_ref off the floor.
    let ref_weights: Vec<f64> = (0..vocab_size).map(|_| 1e-3 - (1.0 - rng.gen::<f64>()).ln()).collect();
    let u: Vec<f64> = (0..vocab_size).map(|_| uniform_in(&mut rng, -1.0, 1.0)).collect();
    let kappa = uniform_in(&mut rng, 0.5, 3.0);

    let mut order: Vec<usize> = (0..vocab_size).collect();
    order.sort_by(|&a, &b| u[a].total_cmp(&u[b]));
    let mut rank = vec![0.0; vocab_size];
    for (position, &token) in order.iter().enumerate() {
        rank[token] = position as f64 / (vocab_size - 1) as f64;
    }
    let pi_ref = Distribution::from_weights(&ref_weights).expect("positive weights");
    let prop_weights: Vec<f64> = pi_ref.probs().iter().zip(&rank).map(|(r, k)| r * (kappa * k).exp()).collect();
    let pi_prop = Distribution::from_weights(&prop_weights).expect("positive weights");
    let u = UtilityVector::new(u).expect("finite utilities");
    Ok(StateInstance::new(pi_ref, pi_prop, Some(u), eps, beta)?)
}

/// The same instance with its utility negated, which reverses the ordering.
pub fn anti_mlr_instance(inst: &StateInstance) -> Result<StateInstance, OracleError> {
    let u = inst.u_star().ok_or(WaterfillError::MissingUtility)?;
    let flipped = UtilityVector::new(u.values().iter().map(|v| -v).collect()).expect("finite");
    Ok(inst.with_utility(flipped)?)
}

/// `(u_i - u_j)(h_i - h_j) ≥ 0` over every pair.
pub fn is_comonotone(h: &[f64], u: &[f64]) -> bool {
    (0..h.len()).all(|i| (i + 1..h.len()).all(|j| (u[i] - u[j]) * (h[i] - h[j]) >= 0.0))
}

/// Per-state objective `ℓ(π) = Σ min(π, (1+ε)π_prop) - β·KL(π ‖ π_ref)`.
pub fn surrogate_value(inst: &StateInstance, pi: &Distribution) -> f64 {
    let c = 1.0 + inst.eps();
    let overlap: f64 = pi.probs().iter().zip(inst.pi_prop().probs()).map(|(&p, &q)| p.min(c * q)).sum();
    let kl = exact_kl(pi, inst.pi_ref()).expect("π_ref is strictly positive");
    overlap - inst.beta() * kl
}

fn surrogate_raw(inst: &StateInstance, pi: &[f64]) -> f64 {
    let c = 1.0 + inst.eps();
    let mut value = 0.0;
    for ((&p, &q), &r) in pi.iter().zip(inst.pi_prop().probs()).zip(inst.pi_ref().probs()) {
        value += p.min(c * q);
        if p > 0.0 {
            value -= inst.beta() * p * (p / r).ln();
        }
    }
    value
}

/// Direct maximization of [`surrogate_value`].
///
/// For `V ≤ 3` this scans every simplex point on a grid of step
/// `resolution`; larger alphabets use projected supergradient ascent from
/// `π_ref` with step `0.1 / √(k+1)`, stopping once the objective moves by
/// less than `1e-12`.
pub fn brute_force_maximizer(
    inst: &StateInstance,
    resolution: f64,
    ascent_iters: usize,
) -> Result<Distribution, OracleError> {
    if !(resolution > 0.0 && resolution <= MAX_RESOLUTION) {
        return Err(OracleError::Resolution(resolution));
    }
    let best = match inst.vocab_size() {
        2 | 3 => grid_search(inst, resolution),
        _ => projected_ascent(inst, ascent_iters),
    };
    Ok(Distribution::from_weights(&best).expect("simplex point"))
}

fn grid_search(inst: &StateInstance, resolution: f64) -> Vec<f64> {
    let n = (1.0 / resolution).round() as usize;
    let step = 1.0 / n as f64;
    let mut best = (f64::NEG_INFINITY, vec![]);
    let mut consider = |point: Vec<f64>| {
        let value = surrogate_raw(inst, &point);
        if value > best.0 {
            best = (value, point);
        }
    };
    if inst.vocab_size() == 2 {
        for i in 0..=n {
            let a = i as f64 * step;
            consider(vec![a, 1.0 - a]);
        }
    } else {
        for i in 0..=n {
            for j in 0..=n - i {
                let (a, b) = (i as f64 * step, j as f64 * step);
                consider(vec![a, b, (1.0 - a - b).max(0.0)]);
            }
        }
    }
    best.1
}

/// Euclidean projection onto the probability simplex.
pub fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (k, &value) in sorted.iter().enumerate() {
        cumulative += value;
        let candidate = (cumulative - 1.0) / (k + 1) as f64;
        if value - candidate > 0.0 {
            theta = candidate;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

fn projected_ascent(inst: &StateInstance, iters: usize) -> Vec<f64> {
    let c = 1.0 + inst.eps();
    let prop = inst.pi_prop().probs();
    let reference = inst.pi_ref().probs();
    let mut pi = reference.to_vec();
    let mut value = surrogate_raw(inst, &pi);
    let mut best = (value, pi.clone());
    for k in 0..iters {
        let step = 0.1 / ((k + 1) as f64).sqrt();
        let moved: Vec<f64> = pi
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let overlap = if p < c * prop[i] { 1.0 } else { 0.0 };
                let kl = inst.beta() * ((p.max(1e-300) / reference[i]).ln() + 1.0);
                p + step * (overlap - kl)
            })
            .collect();
        pi = project_to_simplex(&moved);
        let next = surrogate_raw(inst, &pi);
        if next > best.0 {
            best = (next, pi.clone());
        }
        let change = (next - value).abs();
        value = next;
        if change < 1e-12 {
            break;
        }
    }
    best.1
}

/// `E_ref[w·u] - E_ref[w]·E_ref[u]` with tilt `w = π*/π_ref`.
pub fn association_check(inst: &StateInstance, result: &WaterfillResult) -> Result<f64, OracleError> {
    let u = inst.u_star().ok_or(WaterfillError::MissingUtility)?.values();
    let reference = inst.pi_ref().probs();
    let w: Vec<f64> = result.pi_star.probs().iter().zip(reference).map(|(p, r)| p / r).collect();
    let e_wu: f64 = (0..u.len()).map(|i| reference[i] * w[i] * u[i]).sum();
    let e_w: f64 = (0..u.len()).map(|i| reference[i] * w[i]).sum();
    let e_u: f64 = (0..u.len()).map(|i| reference[i] * u[i]).sum();
    Ok(e_wu - e_w * e_u)
}

/// `Cov_{π_ref}(min(τ, (1+ε)h), u*)` in centered form.
pub fn first_order_covariance(inst: &StateInstance, result: &WaterfillResult) -> Result<f64, OracleError> {
    let u = inst.u_star().ok_or(WaterfillError::MissingUtility)?.values();
    let reference = inst.pi_ref().probs();
    let c = 1.0 + inst.eps();
    let tilt: Vec<f64> = inst.likelihood_ratio().iter().map(|h| result.tau.min(c * h)).collect();
    let mean_tilt: f64 = reference.iter().zip(&tilt).map(|(r, t)| r * t).sum();
    let mean_u: f64 = reference.iter().zip(u).map(|(r, v)| r * v).sum();
    Ok((0..u.len()).map(|i| reference[i] * (tilt[i] - mean_tilt) * (u[i] - mean_u)).sum())
}

fn instance_checks(
    inst: &StateInstance,
    result: &WaterfillResult,
    resolution: f64,
    ascent_iters: usize,
) -> Result<Vec<Check>, OracleError> {
    let u = inst.u_star().ok_or(WaterfillError::MissingUtility)?;
    let j_star = expected_utility(&result.pi_star, u).expect("lengths checked");
    let j_ref = expected_utility(inst.pi_ref(), u).expect("lengths checked");
    let j_prop = expected_utility(inst.pi_prop(), u).expect("lengths checked");

    let brute = brute_force_maximizer(inst, resolution, ascent_iters)?;
    let optimality_gap = surrogate_value(inst, &result.pi_star) - surrogate_value(inst, &brute);
    let residual = mass_balance_residual(result, inst)?;

    Ok(vec![
        Check::new(CheckName::SurrogateOptimality, optimality_gap, SURROGATE_TOL),
        Check::new(CheckName::ImprovementVsRef, j_star - j_ref, VERIFY_TOL),
        Check::new(CheckName::ImprovementVsProp, j_star - j_prop, VERIFY_TOL),
        Check::new(CheckName::AssociationInequality, association_check(inst, result)?, VERIFY_TOL),
        Check::new(CheckName::MassBalance, -residual.abs(), MASS_TOL),
        Check::new(CheckName::FirstOrderCovariance, first_order_covariance(inst, result)?, VERIFY_TOL),
    ])
}

/// Runs every registered check on one instance.
pub fn verify_instance(
    instance_id: u64,
    kind: ReportKind,
    inst: &StateInstance,
    config: &Theorem1Config,
) -> Result<VerificationReport, OracleError> {
    let result = waterfill_update(inst, DEFAULT_TOL)?;
    let checks = instance_checks(inst, &result, config.grid_resolution, config.ascent_iters)?;
    Ok(VerificationReport::assemble(instance_id, kind, inst, result.tau, checks))
}

fn pick<T: Copy>(rng: &mut impl Rng, grid: &[T]) -> T {
    grid[rng.gen_range(0..grid.len())]
}

/// The MLR instance `verify_theorem1` draws for `seed`.
pub fn theorem1_instance(seed: u64, config: &Theorem1Config) -> Result<StateInstance, OracleError> {
    if config.eps_grid.is_empty() {
        return Err(OracleError::EmptyGrid("eps"));
    }
    if config.beta_grid.is_empty() {
        return Err(OracleError::EmptyGrid("beta"));
    }
    if config.vocab_min < 2 || config.vocab_max < config.vocab_min {
        return Err(OracleError::VocabSize(config.vocab_min));
    }
    let mut rng = stream_rng(seed, Stream::Instance, 0);
    let vocab = rng.gen_range(config.vocab_min..=config.vocab_max);
    let eps = pick(&mut rng, &config.eps_grid);
    let beta = pick(&mut rng, &config.beta_grid);
    sample_mlr_instance(derive_seed(seed, Stream::Instance, 1), vocab, eps, beta)
}

/// Draws an MLR instance for `seed`, solves it and runs every check.
pub fn verify_theorem1(seed: u64, config: &Theorem1Config) -> Result<VerificationReport, OracleError> {
    let inst = theorem1_instance(seed, config)?;
    verify_instance(seed, ReportKind::Theorem1, &inst, config)
}

/// The anti-comonotone twin of the `seed` instance. Expected to fail.
pub fn verify_anti_mlr_control(seed: u64, config: &Theorem1Config) -> Result<VerificationReport, OracleError> {
    let inst = anti_mlr_instance(&theorem1_instance(seed, config)?)?;
    verify_instance(seed, ReportKind::AntiMlrControl, &inst, config)
}

/// Smooth comonotone densities for `seed`: a Beta-shaped reference mixed
/// with the uniform density, an increasing utility, and a proposal tilted by
/// `exp(κ·u)` so `h` rises with `u`.
pub fn smooth_density_instance(seed: u64, n: usize, eps: f64, beta: f64) -> DensityInstance {
    let mut rng = stream_rng(seed, Stream::Instance, 2);
    let a = uniform_in(&mut rng, 1.0, 4.0);
    let b = uniform_in(&mut rng, 1.0, 4.0);
    // κ ≥ 1 keeps the capped set nonempty, otherwise τ ≡ 1 at every resolution.
    let kappa = uniform_in(&mut rng, 1.0, 3.0);
    let gamma = uniform_in(&mut rng, 0.5, 2.0);
    let utility = move |y: f64| y.powf(gamma);
    let f_ref = move |y: f64| 0.5 + 0.5 * y.powf(a - 1.0) * (1.0 - y).powf(b - 1.0);
    DensityInstance::from_fns(n, f_ref, move |y| f_ref(y) * (kappa * utility(y)).exp(), utility, eps, beta)
}

fn check_resolutions(resolutions: &[usize]) -> Result<(), OracleError> {
    let ok =
        !resolutions.is_empty() && resolutions.iter().all(|&n| n >= 16) && resolutions.windows(2).all(|w| w[0] < w[1]);
    if ok {
        Ok(())
    } else {
        Err(OracleError::Resolutions(resolutions.to_vec()))
    }
}

/// Verifies a density family at several resolutions and records how `τ`
/// settles under refinement.
pub fn verify_density_family(
    instance_id: u64,
    build: impl Fn(usize) -> DensityInstance,
    config: &Theorem2Config,
) -> Result<VerificationReport, OracleError> {
    check_resolutions(&config.resolutions)?;
    let mut checks = Vec::new();
    let mut rows = Vec::new();
    let mut last = None;
    for &n in &config.resolutions {
        let inst = build(n).to_state_instance()?;
        let result = waterfill_update(&inst, DEFAULT_TOL)?;
        let decomposition = delta_j_decomposition(&result, &inst)?;
        // Exhaustive search is only meaningful for tiny alphabets; these use ascent.
        checks
            .extend(instance_checks(&inst, &result, MAX_RESOLUTION, config.ascent_iters)?.into_iter().map(|c| c.at(n)));
        rows.push(ResolutionRow { n, tau: result.tau, delta_j: decomposition.delta_j });
        last = Some((inst, result.tau));
    }
    let (inst, tau) = last.expect("nonempty resolutions");
    let tau_diffs: Vec<f64> = rows.windows(2).map(|w| (w[1].tau - w[0].tau).abs()).collect();
    let strictly_decreasing = tau_diffs.windows(2).all(|w| w[1] < w[0]);
    let mut report = VerificationReport::assemble(instance_id, ReportKind::Theorem2, &inst, tau, checks);
    report.resolutions = Some(rows);
    report.refinement = Some(Refinement { tau_diffs, strictly_decreasing });
    Ok(report)
}

pub fn verify_theorem2_discretized(seed: u64, config: &Theorem2Config) -> Result<VerificationReport, OracleError> {
    if config.eps_grid.is_empty() {
        return Err(OracleError::EmptyGrid("eps"));
    }
    let eps = pick(&mut stream_rng(seed, Stream::Instance, 3), &config.eps_grid);
    verify_density_family(seed, |n| smooth_density_instance(seed, n, eps, config.beta), config)
}

/// Verifies `seeds` in parallel; output is ordered by seed.
pub fn verify_theorem1_batch(seeds: &[u64], config: &Theorem1Config) -> Result<Vec<VerificationReport>, OracleError> {
    seeds.par_iter().map(|&s| verify_theorem1(s, config)).collect()
}

pub fn verify_anti_mlr_batch(seeds: &[u64], config: &Theorem1Config) -> Result<Vec<VerificationReport>, OracleError> {
    seeds.par_iter().map(|&s| verify_anti_mlr_control(s, config)).collect()
}

pub fn verify_theorem2_batch(seeds: &[u64], config: &Theorem2Config) -> Result<Vec<VerificationReport>, OracleError> {
    seeds.par_iter().map(|&s| verify_theorem2_discretized(s, config)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckSummary {
    pub passed: usize,
    pub failed: usize,
    pub worst_margin: f64,
    pub gating: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchSummary {
    pub instances: usize,
    pub passed: usize,
    pub failed: usize,
    pub worst_margin: f64,
    pub checks: BTreeMap<&'static str, CheckSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub refinement_strictly_decreasing: Option<usize>,
}

pub fn summarize(reports: &[VerificationReport]) -> BatchSummary {
    let mut checks: BTreeMap<&'static str, CheckSummary> = BTreeMap::new();
    for check in reports.iter().flat_map(|r| &r.checks) {
        let entry = checks.entry(check.name.as_str()).or_insert(CheckSummary {
            passed: 0,
            failed: 0,
            worst_margin: f64::INFINITY,
            gating: check.gating,
        });
        if check.pass {
            entry.passed += 1;
        } else {
            entry.failed += 1;
        }
        entry.worst_margin = entry.worst_margin.min(check.margin);
    }
    let passed = reports.iter().filter(|r| r.passed).count();
    let refinement = reports.iter().filter_map(|r| r.refinement.as_ref()).collect::<Vec<_>>();
    BatchSummary {
        instances: reports.len(),
        passed,
        failed: reports.len() - passed,
        worst_margin: reports.iter().map(|r| r.worst_margin).fold(f64::INFINITY, f64::min),
        checks,
        refinement_strictly_decreasing: (!refinement.is_empty())
            .then(|| refinement.iter().filter(|r| r.strictly_decreasing).count()),
    }
}
