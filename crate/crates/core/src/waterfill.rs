//! Closed-form statewise maximizer of the advantage-one clipped surrogate.
//!
//! For one token state the update is
//! `π*(y) = min((1+ε)·π_prop(y), τ·π_ref(y))` where `τ > 0` is the unique root
//! of `Φ(τ) = Σ_y min((1+ε)·π_prop(y), τ·π_ref(y)) = 1`. Tokens whose cap binds
//! (`(1+ε)·π_prop ≤ τ·π_ref`, ties included) form the capped set `S`; the rest
//! form `T` and are scaled by `τ`.

use serde::Serialize;
use thiserror::Error;

use crate::prob::{same_len, Distribution, ProbError, UtilityVector, DEFAULT_FLOOR};

/// Default tolerance on `|Φ(τ) - 1|`.
pub const DEFAULT_TOL: f64 = 1e-12;

/// Bisection iteration cap. Hitting it means the bracket logic is broken.
pub const MAX_BISECTION_ITERS: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WaterfillError {
    #[error("invalid distribution `{field}`: {source}")]
    Distribution {
        field: &'static str,
        #[source]
        source: ProbError,
    },
    #[error("vector `{field}` has length {got}, expected {expected}")]
    Length { field: &'static str, got: usize, expected: usize },
    #[error("alphabet must have at least 2 tokens, got {0}")]
    TooSmall(usize),
    #[error("clip width must be positive and finite, got {0}")]
    Eps(f64),
    #[error("KL strength must be positive and finite, got {0}")]
    Beta(f64),
    #[error("tau must be nonnegative and finite, got {0}")]
    Tau(f64),
    #[error("solver tolerance must be positive, got {0}")]
    Tolerance(f64),
    #[error("instance has no utility vector")]
    MissingUtility,
    #[error("result does not belong to this instance")]
    Mismatch,
    #[error("internal invariant violated: {0}")]
    Internal(String),
}

/// One token state: reference and proposal distributions, clip width,
/// KL strength and (optionally) the latent utility.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StateInstance {
    pi_ref: Distribution,
    pi_prop: Distribution,
    u_star: Option<UtilityVector>,
    eps: f64,
    beta: f64,
}

impl StateInstance {
    pub fn new(
        pi_ref: Distribution,
        pi_prop: Distribution,
        u_star: Option<UtilityVector>,
        eps: f64,
        beta: f64,
    ) -> Result<Self, WaterfillError> {
        let v = pi_ref.len();
        if v < 2 {
            return Err(WaterfillError::TooSmall(v));
        }
        pi_ref
            .require_positive(DEFAULT_FLOOR)
            .map_err(|source| WaterfillError::Distribution { field: "pi_ref", source })?;
        if pi_prop.len() != v {
            return Err(WaterfillError::Length { field: "pi_prop", got: pi_prop.len(), expected: v });
        }
        if let Some(u) = &u_star {
            if u.len() != v {
                return Err(WaterfillError::Length { field: "u_star", got: u.len(), expected: v });
            }
        }
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(WaterfillError::Eps(eps));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(WaterfillError::Beta(beta));
        }
        Ok(Self { pi_ref, pi_prop, u_star, eps, beta })
    }

    /// Builds an instance from raw probability vectors.
    pub fn from_vecs(
        pi_ref: Vec<f64>,
        pi_prop: Vec<f64>,
        u_star: Option<Vec<f64>>,
        eps: f64,
        beta: f64,
    ) -> Result<Self, WaterfillError> {
        let pi_ref =
            Distribution::new(pi_ref).map_err(|source| WaterfillError::Distribution { field: "pi_ref", source })?;
        let pi_prop =
            Distribution::new(pi_prop).map_err(|source| WaterfillError::Distribution { field: "pi_prop", source })?;
        let u_star = u_star
            .map(UtilityVector::new)
            .transpose()
            .map_err(|source| WaterfillError::Distribution { field: "u_star", source })?;
        Self::new(pi_ref, pi_prop, u_star, eps, beta)
    }

    pub fn pi_ref(&self) -> &Distribution {
        &self.pi_ref
    }

    pub fn pi_prop(&self) -> &Distribution {
        &self.pi_prop
    }

    pub fn u_star(&self) -> Option<&UtilityVector> {
        self.u_star.as_ref()
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn vocab_size(&self) -> usize {
        self.pi_ref.len()
    }

    /// Same instance with a different utility vector.
    pub fn with_utility(&self, u_star: UtilityVector) -> Result<Self, WaterfillError> {
        Self::new(self.pi_ref.clone(), self.pi_prop.clone(), Some(u_star), self.eps, self.beta)
    }

    /// Likelihood ratio `h = π_prop / π_ref`.
    pub fn likelihood_ratio(&self) -> Vec<f64> {
        self.pi_prop.probs().iter().zip(self.pi_ref.probs()).map(|(p, r)| p / r).collect()
    }

    /// Per-token caps `(1+ε)·π_prop`.
    pub fn caps(&self) -> Vec<f64> {
        self.pi_prop.probs().iter().map(|p| (1.0 + self.eps) * p).collect()
    }

    fn utility(&self) -> Result<&[f64], WaterfillError> {
        self.u_star.as_ref().map(|u| u.values()).ok_or(WaterfillError::MissingUtility)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WaterfillResult {
    pub pi_star: Distribution,
    pub tau: f64,
    /// `true` for tokens in the capped set `S`.
    pub capped_mask: Vec<bool>,
    pub mass_residual: f64,
    pub phi_residual: f64,
}

/// Transfer decomposition of `ΔJ = J(π*) - J(π_ref)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DeltaJ {
    /// Mass moved from `S` onto `T`.
    pub transfer: f64,
    /// Increment-weighted mean utility on `S`; `None` for a degenerate partition.
    pub u_plus: Option<f64>,
    /// Increment-weighted mean utility on `T`; `None` for a degenerate partition.
    pub u_minus: Option<f64>,
    pub delta_j: f64,
}

/// `Φ(τ) = Σ min((1+ε)·π_prop, τ·π_ref)`.
pub fn phi(tau: f64, inst: &StateInstance) -> Result<f64, WaterfillError> {
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(WaterfillError::Tau(tau));
    }
    Ok(phi_unchecked(tau, inst))
}

fn phi_unchecked(tau: f64, inst: &StateInstance) -> f64 {
    let c = 1.0 + inst.eps;
    inst.pi_prop.probs().iter().zip(inst.pi_ref.probs()).map(|(&p, &r)| (c * p).min(tau * r)).sum()
}

/// Root of `Φ(τ) = 1` by bisection on `[0, (1+ε)·max h]`.
///
/// Φ is piecewise linear, so once bisection has isolated the root the
/// partition it implies gives `τ` exactly; that polished value is kept when
/// it is consistent with the partition and closer to the root.
pub fn solve_tau(inst: &StateInstance, tol: f64) -> Result<f64, WaterfillError> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(WaterfillError::Tolerance(tol));
    }
    let c = 1.0 + inst.eps;
    let h_max = inst.likelihood_ratio().into_iter().fold(0.0, f64::max);
    let (mut lo, mut hi) = (0.0, c * h_max);
    if phi_unchecked(hi, inst) < 1.0 - tol {
        return Err(WaterfillError::Internal(format!("bracket failure: Φ({hi}) = {} < 1", phi_unchecked(hi, inst))));
    }
    for _ in 0..MAX_BISECTION_ITERS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if phi_unchecked(mid, inst) < 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut tau = if (phi_unchecked(lo, inst) - 1.0).abs() < (phi_unchecked(hi, inst) - 1.0).abs() { lo } else { hi };
    if let Some(polished) = tau_on_piece(inst, tau) {
        if (phi_unchecked(polished, inst) - 1.0).abs() <= (phi_unchecked(tau, inst) - 1.0).abs() {
            tau = polished;
        }
    }
    let residual = (phi_unchecked(tau, inst) - 1.0).abs();
    if residual > tol {
        return Err(WaterfillError::Internal(format!("|Φ(τ) - 1| = {residual} exceeds {tol}")));
    }
    Ok(tau)
}

/// Exact `τ` on the linear piece of Φ containing `tau`.
fn tau_on_piece(inst: &StateInstance, tau: f64) -> Option<f64> {
    let c = 1.0 + inst.eps;
    let (mut capped, mut free_ref) = (0.0, 0.0);
    for (&p, &r) in inst.pi_prop.probs().iter().zip(inst.pi_ref.probs()) {
        if c * p <= tau * r {
            capped += c * p;
        } else {
            free_ref += r;
        }
    }
    (free_ref > 0.0).then(|| (1.0 - capped) / free_ref).filter(|t| *t > 0.0 && t.is_finite())
}

/// Sort-based exact solver: the capped set is a prefix of tokens ordered by
/// `h`, so `τ` follows from the first prefix whose implied value is consistent.
pub fn solve_tau_sorted(inst: &StateInstance) -> Result<f64, WaterfillError> {
    let c = 1.0 + inst.eps;
    let h = inst.likelihood_ratio();
    let mut order: Vec<usize> = (0..h.len()).collect();
    order.sort_by(|&a, &b| h[a].total_cmp(&h[b]));

    let prop = inst.pi_prop.probs();
    let reference = inst.pi_ref.probs();
    let mut capped_mass = 0.0;
    let mut free_ref: f64 = reference.iter().sum();
    for k in 0..order.len() {
        // Tokens order[..k] are capped, order[k..] are free.
        let tau = (1.0 - capped_mass) / free_ref;
        let lower_ok = k == 0 || c * h[order[k - 1]] <= tau;
        let upper_ok = c * h[order[k]] > tau;
        if lower_ok && upper_ok {
            return Ok(tau);
        }
        let i = order[k];
        capped_mass += c * prop[i];
        free_ref -= reference[i];
    }
    Err(WaterfillError::Internal("no consistent capped prefix".into()))
}

/// Solves for `τ` and assembles `π*`, the capped mask and residuals.
pub fn waterfill_update(inst: &StateInstance, tol: f64) -> Result<WaterfillResult, WaterfillError> {
    let tau = solve_tau(inst, tol)?;
    let c = 1.0 + inst.eps;
    let mut capped_mask = Vec::with_capacity(inst.vocab_size());
    let raw: Vec<f64> = inst
        .pi_prop
        .probs()
        .iter()
        .zip(inst.pi_ref.probs())
        .map(|(&p, &r)| {
            let cap = c * p;
            let scaled = tau * r;
            capped_mask.push(cap <= scaled);
            cap.min(scaled)
        })
        .collect();
    let phi_residual = raw.iter().sum::<f64>() - 1.0;
    let pi_star = Distribution::from_weights(&raw)
        .map_err(|e| WaterfillError::Internal(format!("π* not a distribution: {e}")))?;
    let mut result = WaterfillResult { pi_star, tau, capped_mask, mass_residual: 0.0, phi_residual };
    result.mass_residual = mass_balance_residual(&result, inst)?;
    Ok(result)
}

fn check_pair(result: &WaterfillResult, inst: &StateInstance) -> Result<(), WaterfillError> {
    if result.capped_mask.len() != inst.vocab_size() || result.pi_star.len() != inst.vocab_size() {
        return Err(WaterfillError::Mismatch);
    }
    Ok(())
}

/// `Σ_S ((1+ε)π_prop - π_ref) + Σ_T (τ - 1)π_ref`, zero for a correct update.
pub fn mass_balance_residual(result: &WaterfillResult, inst: &StateInstance) -> Result<f64, WaterfillError> {
    check_pair(result, inst)?;
    let c = 1.0 + inst.eps;
    let mut residual = 0.0;
    for ((&capped, &p), &r) in result.capped_mask.iter().zip(inst.pi_prop.probs()).zip(inst.pi_ref.probs()) {
        residual += if capped { c * p - r } else { (result.tau - 1.0) * r };
    }
    Ok(residual)
}

/// `Σ π_i u_i`.
pub fn expected_utility(pi: &Distribution, u: &UtilityVector) -> Result<f64, ProbError> {
    same_len(pi.len(), u.len())?;
    Ok(pi.probs().iter().zip(u.values()).map(|(p, u)| p * u).sum())
}

/// Splits `J(π*) - J(π_ref)` into the transfer magnitude and the
/// increment-weighted mean utilities of the two partition cells.
pub fn delta_j_decomposition(result: &WaterfillResult, inst: &StateInstance) -> Result<DeltaJ, WaterfillError> {
    check_pair(result, inst)?;
    let u = inst.utility()?;
    let c = 1.0 + inst.eps;

    let (mut s_weight, mut s_weighted_u, mut s_count) = (0.0, 0.0, 0usize);
    let (mut t_weight, mut t_weighted_u, mut t_count) = (0.0, 0.0, 0usize);
    for (i, &capped) in result.capped_mask.iter().enumerate() {
        let (p, r) = (inst.pi_prop.probs()[i], inst.pi_ref.probs()[i]);
        if capped {
            let decrement = r - c * p;
            s_weight += decrement;
            s_weighted_u += decrement * u[i];
            s_count += 1;
        } else {
            let increment = (result.tau - 1.0) * r;
            t_weight += increment;
            t_weighted_u += increment * u[i];
            t_count += 1;
        }
    }
    if s_count == 0 || t_count == 0 || s_weight <= 0.0 || t_weight <= 0.0 {
        return Ok(DeltaJ { transfer: 0.0, u_plus: None, u_minus: None, delta_j: 0.0 });
    }
    let transfer = t_weight;
    let u_plus = s_weighted_u / s_weight;
    let u_minus = t_weighted_u / t_weight;
    Ok(DeltaJ { transfer, u_plus: Some(u_plus), u_minus: Some(u_minus), delta_j: -transfer * (u_plus - u_minus) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_token() -> StateInstance {
        StateInstance::from_vecs(vec![0.5, 0.5], vec![0.7, 0.3], Some(vec![1.0, 0.0]), 0.2, 0.01).unwrap()
    }

    fn three_token() -> StateInstance {
        let third = 1.0 / 3.0;
        StateInstance::from_vecs(vec![third, third, 1.0 - 2.0 * third], vec![0.6, 0.3, 0.1], None, 0.5, 0.01).unwrap()
    }

    fn identity(eps: f64) -> StateInstance {
        StateInstance::from_vecs(vec![0.5, 0.5], vec![0.5, 0.5], Some(vec![1.0, 0.0]), eps, 0.01).unwrap()
    }

    #[test]
    fn construction_errors() {
        assert!(matches!(
            StateInstance::from_vecs(vec![1.0, 0.0], vec![0.5, 0.5], None, 0.2, 0.01),
            Err(WaterfillError::Distribution { field: "pi_ref", .. })
        ));
        assert!(matches!(
            StateInstance::from_vecs(vec![1.0], vec![1.0], None, 0.2, 0.01),
            Err(WaterfillError::TooSmall(1))
        ));
        assert!(matches!(
            StateInstance::from_vecs(vec![0.5, 0.5], vec![0.2, 0.3, 0.5], None, 0.2, 0.01),
            Err(WaterfillError::Length { field: "pi_prop", .. })
        ));
        assert!(matches!(
            StateInstance::from_vecs(vec![0.5, 0.5], vec![0.5, 0.5], Some(vec![1.0]), 0.2, 0.01),
            Err(WaterfillError::Length { field: "u_star", .. })
        ));
        assert_eq!(
            StateInstance::from_vecs(vec![0.5, 0.5], vec![0.5, 0.5], None, 0.0, 0.01),
            Err(WaterfillError::Eps(0.0))
        );
        assert_eq!(
            StateInstance::from_vecs(vec![0.5, 0.5], vec![0.5, 0.5], None, 0.2, -1.0),
            Err(WaterfillError::Beta(-1.0))
        );
    }

    #[test]
    fn phi_examples() {
        let inst = identity(0.2);
        assert_eq!(phi(0.0, &inst).unwrap(), 0.0);
        assert!((phi(1e6, &inst).unwrap() - 1.2).abs() < 1e-15);
        assert!((phi(1.0, &inst).unwrap() - 1.0).abs() < 1e-15);
        assert!((phi(1.0, &identity(0.5)).unwrap() - 1.0).abs() < 1e-15);
        assert!(phi(-1.0, &inst).is_err());
    }

    #[test]
    fn solve_tau_examples() {
        assert!((solve_tau(&identity(0.2), DEFAULT_TOL).unwrap() - 1.0).abs() < 1e-12);
        assert!((solve_tau(&two_token(), DEFAULT_TOL).unwrap() - 1.28).abs() < 1e-12);
        assert!((solve_tau(&three_token(), DEFAULT_TOL).unwrap() - 1.275).abs() < 1e-12);
        assert!(solve_tau(&two_token(), 0.0).is_err());
    }

    #[test]
    fn sorted_solver_matches_examples() {
        assert!((solve_tau_sorted(&two_token()).unwrap() - 1.28).abs() < 1e-14);
        assert!((solve_tau_sorted(&three_token()).unwrap() - 1.275).abs() < 1e-14);
        assert!((solve_tau_sorted(&identity(0.2)).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn update_examples() {
        let r = waterfill_update(&identity(0.2), DEFAULT_TOL).unwrap();
        assert!(r.pi_star.probs().iter().all(|p| (p - 0.5).abs() < 1e-12));
        assert_eq!(r.capped_mask, vec![false, false]);

        let r = waterfill_update(&two_token(), DEFAULT_TOL).unwrap();
        assert!((r.pi_star.probs()[0] - 0.64).abs() < 1e-12);
        assert!((r.pi_star.probs()[1] - 0.36).abs() < 1e-12);
        assert_eq!(r.capped_mask, vec![false, true]);
        assert!(r.mass_residual.abs() < 1e-12);
        assert!(r.phi_residual.abs() < 1e-12);

        let r = waterfill_update(&three_token(), DEFAULT_TOL).unwrap();
        for (got, want) in r.pi_star.probs().iter().zip([0.425, 0.425, 0.15]) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        assert_eq!(r.capped_mask, vec![false, false, true]);
    }

    #[test]
    fn ties_go_to_capped_set() {
        // τ = 1 and (1+ε)·π_prop[1] = 1.25·0.4 = 0.5 = τ·π_ref[1].
        let inst = StateInstance::from_vecs(vec![0.5, 0.5], vec![0.6, 0.4], None, 0.25, 0.01).unwrap();
        let r = waterfill_update(&inst, DEFAULT_TOL).unwrap();
        assert_eq!(r.tau, 1.0);
        assert_eq!(r.capped_mask, vec![false, true]);
    }

    #[test]
    fn mass_balance_examples() {
        let inst = identity(0.2);
        let r = waterfill_update(&inst, DEFAULT_TOL).unwrap();
        assert!(mass_balance_residual(&r, &inst).unwrap().abs() < 1e-12);
        let inst = two_token();
        let r = waterfill_update(&inst, DEFAULT_TOL).unwrap();
        let by_hand: f64 = (0.36 - 0.5) + (1.28 - 1.0) * 0.5;
        assert!(by_hand.abs() < 1e-15);
        assert!(mass_balance_residual(&r, &inst).unwrap().abs() < 1e-12);
        assert_eq!(mass_balance_residual(&r, &three_token()), Err(WaterfillError::Mismatch));
    }

    #[test]
    fn expected_utility_examples() {
        let u = UtilityVector::new(vec![1.0, 0.0]).unwrap();
        assert_eq!(expected_utility(&Distribution::new(vec![0.5, 0.5]).unwrap(), &u).unwrap(), 0.5);
        assert!((expected_utility(&Distribution::new(vec![0.64, 0.36]).unwrap(), &u).unwrap() - 0.64).abs() < 1e-15);
        let abc = UtilityVector::new(vec![3.0, -2.0, 7.0]).unwrap();
        assert_eq!(expected_utility(&Distribution::point_mass(3, 0).unwrap(), &abc).unwrap(), 3.0);
        assert!(expected_utility(&Distribution::uniform(3).unwrap(), &u).is_err());
    }

    #[test]
    fn decomposition_worked_example() {
        let inst = two_token();
        let r = waterfill_update(&inst, DEFAULT_TOL).unwrap();
        let d = delta_j_decomposition(&r, &inst).unwrap();
        assert!((d.transfer - 0.14).abs() < 1e-12);
        assert!((d.u_plus.unwrap() - 0.0).abs() < 1e-12);
        assert!((d.u_minus.unwrap() - 1.0).abs() < 1e-12);
        assert!((d.delta_j - 0.14).abs() < 1e-12);
    }

    #[test]
    fn decomposition_degenerate_and_control() {
        let inst = identity(0.2);
        let r = waterfill_update(&inst, DEFAULT_TOL).unwrap();
        let d = delta_j_decomposition(&r, &inst).unwrap();
        assert_eq!(d.delta_j, 0.0);
        assert_eq!(d.u_plus, None);

        let anti = two_token().with_utility(UtilityVector::new(vec![0.0, 1.0]).unwrap()).unwrap();
        let r = waterfill_update(&anti, DEFAULT_TOL).unwrap();
        let d = delta_j_decomposition(&r, &anti).unwrap();
        assert!((d.delta_j + 0.14).abs() < 1e-12);

        let no_u = three_token();
        let r = waterfill_update(&no_u, DEFAULT_TOL).unwrap();
        assert_eq!(delta_j_decomposition(&r, &no_u), Err(WaterfillError::MissingUtility));
    }
}
