mod common;

use latent_grpo::oracle::{is_comonotone, sample_mlr_instance};
use latent_grpo::prob::make_distribution;
use latent_grpo::waterfill::{
    delta_j_decomposition, expected_utility, mass_balance_residual, phi, solve_tau, solve_tau_sorted, waterfill_update,
    StateInstance, DEFAULT_TOL,
};
use proptest::prelude::*;

fn weights(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, len)
}

fn instance() -> impl Strategy<Value = StateInstance> {
    (2usize..=12)
        .prop_flat_map(|v| (weights(v), weights(v), prop::collection::vec(-1.0f64..1.0, v), 0.05f64..0.8))
        .prop_map(|(r, p, u, eps)| {
            let pi_ref = make_distribution(&r).unwrap();
            let pi_prop = make_distribution(&p).unwrap();
            StateInstance::from_vecs(pi_ref.into_vec(), pi_prop.into_vec(), Some(u), eps, 0.01).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn tau_matches_enumeration_oracle(inst in instance()) {
        let oracle = common::tau_by_enumeration(inst.pi_ref().probs(), inst.pi_prop().probs(), inst.eps());
        let tau = solve_tau(&inst, DEFAULT_TOL).unwrap();
        prop_assert!((tau - oracle).abs() <= 1e-9 * oracle.max(1.0), "{tau} vs {oracle}");
        prop_assert!((solve_tau_sorted(&inst).unwrap() - oracle).abs() <= 1e-9 * oracle.max(1.0));
    }

    #[test]
    fn update_is_a_capped_distribution(inst in instance()) {
        let r = waterfill_update(&inst, DEFAULT_TOL).unwrap();
        let sum: f64 = r.pi_star.probs().iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-10);
        for ((p, c), reference) in r.pi_star.probs().iter().zip(inst.caps()).zip(inst.pi_ref().probs()) {
            prop_assert!(*p <= c + 1e-12);
            prop_assert!(*p <= r.tau * reference + 1e-12);
        }
        prop_assert!(mass_balance_residual(&r, &inst).unwrap().abs() <= 1e-10);
        prop_assert!((phi(r.tau, &inst).unwrap() - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn decomposition_matches_direct_difference(inst in instance()) {
        let r = waterfill_update(&inst, DEFAULT_TOL).unwrap();
        let u = inst.u_star().unwrap();
        let direct = expected_utility(&r.pi_star, u).unwrap() - expected_utility(inst.pi_ref(), u).unwrap();
        let d = delta_j_decomposition(&r, &inst).unwrap();
        prop_assert!((d.delta_j - direct).abs() <= 1e-10, "{} vs {}", d.delta_j, direct);
    }

    #[test]
    fn phi_is_nondecreasing(inst in instance(), a in 0.0f64..5.0, b in 0.0f64..5.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(phi(lo, &inst).unwrap() <= phi(hi, &inst).unwrap() + 1e-15);
    }
}

#[test]
fn mlr_population_improves_over_reference() {
    for seed in 0..200 {
        let inst = sample_mlr_instance(seed, 2 + (seed as usize % 20), 0.2, 0.01).unwrap();
        assert!(is_comonotone(&inst.likelihood_ratio(), inst.u_star().unwrap().values()));
        let r = waterfill_update(&inst, DEFAULT_TOL).unwrap();
        let u = inst.u_star().unwrap();
        let gain = expected_utility(&r.pi_star, u).unwrap() - expected_utility(inst.pi_ref(), u).unwrap();
        assert!(gain >= -1e-12, "seed {seed}: {gain}");
    }
}
