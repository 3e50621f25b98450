//! Property tests over the mixture algebra, projections, and composition.

use proptest::prelude::*;

use moerl::moe::{check_feasible, compose, transform_f, BaseEnsemble, MixtureWeights};
use moerl::project::{project_box_hyperplane, project_exact, projection_kkt_residual};
use moerl::TabularPolicy;

fn policy_strategy(n_s: usize, n_a: usize) -> impl Strategy<Value = TabularPolicy> {
    proptest::collection::vec(0.05..1.0f64, n_s * n_a).prop_map(move |raw| {
        let mut probs = ndarray::Array2::zeros((n_s, n_a));
        for s in 0..n_s {
            let row = &raw[s * n_a..(s + 1) * n_a];
            let sum: f64 = row.iter().sum();
            for a in 0..n_a {
                probs[[s, a]] = row[a] / sum;
            }
        }
        TabularPolicy::new(probs).unwrap()
    })
}

proptest! {
    /// Re-anchoring keeps the transformed weights inside the box/simplex and
    /// preserves the anchor-swapped equality whenever the input is feasible.
    #[test]
    fn transform_preserves_feasibility(
        bases in proptest::collection::vec(policy_strategy(3, 3), 3),
        raw in proptest::collection::vec(0.0..1.0f64, 3 * 3 * 2),
        j in 0usize..3,
    ) {
        let ens = BaseEnsemble::new(bases, 1e-6).unwrap();
        let lam = moerl::gen::gen_feasible_lambda_from_raw(&raw, &ens);
        prop_assert!(check_feasible(&ens, &lam).unwrap().is_feasible(1e-9));
        for s in 0..3 {
            let mut eq = 0.0;
            for a in 0..3 {
                let f = transform_f(&lam.at(s, a), j).unwrap();
                let total: f64 = f.iter().sum();
                prop_assert!(total <= 1.0 + 1e-9);
                for &v in &f {
                    prop_assert!((-1e-9..=1.0 + 1e-9).contains(&v));
                }
                for (i, &fi) in f.iter().enumerate() {
                    eq += fi * (ens.base(i).prob(s, a) - ens.base(j).prob(s, a));
                }
            }
            prop_assert!(eq.abs() < 1e-9);
        }
    }

    /// Feasible weights always compose to a row-stochastic policy.
    #[test]
    fn compose_yields_valid_policies(
        bases in proptest::collection::vec(policy_strategy(4, 3), 2),
        raw in proptest::collection::vec(0.0..1.0f64, 4 * 3),
    ) {
        let ens = BaseEnsemble::new(bases, 1e-6).unwrap();
        let lam = moerl::gen::gen_feasible_lambda_from_raw(&raw, &ens);
        let pol = compose(&ens, &lam).unwrap();
        for s in 0..4 {
            let sum: f64 = (0..3).map(|a| pol.prob(s, a)).sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            for a in 0..3 {
                prop_assert!(pol.prob(s, a) >= -1e-12);
            }
        }
    }

    /// Composition is affine in the weights.
    #[test]
    fn compose_is_affine(
        bases in proptest::collection::vec(policy_strategy(3, 2), 3),
        raw1 in proptest::collection::vec(0.0..1.0f64, 3 * 2 * 2),
        raw2 in proptest::collection::vec(0.0..1.0f64, 3 * 2 * 2),
    ) {
        let ens = BaseEnsemble::new(bases, 1e-6).unwrap();
        let l1 = moerl::gen::gen_feasible_lambda_from_raw(&raw1, &ens);
        let l2 = moerl::gen::gen_feasible_lambda_from_raw(&raw2, &ens);
        let mid = MixtureWeights::new((l1.lam() + l2.lam()) / 2.0);
        let p1 = compose(&ens, &l1).unwrap();
        let p2 = compose(&ens, &l2).unwrap();
        let pm = compose(&ens, &mid).unwrap();
        for s in 0..3 {
            for a in 0..2 {
                let gap = p1.prob(s, a) + p2.prob(s, a) - 2.0 * pm.prob(s, a);
                prop_assert!(gap.abs() < 1e-12);
            }
        }
    }

    /// The exact projection is certified by a zero KKT residual and fixes
    /// feasible points.
    #[test]
    fn exact_projection_kkt_certified(
        lam in proptest::collection::vec(-1.0..2.0f64, 4),
        rho_raw in proptest::collection::vec(0.05..1.0f64, 4),
        beta_raw in proptest::collection::vec(0.05..1.0f64, 4),
    ) {
        let norm = |v: &[f64]| {
            let s: f64 = v.iter().sum();
            v.iter().map(|x| x / s).collect::<Vec<f64>>()
        };
        let rho = norm(&rho_raw);
        let beta = norm(&beta_raw);
        let y = project_exact(&lam, &rho, &beta, 1e-10).unwrap();
        let g: Vec<f64> = rho.iter().zip(&beta).map(|(r, b)| r - b).collect();
        prop_assert!(projection_kkt_residual(&lam, &g, &y) < 1e-9);
        // Projecting the projection is the identity.
        let y2 = project_box_hyperplane(&y, &g, 1e-10).unwrap();
        for (a, b) in y.iter().zip(&y2) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    /// Weighted sentiment scoring is additive.
    #[test]
    fn sentiment_combine_is_additive(
        x in proptest::collection::vec(-1.0..1.0f64, 6),
        y in proptest::collection::vec(-1.0..1.0f64, 6),
    ) {
        let xa: [f64; 6] = x.clone().try_into().unwrap();
        let ya: [f64; 6] = y.clone().try_into().unwrap();
        let mut sum = [0.0; 6];
        for i in 0..6 {
            sum[i] = xa[i] + ya[i];
        }
        let lhs = moerl::expert::sentiment_combine(&sum);
        let rhs = moerl::expert::sentiment_combine(&xa) + moerl::expert::sentiment_combine(&ya);
        prop_assert!((lhs - rhs).abs() < 1e-12);
    }
}
