//! Difference-value identities: the gap V_{pi_lambda} - V_{mu_p} between a
//! mixture policy and an anchor base, computed three ways that must agree on
//! exact inputs:
//!
//! 1. directly, from two policy evaluations;
//! 2. as the resolvent of the mixture-advantage difference reward under the
//!    anchor's chain: (I - gamma P_anchor)^{-1} g with
//!    g(s) = sum_{a,i} lambda_i(s,a) (mu_i - mu_p)(a|s) A_{pi_lambda}(s,a);
//! 3. as the resolvent of the anchor-advantage difference reward under the
//!    mixture's chain: (I - gamma P_mix)^{-1} h with
//!    h(s) = sum_{a,i} lambda_i(s,a) (mu_i - mu_p)(a|s) A_{mu_p}(s,a).
//!
//! The kernel perturbation behind (3) is exposed by [`modified_kernel`].

use ndarray::{Array1, Array2};
use serde::Serialize;

use crate::error::{MoeError, Result};
use crate::linalg;
use crate::mdp::{advantage, policy_value, FiniteMdp, TabularPolicy};
use crate::moe::{check_feasible, compose_unchecked, BaseEnsemble, MixtureWeights, FEASIBILITY_TOL};

/// The three evaluations and their worst pairwise disagreement.
#[derive(Debug, Clone, Serialize)]
pub struct DifferenceReport {
    pub exact: Vec<f64>,
    pub via_mixture_adv: Vec<f64>,
    pub via_base_adv: Vec<f64>,
    pub max_discrepancy: f64,
}

fn validate(
    mdp: &FiniteMdp,
    ensemble: &BaseEnsemble,
    lam: &MixtureWeights,
    p: usize,
) -> Result<TabularPolicy> {
    if ensemble.n_states() != mdp.n_states() || ensemble.n_actions() != mdp.n_actions() {
        return Err(MoeError::ShapeMismatch {
            context: "diffvalue",
            expected: format!("ensemble over [{}, {}]", mdp.n_states(), mdp.n_actions()),
            got: format!("[{}, {}]", ensemble.n_states(), ensemble.n_actions()),
        });
    }
    if p >= ensemble.m() {
        return Err(MoeError::IndexOutOfRange {
            what: "anchor expert",
            index: p,
            bound: ensemble.m(),
        });
    }
    if p != ensemble.m() - 1 {
        // The mixture is parameterized against the last base; other anchors
        // come from re-anchored weights upstream.
        return Err(MoeError::IndexOutOfRange {
            what: "anchor expert (must be the last base)",
            index: p,
            bound: ensemble.m(),
        });
    }
    let report = check_feasible(ensemble, lam)?;
    if !report.is_feasible(FEASIBILITY_TOL) {
        return Err(MoeError::Infeasible {
            max_box: report.max_box,
            max_simplex: report.max_simplex,
            max_equality: report.max_equality,
            detail: "diffvalue requires feasible weights".into(),
        });
    }
    Ok(compose_unchecked(ensemble, lam))
}

/// Per-state difference reward sum_{a,i} lambda_i(s,a)(mu_i - mu_p)(a|s) w(s,a).
fn difference_reward(
    ensemble: &BaseEnsemble,
    lam: &MixtureWeights,
    weights: &Array2<f64>,
) -> Array1<f64> {
    let m = ensemble.m();
    let (n_s, n_a) = (ensemble.n_states(), ensemble.n_actions());
    let mut g = Array1::zeros(n_s);
    for s in 0..n_s {
        for a in 0..n_a {
            for i in 0..m - 1 {
                let dmu = ensemble.base(i).prob(s, a) - ensemble.base(m - 1).prob(s, a);
                g[s] += lam.lam()[[s, a, i]] * dmu * weights[[s, a]];
            }
        }
    }
    g
}

fn resolvent_apply(mdp: &FiniteMdp, kernel: &Array2<f64>, g: &Array1<f64>) -> Result<Array1<f64>> {
    let n = mdp.n_states();
    let mut a = Array2::eye(n);
    a.scaled_add(-mdp.gamma(), kernel);
    linalg::solve(&a, g)
}

/// Exact gap from two policy evaluations.
pub fn diff_exact(
    mdp: &FiniteMdp,
    ensemble: &BaseEnsemble,
    lam: &MixtureWeights,
    p: usize,
) -> Result<Array1<f64>> {
    let mixture = validate(mdp, ensemble, lam, p)?;
    let v_mix = policy_value(mdp, &mixture)?;
    let v_base = policy_value(mdp, ensemble.base(p))?;
    Ok(v_mix.0 - v_base.0)
}

/// Gap via the mixture-advantage difference reward resolved under the anchor
/// base's chain.
pub fn diff_via_mixture_advantage(
    mdp: &FiniteMdp,
    ensemble: &BaseEnsemble,
    lam: &MixtureWeights,
    p: usize,
) -> Result<Array1<f64>> {
    let mixture = validate(mdp, ensemble, lam, p)?;
    let adv_mix = advantage(mdp, &mixture)?;
    let g = difference_reward(ensemble, lam, &adv_mix.0);
    let base_kernel = mdp.policy_kernel(ensemble.base(p));
    resolvent_apply(mdp, &base_kernel, &g)
}

/// Gap via the anchor-advantage difference reward resolved under the mixture's
/// chain.
pub fn diff_via_base_advantage(
    mdp: &FiniteMdp,
    ensemble: &BaseEnsemble,
    lam: &MixtureWeights,
    p: usize,
) -> Result<Array1<f64>> {
    let mixture = validate(mdp, ensemble, lam, p)?;
    let adv_base = advantage(mdp, ensemble.base(p))?;
    let h = difference_reward(ensemble, lam, &adv_base.0);
    let mix_kernel = mdp.policy_kernel(&mixture);
    resolvent_apply(mdp, &mix_kernel, &h)
}

/// Kernel perturbation DeltaP(s'|s) = sum_a P(s'|s,a) sum_i lambda_i(s,a)
/// (mu_i - mu_p)(a|s) and the modified kernel P' = P_anchor + DeltaP, which
/// equals the mixture policy's kernel.
pub fn modified_kernel(
    mdp: &FiniteMdp,
    ensemble: &BaseEnsemble,
    lam: &MixtureWeights,
    p: usize,
) -> Result<(Array2<f64>, Array2<f64>)> {
    validate(mdp, ensemble, lam, p)?;
    let m = ensemble.m();
    let (n_s, n_a) = (mdp.n_states(), mdp.n_actions());
    let mut delta = Array2::zeros((n_s, n_s));
    for s in 0..n_s {
        for a in 0..n_a {
            let mut w = 0.0;
            for i in 0..m - 1 {
                w += lam.lam()[[s, a, i]]
                    * (ensemble.base(i).prob(s, a) - ensemble.base(m - 1).prob(s, a));
            }
            if w == 0.0 {
                continue;
            }
            for sp in 0..n_s {
                delta[[s, sp]] += w * mdp.transition()[[s, a, sp]];
            }
        }
    }
    let modified = &mdp.policy_kernel(ensemble.base(p)) + &delta;
    Ok((delta, modified))
}

/// Run all three evaluations and report the worst pairwise disagreement.
pub fn difference_report(
    mdp: &FiniteMdp,
    ensemble: &BaseEnsemble,
    lam: &MixtureWeights,
    p: usize,
) -> Result<DifferenceReport> {
    let exact = diff_exact(mdp, ensemble, lam, p)?;
    let via_mix = diff_via_mixture_advantage(mdp, ensemble, lam, p)?;
    let via_base = diff_via_base_advantage(mdp, ensemble, lam, p)?;
    let mut worst = 0.0_f64;
    for s in 0..exact.len() {
        worst = worst
            .max((exact[s] - via_mix[s]).abs())
            .max((exact[s] - via_base[s]).abs())
            .max((via_mix[s] - via_base[s]).abs());
    }
    Ok(DifferenceReport {
        exact: exact.to_vec(),
        via_mixture_adv: via_mix.to_vec(),
        via_base_adv: via_base.to_vec(),
        max_discrepancy: worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gen::{gen_feasible_lambda, gen_random_ensemble, gen_random_mdp};
    use crate::mdp::expected_return;
    use crate::moe::compose;
    use ndarray::{arr1, arr2, arr3};

    #[test]
    fn zero_lambda_gives_zero_gap() {
        let mdp = gen_random_mdp(1, 4, 3, 0.9, (-1.0, 1.0));
        let ens = gen_random_ensemble(2, 4, 3, 2, 1e-6);
        let lam = MixtureWeights::zeros(4, 3, 1);
        for f in [diff_exact, diff_via_mixture_advantage, diff_via_base_advantage] {
            let d = f(&mdp, &ens, &lam, 1).unwrap();
            assert!(d.iter().all(|v| v.abs() < 1e-12));
        }
        let (delta, _) = modified_kernel(&mdp, &ens, &lam, 1).unwrap();
        assert!(delta.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn identical_bases_give_zero_gap() {
        let mdp = gen_random_mdp(3, 3, 2, 0.8, (-1.0, 1.0));
        let base = crate::gen::gen_random_policy(4, 3, 2);
        let ens = crate::moe::BaseEnsemble::new(vec![base.clone(), base], 1e-6).unwrap();
        let mut lam = MixtureWeights::zeros(3, 2, 1);
        lam.lam_mut().fill(0.4);
        let d = diff_exact(&mdp, &ens, &lam, 1).unwrap();
        assert!(d.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn one_state_closed_form() {
        // One state, two actions, m = 2: the gap is (r_mix - r_base)/(1-gamma).
        let t = arr3(&[[[1.0], [1.0]]]);
        let r = arr2(&[[1.0, -1.0]]);
        let mdp = FiniteMdp::new(t, r, 0.5, arr1(&[1.0])).unwrap();
        let b0 = TabularPolicy::new(arr2(&[[0.8, 0.2]])).unwrap();
        let b1 = TabularPolicy::new(arr2(&[[0.3, 0.7]])).unwrap();
        let ens = crate::moe::BaseEnsemble::new(vec![b0, b1], 0.0).unwrap();
        // State-only weight keeps feasibility automatically.
        let lam = MixtureWeights::from_state_weights(&arr2(&[[0.6]]), 2);
        let mixture = compose(&ens, &lam).unwrap();
        let r_mix: f64 = (0..2).map(|a| mixture.prob(0, a) * mdp.reward()[[0, a]]).sum();
        let r_base: f64 = (0..2)
            .map(|a| ens.base(1).prob(0, a) * mdp.reward()[[0, a]])
            .sum();
        let expected = (r_mix - r_base) / (1.0 - 0.5);
        let d = diff_via_mixture_advantage(&mdp, &ens, &lam, 1).unwrap();
        assert!((d[0] - expected).abs() < 1e-10);
    }

    #[test]
    fn formulations_agree_on_random_instances() {
        for seed in 0..40 {
            let m = if seed % 2 == 0 { 2 } else { 3 };
            let gamma = if seed % 4 < 2 { 0.5 } else { 0.9 };
            let mdp = gen_random_mdp(seed, 6, 3, gamma, (-1.0, 1.0));
            let ens = gen_random_ensemble(seed + 500, 6, 3, m, 1e-6);
            let lam = gen_feasible_lambda(seed + 900, &ens, 0.8);
            let rep = difference_report(&mdp, &ens, &lam, m - 1).unwrap();
            assert!(rep.max_discrepancy < 1e-8, "seed {seed}: {}", rep.max_discrepancy);
        }
    }

    #[test]
    fn zero_base_advantage_kills_base_route() {
        // Reward independent of action and a state-symmetric kernel make the
        // anchor's advantage identically zero.
        let t = arr3(&[
            [[0.5, 0.5], [0.5, 0.5]],
            [[0.3, 0.7], [0.3, 0.7]],
        ]);
        let r = arr2(&[[0.7, 0.7], [-0.2, -0.2]]);
        let mdp = FiniteMdp::new(t, r, 0.9, arr1(&[0.5, 0.5])).unwrap();
        let ens = gen_random_ensemble(9, 2, 2, 2, 1e-6);
        let lam = gen_feasible_lambda(10, &ens, 0.8);
        let d = diff_via_base_advantage(&mdp, &ens, &lam, 1).unwrap();
        assert!(d.iter().all(|v| v.abs() < 1e-10));
        // And the exact gap is also zero: all policies agree on this MDP.
        let d = diff_exact(&mdp, &ens, &lam, 1).unwrap();
        assert!(d.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn modified_kernel_is_the_mixture_kernel() {
        for seed in 0..20 {
            let mdp = gen_random_mdp(seed, 5, 3, 0.9, (-1.0, 1.0));
            let ens = gen_random_ensemble(seed + 100, 5, 3, 3, 1e-6);
            let lam = gen_feasible_lambda(seed + 200, &ens, 0.9);
            let (delta, modified) = modified_kernel(&mdp, &ens, &lam, 2).unwrap();
            // Rows of DeltaP sum to zero; modified rows sum to one.
            for s in 0..5 {
                let dsum: f64 = (0..5).map(|sp| delta[[s, sp]]).sum();
                assert!(dsum.abs() < 1e-10);
                let msum: f64 = (0..5).map(|sp| modified[[s, sp]]).sum();
                assert!((msum - 1.0).abs() < 1e-10);
            }
            // Independent construction through compose.
            let mixture = compose(&ens, &lam).unwrap();
            let direct = mdp.policy_kernel(&mixture);
            for s in 0..5 {
                for sp in 0..5 {
                    assert!((modified[[s, sp]] - direct[[s, sp]]).abs() < 1e-10);
                    assert!(modified[[s, sp]] >= -1e-12);
                }
            }
        }
    }

    #[test]
    fn monte_carlo_consistency() {
        use rand::Rng;
        use rand::SeedableRng;
        use rand_chacha::ChaCha8Rng;
        let mdp = gen_random_mdp(77, 4, 2, 0.9, (-1.0, 1.0));
        let ens = gen_random_ensemble(78, 4, 2, 2, 1e-6);
        let lam = gen_feasible_lambda(79, &ens, 0.9);
        let d = diff_exact(&mdp, &ens, &lam, 1).unwrap();
        let exact_gap: f64 = mdp.initial_dist().dot(&d);
        let j_mix = expected_return(&mdp, &compose(&ens, &lam).unwrap()).unwrap();
        let j_base = expected_return(&mdp, ens.base(1)).unwrap();
        assert!((exact_gap - (j_mix - j_base)).abs() < 1e-10);

        // MC estimate of the return gap with common episode randomness.
        let mixture = compose(&ens, &lam).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let episodes = 200_000;
        let horizon = 200;
        let mut gaps = Vec::with_capacity(episodes);
        let rollout = |pol: &TabularPolicy, rng: &mut ChaCha8Rng| -> f64 {
            let mut s = crate::gen::sample_index(rng, mdp.initial_dist().as_slice().unwrap());
            let mut g = 0.0;
            let mut disc = 1.0;
            for _ in 0..horizon {
                let a = crate::gen::sample_index(rng, pol.probs().row(s).to_slice().unwrap());
                g += disc * mdp.reward()[[s, a]];
                disc *= mdp.gamma();
                let row = mdp.transition().slice(ndarray::s![s, a, ..]);
                s = crate::gen::sample_index(rng, row.to_slice().unwrap());
            }
            g
        };
        for _ in 0..episodes {
            let a = rollout(&mixture, &mut rng);
            let b = rollout(ens.base(1), &mut rng);
            gaps.push(a - b);
        }
        let mean = gaps.iter().sum::<f64>() / episodes as f64;
        let var = gaps.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>() / episodes as f64;
        let se = (var / episodes as f64).sqrt();
        assert!(
            (mean - exact_gap).abs() <= 3.0 * se + 1e-6,
            "MC {mean} vs exact {exact_gap} (se {se})"
        );
        let _ = rng.random::<f64>();
    }
}
