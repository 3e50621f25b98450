//! Conservative lower bounds on the return gap between a mixture policy and
//! its base policies.
//!
//! For an anchor base mu_j and re-anchored weights `f_j[lambda]`, the surrogate
//! terms under the anchor's discounted occupancy d are
//!
//! - L1 = E_d[ sum_i f_i (mu_i - mu_j) A_j ]          (signed gain)
//! - L2 = E_d[ sum_i f_i |mu_i - mu_j| ]              (policy deviation)
//! - L3(s0) = E_{d(s0)}[ sum_i f_i |mu_i - mu_j| |A_j| ]  (per-start penalty)
//! - L4 = E_{s0 ~ P0}[ L3(s0) ]
//!
//! and the gap bound is (L1 - gamma/(1-gamma) L2 L3) / (1-gamma), with L3
//! taken as the max over starts (sound) or its initial-distribution mean (the
//! practical surrogate). Also provided: the convex multi-anchor combination,
//! a TRPO-style bound valid for any state-value function W, and the Pinsker
//! relaxation it all lower-bounds.

use ndarray::{Array1, Array2};
use serde::Serialize;

use crate::error::{MoeError, Result};
use crate::linalg;
use crate::mdp::{advantage, expected_return, Anchor, FiniteMdp};
use crate::moe::{
    check_feasible, compose_unchecked, kl_divergence, transform_f, BaseEnsemble, MixtureWeights,
    FEASIBILITY_TOL,
};

/// Surrogate ingredients of the gap bound for one anchor.
#[derive(Debug, Clone, Serialize)]
pub struct SurrogateTerms {
    pub l1: f64,
    pub l2: f64,
    pub l3_per_s0: Vec<f64>,
    pub l3_max: f64,
    pub l4: f64,
}

/// Which bound produced a report (also the CSV tag).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundVariant {
    Cpi,
    CpiMeanL3,
    AlphaCombined,
    Trpo,
    Pinsker,
}

impl std::fmt::Display for BoundVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = match self {
            BoundVariant::Cpi => "cpi",
            BoundVariant::CpiMeanL3 => "cpi-mean-l3",
            BoundVariant::AlphaCombined => "alpha-combined",
            BoundVariant::Trpo => "trpo",
            BoundVariant::Pinsker => "pinsker",
        };
        f.write_str(tag)
    }
}

/// A bound next to the exact quantity it bounds.
#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    pub bound: f64,
    /// J_{pi_lambda} - J_{mu_j} for gap bounds; J_{pi_lambda} itself for the
    /// alpha-combined return bound.
    pub true_diff: f64,
    /// true_diff - bound; nonnegative (to float error) for valid variants.
    pub slack: f64,
    pub variant: BoundVariant,
}

fn feasible_or_err(ensemble: &BaseEnsemble, lam: &MixtureWeights) -> Result<()> {
    let report = check_feasible(ensemble, lam)?;
    if !report.is_feasible(FEASIBILITY_TOL) {
        return Err(MoeError::Infeasible {
            max_box: report.max_box,
            max_simplex: report.max_simplex,
            max_equality: report.max_equality,
            detail: "bounds require feasible weights".into(),
        });
    }
    Ok(())
}

/// Occupancy rows for every start state at once:
/// D[s0, s] = (1-gamma) [ (I - gamma P)^{-1} ]_{s0, s}.
fn occupancy_matrix(mdp: &FiniteMdp, kernel: &Array2<f64>) -> Result<Array2<f64>> {
    let n = mdp.n_states();
    let mut a = Array2::eye(n);
    a.scaled_add(-mdp.gamma(), kernel);
    // Solve A^T X = I column-wise, then D = (1-gamma) X^T.
    let eye = Array2::eye(n);
    let x = linalg::solve_matrix(&a.t().to_owned(), &eye)?;
    Ok(x.t().mapv(|v| v * (1.0 - mdp.gamma())))
}

/// Compute all four surrogate terms for anchor expert `j` (0-based).
pub fn surrogate_terms(
    mdp: &FiniteMdp,
    ensemble: &BaseEnsemble,
    lam: &MixtureWeights,
    j: usize,
) -> Result<SurrogateTerms> {
    if j >= ensemble.m() {
        return Err(MoeError::IndexOutOfRange {
            what: "anchor expert",
            index: j,
            bound: ensemble.m(),
        });
    }
    feasible_or_err(ensemble, lam)?;
    let (n_s, n_a, m) = (mdp.n_states(), mdp.n_actions(), ensemble.m());
    let anchor = ensemble.base(j);
    let adv = advantage(mdp, anchor)?;
    let kernel = mdp.policy_kernel(anchor);
    let occ_rows = occupancy_matrix(mdp, &kernel)?;

    // Per-state inner sums over actions and transformed components.
    let mut gain = Array1::<f64>::zeros(n_s); // sum_a sum_i f_i (mu_i - mu_j) A_j
    let mut dev = Array1::<f64>::zeros(n_s); // sum_a sum_i f_i |mu_i - mu_j|
    let mut dev_adv = Array1::<f64>::zeros(n_s); // sum_a sum_i f_i |mu_i - mu_j| |A_j|
    for s in 0..n_s {
        for a in 0..n_a {
            let f = transform_f(&lam.at(s, a), j)?;
            for i in 0..m {
                let dmu = ensemble.base(i).prob(s, a) - anchor.prob(s, a);
                gain[s] += f[i] * dmu * adv.0[[s, a]];
                dev[s] += f[i] * dmu.abs();
                dev_adv[s] += f[i] * dmu.abs() * adv.0[[s, a]].abs();
            }
        }
    }

    let p0 = mdp.initial_dist();
    let d_p0 = p0.dot(&occ_rows);
    let l1 = d_p0.dot(&gain);
    let l2 = d_p0.dot(&dev);
    let l3_per_s0: Vec<f64> = (0..n_s)
        .map(|s0| occ_rows.row(s0).dot(&dev_adv))
        .collect();
    let l3_max = l3_per_s0.iter().cloned().fold(0.0_f64, f64::max);
    let l4 = l3_per_s0
        .iter()
        .enumerate()
        .map(|(s0, v)| p0[s0] * v)
        .sum();
    Ok(SurrogateTerms { l1, l2, l3_per_s0, l3_max, l4 })
}

/// The gap bound (L1 - gamma/(1-gamma) L2 L3) / (1-gamma); `use_max_l3` picks
/// the sound max-over-starts penalty, otherwise the initial-distribution mean.
pub fn cpi_lower_bound(terms: &SurrogateTerms, gamma: f64, use_max_l3: bool) -> f64 {
    let l3 = if use_max_l3 { terms.l3_max } else { terms.l4 };
    (terms.l1 - gamma / (1.0 - gamma) * terms.l2 * l3) / (1.0 - gamma)
}

/// CPI bound against the exact gap for anchor `j`.
pub fn cpi_bound_report(
    mdp: &FiniteMdp,
    ensemble: &BaseEnsemble,
    lam: &MixtureWeights,
    j: usize,
    use_max_l3: bool,
) -> Result<BoundReport> {
    let terms = surrogate_terms(mdp, ensemble, lam, j)?;
    let bound = cpi_lower_bound(&terms, mdp.gamma(), use_max_l3);
    let mixture = compose_unchecked(ensemble, lam);
    let true_diff =
        expected_return(mdp, &mixture)? - expected_return(mdp, ensemble.base(j))?;
    Ok(BoundReport {
        bound,
        true_diff,
        slack: true_diff - bound,
        variant: if use_max_l3 { BoundVariant::Cpi } else { BoundVariant::CpiMeanL3 },
    })
}

/// Convex multi-anchor return bound
/// J_pi >= sum_j alpha_j (J_{mu_j} + L_{f_j}/(1-gamma)) with the mean-L3 form.
pub fn alpha_combined_bound(
    mdp: &FiniteMdp,
    ensemble: &BaseEnsemble,
    lam: &MixtureWeights,
    alpha: &[f64],
) -> Result<BoundReport> {
    let m = ensemble.m();
    if alpha.len() != m {
        return Err(MoeError::ShapeMismatch {
            context: "alpha_combined_bound",
            expected: format!("{m} weights"),
            got: format!("{}", alpha.len()),
        });
    }
    let sum: f64 = alpha.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || alpha.iter().any(|&a| a < -1e-12) {
        return Err(MoeError::InvalidValue {
            name: "alpha",
            value: sum,
            requirement: "alpha in the simplex (sum 1, nonnegative)",
        });
    }
    let gamma = mdp.gamma();
    let mut bound = 0.0;
    for j in 0..m {
        if alpha[j] == 0.0 {
            continue;
        }
        let terms = surrogate_terms(mdp, ensemble, lam, j)?;
        let script_l = terms.l1 - gamma / (1.0 - gamma) * terms.l2 * terms.l4;
        bound += alpha[j]
            * (expected_return(mdp, ensemble.base(j))? + script_l / (1.0 - gamma));
    }
    let mixture = compose_unchecked(ensemble, lam);
    let j_mix = expected_return(mdp, &mixture)?;
    Ok(BoundReport {
        bound,
        true_diff: j_mix,
        slack: j_mix - bound,
        variant: BoundVariant::AlphaCombined,
    })
}

/// TRPO-style gap bound for any state-value function `w`, anchored at the
/// last base:
///
/// gap >= L_W/(1-gamma) - 2 gamma/(1-gamma)^2 * eps_W *
///        E_d[ sum_i fbar_i(s) sqrt(KL(mu_p(.|s) || mu_i(.|s)) / 2) ],
///
/// where DeltaW(s,a) = R(s,a) + gamma E[W(s')] - W(s), eps_W is the exact
/// tabular max of `|E_{pi_lambda}[DeltaW]|`, and fbar averages the state-action
/// weights over actions under the anchor.
pub fn trpo_bound(
    mdp: &FiniteMdp,
    ensemble: &BaseEnsemble,
    lam: &MixtureWeights,
    w: &Array1<f64>,
) -> Result<BoundReport> {
    feasible_or_err(ensemble, lam)?;
    if w.len() != mdp.n_states() {
        return Err(MoeError::ShapeMismatch {
            context: "trpo_bound",
            expected: format!("W of length {}", mdp.n_states()),
            got: format!("{}", w.len()),
        });
    }
    let (n_s, n_a, m) = (mdp.n_states(), mdp.n_actions(), ensemble.m());
    let p = m - 1;
    let anchor = ensemble.base(p);
    let gamma = mdp.gamma();

    // DeltaW(s,a) with the next-state expectation folded in.
    let mut delta_w = Array2::zeros((n_s, n_a));
    for s in 0..n_s {
        for a in 0..n_a {
            let mut acc = mdp.reward()[[s, a]] - w[s];
            for sp in 0..n_s {
                acc += gamma * mdp.transition()[[s, a, sp]] * w[sp];
            }
            delta_w[[s, a]] = acc;
        }
    }

    let occ = crate::mdp::occupancy(mdp, anchor, Anchor::InitialDist)?;
    let mixture = compose_unchecked(ensemble, lam);

    let mut l_w = 0.0;
    let mut penalty_exp = 0.0;
    let mut eps_w = 0.0_f64;
    for s in 0..n_s {
        // Per-state sqrt-KL factors need full support of every compared base.
        let anchor_row: Vec<f64> = (0..n_a).map(|a| anchor.prob(s, a)).collect();
        let mut fbar = vec![0.0; m];
        let mut gain = 0.0;
        for a in 0..n_a {
            let f = transform_f(&lam.at(s, a), p)?;
            for i in 0..m {
                gain += f[i] * (ensemble.base(i).prob(s, a) - anchor.prob(s, a)) * delta_w[[s, a]];
                fbar[i] += anchor.prob(s, a) * f[i];
            }
        }
        l_w += occ.d[s] * gain;
        for (i, &fb) in fbar.iter().enumerate() {
            if fb == 0.0 {
                continue;
            }
            let other: Vec<f64> = (0..n_a).map(|a| ensemble.base(i).prob(s, a)).collect();
            let kl = kl_divergence(&anchor_row, &other);
            if !kl.is_finite() {
                return Err(MoeError::InvalidValue {
                    name: "KL(anchor || base)",
                    value: kl,
                    requirement: "bases need full support (use a support floor)",
                });
            }
            penalty_exp += occ.d[s] * fb * (0.5 * kl).sqrt();
        }
        let mean_dw: f64 = (0..n_a).map(|a| mixture.prob(s, a) * delta_w[[s, a]]).sum();
        eps_w = eps_w.max(mean_dw.abs());
    }

    let bound = l_w / (1.0 - gamma)
        - 2.0 * gamma / ((1.0 - gamma) * (1.0 - gamma)) * eps_w * penalty_exp;
    let true_diff = expected_return(mdp, &mixture)? - expected_return(mdp, anchor)?;
    Ok(BoundReport {
        bound,
        true_diff,
        slack: true_diff - bound,
        variant: BoundVariant::Trpo,
    })
}

/// Pinsker relaxation of the mean-L3 bound:
///
/// gap >= E_d[ pi_lambda . A_p (s) ]/(1-gamma)
///        - 2 gamma ||A_p||_inf / (1-gamma)^2 * E_d[ KL(pi_lambda || mu_p)(s) ].
///
/// The penalty constant is the one the relaxation chain actually produces
/// (||pi - mu_p||_1^2 <= 2 KL), which keeps this bound below the mean-L3
/// surrogate on two-base ensembles.
pub fn pinsker_bound(
    mdp: &FiniteMdp,
    ensemble: &BaseEnsemble,
    lam: &MixtureWeights,
    p: usize,
) -> Result<BoundReport> {
    feasible_or_err(ensemble, lam)?;
    if p != ensemble.m() - 1 {
        return Err(MoeError::IndexOutOfRange {
            what: "anchor expert (must be the last base)",
            index: p,
            bound: ensemble.m(),
        });
    }
    let (n_s, n_a) = (mdp.n_states(), mdp.n_actions());
    let anchor = ensemble.base(p);
    let gamma = mdp.gamma();
    let adv = advantage(mdp, anchor)?;
    let occ = crate::mdp::occupancy(mdp, anchor, Anchor::InitialDist)?;
    let mixture = compose_unchecked(ensemble, lam);
    let a_inf = adv.0.iter().fold(0.0_f64, |mx, v| mx.max(v.abs()));

    let mut first = 0.0;
    let mut kl_term = 0.0;
    for s in 0..n_s {
        let gain: f64 = (0..n_a).map(|a| mixture.prob(s, a) * adv.0[[s, a]]).sum();
        first += occ.d[s] * gain;
        let mix_row: Vec<f64> = (0..n_a).map(|a| mixture.prob(s, a)).collect();
        let anchor_row: Vec<f64> = (0..n_a).map(|a| anchor.prob(s, a)).collect();
        let kl = kl_divergence(&mix_row, &anchor_row);
        if !kl.is_finite() {
            return Err(MoeError::InvalidValue {
                name: "KL(mixture || anchor)",
                value: kl,
                requirement: "anchor needs full support (use a support floor)",
            });
        }
        kl_term += occ.d[s] * kl;
    }
    let bound = first / (1.0 - gamma)
        - 2.0 * gamma * a_inf / ((1.0 - gamma) * (1.0 - gamma)) * kl_term;
    let true_diff = expected_return(mdp, &mixture)? - expected_return(mdp, anchor)?;
    Ok(BoundReport {
        bound,
        true_diff,
        slack: true_diff - bound,
        variant: BoundVariant::Pinsker,
    })
}
