//! Mixture-of-experts policy algebra: composition, the feasible weight set,
//! and the anchor-swapping index transform.
//!
//! A mixture over base policies mu_1..mu_m is parameterized by weights
//! lambda(s, a, i) for i in 0..m-1 (0-based expert indices, the last base is
//! the anchor):
//!
//! pi_lambda(a|s) = sum_i lambda_i(s,a) mu_i(a|s) + (1 - sum_i lambda_i(s,a)) mu_m(a|s).
//!
//! Feasibility asks for lambda in the box 0..1, per-(s,a) sums at most one,
//! and the per-state equality sum_{a,i} lambda_i(s,a)(mu_i - mu_m)(a|s) = 0,
//! which is exactly what makes the composed rows sum to one.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{MoeError, Result};
use crate::mdp::TabularPolicy;

/// Tolerance below which a feasibility report counts as feasible.
pub const FEASIBILITY_TOL: f64 = 1e-9;

/// An ordered set of base policies sharing one state/action space.
///
/// Formulas downstream divide by base probabilities, so bases are
/// epsilon-mixed with uniform at construction whenever any entry falls below
/// `support_floor`.
#[derive(Debug, Clone)]
pub struct BaseEnsemble {
    bases: Vec<TabularPolicy>,
    support_floor: f64,
}

pub const DEFAULT_SUPPORT_FLOOR: f64 = 1e-6;

impl BaseEnsemble {
    pub fn new(bases: Vec<TabularPolicy>, support_floor: f64) -> Result<Self> {
        if bases.len() < 2 {
            return Err(MoeError::InvalidValue {
                name: "ensemble size",
                value: bases.len() as f64,
                requirement: "at least 2 base policies",
            });
        }
        if support_floor < 0.0 {
            return Err(MoeError::InvalidValue {
                name: "support_floor",
                value: support_floor,
                requirement: "support_floor >= 0",
            });
        }
        let (n_s, n_a) = (bases[0].n_states(), bases[0].n_actions());
        for b in &bases[1..] {
            if b.n_states() != n_s || b.n_actions() != n_a {
                return Err(MoeError::ShapeMismatch {
                    context: "BaseEnsemble::new",
                    expected: format!("[{n_s}, {n_a}] policies"),
                    got: format!("[{}, {}]", b.n_states(), b.n_actions()),
                });
            }
        }
        let bases = if support_floor > 0.0 {
            bases
                .into_iter()
                .map(|b| {
                    let min = b.probs().iter().cloned().fold(f64::INFINITY, f64::min);
                    if min < support_floor {
                        // eps-mix so that every entry clears the floor:
                        // (1-eps) p + eps/A >= eps/A >= floor for eps = floor * A.
                        let eps = (support_floor * b.n_actions() as f64).min(1.0);
                        b.mix_with_uniform(eps)
                    } else {
                        b
                    }
                })
                .collect()
        } else {
            bases
        };
        Ok(Self { bases, support_floor })
    }

    pub fn with_default_floor(bases: Vec<TabularPolicy>) -> Result<Self> {
        Self::new(bases, DEFAULT_SUPPORT_FLOOR)
    }

    /// Number of base policies m.
    pub fn m(&self) -> usize {
        self.bases.len()
    }

    /// The `j`-th base policy, 0-based; the anchor is `base(m() - 1)`.
    pub fn base(&self, j: usize) -> &TabularPolicy {
        &self.bases[j]
    }

    pub fn bases(&self) -> &[TabularPolicy] {
        &self.bases
    }

    pub fn anchor(&self) -> &TabularPolicy {
        self.bases.last().unwrap()
    }

    pub fn support_floor(&self) -> f64 {
        self.support_floor
    }

    pub fn n_states(&self) -> usize {
        self.bases[0].n_states()
    }

    pub fn n_actions(&self) -> usize {
        self.bases[0].n_actions()
    }
}

/// Mixture-weight tensor lambda(s, a, i), i in 0..m-1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureWeights {
    lam: Array3<f64>,
}

impl MixtureWeights {
    pub fn new(lam: Array3<f64>) -> Self {
        Self { lam }
    }

    pub fn zeros(n_states: usize, n_actions: usize, components: usize) -> Self {
        Self {
            lam: Array3::zeros((n_states, n_actions, components)),
        }
    }

    /// Broadcast state-only weights over actions. State-only weights satisfy
    /// the per-state equality automatically because each base row sums to one.
    pub fn from_state_weights(weights: &Array2<f64>, n_actions: usize) -> Self {
        let (n_s, k) = weights.dim();
        let mut lam = Array3::zeros((n_s, n_actions, k));
        for s in 0..n_s {
            for a in 0..n_actions {
                for i in 0..k {
                    lam[[s, a, i]] = weights[[s, i]];
                }
            }
        }
        Self { lam }
    }

    pub fn lam(&self) -> &Array3<f64> {
        &self.lam
    }

    pub fn lam_mut(&mut self) -> &mut Array3<f64> {
        &mut self.lam
    }

    pub fn n_states(&self) -> usize {
        self.lam.dim().0
    }

    pub fn n_actions(&self) -> usize {
        self.lam.dim().1
    }

    /// m - 1, the number of free mixture components.
    pub fn n_components(&self) -> usize {
        self.lam.dim().2
    }

    /// Weights at one state-action pair as a vector of length m-1.
    pub fn at(&self, s: usize, a: usize) -> Vec<f64> {
        (0..self.n_components()).map(|i| self.lam[[s, a, i]]).collect()
    }

    pub fn to_json(&self) -> String {
        let nested: Vec<Vec<Vec<f64>>> = (0..self.n_states())
            .map(|s| {
                (0..self.n_actions())
                    .map(|a| self.at(s, a))
                    .collect()
            })
            .collect();
        serde_json::to_string_pretty(&nested).expect("weights serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let nested: Vec<Vec<Vec<f64>>> = serde_json::from_str(text)?;
        let n_s = nested.len();
        let n_a = nested.first().map_or(0, |x| x.len());
        let k = nested
            .first()
            .and_then(|x| x.first())
            .map_or(0, |x| x.len());
        let mut lam = Array3::zeros((n_s, n_a, k));
        for (s, per_a) in nested.iter().enumerate() {
            if per_a.len() != n_a {
                return Err(MoeError::Config("ragged mixture-weight rows".into()));
            }
            for (a, per_i) in per_a.iter().enumerate() {
                if per_i.len() != k {
                    return Err(MoeError::Config("ragged mixture-weight rows".into()));
                }
                for (i, v) in per_i.iter().enumerate() {
                    lam[[s, a, i]] = *v;
                }
            }
        }
        Ok(Self { lam })
    }
}

/// Worst-case violations of the three feasibility constraint families.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeasibilityReport {
    /// max distance of any lambda entry from the box [0, 1]
    pub max_box: f64,
    /// max of (sum_i lambda(s,a,i) - 1) over state-action pairs
    pub max_simplex: f64,
    /// max absolute per-state equality violation
    pub max_equality: f64,
}

impl FeasibilityReport {
    pub fn is_feasible(&self, tol: f64) -> bool {
        self.max_box <= tol && self.max_simplex <= tol && self.max_equality <= tol
    }

    pub fn worst(&self) -> f64 {
        self.max_box.max(self.max_simplex).max(self.max_equality)
    }
}

fn check_shapes(ensemble: &BaseEnsemble, lam: &MixtureWeights) -> Result<()> {
    if lam.n_states() != ensemble.n_states()
        || lam.n_actions() != ensemble.n_actions()
        || lam.n_components() != ensemble.m() - 1
    {
        return Err(MoeError::ShapeMismatch {
            context: "mixture weights vs ensemble",
            expected: format!(
                "[{}, {}, {}]",
                ensemble.n_states(),
                ensemble.n_actions(),
                ensemble.m() - 1
            ),
            got: format!(
                "[{}, {}, {}]",
                lam.n_states(),
                lam.n_actions(),
                lam.n_components()
            ),
        });
    }
    Ok(())
}

/// Measure how far `lam` is from the feasible set of `ensemble`.
pub fn check_feasible(ensemble: &BaseEnsemble, lam: &MixtureWeights) -> Result<FeasibilityReport> {
    check_shapes(ensemble, lam)?;
    let m = ensemble.m();
    let mut max_box = 0.0_f64;
    let mut max_simplex = 0.0_f64;
    let mut max_equality = 0.0_f64;
    for s in 0..lam.n_states() {
        let mut eq = 0.0;
        for a in 0..lam.n_actions() {
            let mut total = 0.0;
            for i in 0..m - 1 {
                let v = lam.lam()[[s, a, i]];
                max_box = max_box.max(-v).max(v - 1.0);
                total += v;
                eq += v * (ensemble.base(i).prob(s, a) - ensemble.base(m - 1).prob(s, a));
            }
            max_simplex = max_simplex.max(total - 1.0);
        }
        max_equality = max_equality.max(eq.abs());
    }
    Ok(FeasibilityReport {
        max_box: max_box.max(0.0),
        max_simplex: max_simplex.max(0.0),
        max_equality,
    })
}

/// Compose the mixture policy. Errors with the worst offending constraint if
/// `lam` is infeasible.
///
/// ```
/// use moerl::{compose, BaseEnsemble, MixtureWeights, TabularPolicy};
/// use ndarray::arr2;
///
/// let a = TabularPolicy::new(arr2(&[[0.8, 0.2]])).unwrap();
/// let b = TabularPolicy::new(arr2(&[[0.2, 0.8]])).unwrap();
/// let ens = BaseEnsemble::new(vec![a, b], 0.0).unwrap();
/// // State-only weights satisfy the per-state equality automatically.
/// let lam = MixtureWeights::from_state_weights(&arr2(&[[0.5]]), 2);
/// let pi = compose(&ens, &lam).unwrap();
/// assert!((pi.prob(0, 0) - 0.5).abs() < 1e-12);
/// ```
pub fn compose(ensemble: &BaseEnsemble, lam: &MixtureWeights) -> Result<TabularPolicy> {
    let report = check_feasible(ensemble, lam)?;
    if !report.is_feasible(FEASIBILITY_TOL) {
        return Err(MoeError::Infeasible {
            max_box: report.max_box,
            max_simplex: report.max_simplex,
            max_equality: report.max_equality,
            detail: format!("worst violation {:.3e}", report.worst()),
        });
    }
    Ok(compose_unchecked(ensemble, lam))
}

/// Composition without the feasibility gate (used by solvers on iterates that
/// are feasible by construction).
pub fn compose_unchecked(ensemble: &BaseEnsemble, lam: &MixtureWeights) -> TabularPolicy {
    let m = ensemble.m();
    let (n_s, n_a) = (ensemble.n_states(), ensemble.n_actions());
    let mut probs = Array2::zeros((n_s, n_a));
    for s in 0..n_s {
        for a in 0..n_a {
            let mut total = 0.0;
            let mut acc = 0.0;
            for i in 0..m - 1 {
                let w = lam.lam()[[s, a, i]];
                total += w;
                acc += w * ensemble.base(i).prob(s, a);
            }
            probs[[s, a]] = acc + (1.0 - total) * ensemble.base(m - 1).prob(s, a);
        }
    }
    TabularPolicy::new(probs).expect("feasible mixture composes to a valid policy")
}

/// Re-anchor mixture weights so base `j` (0-based) plays the anchor role.
///
/// Input is the length m-1 weight vector at one state-action pair; output has
/// length m. For `j = m-1` the anchor stays put and the output is
/// (lambda_0, .., lambda_{m-2}, 0); otherwise slot `j` is zeroed and the old
/// anchor slot receives 1 - sum_i lambda_i.
pub fn transform_f(lam_at: &[f64], j: usize) -> Result<Vec<f64>> {
    let m = lam_at.len() + 1;
    if j >= m {
        return Err(MoeError::IndexOutOfRange {
            what: "expert",
            index: j,
            bound: m,
        });
    }
    let mut out = Vec::with_capacity(m);
    if j == m - 1 {
        out.extend_from_slice(lam_at);
        out.push(0.0);
    } else {
        let total: f64 = lam_at.iter().sum();
        for (i, &v) in lam_at.iter().enumerate() {
            out.push(if i == j { 0.0 } else { v });
        }
        out.push(1.0 - total);
    }
    Ok(out)
}

/// State-action confidence recovered from a candidate policy pinched between
/// two reference policies:
///
/// lambda_phi(s,a) = (pi_phi - mu)(a|s) / (rho - mu)(a|s),
///
/// clamped to 0..1; where rho and mu agree the convention is lambda = 0.
pub fn lambda_from_candidate(
    pi_phi: &TabularPolicy,
    mu: &TabularPolicy,
    rho: &TabularPolicy,
) -> Result<Array2<f64>> {
    let (n_s, n_a) = (mu.n_states(), mu.n_actions());
    if pi_phi.n_states() != n_s
        || pi_phi.n_actions() != n_a
        || rho.n_states() != n_s
        || rho.n_actions() != n_a
    {
        return Err(MoeError::ShapeMismatch {
            context: "lambda_from_candidate",
            expected: format!("[{n_s}, {n_a}] policies"),
            got: "mismatched policy shapes".into(),
        });
    }
    let mut lam = Array2::zeros((n_s, n_a));
    for s in 0..n_s {
        for a in 0..n_a {
            let denom = rho.prob(s, a) - mu.prob(s, a);
            if denom.abs() < 1e-12 {
                continue; // degenerate denominator -> 0 by convention
            }
            let v = (pi_phi.prob(s, a) - mu.prob(s, a)) / denom;
            lam[[s, a]] = v.clamp(0.0, 1.0);
        }
    }
    Ok(lam)
}

/// KL divergence between two finite distributions, natural log, 0 log 0 = 0.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            acc += pi * (pi / qi).ln();
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gen::{gen_feasible_lambda, gen_random_ensemble};
    use ndarray::arr2;

    fn two_policy_ensemble() -> BaseEnsemble {
        let a = TabularPolicy::new(arr2(&[[0.7, 0.3], [0.2, 0.8]])).unwrap();
        let b = TabularPolicy::new(arr2(&[[0.4, 0.6], [0.5, 0.5]])).unwrap();
        BaseEnsemble::new(vec![a, b], 0.0).unwrap()
    }

    #[test]
    fn zero_lambda_recovers_anchor() {
        let ens = two_policy_ensemble();
        let lam = MixtureWeights::zeros(2, 2, 1);
        let pol = compose(&ens, &lam).unwrap();
        assert_eq!(pol, *ens.anchor());
    }

    #[test]
    fn identical_bases_compose_to_themselves() {
        let p = TabularPolicy::new(arr2(&[[0.6, 0.4]])).unwrap();
        let ens = BaseEnsemble::new(vec![p.clone(), p.clone(), p.clone()], 0.0).unwrap();
        // Any box/simplex-feasible lambda is feasible here (the equality terms
        // vanish), and the composition is the common policy.
        let mut lam = MixtureWeights::zeros(1, 2, 2);
        lam.lam_mut()[[0, 0, 0]] = 0.3;
        lam.lam_mut()[[0, 0, 1]] = 0.5;
        lam.lam_mut()[[0, 1, 0]] = 0.9;
        let pol = compose(&ens, &lam).unwrap();
        for a in 0..2 {
            assert!((pol.prob(0, a) - p.prob(0, a)).abs() < 1e-12);
        }
    }

    #[test]
    fn random_feasible_lambda_composes_row_stochastic() {
        for seed in 0..1000 {
            let ens = gen_random_ensemble(seed, 4, 3, 3, 1e-6);
            let lam = gen_feasible_lambda(seed + 1000, &ens, 0.8);
            let rep = check_feasible(&ens, &lam).unwrap();
            assert!(rep.is_feasible(FEASIBILITY_TOL), "seed {seed}: {rep:?}");
            let pol = compose(&ens, &lam).unwrap();
            for s in 0..4 {
                let sum: f64 = (0..3).map(|a| pol.prob(s, a)).sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn feasibility_report_flags_box_violation() {
        let ens = two_policy_ensemble();
        let mut lam = MixtureWeights::zeros(2, 2, 1);
        lam.lam_mut()[[0, 0, 0]] = 1.2;
        let rep = check_feasible(&ens, &lam).unwrap();
        assert!((rep.max_box - 0.2).abs() < 1e-12);
        assert!(compose(&ens, &lam).is_err());
    }

    #[test]
    fn transform_matches_hand_values() {
        // m = 3, lambda = (0.2, 0.3); 0-based anchors.
        let lam = [0.2, 0.3];
        assert_eq!(transform_f(&lam, 2).unwrap(), vec![0.2, 0.3, 0.0]);
        let f0 = transform_f(&lam, 0).unwrap();
        assert!((f0[0] - 0.0).abs() < 1e-15);
        assert!((f0[1] - 0.3).abs() < 1e-15);
        assert!((f0[2] - 0.5).abs() < 1e-15);
        // Empty mixture re-anchored anywhere but the anchor puts full weight
        // on the old anchor slot.
        let z = [0.0, 0.0];
        assert_eq!(transform_f(&z, 0).unwrap(), vec![0.0, 0.0, 1.0]);
        assert!(transform_f(&z, 3).is_err());
    }

    #[test]
    fn transform_preserves_feasibility() {
        for seed in 0..50 {
            let ens = gen_random_ensemble(seed, 3, 3, 3, 1e-6);
            let lam = gen_feasible_lambda(seed + 77, &ens, 0.9);
            let m = ens.m();
            for j in 0..m {
                // Box and simplex on the transformed weights.
                for s in 0..3 {
                    let mut eq = 0.0;
                    for a in 0..3 {
                        let f = transform_f(&lam.at(s, a), j).unwrap();
                        let total: f64 = f.iter().sum();
                        assert!(total <= 1.0 + 1e-9);
                        for &v in &f {
                            assert!((-1e-9..=1.0 + 1e-9).contains(&v));
                        }
                        for (i, &fi) in f.iter().enumerate() {
                            eq += fi * (ens.base(i).prob(s, a) - ens.base(j).prob(s, a));
                        }
                    }
                    // j-anchored equality: sum_a sum_i f_i (mu_i - mu_j) = 0.
                    assert!(eq.abs() < 1e-9, "seed {seed} j {j} eq {eq}");
                }
            }
        }
    }

    #[test]
    fn compose_is_affine_in_lambda() {
        let ens = gen_random_ensemble(5, 3, 2, 3, 1e-6);
        let l1 = gen_feasible_lambda(6, &ens, 0.7);
        let l2 = gen_feasible_lambda(7, &ens, 0.7);
        let mid = MixtureWeights::new((l1.lam() + l2.lam()) / 2.0);
        let p1 = compose(&ens, &l1).unwrap();
        let p2 = compose(&ens, &l2).unwrap();
        let pm = compose(&ens, &mid).unwrap();
        for s in 0..3 {
            for a in 0..2 {
                let lhs = p1.prob(s, a) + p2.prob(s, a) - 2.0 * pm.prob(s, a);
                assert!(lhs.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn candidate_confidence_recovery() {
        let mu = TabularPolicy::new(arr2(&[[0.6, 0.4]])).unwrap();
        let rho = TabularPolicy::new(arr2(&[[0.2, 0.8]])).unwrap();
        let lam = lambda_from_candidate(&mu, &mu, &rho).unwrap();
        assert_eq!(lam[[0, 0]], 0.0);
        let lam = lambda_from_candidate(&rho, &mu, &rho).unwrap();
        assert!((lam[[0, 0]] - 1.0).abs() < 1e-12);
        let mid = TabularPolicy::new(arr2(&[[0.4, 0.6]])).unwrap();
        let lam = lambda_from_candidate(&mid, &mu, &rho).unwrap();
        assert!((lam[[0, 0]] - 0.5).abs() < 1e-12);
        assert!((lam[[0, 1]] - 0.5).abs() < 1e-12);
        // Degenerate denominator falls back to zero.
        let lam = lambda_from_candidate(&mid, &mu, &mu).unwrap();
        assert_eq!(lam[[0, 0]], 0.0);
    }

    #[test]
    fn tiny_ensembles_are_rejected() {
        let p = TabularPolicy::uniform(2, 2);
        assert!(BaseEnsemble::new(vec![p.clone()], 1e-6).is_err());
        assert!(BaseEnsemble::new(vec![p.clone(), p], -0.1).is_err());
    }

    #[test]
    fn state_only_weights_hold_equality() {
        let ens = gen_random_ensemble(9, 4, 3, 3, 1e-6);
        let w = arr2(&[[0.2, 0.1], [0.0, 0.5], [0.4, 0.4], [0.1, 0.0]]);
        let lam = MixtureWeights::from_state_weights(&w, 3);
        let rep = check_feasible(&ens, &lam).unwrap();
        assert!(rep.max_equality < 1e-12);
    }
}
