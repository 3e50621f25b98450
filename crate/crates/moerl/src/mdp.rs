//! Exact finite-MDP representation and linear-algebra evaluation primitives.
//!
//! Everything downstream (difference values, bounds, the QP, critics, the
//! manager) treats these solvers as ground truth, so evaluation here is done
//! with direct LU solves rather than iterative sweeps.

use ndarray::{Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{MoeError, Result};
use crate::linalg;

/// Probability rows off by at most this much are silently renormalized;
/// anything worse is a constructor error.
pub const ROW_REPAIR_TOL: f64 = 1e-9;

fn repair_row(row: &mut [f64], context: &'static str, index: usize) -> Result<()> {
    for v in row.iter_mut() {
        if *v < 0.0 {
            if *v > -1e-12 {
                *v = 0.0;
            } else {
                return Err(MoeError::InvalidDistribution {
                    context,
                    index,
                    sum: *v,
                });
            }
        }
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_REPAIR_TOL {
        return Err(MoeError::InvalidDistribution { context, index, sum });
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    Ok(())
}

/// A finite MDP: states, actions, transition kernel, reward table, discount,
/// and initial state distribution.
#[derive(Debug, Clone)]
pub struct FiniteMdp {
    n_states: usize,
    n_actions: usize,
    /// `transition[[s, a, s']]` = P(s' | s, a); each (s, a) row sums to 1.
    transition: Array3<f64>,
    /// `reward[[s, a]]` = R(s, a).
    reward: Array2<f64>,
    gamma: f64,
    initial_dist: Array1<f64>,
}

/// JSON wire form of [`FiniteMdp`]: `{"n_states", "n_actions", "gamma",
/// "P0":[...], "R":[[...]], "T":[[[...]]]}` with `T[s][a][s']`.
#[derive(Serialize, Deserialize)]
struct MdpDoc {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    #[serde(rename = "P0")]
    p0: Vec<f64>,
    #[serde(rename = "R")]
    r: Vec<Vec<f64>>,
    #[serde(rename = "T")]
    t: Vec<Vec<Vec<f64>>>,
}

impl FiniteMdp {
    pub fn new(
        transition: Array3<f64>,
        reward: Array2<f64>,
        gamma: f64,
        initial_dist: Array1<f64>,
    ) -> Result<Self> {
        let (n_states, n_actions, n_next) = transition.dim();
        if n_next != n_states {
            return Err(MoeError::ShapeMismatch {
                context: "FiniteMdp::new",
                expected: format!("transition [{n_states}, {n_actions}, {n_states}]"),
                got: format!("{:?}", transition.dim()),
            });
        }
        if reward.dim() != (n_states, n_actions) {
            return Err(MoeError::ShapeMismatch {
                context: "FiniteMdp::new",
                expected: format!("reward [{n_states}, {n_actions}]"),
                got: format!("{:?}", reward.dim()),
            });
        }
        if initial_dist.len() != n_states {
            return Err(MoeError::ShapeMismatch {
                context: "FiniteMdp::new",
                expected: format!("initial_dist of length {n_states}"),
                got: format!("{}", initial_dist.len()),
            });
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(MoeError::InvalidValue {
                name: "gamma",
                value: gamma,
                requirement: "0 <= gamma < 1",
            });
        }
        if reward.iter().any(|r| !r.is_finite()) {
            return Err(MoeError::InvalidValue {
                name: "reward",
                value: f64::NAN,
                requirement: "all rewards finite",
            });
        }
        let mut transition = transition;
        for s in 0..n_states {
            for a in 0..n_actions {
                let mut row = transition.slice_mut(ndarray::s![s, a, ..]);
                repair_row(row.as_slice_mut().unwrap(), "transition row", s * n_actions + a)?;
            }
        }
        let mut initial_dist = initial_dist;
        repair_row(initial_dist.as_slice_mut().unwrap(), "initial distribution", 0)?;
        Ok(Self {
            n_states,
            n_actions,
            transition,
            reward,
            gamma,
            initial_dist,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn transition(&self) -> &Array3<f64> {
        &self.transition
    }

    pub fn reward(&self) -> &Array2<f64> {
        &self.reward
    }

    pub fn initial_dist(&self) -> &Array1<f64> {
        &self.initial_dist
    }

    /// State-to-state kernel induced by a policy:
    /// P_pi(s'|s) = sum_a pi(a|s) P(s'|s,a).
    pub fn policy_kernel(&self, policy: &TabularPolicy) -> Array2<f64> {
        let mut p = Array2::zeros((self.n_states, self.n_states));
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let w = policy.probs[[s, a]];
                if w == 0.0 {
                    continue;
                }
                for sp in 0..self.n_states {
                    p[[s, sp]] += w * self.transition[[s, a, sp]];
                }
            }
        }
        p
    }

    /// Expected one-step reward under a policy: r_pi(s) = sum_a pi(a|s) R(s,a).
    pub fn policy_reward(&self, policy: &TabularPolicy) -> Array1<f64> {
        (&policy.probs * &self.reward).sum_axis(Axis(1))
    }

    pub fn to_json(&self) -> String {
        let doc = MdpDoc {
            n_states: self.n_states,
            n_actions: self.n_actions,
            gamma: self.gamma,
            p0: self.initial_dist.to_vec(),
            r: self
                .reward
                .outer_iter()
                .map(|row| row.to_vec())
                .collect(),
            t: (0..self.n_states)
                .map(|s| {
                    (0..self.n_actions)
                        .map(|a| self.transition.slice(ndarray::s![s, a, ..]).to_vec())
                        .collect()
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("MDP document serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: MdpDoc = serde_json::from_str(text)?;
        let n_s = doc.n_states;
        let n_a = doc.n_actions;
        let mut t = Array3::zeros((n_s, n_a, n_s));
        if doc.t.len() != n_s {
            return Err(MoeError::Config(format!(
                "T has {} state rows, expected {n_s}",
                doc.t.len()
            )));
        }
        for (s, per_a) in doc.t.iter().enumerate() {
            if per_a.len() != n_a {
                return Err(MoeError::Config(format!(
                    "T[{s}] has {} action rows, expected {n_a}",
                    per_a.len()
                )));
            }
            for (a, row) in per_a.iter().enumerate() {
                if row.len() != n_s {
                    return Err(MoeError::Config(format!(
                        "T[{s}][{a}] has length {}, expected {n_s}",
                        row.len()
                    )));
                }
                for (sp, v) in row.iter().enumerate() {
                    t[[s, a, sp]] = *v;
                }
            }
        }
        let mut r = Array2::zeros((n_s, n_a));
        for (s, row) in doc.r.iter().enumerate() {
            for (a, v) in row.iter().enumerate() {
                r[[s, a]] = *v;
            }
        }
        Self::new(t, r, doc.gamma, Array1::from(doc.p0))
    }
}

/// Per-state action distributions, row-stochastic.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    pub(crate) probs: Array2<f64>,
}

impl TabularPolicy {
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        let mut probs = probs;
        for (s, mut row) in probs.outer_iter_mut().enumerate() {
            repair_row(row.as_slice_mut().unwrap(), "policy row", s)?;
        }
        Ok(Self { probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            probs: Array2::from_elem((n_states, n_actions), 1.0 / n_actions as f64),
        }
    }

    /// Deterministic policy taking `actions[s]` in state `s`.
    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Result<Self> {
        let mut probs = Array2::zeros((actions.len(), n_actions));
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(MoeError::IndexOutOfRange {
                    what: "action",
                    index: a,
                    bound: n_actions,
                });
            }
            probs[[s, a]] = 1.0;
        }
        Ok(Self { probs })
    }

    pub fn n_states(&self) -> usize {
        self.probs.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.probs.ncols()
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[[s, a]]
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    /// Mix with the uniform policy: (1-eps) self + eps uniform.
    pub fn mix_with_uniform(&self, eps: f64) -> Self {
        let u = 1.0 / self.n_actions() as f64;
        Self {
            probs: self.probs.mapv(|p| (1.0 - eps) * p + eps * u),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ValueFunction(pub Array1<f64>);

#[derive(Debug, Clone)]
pub struct QFunction(pub Array2<f64>);

/// Per-state-action advantages; satisfies sum_a pi(a|s) A(s,a) = 0 for the
/// defining policy.
#[derive(Debug, Clone)]
pub struct AdvantageTable(pub Array2<f64>);

/// Anchor of a discounted occupancy measure: a point mass on one state or the
/// MDP's initial distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Anchor {
    State(usize),
    InitialDist,
}

/// Discounted state occupancy d(s) = (1-gamma) sum_t gamma^t P(s_t = s).
#[derive(Debug, Clone)]
pub struct OccupancyMeasure {
    pub d: Array1<f64>,
    pub anchor: Anchor,
}

impl OccupancyMeasure {
    /// State-action weights d(s, a) = d(s) pi(a|s).
    pub fn state_action(&self, policy: &TabularPolicy) -> Array2<f64> {
        let mut out = policy.probs.clone();
        for (s, mut row) in out.outer_iter_mut().enumerate() {
            row *= self.d[s];
        }
        out
    }
}

fn check_policy_shape(mdp: &FiniteMdp, policy: &TabularPolicy, context: &'static str) -> Result<()> {
    if policy.n_states() != mdp.n_states() || policy.n_actions() != mdp.n_actions() {
        return Err(MoeError::ShapeMismatch {
            context,
            expected: format!("policy [{}, {}]", mdp.n_states(), mdp.n_actions()),
            got: format!("policy [{}, {}]", policy.n_states(), policy.n_actions()),
        });
    }
    Ok(())
}

/// Exact policy evaluation: solves (I - gamma P_pi) V = r_pi directly.
///
/// ```
/// use moerl::{policy_value, FiniteMdp, TabularPolicy};
/// use ndarray::{arr1, arr2, arr3};
///
/// // One absorbing state paying 1 forever at gamma = 0.5: V = 2.
/// let mdp = FiniteMdp::new(arr3(&[[[1.0]]]), arr2(&[[1.0]]), 0.5, arr1(&[1.0])).unwrap();
/// let v = policy_value(&mdp, &TabularPolicy::uniform(1, 1)).unwrap();
/// assert!((v.0[0] - 2.0).abs() < 1e-12);
/// ```
pub fn policy_value(mdp: &FiniteMdp, policy: &TabularPolicy) -> Result<ValueFunction> {
    check_policy_shape(mdp, policy, "policy_value")?;
    let n = mdp.n_states();
    let p = mdp.policy_kernel(policy);
    let r = mdp.policy_reward(policy);
    let mut a = Array2::eye(n);
    a.scaled_add(-mdp.gamma(), &p);
    let v = linalg::solve(&a, &r)?;
    let res = linalg::residual_inf(&a, &v, &r);
    if res > 1e-10 {
        return Err(MoeError::Numerical {
            context: "policy_value",
            residual: res,
            tol: 1e-10,
        });
    }
    Ok(ValueFunction(v))
}

/// Q_pi(s,a) = R(s,a) + gamma sum_{s'} P(s'|s,a) V_pi(s').
pub fn policy_q(mdp: &FiniteMdp, policy: &TabularPolicy) -> Result<QFunction> {
    let v = policy_value(mdp, policy)?;
    Ok(q_from_value(mdp, &v))
}

/// One-step lookahead of a state-value function through the kernel.
pub fn q_from_value(mdp: &FiniteMdp, v: &ValueFunction) -> QFunction {
    let (n_s, n_a) = (mdp.n_states(), mdp.n_actions());
    let mut q = mdp.reward().clone();
    for s in 0..n_s {
        for a in 0..n_a {
            let mut acc = 0.0;
            for sp in 0..n_s {
                acc += mdp.transition()[[s, a, sp]] * v.0[sp];
            }
            q[[s, a]] += mdp.gamma() * acc;
        }
    }
    QFunction(q)
}

/// A_pi = Q_pi - V_pi.
pub fn advantage(mdp: &FiniteMdp, policy: &TabularPolicy) -> Result<AdvantageTable> {
    let v = policy_value(mdp, policy)?;
    let q = q_from_value(mdp, &v);
    let mut a = q.0;
    for (s, mut row) in a.outer_iter_mut().enumerate() {
        row -= v.0[s];
    }
    Ok(AdvantageTable(a))
}

/// Discounted occupancy measure d = (1-gamma) e_anchor^T (I - gamma P_pi)^{-1},
/// normalized to sum to one.
pub fn occupancy(mdp: &FiniteMdp, policy: &TabularPolicy, anchor: Anchor) -> Result<OccupancyMeasure> {
    check_policy_shape(mdp, policy, "occupancy")?;
    let n = mdp.n_states();
    let start = match anchor {
        Anchor::State(s) => {
            if s >= n {
                return Err(MoeError::IndexOutOfRange {
                    what: "anchor state",
                    index: s,
                    bound: n,
                });
            }
            let mut e = Array1::zeros(n);
            e[s] = 1.0;
            e
        }
        Anchor::InitialDist => mdp.initial_dist().clone(),
    };
    // d^T (I - gamma P) = (1-gamma) start^T  <=>  (I - gamma P)^T d = (1-gamma) start.
    let p = mdp.policy_kernel(policy);
    let mut a = Array2::eye(n);
    a.scaled_add(-mdp.gamma(), &p);
    let at = a.t().to_owned();
    let rhs = start.mapv(|x| (1.0 - mdp.gamma()) * x);
    let mut d = linalg::solve(&at, &rhs)?;
    let total: f64 = d.sum();
    d.mapv_inplace(|x| x / total);
    Ok(OccupancyMeasure { d, anchor })
}

/// Value iteration to sup-norm Bellman residual `tol`; greedy ties break to
/// the lowest action index.
pub fn value_iteration(mdp: &FiniteMdp, tol: f64) -> Result<(QFunction, TabularPolicy)> {
    if tol <= 0.0 {
        return Err(MoeError::InvalidValue {
            name: "tol",
            value: tol,
            requirement: "tol > 0",
        });
    }
    let (n_s, n_a) = (mdp.n_states(), mdp.n_actions());
    let mut q = Array2::<f64>::zeros((n_s, n_a));
    loop {
        let mut next = mdp.reward().clone();
        for s in 0..n_s {
            for a in 0..n_a {
                let mut acc = 0.0;
                for sp in 0..n_s {
                    let row = q.row(sp);
                    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                    acc += mdp.transition()[[s, a, sp]] * max;
                }
                next[[s, a]] += mdp.gamma() * acc;
            }
        }
        let residual = (&next - &q).iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        q = next;
        if residual <= tol {
            break;
        }
    }
    let mut actions = Vec::with_capacity(n_s);
    for s in 0..n_s {
        let row = q.row(s);
        let mut best = 0;
        for a in 1..n_a {
            if row[a] > row[best] {
                best = a;
            }
        }
        actions.push(best);
    }
    let policy = TabularPolicy::deterministic(n_a, &actions)?;
    Ok((QFunction(q), policy))
}

/// Expected discounted return J_pi = sum_s P0(s) V_pi(s).
pub fn expected_return(mdp: &FiniteMdp, policy: &TabularPolicy) -> Result<f64> {
    let v = policy_value(mdp, policy)?;
    Ok(mdp.initial_dist().dot(&v.0))
}
