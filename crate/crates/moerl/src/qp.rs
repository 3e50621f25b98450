//! Sample-average surrogates from batch data and the concave QP over mixture
//! weights.
//!
//! For each anchor j the batch estimates of the gain, deviation, and penalty
//! terms are affine in the flattened decision vector (row-major `(s, a, i)`
//! over state-action pairs seen in the data), so the combined objective
//!
//! `sum_j alpha_j ( L1_j(lambda) - gamma/(1-gamma) L2_j(lambda) L4_j(lambda) )`
//!
//! is the quadratic `const + c . lambda - 1/2 lambda^T Q lambda` with `Q`
//! assembled from symmetrized outer products of the deviation/penalty
//! coefficient vectors. [`solve_kkt`] evaluates the closed-form multiplier
//! fixed point and verifies the KKT residual; [`solve_pg`] is the projected
//! gradient fallback used when `Q` is indefinite or the fixed point drifts.

use ndarray::{Array1, Array2};
use std::collections::BTreeMap;

use crate::batch::BatchDataset;
use crate::critic;
use crate::error::{MoeError, Result};
use crate::linalg;
use crate::mdp::{AdvantageTable, QFunction, TabularPolicy};
use crate::moe::{BaseEnsemble, MixtureWeights};
use crate::project::project_state_feasible;

/// `constant + coeffs . lambda` over the flattened decision vector.
#[derive(Debug, Clone)]
pub struct AffineForm {
    pub constant: f64,
    pub coeffs: Array1<f64>,
}

impl AffineForm {
    fn zeros(dim: usize) -> Self {
        Self { constant: 0.0, coeffs: Array1::zeros(dim) }
    }

    pub fn eval(&self, lam: &Array1<f64>) -> f64 {
        self.constant + self.coeffs.dot(lam)
    }
}

/// The three batch-estimated terms for one anchor.
#[derive(Debug, Clone)]
pub struct SaaTerms {
    /// Signed gain estimate (L1 bar).
    pub gain: AffineForm,
    /// Deviation estimate (L2 bar).
    pub deviation: AffineForm,
    /// Advantage-weighted deviation estimate (L4 bar).
    pub penalty: AffineForm,
}

/// Batch surrogate: per-anchor affine forms plus the decision-index metadata.
#[derive(Debug, Clone)]
pub struct SaaSurrogate {
    pub index_map: Vec<(usize, usize, usize)>,
    index_lookup: BTreeMap<(usize, usize, usize), usize>,
    pub per_expert: Vec<SaaTerms>,
    pub alpha: Vec<f64>,
    pub gamma: f64,
    /// Batch states in ascending order.
    pub states: Vec<usize>,
    /// Candidate action set per batch state (consistent across duplicates).
    pub candidates: BTreeMap<usize, Vec<usize>>,
    pub m: usize,
}

impl SaaSurrogate {
    pub fn dim(&self) -> usize {
        self.index_map.len()
    }

    pub fn index_of(&self, s: usize, a: usize, i: usize) -> Option<usize> {
        self.index_lookup.get(&(s, a, i)).copied()
    }

    /// Direct evaluation of the combined objective at `lam`.
    pub fn eval_objective(&self, lam: &Array1<f64>) -> f64 {
        let mut acc = 0.0;
        for (j, terms) in self.per_expert.iter().enumerate() {
            let l1 = terms.gain.eval(lam);
            let l2 = terms.deviation.eval(lam);
            let l4 = terms.penalty.eval(lam);
            acc += self.alpha[j] * (l1 - self.gamma / (1.0 - self.gamma) * l2 * l4);
        }
        acc
    }
}

/// A weighted state sample feeding the surrogate (the whole candidate set at
/// the state contributes, per sample).
#[derive(Debug, Clone)]
pub struct WeightedStateSample {
    pub state: usize,
    pub weight: f64,
}

fn collect_candidates(
    batches: &[BatchDataset],
) -> Result<BTreeMap<usize, Vec<usize>>> {
    let mut candidates: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for b in batches {
        for t in &b.transitions {
            let mut sorted = t.cand.clone();
            sorted.sort_unstable();
            sorted.dedup();
            match candidates.get(&t.s) {
                None => {
                    candidates.insert(t.s, sorted);
                }
                Some(existing) => {
                    if *existing != sorted {
                        return Err(MoeError::Config(format!(
                            "state {} appears with inconsistent candidate sets",
                            t.s
                        )));
                    }
                }
            }
        }
    }
    Ok(candidates)
}

type IndexMap = (Vec<(usize, usize, usize)>, BTreeMap<(usize, usize, usize), usize>);

fn build_index(candidates: &BTreeMap<usize, Vec<usize>>, components: usize) -> IndexMap {
    let mut index_map = Vec::new();
    let mut lookup = BTreeMap::new();
    for (&s, cands) in candidates {
        for &a in cands {
            for i in 0..components {
                lookup.insert((s, a, i), index_map.len());
                index_map.push((s, a, i));
            }
        }
    }
    (index_map, lookup)
}

#[allow(clippy::too_many_arguments)]
fn accumulate_sample(
    terms: &mut SaaTerms,
    lookup: &BTreeMap<(usize, usize, usize), usize>,
    ensemble: &BaseEnsemble,
    advantage: &AdvantageTable,
    s: usize,
    cands: &[usize],
    j: usize,
    weight: f64,
) {
    let m = ensemble.m();
    let anchor_is_last = j == m - 1;
    for &a in cands {
        let adv = advantage.0[[s, a]];
        for i in 0..m {
            let dmu = ensemble.base(i).prob(s, a) - ensemble.base(j).prob(s, a);
            let gain_w = weight * dmu * adv;
            let dev_w = weight * dmu.abs();
            let pen_w = weight * dmu.abs() * adv.abs();
            if i == m - 1 && !anchor_is_last {
                // f_{m-1} = 1 - sum_{i'} lambda_{i'}: a constant plus a
                // negative coefficient on every component at (s, a).
                terms.gain.constant += gain_w;
                terms.deviation.constant += dev_w;
                terms.penalty.constant += pen_w;
                for ip in 0..m - 1 {
                    let idx = lookup[&(s, a, ip)];
                    terms.gain.coeffs[idx] -= gain_w;
                    terms.deviation.coeffs[idx] -= dev_w;
                    terms.penalty.coeffs[idx] -= pen_w;
                }
            } else if i < m - 1 && i != j {
                let idx = lookup[&(s, a, i)];
                terms.gain.coeffs[idx] += gain_w;
                terms.deviation.coeffs[idx] += dev_w;
                terms.penalty.coeffs[idx] += pen_w;
            }
            // i == j contributes nothing (f_j = 0), and i == m-1 with the
            // last anchor contributes nothing (f_{m-1} = 0).
        }
    }
}

/// Build the surrogate from per-expert batches; sample `k` of batch `j`
/// enters with weight `1 / ((1-gamma) |B_j|)`.
pub fn build_saa(
    batches: &[BatchDataset],
    ensemble: &BaseEnsemble,
    advantages: &[AdvantageTable],
    alpha: &[f64],
    gamma: f64,
) -> Result<SaaSurrogate> {
    let m = ensemble.m();
    if batches.len() != m || advantages.len() != m || alpha.len() != m {
        return Err(MoeError::ShapeMismatch {
            context: "build_saa",
            expected: format!("{m} batches, advantages, and alpha weights"),
            got: format!("{}/{}/{}", batches.len(), advantages.len(), alpha.len()),
        });
    }
    if batches.iter().any(|b| b.is_empty()) {
        return Err(MoeError::Config("build_saa: empty batch".into()));
    }
    let weighted: Vec<Vec<WeightedStateSample>> = batches
        .iter()
        .map(|b| {
            let w = 1.0 / ((1.0 - gamma) * b.len() as f64);
            b.transitions
                .iter()
                .map(|t| WeightedStateSample { state: t.s, weight: w })
                .collect()
        })
        .collect();
    let candidates = collect_candidates(batches)?;
    build_saa_weighted(&weighted, &candidates, ensemble, advantages, alpha, gamma)
}

/// Build the surrogate from explicitly weighted state samples (the exhaustive
/// occupancy-weighted construction used by oracles enters here).
pub fn build_saa_weighted(
    samples: &[Vec<WeightedStateSample>],
    candidates: &BTreeMap<usize, Vec<usize>>,
    ensemble: &BaseEnsemble,
    advantages: &[AdvantageTable],
    alpha: &[f64],
    gamma: f64,
) -> Result<SaaSurrogate> {
    let m = ensemble.m();
    let components = m - 1;
    let (index_map, index_lookup) = build_index(candidates, components);
    let dim = index_map.len();
    let mut per_expert: Vec<SaaTerms> = (0..m)
        .map(|_| SaaTerms {
            gain: AffineForm::zeros(dim),
            deviation: AffineForm::zeros(dim),
            penalty: AffineForm::zeros(dim),
        })
        .collect();
    for (j, expert_samples) in samples.iter().enumerate() {
        for sample in expert_samples {
            let cands = candidates.get(&sample.state).ok_or_else(|| {
                MoeError::Config(format!("state {} missing candidate set", sample.state))
            })?;
            accumulate_sample(
                &mut per_expert[j],
                &index_lookup,
                ensemble,
                &advantages[j],
                sample.state,
                cands,
                j,
                sample.weight,
            );
        }
    }
    Ok(SaaSurrogate {
        index_map,
        index_lookup,
        per_expert,
        alpha: alpha.to_vec(),
        gamma,
        states: candidates.keys().copied().collect(),
        candidates: candidates.clone(),
        m,
    })
}

/// The assembled quadratic program: maximize
/// `constant + lin . lambda - 1/2 lambda^T quad lambda` subject to
/// `eq_matrix lambda = 0`, `ineq_matrix lambda <= 1`, `0 <= lambda <= 1`.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub quad: Array2<f64>,
    pub lin: Array1<f64>,
    pub constant: f64,
    /// One row per batch state: the per-state equality coefficients.
    pub eq_matrix: Array2<f64>,
    /// One row per (state, action): the simplex-cap coefficients.
    pub ineq_matrix: Array2<f64>,
    pub index_map: Vec<(usize, usize, usize)>,
    pub states: Vec<usize>,
    /// Contiguous variable range of each state block.
    pub state_ranges: Vec<std::ops::Range<usize>>,
    /// Candidate-set size of each state block.
    pub state_n_actions: Vec<usize>,
    pub components: usize,
}

impl QpProblem {
    pub fn dim(&self) -> usize {
        self.index_map.len()
    }

    pub fn objective(&self, lam: &Array1<f64>) -> f64 {
        self.constant + self.lin.dot(lam) - 0.5 * lam.dot(&self.quad.dot(lam))
    }

    /// Exact projection of a point onto the feasible set, state block by
    /// state block.
    pub fn project(&self, lam: &Array1<f64>) -> Result<Array1<f64>> {
        let mut out = lam.clone();
        for (row, range) in self.state_ranges.iter().enumerate() {
            let block: Vec<f64> = out.slice(ndarray::s![range.clone()]).to_vec();
            let g: Vec<f64> = self
                .eq_matrix
                .row(row)
                .slice(ndarray::s![range.clone()])
                .to_vec();
            let proj = project_state_feasible(
                &block,
                &g,
                self.state_n_actions[row],
                self.components,
                1e-11,
            )?;
            for (k, v) in proj.into_iter().enumerate() {
                out[range.start + k] = v;
            }
        }
        Ok(out)
    }

    /// Worst violation of any constraint at `lam`.
    pub fn feasibility_violation(&self, lam: &Array1<f64>) -> f64 {
        let mut worst = 0.0_f64;
        for &v in lam.iter() {
            worst = worst.max(-v).max(v - 1.0);
        }
        let eq = self.eq_matrix.dot(lam);
        for v in eq.iter() {
            worst = worst.max(v.abs());
        }
        let ineq = self.ineq_matrix.dot(lam);
        for v in ineq.iter() {
            worst = worst.max(v - 1.0);
        }
        worst
    }
}

/// Expand the surrogate into the quadratic form. The identity
/// `objective(lambda) = const + c . lambda - 1/2 lambda^T Q lambda` holds
/// exactly because each product term `L2_j L4_j` is a product of two affine
/// forms.
pub fn assemble_qp(saa: &SaaSurrogate, ensemble: &BaseEnsemble) -> Result<QpProblem> {
    let dim = saa.dim();
    let scale = saa.gamma / (1.0 - saa.gamma);
    let mut quad = Array2::zeros((dim, dim));
    let mut lin = Array1::zeros(dim);
    let mut constant = 0.0;
    for (j, terms) in saa.per_expert.iter().enumerate() {
        let a = saa.alpha[j];
        if a == 0.0 {
            continue;
        }
        lin.scaled_add(a, &terms.gain.coeffs);
        constant += a * terms.gain.constant;
        let (b, u) = (terms.deviation.constant, &terms.deviation.coeffs);
        let (d, v) = (terms.penalty.constant, &terms.penalty.coeffs);
        constant -= a * scale * b * d;
        lin.scaled_add(-a * scale * b, v);
        lin.scaled_add(-a * scale * d, u);
        for r in 0..dim {
            for c in 0..dim {
                quad[[r, c]] += a * scale * (u[r] * v[c] + v[r] * u[c]);
            }
        }
    }

    let m = saa.m;
    let components = m - 1;
    let n_states = saa.states.len();
    let mut eq_matrix = Array2::zeros((n_states, dim));
    let mut state_ranges = Vec::with_capacity(n_states);
    let mut state_n_actions = Vec::with_capacity(n_states);
    let mut cursor = 0usize;
    for (row, &s) in saa.states.iter().enumerate() {
        let cands = &saa.candidates[&s];
        let len = cands.len() * components;
        state_ranges.push(cursor..cursor + len);
        state_n_actions.push(cands.len());
        for &a in cands {
            for i in 0..components {
                let idx = saa.index_of(s, a, i).expect("index map covers candidates");
                eq_matrix[[row, idx]] =
                    ensemble.base(i).prob(s, a) - ensemble.base(m - 1).prob(s, a);
            }
        }
        cursor += len;
    }
    let n_sa: usize = saa.candidates.values().map(|c| c.len()).sum();
    let mut ineq_matrix = Array2::zeros((n_sa, dim));
    let mut row = 0;
    for (&s, cands) in &saa.candidates {
        for &a in cands {
            for i in 0..components {
                let idx = saa.index_of(s, a, i).unwrap();
                ineq_matrix[[row, idx]] = 1.0;
            }
            row += 1;
        }
    }
    Ok(QpProblem {
        quad,
        lin,
        constant,
        eq_matrix,
        ineq_matrix,
        index_map: saa.index_map.clone(),
        states: saa.states.clone(),
        state_ranges,
        state_n_actions,
        components,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveMethod {
    KktClosedForm,
    ProjectedGradient,
}

impl std::fmt::Display for SolveMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SolveMethod::KktClosedForm => "kkt-closed-form",
            SolveMethod::ProjectedGradient => "projected-gradient",
        })
    }
}

#[derive(Debug, Clone)]
pub struct KktSolution {
    pub lam_star: Array1<f64>,
    /// Equality multipliers (one per batch state; zero rows keep zero).
    pub nu: Array1<f64>,
    /// Simplex-cap multipliers (one per batch state-action).
    pub kappa: Array1<f64>,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub method: SolveMethod,
    pub objective: f64,
}

/// Spectral tolerance for declaring the Hessian positive semidefinite.
pub const PSD_TOL: f64 = 1e-9;

/// Polish a converged multiplier fixed point: freeze its active set (zeroed
/// components and tight caps) and solve the equality-constrained KKT saddle
/// system exactly with the original, unridged Hessian. Returns None when the
/// saddle system is singular or the multiplier signs contradict the active
/// set; the caller then falls back.
fn refine_active_set(
    qp: &QpProblem,
    lam: &Array1<f64>,
    kappa_plus: &Array1<f64>,
    kept_eq: &[usize],
) -> Option<(Array1<f64>, Array1<f64>, Array1<f64>)> {
    let dim = qp.dim();
    let act_tol = 1e-7;
    let free: Vec<usize> = (0..dim).filter(|&i| lam[i] > act_tol).collect();
    let slack = qp.ineq_matrix.dot(lam);
    let active_caps: Vec<usize> = (0..qp.ineq_matrix.nrows())
        .filter(|&r| kappa_plus[r] > act_tol || slack[r] >= 1.0 - act_tol)
        .collect();
    let n_f = free.len();
    let n_eq = kept_eq.len();
    let n_a = active_caps.len();
    let size = n_f + n_eq + n_a;
    if n_f == 0 {
        // Everything at the lower bound; multipliers are free, take zeros.
        let lam_ref = Array1::zeros(dim);
        return Some((lam_ref, Array1::zeros(qp.eq_matrix.nrows()), Array1::zeros(qp.ineq_matrix.nrows())));
    }
    let mut a = nalgebra::DMatrix::<f64>::zeros(size, size);
    let mut b = nalgebra::DVector::<f64>::zeros(size);
    for (r, &i) in free.iter().enumerate() {
        for (c, &jv) in free.iter().enumerate() {
            a[(r, c)] = qp.quad[[i, jv]];
        }
        for (c, &er) in kept_eq.iter().enumerate() {
            a[(r, n_f + c)] = -qp.eq_matrix[[er, i]];
        }
        for (c, &ar) in active_caps.iter().enumerate() {
            a[(r, n_f + n_eq + c)] = qp.ineq_matrix[[ar, i]];
        }
        b[r] = qp.lin[i];
    }
    for (r, &er) in kept_eq.iter().enumerate() {
        for (c, &i) in free.iter().enumerate() {
            a[(n_f + r, c)] = qp.eq_matrix[[er, i]];
        }
    }
    for (r, &ar) in active_caps.iter().enumerate() {
        for (c, &i) in free.iter().enumerate() {
            a[(n_f + n_eq + r, c)] = qp.ineq_matrix[[ar, i]];
        }
        b[n_f + n_eq + r] = 1.0;
    }
    // The saddle may be singular (flat optimal sets with a rank-deficient
    // Hessian), so take the minimum-norm correction toward the KKT manifold
    // rather than a direct solve.
    let mut x0 = nalgebra::DVector::<f64>::zeros(size);
    for (c, &i) in free.iter().enumerate() {
        x0[c] = lam[i];
    }
    let scale = 1.0 + a.amax();
    let resid = &b - &a * &x0;
    let svd = a.svd(true, true);
    let delta = svd.solve(&resid, 1e-12 * scale).ok()?;
    let solved = x0 + delta;
    let mut lam_ref = Array1::zeros(dim);
    for (c, &i) in free.iter().enumerate() {
        if solved[c] < -1e-10 || solved[c] > 1.0 + 1e-10 {
            return None;
        }
        lam_ref[i] = solved[c].clamp(0.0, 1.0);
    }
    let mut nu_ref = Array1::zeros(qp.eq_matrix.nrows());
    for (c, &er) in kept_eq.iter().enumerate() {
        nu_ref[er] = solved[n_f + c];
    }
    let mut kappa_ref = Array1::zeros(qp.ineq_matrix.nrows());
    for (c, &ar) in active_caps.iter().enumerate() {
        if solved[n_f + n_eq + c] < -1e-10 {
            return None;
        }
        kappa_ref[ar] = solved[n_f + n_eq + c].max(0.0);
    }
    Some((lam_ref, nu_ref, kappa_ref))
}

fn kkt_residual(
    qp: &QpProblem,
    lam: &Array1<f64>,
    nu: &Array1<f64>,
    kappa_plus: &Array1<f64>,
) -> f64 {
    let grad = &qp.lin - &qp.quad.dot(lam);
    let stat = &grad + &qp.eq_matrix.t().dot(nu) - &qp.ineq_matrix.t().dot(kappa_plus);
    let mut worst = qp.feasibility_violation(lam);
    for (i, &r) in stat.iter().enumerate() {
        if lam[i] > 1e-10 {
            worst = worst.max(r.abs());
        } else {
            // Active lower bound: the implied multiplier -r must be >= 0.
            worst = worst.max(r).max((-r).max(0.0) * lam[i].abs());
        }
    }
    let slack = qp.ineq_matrix.dot(lam).mapv(|v| v - 1.0);
    for (row, &k) in kappa_plus.iter().enumerate() {
        worst = worst.max((k * slack[row]).abs());
    }
    worst
}

/// Closed-form KKT solve with a damped multiplier fixed point. Falls back to
/// projected gradient (tagging the method) when the Hessian is indefinite,
/// a subsidiary system is singular, or the final residual exceeds `tol`.
pub fn solve_kkt(qp: &QpProblem, tol: f64, max_iter: usize) -> Result<KktSolution> {
    let dim = qp.dim();
    let scale = 1.0 + qp.quad.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let min_eig = if dim > 0 {
        linalg::min_symmetric_eigenvalue(&qp.quad)
    } else {
        0.0
    };
    if min_eig < -PSD_TOL * scale {
        return solve_pg(qp, 0.0, tol, 200_000, 2);
    }
    // Tiny ridge keeps the (generally rank-deficient) Hessian invertible; the
    // residual is still checked against the original problem.
    let ridge = 1e-10 * scale + (-min_eig).max(0.0);
    let q_reg = nalgebra::DMatrix::from_fn(dim, dim, |r, c| {
        qp.quad[[r, c]] + if r == c { ridge } else { 0.0 }
    });
    let q_lu = q_reg.lu();
    let to_dvec = |a: &Array1<f64>| nalgebra::DVector::from_iterator(a.len(), a.iter().copied());
    let from_dvec =
        |v: &nalgebra::DVector<f64>| Array1::from_iter(v.iter().copied());

    // Drop identically-zero equality rows (identical bases at a state).
    let kept_eq: Vec<usize> = (0..qp.eq_matrix.nrows())
        .filter(|&r| qp.eq_matrix.row(r).iter().any(|v| v.abs() > 1e-14))
        .collect();
    let n_eq = kept_eq.len();
    let n_ineq = qp.ineq_matrix.nrows();
    let m_mat = nalgebra::DMatrix::from_fn(n_eq, dim, |r, c| qp.eq_matrix[[kept_eq[r], c]]);
    let n_mat = nalgebra::DMatrix::from_fn(n_ineq, dim, |r, c| qp.ineq_matrix[[r, c]]);

    let qinv_mt = match q_lu.solve(&m_mat.transpose()) {
        Some(x) => x,
        None => return solve_pg(qp, 0.0, tol, 200_000, 2),
    };
    let qinv_nt = match q_lu.solve(&n_mat.transpose()) {
        Some(x) => x,
        None => return solve_pg(qp, 0.0, tol, 200_000, 2),
    };
    let h = &m_mat * &qinv_mt;
    let k = &n_mat * &qinv_nt;
    let h_lu = h.lu();
    let k_lu = k.lu();

    let c_vec = to_dvec(&qp.lin);
    let e = nalgebra::DVector::from_element(n_ineq, 1.0);
    let mut nu = nalgebra::DVector::zeros(n_eq);
    let mut kappa = nalgebra::DVector::zeros(n_ineq);
    let mut lam = nalgebra::DVector::zeros(dim);
    let damping = 0.5;
    let mut iterations = 0;
    for it in 0..max_iter {
        iterations = it + 1;
        let kappa_plus = kappa.map(|v: f64| v.max(0.0));
        // nu = -H^{-1} M Q^{-1} (c - N^T kappa_plus)
        let rhs = &c_vec - n_mat.transpose() * &kappa_plus;
        let qinv_rhs = match q_lu.solve(&rhs) {
            Some(x) => x,
            None => return solve_pg(qp, 0.0, tol, 200_000, 2),
        };
        let nu_new = if n_eq > 0 {
            match h_lu.solve(&(-(&m_mat * &qinv_rhs))) {
                Some(x) => x,
                None => return solve_pg(qp, 0.0, tol, 200_000, 2),
            }
        } else {
            nu.clone()
        };
        nu = &nu * (1.0 - damping) + nu_new * damping;
        // kappa = K^{-1} (N Q^{-1} (c + M^T nu) - e)
        let rhs = &c_vec + m_mat.transpose() * &nu;
        let qinv_rhs = match q_lu.solve(&rhs) {
            Some(x) => x,
            None => return solve_pg(qp, 0.0, tol, 200_000, 2),
        };
        let kappa_new = match k_lu.solve(&((&n_mat * &qinv_rhs) - &e)) {
            Some(x) => x,
            None => return solve_pg(qp, 0.0, tol, 200_000, 2),
        };
        kappa = &kappa * (1.0 - damping) + kappa_new * damping;

        let kappa_plus = kappa.map(|v: f64| v.max(0.0));
        let rhs = &c_vec + m_mat.transpose() * &nu - n_mat.transpose() * &kappa_plus;
        let lam_new = match q_lu.solve(&rhs) {
            Some(x) => x.map(|v: f64| v.max(0.0)),
            None => return solve_pg(qp, 0.0, tol, 200_000, 2),
        };
        let change = (&lam_new - &lam).amax();
        lam = lam_new;
        if change <= 1e-8_f64.min(tol) && it > 0 {
            break;
        }
    }

    let mut lam_star = from_dvec(&lam);
    let mut nu_full = Array1::zeros(qp.eq_matrix.nrows());
    for (r, &orig) in kept_eq.iter().enumerate() {
        nu_full[orig] = nu[r];
    }
    let mut kappa_arr = Array1::from_iter(kappa.iter().copied());
    let kappa_plus = kappa_arr.mapv(|v| v.max(0.0));
    let mut residual = kkt_residual(qp, &lam_star, &nu_full, &kappa_plus);
    if residual > tol {
        // The ridge leaves noise in the Hessian's nullspace; polish the
        // converged active set against the original problem.
        if let Some((lam_r, nu_r, kappa_r)) =
            refine_active_set(qp, &lam_star, &kappa_plus, &kept_eq)
        {
            let kp = kappa_r.mapv(|v: f64| v.max(0.0));
            let refined_residual = kkt_residual(qp, &lam_r, &nu_r, &kp);
            if refined_residual < residual {
                lam_star = lam_r;
                nu_full = nu_r;
                kappa_arr = kappa_r;
                residual = refined_residual;
            }
        }
    }
    if residual > tol {
        return solve_pg(qp, 0.0, tol, 200_000, 2);
    }
    Ok(KktSolution {
        objective: qp.objective(&lam_star),
        lam_star,
        nu: nu_full,
        kappa: kappa_arr,
        kkt_residual: residual,
        iterations,
        method: SolveMethod::KktClosedForm,
    })
}

/// Projected gradient ascent with backtracking (monotone objective) and
/// deterministic restarts from projected random points.
pub fn solve_pg(
    qp: &QpProblem,
    step: f64,
    tol: f64,
    max_iter: usize,
    restarts: usize,
) -> Result<KktSolution> {
    use rand::Rng;
    use rand::SeedableRng;
    let dim = qp.dim();
    let eigs = if dim > 0 {
        linalg::symmetric_eigenvalues(&qp.quad)
    } else {
        vec![0.0]
    };
    let lipschitz = eigs.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let step0 = if step > 0.0 { step } else { 1.0 / lipschitz.max(1e-6) };

    let mut best: Option<(Array1<f64>, f64, f64, usize)> = None;
    for restart in 0..=restarts {
        let mut lam = if restart == 0 {
            Array1::zeros(dim)
        } else {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(restart as u64);
            let raw = Array1::from_shape_fn(dim, |_| rng.random::<f64>());
            qp.project(&raw)?
        };
        let mut obj = qp.objective(&lam);
        let mut step_now = step0;
        let mut iterations = 0;
        let mut residual = f64::INFINITY;
        for it in 0..max_iter {
            iterations = it + 1;
            let grad = &qp.lin - &qp.quad.dot(&lam);
            let trial = qp.project(&(&lam + &grad.mapv(|g| g * step_now)))?;
            let trial_obj = qp.objective(&trial);
            if trial_obj + 1e-15 < obj {
                step_now *= 0.5;
                if step_now < 1e-14 * step0 {
                    residual = 0.0;
                    break;
                }
                continue;
            }
            let change = (&trial - &lam).iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            lam = trial;
            obj = trial_obj;
            residual = change / step_now.max(1e-300);
            if change <= tol * step_now.max(1e-12) {
                break;
            }
            step_now = (step_now * 1.1).min(step0.max(step));
        }
        if best.as_ref().is_none_or(|(_, b, _, _)| obj > *b) {
            best = Some((lam, obj, residual, iterations));
        }
    }
    let (lam_star, objective, residual, iterations) = best.expect("at least one start");
    Ok(KktSolution {
        lam_star,
        nu: Array1::zeros(qp.eq_matrix.nrows()),
        kappa: Array1::zeros(qp.ineq_matrix.nrows()),
        kkt_residual: residual,
        iterations,
        method: SolveMethod::ProjectedGradient,
        objective,
    })
}

/// Scatter a flat solution back into the full weight tensor; state-action
/// pairs outside the batch stay exactly zero.
pub fn lambda_tabular(
    solution: &Array1<f64>,
    index_map: &[(usize, usize, usize)],
    n_states: usize,
    n_actions: usize,
    m: usize,
) -> MixtureWeights {
    let mut lam = MixtureWeights::zeros(n_states, n_actions, m - 1);
    for (k, &(s, a, i)) in index_map.iter().enumerate() {
        lam.lam_mut()[[s, a, i]] = solution[k];
    }
    lam
}

/// Expected-SARSA advantage estimate from a batch, with never-visited states
/// flagged (their rows are zero).
pub fn estimate_advantage_from_batch(
    batch: &BatchDataset,
    mu_j: &TabularPolicy,
    gamma: f64,
    lr: f64,
    epochs: usize,
) -> Result<(AdvantageTable, Vec<usize>)> {
    if batch.is_empty() {
        return Err(MoeError::Config("estimate_advantage_from_batch: empty batch".into()));
    }
    let QFunction(q) = critic::sarsa_batch(batch, mu_j, gamma, lr, epochs)?;
    let n_s = mu_j.n_states();
    let n_a = mu_j.n_actions();
    let mut visited = vec![false; n_s];
    for t in &batch.transitions {
        visited[t.s] = true;
    }
    let mut table = Array2::zeros((n_s, n_a));
    let mut unvisited = Vec::new();
    for s in 0..n_s {
        if !visited[s] {
            unvisited.push(s);
            continue;
        }
        let v: f64 = (0..n_a).map(|a| mu_j.prob(s, a) * q[[s, a]]).sum();
        for a in 0..n_a {
            table[[s, a]] = q[[s, a]] - v;
        }
    }
    Ok((AdvantageTable(table), unvisited))
}

/// Fit a tabular candidate policy toward the mixture targets
/// `(1 - lambda*) mu + lambda* rho` by gradient descent on the batch-averaged
/// KL, parameterized with per-state logits. Rows of unvisited states fall back
/// to `mu`. Returns the fitted policy and the per-step objective trace.
pub fn kl_fit_candidate(
    batch: &BatchDataset,
    lam_star: &MixtureWeights,
    mu: &TabularPolicy,
    rho: &TabularPolicy,
    lr: f64,
    steps: usize,
) -> Result<(TabularPolicy, Vec<f64>)> {
    if lr <= 0.0 {
        return Err(MoeError::InvalidValue {
            name: "lr",
            value: lr,
            requirement: "lr > 0",
        });
    }
    if lam_star.n_components() != 1 {
        return Err(MoeError::ShapeMismatch {
            context: "kl_fit_candidate",
            expected: "two-policy mixture weights (one component)".into(),
            got: format!("{} components", lam_star.n_components()),
        });
    }
    let (n_s, n_a) = (mu.n_states(), mu.n_actions());
    // Visit counts weight each state's KL by its batch frequency.
    let mut counts = vec![0.0_f64; n_s];
    for t in &batch.transitions {
        counts[t.s] += 1.0;
    }
    let total: f64 = counts.iter().sum();
    if total == 0.0 {
        return Err(MoeError::Config("kl_fit_candidate: empty batch".into()));
    }
    // Per-state target rows; feasibility of lambda* makes each row a
    // distribution.
    let mut targets = Array2::zeros((n_s, n_a));
    for s in 0..n_s {
        for a in 0..n_a {
            let l = lam_star.lam()[[s, a, 0]];
            targets[[s, a]] = (1.0 - l) * mu.prob(s, a) + l * rho.prob(s, a);
        }
    }
    let mut logits = Array2::<f64>::zeros((n_s, n_a));
    let softmax_row = |row: &[f64]| -> Vec<f64> {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.into_iter().map(|v| v / sum).collect()
    };
    let objective = |logits: &Array2<f64>| -> f64 {
        let mut acc = 0.0;
        for s in 0..n_s {
            if counts[s] == 0.0 {
                continue;
            }
            let p = softmax_row(logits.row(s).to_slice().unwrap());
            for a in 0..n_a {
                if p[a] > 0.0 {
                    acc += counts[s] / total * p[a] * (p[a] / targets[[s, a]]).ln();
                }
            }
        }
        acc
    };
    let mut trace = Vec::with_capacity(steps);
    let mut obj = objective(&logits);
    let mut step_now = lr;
    for _ in 0..steps {
        trace.push(obj);
        let mut grad = Array2::<f64>::zeros((n_s, n_a));
        for s in 0..n_s {
            if counts[s] == 0.0 {
                continue;
            }
            let p = softmax_row(logits.row(s).to_slice().unwrap());
            let kl: f64 = (0..n_a)
                .map(|a| if p[a] > 0.0 { p[a] * (p[a] / targets[[s, a]]).ln() } else { 0.0 })
                .sum();
            for a in 0..n_a {
                grad[[s, a]] = counts[s] / total * p[a] * ((p[a] / targets[[s, a]]).ln() - kl);
            }
        }
        // Backtrack on increase to keep the trace monotone; recover the
        // step gently after accepted moves.
        loop {
            let mut trial = logits.clone();
            trial.scaled_add(-step_now, &grad);
            let trial_obj = objective(&trial);
            if trial_obj <= obj + 1e-12 {
                logits = trial;
                obj = trial_obj;
                step_now = (step_now * 1.25).min(lr);
                break;
            }
            step_now *= 0.5;
            if step_now < 1e-14 * lr {
                break;
            }
        }
    }
    let mut probs = Array2::zeros((n_s, n_a));
    for s in 0..n_s {
        if counts[s] == 0.0 {
            for a in 0..n_a {
                probs[[s, a]] = mu.prob(s, a);
            }
        } else {
            let p = softmax_row(logits.row(s).to_slice().unwrap());
            for a in 0..n_a {
                probs[[s, a]] = p[a];
            }
        }
    }
    Ok((TabularPolicy::new(probs)?, trace))
}
