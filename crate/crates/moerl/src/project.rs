//! Feasibility projections for mixture weights.
//!
//! Two operators project a per-action confidence vector onto the set
//! `{lambda in [0,1]^A : sum_a lambda_a (rho - beta)(a|s) = 0}`:
//!
//! - [`project_closed_form`] applies the one-shot hyperplane shift followed by
//!   clipping. The pre-clip vector satisfies the equality exactly; clipping can
//!   re-violate it when a box face is active.
//! - [`project_exact`] is the exact Euclidean projection, found by bisection
//!   on the hyperplane multiplier.
//!
//! [`project_state_feasible`] extends the exact operator to the full per-state
//! feasible set (box, per-action simplex caps, equality) used by the
//! projected-gradient QP solver.

use crate::error::{MoeError, Result};

/// Treat an equality direction with norm below this as degenerate.
const DEGENERATE_NORM: f64 = 1e-12;

/// One-shot projection: shift along `rho - beta` to kill the equality
/// constraint, then clip into the box. Identity when `rho == beta`.
pub fn project_closed_form(lam_tilde: &[f64], rho: &[f64], beta: &[f64]) -> Vec<f64> {
    let g: Vec<f64> = rho.iter().zip(beta).map(|(r, b)| r - b).collect();
    let norm_sq: f64 = g.iter().map(|x| x * x).sum();
    if norm_sq < DEGENERATE_NORM {
        return lam_tilde.to_vec();
    }
    let mu = -g.iter().zip(lam_tilde).map(|(gi, li)| gi * li).sum::<f64>() / norm_sq;
    lam_tilde
        .iter()
        .zip(&g)
        .map(|(li, gi)| (li + gi * mu).clamp(0.0, 1.0))
        .collect()
}

/// Pre-clip vector of the closed form (satisfies the equality exactly).
pub fn closed_form_pre_clip(lam_tilde: &[f64], rho: &[f64], beta: &[f64]) -> Vec<f64> {
    let g: Vec<f64> = rho.iter().zip(beta).map(|(r, b)| r - b).collect();
    let norm_sq: f64 = g.iter().map(|x| x * x).sum();
    if norm_sq < DEGENERATE_NORM {
        return lam_tilde.to_vec();
    }
    let mu = -g.iter().zip(lam_tilde).map(|(gi, li)| gi * li).sum::<f64>() / norm_sq;
    lam_tilde.iter().zip(&g).map(|(li, gi)| li + gi * mu).collect()
}

/// Exact Euclidean projection onto `[0,1]^n` intersected with the hyperplane
/// `g . x = 0`, by bisection on the hyperplane multiplier.
///
/// The projection has the form `clip(x + t g, 0, 1)` for some scalar `t`, and
/// `h(t) = g . clip(x + t g)` is nondecreasing in `t`, so the root is found by
/// bracketing and bisection.
pub fn project_box_hyperplane(x: &[f64], g: &[f64], tol: f64) -> Result<Vec<f64>> {
    if x.len() != g.len() {
        return Err(MoeError::ShapeMismatch {
            context: "project_box_hyperplane",
            expected: format!("direction of length {}", x.len()),
            got: format!("{}", g.len()),
        });
    }
    let norm_sq: f64 = g.iter().map(|v| v * v).sum();
    if norm_sq < DEGENERATE_NORM {
        // Degenerate hyperplane: plain box projection.
        return Ok(x.iter().map(|v| v.clamp(0.0, 1.0)).collect());
    }
    let eval = |t: f64| -> f64 {
        x.iter()
            .zip(g)
            .map(|(xi, gi)| gi * (xi + t * gi).clamp(0.0, 1.0))
            .sum()
    };
    let mut lo = -1.0;
    let mut hi = 1.0;
    for _ in 0..200 {
        if eval(lo) <= 0.0 {
            break;
        }
        lo *= 2.0;
    }
    for _ in 0..200 {
        if eval(hi) >= 0.0 {
            break;
        }
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if eval(mid) >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo < 1e-16 * (1.0 + hi.abs()) {
            break;
        }
    }
    let t = 0.5 * (lo + hi);
    let y: Vec<f64> = x.iter().zip(g).map(|(xi, gi)| (xi + t * gi).clamp(0.0, 1.0)).collect();
    let residual: f64 = y.iter().zip(g).map(|(yi, gi)| yi * gi).sum::<f64>().abs();
    if residual > tol.max(1e-10) {
        return Err(MoeError::Numerical {
            context: "project_box_hyperplane",
            residual,
            tol: tol.max(1e-10),
        });
    }
    Ok(y)
}

/// Exact projection onto the per-action confidence set
/// `{lambda in [0,1]^A : sum_a lambda_a (rho - beta)(a) = 0}`.
/// Identity when `rho == beta`.
pub fn project_exact(lam_tilde: &[f64], rho: &[f64], beta: &[f64], tol: f64) -> Result<Vec<f64>> {
    let g: Vec<f64> = rho.iter().zip(beta).map(|(r, b)| r - b).collect();
    let norm_sq: f64 = g.iter().map(|v| v * v).sum();
    if norm_sq < DEGENERATE_NORM {
        return Ok(lam_tilde.to_vec());
    }
    project_box_hyperplane(lam_tilde, &g, tol)
}

/// KKT residual of a candidate projection of `x` onto box-and-hyperplane:
/// max over primal feasibility, the equality residual, and the infeasibility
/// of the stationarity conditions `y = clip(x + t g)` over the scalar
/// multiplier `t`. Zero (to `tol`) certifies the unique Euclidean projection.
pub fn projection_kkt_residual(x: &[f64], g: &[f64], y: &[f64]) -> f64 {
    let norm_sq: f64 = g.iter().map(|v| v * v).sum();
    let mut worst: f64 = y.iter().zip(g).map(|(yi, gi)| yi * gi).sum::<f64>().abs();
    for &v in y {
        worst = worst.max(-v).max(v - 1.0);
    }
    if norm_sq < DEGENERATE_NORM {
        return worst;
    }
    // Each coordinate constrains the multiplier: interior coordinates pin
    // t = (y_i - x_i)/g_i; active faces require the pre-clip point to lie
    // beyond the face, a one-sided bound on t. Stationarity holds iff the
    // bounds admit a common t.
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    let slack = 1e-12;
    for i in 0..y.len() {
        if g[i].abs() <= 1e-14 {
            if y[i] > slack && y[i] < 1.0 - slack {
                worst = worst.max((y[i] - x[i]).abs());
            }
            continue;
        }
        if y[i] > slack && y[i] < 1.0 - slack {
            let t = (y[i] - x[i]) / g[i];
            lo = lo.max(t - slack / g[i].abs());
            hi = hi.min(t + slack / g[i].abs());
        } else if y[i] <= slack {
            // Pre-clip value x_i + t g_i must be <= 0.
            let bound = -x[i] / g[i];
            if g[i] > 0.0 {
                hi = hi.min(bound);
            } else {
                lo = lo.max(bound);
            }
        } else {
            // Pre-clip value must be >= 1.
            let bound = (1.0 - x[i]) / g[i];
            if g[i] > 0.0 {
                lo = lo.max(bound);
            } else {
                hi = hi.min(bound);
            }
        }
    }
    worst.max((lo - hi).max(0.0))
}

/// Projection onto the capped simplex `{x >= 0, sum x <= 1}`.
fn project_capped_simplex(x: &[f64]) -> Vec<f64> {
    let clipped: Vec<f64> = x.iter().map(|v| v.max(0.0)).collect();
    if clipped.iter().sum::<f64>() <= 1.0 {
        return clipped;
    }
    // On the face sum = 1: standard sorted-threshold simplex projection.
    let mut sorted = x.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (k, &v) in sorted.iter().enumerate() {
        cumsum += v;
        let candidate = (cumsum - 1.0) / (k + 1) as f64;
        if v - candidate > 0.0 {
            tau = candidate;
        }
    }
    x.iter().map(|v| (v - tau).max(0.0)).collect()
}

/// Exact projection of one state's flattened weights (layout `(a, i)`,
/// row-major over actions) onto the feasible set: box, per-action simplex
/// caps `sum_i lambda(a, i) <= 1`, and the equality `g . lambda = 0`.
///
/// Partial dualization of the equality gives
/// `lambda(t) = P_C(x + t g)` with `C` the product of per-action capped
/// simplices; `h(t) = g . lambda(t)` is nondecreasing (firm nonexpansiveness
/// of `P_C`), so the multiplier is found by bisection and every constraint
/// holds exactly at the solution. For a two-base mixture the caps coincide
/// with the box.
pub fn project_state_feasible(
    lam_state: &[f64],
    g: &[f64],
    n_actions: usize,
    components: usize,
    tol: f64,
) -> Result<Vec<f64>> {
    if lam_state.len() != n_actions * components || g.len() != lam_state.len() {
        return Err(MoeError::ShapeMismatch {
            context: "project_state_feasible",
            expected: format!("{} entries", n_actions * components),
            got: format!("{} / {}", lam_state.len(), g.len()),
        });
    }
    if components == 1 {
        return project_box_hyperplane(lam_state, g, tol);
    }
    let n = lam_state.len();
    let project_blocks = |t: f64| -> Vec<f64> {
        let mut out = vec![0.0; n];
        for a in 0..n_actions {
            let lo = a * components;
            let block: Vec<f64> = (0..components)
                .map(|i| lam_state[lo + i] + t * g[lo + i])
                .collect();
            let proj = project_capped_simplex(&block);
            out[lo..lo + components].copy_from_slice(&proj);
        }
        out
    };
    let norm_sq: f64 = g.iter().map(|v| v * v).sum();
    if norm_sq < DEGENERATE_NORM {
        return Ok(project_blocks(0.0));
    }
    let eval = |t: f64| -> f64 {
        project_blocks(t).iter().zip(g).map(|(yi, gi)| yi * gi).sum()
    };
    let mut lo = -1.0;
    let mut hi = 1.0;
    for _ in 0..200 {
        if eval(lo) <= 0.0 {
            break;
        }
        lo *= 2.0;
    }
    for _ in 0..200 {
        if eval(hi) >= 0.0 {
            break;
        }
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if eval(mid) >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo < 1e-16 * (1.0 + hi.abs()) {
            break;
        }
    }
    let out = project_blocks(0.5 * (lo + hi));
    let residual: f64 = out.iter().zip(g).map(|(yi, gi)| yi * gi).sum::<f64>().abs();
    if residual > tol.max(1e-10) {
        return Err(MoeError::Numerical {
            context: "project_state_feasible",
            residual,
            tol: tol.max(1e-10),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn closed_form_matches_hand_values() {
        // lam_tilde = t (rho - beta) projects to the clipped zero vector.
        let rho = [0.7, 0.3];
        let beta = [0.4, 0.6];
        let t = 0.8;
        let lam: Vec<f64> = rho.iter().zip(&beta).map(|(r, b)| t * (r - b)).collect();
        let out = project_closed_form(&lam, &rho, &beta);
        for v in out {
            assert!(v.abs() < 1e-12);
        }
        // Already feasible input is a fixed point.
        let lam = [0.5, 0.5];
        let out = project_closed_form(&lam, &rho, &beta);
        assert!((out[0] - 0.5).abs() < 1e-12 && (out[1] - 0.5).abs() < 1e-12);
        // Degenerate direction returns the input unchanged.
        let out = project_closed_form(&[0.3, 1.4], &rho, &rho);
        assert_eq!(out, vec![0.3, 1.4]);
    }

    #[test]
    fn closed_form_pre_clip_kills_equality() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = 4;
            let lam: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 0.5).collect();
            let rho: Vec<f64> = dirichlet(&mut rng, n);
            let beta: Vec<f64> = dirichlet(&mut rng, n);
            let pre = closed_form_pre_clip(&lam, &rho, &beta);
            let eq: f64 = pre
                .iter()
                .zip(rho.iter().zip(&beta))
                .map(|(l, (r, b))| l * (r - b))
                .sum();
            assert!(eq.abs() < 1e-12);
        }
    }

    fn dirichlet(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        let mut v: Vec<f64> = (0..n).map(|_| -f64::ln(rng.random::<f64>())).collect();
        let s: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x /= s);
        v
    }

    #[test]
    fn exact_projection_verified_by_kkt() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let n = 3 + (rng.random::<f64>() * 3.0) as usize;
            let lam: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 3.0 - 1.0).collect();
            let rho = dirichlet(&mut rng, n);
            let beta = dirichlet(&mut rng, n);
            let y = project_exact(&lam, &rho, &beta, 1e-10).unwrap();
            let g: Vec<f64> = rho.iter().zip(&beta).map(|(r, b)| r - b).collect();
            let res = projection_kkt_residual(&lam, &g, &y);
            assert!(res < 1e-9, "kkt residual {res}");
        }
    }

    #[test]
    fn operators_agree_when_box_inactive() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut tested = 0;
        for _ in 0..2000 {
            let n = 3;
            let lam: Vec<f64> = (0..n).map(|_| 0.3 + rng.random::<f64>() * 0.4).collect();
            let rho = dirichlet(&mut rng, n);
            let beta = dirichlet(&mut rng, n);
            let cf = project_closed_form(&lam, &rho, &beta);
            let pre = closed_form_pre_clip(&lam, &rho, &beta);
            let clipped = pre.iter().any(|v| *v < 0.0 || *v > 1.0);
            if clipped {
                continue;
            }
            tested += 1;
            let ex = project_exact(&lam, &rho, &beta, 1e-10).unwrap();
            for (a, b) in cf.iter().zip(&ex) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        assert!(tested > 100);
    }

    #[test]
    fn feasible_input_is_fixed_point_of_exact() {
        let rho = [0.5, 0.25, 0.25];
        let beta = [0.25, 0.5, 0.25];
        // g = (0.25, -0.25, 0.0); lam with g . lam = 0.
        let lam = [0.2, 0.2, 0.7];
        let y = project_exact(&lam, &rho, &beta, 1e-12).unwrap();
        for (a, b) in y.iter().zip(&lam) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn state_projection_respects_all_constraints() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let n_a = 3;
            let comps = 2;
            let x: Vec<f64> = (0..n_a * comps).map(|_| rng.random::<f64>() * 2.0 - 0.5).collect();
            let g: Vec<f64> = (0..n_a * comps).map(|_| rng.random::<f64>() - 0.5).collect();
            let y = project_state_feasible(&x, &g, n_a, comps, 1e-10).unwrap();
            for &v in &y {
                assert!((-1e-10..=1.0 + 1e-10).contains(&v));
            }
            for a in 0..n_a {
                let sum: f64 = (0..comps).map(|i| y[a * comps + i]).sum();
                assert!(sum <= 1.0 + 1e-9);
            }
            let eq: f64 = y.iter().zip(&g).map(|(yi, gi)| yi * gi).sum();
            assert!(eq.abs() < 1e-9);
        }
    }
}
