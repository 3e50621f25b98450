//! Hybrid on/off-policy critics.
//!
//! The hybrid backup mixes the behavior expectation with the greedy max at the
//! next state:
//!
//! (T_mu q)(s,a) = R(s,a) + gamma E_{s'}[ (1-mu) E_{a' ~ beta}[q(s',a')] + mu max_{a'} q(s',a') ],
//!
//! a gamma-contraction for every mu in 0..1 whose fixed point defines the
//! weighted advantage W = Q - V. Batch critics (expected SARSA and Q-learning
//! with a soft target table) estimate the same objects from logged data.

use ndarray::Array2;

use crate::batch::BatchDataset;
use crate::error::{MoeError, Result};
use crate::mdp::{AdvantageTable, FiniteMdp, QFunction, TabularPolicy, ValueFunction};

#[derive(Debug, Clone)]
pub struct HybridCriticConfig {
    /// Mix between the behavior expectation (0) and the greedy max (1).
    pub mu_mix: f64,
    pub behavior: TabularPolicy,
    pub lr: f64,
    /// Soft target-table mix.
    pub tau: f64,
    pub tol: f64,
    pub max_sweeps: usize,
}

impl HybridCriticConfig {
    pub fn new(mu_mix: f64, behavior: TabularPolicy) -> Result<Self> {
        if !(0.0..=1.0).contains(&mu_mix) {
            return Err(MoeError::InvalidValue {
                name: "mu_mix",
                value: mu_mix,
                requirement: "mu in [0, 1]",
            });
        }
        Ok(Self {
            mu_mix,
            behavior,
            lr: 0.1,
            tau: 0.05,
            tol: 1e-10,
            max_sweeps: 100_000,
        })
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mu_mix) {
            return Err(MoeError::InvalidValue {
                name: "mu_mix",
                value: self.mu_mix,
                requirement: "mu in [0, 1]",
            });
        }
        if self.tau <= 0.0 || self.tau > 1.0 {
            return Err(MoeError::InvalidValue {
                name: "tau",
                value: self.tau,
                requirement: "tau in (0, 1]",
            });
        }
        if self.lr <= 0.0 {
            return Err(MoeError::InvalidValue {
                name: "lr",
                value: self.lr,
                requirement: "lr > 0",
            });
        }
        Ok(())
    }
}

/// Fixed point of the hybrid backup together with its value and advantage.
#[derive(Debug, Clone)]
pub struct WeightedAdvantage {
    pub q: QFunction,
    pub v: ValueFunction,
    /// W(s,a) = q(s,a) - v(s).
    pub w: Array2<f64>,
}

/// Per-state hybrid value of a Q table:
/// (1-mu) E_beta[q(s,.)] + mu max_a q(s,a).
pub fn hybrid_value(q: &Array2<f64>, behavior: &TabularPolicy, mu: f64) -> Vec<f64> {
    let (n_s, n_a) = q.dim();
    (0..n_s)
        .map(|s| {
            let exp: f64 = (0..n_a).map(|a| behavior.prob(s, a) * q[[s, a]]).sum();
            let max = (0..n_a).map(|a| q[[s, a]]).fold(f64::NEG_INFINITY, f64::max);
            (1.0 - mu) * exp + mu * max
        })
        .collect()
}

/// One application of the hybrid Bellman operator.
pub fn hybrid_backup(q: &QFunction, mdp: &FiniteMdp, cfg: &HybridCriticConfig) -> Result<QFunction> {
    cfg.validate()?;
    let (n_s, n_a) = (mdp.n_states(), mdp.n_actions());
    if q.0.dim() != (n_s, n_a) {
        return Err(MoeError::ShapeMismatch {
            context: "hybrid_backup",
            expected: format!("[{n_s}, {n_a}]"),
            got: format!("{:?}", q.0.dim()),
        });
    }
    let v = hybrid_value(&q.0, &cfg.behavior, cfg.mu_mix);
    let mut out = mdp.reward().clone();
    for s in 0..n_s {
        for a in 0..n_a {
            let mut acc = 0.0;
            for sp in 0..n_s {
                acc += mdp.transition()[[s, a, sp]] * v[sp];
            }
            out[[s, a]] += mdp.gamma() * acc;
        }
    }
    Ok(QFunction(out))
}

/// Iterate the hybrid backup from zero to its fixed point and assemble the
/// weighted advantage.
pub fn hybrid_fixed_point(mdp: &FiniteMdp, cfg: &HybridCriticConfig) -> Result<WeightedAdvantage> {
    cfg.validate()?;
    let mut q = QFunction(Array2::zeros((mdp.n_states(), mdp.n_actions())));
    let mut residual = f64::INFINITY;
    for _ in 0..cfg.max_sweeps {
        let next = hybrid_backup(&q, mdp, cfg)?;
        residual = (&next.0 - &q.0).iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        q = next;
        if residual <= cfg.tol {
            let v = hybrid_value(&q.0, &cfg.behavior, cfg.mu_mix);
            let mut w = q.0.clone();
            for (s, mut row) in w.outer_iter_mut().enumerate() {
                row -= v[s];
            }
            return Ok(WeightedAdvantage {
                v: ValueFunction(ndarray::Array1::from(v)),
                w,
                q,
            });
        }
    }
    Err(MoeError::NoConvergence {
        context: "hybrid_fixed_point",
        max_iter: cfg.max_sweeps,
        residual,
    })
}

/// Expected-SARSA sweeps over the batch in file order:
/// Q(s,a) += lr (r + gamma E_beta[Q(s',.)] - Q(s,a)).
pub fn sarsa_batch(
    batch: &BatchDataset,
    beta: &TabularPolicy,
    gamma: f64,
    lr: f64,
    epochs: usize,
) -> Result<QFunction> {
    if batch.is_empty() {
        return Err(MoeError::Config("sarsa_batch: empty batch".into()));
    }
    let (n_s, n_a) = (beta.n_states(), beta.n_actions());
    batch.validate_against(n_s, n_a)?;
    let mut q = Array2::<f64>::zeros((n_s, n_a));
    for _ in 0..epochs {
        for t in &batch.transitions {
            let exp_next: f64 = (0..n_a).map(|a| beta.prob(t.sp, a) * q[[t.sp, a]]).sum();
            let td = t.r + gamma * exp_next - q[[t.s, t.a]];
            q[[t.s, t.a]] += lr * td;
        }
    }
    Ok(QFunction(q))
}

/// Batch Q-learning with a soft target table. Each transition is one
/// minibatch: TD toward `r + gamma Q_target(s', argmax_a Q(s', a))` (ties to
/// the lowest action), then `target <- tau * current + (1 - tau) * target`.
pub fn q_learning_batch(
    batch: &BatchDataset,
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    lr: f64,
    epochs: usize,
    tau: f64,
) -> Result<QFunction> {
    if batch.is_empty() {
        return Err(MoeError::Config("q_learning_batch: empty batch".into()));
    }
    batch.validate_against(n_states, n_actions)?;
    if !(0.0..=1.0).contains(&tau) {
        return Err(MoeError::InvalidValue {
            name: "tau",
            value: tau,
            requirement: "tau in [0, 1]",
        });
    }
    let mut q = Array2::<f64>::zeros((n_states, n_actions));
    let mut target = q.clone();
    for _ in 0..epochs {
        for t in &batch.transitions {
            let mut best = 0;
            for a in 1..n_actions {
                if q[[t.sp, a]] > q[[t.sp, best]] {
                    best = a;
                }
            }
            let td = t.r + gamma * target[[t.sp, best]] - q[[t.s, t.a]];
            q[[t.s, t.a]] += lr * td;
            for s in 0..n_states {
                for a in 0..n_actions {
                    target[[s, a]] = tau * q[[s, a]] + (1.0 - tau) * target[[s, a]];
                }
            }
        }
    }
    Ok(QFunction(q))
}

/// Convex blend of two advantage tables: (1-mu) a_beta + mu a_star.
pub fn weighted_advantage_blend(
    a_beta: &AdvantageTable,
    a_star: &AdvantageTable,
    mu: f64,
) -> Result<Array2<f64>> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(MoeError::InvalidValue {
            name: "mu",
            value: mu,
            requirement: "mu in [0, 1]",
        });
    }
    if a_beta.0.dim() != a_star.0.dim() {
        return Err(MoeError::ShapeMismatch {
            context: "weighted_advantage_blend",
            expected: format!("{:?}", a_beta.0.dim()),
            got: format!("{:?}", a_star.0.dim()),
        });
    }
    Ok(&a_beta.0 * (1.0 - mu) + &a_star.0 * mu)
}
