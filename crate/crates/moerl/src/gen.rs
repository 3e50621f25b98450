//! Seeded generators for synthetic environments, ensembles, mixture weights,
//! and batch data. Everything here is deterministic under its seed.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::batch::{BatchDataset, Transition};
use crate::expert::compose_reward;
use crate::mdp::{FiniteMdp, TabularPolicy};
use crate::moe::{BaseEnsemble, MixtureWeights};
use crate::project::project_state_feasible;

fn dirichlet_row(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    // Dirichlet(1,..,1): normalized iid Exp(1) draws.
    let mut row: Vec<f64> = (0..n).map(|_| -f64::ln(1.0 - rng.random::<f64>())).collect();
    let sum: f64 = row.iter().sum();
    row.iter_mut().for_each(|v| *v /= sum);
    row
}

pub fn sample_index(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Random MDP with Dirichlet(1) transition rows, uniform rewards in
/// `reward_range`, and a Dirichlet(1) initial distribution.
pub fn gen_random_mdp(
    seed: u64,
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    reward_range: (f64, f64),
) -> FiniteMdp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Array3::zeros((n_states, n_actions, n_states));
    for s in 0..n_states {
        for a in 0..n_actions {
            let row = dirichlet_row(&mut rng, n_states);
            for sp in 0..n_states {
                t[[s, a, sp]] = row[sp];
            }
        }
    }
    let (lo, hi) = reward_range;
    let mut r = Array2::zeros((n_states, n_actions));
    for s in 0..n_states {
        for a in 0..n_actions {
            r[[s, a]] = lo + (hi - lo) * rng.random::<f64>();
        }
    }
    let p0 = Array1::from(dirichlet_row(&mut rng, n_states));
    FiniteMdp::new(t, r, gamma, p0).expect("generated MDP is valid")
}

/// Mood-chain MDP: states are sentiment levels evenly spaced in [-1, 1];
/// actions (0: soothe, 1: ask, 2: provoke) shift the level by +1 / 0 / -1,
/// clamped at the ends. With probability `slip` the shift is replaced by a
/// uniform random one. Rewards blend the next level's sentiment with the
/// sentiment transition via [`compose_reward`] with weights (0.75, 0.25).
pub fn gen_mood_chain(n_levels: usize, slip: f64, gamma: f64) -> FiniteMdp {
    assert!(n_levels >= 2, "need at least 2 levels");
    assert!((0.0..1.0).contains(&slip), "slip in [0, 1)");
    let n_actions = 3;
    let sentiment = |s: usize| -1.0 + 2.0 * s as f64 / (n_levels - 1) as f64;
    let shift = |s: usize, d: i64| -> usize {
        (s as i64 + d).clamp(0, n_levels as i64 - 1) as usize
    };
    let mut t = Array3::zeros((n_levels, n_actions, n_levels));
    for s in 0..n_levels {
        for (a, d) in [(0usize, 1i64), (1, 0), (2, -1)] {
            t[[s, a, shift(s, d)]] += 1.0 - slip;
            for d_slip in [-1i64, 0, 1] {
                t[[s, a, shift(s, d_slip)]] += slip / 3.0;
            }
        }
    }
    let mut r = Array2::zeros((n_levels, n_actions));
    for s in 0..n_levels {
        for a in 0..n_actions {
            let mut acc = 0.0;
            for sp in 0..n_levels {
                let p = t[[s, a, sp]];
                if p > 0.0 {
                    acc += p * compose_reward(sentiment(sp), &[sentiment(s)], 0.75, 0.25, gamma)
                        .expect("valid reward arguments");
                }
            }
            r[[s, a]] = acc;
        }
    }
    let mut p0 = Array1::zeros(n_levels);
    p0[0] = 1.0; // conversations start at the lowest mood
    FiniteMdp::new(t, r, gamma, p0).expect("mood chain is a valid MDP")
}

/// Random row-stochastic policy with Dirichlet(1) rows.
pub fn gen_random_policy(seed: u64, n_states: usize, n_actions: usize) -> TabularPolicy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probs = Array2::zeros((n_states, n_actions));
    for s in 0..n_states {
        let row = dirichlet_row(&mut rng, n_actions);
        for a in 0..n_actions {
            probs[[s, a]] = row[a];
        }
    }
    TabularPolicy::new(probs).expect("dirichlet rows are stochastic")
}

/// Ensemble of `m` random base policies with the given support floor.
pub fn gen_random_ensemble(
    seed: u64,
    n_states: usize,
    n_actions: usize,
    m: usize,
    support_floor: f64,
) -> BaseEnsemble {
    let bases = (0..m)
        .map(|j| gen_random_policy(seed.wrapping_mul(1_000_003).wrapping_add(j as u64), n_states, n_actions))
        .collect();
    BaseEnsemble::new(bases, support_floor).expect("random bases form an ensemble")
}

/// Random feasible mixture weights: uniform box draws scaled by `scale`, then
/// an exact per-state projection onto the feasible set.
pub fn gen_feasible_lambda(seed: u64, ensemble: &BaseEnsemble, scale: f64) -> MixtureWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_s, n_a, comps) = (ensemble.n_states(), ensemble.n_actions(), ensemble.m() - 1);
    let raw: Vec<f64> = (0..n_s * n_a * comps)
        .map(|_| scale * rng.random::<f64>())
        .collect();
    gen_feasible_lambda_from_raw(&raw, ensemble)
}

/// Deterministic variant: project caller-supplied raw box values (flattened
/// `(s, a, i)` row-major) onto the feasible set.
pub fn gen_feasible_lambda_from_raw(raw: &[f64], ensemble: &BaseEnsemble) -> MixtureWeights {
    let (n_s, n_a, comps) = (ensemble.n_states(), ensemble.n_actions(), ensemble.m() - 1);
    assert_eq!(raw.len(), n_s * n_a * comps, "raw weight length");
    let mut lam = Array3::zeros((n_s, n_a, comps));
    for s in 0..n_s {
        let block = &raw[s * n_a * comps..(s + 1) * n_a * comps];
        let mut g = vec![0.0; n_a * comps];
        for a in 0..n_a {
            for i in 0..comps {
                g[a * comps + i] =
                    ensemble.base(i).prob(s, a) - ensemble.base(ensemble.m() - 1).prob(s, a);
            }
        }
        let proj = project_state_feasible(block, &g, n_a, comps, 1e-12)
            .expect("projection of a bounded target succeeds");
        for a in 0..n_a {
            for i in 0..comps {
                lam[[s, a, i]] = proj[a * comps + i];
            }
        }
    }
    MixtureWeights::new(lam)
}

/// Roll out `n_transitions` steps of `policy`, restarting from the initial
/// distribution every `horizon` steps. Candidate sets are the full action set.
pub fn gen_batch(
    mdp: &FiniteMdp,
    policy: &TabularPolicy,
    n_transitions: usize,
    horizon: usize,
    seed: u64,
    source: usize,
) -> BatchDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cand: Vec<usize> = (0..mdp.n_actions()).collect();
    let mut transitions = Vec::with_capacity(n_transitions);
    let mut s = sample_index(&mut rng, mdp.initial_dist().as_slice().unwrap());
    let mut steps_in_episode = 0;
    while transitions.len() < n_transitions {
        if steps_in_episode == horizon {
            s = sample_index(&mut rng, mdp.initial_dist().as_slice().unwrap());
            steps_in_episode = 0;
        }
        let a = sample_index(&mut rng, policy.probs().row(s).to_slice().unwrap());
        let row = mdp.transition().slice(ndarray::s![s, a, ..]);
        let sp = sample_index(&mut rng, row.to_slice().unwrap());
        transitions.push(Transition {
            s,
            a,
            cand: cand.clone(),
            r: mdp.reward()[[s, a]],
            sp,
        });
        s = sp;
        steps_in_episode += 1;
    }
    BatchDataset::new(transitions, source).expect("rollout transitions are valid")
}
