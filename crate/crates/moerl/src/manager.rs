//! Expert-selection MDP over candidate actions and manager training.
//!
//! The expanded state pairs the env state with one sampled candidate action
//! per expert; the manager's action is an expert index, executing that
//! expert's candidate. The reward is the env reward of the executed action,
//! and all candidates are resampled at the next state.
//!
//! At desk scale the expanded space is small enough for exact value iteration
//! ([`oracle_manager`]) and exact policy evaluation of any learned selector
//! ([`evaluate_manager`]), which anchor the DQN / CQL / model-based trainers.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

use crate::batch::{BatchDataset, Transition};
use crate::error::{MoeError, Result};
use crate::gen::sample_index;
use crate::mdp::{FiniteMdp, QFunction, TabularPolicy};
use crate::moe::MixtureWeights;

/// One expanded state: the env state plus the candidates the experts drew.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MoeMdpState {
    pub env_state: usize,
    pub candidates: Vec<usize>,
}

/// Candidate-count / action-space layout needed to pack expanded states into
/// flat indices (little-endian base-`n_actions` digits under the env state).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MoeLayout {
    pub n_actions: usize,
    pub n_experts: usize,
}

impl MoeLayout {
    pub fn expanded_per_state(&self) -> usize {
        self.n_actions.pow(self.n_experts as u32)
    }

    pub fn encode(&self, s: usize, candidates: &[usize]) -> usize {
        debug_assert_eq!(candidates.len(), self.n_experts);
        let mut digits = 0;
        for (i, &c) in candidates.iter().enumerate() {
            digits += c * self.n_actions.pow(i as u32);
        }
        s * self.expanded_per_state() + digits
    }

    pub fn decode(&self, idx: usize) -> (usize, Vec<usize>) {
        let per = self.expanded_per_state();
        let s = idx / per;
        let mut digits = idx % per;
        let mut candidates = Vec::with_capacity(self.n_experts);
        for _ in 0..self.n_experts {
            candidates.push(digits % self.n_actions);
            digits /= self.n_actions;
        }
        (s, candidates)
    }
}

/// Episodic environment over expanded states; actions are expert indices.
pub struct MoeEnv {
    mdp: FiniteMdp,
    experts: Vec<TabularPolicy>,
    horizon: Option<usize>,
    rng: ChaCha8Rng,
    state: MoeMdpState,
    steps: usize,
}

impl MoeEnv {
    pub fn new(
        mdp: FiniteMdp,
        experts: Vec<TabularPolicy>,
        horizon: Option<usize>,
        seed: u64,
    ) -> Result<Self> {
        if experts.is_empty() {
            return Err(MoeError::Config("MoeEnv needs at least one expert".into()));
        }
        for e in &experts {
            if e.n_states() != mdp.n_states() || e.n_actions() != mdp.n_actions() {
                return Err(MoeError::ShapeMismatch {
                    context: "MoeEnv::new",
                    expected: format!("experts over [{}, {}]", mdp.n_states(), mdp.n_actions()),
                    got: format!("[{}, {}]", e.n_states(), e.n_actions()),
                });
            }
        }
        let mut env = Self {
            mdp,
            experts,
            horizon,
            rng: ChaCha8Rng::seed_from_u64(seed),
            state: MoeMdpState { env_state: 0, candidates: Vec::new() },
            steps: 0,
        };
        env.state = env.draw_state(None);
        Ok(env)
    }

    pub fn layout(&self) -> MoeLayout {
        MoeLayout { n_actions: self.mdp.n_actions(), n_experts: self.experts.len() }
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn mdp(&self) -> &FiniteMdp {
        &self.mdp
    }

    pub fn experts(&self) -> &[TabularPolicy] {
        &self.experts
    }

    pub fn state(&self) -> &MoeMdpState {
        &self.state
    }

    fn draw_state(&mut self, env_state: Option<usize>) -> MoeMdpState {
        let s = env_state.unwrap_or_else(|| {
            sample_index(&mut self.rng, self.mdp.initial_dist().as_slice().unwrap())
        });
        let candidates = self
            .experts
            .iter()
            .map(|e| sample_index(&mut self.rng, e.probs().row(s).to_slice().unwrap()))
            .collect();
        MoeMdpState { env_state: s, candidates }
    }

    pub fn reset(&mut self) -> MoeMdpState {
        self.steps = 0;
        self.state = self.draw_state(None);
        self.state.clone()
    }

    /// Execute expert `j`'s candidate. Returns the next expanded state, the
    /// env reward, and whether the episode horizon was reached (a truncation,
    /// not a terminal: callers bootstrap through it).
    pub fn step(&mut self, j: usize) -> Result<(MoeMdpState, f64, bool)> {
        if j >= self.experts.len() {
            return Err(MoeError::IndexOutOfRange {
                what: "expert",
                index: j,
                bound: self.experts.len(),
            });
        }
        let s = self.state.env_state;
        let a = self.state.candidates[j];
        let r = self.mdp.reward()[[s, a]];
        let row = self.mdp.transition().slice(ndarray::s![s, a, ..]);
        let sp = sample_index(&mut self.rng, row.to_slice().unwrap());
        self.state = self.draw_state(Some(sp));
        self.steps += 1;
        let done = self.horizon.is_some_and(|h| self.steps >= h);
        Ok((self.state.clone(), r, done))
    }
}

fn candidate_prob(experts: &[TabularPolicy], s: usize, candidates: &[usize]) -> f64 {
    experts
        .iter()
        .zip(candidates)
        .map(|(e, &c)| e.prob(s, c))
        .product()
}

/// Exact optimal manager on the expanded space.
#[derive(Debug, Clone)]
pub struct OracleManager {
    pub layout: MoeLayout,
    /// Optimal value per expanded state index.
    pub values: Vec<f64>,
    /// E over the initial distribution and candidate draws of the value.
    pub expected_return: f64,
}

impl OracleManager {
    pub fn value(&self, s: usize, candidates: &[usize]) -> f64 {
        self.values[self.layout.encode(s, candidates)]
    }
}

/// Per-state expectation of an expanded-state value under the candidate draw.
fn candidate_expectation(
    values: &[f64],
    experts: &[TabularPolicy],
    layout: &MoeLayout,
    n_states: usize,
) -> Vec<f64> {
    let per = layout.expanded_per_state();
    (0..n_states)
        .map(|s| {
            let mut acc = 0.0;
            for digits in 0..per {
                let (_, cands) = layout.decode(s * per + digits);
                let p = candidate_prob(experts, s, &cands);
                if p > 0.0 {
                    acc += p * values[s * per + digits];
                }
            }
            acc
        })
        .collect()
}

/// Exact value iteration over the expanded space (`|S| * |A|^k` states must
/// stay under `cap`).
pub fn oracle_manager(
    mdp: &FiniteMdp,
    experts: &[TabularPolicy],
    tol: f64,
    cap: usize,
) -> Result<OracleManager> {
    let layout = MoeLayout { n_actions: mdp.n_actions(), n_experts: experts.len() };
    let per = layout.expanded_per_state();
    let total = mdp
        .n_states()
        .checked_mul(per)
        .filter(|&t| t <= cap)
        .ok_or(MoeError::InvalidValue {
            name: "expanded state count",
            value: (mdp.n_states() as f64) * per as f64,
            requirement: "|S| |A|^k <= cap",
        })?;
    let n_s = mdp.n_states();
    let mut values = vec![0.0_f64; total];
    loop {
        let w = candidate_expectation(&values, experts, &layout, n_s);
        let mut residual = 0.0_f64;
        for s in 0..n_s {
            for digits in 0..per {
                let idx = s * per + digits;
                let (_, cands) = layout.decode(idx);
                let mut best = f64::NEG_INFINITY;
                for &a in &cands {
                    let mut q = mdp.reward()[[s, a]];
                    for sp in 0..n_s {
                        q += mdp.gamma() * mdp.transition()[[s, a, sp]] * w[sp];
                    }
                    best = best.max(q);
                }
                residual = residual.max((best - values[idx]).abs());
                values[idx] = best;
            }
        }
        if residual <= tol {
            break;
        }
    }
    let w = candidate_expectation(&values, experts, &layout, n_s);
    let expected_return = mdp.initial_dist().dot(&Array1::from(w));
    Ok(OracleManager { layout, values, expected_return })
}

/// Exact expected return of an arbitrary selector `select(s, candidates) ->
/// expert index`, by fixed-point sweeps on the expanded space.
pub fn evaluate_manager<F: Fn(usize, &[usize]) -> usize>(
    mdp: &FiniteMdp,
    experts: &[TabularPolicy],
    select: F,
    tol: f64,
    cap: usize,
) -> Result<f64> {
    let layout = MoeLayout { n_actions: mdp.n_actions(), n_experts: experts.len() };
    let per = layout.expanded_per_state();
    let total = mdp
        .n_states()
        .checked_mul(per)
        .filter(|&t| t <= cap)
        .ok_or(MoeError::InvalidValue {
            name: "expanded state count",
            value: (mdp.n_states() as f64) * per as f64,
            requirement: "|S| |A|^k <= cap",
        })?;
    let n_s = mdp.n_states();
    // The selector is fixed, so precompute each expanded state's executed action.
    let mut chosen = vec![0usize; total];
    for idx in 0..total {
        let (s, cands) = layout.decode(idx);
        let j = select(s, &cands);
        if j >= experts.len() {
            return Err(MoeError::IndexOutOfRange {
                what: "selected expert",
                index: j,
                bound: experts.len(),
            });
        }
        chosen[idx] = cands[j];
    }
    let mut values = vec![0.0_f64; total];
    loop {
        let w = candidate_expectation(&values, experts, &layout, n_s);
        let mut residual = 0.0_f64;
        for idx in 0..total {
            let s = idx / per;
            let a = chosen[idx];
            let mut v = mdp.reward()[[s, a]];
            for sp in 0..n_s {
                v += mdp.gamma() * mdp.transition()[[s, a, sp]] * w[sp];
            }
            residual = residual.max((v - values[idx]).abs());
            values[idx] = v;
        }
        if residual <= tol {
            break;
        }
    }
    let w = candidate_expectation(&values, experts, &layout, n_s);
    Ok(mdp.initial_dist().dot(&Array1::from(w)))
}

/// Learned manager Q table keyed on (env state, sorted candidate tuple), with
/// one value per slot of the sorted tuple. Duplicate candidates share their
/// lowest (canonical) slot; the value of picking an expert depends on its
/// candidate action only, which makes the slot values well-defined.
#[derive(Debug, Clone, PartialEq)]
pub struct ManagerQ {
    pub table: BTreeMap<(usize, Vec<usize>), Vec<f64>>,
    pub n_slots: usize,
}

impl ManagerQ {
    pub fn new(n_slots: usize) -> Self {
        Self { table: BTreeMap::new(), n_slots }
    }

    fn key(s: usize, candidates: &[usize]) -> (usize, Vec<usize>) {
        let mut sorted = candidates.to_vec();
        sorted.sort_unstable();
        (s, sorted)
    }

    /// Canonical slot of `action` within the sorted tuple.
    fn slot_of(sorted: &[usize], action: usize) -> usize {
        sorted.iter().position(|&c| c == action).expect("action among candidates")
    }

    fn entry(&mut self, key: (usize, Vec<usize>)) -> &mut Vec<f64> {
        let n = self.n_slots;
        self.table.entry(key).or_insert_with(|| vec![0.0; n])
    }

    pub fn slot_values(&self, s: usize, candidates: &[usize]) -> Vec<f64> {
        let key = Self::key(s, candidates);
        self.table.get(&key).cloned().unwrap_or_else(|| vec![0.0; self.n_slots])
    }

    /// Q value of choosing expert `j` given the candidates.
    pub fn expert_value(&self, s: usize, candidates: &[usize], j: usize) -> f64 {
        let key = Self::key(s, candidates);
        let slot = Self::slot_of(&key.1, candidates[j]);
        self.table.get(&key).map_or(0.0, |v| v[slot])
    }

    /// Greedy max over canonical slots.
    pub fn greedy_value(&self, s: usize, candidates: &[usize]) -> f64 {
        let key = Self::key(s, candidates);
        match self.table.get(&key) {
            None => 0.0,
            Some(vals) => {
                let mut best = f64::NEG_INFINITY;
                for (slot, &v) in vals.iter().enumerate() {
                    if slot > 0 && key.1[slot] == key.1[slot - 1] {
                        continue;
                    }
                    best = best.max(v);
                }
                best
            }
        }
    }

    /// Greedy expert index: best canonical slot, mapped to the lowest expert
    /// proposing that action (ties break to the lower slot, hence the lower
    /// action).
    pub fn select_expert(&self, s: usize, candidates: &[usize]) -> usize {
        let key = Self::key(s, candidates);
        let vals = match self.table.get(&key) {
            Some(v) => v.clone(),
            None => vec![0.0; self.n_slots],
        };
        let mut best_slot = 0;
        let mut best_val = f64::NEG_INFINITY;
        for (slot, &v) in vals.iter().enumerate() {
            if slot > 0 && key.1[slot] == key.1[slot - 1] {
                continue;
            }
            if v > best_val {
                best_val = v;
                best_slot = slot;
            }
        }
        let action = key.1[best_slot];
        candidates
            .iter()
            .position(|&c| c == action)
            .expect("chosen action comes from the candidate tuple")
    }

    /// Soft-update this table toward `current`: self = tau current + (1-tau) self.
    fn soft_update_from(&mut self, current: &ManagerQ, tau: f64) {
        for (key, vals) in &current.table {
            let tgt = self.entry(key.clone());
            for (slot, &v) in vals.iter().enumerate() {
                tgt[slot] = tau * v + (1.0 - tau) * tgt[slot];
            }
        }
    }
}

/// Linear epsilon decay from `start` to `end` over `decay_steps` steps.
#[derive(Debug, Clone, Copy)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_steps: usize,
}

impl EpsilonSchedule {
    pub fn at(&self, step: usize) -> f64 {
        if self.decay_steps == 0 || step >= self.decay_steps {
            return self.end;
        }
        let t = step as f64 / self.decay_steps as f64;
        self.start + (self.end - self.start) * t
    }
}

/// Online epsilon-greedy Q-learning on the expert-selection environment with
/// a soft target table.
#[allow(clippy::too_many_arguments)]
pub fn dqn_manager(
    env: &mut MoeEnv,
    episodes: usize,
    horizon: usize,
    gamma: f64,
    lr: f64,
    tau: f64,
    epsilon: EpsilonSchedule,
    seed: u64,
) -> Result<ManagerQ> {
    let n_slots = env.n_experts();
    let mut q = ManagerQ::new(n_slots);
    let mut target = ManagerQ::new(n_slots);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut step_count = 0usize;
    for _ in 0..episodes {
        let mut state = env.reset();
        for _ in 0..horizon {
            let eps = epsilon.at(step_count);
            let j = if rng.random::<f64>() < eps {
                rng.random_range(0..n_slots)
            } else {
                q.select_expert(state.env_state, &state.candidates)
            };
            let (next, r, done) = env.step(j)?;
            let target_max = target.greedy_value(next.env_state, &next.candidates);
            let key = ManagerQ::key(state.env_state, &state.candidates);
            let slot = ManagerQ::slot_of(&key.1, state.candidates[j]);
            let entry = q.entry(key);
            let td = r + gamma * target_max - entry[slot];
            entry[slot] += lr * td;
            target.soft_update_from(&q, tau);
            step_count += 1;
            state = next;
            if done {
                break;
            }
        }
    }
    Ok(q)
}

/// Configuration shared by the batch manager trainers.
#[derive(Debug, Clone, Copy)]
pub struct BatchTrainConfig {
    pub gamma: f64,
    pub lr: f64,
    pub tau: f64,
    pub steps: usize,
    pub seed: u64,
}

/// (state, candidates, expert, reward, next state, next candidates).
type DecodedTransition = (usize, Vec<usize>, usize, f64, usize, Vec<usize>);

fn decode_batch(batch: &BatchDataset, layout: &MoeLayout) -> Result<Vec<DecodedTransition>> {
    let mut out = Vec::with_capacity(batch.len());
    for t in &batch.transitions {
        let (s, cands) = layout.decode(t.s);
        let (sp, next_cands) = layout.decode(t.sp);
        if t.a >= layout.n_experts {
            return Err(MoeError::IndexOutOfRange {
                what: "expert action",
                index: t.a,
                bound: layout.n_experts,
            });
        }
        out.push((s, cands, t.a, t.r, sp, next_cands));
    }
    Ok(out)
}

/// One TD + (optional) conservative-regularizer step on a sampled transition.
fn cql_style_step(
    q: &mut ManagerQ,
    target: &ManagerQ,
    sample: &DecodedTransition,
    alpha: f64,
    gamma: f64,
    lr: f64,
) {
    let (s, cands, j, r, sp, next_cands) = sample;
    let key = ManagerQ::key(*s, cands);
    let target_max = target.greedy_value(*sp, next_cands);
    let slot = ManagerQ::slot_of(&key.1, cands[*j]);
    // Conservative term: softmax over expert actions of the current Q values,
    // anchored at expert 0's candidate. Gradient per canonical slot b is
    // P_b (1 + Q_b - E_softmax[Q]) - 1{b = slot(a_0)}, with P_b the softmax
    // mass landing on slot b.
    let vals = q.slot_values(*s, cands);
    let expert_vals: Vec<f64> = (0..cands.len())
        .map(|e| vals[ManagerQ::slot_of(&key.1, cands[e])])
        .collect();
    let max = expert_vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = expert_vals.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
    let e_soft: f64 = probs.iter().zip(&expert_vals).map(|(p, v)| p * v).sum();
    let slot0 = ManagerQ::slot_of(&key.1, cands[0]);
    let mut slot_mass = vec![0.0; q.n_slots];
    for (e, p) in probs.iter().enumerate() {
        slot_mass[ManagerQ::slot_of(&key.1, cands[e])] += p;
    }
    // Both loss terms are differentiated at the same (pre-update) table.
    let mut delta = vec![0.0; q.n_slots];
    let entry = q.entry(key);
    let td = r + gamma * target_max - entry[slot];
    delta[slot] += lr * td;
    for (b, mass) in slot_mass.iter().enumerate() {
        let mut g = mass * (1.0 + vals[b] - e_soft);
        if b == slot0 {
            g -= 1.0;
        }
        delta[b] -= lr * alpha * g;
    }
    for (b, d) in delta.iter().enumerate() {
        entry[b] += d;
    }
}

/// Batch Q-learning on expert-selection transitions (uniform minibatches of
/// one, soft target updates).
pub fn dqn_batch_manager(
    batch: &BatchDataset,
    layout: &MoeLayout,
    cfg: &BatchTrainConfig,
) -> Result<ManagerQ> {
    if batch.is_empty() {
        return Err(MoeError::Config("dqn_batch_manager: empty batch".into()));
    }
    let decoded = decode_batch(batch, layout)?;
    let mut q = ManagerQ::new(layout.n_experts);
    let mut target = ManagerQ::new(layout.n_experts);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..cfg.steps {
        let sample = &decoded[rng.random_range(0..decoded.len())];
        let (s, cands, j, r, sp, next_cands) = sample;
        let key = ManagerQ::key(*s, cands);
        let target_max = target.greedy_value(*sp, next_cands);
        let slot = ManagerQ::slot_of(&key.1, cands[*j]);
        let entry = q.entry(key);
        let td = r + cfg.gamma * target_max - entry[slot];
        entry[slot] += cfg.lr * td;
        target.soft_update_from(&q, cfg.tau);
    }
    Ok(q)
}

/// Conservative Q-learning: the same minibatch trajectory as
/// [`dqn_batch_manager`] plus `alpha` times the behavior-anchored softmax
/// regularizer.
pub fn cql_manager(
    batch: &BatchDataset,
    layout: &MoeLayout,
    alpha: f64,
    cfg: &BatchTrainConfig,
) -> Result<ManagerQ> {
    if alpha < 0.0 {
        return Err(MoeError::InvalidValue {
            name: "alpha",
            value: alpha,
            requirement: "alpha >= 0",
        });
    }
    if batch.is_empty() {
        return Err(MoeError::Config("cql_manager: empty batch".into()));
    }
    let decoded = decode_batch(batch, layout)?;
    let mut q = ManagerQ::new(layout.n_experts);
    let mut target = ManagerQ::new(layout.n_experts);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..cfg.steps {
        let sample = &decoded[rng.random_range(0..decoded.len())];
        cql_style_step(&mut q, &target, sample, alpha, cfg.gamma, cfg.lr);
        target.soft_update_from(&q, cfg.tau);
    }
    Ok(q)
}

/// Mean conservatism gap `E_softmax[Q] - Q(., expert 0 action)` over the
/// distinct expanded states of a batch.
pub fn cql_gap(q: &ManagerQ, batch: &BatchDataset, layout: &MoeLayout) -> Result<f64> {
    let decoded = decode_batch(batch, layout)?;
    let mut seen = std::collections::BTreeSet::new();
    let mut acc = 0.0;
    let mut n = 0usize;
    for (s, cands, _, _, _, _) in &decoded {
        let key = ManagerQ::key(*s, cands);
        if !seen.insert(key.clone()) {
            continue;
        }
        let vals = q.slot_values(*s, cands);
        let expert_vals: Vec<f64> = (0..cands.len())
            .map(|e| vals[ManagerQ::slot_of(&key.1, cands[e])])
            .collect();
        let max = expert_vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = expert_vals.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let e_soft: f64 =
            exps.iter().zip(&expert_vals).map(|(e, v)| e / z * v).sum();
        acc += e_soft - expert_vals[0];
        n += 1;
    }
    Ok(acc / n.max(1) as f64)
}

/// Empirical env-level model learned from expert-selection transitions.
#[derive(Debug, Clone)]
pub struct LearnedMoeModel {
    pub transition: Array3<f64>,
    pub reward: Array2<f64>,
    /// Empirical per-expert candidate distributions.
    pub experts: Vec<TabularPolicy>,
}

/// Count-based model with additive (Laplace) smoothing over next states and
/// candidate draws; `smoothing = 0` keeps pure empirical frequencies
/// (uniform rows where nothing was observed).
pub fn learn_moe_model(
    batch: &BatchDataset,
    layout: &MoeLayout,
    n_states: usize,
    smoothing: f64,
) -> Result<LearnedMoeModel> {
    let decoded = decode_batch(batch, layout)?;
    let n_a = layout.n_actions;
    let k = layout.n_experts;
    let mut trans_counts = Array3::<f64>::zeros((n_states, n_a, n_states));
    let mut reward_sum = Array2::<f64>::zeros((n_states, n_a));
    let mut reward_count = Array2::<f64>::zeros((n_states, n_a));
    let mut cand_counts = vec![Array2::<f64>::zeros((n_states, n_a)); k];
    for (s, cands, j, r, sp, next_cands) in &decoded {
        let a = cands[*j];
        trans_counts[[*s, a, *sp]] += 1.0;
        reward_sum[[*s, a]] += r;
        reward_count[[*s, a]] += 1.0;
        for (i, &c) in cands.iter().enumerate() {
            cand_counts[i][[*s, c]] += 1.0;
        }
        for (i, &c) in next_cands.iter().enumerate() {
            cand_counts[i][[*sp, c]] += 1.0;
        }
    }
    let mut transition = Array3::zeros((n_states, n_a, n_states));
    let mut reward = Array2::zeros((n_states, n_a));
    for s in 0..n_states {
        for a in 0..n_a {
            let total: f64 = (0..n_states).map(|sp| trans_counts[[s, a, sp]]).sum();
            let denom = total + smoothing * n_states as f64;
            for sp in 0..n_states {
                transition[[s, a, sp]] = if denom > 0.0 {
                    (trans_counts[[s, a, sp]] + smoothing) / denom
                } else {
                    1.0 / n_states as f64
                };
            }
            if reward_count[[s, a]] > 0.0 {
                reward[[s, a]] = reward_sum[[s, a]] / reward_count[[s, a]];
            }
        }
    }
    let experts = cand_counts
        .into_iter()
        .map(|counts| {
            let mut probs = Array2::zeros((n_states, n_a));
            for s in 0..n_states {
                let total: f64 = (0..n_a).map(|a| counts[[s, a]]).sum();
                let denom = total + smoothing * n_a as f64;
                for a in 0..n_a {
                    probs[[s, a]] = if denom > 0.0 {
                        (counts[[s, a]] + smoothing) / denom
                    } else {
                        1.0 / n_a as f64
                    };
                }
            }
            TabularPolicy::new(probs).expect("count frequencies are stochastic")
        })
        .collect();
    Ok(LearnedMoeModel { transition, reward, experts })
}

#[derive(Debug, Clone, Copy)]
pub struct MbrlConfig {
    pub rollout_budget: usize,
    pub rollout_horizon: usize,
    pub gamma: f64,
    /// Constant step when positive; per-(state, slot) 1/(1+visits) when <= 0.
    pub lr: f64,
    pub smoothing: f64,
    pub seed: u64,
}

impl Default for MbrlConfig {
    fn default() -> Self {
        Self {
            rollout_budget: 200_000,
            rollout_horizon: 40,
            gamma: 0.8,
            lr: 0.0,
            smoothing: 1.0,
            seed: 0,
        }
    }
}

/// Model-based manager training: learn the env-level model from the batch,
/// then run Q-learning on synthetic rollouts from the model (uniform action
/// exploration, uniform env-state restarts for coverage).
pub fn mbrl_manager(
    batch: &BatchDataset,
    layout: &MoeLayout,
    n_states: usize,
    cfg: &MbrlConfig,
) -> Result<ManagerQ> {
    if batch.is_empty() {
        return Err(MoeError::Config("mbrl_manager: empty batch".into()));
    }
    let model = learn_moe_model(batch, layout, n_states, cfg.smoothing)?;
    let k = layout.n_experts;
    let mut q = ManagerQ::new(k);
    if cfg.rollout_budget == 0 {
        return Ok(q);
    }
    let mut visit_counts: BTreeMap<(usize, Vec<usize>), Vec<f64>> = BTreeMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let draw_candidates = |s: usize, rng: &mut ChaCha8Rng, model: &LearnedMoeModel| -> Vec<usize> {
        model
            .experts
            .iter()
            .map(|e| sample_index(rng, e.probs().row(s).to_slice().unwrap()))
            .collect()
    };
    let mut steps = 0usize;
    'outer: loop {
        let mut s = rng.random_range(0..n_states);
        let mut cands = draw_candidates(s, &mut rng, &model);
        for _ in 0..cfg.rollout_horizon {
            if steps >= cfg.rollout_budget {
                break 'outer;
            }
            let j = rng.random_range(0..k);
            let a = cands[j];
            let r = model.reward[[s, a]];
            let row = model.transition.slice(ndarray::s![s, a, ..]);
            let sp = sample_index(&mut rng, row.to_slice().unwrap());
            let next_cands = draw_candidates(sp, &mut rng, &model);
            let key = ManagerQ::key(s, &cands);
            let slot = ManagerQ::slot_of(&key.1, a);
            let next_max = q.greedy_value(sp, &next_cands);
            let counts = visit_counts.entry(key.clone()).or_insert_with(|| vec![0.0; k]);
            counts[slot] += 1.0;
            let step_size = if cfg.lr > 0.0 { cfg.lr } else { 1.0 / counts[slot] };
            let entry = q.entry(key);
            let td = r + cfg.gamma * next_max - entry[slot];
            entry[slot] += step_size * td;
            s = sp;
            cands = next_cands;
            steps += 1;
        }
    }
    Ok(q)
}

/// Generate expert-selection transitions by running a uniform-random manager
/// on the true environment; states are stored as expanded indices.
pub fn gen_moe_batch(
    env: &mut MoeEnv,
    n_transitions: usize,
    horizon: usize,
    manager_seed: u64,
    source: usize,
) -> Result<BatchDataset> {
    let layout = env.layout();
    let mut rng = ChaCha8Rng::seed_from_u64(manager_seed);
    let cand_ids: Vec<usize> = (0..env.n_experts()).collect();
    let mut transitions = Vec::with_capacity(n_transitions);
    let mut state = env.reset();
    let mut steps_in_ep = 0usize;
    while transitions.len() < n_transitions {
        if steps_in_ep == horizon {
            state = env.reset();
            steps_in_ep = 0;
        }
        let j = rng.random_range(0..env.n_experts());
        let encoded_s = layout.encode(state.env_state, &state.candidates);
        let (next, r, done) = env.step(j)?;
        transitions.push(Transition {
            s: encoded_s,
            a: j,
            cand: cand_ids.clone(),
            r,
            sp: layout.encode(next.env_state, &next.candidates),
        });
        state = next;
        steps_in_ep += 1;
        if done {
            state = env.reset();
            steps_in_ep = 0;
        }
    }
    BatchDataset::new(transitions, source)
}

/// Configuration of the full batch policy-improvement loop.
#[derive(Debug, Clone)]
pub struct TrainLoopConfig {
    pub behavior: TabularPolicy,
    pub candidate: TabularPolicy,
    /// Hybrid critic mix (0 = behavior expectation, 1 = greedy max).
    pub mu_mix: f64,
    /// Candidate-refresh temperature: rho(a|s) proportional to
    /// beta(a|s) exp(eta W(s,a)).
    pub eta: f64,
    /// QP combination weights over (candidate, behavior) anchors.
    pub alpha: Vec<f64>,
    pub gamma: f64,
    pub iterations: usize,
    /// Minibatch size; 0 uses the whole batch in file order.
    pub minibatch: usize,
    pub critic_lr: f64,
    pub tau: f64,
    pub kl_lr: f64,
    pub kl_steps: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct TrainIterationRow {
    pub iter: usize,
    pub qp_objective: f64,
    pub mean_td_error: f64,
    pub lambda_max: f64,
    pub method: String,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub rows: Vec<TrainIterationRow>,
    pub candidate: TabularPolicy,
    pub pi_phi: TabularPolicy,
    pub critic_q: QFunction,
    pub lam: MixtureWeights,
}

/// Batch policy-improvement loop: per iteration, solve the mixture QP on a
/// minibatch with the critic's weighted advantage, distill the mixture into a
/// candidate policy by KL fitting, refresh the candidate softly through the
/// advantage, and take hybrid TD critic steps with a soft target table.
pub fn train_loop(batch: &BatchDataset, cfg: &TrainLoopConfig) -> Result<TrainReport> {
    use crate::moe::BaseEnsemble;
    let n_s = cfg.behavior.n_states();
    let n_a = cfg.behavior.n_actions();
    batch.validate_against(n_s, n_a)?;
    if cfg.alpha.len() != 2 {
        return Err(MoeError::Config("train_loop: alpha must weight (candidate, behavior)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut candidate = cfg.candidate.clone();
    let mut pi_phi = cfg.candidate.clone();
    let mut q = Array2::<f64>::zeros((n_s, n_a));
    let mut q_target = q.clone();
    let mut lam = MixtureWeights::zeros(n_s, n_a, 1);
    let mut rows = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        // Minibatch selection (the whole batch in order when minibatch = 0).
        let indices: Vec<usize> = if cfg.minibatch == 0 || cfg.minibatch >= batch.len() {
            (0..batch.len()).collect()
        } else {
            (0..cfg.minibatch).map(|_| rng.random_range(0..batch.len())).collect()
        };
        let mini: Vec<Transition> =
            indices.iter().map(|&i| batch.transitions[i].clone()).collect();
        let mini = BatchDataset::new(mini, batch.source)?;

        // Critic step: hybrid TD toward the target table, then a soft sync.
        let mut td_acc = 0.0;
        for t in &mini.transitions {
            let exp_next: f64 =
                (0..n_a).map(|a| cfg.behavior.prob(t.sp, a) * q_target[[t.sp, a]]).sum();
            let max_next = (0..n_a)
                .map(|a| q_target[[t.sp, a]])
                .fold(f64::NEG_INFINITY, f64::max);
            let v_next = (1.0 - cfg.mu_mix) * exp_next + cfg.mu_mix * max_next;
            let td = t.r + cfg.gamma * v_next - q[[t.s, t.a]];
            td_acc += td.abs();
            q[[t.s, t.a]] += cfg.critic_lr * td;
            for s in 0..n_s {
                for a in 0..n_a {
                    q_target[[s, a]] = cfg.tau * q[[s, a]] + (1.0 - cfg.tau) * q_target[[s, a]];
                }
            }
        }
        let mean_td = td_acc / mini.len().max(1) as f64;

        // Weighted advantage from the current critic.
        let w_vals = crate::critic::hybrid_value(&q, &cfg.behavior, cfg.mu_mix);
        let mut w_table = q.clone();
        for (s, mut row) in w_table.outer_iter_mut().enumerate() {
            row -= w_vals[s];
        }

        // Mixture QP over (candidate, behavior) with the critic advantage at
        // the behavior anchor.
        let ensemble = BaseEnsemble::with_default_floor(vec![
            candidate.clone(),
            cfg.behavior.clone(),
        ])?;
        let advantages = vec![
            crate::mdp::AdvantageTable(Array2::zeros((n_s, n_a))),
            crate::mdp::AdvantageTable(w_table.clone()),
        ];
        let saa = crate::qp::build_saa(
            &[mini.clone(), mini.clone()],
            &ensemble,
            &advantages,
            &cfg.alpha,
            cfg.gamma,
        )?;
        let qp = crate::qp::assemble_qp(&saa, &ensemble)?;
        let sol = crate::qp::solve_kkt(&qp, 1e-8, 1000)?;
        lam = crate::qp::lambda_tabular(&sol.lam_star, &qp.index_map, n_s, n_a, 2);

        // Distill the mixture into the candidate slot.
        let (fitted, _) = crate::qp::kl_fit_candidate(
            &mini,
            &lam,
            ensemble.base(1),
            ensemble.base(0),
            cfg.kl_lr,
            cfg.kl_steps,
        )?;
        pi_phi = fitted;

        // Soft candidate refresh through the weighted advantage.
        let mut probs = Array2::zeros((n_s, n_a));
        for s in 0..n_s {
            let mut row: Vec<f64> = (0..n_a)
                .map(|a| cfg.behavior.prob(s, a) * (cfg.eta * w_table[[s, a]]).exp())
                .collect();
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= sum);
            for a in 0..n_a {
                probs[[s, a]] = row[a];
            }
        }
        candidate = TabularPolicy::new(probs)?;

        rows.push(TrainIterationRow {
            iter,
            qp_objective: sol.objective,
            mean_td_error: mean_td,
            lambda_max: sol.lam_star.iter().fold(0.0_f64, |m, v| m.max(*v)),
            method: sol.method.to_string(),
        });
    }
    Ok(TrainReport {
        rows,
        candidate,
        pi_phi,
        critic_q: QFunction(q),
        lam,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gen::{gen_mood_chain, gen_random_mdp, gen_random_policy};
    use crate::mdp::{expected_return, policy_value, value_iteration};

    fn chain_experts() -> Vec<TabularPolicy> {
        vec![
            TabularPolicy::deterministic(3, &[1; 5]).unwrap(), // ask (primitive-like)
            TabularPolicy::deterministic(3, &[0; 5]).unwrap(), // soothe
            TabularPolicy::deterministic(3, &[2; 5]).unwrap(), // provoke
        ]
    }

    #[test]
    fn layout_round_trip() {
        let layout = MoeLayout { n_actions: 3, n_experts: 3 };
        for s in 0..5 {
            for c0 in 0..3 {
                for c1 in 0..3 {
                    for c2 in 0..3 {
                        let idx = layout.encode(s, &[c0, c1, c2]);
                        assert_eq!(layout.decode(idx), (s, vec![c0, c1, c2]));
                    }
                }
            }
        }
    }

    #[test]
    fn env_is_deterministic_under_seed() {
        let mdp = gen_random_mdp(1, 4, 3, 0.8, (-1.0, 1.0));
        let experts = vec![gen_random_policy(2, 4, 3), gen_random_policy(3, 4, 3)];
        let run = |seed: u64| {
            let mut env = MoeEnv::new(mdp.clone(), experts.clone(), Some(10), seed).unwrap();
            let mut log = Vec::new();
            let mut state = env.reset();
            for step in 0..30 {
                let (next, r, done) = env.step(step % 2).unwrap();
                log.push((state.clone(), r.to_bits(), done));
                state = if done { env.reset() } else { next };
            }
            log
        };
        assert_eq!(run(42), run(42));
        assert_ne!(run(42), run(43));
    }

    #[test]
    fn deterministic_experts_fix_candidates() {
        let mdp = gen_random_mdp(5, 4, 3, 0.8, (0.0, 1.0));
        let experts = vec![
            TabularPolicy::deterministic(3, &[2, 0, 1, 2]).unwrap(),
            TabularPolicy::deterministic(3, &[1, 1, 0, 0]).unwrap(),
        ];
        let mut env = MoeEnv::new(mdp, experts, None, 7).unwrap();
        let state = env.reset();
        assert_eq!(state.candidates[0], [2, 0, 1, 2][state.env_state]);
        assert_eq!(state.candidates[1], [1, 1, 0, 0][state.env_state]);
    }

    #[test]
    fn single_expert_oracle_equals_policy_value() {
        let mdp = gen_random_mdp(11, 4, 3, 0.9, (-1.0, 1.0));
        let expert = gen_random_policy(12, 4, 3);
        let oracle = oracle_manager(&mdp, std::slice::from_ref(&expert), 1e-12, 100_000).unwrap();
        let exact = expected_return(&mdp, &expert).unwrap();
        assert!(
            (oracle.expected_return - exact).abs() < 1e-8,
            "{} vs {exact}",
            oracle.expected_return
        );
    }

    #[test]
    fn dominated_experts_are_ignored_by_the_oracle() {
        // On the mood chain, soothe dominates; adding dominated experts keeps
        // the oracle at the soothe-only value when soothe is always available.
        let chain = gen_mood_chain(4, 0.0, 0.8);
        let soothe = TabularPolicy::deterministic(3, &[0; 4]).unwrap();
        let provoke = TabularPolicy::deterministic(3, &[2; 4]).unwrap();
        let oracle =
            oracle_manager(&chain, &[soothe.clone(), provoke], 1e-12, 100_000).unwrap();
        let alone = policy_value(&chain, &soothe).unwrap();
        let expected: f64 = chain.initial_dist().dot(&alone.0);
        assert!((oracle.expected_return - expected).abs() < 1e-8);
    }

    #[test]
    fn full_action_cover_recovers_value_iteration() {
        // Deterministic single-action experts covering the whole action set
        // make the oracle the plain optimal value.
        let mdp = gen_random_mdp(21, 4, 3, 0.9, (-1.0, 1.0));
        let experts: Vec<TabularPolicy> = (0..3)
            .map(|a| TabularPolicy::deterministic(3, &[a; 4]).unwrap())
            .collect();
        let oracle = oracle_manager(&mdp, &experts, 1e-12, 100_000).unwrap();
        let (qstar, _) = value_iteration(&mdp, 1e-13).unwrap();
        let vstar: Vec<f64> = (0..4)
            .map(|s| (0..3).map(|a| qstar.0[[s, a]]).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let expected: f64 = (0..4).map(|s| mdp.initial_dist()[s] * vstar[s]).sum();
        assert!((oracle.expected_return - expected).abs() < 1e-8);
    }

    #[test]
    fn oracle_cap_is_enforced() {
        let mdp = gen_random_mdp(31, 4, 3, 0.9, (-1.0, 1.0));
        let experts: Vec<TabularPolicy> =
            (0..3).map(|i| gen_random_policy(40 + i, 4, 3)).collect();
        assert!(oracle_manager(&mdp, &experts, 1e-10, 10).is_err());
    }

    #[test]
    fn evaluate_manager_matches_oracle_for_greedy_oracle_selector() {
        let chain = gen_mood_chain(5, 0.1, 0.8);
        let experts = chain_experts();
        let oracle = oracle_manager(&chain, &experts, 1e-12, 100_000).unwrap();
        // Greedy one-step selector on the oracle values.
        let layout = oracle.layout;
        let per = layout.expanded_per_state();
        let w: Vec<f64> =
            candidate_expectation(&oracle.values, &experts, &layout, chain.n_states());
        let value = evaluate_manager(
            &chain,
            &experts,
            |s, cands| {
                let mut best = 0;
                let mut best_q = f64::NEG_INFINITY;
                for (j, &a) in cands.iter().enumerate() {
                    let mut q = chain.reward()[[s, a]];
                    for sp in 0..chain.n_states() {
                        q += chain.gamma() * chain.transition()[[s, a, sp]] * w[sp];
                    }
                    if q > best_q {
                        best_q = q;
                        best = j;
                    }
                }
                best
            },
            1e-12,
            100_000,
        )
        .unwrap();
        assert!(
            (value - oracle.expected_return).abs() < 1e-7,
            "{value} vs {}",
            oracle.expected_return
        );
        let _ = per;
    }

    #[test]
    fn manager_q_slots_handle_duplicates() {
        let mut q = ManagerQ::new(3);
        // Candidates (2, 0, 2): sorted (0, 2, 2); slots 0 and 1 canonical.
        let key = ManagerQ::key(0, &[2, 0, 2]);
        q.entry(key).copy_from_slice(&[1.0, 5.0, -9.0]);
        assert_eq!(q.expert_value(0, &[2, 0, 2], 0), 5.0);
        assert_eq!(q.expert_value(0, &[2, 0, 2], 1), 1.0);
        assert_eq!(q.expert_value(0, &[2, 0, 2], 2), 5.0);
        assert_eq!(q.greedy_value(0, &[2, 0, 2]), 5.0);
        // Greedy expert: action 2's canonical slot wins; expert 0 proposed it.
        assert_eq!(q.select_expert(0, &[2, 0, 2]), 0);
    }

    #[test]
    fn dqn_online_forced_choice_matches_expert_value() {
        let mdp = gen_random_mdp(51, 4, 3, 0.8, (0.0, 1.0));
        let expert = gen_random_policy(52, 4, 3);
        let mut env = MoeEnv::new(mdp.clone(), vec![expert.clone()], Some(25), 53).unwrap();
        let q = dqn_manager(
            &mut env,
            400,
            25,
            0.8,
            0.2,
            0.05,
            EpsilonSchedule { start: 1.0, end: 0.1, decay_steps: 4000 },
            54,
        )
        .unwrap();
        let value = evaluate_manager(
            &mdp,
            std::slice::from_ref(&expert),
            |s, cands| q.select_expert(s, cands),
            1e-10,
            100_000,
        )
        .unwrap();
        let exact = expected_return(&mdp, &expert).unwrap();
        assert!(
            (value - exact).abs() <= 0.02 * exact.abs().max(1.0),
            "forced choice {value} vs {exact}"
        );
    }

    #[test]
    fn dqn_online_zero_lr_leaves_q_empty_valued() {
        let chain = gen_mood_chain(4, 0.1, 0.8);
        let mut env = MoeEnv::new(chain, chain_experts_4(), Some(5), 55).unwrap();
        let q = dqn_manager(
            &mut env,
            50,
            5,
            0.8,
            0.0,
            0.05,
            EpsilonSchedule { start: 1.0, end: 1.0, decay_steps: 0 },
            56,
        )
        .unwrap();
        assert!(q.table.values().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn dqn_online_reaches_near_oracle_on_the_chain() {
        let chain = gen_mood_chain(5, 0.1, 0.8);
        let experts = chain_experts();
        let oracle = oracle_manager(&chain, &experts, 1e-10, 100_000).unwrap();
        let mut env = MoeEnv::new(chain.clone(), experts.clone(), Some(5), 57).unwrap();
        let q = dqn_manager(
            &mut env,
            30_000,
            5,
            0.8,
            0.15,
            0.05,
            EpsilonSchedule { start: 1.0, end: 0.05, decay_steps: 100_000 },
            58,
        )
        .unwrap();
        let ret = evaluate_manager(
            &chain,
            &experts,
            |s, cands| q.select_expert(s, cands),
            1e-10,
            100_000,
        )
        .unwrap();
        assert!(
            ret >= 0.9 * oracle.expected_return,
            "dqn {ret} vs oracle {}",
            oracle.expected_return
        );
    }

    #[test]
    fn mbrl_model_counts_match_deterministic_kernel() {
        let chain = gen_mood_chain(4, 0.0, 0.8);
        let experts = chain_experts_4();
        let mut env = MoeEnv::new(chain.clone(), experts.clone(), Some(20), 61).unwrap();
        let batch = gen_moe_batch(&mut env, 4000, 20, 62, 0).unwrap();
        let layout = env.layout();
        let model = learn_moe_model(&batch, &layout, 4, 1.0).unwrap();
        for s in 0..4 {
            for a in 0..3 {
                // True kernel is deterministic; learned rows put the bulk of
                // their mass on the true successor (up to smoothing), and
                // stay near uniform where nothing was observed.
                let truth = (0..4)
                    .max_by(|&x, &y| {
                        chain.transition()[[s, a, x]]
                            .partial_cmp(&chain.transition()[[s, a, y]])
                            .unwrap()
                    })
                    .unwrap();
                let row_sum: f64 = (0..4).map(|sp| model.transition[[s, a, sp]]).sum();
                assert!((row_sum - 1.0).abs() < 1e-12);
                if model.transition[[s, a, truth]] < 0.5 {
                    for sp in 0..4 {
                        assert!(model.transition[[s, a, sp]] <= 0.6);
                    }
                }
            }
        }
    }

    fn chain_experts_4() -> Vec<TabularPolicy> {
        vec![
            TabularPolicy::deterministic(3, &[1; 4]).unwrap(),
            TabularPolicy::deterministic(3, &[0; 4]).unwrap(),
            TabularPolicy::deterministic(3, &[2; 4]).unwrap(),
        ]
    }

    #[test]
    fn mbrl_with_zero_budget_keeps_q_at_init() {
        let chain = gen_mood_chain(4, 0.0, 0.8);
        let mut env = MoeEnv::new(chain, chain_experts_4(), Some(10), 71).unwrap();
        let batch = gen_moe_batch(&mut env, 200, 10, 72, 0).unwrap();
        let layout = env.layout();
        let cfg = MbrlConfig { rollout_budget: 0, ..Default::default() };
        let q = mbrl_manager(&batch, &layout, 4, &cfg).unwrap();
        assert!(q.table.is_empty());
    }

    #[test]
    fn mbrl_exact_limit_on_deterministic_chain_reaches_oracle() {
        // slip = 0 makes the kernel deterministic, so full-coverage counts
        // with smoothing off recover the true model exactly and the greedy
        // manager hits the oracle value.
        let chain = gen_mood_chain(4, 0.0, 0.8);
        let experts = chain_experts_4();
        let oracle = oracle_manager(&chain, &experts, 1e-12, 100_000).unwrap();
        let mut env = MoeEnv::new(chain.clone(), experts.clone(), Some(8), 65).unwrap();
        let batch = gen_moe_batch(&mut env, 20_000, 8, 66, 0).unwrap();
        let layout = env.layout();
        let cfg = MbrlConfig {
            rollout_budget: 150_000,
            rollout_horizon: 40,
            gamma: 0.8,
            lr: 0.0,
            smoothing: 0.0,
            seed: 67,
        };
        let q = mbrl_manager(&batch, &layout, 4, &cfg).unwrap();
        let ret = evaluate_manager(
            &chain,
            &experts,
            |s, cands| q.select_expert(s, cands),
            1e-12,
            100_000,
        )
        .unwrap();
        assert!(
            (ret - oracle.expected_return).abs() < 1e-6,
            "mbrl {ret} vs oracle {}",
            oracle.expected_return
        );
    }

    #[test]
    fn cql_alpha_zero_matches_dqn_bitwise() {
        let chain = gen_mood_chain(5, 0.1, 0.8);
        let mut env = MoeEnv::new(chain, chain_experts(), Some(15), 81).unwrap();
        let batch = gen_moe_batch(&mut env, 3000, 15, 82, 0).unwrap();
        let layout = env.layout();
        let cfg = BatchTrainConfig { gamma: 0.8, lr: 0.2, tau: 0.05, steps: 5000, seed: 83 };
        let dqn = dqn_batch_manager(&batch, &layout, &cfg).unwrap();
        let cql = cql_manager(&batch, &layout, 0.0, &cfg).unwrap();
        assert_eq!(dqn.table.len(), cql.table.len());
        for (key, dv) in &dqn.table {
            let cv = &cql.table[key];
            for (a, b) in dv.iter().zip(cv) {
                assert_eq!(a.to_bits(), b.to_bits(), "bitwise divergence at {key:?}");
            }
        }
    }

    #[test]
    fn cql_gap_shrinks_with_alpha() {
        let chain = gen_mood_chain(5, 0.1, 0.8);
        let mut env = MoeEnv::new(chain, chain_experts(), Some(15), 91).unwrap();
        let batch = gen_moe_batch(&mut env, 4000, 15, 92, 0).unwrap();
        let layout = env.layout();
        let cfg = BatchTrainConfig { gamma: 0.8, lr: 0.1, tau: 0.05, steps: 30_000, seed: 93 };
        let mut gaps = Vec::new();
        for alpha in [0.0, 1.0, 10.0] {
            let q = cql_manager(&batch, &layout, alpha, &cfg).unwrap();
            gaps.push(cql_gap(&q, &batch, &layout).unwrap());
        }
        assert!(gaps[1] <= gaps[0] + 1e-9, "gaps {gaps:?}");
        assert!(gaps[2] <= gaps[1] + 1e-9, "gaps {gaps:?}");
    }

    #[test]
    fn single_transition_cql_update_is_hand_checkable() {
        // One transition, one expert: the update has a closed form.
        let layout = MoeLayout { n_actions: 2, n_experts: 1 };
        let s_enc = layout.encode(0, &[1]);
        let sp_enc = layout.encode(0, &[0]);
        let batch = BatchDataset::new(
            vec![Transition { s: s_enc, a: 0, cand: vec![0], r: 1.0, sp: sp_enc }],
            0,
        )
        .unwrap();
        let cfg = BatchTrainConfig { gamma: 0.5, lr: 0.1, tau: 1.0, steps: 1, seed: 1 };
        let alpha = 2.0;
        let q = cql_manager(&batch, &layout, alpha, &cfg).unwrap();
        // TD: Q = 0 + 0.1 (1 + 0.5 * 0 - 0) = 0.1.
        // Conservative term with a single action: softmax mass 1 on slot 0,
        // E = Q, gradient = 1 * (1 + Q - Q) - 1 = 0.
        let vals = q.slot_values(0, &[1]);
        assert!((vals[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn train_loop_zero_iterations_is_identity() {
        let mdp = gen_random_mdp(101, 3, 2, 0.8, (-1.0, 1.0));
        let behavior = gen_random_policy(102, 3, 2);
        let candidate = gen_random_policy(103, 3, 2);
        let batch = crate::gen::gen_batch(&mdp, &behavior, 100, 20, 104, 1);
        let cfg = TrainLoopConfig {
            behavior: behavior.clone(),
            candidate: candidate.clone(),
            mu_mix: 0.5,
            eta: 1.0,
            alpha: vec![0.0, 1.0],
            gamma: 0.8,
            iterations: 0,
            minibatch: 0,
            critic_lr: 0.1,
            tau: 0.05,
            kl_lr: 1.0,
            kl_steps: 50,
            seed: 105,
        };
        let report = train_loop(&batch, &cfg).unwrap();
        assert!(report.rows.is_empty());
        assert_eq!(report.candidate, candidate);
        assert_eq!(report.pi_phi, candidate);
        assert!(report.critic_q.0.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn train_loop_with_single_base_reduces_to_sarsa() {
        // candidate == behavior, mu_mix = 0, tau = 1: the critic trajectory is
        // exactly expected-SARSA sweeps in file order.
        let mdp = gen_random_mdp(111, 3, 2, 0.8, (-1.0, 1.0));
        let behavior = gen_random_policy(112, 3, 2);
        let batch = crate::gen::gen_batch(&mdp, &behavior, 400, 40, 113, 1);
        let epochs = 3;
        let cfg = TrainLoopConfig {
            behavior: behavior.clone(),
            candidate: behavior.clone(),
            mu_mix: 0.0,
            eta: 0.0,
            alpha: vec![0.0, 1.0],
            gamma: 0.8,
            iterations: epochs,
            minibatch: 0,
            critic_lr: 0.1,
            tau: 1.0,
            kl_lr: 1.0,
            kl_steps: 5,
            seed: 114,
        };
        let report = train_loop(&batch, &cfg).unwrap();
        let sarsa = crate::critic::sarsa_batch(&batch, &behavior, 0.8, 0.1, epochs).unwrap();
        for s in 0..3 {
            for a in 0..2 {
                assert!(
                    (report.critic_q.0[[s, a]] - sarsa.0[[s, a]]).abs() < 1e-12,
                    "Q({s},{a})"
                );
            }
        }
        // Identical bases leave no mixture room: lambda stays zero.
        assert!(report.lam.lam().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn train_loop_improves_on_the_chain() {
        let chain = gen_mood_chain(5, 0.1, 0.8);
        let behavior = TabularPolicy::new(ndarray::arr2(&[
            [0.4, 0.4, 0.2],
            [0.4, 0.4, 0.2],
            [0.4, 0.4, 0.2],
            [0.4, 0.4, 0.2],
            [0.4, 0.4, 0.2],
        ]))
        .unwrap();
        let batch = crate::gen::gen_batch(&chain, &behavior, 20_000, 40, 121, 1);
        let cfg = TrainLoopConfig {
            behavior: behavior.clone(),
            candidate: behavior.clone(),
            mu_mix: 0.5,
            eta: 2.0,
            alpha: vec![0.0, 1.0],
            gamma: 0.8,
            iterations: 12,
            minibatch: 0,
            critic_lr: 0.2,
            tau: 1.0,
            kl_lr: 2.0,
            kl_steps: 200,
            seed: 122,
        };
        let report = train_loop(&batch, &cfg).unwrap();
        let j_behavior = expected_return(&chain, &behavior).unwrap();
        let j_final = expected_return(&chain, &report.pi_phi).unwrap();
        assert!(
            j_final >= j_behavior - 1e-9,
            "final {j_final} vs behavior {j_behavior}"
        );
    }
}
