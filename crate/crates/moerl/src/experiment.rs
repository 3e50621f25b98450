//! Experiment configuration, orchestration, and CSV emission.
//!
//! Configs are strict JSON documents (unknown keys are an error). Metrics go
//! to a long-format CSV (`experiment,seed,metric,iteration,value`, RFC 4180
//! quoting, LF newlines); `report` aggregates mean/std across trial seeds.

use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::bounds::{alpha_combined_bound, cpi_bound_report, pinsker_bound, trpo_bound};
use crate::error::{MoeError, Result};
use crate::gen::{
    gen_batch, gen_feasible_lambda, gen_mood_chain, gen_random_ensemble, gen_random_mdp,
    gen_random_policy,
};
use crate::manager::{
    cql_gap, cql_manager, dqn_manager, evaluate_manager, gen_moe_batch,
    mbrl_manager, oracle_manager, BatchTrainConfig, EpsilonSchedule, MbrlConfig, MoeEnv,
    ManagerQ, MoeLayout,
};
use crate::mdp::{policy_value, FiniteMdp, TabularPolicy};

/// One long-format metrics record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub experiment: String,
    pub seed: u64,
    pub metric: String,
    pub iteration: usize,
    pub value: f64,
}

fn csv_escape(field: &str) -> String {
    if field.contains(',') || field.contains('"') || field.contains('\n') {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[MetricsRow]) -> Result<()> {
    w.write_all(b"experiment,seed,metric,iteration,value\n")?;
    for r in rows {
        if !r.value.is_finite() {
            return Err(MoeError::Config(format!(
                "non-finite metric value for {} / {}",
                r.experiment, r.metric
            )));
        }
        writeln!(
            w,
            "{},{},{},{},{}",
            csv_escape(&r.experiment),
            r.seed,
            csv_escape(&r.metric),
            r.iteration,
            r.value
        )?;
    }
    Ok(())
}

/// Parse a long-format metrics CSV, rejecting malformed rows with their line
/// numbers.
pub fn read_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 {
            if line != "experiment,seed,metric,iteration,value" {
                return Err(MoeError::Config(format!("line 1: unexpected header {line:?}")));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields = split_csv_line(line)
            .ok_or_else(|| MoeError::Config(format!("line {}: bad quoting", lineno + 1)))?;
        if fields.len() != 5 {
            return Err(MoeError::Config(format!(
                "line {}: expected 5 fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let parse_err =
            |what: &str| MoeError::Config(format!("line {}: bad {what}", lineno + 1));
        rows.push(MetricsRow {
            experiment: fields[0].clone(),
            seed: fields[1].parse().map_err(|_| parse_err("seed"))?,
            metric: fields[2].clone(),
            iteration: fields[3].parse().map_err(|_| parse_err("iteration"))?,
            value: fields[4].parse().map_err(|_| parse_err("value"))?,
        });
    }
    Ok(rows)
}

fn split_csv_line(line: &str) -> Option<Vec<String>> {
    let mut fields = Vec::new();
    let mut cur = String::new();
    let mut chars = line.chars().peekable();
    let mut quoted = false;
    while let Some(c) = chars.next() {
        if quoted {
            if c == '"' {
                if chars.peek() == Some(&'"') {
                    chars.next();
                    cur.push('"');
                } else {
                    quoted = false;
                }
            } else {
                cur.push(c);
            }
        } else if c == '"' {
            if !cur.is_empty() {
                return None;
            }
            quoted = true;
        } else if c == ',' {
            fields.push(std::mem::take(&mut cur));
        } else {
            cur.push(c);
        }
    }
    if quoted {
        return None;
    }
    fields.push(cur);
    Some(fields)
}

/// Aggregated statistics per (metric, iteration): mean and population std
/// across trial seeds.
pub fn report_aggregate(rows: &[MetricsRow]) -> Vec<(String, usize, f64, f64, usize)> {
    let mut groups: std::collections::BTreeMap<(String, usize), Vec<f64>> =
        std::collections::BTreeMap::new();
    for r in rows {
        groups
            .entry((r.metric.clone(), r.iteration))
            .or_default()
            .push(r.value);
    }
    groups
        .into_iter()
        .map(|((metric, iteration), vals)| {
            let n = vals.len();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            (metric, iteration, mean, var.sqrt(), n)
        })
        .collect()
}

pub fn write_report_csv<W: Write>(
    mut w: W,
    aggregated: &[(String, usize, f64, f64, usize)],
) -> Result<()> {
    w.write_all(b"metric,iteration,mean,std,n\n")?;
    for (metric, iteration, mean, std, n) in aggregated {
        writeln!(w, "{},{iteration},{mean},{std},{n}", csv_escape(metric))?;
    }
    Ok(())
}

/// Environment specification inside a config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EnvSpec {
    Random {
        n_states: usize,
        n_actions: usize,
        gamma: f64,
        #[serde(default = "default_reward_range")]
        reward_range: (f64, f64),
    },
    MoodChain {
        n_levels: usize,
        slip: f64,
        gamma: f64,
    },
    File {
        path: String,
    },
}

fn default_reward_range() -> (f64, f64) {
    (-1.0, 1.0)
}

impl EnvSpec {
    pub fn build(&self, seed: u64) -> Result<FiniteMdp> {
        match self {
            EnvSpec::Random { n_states, n_actions, gamma, reward_range } => {
                Ok(gen_random_mdp(seed, *n_states, *n_actions, *gamma, *reward_range))
            }
            EnvSpec::MoodChain { n_levels, slip, gamma } => {
                Ok(gen_mood_chain(*n_levels, *slip, *gamma))
            }
            EnvSpec::File { path } => {
                let text = std::fs::read_to_string(path)?;
                FiniteMdp::from_json(&text)
            }
        }
    }
}

/// Method block of a config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MethodSpec {
    /// Bound validity sweep over seeded (ensemble, lambda) instances.
    Bounds {
        m: usize,
        #[serde(default = "default_floor")]
        support_floor: f64,
        #[serde(default = "default_scale")]
        lambda_scale: f64,
    },
    /// Mixture QP on generated batches: KKT vs projected gradient.
    Qp {
        m: usize,
        batch_size: usize,
        #[serde(default = "default_alpha_uniform")]
        alpha: Vec<f64>,
    },
    /// Hybrid critic fixed points across a mu grid.
    Critic { mu_grid: Vec<f64> },
    /// Manager training on the expert-selection MDP.
    Manager {
        method: ManagerMethod,
        episodes: usize,
        #[serde(default = "default_horizon")]
        horizon: usize,
        #[serde(default = "default_checkpoints")]
        checkpoints: usize,
        #[serde(default)]
        alpha: f64,
        /// Use only the first k of the default experts (forced choice at 1).
        #[serde(default)]
        n_experts: Option<usize>,
    },
}

fn default_floor() -> f64 {
    1e-6
}

fn default_scale() -> f64 {
    0.7
}

fn default_alpha_uniform() -> Vec<f64> {
    vec![]
}

fn default_horizon() -> usize {
    5
}

fn default_checkpoints() -> usize {
    5
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ManagerMethod {
    Dqn,
    Cql,
    Mbrl,
}

/// A strict experiment configuration document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub id: String,
    pub env: EnvSpec,
    pub method: MethodSpec,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub out_metrics: Option<String>,
    #[serde(default)]
    pub out_summary: Option<String>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| MoeError::Config(e.to_string()))?;
        if cfg.seeds.is_empty() {
            return Err(MoeError::Config("config needs at least one trial seed".into()));
        }
        Ok(cfg)
    }
}

/// Chain experts used by manager experiments: the middle expert mirrors a
/// primitive (stay), the others push up or down.
pub fn default_chain_experts(n_states: usize, n_actions: usize) -> Vec<TabularPolicy> {
    let mut experts = Vec::new();
    for a in [1usize, 0, 2] {
        if a < n_actions {
            experts.push(TabularPolicy::deterministic(n_actions, &vec![a; n_states]).unwrap());
        }
    }
    if experts.is_empty() {
        experts.push(TabularPolicy::uniform(n_states, n_actions));
    }
    experts
}

/// Run a config: returns metric rows and a JSON summary document.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(Vec<MetricsRow>, serde_json::Value)> {
    let mut rows = Vec::new();
    let mut summary = serde_json::Map::new();
    summary.insert("id".into(), cfg.id.clone().into());
    match &cfg.method {
        MethodSpec::Bounds { m, support_floor, lambda_scale } => {
            let mut min_slack = f64::INFINITY;
            for (k, &seed) in cfg.seeds.iter().enumerate() {
                let mdp = cfg.env.build(seed)?;
                let ens = gen_random_ensemble(
                    seed.wrapping_add(1_000_000),
                    mdp.n_states(),
                    mdp.n_actions(),
                    *m,
                    *support_floor,
                );
                let lam = gen_feasible_lambda(seed.wrapping_add(2_000_000), &ens, *lambda_scale);
                let anchor = *m - 1;
                let mut reports = vec![
                    cpi_bound_report(&mdp, &ens, &lam, anchor, true)?,
                    alpha_combined_bound(&mdp, &ens, &lam, &vec![1.0 / *m as f64; *m])?,
                    pinsker_bound(&mdp, &ens, &lam, anchor)?,
                ];
                for w in [
                    ndarray::Array1::zeros(mdp.n_states()),
                    policy_value(&mdp, ens.base(anchor))?.0,
                ] {
                    reports.push(trpo_bound(&mdp, &ens, &lam, &w)?);
                }
                for rep in reports {
                    min_slack = min_slack.min(rep.slack);
                    for (name, value) in [
                        ("bound", rep.bound),
                        ("true_diff", rep.true_diff),
                        ("slack", rep.slack),
                    ] {
                        rows.push(MetricsRow {
                            experiment: cfg.id.clone(),
                            seed,
                            metric: format!("{name}:{}", rep.variant),
                            iteration: k,
                            value,
                        });
                    }
                }
            }
            summary.insert("min_slack".into(), min_slack.into());
        }
        MethodSpec::Qp { m, batch_size, alpha } => {
            let alpha = if alpha.is_empty() {
                vec![1.0 / *m as f64; *m]
            } else {
                alpha.clone()
            };
            let mut kkt_count = 0usize;
            for &seed in &cfg.seeds {
                let mdp = cfg.env.build(seed)?;
                let ens = gen_random_ensemble(
                    seed.wrapping_add(3_000_000),
                    mdp.n_states(),
                    mdp.n_actions(),
                    *m,
                    1e-6,
                );
                let batches: Vec<_> = (0..*m)
                    .map(|j| {
                        gen_batch(
                            &mdp,
                            ens.base(j),
                            *batch_size,
                            20,
                            seed.wrapping_add(4_000_000 + j as u64),
                            j,
                        )
                    })
                    .collect();
                let advs: Vec<_> = (0..*m)
                    .map(|j| {
                        crate::qp::estimate_advantage_from_batch(
                            &batches[j],
                            ens.base(j),
                            mdp.gamma(),
                            0.1,
                            20,
                        )
                        .map(|(a, _)| a)
                    })
                    .collect::<Result<_>>()?;
                let saa = crate::qp::build_saa(&batches, &ens, &advs, &alpha, mdp.gamma())?;
                let qp = crate::qp::assemble_qp(&saa, &ens)?;
                let sol = crate::qp::solve_kkt(&qp, 1e-8, 1000)?;
                if sol.method == crate::qp::SolveMethod::KktClosedForm {
                    kkt_count += 1;
                }
                rows.push(MetricsRow {
                    experiment: cfg.id.clone(),
                    seed,
                    metric: "objective".into(),
                    iteration: 0,
                    value: sol.objective,
                });
                rows.push(MetricsRow {
                    experiment: cfg.id.clone(),
                    seed,
                    metric: "kkt_residual".into(),
                    iteration: 0,
                    value: sol.kkt_residual,
                });
            }
            summary.insert("kkt_closed_form_count".into(), kkt_count.into());
        }
        MethodSpec::Critic { mu_grid } => {
            for &seed in &cfg.seeds {
                let mdp = cfg.env.build(seed)?;
                let behavior =
                    gen_random_policy(seed.wrapping_add(5_000_000), mdp.n_states(), mdp.n_actions());
                for (i, &mu) in mu_grid.iter().enumerate() {
                    let cfg_h = crate::critic::HybridCriticConfig::new(mu, behavior.clone())?;
                    let fp = crate::critic::hybrid_fixed_point(&mdp, &cfg_h)?;
                    let v0 = mdp.initial_dist().dot(&fp.v.0);
                    rows.push(MetricsRow {
                        experiment: cfg.id.clone(),
                        seed,
                        metric: "hybrid_value".into(),
                        iteration: i,
                        value: v0,
                    });
                }
            }
        }
        MethodSpec::Manager { method, episodes, horizon, checkpoints, alpha, n_experts } => {
            let mut final_returns = Vec::new();
            let mut oracle_value = 0.0;
            for &seed in &cfg.seeds {
                let mdp = cfg.env.build(seed)?;
                let mut experts = default_chain_experts(mdp.n_states(), mdp.n_actions());
                if let Some(k) = n_experts {
                    if *k == 0 || *k > experts.len() {
                        return Err(MoeError::Config(format!(
                            "n_experts must be in 1..={}",
                            experts.len()
                        )));
                    }
                    experts.truncate(*k);
                }
                let oracle = oracle_manager(&mdp, &experts, 1e-10, 100_000)?;
                oracle_value = oracle.expected_return;
                let manager_rows = train_manager_with_checkpoints(
                    &mdp,
                    &experts,
                    *method,
                    *episodes,
                    *horizon,
                    *checkpoints,
                    *alpha,
                    seed,
                )?;
                let mut last_return = f64::NAN;
                for (iter, ret, residual, gap) in manager_rows {
                    last_return = ret;
                    for (name, value) in [
                        ("return_estimate", ret),
                        ("bellman_residual", residual),
                        ("cql_gap", gap),
                    ] {
                        rows.push(MetricsRow {
                            experiment: cfg.id.clone(),
                            seed,
                            metric: name.into(),
                            iteration: iter,
                            value,
                        });
                    }
                }
                final_returns.push(last_return);
            }
            let mean_final =
                final_returns.iter().sum::<f64>() / final_returns.len().max(1) as f64;
            summary.insert("oracle_value".into(), oracle_value.into());
            summary.insert("mean_final_return".into(), mean_final.into());
        }
    }
    summary.insert("rows".into(), rows.len().into());
    Ok((rows, serde_json::Value::Object(summary)))
}

/// Mean absolute TD error of a manager Q table over a batch.
pub fn manager_bellman_residual(
    q: &ManagerQ,
    batch: &crate::batch::BatchDataset,
    layout: &MoeLayout,
    gamma: f64,
) -> Result<f64> {
    let mut acc = 0.0;
    for t in &batch.transitions {
        let (s, cands) = layout.decode(t.s);
        let (sp, next_cands) = layout.decode(t.sp);
        let chosen = q.expert_value(s, &cands, t.a);
        let target = t.r + gamma * q.greedy_value(sp, &next_cands);
        acc += (target - chosen).abs();
    }
    Ok(acc / batch.len().max(1) as f64)
}

/// Train a manager with evaluation checkpoints; deterministic prefix re-runs
/// keep every checkpoint on the same seeded trajectory. Returns
/// (iteration, exact greedy return, bellman residual, cql gap) per checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn train_manager_with_checkpoints(
    mdp: &FiniteMdp,
    experts: &[TabularPolicy],
    method: ManagerMethod,
    budget: usize,
    horizon: usize,
    checkpoints: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<(usize, f64, f64, f64)>> {
    let mut env = MoeEnv::new(mdp.clone(), experts.to_vec(), Some(horizon), seed)?;
    let batch = gen_moe_batch(&mut env, budget.max(1000), horizon, seed.wrapping_add(1), 0)?;
    train_manager_from_batch(
        mdp, experts, &batch, method, budget, horizon, checkpoints, alpha, seed,
    )
}

/// Checkpointed manager training against a supplied expert-selection batch
/// (DQN still trains online; CQL and MBRL consume the batch).
#[allow(clippy::too_many_arguments)]
pub fn train_manager_from_batch(
    mdp: &FiniteMdp,
    experts: &[TabularPolicy],
    batch: &crate::batch::BatchDataset,
    method: ManagerMethod,
    budget: usize,
    horizon: usize,
    checkpoints: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<(usize, f64, f64, f64)>> {
    let gamma = mdp.gamma();
    let layout = MoeLayout { n_actions: mdp.n_actions(), n_experts: experts.len() };
    let mut out = Vec::new();
    let checkpoints = checkpoints.max(1);
    for i in 1..=checkpoints {
        let portion = budget * i / checkpoints;
        let q = match method {
            ManagerMethod::Dqn => {
                let mut env =
                    MoeEnv::new(mdp.clone(), experts.to_vec(), Some(horizon), seed)?;
                dqn_manager(
                    &mut env,
                    portion.max(1),
                    horizon,
                    gamma,
                    0.2,
                    0.05,
                    EpsilonSchedule { start: 1.0, end: 0.05, decay_steps: budget * horizon / 2 },
                    seed.wrapping_add(2),
                )?
            }
            ManagerMethod::Cql => {
                let cfg = BatchTrainConfig {
                    gamma,
                    lr: 0.2,
                    tau: 0.05,
                    steps: (portion * horizon).max(1),
                    seed: seed.wrapping_add(3),
                };
                cql_manager(batch, &layout, alpha, &cfg)?
            }
            ManagerMethod::Mbrl => {
                let cfg = MbrlConfig {
                    rollout_budget: (portion * horizon).max(1),
                    rollout_horizon: horizon.max(20),
                    gamma,
                    lr: 0.0,
                    smoothing: 1.0,
                    seed: seed.wrapping_add(4),
                };
                mbrl_manager(batch, &layout, mdp.n_states(), &cfg)?
            }
        };
        let ret = evaluate_manager(
            mdp,
            experts,
            |s, cands| q.select_expert(s, cands),
            1e-10,
            100_000,
        )?;
        let residual = manager_bellman_residual(&q, batch, &layout, gamma)?;
        let gap = cql_gap(&q, batch, &layout)?;
        out.push((i, ret, residual, gap));
    }
    Ok(out)
}
