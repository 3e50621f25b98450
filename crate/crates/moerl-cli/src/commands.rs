//! Subcommand implementations and exit-code mapping.

use anyhow::{bail, Context, Result};
use std::io::Write;
use std::path::{Path, PathBuf};

use moerl::bounds::{alpha_combined_bound, cpi_bound_report, pinsker_bound, trpo_bound};
use moerl::error::MoeError;
use moerl::experiment::{
    read_metrics_csv, report_aggregate, run_experiment, train_manager_with_checkpoints,
    write_metrics_csv, write_report_csv, ExperimentConfig, ManagerMethod,
};
use moerl::gen::{
    gen_batch, gen_feasible_lambda, gen_mood_chain, gen_random_ensemble, gen_random_mdp,
};
use moerl::manager::{gen_moe_batch, MoeEnv};
use moerl::mdp::{policy_value, value_iteration, FiniteMdp, TabularPolicy};
use moerl::moe::BaseEnsemble;
use moerl::BatchDataset;

use crate::Command;

/// 0 success, 2 config error, 3 numerical failure, 4 i/o.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if let Some(moe) = err.downcast_ref::<MoeError>() {
        return match moe {
            MoeError::Config(_)
            | MoeError::InvalidValue { .. }
            | MoeError::ShapeMismatch { .. }
            | MoeError::IndexOutOfRange { .. }
            | MoeError::InvalidDistribution { .. }
            | MoeError::Serde(_) => 2,
            MoeError::Numerical { .. } | MoeError::NoConvergence { .. } | MoeError::Infeasible { .. } => 3,
            MoeError::Io(_) => 4,
        };
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return 4;
    }
    2
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path)
        .with_context(|| format!("creating {}", path.display()))?;
    f.write_all(bytes)?;
    Ok(())
}

fn load_mdp(path: &Path) -> Result<FiniteMdp> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    Ok(FiniteMdp::from_json(&text)?)
}

fn load_policy_list(path: &Path) -> Result<Vec<TabularPolicy>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let tables: Vec<Vec<Vec<f64>>> =
        serde_json::from_str(&text).map_err(|e| MoeError::Config(e.to_string()))?;
    tables
        .into_iter()
        .map(|rows| {
            let n_s = rows.len();
            let n_a = rows.first().map_or(0, |r| r.len());
            let mut probs = ndarray::Array2::zeros((n_s, n_a));
            for (s, row) in rows.iter().enumerate() {
                if row.len() != n_a {
                    bail!("ragged policy table");
                }
                for (a, v) in row.iter().enumerate() {
                    probs[[s, a]] = *v;
                }
            }
            Ok(TabularPolicy::new(probs)?)
        })
        .collect()
}

fn resolve_policy(spec: &str, mdp: &FiniteMdp) -> Result<TabularPolicy> {
    match spec {
        "uniform" => Ok(TabularPolicy::uniform(mdp.n_states(), mdp.n_actions())),
        "optimal" => {
            let (_, pol) = value_iteration(mdp, 1e-10)?;
            Ok(pol)
        }
        other => {
            if let Some(path) = other.strip_prefix("file:") {
                let list = load_policy_list(Path::new(path))?;
                list.into_iter()
                    .next()
                    .ok_or_else(|| MoeError::Config("empty policy file".into()).into())
            } else {
                bail!("unknown policy spec {other:?} (use uniform | optimal | file:<path>)")
            }
        }
    }
}

fn single_batch(path: &Path) -> Result<BatchDataset> {
    let batches = BatchDataset::read_jsonl_file(path)?;
    let mut iter = batches.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| MoeError::Config("empty batch file".into()))?;
    let mut transitions = first.transitions;
    for extra in iter {
        transitions.extend(extra.transitions);
    }
    Ok(BatchDataset::new(transitions, first.source)?)
}

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenEnv { kind, n_states, n_actions, gamma, slip, seed, out } => {
            let mdp = match kind.as_str() {
                "random" => gen_random_mdp(seed, n_states, n_actions, gamma, (-1.0, 1.0)),
                "mood-chain" => gen_mood_chain(n_states.max(2), slip, gamma),
                other => bail!("unknown env kind {other:?} (use random | mood-chain)"),
            };
            write_atomic(&out, mdp.to_json().as_bytes())?;
            println!("wrote {} ({} states, {} actions)", out.display(), mdp.n_states(), mdp.n_actions());
            Ok(())
        }
        Command::GenBatch { env, policy, n, horizon, seed, source, moe, experts, out } => {
            let mdp = load_mdp(&env)?;
            let batch = if moe {
                let experts = match experts {
                    Some(path) => load_policy_list(&path)?,
                    None => moerl::experiment::default_chain_experts(
                        mdp.n_states(),
                        mdp.n_actions(),
                    ),
                };
                let mut env = MoeEnv::new(mdp, experts, Some(horizon), seed)?;
                gen_moe_batch(&mut env, n, horizon, seed.wrapping_add(1), source)?
            } else {
                let pol = resolve_policy(&policy, &mdp)?;
                gen_batch(&mdp, &pol, n, horizon, seed, source)
            };
            write_atomic(&out, batch.to_jsonl_string().as_bytes())?;
            println!("wrote {} ({} transitions)", out.display(), batch.len());
            Ok(())
        }
        Command::EvalBounds {
            env,
            instances,
            m,
            n_states,
            n_actions,
            gamma,
            seed,
            out,
            diff_out,
        } => {
            let mut csv = String::from("instance_id,variant,bound,true_diff,slack\n");
            let mut diff_doc = None;
            for k in 0..instances {
                let inst_seed = seed.wrapping_add(k as u64);
                let mdp = match &env {
                    Some(path) => load_mdp(path)?,
                    None => gen_random_mdp(inst_seed, n_states, n_actions, gamma, (-1.0, 1.0)),
                };
                let ens = gen_random_ensemble(
                    inst_seed.wrapping_add(1_000_000),
                    mdp.n_states(),
                    mdp.n_actions(),
                    m,
                    1e-6,
                );
                let lam = gen_feasible_lambda(inst_seed.wrapping_add(2_000_000), &ens, 0.7);
                let anchor = m - 1;
                let mut reports = vec![
                    cpi_bound_report(&mdp, &ens, &lam, anchor, true)?,
                    cpi_bound_report(&mdp, &ens, &lam, anchor, false)?,
                    alpha_combined_bound(&mdp, &ens, &lam, &vec![1.0 / m as f64; m])?,
                    pinsker_bound(&mdp, &ens, &lam, anchor)?,
                ];
                reports.push(trpo_bound(
                    &mdp,
                    &ens,
                    &lam,
                    &policy_value(&mdp, ens.base(anchor))?.0,
                )?);
                for rep in reports {
                    csv.push_str(&format!(
                        "{k},{},{},{},{}\n",
                        rep.variant, rep.bound, rep.true_diff, rep.slack
                    ));
                }
                if k == 0 && diff_out.is_some() {
                    let report = moerl::diffvalue::difference_report(&mdp, &ens, &lam, anchor)?;
                    diff_doc = Some(serde_json::to_string_pretty(&report)?);
                }
            }
            write_atomic(&out, csv.as_bytes())?;
            if let (Some(path), Some(doc)) = (diff_out, diff_doc) {
                write_atomic(&path, doc.as_bytes())?;
            }
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::OptLambda { batch, env, ensemble, alpha, method, seed, out } => {
            let mdp = load_mdp(&env)?;
            let batches = BatchDataset::read_jsonl_file(&batch)?;
            let alpha: Vec<f64> = alpha
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| MoeError::Config(format!("bad alpha list: {e}")))?;
            let m = alpha.len();
            let ens = match ensemble {
                Some(path) => BaseEnsemble::with_default_floor(load_policy_list(&path)?)?,
                None => gen_random_ensemble(
                    seed.wrapping_add(7),
                    mdp.n_states(),
                    mdp.n_actions(),
                    m,
                    1e-6,
                ),
            };
            if ens.m() != m {
                bail!("alpha has {m} weights but the ensemble has {} bases", ens.m());
            }
            // Per-anchor batches: reuse sources when tagged, else round-robin.
            let mut per_expert: Vec<BatchDataset> = Vec::new();
            for j in 0..m {
                let found = batches.iter().find(|b| b.source == j).cloned();
                per_expert.push(found.unwrap_or_else(|| {
                    let mut b = batches[j % batches.len()].clone();
                    b.source = j;
                    b
                }));
            }
            let advantages: Vec<_> = (0..m)
                .map(|j| {
                    moerl::qp::estimate_advantage_from_batch(
                        &per_expert[j],
                        ens.base(j),
                        mdp.gamma(),
                        0.1,
                        20,
                    )
                    .map(|(a, _)| a)
                })
                .collect::<std::result::Result<_, _>>()?;
            let saa = moerl::qp::build_saa(&per_expert, &ens, &advantages, &alpha, mdp.gamma())?;
            let qp = moerl::qp::assemble_qp(&saa, &ens)?;
            let sol = match method.as_str() {
                "kkt" => moerl::qp::solve_kkt(&qp, 1e-8, 1000)?,
                "pg" => moerl::qp::solve_pg(&qp, 0.0, 1e-10, 200_000, 2)?,
                other => bail!("unknown method {other:?} (use kkt | pg)"),
            };
            let lam = moerl::qp::lambda_tabular(
                &sol.lam_star,
                &qp.index_map,
                mdp.n_states(),
                mdp.n_actions(),
                m,
            );
            let doc = serde_json::json!({
                "method": sol.method.to_string(),
                "objective": sol.objective,
                "kkt_residual": sol.kkt_residual,
                "iterations": sol.iterations,
                "lambda": serde_json::from_str::<serde_json::Value>(&lam.to_json())?,
            });
            write_atomic(&out, serde_json::to_string_pretty(&doc)?.as_bytes())?;
            println!(
                "wrote {} (method {}, objective {:.6e})",
                out.display(),
                sol.method,
                sol.objective
            );
            Ok(())
        }
        Command::TrainCritic { mu, batch, env, behavior, gamma, lr, epochs, out } => {
            let q = match (&batch, &env) {
                (_, Some(env_path)) => {
                    let mdp = load_mdp(env_path)?;
                    let beta = resolve_policy(&behavior, &mdp)?;
                    let cfg = moerl::critic::HybridCriticConfig::new(mu, beta)?;
                    moerl::critic::hybrid_fixed_point(&mdp, &cfg)?.q
                }
                (Some(batch_path), None) => {
                    let b = single_batch(batch_path)?;
                    let n_states = b
                        .transitions
                        .iter()
                        .map(|t| t.s.max(t.sp))
                        .max()
                        .unwrap_or(0)
                        + 1;
                    let n_actions = b
                        .transitions
                        .iter()
                        .flat_map(|t| t.cand.iter().copied())
                        .max()
                        .unwrap_or(0)
                        + 1;
                    let beta = match behavior.as_str() {
                        "uniform" => TabularPolicy::uniform(n_states, n_actions),
                        other => {
                            if let Some(path) = other.strip_prefix("file:") {
                                load_policy_list(Path::new(path))?
                                    .into_iter()
                                    .next()
                                    .ok_or_else(|| MoeError::Config("empty policy file".into()))?
                            } else {
                                bail!("unknown behavior spec {other:?}")
                            }
                        }
                    };
                    if mu == 0.0 {
                        moerl::critic::sarsa_batch(&b, &beta, gamma, lr, epochs)?
                    } else if mu == 1.0 {
                        moerl::critic::q_learning_batch(
                            &b, n_states, n_actions, gamma, lr, epochs, 0.05,
                        )?
                    } else {
                        bail!("batch-only critic supports mu = 0 (SARSA) or mu = 1 (Q-learning); use --env for intermediate mu")
                    }
                }
                (None, None) => bail!("train-critic needs --batch or --env"),
            };
            let rows: Vec<Vec<f64>> = q.0.outer_iter().map(|r| r.to_vec()).collect();
            write_atomic(&out, serde_json::to_string_pretty(&rows)?.as_bytes())?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::TrainManager {
            method,
            env,
            experts,
            batch,
            episodes,
            horizon,
            checkpoints,
            alpha,
            seed,
            out,
        } => {
            let mdp = load_mdp(&env)?;
            let experts = match experts {
                Some(path) => load_policy_list(&path)?,
                None => {
                    moerl::experiment::default_chain_experts(mdp.n_states(), mdp.n_actions())
                }
            };
            let method = match method.as_str() {
                "dqn" => ManagerMethod::Dqn,
                "cql" => ManagerMethod::Cql,
                "mbrl" => ManagerMethod::Mbrl,
                other => bail!("unknown method {other:?} (use dqn | cql | mbrl)"),
            };
            // An explicit batch overrides the internally generated one.
            let rows = if let Some(batch_path) = batch {
                let b = single_batch(&batch_path)?;
                moerl::experiment::train_manager_from_batch(
                    &mdp,
                    &experts,
                    &b,
                    method,
                    episodes,
                    horizon,
                    checkpoints,
                    alpha,
                    seed,
                )?
            } else {
                train_manager_with_checkpoints(
                    &mdp,
                    &experts,
                    method,
                    episodes,
                    horizon,
                    checkpoints,
                    alpha,
                    seed,
                )?
            };
            let mut csv = String::from("iter,return_estimate,bellman_residual,cql_gap\n");
            for (iter, ret, residual, gap) in &rows {
                csv.push_str(&format!("{iter},{ret},{residual},{gap}\n"));
            }
            write_atomic(&out, csv.as_bytes())?;
            if let Some((_, ret, _, _)) = rows.last() {
                println!("wrote {} (final return {ret:.6})", out.display());
            }
            Ok(())
        }
        Command::Run { config, out } => {
            let text = std::fs::read_to_string(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            let cfg = ExperimentConfig::from_json(&text)?;
            let (rows, summary) = run_experiment(&cfg)?;
            let metrics_path = resolve_out(&out, cfg.out_metrics.as_deref(), "metrics.csv");
            let summary_path = resolve_out(&out, cfg.out_summary.as_deref(), "summary.json");
            let mut buf = Vec::new();
            write_metrics_csv(&mut buf, &rows)?;
            write_atomic(&metrics_path, &buf)?;
            write_atomic(
                &summary_path,
                serde_json::to_string_pretty(&summary)?.as_bytes(),
            )?;
            println!("wrote {} and {}", metrics_path.display(), summary_path.display());
            Ok(())
        }
        Command::Report { metrics, out } => {
            let text = std::fs::read_to_string(&metrics)
                .with_context(|| format!("reading {}", metrics.display()))?;
            let rows = read_metrics_csv(&text)?;
            let agg = report_aggregate(&rows);
            let mut buf = Vec::new();
            write_report_csv(&mut buf, &agg)?;
            write_atomic(&out, &buf)?;
            println!("wrote {} ({} groups)", out.display(), agg.len());
            Ok(())
        }
    }
}

fn resolve_out(dir: &Path, configured: Option<&str>, default: &str) -> PathBuf {
    match configured {
        Some(p) => {
            let path = Path::new(p);
            if path.is_absolute() {
                path.to_path_buf()
            } else {
                dir.join(path)
            }
        }
        None => dir.join(default),
    }
}
