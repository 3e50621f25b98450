//! Mixture-of-experts batch reinforcement learning over finite MDPs.
//!
//! The crate is organized around an exact tabular core ([`mdp`]) that every
//! other module uses as ground truth:
//!
//! - [`moe`] — mixture-of-experts policy algebra: composition, the feasible
//!   set of mixture weights, and the anchor-swapping index transform.
//! - [`diffvalue`] — the two difference-value identities relating a mixture
//!   policy to an anchor base policy, checkable against exact evaluation.
//! - [`bounds`] — conservative lower bounds on the return gap (CPI surrogate,
//!   multi-anchor convex combination, TRPO-style, Pinsker relaxation).
//! - [`qp`] — sample-average surrogates from batch data, the concave QP over
//!   mixture weights, its closed-form KKT solution, and the feasibility
//!   projections.
//! - [`critic`] — hybrid on/off-policy Bellman operator, its fixed point, and
//!   batch critics (expected SARSA, Q-learning with a target table).
//! - [`manager`] — the expert-selection MDP built over candidate actions, an
//!   exact oracle manager, and DQN / CQL / model-based manager training.
//! - [`expert`] — toy-scale latent experts: score-function gradients,
//!   REINFORCE with a baseline, posterior fitting, and the label functions.
//! - [`gen`] / [`experiment`] — seeded environment and batch generators,
//!   experiment configs, and CSV emission used by the `moerl` CLI.

// Dense tabular code indexes rows and kernels directly; iterator rewrites of
// those loops read worse.
#![allow(clippy::needless_range_loop)]

pub mod batch;
pub mod bounds;
pub mod critic;
pub mod diffvalue;
pub mod error;
pub mod expert;
pub mod experiment;
pub mod gen;
pub mod linalg;
pub mod manager;
pub mod mdp;
pub mod moe;
pub mod project;
pub mod qp;

pub use batch::{BatchDataset, Transition};
pub use error::{MoeError, Result};
pub use mdp::{
    advantage, expected_return, occupancy, policy_q, policy_value, value_iteration, AdvantageTable,
    Anchor, FiniteMdp, OccupancyMeasure, QFunction, TabularPolicy, ValueFunction,
};
pub use moe::{check_feasible, compose, transform_f, BaseEnsemble, MixtureWeights};
