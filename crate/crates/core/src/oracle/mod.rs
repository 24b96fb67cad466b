//! Ground truth for the solvers: exact costs on finite scenario trees,
//! verification of the equilibrium inequalities against every single-stage
//! deviation, and Monte Carlo simulation.

pub mod exact;
pub mod instances;
pub mod monte_carlo;
pub mod tree;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

pub use exact::{
    best_spike_deviation, evaluate_cost_exact, evaluate_spike_costs, Continuation, CostEvaluation,
    Semantics, SpikeDeviation, MAX_LEAF_PATHS,
};
pub use instances::random_solvable_instance;
pub use monte_carlo::{simulate_monte_carlo, ReturnDistribution, SimulationSummary};
pub use tree::{build_matched_tree, Atom, ScenarioTree};

use crate::market::MarketSpec;
use crate::numerics::NumericsError;
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("stage {stage}: {requested} atoms cannot match a rank-{} covariance (need {required})", required - 1)]
    InfeasibleTree {
        stage: usize,
        requested: usize,
        required: usize,
    },
    #[error("invalid scenario tree: {0}")]
    InvalidTree(String),
    #[error("{leaves} leaf paths exceed the enumeration cap of {MAX_LEAF_PATHS}")]
    TooManyLeaves { leaves: u64 },
    #[error("deviation cost is not convex at stage {stage} (Hessian eigenvalue {min_eigenvalue:e})")]
    NonConvex { stage: usize, min_eigenvalue: f64 },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Outcome of the best spike deviation at one node.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviationReport {
    pub stage: usize,
    /// Index of the node among the stage's nodes, in lexicographic atom order.
    pub node: u64,
    /// Equilibrium wealth at the node.
    pub wealth: f64,
    pub j_star: f64,
    pub j_dev: f64,
    pub gap: f64,
    pub tol: f64,
    pub passed: bool,
    pub semantics: Semantics,
    /// Best deviating control minus the policy's control.
    pub deviation: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    pub semantics: Semantics,
    pub records: Vec<DeviationReport>,
    pub min_gap: f64,
    /// Smallest `gap / tol`; the check passes iff it is at least `−1`.
    pub min_scaled_gap: f64,
    pub passed: bool,
}

impl VerificationReport {
    pub fn failures(&self) -> impl Iterator<Item = &DeviationReport> {
        self.records.iter().filter(|r| !r.passed)
    }
}

/// Checks the equilibrium inequality at every node reachable from the
/// policy's start stage: no single-stage deviation may lower the cost by more
/// than `rel_tol · max(1, |J*|)`.
pub fn verify_equilibrium<T: Real>(
    tree: &ScenarioTree<T>,
    spec: &MarketSpec<T>,
    cont: &Continuation<'_, T>,
    rel_tol: T,
) -> Result<VerificationReport, OracleError> {
    let policy = cont.policy();
    let t = policy.start_stage;
    let n = spec.horizon();
    if tree.horizon() != n {
        return Err(OracleError::Invalid("tree does not cover the market horizon".into()));
    }
    let total_nodes: u64 = (t..n).map(|k| tree.node_count(t, k)).fold(0, u64::saturating_add);
    if total_nodes > MAX_LEAF_PATHS {
        return Err(OracleError::TooManyLeaves {
            leaves: total_nodes,
        });
    }

    let mut records = Vec::new();
    let mut wealth = vec![spec.initial_wealth()];
    for k in t..n {
        let stage_records: Vec<DeviationReport> = wealth
            .par_iter()
            .enumerate()
            .map(|(node, &x)| {
                let dev = best_spike_deviation(tree, spec, cont, k, x)?;
                let j_star = dev.j_star.as_f64();
                let gap = dev.gap().as_f64();
                let tol = rel_tol.as_f64() * j_star.abs().max(1.0);
                Ok(DeviationReport {
                    stage: k,
                    node: node as u64,
                    wealth: x.as_f64(),
                    j_star,
                    j_dev: dev.j_dev.as_f64(),
                    gap,
                    tol,
                    passed: gap >= -tol,
                    semantics: cont.semantics(),
                    deviation: (&dev.best_control - &dev.policy_control)
                        .iter()
                        .map(|v| v.as_f64())
                        .collect(),
                })
            })
            .collect::<Result<_, OracleError>>()?;
        records.extend(stage_records);
        if k + 1 < n {
            let s = spec.riskless()[k];
            wealth = wealth
                .iter()
                .flat_map(|&x| {
                    let u = policy.action(k, x);
                    tree.atoms(k).iter().map(move |a| s * x + a.excess.dot(&u))
                })
                .collect();
        }
    }
    let min_gap = records.iter().map(|r| r.gap).fold(f64::INFINITY, f64::min);
    let min_scaled_gap = records
        .iter()
        .map(|r| r.gap / r.tol)
        .fold(f64::INFINITY, f64::min);
    Ok(VerificationReport {
        semantics: cont.semantics(),
        passed: records.iter().all(|r| r.passed),
        records,
        min_gap,
        min_scaled_gap,
    })
}
