//! Exact cost evaluation on scenario trees by path enumeration, and the best
//! single-stage (spike) deviation from an affine policy.
//!
//! Along the equilibrium path every semantics applies `K_ℓ·X*_ℓ + c_ℓ`. After
//! a spike at stage `k` the deviated wealth `X_ℓ` differs from `X*_ℓ`, and the
//! later controls are `A_ℓ·X_ℓ + (K_ℓ − A_ℓ)·X*_ℓ + c_ℓ` with
//!
//! * open-loop: `A_ℓ = 0` (controls replayed per scenario),
//! * feedback: `A_ℓ = K_ℓ` (controls recomputed on the deviated wealth),
//! * mixed: `A_ℓ = Φ_ℓ` (pure-feedback part recomputed, open-loop part replayed).

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use super::tree::ScenarioTree;
use super::OracleError;
use crate::market::MarketSpec;
use crate::mixed::PureFeedbackPart;
use crate::numerics;
use crate::policy::AffinePolicy;
use crate::scalar::Real;

/// Largest number of leaf paths enumerated by a single evaluation.
pub const MAX_LEAF_PATHS: u64 = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Semantics {
    OpenLoop,
    Feedback,
    Mixed,
}

impl std::fmt::Display for Semantics {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Semantics::OpenLoop => "open-loop",
            Semantics::Feedback => "feedback",
            Semantics::Mixed => "mixed",
        })
    }
}

/// An affine policy together with the rule for continuing after a deviation.
#[derive(Debug, Clone)]
pub struct Continuation<'a, T: Real> {
    policy: &'a AffinePolicy<T>,
    semantics: Semantics,
    /// `A_ℓ`, indexed like the policy.
    refeedback: Vec<DVector<T>>,
}

impl<'a, T: Real> Continuation<'a, T> {
    pub fn open_loop(policy: &'a AffinePolicy<T>) -> Self {
        let refeedback = policy.gains.iter().map(|g| DVector::zeros(g.len())).collect();
        Self {
            policy,
            semantics: Semantics::OpenLoop,
            refeedback,
        }
    }

    pub fn feedback(policy: &'a AffinePolicy<T>) -> Self {
        Self {
            policy,
            semantics: Semantics::Feedback,
            refeedback: policy.gains.clone(),
        }
    }

    pub fn mixed(policy: &'a AffinePolicy<T>, phi: &PureFeedbackPart<T>) -> Result<Self, OracleError> {
        if phi.horizon() < policy.end_stage() {
            return Err(OracleError::Invalid(format!(
                "Φ covers {} stages, policy ends at {}",
                phi.horizon(),
                policy.end_stage()
            )));
        }
        let refeedback = (policy.start_stage..policy.end_stage())
            .map(|k| phi.stage(k).clone())
            .collect();
        Ok(Self {
            policy,
            semantics: Semantics::Mixed,
            refeedback,
        })
    }

    /// Builds the continuation for `semantics`; `phi` is required for mixed.
    pub fn for_semantics(
        policy: &'a AffinePolicy<T>,
        semantics: Semantics,
        phi: Option<&PureFeedbackPart<T>>,
    ) -> Result<Self, OracleError> {
        match semantics {
            Semantics::OpenLoop => Ok(Self::open_loop(policy)),
            Semantics::Feedback => Ok(Self::feedback(policy)),
            Semantics::Mixed => {
                Self::mixed(policy, phi.ok_or(OracleError::Invalid("mixed semantics needs Φ".into()))?)
            }
        }
    }

    pub fn policy(&self) -> &AffinePolicy<T> {
        self.policy
    }

    pub fn semantics(&self) -> Semantics {
        self.semantics
    }
}

/// Conditional mean, variance and cost of terminal wealth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostEvaluation<T> {
    pub mean: T,
    pub variance: T,
    pub cost: T,
}

/// Per-atom scalars of one stage: `o_iᵀK`, `o_iᵀc`, `o_iᵀA`.
struct StageScalars<T> {
    s: T,
    prob: Vec<T>,
    ok: Vec<T>,
    oc: Vec<T>,
    oa: Vec<T>,
}

fn check_coverage<T: Real>(
    tree: &ScenarioTree<T>,
    spec: &MarketSpec<T>,
    policy: &AffinePolicy<T>,
    stage: usize,
) -> Result<(), OracleError> {
    let n = spec.horizon();
    if tree.horizon() != n || tree.num_assets() != spec.num_assets() {
        return Err(OracleError::Invalid(format!(
            "tree covers {} stages of {} assets, market has {n} stages of {} assets",
            tree.horizon(),
            tree.num_assets(),
            spec.num_assets()
        )));
    }
    if stage < policy.start_stage || stage >= n || policy.end_stage() != n {
        return Err(OracleError::Invalid(format!(
            "stage {stage} outside policy stages {}..{}",
            policy.start_stage,
            policy.end_stage()
        )));
    }
    let leaves = tree.leaf_count(stage);
    if leaves > MAX_LEAF_PATHS {
        return Err(OracleError::TooManyLeaves { leaves });
    }
    Ok(())
}

fn stage_scalars<T: Real>(
    tree: &ScenarioTree<T>,
    spec: &MarketSpec<T>,
    cont: &Continuation<'_, T>,
    stage: usize,
) -> StageScalars<T> {
    let atoms = tree.atoms(stage);
    let (k, c, a) = (
        cont.policy.gain(stage),
        cont.policy.offset(stage),
        &cont.refeedback[stage - cont.policy.start_stage],
    );
    StageScalars {
        s: spec.riskless()[stage],
        prob: atoms.iter().map(|x| x.prob).collect(),
        ok: atoms.iter().map(|x| x.excess.dot(k)).collect(),
        oc: atoms.iter().map(|x| x.excess.dot(c)).collect(),
        oa: atoms.iter().map(|x| x.excess.dot(a)).collect(),
    }
}

/// Depth-first accumulation of `Σp·(X_N − shift)` and `Σp·(X_N − shift)²`
/// for every deviated wealth in `devs`, sharing the equilibrium wealth.
#[allow(clippy::too_many_arguments)]
fn accumulate<T: Real>(
    scalars: &[StageScalars<T>],
    prob: T,
    x_star: T,
    devs: &[T],
    shift: T,
    scratch: &mut [Vec<T>],
    acc: &mut [(T, T)],
) {
    let Some((st, rest)) = scalars.split_first() else {
        for (a, &x) in acc.iter_mut().zip(devs) {
            let d = x - shift;
            a.0 += prob * d;
            a.1 += prob * d * d;
        }
        return;
    };
    let (next, tail) = scratch.split_first_mut().expect("one buffer per stage");
    for i in 0..st.prob.len() {
        let xs = (st.s + st.ok[i]) * x_star + st.oc[i];
        // u = A·X + (K − A)·X* + c
        let fixed = (st.ok[i] - st.oa[i]) * x_star + st.oc[i];
        let mult = st.s + st.oa[i];
        for (n, &x) in next.iter_mut().zip(devs) {
            *n = mult * x + fixed;
        }
        accumulate(rest, prob * st.prob[i], xs, next, shift, tail, acc);
    }
}

/// Costs at `(stage, wealth)` when the control at `stage` is replaced by each
/// vector in `spikes` and later stages follow `cont`.
pub fn evaluate_spike_costs<T: Real>(
    tree: &ScenarioTree<T>,
    spec: &MarketSpec<T>,
    cont: &Continuation<'_, T>,
    stage: usize,
    wealth: T,
    spikes: &[DVector<T>],
) -> Result<Vec<CostEvaluation<T>>, OracleError> {
    check_coverage(tree, spec, cont.policy, stage)?;
    let n = spec.horizon();
    let scalars: Vec<StageScalars<T>> =
        (stage + 1..n).map(|l| stage_scalars(tree, spec, cont, l)).collect();
    let s = spec.riskless()[stage];
    let shift = wealth * spec.riskless_product(stage);
    let u_star = cont.policy.action(stage, wealth);
    let p = spikes.len();

    let per_atom: Vec<Vec<(T, T)>> = tree
        .atoms(stage)
        .par_iter()
        .map(|atom| {
            let x_star = s * wealth + atom.excess.dot(&u_star);
            let devs: Vec<T> = spikes.iter().map(|u| s * wealth + atom.excess.dot(u)).collect();
            let mut scratch = vec![vec![T::zero(); p]; scalars.len()];
            let mut acc = vec![(T::zero(), T::zero()); p];
            accumulate(&scalars, atom.prob, x_star, &devs, shift, &mut scratch, &mut acc);
            acc
        })
        .collect();

    let lambda = spec.mu1() * wealth + spec.mu2();
    Ok((0..p)
        .map(|j| {
            let (m1, m2) = per_atom
                .iter()
                .fold((T::zero(), T::zero()), |(a, b), acc| (a + acc[j].0, b + acc[j].1));
            let variance = (m2 - m1 * m1).max(T::zero());
            let mean = m1 + shift;
            CostEvaluation {
                mean,
                variance,
                cost: variance - lambda * mean,
            }
        })
        .collect())
}

/// Cost of following `policy` from `(stage, wealth)`. Without a deviation all
/// continuation semantics coincide.
pub fn evaluate_cost_exact<T: Real>(
    tree: &ScenarioTree<T>,
    spec: &MarketSpec<T>,
    policy: &AffinePolicy<T>,
    stage: usize,
    wealth: T,
) -> Result<CostEvaluation<T>, OracleError> {
    let cont = Continuation::feedback(policy);
    let u = policy.action(stage, wealth);
    Ok(evaluate_spike_costs(tree, spec, &cont, stage, wealth, &[u])?[0])
}

/// Best spike at one node.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeDeviation<T: Real> {
    /// Control prescribed by the policy.
    pub policy_control: DVector<T>,
    /// Minimizer of the fitted quadratic.
    pub best_control: DVector<T>,
    /// Cost under the policy.
    pub j_star: T,
    /// Cost re-evaluated at `best_control`; `−∞` if the quadratic is
    /// unbounded below.
    pub j_dev: T,
    /// Value predicted by the fitted quadratic at `best_control`.
    pub j_model: T,
    /// Eigenvalues of the fitted Hessian, ascending.
    pub hessian_eigenvalues: Vec<T>,
}

impl<T: Real> SpikeDeviation<T> {
    pub fn gap(&self) -> T {
        self.j_dev - self.j_star
    }
}

/// Fits the quadratic `u ↦ J(stage, wealth; u, continuation)` exactly from
/// `1 + m + m(m+1)/2` evaluations around the policy's control and returns
/// its minimizer `u* − H†g`.
pub fn best_spike_deviation<T: Real>(
    tree: &ScenarioTree<T>,
    spec: &MarketSpec<T>,
    cont: &Continuation<'_, T>,
    stage: usize,
    wealth: T,
) -> Result<SpikeDeviation<T>, OracleError> {
    let m = spec.num_assets();
    let u0 = cont.policy.action(stage, wealth);
    let unit = |i: usize| DVector::from_fn(m, |r, _| if r == i { T::one() } else { T::zero() });
    let mut points = vec![u0.clone()];
    for i in 0..m {
        points.push(&u0 + unit(i));
    }
    for i in 0..m {
        points.push(&u0 + unit(i) * T::lit(2.0));
    }
    for i in 0..m {
        for j in i + 1..m {
            points.push(&u0 + unit(i) + unit(j));
        }
    }
    let q: Vec<T> = evaluate_spike_costs(tree, spec, cont, stage, wealth, &points)?
        .iter()
        .map(|e| e.cost)
        .collect();
    let q0 = q[0];
    let q1 = |i: usize| q[1 + i];
    let q2 = |i: usize| q[1 + m + i];
    let mut h = DMatrix::zeros(m, m);
    let mut g = DVector::zeros(m);
    for i in 0..m {
        h[(i, i)] = q2(i) - q1(i) * T::lit(2.0) + q0;
        g[i] = q1(i) - q0 - h[(i, i)] * T::lit(0.5);
    }
    let mut idx = 1 + 2 * m;
    for i in 0..m {
        for j in i + 1..m {
            let v = q[idx] - q1(i) - q1(j) + q0;
            h[(i, j)] = v;
            h[(j, i)] = v;
            idx += 1;
        }
    }

    let eig = numerics::sorted_eigenvalues(&h);
    let scale = q.iter().fold(T::one(), |acc, x| acc.max(x.abs()));
    let tol = T::lit(1e-8).max(T::machine_epsilon() * T::lit(1e4));
    let noise = tol * scale;
    if eig.first().is_some_and(|&l| l < -noise) {
        return Err(OracleError::NonConvex {
            stage,
            min_eigenvalue: eig[0].as_f64(),
        });
    }
    let pinv = numerics::pseudoinverse(&h, T::lit(1e-10).max(T::machine_epsilon() * T::lit(100.0)))?
        .pinv;
    let step = -(&pinv * &g);
    let best = &u0 + &step;
    let j_model = q0 + g.dot(&step) + step.dot(&(&h * &step)) * T::lit(0.5);
    let residual = numerics::range_residual(&h, &pinv, &g);
    let j_dev = if residual > noise.max(tol * g.norm()) {
        T::lit(f64::NEG_INFINITY)
    } else {
        evaluate_spike_costs(tree, spec, cont, stage, wealth, std::slice::from_ref(&best))?[0].cost
    };
    Ok(SpikeDeviation {
        policy_control: u0,
        best_control: best,
        j_star: q0,
        j_dev,
        j_model,
        hessian_eigenvalues: eig,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{derive_excess_moments, preset, MarketParams, EXAMPLE_PRESET};
    use crate::numerics::Tolerances;
    use crate::open_loop::solve_open_loop;
    use crate::oracle::tree::{build_matched_tree, Atom};
    use crate::policy::PolicyKind;

    fn one_stage(s: f64, atoms: &[(f64, f64)], mu1: f64, mu2: f64) -> (MarketSpec<f64>, ScenarioTree<f64>) {
        let mean: f64 = atoms.iter().map(|(p, o)| p * o).sum();
        let var: f64 = atoms.iter().map(|(p, o)| p * (o - mean).powi(2)).sum();
        let spec = MarketSpec::new(MarketParams::stationary(
            1,
            s,
            DVector::from_element(1, s + mean),
            DMatrix::from_element(1, 1, var),
            mu1,
            mu2,
        ))
        .unwrap();
        let tree = ScenarioTree::new(vec![atoms
            .iter()
            .map(|&(p, o)| Atom { prob: p, excess: DVector::from_element(1, o) })
            .collect()])
        .unwrap();
        (spec, tree)
    }

    fn constant(c: f64, stages: usize, m: usize) -> AffinePolicy<f64> {
        AffinePolicy {
            kind: PolicyKind::OpenLoop,
            start_stage: 0,
            gains: vec![DVector::zeros(m); stages],
            offsets: vec![DVector::from_element(m, c); stages],
        }
    }

    #[test]
    fn zero_control_is_deterministic() {
        let (spec, tree) = one_stage(1.03, &[(0.5, -0.1), (0.5, 0.3)], 0.7, 1.1);
        let eval = evaluate_cost_exact(&tree, &spec, &constant(0.0, 1, 1), 0, 2.0).unwrap();
        assert_eq!(eval.variance, 0.0);
        assert!((eval.cost + (0.7 * 2.0 + 1.1) * 1.03 * 2.0).abs() < 1e-14);
    }

    #[test]
    fn constant_control_closed_form() {
        let (spec, tree) = one_stage(1.02, &[(0.25, -0.2), (0.75, 0.2)], 1.0, 1.0);
        let (x, c) = (1.5, 0.8);
        let (mean, var) = (0.1, 0.25 * 0.09 + 0.75 * 0.01);
        let eval = evaluate_cost_exact(&tree, &spec, &constant(c, 1, 1), 0, x).unwrap();
        let want = c * c * var - (x + 1.0) * (1.02 * x + mean * c);
        assert!((eval.cost - want).abs() < 1e-13);
    }

    #[test]
    fn one_stage_minimizer_closed_form() {
        let (spec, tree) = one_stage(1.02, &[(0.5, -0.1), (0.5, 0.3)], 0.6, 1.4);
        let x = 1.2;
        let dev = best_spike_deviation(&tree, &spec, &Continuation::open_loop(&constant(0.0, 1, 1)), 0, x)
            .unwrap();
        let want = (0.6 * x + 1.4) * 0.1 / (2.0 * 0.04);
        assert!((dev.best_control[0] - want).abs() < 1e-9);
        assert!(dev.gap() < 0.0);
    }

    #[test]
    fn open_loop_policy_has_no_profitable_spike() {
        let spec = preset(EXAMPLE_PRESET).unwrap();
        let moments = derive_excess_moments(&spec);
        let sol = solve_open_loop(&moments, &spec, &Tolerances::default()).unwrap();
        let tree = build_matched_tree(&moments, 7, 3).unwrap();
        let cont = Continuation::open_loop(&sol.policy);
        let dev = best_spike_deviation(&tree, &spec, &cont, 0, 1.0).unwrap();
        assert!((&dev.best_control - &dev.policy_control).norm() < 1e-7);
        assert!(dev.gap().abs() < 1e-10);
        assert!((dev.j_model - dev.j_dev).abs() <= 1e-9 * dev.j_dev.abs().max(1.0));
    }

    #[test]
    fn perturbed_policy_fails() {
        let spec = preset(EXAMPLE_PRESET).unwrap();
        let moments = derive_excess_moments(&spec);
        let sol = solve_open_loop(&moments, &spec, &Tolerances::default()).unwrap();
        let mut bad = sol.policy.clone();
        bad.gains[0] *= 1.5;
        let tree = build_matched_tree(&moments, 7, 3).unwrap();
        let dev = best_spike_deviation(&tree, &spec, &Continuation::open_loop(&bad), 0, 1.0).unwrap();
        assert!(dev.gap() < -1e-6);
    }

    #[test]
    fn variance_matches_path_sum() {
        let spec = preset(EXAMPLE_PRESET).unwrap();
        let moments = derive_excess_moments(&spec);
        let sol = solve_open_loop(&moments, &spec, &Tolerances::default()).unwrap();
        let tree = build_matched_tree(&moments, 4, 0).unwrap();
        // explicit path list
        let mut paths = vec![(1.0, 1.0)];
        for k in 0..4 {
            let mut next = Vec::new();
            for &(p, x) in &paths {
                let u = sol.policy.action(k, x);
                for a in tree.atoms(k) {
                    next.push((p * a.prob, 1.04 * x + a.excess.dot(&u)));
                }
            }
            paths = next;
        }
        let mean: f64 = paths.iter().map(|(p, x)| p * x).sum();
        let var: f64 = paths.iter().map(|(p, x)| p * (x - mean).powi(2)).sum();
        let eval = evaluate_cost_exact(&tree, &spec, &sol.policy, 0, 1.0).unwrap();
        assert!((eval.mean - mean).abs() < 1e-12);
        assert!((eval.variance - var).abs() < 1e-12);
        assert!(eval.variance >= 0.0);
    }

    #[test]
    fn leaf_cap_enforced() {
        let spec = MarketSpec::new(MarketParams::stationary(
            9,
            1.0,
            DVector::from_element(1, 1.1),
            DMatrix::from_element(1, 1, 0.04),
            1.0,
            1.0,
        ))
        .unwrap();
        let atoms: Vec<Atom<f64>> = (0..7)
            .map(|i| Atom { prob: 1.0 / 7.0, excess: DVector::from_element(1, i as f64) })
            .collect();
        let tree = ScenarioTree::new(vec![atoms; 9]).unwrap();
        let err = evaluate_cost_exact(&tree, &spec, &constant(0.0, 9, 1), 0, 1.0).unwrap_err();
        assert!(matches!(err, OracleError::TooManyLeaves { .. }));
    }
}
