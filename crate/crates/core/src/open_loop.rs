//! Open-loop equilibrium control.
//!
//! The backward recursion runs over the combined scalar `Ŝ_k + T̂_k`; the
//! gain and offset vectors have closed forms
//! `L̂_k = −(μ₁/2)·s_{k+1}⋯s_{N−1}·𝔼O_k` and `θ̂_k = (μ₂/μ₁)·L̂_k`, and the
//! control is `v_k = −Ô_k†L̂_k·X_k − Ô_k†θ̂_k` with `Ô_k = (Ŝ+T̂)_{k+1}·Cov(O_k)`.
//! An open-loop equilibrium exists iff `𝔼O_k ∈ Ran(Cov(O_k))` at every stage.

use nalgebra::{DMatrix, DVector};

use crate::market::{ExcessMoments, MarketSpec};
use crate::numerics::{self, Tolerances};
use crate::policy::{
    self, check_dimensions, AffinePolicy, FailingCondition, NonexistenceReport, PolicyKind,
    SolveError,
};
use crate::scalar::Real;

/// Backward-recursion quantities. Scalar sequences hold stages `t..=N`,
/// matrix/vector sequences hold stages `t..N`; index `i` is stage `t + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct OpenLoopTrace<T: Real> {
    pub start_stage: usize,
    /// `Ŝ_k + T̂_k`, with `Ŝ_N + T̂_N = 1`.
    pub st_sum: Vec<T>,
    /// `Ŝ_k = s_k²·Ŝ_{k+1}`.
    pub s_hat: Vec<T>,
    /// `Û_k = s_k·Û_{k+1}`, `Û_N = −μ₁/2`.
    pub u_hat: Vec<T>,
    /// `π̂_k = s_k·π̂_{k+1}`, `π̂_N = −μ₂/2`.
    pub pi_hat: Vec<T>,
    pub o_hat: Vec<DMatrix<T>>,
    pub l_hat: Vec<DVector<T>>,
    pub theta_hat: Vec<DVector<T>>,
    pub range_ok: Vec<bool>,
    pub range_residual: Vec<T>,
}

impl<T: Real> OpenLoopTrace<T> {
    pub fn index(&self, stage: usize) -> usize {
        stage - self.start_stage
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpenLoopSolution<T: Real> {
    pub policy: AffinePolicy<T>,
    pub trace: OpenLoopTrace<T>,
}

pub fn solve_open_loop<T: Real>(
    moments: &ExcessMoments<T>,
    spec: &MarketSpec<T>,
    tol: &Tolerances<T>,
) -> Result<OpenLoopSolution<T>, SolveError> {
    check_dimensions(spec, moments)?;
    let n = spec.horizon();
    let t = spec.initial_time();
    let half = T::lit(0.5);
    let stages = n - t;

    let mut st_sum = vec![T::zero(); stages + 1];
    let mut s_hat = vec![T::zero(); stages + 1];
    let mut u_hat = vec![T::zero(); stages + 1];
    let mut pi_hat = vec![T::zero(); stages + 1];
    st_sum[stages] = T::one();
    s_hat[stages] = T::one();
    u_hat[stages] = -spec.mu1() * half;
    pi_hat[stages] = -spec.mu2() * half;

    let m = spec.num_assets();
    let mut o_hat = vec![DMatrix::zeros(m, m); stages];
    let mut l_hat = vec![DVector::zeros(m); stages];
    let mut theta_hat = vec![DVector::zeros(m); stages];
    let mut range_ok = vec![false; stages];
    let mut range_residual = vec![T::zero(); stages];
    let mut gains = vec![DVector::zeros(m); stages];
    let mut offsets = vec![DVector::zeros(m); stages];

    for k in (t..n).rev() {
        let i = k - t;
        let s = spec.riskless()[k];
        let mean = &moments.mean_excess[k];
        let cov = &moments.cov_excess[k];
        let next = st_sum[i + 1];
        if !(next > T::zero()) {
            return Err(SolveError::Internal {
                stage: k,
                message: format!("Ŝ+T̂ at stage {} is {next}, expected > 0", k + 1),
            });
        }

        let check = numerics::range_membership(mean, cov, tol.range)?;
        range_ok[i] = check.member;
        range_residual[i] = check.residual;
        if !check.member {
            return Err(SolveError::Nonexistence(NonexistenceReport {
                failing_stage: k,
                failing_condition: FailingCondition::RangeCondition,
                residual: check.residual.as_f64(),
            }));
        }

        let tail = spec.riskless_product(k + 1);
        let l = mean * (-spec.mu1() * half * tail);
        let theta = mean * (-spec.mu2() * half * tail);
        let o = cov * next;
        let o_pinv = numerics::pseudoinverse(&o, tol.pinv)?.pinv;
        let gain = -(&o_pinv * &l);
        let offset = -(&o_pinv * &theta);

        st_sum[i] = next * s * s + s * next * mean.dot(&gain);
        s_hat[i] = s * s * s_hat[i + 1];
        u_hat[i] = s * u_hat[i + 1];
        pi_hat[i] = s * pi_hat[i + 1];

        o_hat[i] = o;
        l_hat[i] = l;
        theta_hat[i] = theta;
        gains[i] = gain;
        offsets[i] = offset;
    }

    if let Some(i) = st_sum.iter().position(|v| !(*v > T::zero())) {
        return Err(SolveError::Internal {
            stage: t + i,
            message: "Ŝ+T̂ lost positivity".to_string(),
        });
    }

    let policy = AffinePolicy {
        kind: PolicyKind::OpenLoop,
        start_stage: t,
        gains,
        offsets,
    };
    if !policy.is_finite() {
        return Err(SolveError::Internal {
            stage: t,
            message: "non-finite open-loop policy".to_string(),
        });
    }
    Ok(OpenLoopSolution {
        policy,
        trace: OpenLoopTrace {
            start_stage: t,
            st_sum,
            s_hat,
            u_hat,
            pi_hat,
            o_hat,
            l_hat,
            theta_hat,
            range_ok,
            range_residual,
        },
    })
}

/// `(a_k, b_k)` with `𝔼X*_{k+1} = a_k·𝔼X*_k + b_k` along the equilibrium,
/// `a_k = s_k − 𝔼O_kᵀÔ_k†L̂_k`, `b_k = −𝔼O_kᵀÔ_k†θ̂_k`.
pub fn equilibrium_wealth_coefficients<T: Real>(
    solution: &OpenLoopSolution<T>,
    spec: &MarketSpec<T>,
    moments: &ExcessMoments<T>,
) -> Vec<(T, T)> {
    policy::mean_wealth_coefficients(&solution.policy, spec, moments)
}
