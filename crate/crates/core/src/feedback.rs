//! Feedback equilibrium strategy `ψ_k(X) = Φ_k·X + v_k`.
//!
//! Backward recursion, with `Õ_k = 𝒮̃_{k+1}·𝔼O_k𝔼O_kᵀ + S̃_{k+1}·Cov(O_k)`,
//! `L̃_k = (s_k𝒮̃_{k+1} + Ũ_{k+1})·𝔼O_k` and `θ̃_k = π̃_{k+1}·𝔼O_k`:
//!
//! ```text
//! Φ_k = −Õ_k†L̃_k            v_k = −Õ_k†θ̃_k
//! a_k = s_k − 𝔼O_kᵀÕ_k†L̃_k  q_k = L̃_kᵀÕ_k†Cov(O_k)Õ_k†L̃_k
//! S̃_k = S̃_{k+1}(a_k² + q_k)  𝒮̃_k = 𝒮̃_{k+1}a_k² + S̃_{k+1}q_k
//! Ũ_k = a_k·Ũ_{k+1}          π̃_k = −β̃_kÕ_k†θ̃_k + a_k·π̃_{k+1}
//! ```
//!
//! The `S̃`, `𝒮̃` update is written in the sum-of-squares form, which keeps
//! `S̃_k ≥ 𝒮̃_k ≥ 0` manifest.

use nalgebra::{DMatrix, DVector};

use crate::market::{ExcessMoments, MarketSpec};
use crate::numerics::{self, Tolerances};
use crate::policy::{
    check_dimensions, AffinePolicy, FailingCondition, NonexistenceReport, PolicyKind, SolveError,
};
use crate::scalar::Real;

/// Scalar sequences hold stages `t..=N`, the rest stages `t..N`; index `i` is
/// stage `t + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackTrace<T: Real> {
    pub start_stage: usize,
    /// `S̃_k`, `S̃_N = 1`.
    pub s_tilde: Vec<T>,
    /// `𝒮̃_k`, `𝒮̃_N = 0`.
    pub scal_tilde: Vec<T>,
    /// `Ũ_k`, `Ũ_N = −μ₁/2`.
    pub u_tilde: Vec<T>,
    /// `π̃_k`, `π̃_N = −μ₂/2`.
    pub pi_tilde: Vec<T>,
    /// Row vectors `β̃_k`, stored as columns.
    pub beta_tilde: Vec<DVector<T>>,
    pub o_tilde: Vec<DMatrix<T>>,
    pub l_tilde: Vec<DVector<T>>,
    pub theta_tilde: Vec<DVector<T>>,
    pub solvable: Vec<bool>,
    pub residual_l: Vec<T>,
    pub residual_theta: Vec<T>,
    /// `s_k − 𝔼O_kᵀÕ_k†L̃_k`.
    pub closed_loop: Vec<T>,
    /// Smallest eigenvalue of `Õ_k`.
    pub o_min_eig: Vec<T>,
}

impl<T: Real> FeedbackTrace<T> {
    pub fn index(&self, stage: usize) -> usize {
        stage - self.start_stage
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackSolution<T: Real> {
    pub policy: AffinePolicy<T>,
    pub trace: FeedbackTrace<T>,
}

impl<T: Real> FeedbackSolution<T> {
    /// `Φ_k`.
    pub fn phi(&self, stage: usize) -> &DVector<T> {
        self.policy.gain(stage)
    }

    /// `v_k`.
    pub fn v(&self, stage: usize) -> &DVector<T> {
        self.policy.offset(stage)
    }
}

/// Closed-loop mean multiplier `s_k − 𝔼O_kᵀÕ_k†L̃_k` at `stage`.
pub fn feedback_stage_closed_loop<T: Real>(trace: &FeedbackTrace<T>, stage: usize) -> T {
    trace.closed_loop[trace.index(stage)]
}

pub fn solve_feedback<T: Real>(
    moments: &ExcessMoments<T>,
    spec: &MarketSpec<T>,
    tol: &Tolerances<T>,
) -> Result<FeedbackSolution<T>, SolveError> {
    check_dimensions(spec, moments)?;
    let n = spec.horizon();
    let t = spec.initial_time();
    let m = spec.num_assets();
    let stages = n - t;
    let half = T::lit(0.5);

    // Under the range condition every stage is solvable, so a failure there
    // is a numerical defect rather than nonexistence.
    let range_holds = crate::market::check_open_loop_existence(moments, t, tol.range)?.overall;

    let mut s_tilde = vec![T::zero(); stages + 1];
    let mut scal_tilde = vec![T::zero(); stages + 1];
    let mut u_tilde = vec![T::zero(); stages + 1];
    let mut pi_tilde = vec![T::zero(); stages + 1];
    s_tilde[stages] = T::one();
    u_tilde[stages] = -spec.mu1() * half;
    pi_tilde[stages] = -spec.mu2() * half;

    let mut beta_tilde = vec![DVector::zeros(m); stages];
    let mut o_tilde = vec![DMatrix::zeros(m, m); stages];
    let mut l_tilde = vec![DVector::zeros(m); stages];
    let mut theta_tilde = vec![DVector::zeros(m); stages];
    let mut solvable = vec![false; stages];
    let mut residual_l = vec![T::zero(); stages];
    let mut residual_theta = vec![T::zero(); stages];
    let mut closed_loop = vec![T::zero(); stages];
    let mut o_min_eig = vec![T::zero(); stages];
    let mut gains = vec![DVector::zeros(m); stages];
    let mut offsets = vec![DVector::zeros(m); stages];

    let fail = |stage: usize, condition: FailingCondition, residual: T| {
        if range_holds {
            SolveError::Internal {
                stage,
                message: format!(
                    "{condition} failed (residual {:e}) although the range condition holds",
                    residual.as_f64()
                ),
            }
        } else {
            SolveError::Nonexistence(NonexistenceReport {
                failing_stage: stage,
                failing_condition: condition,
                residual: residual.as_f64(),
            })
        }
    };

    for k in (t..n).rev() {
        let i = k - t;
        let s = spec.riskless()[k];
        let mean = &moments.mean_excess[k];
        let cov = &moments.cov_excess[k];
        let (big, small, u_next, pi_next) =
            (s_tilde[i + 1], scal_tilde[i + 1], u_tilde[i + 1], pi_tilde[i + 1]);

        if big <= tol.dagger {
            debug_assert!(
                u_next.abs() <= T::lit(1e-8) * T::one().max(spec.mu1())
                    && pi_next.abs() <= T::lit(1e-8) * T::one().max(spec.mu2()),
                "S̃_{} = 0 must force Ũ and π̃ to vanish",
                k + 1
            );
        }

        let o = mean * mean.transpose() * small + cov * big;
        let l = mean * (s * small + u_next);
        let theta = mean * pi_next;

        let eig = numerics::sorted_eigenvalues(&o);
        let (lo, hi) = (eig[0], eig[eig.len() - 1]);
        o_min_eig[i] = lo;
        if lo < -tol.psd * T::one().max(hi) {
            return Err(fail(k, FailingCondition::PsdCondition, -lo));
        }

        let o_pinv = numerics::pseudoinverse(&o, tol.pinv)?.pinv;
        let res_l = numerics::range_residual(&o, &o_pinv, &l);
        let res_theta = numerics::range_residual(&o, &o_pinv, &theta);
        residual_l[i] = res_l;
        residual_theta[i] = res_theta;
        if !numerics::within_range(res_l, &l, tol.range) {
            return Err(fail(k, FailingCondition::SolvabilityL, res_l));
        }
        if !numerics::within_range(res_theta, &theta, tol.range) {
            return Err(fail(k, FailingCondition::SolvabilityTheta, res_theta));
        }
        solvable[i] = true;

        let phi = -(&o_pinv * &l);
        let v = -(&o_pinv * &theta);
        let a = s + mean.dot(&phi);
        let q = phi.dot(&(cov * &phi));
        // β̃_kᵀ = s_k𝒮̃_{k+1}𝔼O_k − Õ_kÕ_k†L̃_k
        let beta = mean * (s * small) + &o * &phi;

        s_tilde[i] = big * (a * a + q);
        scal_tilde[i] = small * a * a + big * q;
        u_tilde[i] = a * u_next;
        pi_tilde[i] = beta.dot(&v) + a * pi_next;

        closed_loop[i] = a;
        beta_tilde[i] = beta;
        o_tilde[i] = o;
        l_tilde[i] = l;
        theta_tilde[i] = theta;
        gains[i] = phi;
        offsets[i] = v;
    }

    let policy = AffinePolicy {
        kind: PolicyKind::Feedback,
        start_stage: t,
        gains,
        offsets,
    };
    if !policy.is_finite() {
        return Err(SolveError::Internal {
            stage: t,
            message: "non-finite feedback strategy".to_string(),
        });
    }
    Ok(FeedbackSolution {
        policy,
        trace: FeedbackTrace {
            start_stage: t,
            s_tilde,
            scal_tilde,
            u_tilde,
            pi_tilde,
            beta_tilde,
            o_tilde,
            l_tilde,
            theta_tilde,
            solvable,
            residual_l,
            residual_theta,
            closed_loop,
            o_min_eig,
        },
    })
}
