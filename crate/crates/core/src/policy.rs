//! Affine portfolio rules `u_k = K_k·X_k + c_k` and solver failure reports.

use nalgebra::DVector;
use serde::Serialize;
use thiserror::Error;

use crate::market::{ExcessMoments, MarketError, MarketSpec};
use crate::numerics::NumericsError;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum PolicyKind {
    OpenLoop,
    Feedback,
    MixedApplied,
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PolicyKind::OpenLoop => "open-loop",
            PolicyKind::Feedback => "feedback",
            PolicyKind::MixedApplied => "mixed",
        })
    }
}

/// Per-stage affine rule over stages `start_stage..N`.
///
/// `gains[i]` and `offsets[i]` belong to stage `start_stage + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinePolicy<T: Real> {
    pub kind: PolicyKind,
    pub start_stage: usize,
    pub gains: Vec<DVector<T>>,
    pub offsets: Vec<DVector<T>>,
}

impl<T: Real> AffinePolicy<T> {
    /// One past the last stage covered.
    pub fn end_stage(&self) -> usize {
        self.start_stage + self.gains.len()
    }

    pub fn gain(&self, stage: usize) -> &DVector<T> {
        &self.gains[stage - self.start_stage]
    }

    pub fn offset(&self, stage: usize) -> &DVector<T> {
        &self.offsets[stage - self.start_stage]
    }

    /// Control prescribed at `stage` for wealth `wealth`.
    pub fn action(&self, stage: usize, wealth: T) -> DVector<T> {
        self.gain(stage) * wealth + self.offset(stage)
    }

    pub fn is_finite(&self) -> bool {
        self.gains
            .iter()
            .chain(&self.offsets)
            .all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Same rule with every gain scaled by `factor`; used to build
    /// deliberately non-equilibrium policies.
    pub fn with_scaled_gains(&self, factor: T) -> Self {
        let mut out = self.clone();
        for g in &mut out.gains {
            *g *= factor;
        }
        out
    }
}

/// Coefficients `(a_k, b_k)` of the mean-wealth recursion
/// `𝔼X_{k+1} = a_k·𝔼X_k + b_k` induced by an affine policy:
/// `a_k = s_k + 𝔼O_kᵀK_k`, `b_k = 𝔼O_kᵀc_k`.
pub fn mean_wealth_coefficients<T: Real>(
    policy: &AffinePolicy<T>,
    spec: &MarketSpec<T>,
    moments: &ExcessMoments<T>,
) -> Vec<(T, T)> {
    (policy.start_stage..policy.end_stage())
        .map(|k| {
            let mean = &moments.mean_excess[k];
            (
                spec.riskless()[k] + mean.dot(policy.gain(k)),
                mean.dot(policy.offset(k)),
            )
        })
        .collect()
}

/// Mean wealth `𝔼X_t, …, 𝔼X_N` starting from `wealth` at the policy's first
/// stage.
pub fn mean_wealth_path<T: Real>(
    policy: &AffinePolicy<T>,
    spec: &MarketSpec<T>,
    moments: &ExcessMoments<T>,
    wealth: T,
) -> Vec<T> {
    let mut path = vec![wealth];
    let mut x = wealth;
    for (a, b) in mean_wealth_coefficients(policy, spec, moments) {
        x = a * x + b;
        path.push(x);
    }
    path
}

/// Rejects moment sets that do not belong to `spec`.
pub(crate) fn check_dimensions<T: Real>(
    spec: &MarketSpec<T>,
    moments: &ExcessMoments<T>,
) -> Result<(), SolveError> {
    if moments.horizon() != spec.horizon() || moments.num_assets() != spec.num_assets() {
        return Err(SolveError::InvalidInput(format!(
            "moments cover {} stages of {} assets, market has {} stages of {} assets",
            moments.horizon(),
            moments.num_assets(),
            spec.horizon(),
            spec.num_assets()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FailingCondition {
    /// `𝔼O_k ∉ Ran(Cov(O_k))`.
    RangeCondition,
    /// A matrix required to be PSD is not.
    PsdCondition,
    /// The gain equation `M M† L = L` has no solution.
    SolvabilityL,
    /// The offset equation `M M† θ = θ` has no solution.
    SolvabilityTheta,
}

impl std::fmt::Display for FailingCondition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FailingCondition::RangeCondition => "range condition",
            FailingCondition::PsdCondition => "PSD condition",
            FailingCondition::SolvabilityL => "gain solvability",
            FailingCondition::SolvabilityTheta => "offset solvability",
        })
    }
}

/// Certificate that the requested equilibrium does not exist.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NonexistenceReport {
    pub failing_stage: usize,
    pub failing_condition: FailingCondition,
    /// Residual that exceeded the tolerance (for PSD failures, the magnitude
    /// of the most negative eigenvalue).
    pub residual: f64,
}

impl std::fmt::Display for NonexistenceReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} fails at stage {} (residual {:.6e})",
            self.failing_condition, self.failing_stage, self.residual
        )
    }
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("no equilibrium: {0}")]
    Nonexistence(NonexistenceReport),
    /// A recursion produced a state its own guarantees exclude; points at a
    /// numerical problem rather than at the market.
    #[error("internal inconsistency at stage {stage}: {message}")]
    Internal { stage: usize, message: String },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Market(#[from] MarketError),
}

impl SolveError {
    pub fn nonexistence(&self) -> Option<&NonexistenceReport> {
        match self {
            SolveError::Nonexistence(r) => Some(r),
            _ => None,
        }
    }
}
