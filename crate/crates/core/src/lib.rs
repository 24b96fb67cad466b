//! Equilibrium solutions of multi-period mean-variance portfolio selection
//! with a possibly singular return covariance.
//!
//! Wealth evolves as `X_{k+1} = s_k·X_k + O_kᵀu_k`, where `O_k` is the excess
//! return of the risky assets over the riskless rate `s_k`, and the investor
//! at `(t, x)` minimizes `Var_t(X_N) − (μ₁x + μ₂)·𝔼_t X_N`. The problem is
//! time-inconsistent, so three equilibrium notions are computed instead of an
//! optimum:
//!
//! * [`open_loop`]: open-loop equilibrium control,
//! * [`feedback`]: feedback equilibrium strategy,
//! * [`mixed`]: mixed equilibrium solution for a given pure-feedback part.
//!
//! The [`oracle`] module checks each solution against the definition of its
//! equilibrium on finite scenario trees and estimates outcomes by Monte Carlo.
//!
//! Everything is generic over [`Real`] (`f32` or `f64`); the aliases below fix
//! the scalar to `f64`.

// `!(x > 0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod export;
pub mod feedback;
pub mod market;
pub mod mixed;
pub mod numerics;
pub mod open_loop;
pub mod oracle;
pub mod policy;
pub mod scalar;

pub use market::{
    check_open_loop_existence, derive_excess_moments, load_market_spec, parse_market_spec, preset,
    MarketError, MarketParams, EXAMPLE_PRESET,
};
pub use numerics::Tolerances;
pub use policy::{FailingCondition, NonexistenceReport, PolicyKind, SolveError};
pub use scalar::Real;

pub type MarketSpec = market::MarketSpec<f64>;
pub type ExcessMoments = market::ExcessMoments<f64>;
pub type ExistenceReport = market::ExistenceReport<f64>;
pub type AffinePolicy = policy::AffinePolicy<f64>;
pub type OpenLoopSolution = open_loop::OpenLoopSolution<f64>;
pub type OpenLoopTrace = open_loop::OpenLoopTrace<f64>;
pub type FeedbackSolution = feedback::FeedbackSolution<f64>;
pub type FeedbackTrace = feedback::FeedbackTrace<f64>;
pub type MixedSolution = mixed::MixedSolution<f64>;
pub type MixedTrace = mixed::MixedTrace<f64>;
pub type PureFeedbackPart = mixed::PureFeedbackPart<f64>;
pub type ScenarioTree = oracle::tree::ScenarioTree<f64>;

pub type MarketSpecF32 = market::MarketSpec<f32>;
pub type AffinePolicyF32 = policy::AffinePolicy<f32>;
