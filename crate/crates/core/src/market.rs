//! Market data: loading, validation, excess-return moments and the per-stage
//! open-loop existence test.

use std::io::Read;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{self, NumericsError, Tolerances};
use crate::scalar::Real;

/// Name of the built-in four-period, three-asset dataset.
pub const EXAMPLE_PRESET: &str = "li-duan-example-2";

const EXAMPLE_PRESET_JSON: &str = include_str!("../presets/li-duan-example-2.json");

#[derive(Debug, Error)]
pub enum MarketError {
    #[error("malformed market file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("cannot read market source: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid market: {message}")]
    Validation {
        message: String,
        stage: Option<usize>,
    },
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
}

impl MarketError {
    fn invalid(message: impl Into<String>) -> Self {
        MarketError::Validation {
            message: message.into(),
            stage: None,
        }
    }

    fn invalid_at(stage: usize, message: impl Into<String>) -> Self {
        MarketError::Validation {
            message: format!("{} at stage {stage}", message.into()),
            stage: Some(stage),
        }
    }
}

/// Non-fatal observations made during validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MarketWarning {
    /// `0 < s_k ≤ 1`; the recursions still apply but the usual assumption is `s_k > 1`.
    RisklessNotAboveOne { stage: usize },
}

/// Unvalidated market parameters, one entry per stage.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketParams<T: Real> {
    pub riskless: Vec<T>,
    pub mean_returns: Vec<DVector<T>>,
    pub return_cov: Vec<DMatrix<T>>,
    pub mu1: T,
    pub mu2: T,
    pub initial_time: usize,
    pub initial_wealth: T,
}

impl<T: Real> MarketParams<T> {
    /// Same moments at every stage.
    pub fn stationary(
        horizon: usize,
        riskless: T,
        mean_returns: DVector<T>,
        return_cov: DMatrix<T>,
        mu1: T,
        mu2: T,
    ) -> Self {
        Self {
            riskless: vec![riskless; horizon],
            mean_returns: vec![mean_returns; horizon],
            return_cov: vec![return_cov; horizon],
            mu1,
            mu2,
            initial_time: 0,
            initial_wealth: T::one(),
        }
    }
}

/// Validated market: horizon `N`, `m` risky assets, gross riskless returns,
/// per-stage mean and covariance of the risky gross returns, trade-off
/// parameters and the initial pair `(t, x)`.
///
/// Immutable once built; covariances are stored symmetrized.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketSpec<T: Real> {
    params: MarketParams<T>,
    num_assets: usize,
    warnings: Vec<MarketWarning>,
}

impl<T: Real> MarketSpec<T> {
    pub fn new(params: MarketParams<T>) -> Result<Self, MarketError> {
        Self::validate(params, Tolerances::<T>::default().psd)
    }

    /// Validates with an explicit PSD tolerance.
    pub fn validate(mut params: MarketParams<T>, psd_tol: T) -> Result<Self, MarketError> {
        let horizon = params.riskless.len();
        if horizon == 0 {
            return Err(MarketError::invalid("horizon must be ≥ 1"));
        }
        if params.mean_returns.len() != horizon || params.return_cov.len() != horizon {
            return Err(MarketError::invalid(format!(
                "expected {horizon} stages of mean_returns and return_cov, found {} and {}",
                params.mean_returns.len(),
                params.return_cov.len()
            )));
        }
        let m = params.mean_returns[0].len();
        if m == 0 {
            return Err(MarketError::invalid("num_assets must be ≥ 1"));
        }
        let mut warnings = Vec::new();
        for k in 0..horizon {
            let s = params.riskless[k];
            if !s.is_finite() || s <= T::zero() {
                return Err(MarketError::invalid_at(k, "riskless return must be positive"));
            }
            if s <= T::one() {
                log::warn!("riskless return {s} ≤ 1 at stage {k}");
                warnings.push(MarketWarning::RisklessNotAboveOne { stage: k });
            }
            let mean = &params.mean_returns[k];
            if mean.len() != m {
                return Err(MarketError::invalid_at(
                    k,
                    format!("mean_returns has {} entries, expected {m}", mean.len()),
                ));
            }
            if mean.iter().any(|x| !x.is_finite()) {
                return Err(MarketError::invalid_at(k, "mean_returns not finite"));
            }
            let cov = &params.return_cov[k];
            if cov.nrows() != m || cov.ncols() != m {
                return Err(MarketError::invalid_at(
                    k,
                    format!("covariance must be {m}x{m}, found {}x{}", cov.nrows(), cov.ncols()),
                ));
            }
            if cov.iter().any(|x| !x.is_finite()) {
                return Err(MarketError::invalid_at(k, "covariance not finite"));
            }
            let scale = cov.iter().fold(T::one(), |acc, x| acc.max(x.abs()));
            let asym = (cov - cov.transpose()).iter().fold(T::zero(), |acc, x| acc.max(x.abs()));
            if asym > T::lit(1e-8).max(T::machine_epsilon() * T::lit(64.0)) * scale {
                return Err(MarketError::invalid_at(k, "covariance not symmetric"));
            }
            let sym = (cov + cov.transpose()) * T::lit(0.5);
            if !numerics::is_psd(&sym, psd_tol) {
                return Err(MarketError::invalid_at(k, "covariance not PSD"));
            }
            params.return_cov[k] = sym;
        }
        if !(params.mu1 > T::zero()) || !params.mu1.is_finite() {
            return Err(MarketError::invalid("mu1 must be > 0"));
        }
        if !(params.mu2 > T::zero()) || !params.mu2.is_finite() {
            return Err(MarketError::invalid("mu2 must be > 0"));
        }
        if params.initial_time >= horizon {
            return Err(MarketError::invalid(format!(
                "initial_time must lie in 0..={}",
                horizon - 1
            )));
        }
        if !params.initial_wealth.is_finite() {
            return Err(MarketError::invalid("initial_wealth must be finite"));
        }
        Ok(Self {
            params,
            num_assets: m,
            warnings,
        })
    }

    pub fn horizon(&self) -> usize {
        self.params.riskless.len()
    }

    pub fn num_assets(&self) -> usize {
        self.num_assets
    }

    pub fn riskless(&self) -> &[T] {
        &self.params.riskless
    }

    pub fn mean_returns(&self) -> &[DVector<T>] {
        &self.params.mean_returns
    }

    pub fn return_cov(&self) -> &[DMatrix<T>] {
        &self.params.return_cov
    }

    pub fn mu1(&self) -> T {
        self.params.mu1
    }

    pub fn mu2(&self) -> T {
        self.params.mu2
    }

    pub fn initial_time(&self) -> usize {
        self.params.initial_time
    }

    pub fn initial_wealth(&self) -> T {
        self.params.initial_wealth
    }

    pub fn warnings(&self) -> &[MarketWarning] {
        &self.warnings
    }

    pub fn params(&self) -> &MarketParams<T> {
        &self.params
    }

    /// `s_{from} ⋯ s_{N−1}`; empty product is one.
    pub fn riskless_product(&self, from: usize) -> T {
        self.params.riskless[from.min(self.horizon())..]
            .iter()
            .fold(T::one(), |acc, &s| acc * s)
    }

    /// Copy with a different initial pair `(t, x)`.
    pub fn with_start(&self, initial_time: usize, initial_wealth: T) -> Result<Self, MarketError> {
        let mut params = self.params.clone();
        params.initial_time = initial_time;
        params.initial_wealth = initial_wealth;
        Self::new(params)
    }

    /// Copy with different trade-off parameters.
    pub fn with_tradeoff(&self, mu1: T, mu2: T) -> Result<Self, MarketError> {
        let mut params = self.params.clone();
        params.mu1 = mu1;
        params.mu2 = mu2;
        Self::new(params)
    }

    /// Converts to another scalar type and revalidates.
    pub fn cast<U: Real>(&self) -> Result<MarketSpec<U>, MarketError> {
        let c = |x: T| U::lit(x.as_f64());
        let p = &self.params;
        MarketSpec::new(MarketParams {
            riskless: p.riskless.iter().map(|&s| c(s)).collect(),
            mean_returns: p.mean_returns.iter().map(|v| v.map(c)).collect(),
            return_cov: p.return_cov.iter().map(|m| m.map(c)).collect(),
            mu1: c(p.mu1),
            mu2: c(p.mu2),
            initial_time: p.initial_time,
            initial_wealth: c(p.initial_wealth),
        })
    }

    /// Serializes to the JSON market format with every stage written out.
    pub fn to_json(&self) -> String {
        let p = &self.params;
        let file = MarketFile {
            horizon: self.horizon(),
            num_assets: self.num_assets,
            riskless: PerStage::Many(p.riskless.iter().map(|s| s.as_f64()).collect()),
            mean_returns: PerStage::Many(
                p.mean_returns
                    .iter()
                    .map(|v| v.iter().map(|x| x.as_f64()).collect())
                    .collect(),
            ),
            return_cov: PerStage::Many(p.return_cov.iter().map(matrix_rows).collect()),
            mu1: p.mu1.as_f64(),
            mu2: p.mu2.as_f64(),
            initial_time: p.initial_time,
            initial_wealth: p.initial_wealth.as_f64(),
        };
        serde_json::to_string_pretty(&file).expect("market serializes")
    }
}

fn matrix_rows<T: Real>(m: &DMatrix<T>) -> Vec<Vec<f64>> {
    m.row_iter()
        .map(|r| r.iter().map(|x| x.as_f64()).collect())
        .collect()
}

/// A value given once for all stages or once per stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum PerStage<X> {
    Single(X),
    Many(Vec<X>),
}

impl<X: Clone> PerStage<X> {
    fn expand(self, horizon: usize, field: &str) -> Result<Vec<X>, MarketError> {
        match self {
            PerStage::Single(x) => Ok(vec![x; horizon]),
            PerStage::Many(v) if v.len() == horizon => Ok(v),
            PerStage::Many(v) => Err(MarketError::invalid(format!(
                "`{field}` has {} stages, expected 1 or {horizon}",
                v.len()
            ))),
        }
    }
}

fn default_wealth() -> f64 {
    1.0
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MarketFile {
    horizon: usize,
    num_assets: usize,
    riskless: PerStage<f64>,
    mean_returns: PerStage<Vec<f64>>,
    return_cov: PerStage<Vec<Vec<f64>>>,
    mu1: f64,
    mu2: f64,
    #[serde(default)]
    initial_time: usize,
    #[serde(default = "default_wealth")]
    initial_wealth: f64,
}

impl MarketFile {
    fn into_spec(self) -> Result<MarketSpec<f64>, MarketError> {
        let n = self.horizon;
        let m = self.num_assets;
        if n == 0 {
            return Err(MarketError::invalid("horizon must be ≥ 1"));
        }
        if m == 0 {
            return Err(MarketError::invalid("num_assets must be ≥ 1"));
        }
        let riskless = self.riskless.expand(n, "riskless")?;
        let means = self.mean_returns.expand(n, "mean_returns")?;
        let covs = self.return_cov.expand(n, "return_cov")?;
        let mut mean_returns = Vec::with_capacity(n);
        let mut return_cov = Vec::with_capacity(n);
        for (k, (mean, cov)) in means.into_iter().zip(covs).enumerate() {
            if mean.len() != m {
                return Err(MarketError::invalid_at(
                    k,
                    format!("mean_returns has {} entries, expected {m}", mean.len()),
                ));
            }
            if cov.len() != m || cov.iter().any(|row| row.len() != m) {
                return Err(MarketError::invalid_at(k, format!("covariance must be {m}x{m}")));
            }
            mean_returns.push(DVector::from_vec(mean));
            return_cov.push(DMatrix::from_fn(m, m, |i, j| cov[i][j]));
        }
        MarketSpec::new(MarketParams {
            riskless,
            mean_returns,
            return_cov,
            mu1: self.mu1,
            mu2: self.mu2,
            initial_time: self.initial_time,
            initial_wealth: self.initial_wealth,
        })
    }
}

/// Parses and validates a JSON market description.
pub fn load_market_spec<R: Read>(mut source: R) -> Result<MarketSpec<f64>, MarketError> {
    let mut text = String::new();
    source.read_to_string(&mut text)?;
    parse_market_spec(&text)
}

pub fn parse_market_spec(text: &str) -> Result<MarketSpec<f64>, MarketError> {
    let file: MarketFile = serde_json::from_str(text)?;
    file.into_spec()
}

/// Looks up a built-in dataset by name.
pub fn preset(name: &str) -> Result<MarketSpec<f64>, MarketError> {
    match name {
        EXAMPLE_PRESET => parse_market_spec(EXAMPLE_PRESET_JSON),
        other => Err(MarketError::UnknownPreset(other.to_string())),
    }
}

/// Per-stage moments of the excess return `O_k = e_k − s_k·1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExcessMoments<T: Real> {
    /// `𝔼O_k`.
    pub mean_excess: Vec<DVector<T>>,
    /// `Cov(O_k)`, identical to `Cov(e_k)`.
    pub cov_excess: Vec<DMatrix<T>>,
    /// `𝔼(O_k O_kᵀ) = Cov(O_k) + 𝔼O_k 𝔼O_kᵀ`.
    pub second_moment: Vec<DMatrix<T>>,
}

impl<T: Real> ExcessMoments<T> {
    /// Builds moments directly from per-stage excess mean and covariance.
    pub fn from_parts(mean_excess: Vec<DVector<T>>, cov_excess: Vec<DMatrix<T>>) -> Self {
        let second_moment = mean_excess
            .iter()
            .zip(&cov_excess)
            .map(|(mu, cov)| cov + mu * mu.transpose())
            .collect();
        Self {
            mean_excess,
            cov_excess,
            second_moment,
        }
    }

    pub fn horizon(&self) -> usize {
        self.mean_excess.len()
    }

    pub fn num_assets(&self) -> usize {
        self.mean_excess.first().map_or(0, |v| v.len())
    }
}

pub fn derive_excess_moments<T: Real>(spec: &MarketSpec<T>) -> ExcessMoments<T> {
    let mean_excess = spec
        .mean_returns()
        .iter()
        .zip(spec.riskless())
        .map(|(mean, &s)| mean.map(|e| e - s))
        .collect();
    ExcessMoments::from_parts(mean_excess, spec.return_cov().to_vec())
}

/// Per-stage outcome of the range condition `𝔼O_k ∈ Ran(Cov(O_k))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExistenceReport<T> {
    pub start_stage: usize,
    pub per_stage: Vec<bool>,
    /// `‖Cov(O_k) Cov(O_k)† 𝔼O_k − 𝔼O_k‖`.
    pub residual_norms: Vec<T>,
    /// All stages `k ≥ start_stage` pass.
    pub overall: bool,
}

impl<T: Real> ExistenceReport<T> {
    /// First failing stage at or after the start stage.
    pub fn first_failure(&self) -> Option<usize> {
        (self.start_stage..self.per_stage.len()).find(|&k| !self.per_stage[k])
    }
}

pub fn check_open_loop_existence<T: Real>(
    moments: &ExcessMoments<T>,
    start_stage: usize,
    tol: T,
) -> Result<ExistenceReport<T>, NumericsError> {
    let mut per_stage = Vec::with_capacity(moments.horizon());
    let mut residual_norms = Vec::with_capacity(moments.horizon());
    for (mean, cov) in moments.mean_excess.iter().zip(&moments.cov_excess) {
        let check = numerics::range_membership(mean, cov, tol)?;
        per_stage.push(check.member);
        residual_norms.push(check.residual);
    }
    let overall = per_stage.iter().skip(start_stage).all(|&ok| ok);
    Ok(ExistenceReport {
        start_stage,
        per_stage,
        residual_norms,
        overall,
    })
}
