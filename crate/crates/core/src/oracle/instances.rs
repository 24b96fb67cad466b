//! Seeded generator of random markets for which every solver succeeds.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::market::{MarketParams, MarketSpec};

/// Random market with `1..=max_horizon` stages and `1..=max_assets` assets.
///
/// Each stage draws a covariance `BBᵀ` with `B` of random rank `r ≤ m` (so
/// roughly a third of the stages are rank-deficient) and an excess mean
/// `B·w`, which lies in the range of the covariance. Riskless rates are in
/// `[1, 1.06]`, `μ₁, μ₂` in `[0.1, 2]` and the initial wealth in `[0.5, 2]`.
pub fn random_solvable_instance(seed: u64, max_horizon: usize, max_assets: usize) -> MarketSpec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = rng.random_range(1..=max_horizon.max(1));
    let m = rng.random_range(1..=max_assets.max(1));
    let mut riskless = Vec::with_capacity(horizon);
    let mut mean_returns = Vec::with_capacity(horizon);
    let mut return_cov = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let s: f64 = rng.random_range(1.0..1.06);
        let rank = if rng.random_bool(1.0 / 3.0) { rng.random_range(1..=m) } else { m };
        let b = DMatrix::from_fn(m, rank, |_, _| 0.15 * rng.sample::<f64, _>(StandardNormal));
        let w = DVector::from_fn(rank, |_, _| 0.4 * rng.sample::<f64, _>(StandardNormal));
        let excess = &b * w;
        riskless.push(s);
        mean_returns.push(excess.add_scalar(s));
        return_cov.push(&b * b.transpose());
    }
    MarketSpec::new(MarketParams {
        riskless,
        mean_returns,
        return_cov,
        mu1: rng.random_range(0.1..2.0),
        mu2: rng.random_range(0.1..2.0),
        initial_time: 0,
        initial_wealth: rng.random_range(0.5..2.0),
    })
    .expect("generated market is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{check_open_loop_existence, derive_excess_moments};

    #[test]
    fn deterministic_and_in_range() {
        for seed in 0..50 {
            let spec = random_solvable_instance(seed, 4, 3);
            assert_eq!(spec, random_solvable_instance(seed, 4, 3));
            assert!(spec.horizon() <= 4 && spec.num_assets() <= 3);
            let moments = derive_excess_moments(&spec);
            assert!(check_open_loop_existence(&moments, 0, 1e-8).unwrap().overall);
        }
    }
}
