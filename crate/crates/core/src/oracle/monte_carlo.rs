//! Monte Carlo estimates of terminal-wealth moments and cost under an affine
//! policy.
//!
//! Paths are simulated in fixed-size chunks; chunk `j` draws from the ChaCha8
//! stream `j` of the seeded generator, so results do not depend on the number
//! of worker threads.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use super::tree::ScenarioTree;
use super::OracleError;
use crate::market::{derive_excess_moments, MarketSpec};
use crate::policy::AffinePolicy;
use crate::scalar::Real;

const CHUNK: usize = 4096;

/// Law of the excess returns used for simulation.
#[derive(Debug, Clone, Copy)]
pub enum ReturnDistribution<'a, T: Real> {
    /// Normal with the market's excess mean and covariance.
    GaussianMatched,
    /// Independent draws from each stage's atoms.
    TreeSampling(&'a ScenarioTree<T>),
}

/// Sample statistics of `X_N`, with standard errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimulationSummary {
    pub n_paths: usize,
    pub mean: f64,
    pub variance: f64,
    pub cost: f64,
    pub se_mean: f64,
    pub se_variance: f64,
    pub se_cost: f64,
}

enum Sampler<T: Real> {
    Gaussian {
        mean: Vec<DVector<T>>,
        factor: Vec<DMatrix<T>>,
    },
    Tree {
        cumulative: Vec<Vec<f64>>,
        atoms: Vec<Vec<DVector<T>>>,
    },
}

impl<T: Real> Sampler<T> {
    fn draw(&self, stage: usize, rng: &mut ChaCha8Rng) -> DVector<T> {
        match self {
            Sampler::Gaussian { mean, factor } => {
                let f = &factor[stage];
                let z = DVector::from_fn(f.ncols(), |_, _| T::lit(rng.sample::<f64, _>(StandardNormal)));
                &mean[stage] + f * z
            }
            Sampler::Tree { cumulative, atoms } => {
                let u: f64 = rng.random();
                let cum = &cumulative[stage];
                let i = cum.partition_point(|&c| c <= u).min(cum.len() - 1);
                atoms[stage][i].clone()
            }
        }
    }
}

/// Simulates `n_paths` paths from `(policy.start_stage, spec.initial_wealth())`.
pub fn simulate_monte_carlo<T: Real>(
    spec: &MarketSpec<T>,
    policy: &AffinePolicy<T>,
    n_paths: usize,
    seed: u64,
    distribution: ReturnDistribution<'_, T>,
) -> Result<SimulationSummary, OracleError> {
    if n_paths < 2 {
        return Err(OracleError::Invalid("at least two paths are required".into()));
    }
    if policy.end_stage() != spec.horizon() {
        return Err(OracleError::Invalid("policy does not reach the horizon".into()));
    }
    let n = spec.horizon();
    let sampler = match distribution {
        ReturnDistribution::GaussianMatched => {
            let moments = derive_excess_moments(spec);
            Sampler::Gaussian {
                mean: moments.mean_excess,
                factor: moments.cov_excess.iter().map(spectral_sqrt).collect(),
            }
        }
        ReturnDistribution::TreeSampling(tree) => {
            if tree.horizon() != n || tree.num_assets() != spec.num_assets() {
                return Err(OracleError::Invalid("tree does not match the market".into()));
            }
            Sampler::Tree {
                cumulative: (0..n)
                    .map(|k| {
                        tree.atoms(k)
                            .iter()
                            .scan(0.0, |acc, a| {
                                *acc += a.prob.as_f64();
                                Some(*acc)
                            })
                            .collect()
                    })
                    .collect(),
                atoms: (0..n)
                    .map(|k| tree.atoms(k).iter().map(|a| a.excess.clone()).collect())
                    .collect(),
            }
        }
    };

    let x0 = spec.initial_wealth();
    let chunks = n_paths.div_ceil(CHUNK);
    let terminal: Vec<f64> = (0..chunks)
        .into_par_iter()
        .flat_map_iter(|j| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(j as u64);
            let len = CHUNK.min(n_paths - j * CHUNK);
            (0..len)
                .map(|_| {
                    let mut x = x0;
                    for k in policy.start_stage..n {
                        let o = sampler.draw(k, &mut rng);
                        x = spec.riskless()[k] * x + o.dot(&policy.action(k, x));
                    }
                    x.as_f64()
                })
                .collect::<Vec<_>>()
        })
        .collect();

    let nf = n_paths as f64;
    let mean = terminal.iter().sum::<f64>() / nf;
    let sq: Vec<f64> = terminal.iter().map(|x| (x - mean).powi(2)).collect();
    let variance = sq.iter().sum::<f64>() / (nf - 1.0);
    let lambda = spec.mu1().as_f64() * x0.as_f64() + spec.mu2().as_f64();
    let sd = |values: &mut dyn Iterator<Item = f64>| {
        let v: Vec<f64> = values.collect();
        let m = v.iter().sum::<f64>() / nf;
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt()
    };
    let se_mean = variance.sqrt() / nf.sqrt();
    let se_variance = sd(&mut sq.iter().copied()) / nf.sqrt();
    let se_cost = sd(&mut terminal.iter().zip(&sq).map(|(x, d)| d - lambda * x)) / nf.sqrt();
    Ok(SimulationSummary {
        n_paths,
        mean,
        variance,
        cost: variance - lambda * mean,
        se_mean,
        se_variance,
        se_cost,
    })
}

/// `F` with `FFᵀ = cov`, from the eigendecomposition with negative rounding
/// noise clipped.
fn spectral_sqrt<T: Real>(cov: &DMatrix<T>) -> DMatrix<T> {
    let eig = SymmetricEigen::new((cov + cov.transpose()) * T::lit(0.5));
    let sqrt = eig.eigenvalues.map(|l| l.max(T::zero()).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{preset, MarketParams, EXAMPLE_PRESET};
    use crate::numerics::Tolerances;
    use crate::open_loop::solve_open_loop;
    use crate::oracle::exact::evaluate_cost_exact;
    use crate::oracle::tree::build_matched_tree;
    use crate::policy::PolicyKind;

    #[test]
    fn zero_excess_zero_control_is_deterministic() {
        let spec = MarketSpec::new(MarketParams::stationary(
            3,
            1.02,
            DVector::from_element(2, 1.02),
            DMatrix::identity(2, 2) * 0.03,
            1.0,
            1.0,
        ))
        .unwrap();
        let policy = AffinePolicy {
            kind: PolicyKind::OpenLoop,
            start_stage: 0,
            gains: vec![DVector::zeros(2); 3],
            offsets: vec![DVector::zeros(2); 3],
        };
        let sum = simulate_monte_carlo(&spec, &policy, 1000, 1, ReturnDistribution::GaussianMatched)
            .unwrap();
        assert!((sum.mean - 1.02f64.powi(3)).abs() < 1e-12);
        assert!(sum.variance < 1e-24);
    }

    #[test]
    fn same_seed_same_summary() {
        let spec = preset(EXAMPLE_PRESET).unwrap();
        let moments = derive_excess_moments(&spec);
        let sol = solve_open_loop(&moments, &spec, &Tolerances::default()).unwrap();
        let a = simulate_monte_carlo(&spec, &sol.policy, 10_000, 7, ReturnDistribution::GaussianMatched)
            .unwrap();
        let b = simulate_monte_carlo(&spec, &sol.policy, 10_000, 7, ReturnDistribution::GaussianMatched)
            .unwrap();
        assert_eq!(a, b);
        let c = simulate_monte_carlo(&spec, &sol.policy, 10_000, 8, ReturnDistribution::GaussianMatched)
            .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn independent_of_thread_count() {
        let spec = preset(EXAMPLE_PRESET).unwrap();
        let moments = derive_excess_moments(&spec);
        let sol = solve_open_loop(&moments, &spec, &Tolerances::default()).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| {
                    simulate_monte_carlo(&spec, &sol.policy, 20_000, 3, ReturnDistribution::GaussianMatched)
                        .unwrap()
                })
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn tree_sampling_error_shrinks() {
        let spec = preset(EXAMPLE_PRESET).unwrap();
        let moments = derive_excess_moments(&spec);
        let sol = solve_open_loop(&moments, &spec, &Tolerances::default()).unwrap();
        let tree = build_matched_tree(&moments, 7, 0).unwrap();
        let exact = evaluate_cost_exact(&tree, &spec, &sol.policy, 0, 1.0).unwrap();
        let small =
            simulate_monte_carlo(&spec, &sol.policy, 1_000, 5, ReturnDistribution::TreeSampling(&tree))
                .unwrap();
        let large =
            simulate_monte_carlo(&spec, &sol.policy, 100_000, 5, ReturnDistribution::TreeSampling(&tree))
                .unwrap();
        assert!(large.se_cost < small.se_cost / 5.0);
        assert!((large.cost - exact.cost).abs() <= 4.0 * large.se_cost);
        assert!((large.mean - exact.mean).abs() <= 4.0 * large.se_mean);
    }
}
