//! Finite-support return laws, independent across stages, whose first two
//! moments match a given set of excess-return moments.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::OracleError;
use crate::market::ExcessMoments;
use crate::scalar::Real;

/// One excess-return outcome and its probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Atom<T: Real> {
    pub prob: T,
    pub excess: DVector<T>,
}

/// Product tree over stages `0..N`: stage `k` draws one atom from
/// `stages[k]`, independently of all other stages.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioTree<T: Real> {
    stages: Vec<Vec<Atom<T>>>,
}

impl<T: Real> ScenarioTree<T> {
    /// Validates that every stage is a probability distribution on vectors of
    /// a common dimension.
    pub fn new(stages: Vec<Vec<Atom<T>>>) -> Result<Self, OracleError> {
        let m = stages
            .first()
            .and_then(|s| s.first())
            .map_or(0, |a| a.excess.len());
        for (k, atoms) in stages.iter().enumerate() {
            if atoms.is_empty() {
                return Err(OracleError::InvalidTree(format!("stage {k} has no atoms")));
            }
            if atoms.iter().any(|a| a.excess.len() != m) {
                return Err(OracleError::InvalidTree(format!("stage {k} mixes dimensions")));
            }
            if atoms
                .iter()
                .any(|a| !(a.prob > T::zero()) || a.excess.iter().any(|x| !x.is_finite()))
            {
                return Err(OracleError::InvalidTree(format!(
                    "stage {k} has a non-positive probability or non-finite atom"
                )));
            }
            let total = atoms.iter().fold(T::zero(), |acc, a| acc + a.prob);
            let tol = T::lit(1e-12).max(T::machine_epsilon() * T::lit(64.0));
            if (total - T::one()).abs() > tol {
                return Err(OracleError::InvalidTree(format!(
                    "stage {k} probabilities sum to {total}"
                )));
            }
        }
        Ok(Self { stages })
    }

    pub fn horizon(&self) -> usize {
        self.stages.len()
    }

    pub fn num_assets(&self) -> usize {
        self.stages[0][0].excess.len()
    }

    pub fn atoms(&self, stage: usize) -> &[Atom<T>] {
        &self.stages[stage]
    }

    /// Number of root-to-leaf paths from `stage` to the horizon, saturating.
    pub fn leaf_count(&self, stage: usize) -> u64 {
        self.stages[stage..]
            .iter()
            .fold(1u64, |acc, s| acc.saturating_mul(s.len() as u64))
    }

    /// Number of distinct nodes at `stage` reached from `from`.
    pub fn node_count(&self, from: usize, stage: usize) -> u64 {
        self.stages[from..stage]
            .iter()
            .fold(1u64, |acc, s| acc.saturating_mul(s.len() as u64))
    }

    /// Mean and covariance of stage `k`, computed in two passes.
    pub fn implied_moments(&self, stage: usize) -> (DVector<T>, DMatrix<T>) {
        let m = self.num_assets();
        let atoms = &self.stages[stage];
        let mean = atoms
            .iter()
            .fold(DVector::zeros(m), |acc, a| acc + &a.excess * a.prob);
        let cov = atoms.iter().fold(DMatrix::zeros(m, m), |acc, a| {
            let d = &a.excess - &mean;
            acc + &d * d.transpose() * a.prob
        });
        (mean, cov)
    }
}

/// Builds a tree whose stage `k` has mean `𝔼O_k` and covariance `Cov(O_k)`.
///
/// With `r = rank Cov(O_k)` and `F` a spectral square-root factor
/// (`FFᵀ = Cov`, `r` columns), rotated by a seed-dependent orthogonal matrix:
///
/// * `r = 0`: one atom at the mean;
/// * `r + 1 ≤ n < 2r`: a regular simplex of `r + 1` equally weighted points;
/// * `n = 2r`: `mean ± √r·F_j`, equal weights;
/// * `n ≥ 2r + 1`: the mean plus `mean ± √((2r+1)/2)·F_j`, weights `1/(2r+1)`.
///
/// Fewer than `r + 1` atoms cannot match a rank-`r` covariance and is
/// rejected. Stages never receive more atoms than requested.
pub fn build_matched_tree<T: Real>(
    moments: &ExcessMoments<T>,
    atoms_per_stage: usize,
    seed: u64,
) -> Result<ScenarioTree<T>, OracleError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stages = Vec::with_capacity(moments.horizon());
    for (k, (mean, cov)) in moments.mean_excess.iter().zip(&moments.cov_excess).enumerate() {
        let factor = square_root_factor(cov);
        let r = factor.ncols();
        if atoms_per_stage < r + 1 {
            return Err(OracleError::InfeasibleTree {
                stage: k,
                requested: atoms_per_stage,
                required: r + 1,
            });
        }
        let factor = if r > 1 { factor * random_rotation::<T>(r, &mut rng) } else { factor };
        stages.push(stage_atoms(mean, &factor, atoms_per_stage));
    }
    ScenarioTree::new(stages)
}

fn stage_atoms<T: Real>(mean: &DVector<T>, factor: &DMatrix<T>, n: usize) -> Vec<Atom<T>> {
    let r = factor.ncols();
    let atom = |prob: T, offset: DVector<T>| Atom {
        prob,
        excess: mean + offset,
    };
    let m = mean.len();
    if r == 0 {
        return vec![atom(T::one(), DVector::zeros(m))];
    }
    let rf = T::lit(r as f64);
    if n < 2 * r {
        let helmert = helmert_basis::<T>(r);
        let w = T::one() / (rf + T::one());
        let scale = (rf + T::one()).sqrt();
        return (0..=r)
            .map(|j| atom(w, factor * helmert.row(j).transpose() * scale))
            .collect();
    }
    let with_center = n > 2 * r;
    let (w, scale) = if with_center {
        let count = T::lit((2 * r + 1) as f64);
        (T::one() / count, (count * T::lit(0.5)).sqrt())
    } else {
        (T::one() / T::lit((2 * r) as f64), rf.sqrt())
    };
    let mut atoms = Vec::with_capacity(2 * r + 1);
    if with_center {
        atoms.push(atom(w, DVector::zeros(m)));
    }
    for j in 0..r {
        let col = factor.column(j) * scale;
        atoms.push(atom(w, col.clone_owned()));
        atoms.push(atom(w, -col));
    }
    atoms
}

/// `m × r` factor with `FFᵀ = cov`, dropping eigenvalues at or below
/// `1e-12 · λmax` (floored at machine precision).
fn square_root_factor<T: Real>(cov: &DMatrix<T>) -> DMatrix<T> {
    let m = cov.nrows();
    let eig = SymmetricEigen::new((cov + cov.transpose()) * T::lit(0.5));
    let top = eig.eigenvalues.iter().fold(T::zero(), |acc, &l| acc.max(l));
    let cutoff = top * T::lit(1e-12).max(T::machine_epsilon() * T::lit(m.max(1) as f64 * 16.0));
    let keep: Vec<usize> = (0..m).filter(|&i| eig.eigenvalues[i] > cutoff).collect();
    let mut f = DMatrix::zeros(m, keep.len());
    for (j, &i) in keep.iter().enumerate() {
        f.set_column(j, &(eig.eigenvectors.column(i) * eig.eigenvalues[i].sqrt()));
    }
    f
}

/// `(r+1) × r` matrix with orthonormal columns orthogonal to the ones vector.
fn helmert_basis<T: Real>(r: usize) -> DMatrix<T> {
    let mut h = DMatrix::zeros(r + 1, r);
    for j in 1..=r {
        let jf = T::lit(j as f64);
        let norm = (jf * (jf + T::one())).sqrt();
        for i in 0..j {
            h[(i, j - 1)] = T::one() / norm;
        }
        h[(j, j - 1)] = -jf / norm;
    }
    h
}

/// Haar-distributed orthogonal matrix from the QR factorization of a Gaussian
/// matrix with the signs of `R`'s diagonal absorbed.
fn random_rotation<T: Real>(r: usize, rng: &mut ChaCha8Rng) -> DMatrix<T> {
    let g = DMatrix::from_fn(r, r, |_, _| T::lit(rng.sample::<f64, _>(StandardNormal)));
    let qr = g.qr();
    let (mut q, rr) = (qr.q(), qr.r());
    for j in 0..r {
        if rr[(j, j)] < T::zero() {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{derive_excess_moments, preset, EXAMPLE_PRESET};

    fn single(mean: f64, var: f64) -> ExcessMoments<f64> {
        ExcessMoments::from_parts(
            vec![DVector::from_element(1, mean)],
            vec![DMatrix::from_element(1, 1, var)],
        )
    }

    fn assert_matched(tree: &ScenarioTree<f64>, moments: &ExcessMoments<f64>, tol: f64) {
        for k in 0..tree.horizon() {
            let (mean, cov) = tree.implied_moments(k);
            assert!((mean - &moments.mean_excess[k]).norm() <= tol);
            assert!((cov - &moments.cov_excess[k]).norm() <= tol);
        }
    }

    #[test]
    fn two_point_scalar_match() {
        let moments = single(0.1, 0.04);
        let tree = build_matched_tree(&moments, 2, 0).unwrap();
        let mut xs: Vec<f64> = tree.atoms(0).iter().map(|a| a.excess[0]).collect();
        xs.sort_by(f64::total_cmp);
        assert!((xs[0] + 0.1).abs() < 1e-15 && (xs[1] - 0.3).abs() < 1e-15);
        assert!(tree.atoms(0).iter().all(|a| a.prob == 0.5));
    }

    #[test]
    fn example_seven_atoms() {
        let moments = derive_excess_moments(&preset(EXAMPLE_PRESET).unwrap());
        let tree = build_matched_tree(&moments, 7, 11).unwrap();
        assert_eq!(tree.atoms(0).len(), 7);
        assert_eq!(tree.leaf_count(0), 7u64.pow(4));
        assert_matched(&tree, &moments, 1e-9);
    }

    #[test]
    fn every_construction_matches() {
        let moments = derive_excess_moments(&preset(EXAMPLE_PRESET).unwrap());
        for n in 4..=9 {
            for seed in 0..3 {
                let tree = build_matched_tree(&moments, n, seed).unwrap();
                assert!(tree.atoms(0).len() <= n);
                assert_matched(&tree, &moments, 1e-9);
            }
        }
    }

    #[test]
    fn zero_covariance_single_atom() {
        let moments = ExcessMoments::from_parts(
            vec![DVector::from_vec(vec![0.1, 0.2])],
            vec![DMatrix::zeros(2, 2)],
        );
        let tree = build_matched_tree(&moments, 1, 0).unwrap();
        assert_eq!(tree.atoms(0).len(), 1);
        assert_eq!(tree.atoms(0)[0].excess, moments.mean_excess[0]);
    }

    #[test]
    fn rank_deficient_uses_rank() {
        let q = DVector::from_vec(vec![0.3, -0.1, 0.2]);
        let moments = ExcessMoments::from_parts(vec![&q * 0.5], vec![&q * q.transpose()]);
        let tree = build_matched_tree(&moments, 2, 5).unwrap();
        assert_eq!(tree.atoms(0).len(), 2);
        assert_matched(&tree, &moments, 1e-12);
    }

    #[test]
    fn too_few_atoms_rejected() {
        let moments = derive_excess_moments(&preset(EXAMPLE_PRESET).unwrap());
        assert!(matches!(
            build_matched_tree(&moments, 3, 0),
            Err(OracleError::InfeasibleTree { required: 4, .. })
        ));
    }

    #[test]
    fn seed_changes_atoms_not_moments() {
        let moments = derive_excess_moments(&preset(EXAMPLE_PRESET).unwrap());
        let a = build_matched_tree(&moments, 7, 1).unwrap();
        let b = build_matched_tree(&moments, 7, 2).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, build_matched_tree(&moments, 7, 1).unwrap());
    }

    #[test]
    fn invalid_probabilities_rejected() {
        let atoms = vec![vec![
            Atom { prob: 0.5, excess: DVector::from_element(1, 0.0) },
            Atom { prob: 0.4, excess: DVector::from_element(1, 1.0) },
        ]];
        assert!(ScenarioTree::new(atoms).is_err());
    }
}
