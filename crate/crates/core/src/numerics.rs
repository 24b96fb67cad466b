//! Linear algebra primitives used by the backward recursions: symmetric
//! Moore-Penrose pseudoinverse, the scalar dagger, range membership and
//! positive semidefiniteness tests.
//!
//! Every matrix that reaches these routines is symmetric, so all of them work
//! from a symmetric eigendecomposition. Singular values of a symmetric matrix
//! are the absolute values of its eigenvalues, which is what the cutoffs below
//! are measured against.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::scalar::Real;

/// Failures of the numerical primitives. These indicate malformed input, never
/// a property of the portfolio problem.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (max |M - M^T| = {deviation:e})")]
    Asymmetric { deviation: f64 },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

/// Tolerance knobs shared by the solvers and the verification oracle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances<T> {
    /// Relative eigenvalue floor for PSD tests: `λmin ≥ -psd · max(1, λmax)`.
    pub psd: T,
    /// Relative residual threshold for range-membership tests.
    pub range: T,
    /// Relative singular-value cutoff for pseudoinverses.
    pub pinv: T,
    /// Absolute threshold of the scalar dagger.
    pub dagger: T,
    /// Relative threshold for deviation gaps in equilibrium verification.
    pub verify: T,
}

impl<T: Real> Default for Tolerances<T> {
    fn default() -> Self {
        // f32 cannot resolve the f64 defaults, so every knob is floored at a
        // multiple of machine epsilon.
        let eps = T::machine_epsilon();
        let floor = |value: f64, ulps: f64| T::max(T::lit(value), eps * T::lit(ulps));
        Self {
            psd: floor(1e-10, 100.0),
            range: floor(1e-8, 1000.0),
            pinv: floor(1e-10, 100.0),
            dagger: floor(1e-12, 10.0),
            verify: floor(1e-7, 1e4),
        }
    }
}

impl<T: Real> Tolerances<T> {
    /// Returns an error message naming the first non-positive knob.
    pub fn validate(&self) -> Result<(), String> {
        let knobs = [
            ("psd", self.psd),
            ("range", self.range),
            ("pinv", self.pinv),
            ("verify", self.verify),
        ];
        for (name, value) in knobs {
            if !(value > T::zero()) || !value.is_finite() {
                return Err(format!("tolerance `{name}` must be positive"));
            }
        }
        if self.dagger < T::zero() || !self.dagger.is_finite() {
            return Err("tolerance `dagger` must be non-negative".to_string());
        }
        Ok(())
    }
}

/// Pseudoinverse of a symmetric matrix together with its numerical rank.
#[derive(Debug, Clone, PartialEq)]
pub struct PinvResult<T: Real> {
    pub pinv: DMatrix<T>,
    pub rank: usize,
    /// Singular-value threshold that was applied.
    pub cutoff: T,
    /// Eigenvalues of the (symmetrized) input, unsorted.
    pub eigenvalues: DVector<T>,
}

/// Outcome of a range-membership test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeCheck<T> {
    pub member: bool,
    /// `‖M M† v − v‖`.
    pub residual: T,
}

fn max_abs<T: Real>(m: &DMatrix<T>) -> T {
    m.iter().fold(T::zero(), |acc, x| acc.max(x.abs()))
}

fn symmetry_tolerance<T: Real>() -> T {
    T::max(T::lit(1e-8), T::machine_epsilon() * T::lit(64.0))
}

/// Checks shape, finiteness and symmetry, returning the exact symmetric part.
fn symmetric_part<T: Real>(m: &DMatrix<T>) -> Result<DMatrix<T>, NumericsError> {
    if !m.is_square() {
        return Err(NumericsError::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(NumericsError::NonFinite);
    }
    let deviation = max_abs(&(m - m.transpose()));
    let scale = T::one().max(max_abs(m));
    if deviation > symmetry_tolerance::<T>() * scale {
        return Err(NumericsError::Asymmetric {
            deviation: deviation.as_f64(),
        });
    }
    Ok((m + m.transpose()) * T::lit(0.5))
}

/// Moore-Penrose pseudoinverse of a symmetric matrix.
///
/// Eigenvalues with magnitude at or below `rel_tol · σmax` are treated as
/// zero. The returned matrix is exactly symmetric.
pub fn pseudoinverse<T: Real>(m: &DMatrix<T>, rel_tol: T) -> Result<PinvResult<T>, NumericsError> {
    let sym = symmetric_part(m)?;
    let n = sym.nrows();
    if n == 0 {
        return Ok(PinvResult {
            pinv: DMatrix::zeros(0, 0),
            rank: 0,
            cutoff: T::zero(),
            eigenvalues: DVector::zeros(0),
        });
    }
    let eig = SymmetricEigen::new(sym);
    let sigma_max = eig.eigenvalues.iter().fold(T::zero(), |acc, l| acc.max(l.abs()));
    let cutoff = rel_tol * sigma_max;
    let mut pinv = DMatrix::zeros(n, n);
    let mut rank = 0;
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda.abs() > cutoff && lambda != T::zero() {
            rank += 1;
            let v = eig.eigenvectors.column(i);
            pinv += (v * v.transpose()) * (T::one() / lambda);
        }
    }
    let pinv = (&pinv + pinv.transpose()) * T::lit(0.5);
    Ok(PinvResult {
        pinv,
        rank,
        cutoff,
        eigenvalues: eig.eigenvalues,
    })
}

/// `1/a` when `|a| > abs_tol`, otherwise `0`.
pub fn scalar_dagger<T: Real>(a: T, abs_tol: T) -> T {
    if a.abs() > abs_tol {
        T::one() / a
    } else {
        T::zero()
    }
}

/// Residual `‖M (M† v) − v‖` for an already computed pseudoinverse.
pub fn range_residual<T: Real>(m: &DMatrix<T>, pinv: &DMatrix<T>, v: &DVector<T>) -> T {
    (m * (pinv * v) - v).norm()
}

/// Relative range test: passes when the residual is at most
/// `rel_tol · max(1, ‖v‖)`.
pub fn within_range<T: Real>(residual: T, v: &DVector<T>, rel_tol: T) -> bool {
    residual <= rel_tol * T::one().max(v.norm())
}

/// Tests `v ∈ Ran(M)` for a symmetric matrix `M`.
pub fn range_membership<T: Real>(
    v: &DVector<T>,
    m: &DMatrix<T>,
    rel_tol: T,
) -> Result<RangeCheck<T>, NumericsError> {
    if v.len() != m.nrows() {
        return Err(NumericsError::DimensionMismatch {
            expected: m.nrows(),
            found: v.len(),
        });
    }
    let p = pseudoinverse(m, Tolerances::<T>::default().pinv)?;
    let residual = range_residual(m, &p.pinv, v);
    Ok(RangeCheck {
        member: within_range(residual, v, rel_tol),
        residual,
    })
}

/// Eigenvalues of the symmetric part of `m`, sorted ascending.
pub fn sorted_eigenvalues<T: Real>(m: &DMatrix<T>) -> Vec<T> {
    let sym = (m + m.transpose()) * T::lit(0.5);
    let mut values: Vec<T> = SymmetricEigen::new(sym).eigenvalues.iter().copied().collect();
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    values
}

/// `λmin(M) ≥ −tol · max(1, λmax(M))`.
pub fn is_psd<T: Real>(m: &DMatrix<T>, tol: T) -> bool {
    if !m.is_square() || m.iter().any(|x| !x.is_finite()) {
        return false;
    }
    if m.nrows() == 0 {
        return true;
    }
    let eig = sorted_eigenvalues(m);
    let lo = eig[0];
    let hi = eig[eig.len() - 1];
    lo >= -tol * T::one().max(hi)
}

/// Largest violation of the four Penrose conditions, each measured in the
/// max-abs norm.
pub fn penrose_residual<T: Real>(m: &DMatrix<T>, p: &DMatrix<T>) -> T {
    let mpm = m * p * m - m;
    let pmp = p * m * p - p;
    let mp = m * p;
    let pm = p * m;
    let mp_asym = &mp - mp.transpose();
    let pm_asym = &pm - pm.transpose();
    [mpm, pmp, mp_asym, pm_asym]
        .iter()
        .fold(T::zero(), |acc, r| acc.max(max_abs(r)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: usize, data: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, data.len() / rows, data)
    }

    #[test]
    fn identity_pinv_is_identity() {
        let r = pseudoinverse(&DMatrix::<f64>::identity(3, 3), 1e-10).unwrap();
        assert_eq!(r.rank, 3);
        assert!((r.pinv - DMatrix::identity(3, 3)).abs().max() < 1e-14);
    }

    #[test]
    fn zero_pinv_is_zero() {
        let r = pseudoinverse(&DMatrix::<f64>::zeros(2, 2), 1e-10).unwrap();
        assert_eq!(r.rank, 0);
        assert_eq!(r.pinv, DMatrix::zeros(2, 2));
    }

    #[test]
    fn diagonal_rank_one() {
        let r = pseudoinverse(&m(2, &[2.0, 0.0, 0.0, 0.0]), 1e-10).unwrap();
        assert_eq!(r.rank, 1);
        assert!((r.pinv - m(2, &[0.5, 0.0, 0.0, 0.0])).abs().max() < 1e-15);
    }

    #[test]
    fn asymmetric_input_is_rejected() {
        let err = pseudoinverse(&m(2, &[1.0, 0.5, 0.0, 1.0]), 1e-10).unwrap_err();
        assert!(matches!(err, NumericsError::Asymmetric { .. }));
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let err = pseudoinverse(&m(1, &[f64::NAN]), 1e-10).unwrap_err();
        assert_eq!(err, NumericsError::NonFinite);
    }

    #[test]
    fn dagger_cases() {
        assert_eq!(scalar_dagger(2.0, 1e-12), 0.5);
        assert_eq!(scalar_dagger(0.0, 1e-12), 0.0);
        assert_eq!(scalar_dagger(1e-15, 1e-12), 0.0);
        assert_eq!(scalar_dagger(-4.0, 1e-12), -0.25);
    }

    #[test]
    fn range_cases() {
        let d = m(2, &[1.0, 0.0, 0.0, 0.0]);
        let zero = range_membership(&DVector::zeros(2), &d, 1e-8).unwrap();
        assert!(zero.member);
        assert_eq!(zero.residual, 0.0);
        assert!(range_membership(&DVector::from_vec(vec![1.0, 0.0]), &d, 1e-8).unwrap().member);
        let out = range_membership(&DVector::from_vec(vec![0.0, 1.0]), &d, 1e-8).unwrap();
        assert!(!out.member);
        assert!((out.residual - 1.0).abs() < 1e-14);
    }

    #[test]
    fn psd_cases() {
        let cov = m(
            3,
            &[0.0146, 0.0187, 0.0145, 0.0187, 0.0854, 0.0104, 0.0145, 0.0104, 0.0289],
        );
        assert!(is_psd(&cov, 1e-10));
        assert!(!is_psd(&m(2, &[1.0, 0.0, 0.0, -1.0]), 1e-10));
        assert!(is_psd(&DMatrix::<f64>::zeros(3, 3), 1e-10));
    }

    #[test]
    fn works_in_single_precision() {
        let r = pseudoinverse(&DMatrix::<f32>::from_diagonal_element(2, 2, 4.0), 1e-6).unwrap();
        assert_eq!(r.rank, 2);
        assert!((r.pinv[(0, 0)] - 0.25).abs() < 1e-6);
        let tol = Tolerances::<f32>::default();
        assert!(tol.range >= 1e-8 && tol.validate().is_ok());
    }

    fn psd_strategy() -> impl Strategy<Value = DMatrix<f64>> {
        (1usize..5, 0usize..5).prop_flat_map(|(n, r)| {
            prop::collection::vec(-2.0f64..2.0, n * r.max(1)).prop_map(move |data| {
                let f = DMatrix::from_vec(n, r.max(1), data);
                let g = if r == 0 { f * 0.0 } else { f };
                &g * g.transpose()
            })
        })
    }

    proptest! {
        #[test]
        fn penrose_conditions_hold(a in psd_strategy()) {
            let r = pseudoinverse(&a, 1e-10).unwrap();
            let p = &r.pinv;
            let eps_m = 1e-8 * 1.0f64.max(a.abs().max());
            let eps_p = 1e-8 * 1.0f64.max(p.abs().max());
            prop_assert!((&a * p * &a - &a).abs().max() <= eps_m);
            prop_assert!((p * &a * p - p).abs().max() <= eps_p);
            let mp = &a * p;
            let pm = p * &a;
            prop_assert!((&mp - mp.transpose()).abs().max() <= eps_m.max(1e-8));
            prop_assert!((&pm - pm.transpose()).abs().max() <= eps_m.max(1e-8));
            let cutoff = r.cutoff;
            let above = r.eigenvalues.iter().filter(|l| l.abs() > cutoff).count();
            prop_assert_eq!(above, r.rank);
        }

        #[test]
        fn pinv_of_pinv_recovers_matrix(a in psd_strategy()) {
            let p = pseudoinverse(&a, 1e-10).unwrap();
            let pp = pseudoinverse(&p.pinv, 1e-10).unwrap();
            // rank-deficient random products can carry tiny eigenvalues that
            // the cutoff drops; compare on well-separated spectra only
            let eig = sorted_eigenvalues(&a);
            let hi = eig.iter().fold(0.0f64, |acc, l| acc.max(l.abs()));
            let well_separated = eig.iter().all(|l| l.abs() < 1e-12 * hi.max(1.0) || l.abs() > 1e-4 * hi);
            prop_assume!(well_separated);
            prop_assert!((pp.pinv - &a).abs().max() <= 1e-8 * 1.0f64.max(a.abs().max()));
        }

        #[test]
        fn constructed_range_members_pass(a in psd_strategy(), z in prop::collection::vec(-3.0f64..3.0, 5)) {
            let n = a.nrows();
            let v = &a * DVector::from_column_slice(&z[..n]);
            prop_assert!(range_membership(&v, &a, 1e-8).unwrap().member);
        }

        #[test]
        fn dagger_matches_one_by_one_pinv(a in prop::num::f64::NORMAL.prop_filter("not tiny", |a| a.abs() > 1e-12 && a.abs() < 1e12)) {
            let p = pseudoinverse(&DMatrix::from_element(1, 1, a), 1e-10).unwrap();
            let diff = (scalar_dagger(a, 1e-12) - p.pinv[(0, 0)]).abs();
            prop_assert!(diff <= 1e-12 * 1.0f64.max(1.0 / a.abs()));
        }
    }
}
