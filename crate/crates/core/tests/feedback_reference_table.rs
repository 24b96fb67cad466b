//! The feedback rows of the example's reference table, taken as a policy,
//! admit profitable single-stage deviations, while the computed feedback
//! strategy admits none. This independent check sides with the computed
//! values wherever the two disagree.

use nalgebra::DVector;

use mveq::feedback::solve_feedback;
use mveq::market::{derive_excess_moments, preset, EXAMPLE_PRESET};
use mveq::oracle::{build_matched_tree, verify_equilibrium, Continuation};
use mveq::policy::AffinePolicy;
use mveq::{PolicyKind, Tolerances};

const REFERENCE_GAIN: [[f64; 3]; 4] = [
    [0.0077, 0.0124, 0.0443],
    [0.0168, 0.0273, 0.0971],
    [0.0333, 0.0540, 0.1923],
    [0.4739, 0.7689, 2.7381],
];
const REFERENCE_OFFSET: [[f64; 3]; 4] = [
    [0.0730, 0.1185, 0.4220],
    [0.0922, 0.1496, 0.5328],
    [0.1221, 0.1981, 0.7055],
    [0.4739, 0.7689, 2.7381],
];

/// Tolerance on relative deviation gaps. It is loose enough that rounding the
/// reference to four decimals cannot cause a failure.
const REL_TOL: f64 = 1e-4;

#[test]
fn reference_feedback_rows_are_not_an_equilibrium() {
    let spec = preset(EXAMPLE_PRESET).unwrap();
    let moments = derive_excess_moments(&spec);
    let rows = |t: &[[f64; 3]; 4]| t.iter().map(|r| DVector::from_row_slice(r)).collect();
    let reference = AffinePolicy {
        kind: PolicyKind::Feedback,
        start_stage: 0,
        gains: rows(&REFERENCE_GAIN),
        offsets: rows(&REFERENCE_OFFSET),
    };
    let computed = solve_feedback(&moments, &spec, &Tolerances::default()).unwrap().policy;
    let tree = build_matched_tree(&moments, 7, 1).unwrap();

    let ours = verify_equilibrium(&tree, &spec, &Continuation::feedback(&computed), REL_TOL).unwrap();
    assert!(ours.passed, "computed strategy: min gap {:.3e}", ours.min_gap);

    let theirs = verify_equilibrium(&tree, &spec, &Continuation::feedback(&reference), REL_TOL).unwrap();
    assert!(!theirs.passed);
    // Stage 3 coincides with the computed policy; every earlier stage has a
    // profitable deviation at some node.
    for stage in 0..3 {
        assert!(
            theirs.failures().any(|r| r.stage == stage),
            "no failing node at stage {stage}"
        );
    }
    assert!(theirs.failures().all(|r| r.stage < 3));
}
