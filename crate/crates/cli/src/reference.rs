//! Reference values for the built-in example (`μ₁ = μ₂ = 1`, `t = 0`,
//! `x = 1`), given to four decimals.

pub const TOLERANCE: f64 = 5e-4;

/// Stage-indexed rows `[stage][asset]`.
pub type Table = [[f64; 3]; 4];

pub const OPEN_LOOP_GAIN: Table = [
    [0.1391, 0.2257, 0.8038],
    [0.1842, 0.2988, 1.0643],
    [0.2676, 0.4341, 1.5461],
    [0.4739, 0.7689, 2.7381],
];
pub const OPEN_LOOP_OFFSET: Table = OPEN_LOOP_GAIN;

pub const FEEDBACK_GAIN: Table = [
    [0.0077, 0.0124, 0.0443],
    [0.0168, 0.0273, 0.0971],
    [0.0333, 0.0540, 0.1923],
    [0.4739, 0.7689, 2.7381],
];
pub const FEEDBACK_OFFSET: Table = [
    [0.0730, 0.1185, 0.4220],
    [0.0922, 0.1496, 0.5328],
    [0.1221, 0.1981, 0.7055],
    [0.4739, 0.7689, 2.7381],
];

/// Pure-feedback part used for the mixed table.
pub const MIXED_PHI: Table = [
    [-0.0290, 0.1825, -1.5651],
    [-1.0667, 0.9337, 0.3503],
    [-3.0292, -0.4570, 1.2424],
    [-0.5078, -0.3206, 0.0125],
];
pub const MIXED_GAIN: Table = [
    [0.2274, 0.3689, 1.3137],
    [0.3611, 0.5858, 2.0862],
    [0.3382, 0.5486, 1.9537],
    [0.4739, 0.7689, 2.7381],
];
pub const MIXED_OFFSET: Table = [
    [0.2195, 0.3561, 1.2683],
    [0.3543, 0.5747, 2.0468],
    [0.3365, 0.5460, 1.9443],
    [0.4739, 0.7689, 2.7381],
];
/// Ascending eigenvalues of `𝒪_k` for [`MIXED_PHI`].
pub const MIXED_O_EIGENVALUES: Table = [
    [0.0143, 0.1050, 0.3073],
    [0.0075, 0.0534, 0.1571],
    [0.0063, 0.0481, 0.1404],
    [0.0041, 0.0318, 0.0930],
];
