//! Numerical tolerances shared by the runtime checks, the verification
//! suites and the tests.

/// Step for central finite differences.
pub const FD_STEP: f64 = 1e-5;

/// Autodiff vs finite differences, per primitive and per random network.
pub const GRADCHECK_REL: f64 = 1e-4;

/// Relative error floor: below this magnitude errors are measured absolutely.
pub const GRADCHECK_FLOOR: f64 = 1e-2;

/// Outer gradient through a recorded inner step vs finite differences.
pub const SECOND_ORDER_REL: f64 = 1e-3;

/// Reconstruction and projection identities of the analytic transform.
pub const RECONSTRUCTION: f64 = 1e-10;

/// Probability vectors sum to one within this bound.
pub const PROB_SUM: f64 = 1e-9;

/// Energy against an extended-precision reference.
pub const ENERGY_ORACLE: f64 = 1e-10;

/// Algebraic identities of the energy and softmax under logit shifts.
pub const SHIFT_IDENTITY: f64 = 1e-12;

/// Logit fill value for classes hidden from a task head.
pub const MASKED_LOGIT: f64 = -1e30;
