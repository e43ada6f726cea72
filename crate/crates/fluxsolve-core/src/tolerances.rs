//! Every numeric tolerance and frozen reference constant used by the checks
//! and the acceptance suite, in one audited place.
//!
//! Each constant documents what it bounds and why the value is appropriate
//! for `f64` arithmetic at the problem sizes this crate targets (tens of
//! cells, tens of steps, feature width 64). Tests must reference these
//! constants instead of inlining literals so that an audit of the gate is a
//! read of this file.

/// Absolute bound on the time-integrated conservation error of a trajectory,
/// `Σ_t Δt·|Σ_i V_i (u_i(t) − u_i(0))|`. Flux-form updates cancel face
/// contributions exactly, leaving only rounding noise (~1e-16 per step), so
/// 1e-7 holds with many orders of margin while still catching any
/// non-conservative code path.
pub const CONSERVATION_ABS: f64 = 1e-7;

/// Relative bound on the drift of the volume-weighted total per single step
/// or per solver iterate. Pure rounding noise at our sizes is below 1e-14.
pub const CONSERVATION_STEP_REL: f64 = 1e-12;

/// Absolute bound for agreement between the identity-gate network step and
/// the blended finite-volume step over a 10-step run. Both paths share the
/// association order of the face-value average and all rescalings are exact
/// powers of two, so the difference is a few ulps.
pub const IDENTITY_GATE_ABS: f64 = 1e-12;

/// Relative bound on total-feature drift in the structural conservation
/// checks (antisymmetric message passing on random graphs).
pub const STRUCTURAL_DRIFT_REL: f64 = 1e-12;

/// Absolute bound on decode(encode(u)) − u for random well-conditioned
/// encoders, and on the stored-versus-recomputed decoder at checkpoint load.
pub const ROUNDTRIP_ABS: f64 = 1e-10;

/// Absolute bound on equivariance residuals: space–time rescaling of
/// predictions, mirror symmetry of trajectories, and orthogonal equivariance
/// of the vector-feature gate.
pub const EQUIVARIANCE_ABS: f64 = 1e-10;

/// Relative bound on gate-input invariance under the space–time rescaling
/// `(Δx, Δt, c, D) → (λΔx, τΔt, (λ/τ)c, (λ²/τ)D)`.
pub const GATE_INPUT_REL: f64 = 1e-12;

/// Maximum relative error between reverse-mode and central finite-difference
/// gradients for smooth nonlinear compositions, probed at `GRADCHECK_STEP`.
/// Central differences carry an O(step²) truncation term plus an
/// O(ulp/step) rounding term, which at step 1e-6 meet near 1e-10..1e-7 for
/// well-scaled values; 1e-5 is a safe ceiling.
pub const GRADCHECK_REL: f64 = 1e-5;

/// Tighter bound for purely linear functions, where central differences are
/// exact up to rounding.
pub const GRADCHECK_LINEAR_REL: f64 = 1e-9;

/// Central-difference step for the gradient checker on single-op losses.
pub const GRADCHECK_STEP: f64 = 1e-6;

/// Central-difference step for gradient checks of the full composed network
/// step. The composed loss is O(1) while some parameter sensitivities (gate
/// biases behind saturated activations) are ~1e-6, so the cancellation noise
/// `ulp(loss)/step` at step 1e-6 would drown them; 1e-4 keeps truncation at
/// O(1e-8) while pushing the noise to O(1e-12).
pub const GRADCHECK_COMPOSED_STEP: f64 = 1e-4;

/// Number of randomized probes per gradient check.
pub const GRADCHECK_PROBES: usize = 100;

/// Floor in the relative-error denominator of the gradient checker; guards
/// against meaningless ratios when both gradients vanish.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

/// Relative conservation bound per fixed-point iterate of the step solver.
pub const SOLVER_ITERATE_REL: f64 = 1e-10;

/// Guard on the denominator of the step-length ratio in the fixed-point
/// solver; below this the ratio is numerically meaningless and the step
/// length falls back to 1.
pub const STEP_LENGTH_DENOM_GUARD: f64 = 1e-30;

/// Clamp range for the fixed-point solver step length.
pub const STEP_LENGTH_CLAMP: (f64, f64) = (1e-3, 1e3);

/// Encoder norms below this are treated as rank-deficient: no decoder is
/// built and training refuses to start.
pub const DECODER_MIN_NORM_SQ: f64 = 1e-12;

/// Reference grid-refinement RMSE table for the blended-scheme study at
/// `c = 0.2`, `D = 1e-4`, unit amplitude, Courant number 0.2:
/// `(n_cells, dx, rmse)`.
pub const CONVERGENCE_TABLE: [(usize, f64, f64); 5] = [
    (5, 0.2, 0.128),
    (10, 0.1, 0.077),
    (20, 0.05, 0.043),
    (50, 0.02, 0.018),
    (100, 0.01, 0.009),
];

/// Per-entry relative tolerance when matching `CONVERGENCE_TABLE`.
pub const CONVERGENCE_RTOL: f64 = 0.30;

/// Acceptable range for the fitted log–log slope of RMSE against `dx`
/// (order of accuracy between first and second order with headroom).
pub const CONVERGENCE_SLOPE_RANGE: (f64, f64) = (0.8, 2.2);

/// The trained network must reach at most this fraction of the blended
/// finite-volume baseline's test MSE.
pub const LEARNING_GAIN_RATIO: f64 = 0.1;

/// Residual above which the deliberately broken flux symmetry (unshared
/// vertex gate) must land for the negative control to count as detected.
pub const BREAK_DETECTION_FLOOR: f64 = 1e-9;

/// Relative tolerance used when the explicit-step run length `T/Δt` must be
/// integral.
pub const STEP_COUNT_REL: f64 = 1e-9;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_is_montonically_decreasing_in_dx() {
        for pair in CONVERGENCE_TABLE.windows(2) {
            assert!(pair[0].1 > pair[1].1, "dx strictly decreasing");
            assert!(pair[0].2 > pair[1].2, "rmse strictly decreasing");
        }
    }

    #[test]
    fn clamp_range_is_ordered() {
        assert!(STEP_LENGTH_CLAMP.0 < STEP_LENGTH_CLAMP.1);
        assert!(CONVERGENCE_SLOPE_RANGE.0 < CONVERGENCE_SLOPE_RANGE.1);
    }
}
