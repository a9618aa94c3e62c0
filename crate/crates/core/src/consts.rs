//! Numeric tolerances and small constants, centralized so every check in the
//! crate (tests, verify suite, acceptance) pins the same values.

/// Tolerances used throughout the kernels and their verification.
#[derive(Debug, Clone, Copy)]
pub struct Tolerances {
    /// Max absolute error between the recurrent scan and the matrix-mixer
    /// dual at 64-bit precision.
    pub scan_duality_f64: f64,
    /// Max relative error for the same comparison at 32-bit precision.
    pub scan_duality_f32_rel: f32,
    /// Max absolute error between the cross-scan and its oracles.
    pub xqssm_oracle: f64,
    /// Max absolute error for the bidirectional dense-mixer oracle.
    pub hydra_oracle: f64,
    /// Duplication-invariance tolerance for average-mode accumulation.
    pub duplication_invariance: f64,
    /// Relative tolerance for the instrumented-counter vs analytic op count.
    pub flop_counter_rel: f64,
    /// Relative tolerance on complexity-report ratios vs the reference table.
    pub scaling_ratio_rel: f64,
    /// Homogeneous-divide cutoff: projections with w below this are invalid.
    pub projection_w_eps: f64,
    /// Epsilon inside RMS normalization denominators.
    pub rms_eps: f64,
}

/// The single tolerance record used by default everywhere.
pub const TOL: Tolerances = Tolerances {
    scan_duality_f64: 1e-10,
    scan_duality_f32_rel: 1e-3,
    xqssm_oracle: 1e-10,
    hydra_oracle: 1e-10,
    duplication_invariance: 1e-9,
    flop_counter_rel: 0.05,
    scaling_ratio_rel: 0.30,
    projection_w_eps: 1e-5,
    rms_eps: 1e-6,
};

/// Sequence length above which decay products are accumulated in log space.
pub const LOG_SPACE_PRODUCT_MIN_LEN: usize = 64;
