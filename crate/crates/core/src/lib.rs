//! Linear-complexity cross-attention kernels for bird's-eye-view perception.
//!
//! The crate implements the forward-pass machinery needed to fuse multi-camera
//! image features into a BEV query grid with state-space models instead of
//! softmax attention:
//!
//! * [`ssm`] — selective-SSM discretization, the recurrent scan, its
//!   semiseparable matrix-mixer dual, and the bidirectional (quasiseparable)
//!   combination.
//! * [`geometry`] — BEV grid construction, pillar lifting, camera projection
//!   and hit-mask computation.
//! * [`traversal`] — bijective 2D→1D flattening orders (row/column major,
//!   snake, patch-local scans).
//! * [`merge`] — the position-aware merge that interleaves query copies into
//!   flattened image-feature sequences at their projected locations.
//! * [`xqssm`] — the cross quasiseparable SSM: value tokens update state,
//!   interleaved query tokens read output with a zero discretization step;
//!   includes the analytic operation-count model.
//! * [`layer`] — the full spatial cross-SSM layer (masked projections,
//!   depthwise convolution, merge, scan, gated extraction, accumulation,
//!   normalization, residual) plus the bidirectional BEV self-attention block.
//! * [`baselines`] — dot-product, final-state, and deformable cross-attention
//!   references with analytic complexity estimators.
//! * [`scene`], [`tensor`], [`pipeline`], [`verify`] — the file formats,
//!   deterministic scene generator, end-to-end driver and invariant suite
//!   behind the CLI.

pub mod baselines;
pub mod consts;
pub mod error;
pub mod geometry;
pub mod layer;
pub mod merge;
pub mod pipeline;
pub mod rng;
pub mod scene;
pub mod ssm;
pub mod tensor;
pub mod traversal;
pub mod verify;
pub mod xqssm;

pub use error::{Error, Result};
