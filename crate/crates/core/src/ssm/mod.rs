//! Selective state-space scans.
//!
//! [`kernels`] holds the zero-order-hold discretization, the LTI
//! recurrence/convolution pair, and the input-dependent (selective) scan
//! with its hand-derived adjoint. [`parallel`] provides the associative
//! prefix-scan formulation of the same recurrence. [`block`] wraps the
//! scan into a token-level layer that runs over several sequence
//! orderings and gates the result.

pub mod block;
pub mod kernels;
pub mod parallel;

pub use block::{
    invert_perm, DirectionNodes, DirectionParams, MdScanNodes, MdScanParams, ScanDirection,
    TokenGrid,
};
pub use kernels::{
    causal_conv1d, discretize_zoh, lti_kernel, lti_scan, selective_scan, SelectiveGrads,
    SelectiveOut,
};
pub use parallel::{combine, prefix_scan_parallel, prefix_scan_sequential, ScanElem, SCAN_IDENTITY};
