//! Selective state-space video super-resolution toolkit.
//!
//! The crate implements the full stack needed to study flow-aligned
//! gather-scatter temporal propagation at desk scale:
//!
//! * [`tensor`] — dense row-major `f64` tensors, neural primitives,
//!   PPM/GSTN file formats, and PSNR/SSIM metrics.
//! * [`autodiff`] — a tape-based reverse-mode differentiator over the
//!   operation set used by the model, plus a finite-difference checker.
//! * [`ssm`] — zero-order-hold discretization, LTI scan/kernel duality,
//!   input-selective scans (sequential and prefix-scan forms), and the
//!   multi-direction scan block.
//! * [`align`] — optical-flow containers, backward bilinear warping,
//!   validity masks, and synthetic ground-truth flows.
//! * [`gsm`] — the gather / temporal-first flatten / scan / scatter
//!   mechanism and the sliding window propagation pass.
//! * [`attention`] — shifted-window multi-head self-attention.
//! * [`pipeline`] — the end-to-end x4 upscaler, Adam training loop,
//!   evaluation, and checkpoints.
//! * [`data`] — synthetic clip generation with exact flows.
//! * [`checks`], [`ablate`], [`bench`] — invariant suites, the
//!   alignment/anchor/scatter ablation study, and the scan-vs-attention
//!   scaling benchmark backing the CLI.

pub mod ablate;
pub mod align;
pub mod attention;
pub mod autodiff;
pub mod bench;
pub mod checks;
pub mod data;
pub mod gsm;
pub mod math;
pub mod pipeline;
pub mod ssm;
pub mod tensor;

mod error;

pub use error::{Error, Result};
pub use tensor::Tensor;
