//! Quantitative MRI reconstruction and mapping toolkit.
//!
//! The crate covers the full desk-scale study pipeline:
//!
//! * [`tensor`] — dense tensors with a reverse-mode autodiff graph,
//! * [`phantom`] — synthetic tissue maps, relaxation-weighted frames, coil profiles,
//! * [`kspace`] — centered Fourier operators, undersampling masks, the encoding operator,
//! * [`coils`] — coil-sensitivity estimation, conjugate combination, CG-SENSE,
//! * [`network`] — shared-weight U-Net with temporal-attention (LT) blocks and the
//!   CSM refinement network,
//! * [`pipeline`] — zero-fill / single-coil / MoDL-style reconstruction and training,
//! * [`mapping`] — Levenberg–Marquardt T1/T2 curve fitting,
//! * [`metrics`] — ROI cropping and PSNR/SSIM/NMSE/RMSE,
//! * [`io`] — the tensor container file, checkpoints, metric logs.

pub mod coils;
pub mod error;
pub mod fft;
pub mod io;
pub mod kspace;
pub mod mapping;
pub mod metrics;
pub mod network;
pub mod phantom;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, Graph, Tensor, Var};
