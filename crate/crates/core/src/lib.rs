//! Post-training compression of weight matrices into codebook/index form.
//!
//! A weight matrix `W` (`N x M`) is split into width-`d` column groups and `k`-row
//! blocks. Every (block, group) cell gets an `n`-entry codebook, and each `d`-wide row
//! segment is replaced by an index into it. Codebooks are fitted with k-means under the
//! metric induced by the calibration Hessian, groups are committed greedily by
//! second-order loss, and each committed group's error is pushed onto the remaining
//! columns through the inverse Hessian.
//!
//! Modules:
//! * [`tensorio`]: `ATQT` dense matrix container and calibration ingestion.
//! * [`hessian`]: damped calibration Hessian, its inverse and group elimination.
//! * [`vq`]: metric-weighted k-means, single-point flip search, Lloyd checks.
//! * [`quantizer`]: the quantization loop, int8 codebooks, low-rank residual.
//! * [`format`]: `ATQZ` container, dequantization and bits-per-weight accounting.
//! * [`cli`]: the `hvq` command line.

pub mod cli;
pub mod error;
pub mod format;
pub mod hessian;
pub mod quantizer;
pub mod rng;
pub mod tensorio;
pub mod vq;

pub use error::{Error, Result};
pub use format::{bits_per_weight, dequantize, deserialize, serialize, BitReport};
pub use hessian::{GroupSelector, HessianState};
pub use quantizer::{quantize_matrix, QuantConfig, QuantizedLayer};
pub use tensorio::{CalibrationBatch, Precision, WeightMatrix};
