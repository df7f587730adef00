//! Dense matrix container (`ATQT`) and calibration ingestion.
//!
//! Layout, all little-endian, no padding:
//!
//! | bytes | field |
//! |-------|-------|
//! | 4     | magic `ATQT` |
//! | 4     | version `u32 = 1` |
//! | 1     | dtype (`0` = fp64, `1` = fp32, `2` = fp16) |
//! | 3     | reserved, zero |
//! | 8     | rows `u64` |
//! | 8     | cols `u64` |
//! | ...   | `rows * cols` elements, row-major |
//!
//! Values are always held as `f64` in memory regardless of storage precision.

use std::fs;
use std::path::Path;

use half::f16;
use nalgebra::DMatrix;

use crate::error::{ensure, Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"ATQT";
pub const TENSOR_VERSION: u32 = 1;
pub const TENSOR_HEADER_LEN: usize = 28;

/// Largest magnitude accepted for fp16 storage. Values in `(65504, 65520]` saturate to
/// `f16::MAX`; anything larger is an overflow.
pub const FP16_SATURATION_LIMIT: f64 = 65520.0;

/// On-disk element precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Fp64,
    Fp32,
    Fp16,
}

impl Precision {
    pub fn code(self) -> u8 {
        match self {
            Precision::Fp64 => 0,
            Precision::Fp32 => 1,
            Precision::Fp16 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Precision::Fp64),
            1 => Ok(Precision::Fp32),
            2 => Ok(Precision::Fp16),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }

    pub fn bytes_per_element(self) -> usize {
        match self {
            Precision::Fp64 => 8,
            Precision::Fp32 => 4,
            Precision::Fp16 => 2,
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fp64" => Ok(Precision::Fp64),
            "fp32" => Ok(Precision::Fp32),
            "fp16" => Ok(Precision::Fp16),
            other => Err(Error::Validation(format!(
                "unknown precision {other:?}, expected fp64, fp32 or fp16"
            ))),
        }
    }
}

/// A dense, finite, non-empty `rows x cols` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    inner: DMatrix<f64>,
}

impl WeightMatrix {
    pub fn new(inner: DMatrix<f64>) -> Result<Self> {
        ensure!(
            inner.nrows() >= 1 && inner.ncols() >= 1,
            Validation,
            "weight matrix must be at least 1x1, got {}x{}",
            inner.nrows(),
            inner.ncols()
        );
        check_finite(inner.as_slice(), "weight matrix")?;
        Ok(Self { inner })
    }

    pub fn from_row_slice(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        ensure!(
            data.len() == rows * cols,
            Validation,
            "expected {} values for a {rows}x{cols} matrix, got {}",
            rows * cols,
            data.len()
        );
        Self::new(DMatrix::from_row_slice(rows, cols, data))
    }

    pub fn rows(&self) -> usize {
        self.inner.nrows()
    }

    pub fn cols(&self) -> usize {
        self.inner.ncols()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.inner
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.inner
    }

    /// Row-major copy of the values.
    pub fn to_row_major(&self) -> Vec<f64> {
        row_major(&self.inner)
    }
}

/// Activation samples, one row per sample, used to build the layer Hessian.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationBatch {
    samples: DMatrix<f64>,
}

impl CalibrationBatch {
    /// `samples` is `S x M`; `S` must be at least one.
    pub fn new(samples: DMatrix<f64>) -> Result<Self> {
        ensure!(
            samples.nrows() >= 1,
            Validation,
            "calibration batch is empty; at least one sample is needed to build a Hessian"
        );
        ensure!(
            samples.ncols() >= 1,
            Validation,
            "calibration samples must have dimension >= 1"
        );
        check_finite(samples.as_slice(), "calibration batch")?;
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }

    pub fn samples(&self) -> &DMatrix<f64> {
        &self.samples
    }
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Validation(format!(
            "{what} contains a non-finite value at flat position {pos}"
        )));
    }
    Ok(())
}

pub(crate) fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        out.extend(m.row(i).iter());
    }
    out
}

/// Convert one value to fp16, saturating the narrow band just above `f16::MAX`.
pub(crate) fn to_f16_checked(v: f64) -> Result<f16> {
    if v.abs() > FP16_SATURATION_LIMIT {
        return Err(Error::Overflow(format!(
            "value {v} exceeds the fp16 range (limit {FP16_SATURATION_LIMIT})"
        )));
    }
    let h = f16::from_f64(v);
    if h.is_infinite() {
        Ok(if v > 0.0 { f16::MAX } else { f16::MIN })
    } else {
        Ok(h)
    }
}

/// Encode a row-major slice as an `ATQT` byte image.
pub fn encode_tensor(
    rows: usize,
    cols: usize,
    data: &[f64],
    precision: Precision,
) -> Result<Vec<u8>> {
    ensure!(
        data.len() == rows * cols,
        Validation,
        "payload has {} values but dims are {rows}x{cols}",
        data.len()
    );
    let mut out =
        Vec::with_capacity(TENSOR_HEADER_LEN + data.len() * precision.bytes_per_element());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.push(precision.code());
    out.extend_from_slice(&[0u8; 3]);
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
    match precision {
        Precision::Fp64 => {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Precision::Fp32 => {
            for &v in data {
                let f = v as f32;
                if f.is_infinite() {
                    return Err(Error::Overflow(format!("value {v} exceeds the fp32 range")));
                }
                out.extend_from_slice(&f.to_le_bytes());
            }
        }
        Precision::Fp16 => {
            for &v in data {
                out.extend_from_slice(&to_f16_checked(v)?.to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Decode an `ATQT` byte image into `(rows, cols, row-major values)`.
///
/// Zero-sized dims are accepted here; callers apply their own shape policy.
pub fn decode_tensor(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    ensure!(
        bytes.len() >= TENSOR_HEADER_LEN,
        Format,
        "tensor header truncated: {} bytes, need {TENSOR_HEADER_LEN}",
        bytes.len()
    );
    ensure!(
        &bytes[0..4] == TENSOR_MAGIC,
        Format,
        "bad tensor magic {:?}",
        &bytes[0..4]
    );
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    ensure!(
        version == TENSOR_VERSION,
        Format,
        "unsupported tensor version {version}"
    );
    let precision = Precision::from_code(bytes[8])?;
    ensure!(
        bytes[9..12] == [0, 0, 0],
        Format,
        "reserved header bytes are not zero"
    );
    let rows = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let cols = u64::from_le_bytes(bytes[20..28].try_into().unwrap());

    let payload = &bytes[TENSOR_HEADER_LEN..];
    let expected = rows
        .checked_mul(cols)
        .and_then(|c| c.checked_mul(precision.bytes_per_element() as u64));
    ensure!(
        expected == Some(payload.len() as u64),
        Corruption,
        "header declares {rows}x{cols} {precision:?} ({} bytes) but payload holds {} bytes",
        expected.map_or("overflowing".to_string(), |e| e.to_string()),
        payload.len()
    );
    let (rows, cols) = (rows as usize, cols as usize);

    let data: Vec<f64> = match precision {
        Precision::Fp64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Precision::Fp32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Precision::Fp16 => payload
            .chunks_exact(2)
            .map(|c| f16::from_le_bytes(c.try_into().unwrap()).to_f64())
            .collect(),
    };
    check_finite(&data, "tensor payload")?;
    Ok((rows, cols, data))
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<WeightMatrix> {
    let bytes = fs::read(path)?;
    let (rows, cols, data) = decode_tensor(&bytes)?;
    WeightMatrix::from_row_slice(rows, cols, &data)
}

pub fn store_matrix(m: &WeightMatrix, path: impl AsRef<Path>, precision: Precision) -> Result<()> {
    let bytes = encode_tensor(m.rows(), m.cols(), &m.to_row_major(), precision)?;
    fs::write(path, bytes)?;
    Ok(())
}

/// Read an `S x M` activation matrix. When `expected_dim` is given, `M` must match it.
pub fn ingest_calibration(
    path: impl AsRef<Path>,
    expected_dim: Option<usize>,
) -> Result<CalibrationBatch> {
    let bytes = fs::read(path)?;
    let (rows, cols, data) = decode_tensor(&bytes)?;
    if let Some(m) = expected_dim {
        ensure!(
            cols == m,
            Validation,
            "calibration dimension {cols} does not match weight column count {m}"
        );
    }
    ensure!(
        rows >= 1,
        Validation,
        "calibration file holds no samples; at least one is needed to build a Hessian"
    );
    CalibrationBatch::new(DMatrix::from_row_slice(rows, cols, &data))
}
