use half::f16;
use nalgebra::DMatrix;

use super::int8::Int8Codebook;
use crate::error::{ensure, Error, Result};
use crate::vq::Codebook;

/// The hyperparameters that shape a stored layer. Unlike [`super::QuantConfig`] this
/// carries nothing that only matters while quantizing (seed, damping, iteration caps).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    /// Codebook entry dimension `d`: consecutive columns sharing one index.
    pub dim: usize,
    /// Entries per codebook `n`.
    pub entries: usize,
    /// Rows per codebook block `k`.
    pub block_rows: usize,
    pub codebook_int8: bool,
    /// Low-rank correction rank, 0 when absent.
    pub lowrank_rank: usize,
}

impl Layout {
    /// Bits per stored index: `ceil(log2 n)`, zero for a single entry.
    pub fn index_bits(&self) -> u32 {
        index_bits(self.entries)
    }

    pub fn column_groups(&self, cols: usize) -> usize {
        cols.div_ceil(self.dim)
    }

    pub fn row_blocks(&self, rows: usize) -> usize {
        rows.div_ceil(self.block_rows)
    }

    /// Width of column group `g` (the last group may be narrower).
    pub fn group_width(&self, g: usize, cols: usize) -> usize {
        (cols - g * self.dim).min(self.dim)
    }

    /// Row range of block `b` (the last block may be shorter).
    pub fn block_range(&self, b: usize, rows: usize) -> std::ops::Range<usize> {
        let start = b * self.block_rows;
        start..(start + self.block_rows).min(rows)
    }
}

pub fn index_bits(entries: usize) -> u32 {
    assert!(entries >= 1);
    usize::BITS - (entries - 1).leading_zeros()
}

/// Codebook values as kept at rest.
#[derive(Debug, Clone, PartialEq)]
pub enum CodebookPayload {
    /// `n x width` half-precision values, row-major.
    Fp16(Vec<f16>),
    Int8(Int8Codebook),
}

/// One `n x width` codebook of a (row block, column group) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredCodebook {
    entries: usize,
    width: usize,
    payload: CodebookPayload,
}

impl StoredCodebook {
    /// Round a codebook to half precision.
    pub fn fp16(cb: &Codebook) -> Result<Self> {
        let mut values = Vec::with_capacity(cb.entries() * cb.dim());
        for i in 0..cb.entries() {
            for &v in cb.centroids().row(i).iter() {
                values.push(crate::tensorio::to_f16_checked(v)?);
            }
        }
        Ok(Self {
            entries: cb.entries(),
            width: cb.dim(),
            payload: CodebookPayload::Fp16(values),
        })
    }

    /// Round to half precision first, then map each dimension onto `0..=255`. The
    /// per-dimension bounds are then half-precision values themselves.
    pub fn int8(cb: &Codebook) -> Result<Self> {
        let half = Self::fp16(cb)?.centroids();
        let q = super::int8::quantize_codebook_int8(&half);
        Ok(Self {
            entries: cb.entries(),
            width: cb.dim(),
            payload: CodebookPayload::Int8(q),
        })
    }

    pub fn from_payload(entries: usize, width: usize, payload: CodebookPayload) -> Result<Self> {
        ensure!(
            entries >= 1 && width >= 1,
            Validation,
            "empty codebook shape"
        );
        match &payload {
            CodebookPayload::Fp16(v) => {
                ensure!(
                    v.len() == entries * width,
                    Validation,
                    "fp16 codebook holds {} values, expected {}",
                    v.len(),
                    entries * width
                );
                ensure!(
                    v.iter().all(|x| x.is_finite()),
                    Validation,
                    "fp16 codebook contains non-finite values"
                );
            }
            CodebookPayload::Int8(q) => {
                ensure!(
                    q.bytes.len() == entries * width
                        && q.mins.len() == width
                        && q.maxs.len() == width,
                    Validation,
                    "int8 codebook shape mismatch"
                );
                for (lo, hi) in q.mins.iter().zip(&q.maxs) {
                    ensure!(
                        lo.is_finite() && hi.is_finite() && lo <= hi,
                        Validation,
                        "int8 codebook bounds invalid: min {lo}, max {hi}"
                    );
                    ensure!(
                        is_half_exact(*lo) && is_half_exact(*hi),
                        Validation,
                        "int8 codebook bounds must be exactly representable in fp16"
                    );
                }
            }
        }
        Ok(Self {
            entries,
            width,
            payload,
        })
    }

    pub fn entries(&self) -> usize {
        self.entries
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn payload(&self) -> &CodebookPayload {
        &self.payload
    }

    /// Dequantized centroids in `f64`.
    pub fn centroids(&self) -> Codebook {
        let m = match &self.payload {
            CodebookPayload::Fp16(v) => {
                DMatrix::from_row_iterator(self.entries, self.width, v.iter().map(|h| h.to_f64()))
            }
            CodebookPayload::Int8(q) => q.dequantize().centroids().clone(),
        };
        Codebook::new(m).expect("stored codebook values are finite")
    }
}

pub(crate) fn is_half_exact(v: f64) -> bool {
    f16::from_f64(v).to_f64() == v
}

/// Rank-`r` correction `A B` added on top of the codebook reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRank {
    /// `N x r`.
    pub a: DMatrix<f64>,
    /// `r x M`.
    pub b: DMatrix<f64>,
}

impl LowRank {
    pub fn rank(&self) -> usize {
        self.a.ncols()
    }

    /// Round both factors to half precision (their at-rest form).
    pub fn to_half(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        let round = |m: DMatrix<f64>| -> Result<DMatrix<f64>> {
            let mut out = m;
            for v in out.iter_mut() {
                *v = crate::tensorio::to_f16_checked(*v)?.to_f64();
            }
            Ok(out)
        };
        Ok(Self {
            a: round(a)?,
            b: round(b)?,
        })
    }
}

/// A quantized `N x M` matrix: index matrix, per-cell codebooks and an optional
/// low-rank correction.
///
/// Every stored value is exactly representable at its at-rest precision, so
/// serialization is lossless.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    rows: usize,
    cols: usize,
    layout: Layout,
    /// `N x ceil(M/d)` entries, row-major, each `< n`.
    index: Vec<u32>,
    /// `ceil(N/k) x ceil(M/d)` codebooks, row-block-major.
    codebooks: Vec<StoredCodebook>,
    lowrank: Option<LowRank>,
}

impl QuantizedLayer {
    pub fn new(
        rows: usize,
        cols: usize,
        layout: Layout,
        index: Vec<u32>,
        codebooks: Vec<StoredCodebook>,
        lowrank: Option<LowRank>,
    ) -> Result<Self> {
        ensure!(
            rows >= 1 && cols >= 1,
            Validation,
            "layer must be at least 1x1"
        );
        ensure!(
            layout.dim >= 1 && layout.entries >= 1 && layout.block_rows >= 1,
            Validation,
            "layout parameters must be positive: {layout:?}"
        );
        ensure!(
            layout.entries <= u32::MAX as usize,
            Validation,
            "too many codebook entries"
        );
        let groups = layout.column_groups(cols);
        let blocks = layout.row_blocks(rows);
        ensure!(
            index.len() == rows * groups,
            Validation,
            "index holds {} entries, expected {}",
            index.len(),
            rows * groups
        );
        if let Some(bad) = index.iter().find(|&&i| i as usize >= layout.entries) {
            return Err(Error::Validation(format!(
                "index entry {bad} out of range for {} entries",
                layout.entries
            )));
        }
        ensure!(
            codebooks.len() == blocks * groups,
            Validation,
            "{} codebooks, expected {}",
            codebooks.len(),
            blocks * groups
        );
        for (pos, cb) in codebooks.iter().enumerate() {
            let g = pos % groups;
            ensure!(
                cb.entries() == layout.entries && cb.width() == layout.group_width(g, cols),
                Validation,
                "codebook {pos} has shape {}x{}, expected {}x{}",
                cb.entries(),
                cb.width(),
                layout.entries,
                layout.group_width(g, cols)
            );
            let is_int8 = matches!(cb.payload(), CodebookPayload::Int8(_));
            ensure!(
                is_int8 == layout.codebook_int8,
                Validation,
                "codebook {pos} precision does not match the layout's int8 flag"
            );
        }
        match &lowrank {
            Some(lr) => {
                ensure!(
                    lr.rank() == layout.lowrank_rank
                        && lr.rank() >= 1
                        && lr.a.nrows() == rows
                        && lr.b.nrows() == lr.rank()
                        && lr.b.ncols() == cols,
                    Validation,
                    "low-rank factors have inconsistent shapes"
                );
                ensure!(
                    lr.a.iter()
                        .chain(lr.b.iter())
                        .all(|&v| v.is_finite() && is_half_exact(v)),
                    Validation,
                    "low-rank factors must be finite and exactly representable in fp16"
                );
            }
            None => ensure!(
                layout.lowrank_rank == 0,
                Validation,
                "layout declares rank {} but no low-rank factors were given",
                layout.lowrank_rank
            ),
        }
        Ok(Self {
            rows,
            cols,
            layout,
            index,
            codebooks,
            lowrank,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn column_groups(&self) -> usize {
        self.layout.column_groups(self.cols)
    }

    pub fn row_blocks(&self) -> usize {
        self.layout.row_blocks(self.rows)
    }

    pub fn index(&self) -> &[u32] {
        &self.index
    }

    /// Index entry for row `i`, column group `j`.
    pub fn index_at(&self, i: usize, j: usize) -> usize {
        self.index[i * self.column_groups() + j] as usize
    }

    pub fn codebooks(&self) -> &[StoredCodebook] {
        &self.codebooks
    }

    /// Codebook of row block `b`, column group `j`.
    pub fn codebook(&self, b: usize, j: usize) -> &StoredCodebook {
        &self.codebooks[b * self.column_groups() + j]
    }

    pub fn lowrank(&self) -> Option<&LowRank> {
        self.lowrank.as_ref()
    }

    /// Copy of this layer with the low-rank correction replaced.
    pub fn with_lowrank(&self, lowrank: Option<LowRank>) -> Result<Self> {
        let mut layout = self.layout;
        layout.lowrank_rank = lowrank.as_ref().map_or(0, LowRank::rank);
        Self::new(
            self.rows,
            self.cols,
            layout,
            self.index.clone(),
            self.codebooks.clone(),
            lowrank,
        )
    }
}
