//! `ATQZ` container for quantized layers, dequantization and bit accounting.
//!
//! Layout, little-endian, no padding between fields:
//!
//! ```text
//! header (39 bytes)
//!   magic "ATQZ" | version u32 = 1 | N u64 | M u64 | d u16 | n u32 | k u32
//!   flags u8 (bit0 int8 codebooks, bit1 low-rank present) | r u32
//! section table (4 x (offset u64, length u64) = 64 bytes)
//!   INDEX, CODEBOOK, LOWRANK_A, LOWRANK_B; absent sections have length 0
//! sections, contiguous, in table order
//! ```
//!
//! * INDEX: for each row block, its `rows_b x ceil(M/d)` entries row-major, each
//!   `ceil(log2 n)` bits, least significant bit first, bytes filled from bit 0. Each
//!   row block is zero-padded to a byte boundary, so the section is
//!   `sum_b ceil(rows_b * ceil(M/d) * bits / 8)` bytes.
//! * CODEBOOK: codebooks ordered row block, column group, entry, dimension. fp16
//!   values, or for int8 codebooks the `n x width` byte grid followed by `width`
//!   `(min, max)` fp16 pairs.
//! * LOWRANK_A (`N x r`) and LOWRANK_B (`r x M`): fp16, row-major.

use half::f16;
use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{ensure, Error, Result};
use crate::quantizer::{
    index_bits, CodebookPayload, Int8Codebook, Layout, LowRank, QuantizedLayer, StoredCodebook,
};
use crate::tensorio::WeightMatrix;

pub const LAYER_MAGIC: &[u8; 4] = b"ATQZ";
pub const LAYER_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 39;
pub const SECTION_COUNT: usize = 4;
pub const TABLE_LEN: usize = SECTION_COUNT * 16;
/// Fixed bytes before the first section.
pub const PREAMBLE_LEN: usize = HEADER_LEN + TABLE_LEN;

const FLAG_INT8: u8 = 0b01;
const FLAG_LOWRANK: u8 = 0b10;

/// Upper bound on `N * ceil(M/d)` accepted by the reader.
pub const MAX_INDEX_ENTRIES: u64 = 1 << 32;

/// Average storage bits per weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BitReport {
    /// Codebook bits per weight, `16 n / k` (8 for int8 codebooks).
    pub b_c: f64,
    /// Index bits per weight, `ceil(log2 n) / d`.
    pub b_i: f64,
    /// Low-rank bits per weight, `16 r (N + M) / (N M)`.
    pub b_lr: f64,
    pub b_total: f64,
    /// Bytes of the file not covered by `ceil(b_total * N * M / 8)`: header, section
    /// table, int8 bounds, ragged-edge codebooks and index padding.
    pub file_overhead_bytes: u64,
    /// Exact size of the serialized layer.
    pub file_size_bytes: u64,
}

/// Byte length of each section for a layer of this shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SectionSizes {
    pub index: u64,
    pub codebook: u64,
    pub lowrank_a: u64,
    pub lowrank_b: u64,
}

impl SectionSizes {
    pub fn total(&self) -> u64 {
        self.index + self.codebook + self.lowrank_a + self.lowrank_b
    }

    fn as_array(&self) -> [u64; SECTION_COUNT] {
        [self.index, self.codebook, self.lowrank_a, self.lowrank_b]
    }
}

/// Section sizes computed with overflow checks; `None` if they do not fit in `u64`.
pub fn section_sizes(layout: &Layout, rows: u64, cols: u64) -> Option<SectionSizes> {
    let (d, n, k, r) = (
        layout.dim as u64,
        layout.entries as u64,
        layout.block_rows as u64,
        layout.lowrank_rank as u64,
    );
    let groups = cols.div_ceil(d);
    let blocks = rows.div_ceil(k);
    let bits = index_bits(layout.entries) as u64;
    let full = rows / k;
    let tail = rows % k;
    let per_block =
        |rb: u64| -> Option<u64> { Some(rb.checked_mul(groups)?.checked_mul(bits)?.div_ceil(8)) };
    let index = per_block(k)?.checked_mul(full)?.checked_add(if tail > 0 {
        per_block(tail)?
    } else {
        0
    })?;
    let codebook = if layout.codebook_int8 {
        blocks.checked_mul(n.checked_mul(cols)?.checked_add(cols.checked_mul(4)?)?)?
    } else {
        blocks.checked_mul(n.checked_mul(cols)?.checked_mul(2)?)?
    };
    Some(SectionSizes {
        index,
        codebook,
        lowrank_a: rows.checked_mul(r)?.checked_mul(2)?,
        lowrank_b: r.checked_mul(cols)?.checked_mul(2)?,
    })
}

/// Bits per weight for a `rows x cols` matrix stored with `layout`.
pub fn bits_per_weight(layout: &Layout, rows: usize, cols: usize) -> BitReport {
    let (d, n, k, r) = (
        layout.dim as u128,
        layout.entries as u128,
        layout.block_rows as u128,
        layout.lowrank_rank as u128,
    );
    let (nr, nc) = (rows as u128, cols as u128);
    let cb_bits: u128 = if layout.codebook_int8 { 8 } else { 16 };
    let bits = index_bits(layout.entries) as u128;

    let b_c = (cb_bits * n) as f64 / k as f64;
    let b_i = bits as f64 / d as f64;
    let b_lr = (16 * r * (nr + nc)) as f64 / (nr * nc) as f64;

    // Exact ideal payload in bits is num / (k d).
    let num = cb_bits * n * nr * nc * d + bits * nr * nc * k + 16 * r * (nr + nc) * k * d;
    let ideal_bytes = num.div_ceil(8 * k * d) as u64;
    let size = PREAMBLE_LEN as u64
        + section_sizes(layout, rows as u64, cols as u64)
            .expect("layer dimensions overflow u64")
            .total();
    BitReport {
        b_c,
        b_i,
        b_lr,
        b_total: b_c + b_i + b_lr,
        file_overhead_bytes: size - ideal_bytes,
        file_size_bytes: size,
    }
}

/// Quantized matrix back to dense form:
/// `W_hat[i, d j + l] = C[i / k, j][I[i, j], l]`, plus `A B` when present.
pub fn dequantize(layer: &QuantizedLayer) -> WeightMatrix {
    let (rows, cols) = (layer.rows(), layer.cols());
    let layout = *layer.layout();
    let groups = layer.column_groups();
    let mut out = DMatrix::zeros(rows, cols);
    for b in 0..layer.row_blocks() {
        for j in 0..groups {
            let cb = layer.codebook(b, j).centroids();
            let c = cb.centroids();
            for i in layout.block_range(b, rows) {
                let e = layer.index_at(i, j);
                for l in 0..cb.dim() {
                    out[(i, j * layout.dim + l)] = c[(e, l)];
                }
            }
        }
    }
    if let Some(lr) = layer.lowrank() {
        out += &lr.a * &lr.b;
    }
    WeightMatrix::new(out).expect("dequantized values are finite")
}

struct BitWriter {
    bytes: Vec<u8>,
    bit: usize,
}

impl BitWriter {
    fn push(&mut self, value: u32, width: u32) {
        for t in 0..width {
            if self.bit.is_multiple_of(8) {
                self.bytes.push(0);
            }
            if (value >> t) & 1 == 1 {
                *self.bytes.last_mut().unwrap() |= 1 << (self.bit % 8);
            }
            self.bit += 1;
        }
    }

    fn align(&mut self) {
        self.bit = self.bytes.len() * 8;
    }
}

fn put_f16(out: &mut Vec<u8>, v: f64) {
    let h = f16::from_f64(v);
    debug_assert_eq!(h.to_f64(), v, "value is not exactly representable in fp16");
    out.extend_from_slice(&h.to_le_bytes());
}

/// Encode a layer as an `ATQZ` byte image.
pub fn serialize(layer: &QuantizedLayer) -> Vec<u8> {
    let layout = *layer.layout();
    let (rows, cols) = (layer.rows(), layer.cols());
    let groups = layer.column_groups();
    let bits = layout.index_bits();

    let mut index = BitWriter {
        bytes: Vec::new(),
        bit: 0,
    };
    for b in 0..layer.row_blocks() {
        for i in layout.block_range(b, rows) {
            for j in 0..groups {
                index.push(layer.index_at(i, j) as u32, bits);
            }
        }
        index.align();
    }

    let mut codebook = Vec::new();
    for cb in layer.codebooks() {
        match cb.payload() {
            CodebookPayload::Fp16(values) => {
                for v in values {
                    codebook.extend_from_slice(&v.to_le_bytes());
                }
            }
            CodebookPayload::Int8(q) => {
                codebook.extend_from_slice(&q.bytes);
                for (&lo, &hi) in q.mins.iter().zip(&q.maxs) {
                    put_f16(&mut codebook, lo);
                    put_f16(&mut codebook, hi);
                }
            }
        }
    }

    let mut lowrank_a = Vec::new();
    let mut lowrank_b = Vec::new();
    if let Some(lr) = layer.lowrank() {
        for v in crate::tensorio::row_major(&lr.a) {
            put_f16(&mut lowrank_a, v);
        }
        for v in crate::tensorio::row_major(&lr.b) {
            put_f16(&mut lowrank_b, v);
        }
    }

    let sections = [index.bytes, codebook, lowrank_a, lowrank_b];
    let body: usize = sections.iter().map(Vec::len).sum();
    let mut out = Vec::with_capacity(PREAMBLE_LEN + body);
    out.extend_from_slice(LAYER_MAGIC);
    out.extend_from_slice(&LAYER_VERSION.to_le_bytes());
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
    out.extend_from_slice(&(layout.dim as u16).to_le_bytes());
    out.extend_from_slice(&(layout.entries as u32).to_le_bytes());
    out.extend_from_slice(&(layout.block_rows as u32).to_le_bytes());
    let mut flags = 0u8;
    if layout.codebook_int8 {
        flags |= FLAG_INT8;
    }
    if layer.lowrank().is_some() {
        flags |= FLAG_LOWRANK;
    }
    out.push(flags);
    out.extend_from_slice(&(layout.lowrank_rank as u32).to_le_bytes());
    let mut offset = PREAMBLE_LEN as u64;
    for s in &sections {
        out.extend_from_slice(&offset.to_le_bytes());
        out.extend_from_slice(&(s.len() as u64).to_le_bytes());
        offset += s.len() as u64;
    }
    for s in &sections {
        out.extend_from_slice(s);
    }
    out
}

/// Header fields of an `ATQZ` image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerHeader {
    pub rows: usize,
    pub cols: usize,
    pub layout: Layout,
}

fn read_u64(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

/// Parse and validate the fixed header without touching the sections.
pub fn read_header(bytes: &[u8]) -> Result<LayerHeader> {
    ensure!(
        bytes.len() >= HEADER_LEN,
        Format,
        "layer header truncated: {} bytes, need {HEADER_LEN}",
        bytes.len()
    );
    ensure!(
        &bytes[0..4] == LAYER_MAGIC,
        Format,
        "bad layer magic {:?}",
        &bytes[0..4]
    );
    let version = read_u32(bytes, 4);
    ensure!(
        version == LAYER_VERSION,
        Format,
        "unsupported layer version {version}"
    );
    let rows = read_u64(bytes, 8);
    let cols = read_u64(bytes, 16);
    let dim = u16::from_le_bytes(bytes[24..26].try_into().unwrap()) as u64;
    let entries = read_u32(bytes, 26) as u64;
    let block_rows = read_u32(bytes, 30) as u64;
    let flags = bytes[34];
    let rank = read_u32(bytes, 35) as u64;

    ensure!(
        rows >= 1 && cols >= 1,
        Format,
        "layer dims must be positive, got {rows}x{cols}"
    );
    ensure!(
        entries >= 1,
        Format,
        "codebook entry count n must be positive"
    );
    ensure!(
        dim >= 1 && dim <= cols,
        Format,
        "entry dimension d = {dim} invalid for {cols} columns"
    );
    ensure!(
        block_rows >= 1 && block_rows <= rows,
        Format,
        "block rows k = {block_rows} invalid for {rows} rows"
    );
    ensure!(
        flags & !(FLAG_INT8 | FLAG_LOWRANK) == 0,
        Format,
        "unknown flag bits {flags:#04x}"
    );
    ensure!(
        (flags & FLAG_LOWRANK != 0) == (rank > 0),
        Format,
        "low-rank flag and rank {rank} disagree"
    );
    ensure!(
        rank <= rows.min(cols),
        Format,
        "low-rank rank {rank} exceeds min({rows}, {cols})"
    );
    ensure!(
        rows.checked_mul(cols.div_ceil(dim))
            .is_some_and(|e| e <= MAX_INDEX_ENTRIES),
        Format,
        "layer of {rows}x{cols} exceeds the supported size"
    );
    Ok(LayerHeader {
        rows: rows as usize,
        cols: cols as usize,
        layout: Layout {
            dim: dim as usize,
            entries: entries as usize,
            block_rows: block_rows as usize,
            codebook_int8: flags & FLAG_INT8 != 0,
            lowrank_rank: rank as usize,
        },
    })
}

struct BitReader<'a> {
    bytes: &'a [u8],
    bit: usize,
}

impl BitReader<'_> {
    fn take(&mut self, width: u32) -> u32 {
        let mut v = 0u32;
        for t in 0..width {
            let byte = self.bytes[self.bit / 8];
            v |= (((byte >> (self.bit % 8)) & 1) as u32) << t;
            self.bit += 1;
        }
        v
    }
}

fn get_f16(b: &[u8], at: usize) -> f64 {
    f16::from_le_bytes([b[at], b[at + 1]]).to_f64()
}

/// Decode an `ATQZ` image. Every structural length is checked against the header
/// before any payload is read.
pub fn deserialize(bytes: &[u8]) -> Result<QuantizedLayer> {
    let header = read_header(bytes)?;
    let LayerHeader { rows, cols, layout } = header;
    ensure!(
        bytes.len() >= PREAMBLE_LEN,
        Corruption,
        "section table truncated: {} bytes",
        bytes.len()
    );
    let expected = section_sizes(&layout, rows as u64, cols as u64)
        .ok_or_else(|| Error::Format("section sizes overflow".into()))?;

    let mut sections: [&[u8]; SECTION_COUNT] = [&[]; SECTION_COUNT];
    let mut cursor = PREAMBLE_LEN as u64;
    for (s, want) in expected.as_array().into_iter().enumerate() {
        let offset = read_u64(bytes, HEADER_LEN + 16 * s);
        let len = read_u64(bytes, HEADER_LEN + 16 * s + 8);
        ensure!(
            offset == cursor,
            Corruption,
            "section {s} starts at {offset}, expected {cursor}"
        );
        ensure!(
            len == want,
            Corruption,
            "section {s} is {len} bytes, expected {want}"
        );
        let end = offset
            .checked_add(len)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| Error::Corruption(format!("section {s} runs past end of data")))?;
        sections[s] = &bytes[offset as usize..end as usize];
        cursor = end;
    }
    ensure!(
        cursor == bytes.len() as u64,
        Corruption,
        "{} trailing bytes after the last section",
        bytes.len() as u64 - cursor
    );

    let groups = layout.column_groups(cols);
    let bits = layout.index_bits();

    let mut index = Vec::with_capacity(rows * groups);
    let mut block_start = 0usize;
    for b in 0..layout.row_blocks(rows) {
        let range = layout.block_range(b, rows);
        let block_bits = range.len() * groups * bits as usize;
        let block_bytes = block_bits.div_ceil(8);
        let chunk = &sections[0][block_start..block_start + block_bytes];
        let mut reader = BitReader {
            bytes: chunk,
            bit: 0,
        };
        for _ in 0..range.len() * groups {
            let v = reader.take(bits);
            ensure!(
                (v as usize) < layout.entries,
                Corruption,
                "index entry {v} out of range for {} entries",
                layout.entries
            );
            index.push(v);
        }
        if !block_bits.is_multiple_of(8) {
            let last = chunk[block_bytes - 1];
            ensure!(
                last >> (block_bits % 8) == 0,
                Corruption,
                "non-zero padding bits in index block {b}"
            );
        }
        block_start += block_bytes;
    }

    let cb_bytes = sections[1];
    let mut at = 0usize;
    let mut codebooks = Vec::with_capacity(layout.row_blocks(rows) * groups);
    for _ in 0..layout.row_blocks(rows) {
        for j in 0..groups {
            let width = layout.group_width(j, cols);
            let payload = if layout.codebook_int8 {
                let grid = cb_bytes[at..at + layout.entries * width].to_vec();
                at += grid.len();
                let mut mins = Vec::with_capacity(width);
                let mut maxs = Vec::with_capacity(width);
                for _ in 0..width {
                    mins.push(get_f16(cb_bytes, at));
                    maxs.push(get_f16(cb_bytes, at + 2));
                    at += 4;
                }
                CodebookPayload::Int8(Int8Codebook {
                    bytes: grid,
                    mins,
                    maxs,
                })
            } else {
                let values: Vec<f16> = cb_bytes[at..at + 2 * layout.entries * width]
                    .chunks_exact(2)
                    .map(|c| f16::from_le_bytes([c[0], c[1]]))
                    .collect();
                at += 2 * values.len();
                CodebookPayload::Fp16(values)
            };
            codebooks.push(
                StoredCodebook::from_payload(layout.entries, width, payload)
                    .map_err(|e| Error::Corruption(e.to_string()))?,
            );
        }
    }

    let lowrank = if layout.lowrank_rank > 0 {
        let r = layout.lowrank_rank;
        let read = |s: &[u8], nr: usize, nc: usize| {
            DMatrix::from_row_iterator(nr, nc, (0..nr * nc).map(|i| get_f16(s, 2 * i)))
        };
        Some(LowRank {
            a: read(sections[2], rows, r),
            b: read(sections[3], r, cols),
        })
    } else {
        None
    };

    QuantizedLayer::new(rows, cols, layout, index, codebooks, lowrank)
        .map_err(|e| Error::Corruption(e.to_string()))
}
