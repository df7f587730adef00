use nalgebra::DMatrix;

use crate::vq::Codebook;

/// A codebook mapped per dimension onto `0..=255`.
#[derive(Debug, Clone, PartialEq)]
pub struct Int8Codebook {
    /// `n x d` grid, row-major.
    pub bytes: Vec<u8>,
    /// Per-dimension minimum.
    pub mins: Vec<f64>,
    /// Per-dimension maximum.
    pub maxs: Vec<f64>,
}

impl Int8Codebook {
    pub fn entries(&self) -> usize {
        self.bytes.len() / self.mins.len()
    }

    pub fn dim(&self) -> usize {
        self.mins.len()
    }

    /// `min_b + byte / 255 * (max_b - min_b)`.
    pub fn dequantize(&self) -> Codebook {
        let d = self.dim();
        let m = DMatrix::from_fn(self.entries(), d, |a, b| {
            let byte = self.bytes[a * d + b] as f64;
            self.mins[b] + byte / 255.0 * (self.maxs[b] - self.mins[b])
        });
        Codebook::new(m).expect("bounds are finite")
    }
}

/// Per-dimension affine map of the centroids onto `0..=255`, rounding to nearest.
/// A constant dimension maps to all zeros. Round-trip error per entry is at most
/// `(max_b - min_b) / 510`.
pub fn quantize_codebook_int8(cb: &Codebook) -> Int8Codebook {
    let (n, d) = (cb.entries(), cb.dim());
    let c = cb.centroids();
    let mut mins = vec![f64::INFINITY; d];
    let mut maxs = vec![f64::NEG_INFINITY; d];
    for a in 0..n {
        for b in 0..d {
            mins[b] = mins[b].min(c[(a, b)]);
            maxs[b] = maxs[b].max(c[(a, b)]);
        }
    }
    let mut bytes = Vec::with_capacity(n * d);
    for a in 0..n {
        for b in 0..d {
            let range = maxs[b] - mins[b];
            let byte = if range > 0.0 {
                (255.0 * (c[(a, b)] - mins[b]) / range)
                    .round()
                    .clamp(0.0, 255.0) as u8
            } else {
                0
            };
            bytes.push(byte);
        }
    }
    Int8Codebook { bytes, mins, maxs }
}
