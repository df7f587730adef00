//! Shared generators and independent oracles for the integration suites.
#![allow(dead_code)]

use hvq::quantizer::{Layout, LowRank, QuantizedLayer, StoredCodebook};
use hvq::rng::seeded;
use hvq::vq::Codebook;
use hvq::{CalibrationBatch, HessianState};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

pub type TestRng = hvq::rng::Xoshiro256PlusPlus;

pub fn rng(seed: u64) -> TestRng {
    seeded(seed ^ 0xA5A5_5A5A_0F0F_F0F0)
}

pub fn gaussian(rng: &mut TestRng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub fn uniform(rng: &mut TestRng, rows: usize, cols: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

/// Well-conditioned random SPD matrix.
pub fn random_spd(rng: &mut TestRng, m: usize) -> DMatrix<f64> {
    let a = gaussian(rng, m, m);
    let mut h = a.transpose() * &a / m as f64;
    for i in 0..m {
        h[(i, i)] += 0.1;
    }
    (&h + h.transpose()) * 0.5
}

/// Anisotropic, correlated activations: Gaussian rows mixed by a random matrix and
/// scaled per feature by log-normal factors.
pub fn anisotropic_calibration(rng: &mut TestRng, samples: usize, m: usize) -> CalibrationBatch {
    let z = gaussian(rng, samples, m);
    let mix = gaussian(rng, m, m) / (m as f64).sqrt();
    let scales: Vec<f64> = (0..m)
        .map(|_| (rng.sample::<f64, _>(StandardNormal)).exp())
        .collect();
    let mut x = z * mix;
    for (j, &s) in scales.iter().enumerate() {
        x.column_mut(j).scale_mut(s);
    }
    CalibrationBatch::new(x).unwrap()
}

pub fn hessian_from(rng: &mut TestRng, samples: usize, m: usize) -> HessianState {
    HessianState::from_batch(&anisotropic_calibration(rng, samples, m), 0.01).unwrap()
}

/// Inverse of `h` restricted to `keep`, by LU (independent of the downdate path).
pub fn reduced_inverse(h: &DMatrix<f64>, keep: &[usize]) -> DMatrix<f64> {
    let sub = DMatrix::from_fn(keep.len(), keep.len(), |a, b| h[(keep[a], keep[b])]);
    sub.try_inverse().expect("reduced Hessian is invertible")
}

pub fn principal(m: &DMatrix<f64>, keep: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(keep.len(), keep.len(), |a, b| m[(keep[a], keep[b])])
}

pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

/// Squared singular values of `s`, descending, from the eigenvalues of `s^T s`.
pub fn squared_singular_values(s: &DMatrix<f64>) -> Vec<f64> {
    let gram = s.transpose() * s;
    let mut ev: Vec<f64> = SymmetricEigen::new(gram)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0))
        .collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

/// Scalar-loop quadratic form.
pub fn quad_form(delta: &[f64], g: &DMatrix<f64>) -> f64 {
    let mut acc = 0.0;
    for a in 0..delta.len() {
        for b in 0..delta.len() {
            acc += delta[a] * g[(a, b)] * delta[b];
        }
    }
    acc
}

/// Smallest total within-cluster loss over every labelling of 1-D points into at most
/// `n` clusters, with a scalar metric `g`.
pub fn exhaustive_1d_optimum(points: &[f64], n: usize, g: f64) -> f64 {
    let k = points.len();
    let mut labels = vec![0usize; k];
    let mut best = f64::INFINITY;
    loop {
        let mut loss = 0.0;
        for c in 0..n {
            let members: Vec<f64> = (0..k)
                .filter(|&i| labels[i] == c)
                .map(|i| points[i])
                .collect();
            if members.is_empty() {
                continue;
            }
            let mean = members.iter().sum::<f64>() / members.len() as f64;
            loss += members.iter().map(|p| g * (p - mean).powi(2)).sum::<f64>();
        }
        best = best.min(loss);
        let mut pos = 0;
        loop {
            if pos == k {
                return best;
            }
            labels[pos] += 1;
            if labels[pos] < n {
                break;
            }
            labels[pos] = 0;
            pos += 1;
        }
    }
}

/// Dense reconstruction straight from the index/codebook equation, one scalar at a time.
pub fn scalar_dequantize(layer: &QuantizedLayer) -> DMatrix<f64> {
    let l = layer.layout();
    let groups = layer.cols().div_ceil(l.dim);
    let mut out = DMatrix::zeros(layer.rows(), layer.cols());
    for i in 0..layer.rows() {
        for j in 0..groups {
            let cb = layer.codebooks()[(i / l.block_rows) * groups + j].centroids();
            let e = layer.index()[i * groups + j] as usize;
            for t in 0..cb.dim() {
                out[(i, l.dim * j + t)] = cb.centroids()[(e, t)];
            }
        }
    }
    if let Some(lr) = layer.lowrank() {
        for i in 0..layer.rows() {
            for j in 0..layer.cols() {
                let mut s = 0.0;
                for t in 0..lr.rank() {
                    s += lr.a[(i, t)] * lr.b[(t, j)];
                }
                out[(i, j)] += s;
            }
        }
    }
    out
}

fn half_value(rng: &mut TestRng) -> f64 {
    half::f16::from_f64(rng.random_range(-4.0..4.0)).to_f64()
}

/// A random, valid layer with fp16-exact values; dims and options drawn from `rng`.
pub fn random_layer(rng: &mut TestRng) -> QuantizedLayer {
    let rows = rng.random_range(1..=24);
    let cols = rng.random_range(1..=24);
    let dim = rng.random_range(1..=cols.min(4));
    let block_rows = rng.random_range(1..=rows);
    let entries = rng.random_range(1..=block_rows.min(20));
    let codebook_int8 = rng.random_bool(0.4);
    let lowrank_rank = if rng.random_bool(0.3) {
        rng.random_range(1..=rows.min(cols).min(3))
    } else {
        0
    };
    let layout = Layout {
        dim,
        entries,
        block_rows,
        codebook_int8,
        lowrank_rank,
    };
    let groups = layout.column_groups(cols);
    let index = (0..rows * groups)
        .map(|_| rng.random_range(0..entries) as u32)
        .collect();
    let mut codebooks = Vec::new();
    for _ in 0..layout.row_blocks(rows) {
        for g in 0..groups {
            let w = layout.group_width(g, cols);
            let c = DMatrix::from_fn(entries, w, |_, _| half_value(rng));
            let cb = Codebook::new(c).unwrap();
            codebooks.push(if codebook_int8 {
                StoredCodebook::int8(&cb).unwrap()
            } else {
                StoredCodebook::fp16(&cb).unwrap()
            });
        }
    }
    let lowrank = (lowrank_rank > 0).then(|| LowRank {
        a: DMatrix::from_fn(rows, lowrank_rank, |_, _| half_value(rng)),
        b: DMatrix::from_fn(lowrank_rank, cols, |_, _| half_value(rng)),
    });
    QuantizedLayer::new(rows, cols, layout, index, codebooks, lowrank).unwrap()
}

pub fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}
