// Per-dimension int8 codebooks: round-trip error and the bits they save.

use hvq::quantizer::{proxy_loss, quantize_codebook_int8};
use hvq::rng::seeded;
use hvq::vq::Codebook;
use hvq::{
    bits_per_weight, dequantize, quantize_matrix, CalibrationBatch, HessianState, QuantConfig,
    WeightMatrix,
};
use nalgebra::DMatrix;
use rand::Rng;

pub fn run_example() -> hvq::Result<()> {
    let mut rng = seeded(5);
    let cb = Codebook::new(DMatrix::from_fn(64, 2, |_, _| rng.random_range(-0.2..0.2)))?;
    let q = quantize_codebook_int8(&cb);
    let err = (q.dequantize().centroids() - cb.centroids()).amax();
    let bound = (0..2)
        .map(|b| (q.maxs[b] - q.mins[b]) / 510.0)
        .fold(0.0, f64::max);
    println!("64-entry codebook: max round-trip error {err:.2e}, bound {bound:.2e}");

    let w = WeightMatrix::new(DMatrix::from_fn(64, 32, |_, _| rng.random_range(-1.0..1.0)))?;
    let x = DMatrix::from_fn(96, 32, |_, _| rng.random_range(-1.0..1.0));
    let hess = HessianState::from_batch(&CalibrationBatch::new(x)?, 0.01)?;
    for int8 in [false, true] {
        let mut cfg = QuantConfig::new(2, 16, 32);
        cfg.codebook_int8 = int8;
        let layer = quantize_matrix(&w, &hess, &cfg)?;
        println!(
            "int8 = {int8:<5}: {:.3} bits per weight, proxy loss {:.4}",
            bits_per_weight(layer.layout(), 64, 32).b_total,
            proxy_loss(w.as_matrix(), dequantize(&layer).as_matrix(), &hess)
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> hvq::Result<()> {
    run_example()
}
