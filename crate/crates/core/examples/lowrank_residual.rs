// Hessian-weighted low-rank correction of the quantization residual.

use hvq::quantizer::{attach_lowrank, proxy_loss};
use hvq::rng::seeded;
use hvq::{
    bits_per_weight, dequantize, quantize_matrix, CalibrationBatch, HessianState, QuantConfig,
    WeightMatrix,
};
use nalgebra::DMatrix;
use rand::Rng;

pub fn run_example() -> hvq::Result<()> {
    let mut rng = seeded(9);
    let (rows, cols) = (64, 64);
    // Weights with a strong rank-2 component that coarse codebooks cannot follow.
    let u = DMatrix::from_fn(rows, 2, |_, _| rng.random_range(-1.0..1.0));
    let v = DMatrix::from_fn(2, cols, |_, _| rng.random_range(-1.0..1.0));
    let noise = DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-0.1..0.1));
    let w = WeightMatrix::new(u * v + noise)?;
    let x = DMatrix::from_fn(128, cols, |_, _| rng.random_range(-1.0..1.0));
    let hess = HessianState::from_batch(&CalibrationBatch::new(x)?, 0.01)?;

    let layer = quantize_matrix(&w, &hess, &QuantConfig::new(2, 4, 64))?;
    for r in [0, 1, 2, 4, 8] {
        let l = attach_lowrank(layer.clone(), &w, &hess, r)?;
        println!(
            "r = {r}: {:.3} bits per weight, proxy loss {:.4}",
            bits_per_weight(l.layout(), rows, cols).b_total,
            proxy_loss(w.as_matrix(), dequantize(&l).as_matrix(), &hess)
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> hvq::Result<()> {
    run_example()
}
