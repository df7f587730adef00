// Quantize one layer with Hessian guidance and compare against plain nearest-codebook
// quantization at the same bit budget.

use hvq::quantizer::{nearest_codebook_baseline, proxy_loss};
use hvq::rng::seeded;
use hvq::{
    bits_per_weight, dequantize, quantize_matrix, CalibrationBatch, HessianState, QuantConfig,
    WeightMatrix,
};
use nalgebra::DMatrix;
use rand::Rng;

pub fn run_example() -> hvq::Result<()> {
    let mut rng = seeded(42);
    let (rows, cols) = (128, 64);
    let w = WeightMatrix::new(DMatrix::from_fn(rows, cols, |_, _| {
        rng.random_range(-1.0..1.0)
    }))?;
    let scale: Vec<f64> = (0..cols)
        .map(|_| rng.random_range(0.0f64..3.0).exp())
        .collect();
    let x = DMatrix::from_fn(128, cols, |_, j| rng.random_range(-1.0..1.0) * scale[j]);
    let hess = HessianState::from_batch(&CalibrationBatch::new(x)?, 0.01)?;

    let cfg = QuantConfig::new(2, 16, 128);
    let layer = quantize_matrix(&w, &hess, &cfg)?;
    let baseline = nearest_codebook_baseline(&w, &cfg)?;

    let bits = bits_per_weight(layer.layout(), rows, cols);
    let ours = proxy_loss(w.as_matrix(), dequantize(&layer).as_matrix(), &hess);
    let naive = proxy_loss(w.as_matrix(), dequantize(&baseline).as_matrix(), &hess);
    println!("{cfg} at {:.3} bits per weight", bits.b_total);
    println!("  Hessian-guided proxy loss {ours:.4}");
    println!(
        "  nearest-codebook loss     {naive:.4} ({:.1}x)",
        naive / ours
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> hvq::Result<()> {
    run_example()
}
