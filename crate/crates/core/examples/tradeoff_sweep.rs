// Bits versus proxy loss over a codebook-size sweep. Each larger codebook starts from
// the previous run's centroids, so loss does not go up as bits grow.

use hvq::quantizer::{proxy_loss, quantize_matrix_with, QuantizeOptions};
use hvq::rng::seeded;
use hvq::{
    bits_per_weight, dequantize, CalibrationBatch, HessianState, QuantConfig, QuantizedLayer,
    WeightMatrix,
};
use nalgebra::DMatrix;
use rand::Rng;

pub fn run_example() -> hvq::Result<()> {
    let mut rng = seeded(21);
    let (rows, cols) = (64, 32);
    let w = WeightMatrix::new(DMatrix::from_fn(rows, cols, |_, _| {
        rng.random_range(-1.0..1.0)
    }))?;
    let x = DMatrix::from_fn(96, cols, |_, _| rng.random_range(-1.0..1.0));
    let hess = HessianState::from_batch(&CalibrationBatch::new(x)?, 0.01)?;

    println!("bpw,loss,d,n,k");
    let mut prev: Option<QuantizedLayer> = None;
    for n in [2, 4, 8, 16, 32, 64] {
        let cfg = QuantConfig::new(2, n, 64);
        let layer = quantize_matrix_with(
            &w,
            &hess,
            &cfg,
            QuantizeOptions {
                warm_start: prev.as_ref(),
                observer: None,
            },
        )?;
        let loss = proxy_loss(w.as_matrix(), dequantize(&layer).as_matrix(), &hess);
        let bpw = bits_per_weight(layer.layout(), rows, cols).b_total;
        println!("{bpw},{loss:.6},2,{n},64");
        prev = Some(layer);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> hvq::Result<()> {
    run_example()
}
