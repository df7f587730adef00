// Write a quantized layer to an ATQZ file, read it back and dequantize to ATQT.

use hvq::format::read_header;
use hvq::rng::seeded;
use hvq::tensorio::{load_matrix, store_matrix};
use hvq::{
    bits_per_weight, dequantize, deserialize, quantize_matrix, serialize, CalibrationBatch,
    HessianState, Precision, QuantConfig, WeightMatrix,
};
use nalgebra::DMatrix;
use rand::Rng;

pub fn run_example() -> hvq::Result<()> {
    let mut rng = seeded(1);
    // Ragged on both axes: 50 rows in blocks of 16, 21 columns in groups of 2.
    let w = WeightMatrix::new(DMatrix::from_fn(50, 21, |_, _| rng.random_range(-1.0..1.0)))?;
    let x = DMatrix::from_fn(64, 21, |_, _| rng.random_range(-1.0..1.0));
    let hess = HessianState::from_batch(&CalibrationBatch::new(x)?, 0.01)?;
    let mut cfg = QuantConfig::new(2, 8, 16);
    cfg.codebook_int8 = true;
    cfg.lowrank_rank = 2;
    let layer = quantize_matrix(&w, &hess, &cfg)?;

    let dir = std::env::temp_dir().join(format!("hvq-example-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("layer.atqz");
    std::fs::write(&path, serialize(&layer))?;

    let bytes = std::fs::read(&path)?;
    let header = read_header(&bytes)?;
    let back = deserialize(&bytes)?;
    let report = bits_per_weight(&header.layout, header.rows, header.cols);
    println!(
        "{} bytes on disk, {} predicted, {} of overhead; identical after reload: {}",
        bytes.len(),
        report.file_size_bytes,
        report.file_overhead_bytes,
        back == layer
    );

    let dense = dir.join("dense.atqt");
    store_matrix(&dequantize(&back), &dense, Precision::Fp32)?;
    let reloaded = load_matrix(&dense)?;
    println!(
        "dense {}x{} reconstruction, max fp32 rounding {:.2e}",
        reloaded.rows(),
        reloaded.cols(),
        (reloaded.as_matrix() - dequantize(&layer).as_matrix()).amax()
    );
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}

#[allow(dead_code)]
fn main() -> hvq::Result<()> {
    run_example()
}
