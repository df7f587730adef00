// Bits-per-weight for a few common `(d, n, k)` settings on a 4096 x 4096 layer.

use hvq::format::bits_per_weight;
use hvq::quantizer::{default_rank, QuantConfig};

pub fn run_example() -> hvq::Result<()> {
    let (rows, cols) = (4096, 4096);
    println!(
        "{:>16} {:>5} {:>3} {:>6} {:>6} {:>6} {:>7} {:>12}",
        "(d, n, k)", "int8", "r", "b_c", "b_i", "b_lr", "b", "file bytes"
    );
    for (d, n, k) in [
        (2, 64, 1024),
        (2, 64, 2048),
        (2, 256, 4096),
        (3, 64, 1024),
        (3, 256, 4096),
    ] {
        for int8 in [false, true] {
            for lowrank in [false, true] {
                let mut cfg = QuantConfig::new(d, n, k);
                cfg.codebook_int8 = int8;
                cfg.lowrank_rank = if lowrank { default_rank(rows, cols) } else { 0 };
                let r = bits_per_weight(&cfg.layout(), rows, cols);
                println!(
                    "{:>16} {:>5} {:>3} {:>6.3} {:>6.3} {:>6.3} {:>7.4} {:>12}",
                    cfg.to_string(),
                    int8,
                    cfg.lowrank_rank,
                    r.b_c,
                    r.b_i,
                    r.b_lr,
                    r.b_total,
                    r.file_size_bytes
                );
            }
        }
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> hvq::Result<()> {
    run_example()
}
