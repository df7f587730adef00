// k-means under a Mahalanobis metric, followed by single-point flip search.

use hvq::rng::seeded;
use hvq::vq::{flip_improve, total_loss, verify_lloyd, weighted_kmeans, DEFAULT_MAX_ITERS};
use nalgebra::DMatrix;
use rand::Rng;

pub fn run_example() -> hvq::Result<()> {
    let mut rng = seeded(3);
    let points = DMatrix::from_fn(200, 2, |_, j| {
        rng.random_range(-1.0..1.0) * if j == 0 { 4.0 } else { 1.0 }
    });
    // Errors along the second axis cost ten times more.
    let metric = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 10.0]);

    for n in [4, 8, 16] {
        let (cb, asg) = weighted_kmeans(&points, &metric, n, 11, DEFAULT_MAX_ITERS);
        let lloyd = total_loss(&points, &metric, &cb, &asg);
        let (cb, asg) = flip_improve(&points, &metric, &cb, &asg, 8);
        let flipped = total_loss(&points, &metric, &cb, &asg);
        println!(
            "n = {n:>2}: Lloyd loss {lloyd:.4}, after flips {flipped:.4}, Lloyd conditions hold: {}",
            verify_lloyd(&points, &metric, &cb, &asg)
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> hvq::Result<()> {
    run_example()
}
