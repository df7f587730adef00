// Build a damped Hessian from activations, then eliminate column groups one at a time
// and compare the surviving inverse block with a direct inverse.

use hvq::hessian::{GroupSelector, HessianState};
use hvq::rng::seeded;
use hvq::CalibrationBatch;
use nalgebra::DMatrix;
use rand::Rng;

pub fn run_example() -> hvq::Result<()> {
    let mut rng = seeded(7);
    let m = 12;
    let x = DMatrix::from_fn(64, m, |_, j| rng.random_range(-1.0..1.0) * (1.0 + j as f64));
    let mut state = HessianState::from_batch(&CalibrationBatch::new(x)?, 0.01)?;

    for start in (0..8).step_by(2) {
        let q = GroupSelector::contiguous(start, 2, m)?;
        let metric = state.group_metric(&q)?;
        state.eliminate_group(&q)?;

        let keep = state.surviving();
        let sub = DMatrix::from_fn(keep.len(), keep.len(), |a, b| state.h()[(keep[a], keep[b])]);
        let direct = sub.try_inverse().expect("damped Hessian is invertible");
        let kept = DMatrix::from_fn(keep.len(), keep.len(), |a, b| {
            state.hinv()[(keep[a], keep[b])]
        });
        println!(
            "eliminated {:?}: metric trace {:.4}, {} columns left, max gap to direct inverse {:.2e}",
            q.indices(),
            metric.trace(),
            keep.len(),
            (kept - direct).amax()
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> hvq::Result<()> {
    run_example()
}
