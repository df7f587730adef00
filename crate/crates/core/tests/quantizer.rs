mod common;

use common::*;
use hvq::format::serialize;
use hvq::hessian::GroupSelector;
use hvq::quantizer::{
    attach_lowrank, compensate, group_loss, nearest_codebook_baseline, proxy_loss,
    proxy_loss_by_group, quantize_codebook_int8, quantize_matrix, quantize_matrix_with,
    residual_lowrank, select_group, GroupOrder, GroupPlan, QuantConfig, QuantizeOptions,
    QuantizeStep,
};
use hvq::vq::Codebook;
use hvq::{dequantize, Error, HessianState, WeightMatrix};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;

fn setup(seed: u64, rows: usize, cols: usize) -> (WeightMatrix, HessianState) {
    let mut rng = rng(seed);
    let w = WeightMatrix::new(gaussian(&mut rng, rows, cols)).unwrap();
    let h = hessian_from(&mut rng, 2 * cols + 16, cols);
    (w, h)
}

fn loss_of(w: &WeightMatrix, layer: &hvq::QuantizedLayer, h: &HessianState) -> f64 {
    proxy_loss(w.as_matrix(), dequantize(layer).as_matrix(), h)
}

#[test]
fn proxy_loss_is_weighted_frobenius_norm() {
    let (w, h) = setup(1, 9, 12);
    let mut rng = rng(2);
    let w_hat = gaussian(&mut rng, 9, 12);
    let r = w.as_matrix() - &w_hat;
    let oracle = (&r * h.cholesky_factor()).norm_squared();
    let fast = proxy_loss(w.as_matrix(), &w_hat, &h);
    assert!((fast - oracle).abs() <= 1e-12 * oracle);
    let parts = proxy_loss_by_group(w.as_matrix(), &w_hat, &h, 5);
    assert_eq!(parts.len(), 3);
    assert!((parts.iter().sum::<f64>() - fast).abs() <= 1e-12 * fast);
}

#[test]
fn compensation_solves_the_constrained_problem() {
    // With Q fixed to the target, the loss-minimizing update of the free columns F is
    // -H_FF^-1 H_FQ (w_Q - target), computed here from H directly.
    let mut rng = rng(3);
    let m = 6;
    let h = HessianState::finalize(random_spd(&mut rng, m), 0.01).unwrap();
    let w = gaussian(&mut rng, 4, m);
    let q = [1usize, 4];
    let free = [0usize, 2, 3, 5];
    let target = gaussian(&mut rng, 4, 2);
    let out = compensate(&w, &GroupSelector::new(q.to_vec(), m).unwrap(), &target, &h).unwrap();

    let hm = h.h();
    let h_ff = DMatrix::from_fn(4, 4, |a, b| hm[(free[a], free[b])]);
    let h_fq = DMatrix::from_fn(4, 2, |a, b| hm[(free[a], q[b])]);
    let delta_q = DMatrix::from_fn(4, 2, |i, b| target[(i, b)] - w[(i, q[b])]);
    let delta_f = -(h_ff.try_inverse().unwrap() * h_fq * delta_q.transpose()).transpose();
    for i in 0..4 {
        for (b, &j) in q.iter().enumerate() {
            assert!((out[(i, j)] - target[(i, b)]).abs() < 1e-12);
        }
        for (a, &j) in free.iter().enumerate() {
            assert!((out[(i, j)] - (w[(i, j)] + delta_f[(i, a)])).abs() < 1e-10);
        }
    }
}

#[test]
fn group_loss_matches_scalar_loop() {
    let mut rng = rng(4);
    for _ in 0..30 {
        let (rows, d) = (rng.random_range(1..20), rng.random_range(1..5));
        let w = gaussian(&mut rng, rows, d);
        let w_hat = gaussian(&mut rng, rows, d);
        let g = random_spd(&mut rng, d);
        let mut slow = 0.0;
        for i in 0..rows {
            let e: Vec<f64> = (0..d).map(|t| w[(i, t)] - w_hat[(i, t)]).collect();
            slow += 0.5 * quad_form(&e, &g);
        }
        assert!((group_loss(&w, &w_hat, &g) - slow).abs() <= 1e-12 * slow.max(1.0));
    }
}

#[test]
fn greedy_selection_picks_the_cheapest_group() {
    let (w, h) = setup(5, 24, 10);
    let cfg = QuantConfig::new(2, 4, 8);
    let plan = GroupPlan::new(10, 2).unwrap();
    let chosen = select_group(w.as_matrix(), &plan, &h, &cfg, None).unwrap();

    let mut losses = Vec::new();
    for g in 0..5 {
        let mut only = plan.clone();
        for other in (0..5).filter(|&o| o != g) {
            only.mark_done(other);
        }
        let c = select_group(w.as_matrix(), &only, &h, &cfg, None).unwrap();
        assert_eq!(c.group, g);
        let metric = h.group_metric(plan.group(g)).unwrap();
        let recon = c.reconstruction(&cfg.layout(), 24);
        let slice = w.as_matrix().columns(2 * g, 2).into_owned();
        assert!((c.loss - group_loss(&slice, &recon, &metric)).abs() <= 1e-12 * c.loss.max(1.0));
        losses.push(c.loss);
    }
    let best = losses.iter().cloned().fold(f64::INFINITY, f64::min);
    assert_eq!(chosen.loss, best);
    assert_eq!(
        chosen.group,
        losses.iter().position(|&l| l == best).unwrap()
    );
}

#[test]
fn every_group_is_committed_once() {
    let (w, h) = setup(6, 40, 23);
    let cfg = QuantConfig::new(3, 8, 16);
    let mut seen = Vec::new();
    let mut observer = |s: &QuantizeStep| {
        seen.push((s.round, s.group, s.eliminated, s.columns.to_vec()));
        let cols = s.weights.select_columns(s.columns);
        assert!((cols - s.reconstruction).amax() <= 1e-9);
    };
    let layer = quantize_matrix_with(
        &w,
        &h,
        &cfg,
        QuantizeOptions {
            warm_start: None,
            observer: Some(&mut observer),
        },
    )
    .unwrap();
    assert_eq!(seen.len(), 8);
    let mut groups: Vec<usize> = seen.iter().map(|s| s.1).collect();
    groups.sort();
    assert_eq!(groups, (0..8).collect::<Vec<_>>());
    let mut total = 0;
    for (round, group, eliminated, cols) in &seen {
        total += cols.len();
        assert_eq!(*eliminated, total, "round {round}, group {group}");
    }
    assert_eq!(total, 23);
    let ragged = seen.iter().find(|s| s.1 == 7).unwrap();
    assert_eq!(ragged.3, vec![21, 22]);
    assert_eq!(
        (
            layer.rows(),
            layer.cols(),
            layer.row_blocks(),
            layer.column_groups()
        ),
        (40, 23, 3, 8)
    );
    assert_eq!(dequantize(&layer).as_matrix().shape(), (40, 23));
}

#[test]
fn quantization_is_deterministic() {
    let (w, h) = setup(7, 32, 16);
    let mut cfg = QuantConfig::new(2, 8, 16);
    cfg.seed = 11;
    let a = serialize(&quantize_matrix(&w, &h, &cfg).unwrap());
    let b = serialize(&quantize_matrix(&w, &h, &cfg).unwrap());
    assert_eq!(a, b);
    cfg.seed = 12;
    let c = serialize(&quantize_matrix(&w, &h, &cfg).unwrap());
    assert_ne!(a, c);
}

#[test]
fn enough_entries_reproduce_fp16_weights() {
    let mut rng = rng(8);
    let values = DMatrix::from_fn(8, 6, |_, _| {
        half::f16::from_f64(rng.random_range(-2.0..2.0)).to_f64()
    });
    let w = WeightMatrix::new(values).unwrap();
    let h = hessian_from(&mut rng, 32, 6);
    let layer = quantize_matrix(&w, &h, &QuantConfig::new(2, 8, 8)).unwrap();
    assert_eq!(dequantize(&layer).as_matrix(), w.as_matrix());
    assert_eq!(loss_of(&w, &layer, &h), 0.0);
}

#[test]
fn second_order_guidance_beats_the_baseline() {
    let (w, h) = setup(9, 128, 128);
    let cfg = QuantConfig::new(2, 64, 128);
    let ours = loss_of(&w, &quantize_matrix(&w, &h, &cfg).unwrap(), &h);
    let naive = loss_of(&w, &nearest_codebook_baseline(&w, &cfg).unwrap(), &h);
    assert!(ours < naive, "{ours} vs {naive}");
}

#[test]
fn left_to_right_order_also_meets_the_constraint() {
    let (w, h) = setup(10, 32, 12);
    let mut cfg = QuantConfig::new(2, 4, 16);
    cfg.order = GroupOrder::LeftToRight;
    let mut order = Vec::new();
    let mut observer = |s: &QuantizeStep| {
        order.push(s.group);
        assert!((s.weights.select_columns(s.columns) - s.reconstruction).amax() <= 1e-9);
    };
    quantize_matrix_with(
        &w,
        &h,
        &cfg,
        QuantizeOptions {
            warm_start: None,
            observer: Some(&mut observer),
        },
    )
    .unwrap();
    assert_eq!(order, (0..6).collect::<Vec<_>>());
}

#[test]
fn capacity_sweep_is_monotone_with_nested_starts() {
    let (w, h) = setup(11, 128, 32);
    let mut prev: Option<(f64, hvq::QuantizedLayer)> = None;
    for n in [32, 64, 128] {
        let cfg = QuantConfig::new(2, n, 128);
        let layer = quantize_matrix_with(
            &w,
            &h,
            &cfg,
            QuantizeOptions {
                warm_start: prev.as_ref().map(|p| &p.1),
                observer: None,
            },
        )
        .unwrap();
        let loss = loss_of(&w, &layer, &h);
        if let Some((p, _)) = &prev {
            assert!(loss <= *p, "n={n}: {loss} > {p}");
        }
        prev = Some((loss, layer));
    }
}

#[test]
fn lowrank_correction_never_hurts() {
    for seed in 0..4 {
        let (w, h) = setup(20 + seed, 48, 40);
        let mut cfg = QuantConfig::new(2, 8, 16);
        cfg.seed = seed;
        let base = quantize_matrix(&w, &h, &cfg).unwrap();
        let before = loss_of(&w, &base, &h);
        for r in [1, 4] {
            let with = attach_lowrank(base.clone(), &w, &h, r).unwrap();
            assert_eq!(with.lowrank().unwrap().rank(), r);
            assert!(loss_of(&w, &with, &h) <= before, "seed {seed} r={r}");
        }
    }
}

// Fails on seed 1: after the first compensation step the int8 and fp16 runs quantize
// different weights, so the int8 run can end lower. Run with --ignored to see it.
#[test]
#[ignore = "per-seed dominance does not hold once the two runs diverge"]
fn int8_codebooks_are_never_better() {
    for seed in 0..4 {
        let (w, h) = setup(30 + seed, 64, 32);
        let mut cfg = QuantConfig::new(2, 16, 32);
        cfg.seed = seed;
        let fp16 = loss_of(&w, &quantize_matrix(&w, &h, &cfg).unwrap(), &h);
        cfg.codebook_int8 = true;
        let int8 = loss_of(&w, &quantize_matrix(&w, &h, &cfg).unwrap(), &h);
        assert!(
            int8 >= fp16 - 1e-9,
            "seed {seed}: int8 {int8} < fp16 {fp16}"
        );
    }
}

#[test]
fn hyperparameters_are_validated() {
    let (w, h) = setup(12, 8, 6);
    let bad = [
        QuantConfig::new(7, 4, 8),
        QuantConfig::new(2, 9, 8),
        QuantConfig::new(2, 4, 9),
        QuantConfig::new(0, 4, 8),
        QuantConfig {
            lowrank_rank: 7,
            ..QuantConfig::new(2, 4, 8)
        },
        QuantConfig {
            damping: 0.0,
            ..QuantConfig::new(2, 4, 8)
        },
    ];
    for cfg in bad {
        assert!(
            matches!(quantize_matrix(&w, &h, &cfg), Err(Error::Validation(_))),
            "{cfg:?}"
        );
    }
    let (_, wrong) = setup(13, 8, 5);
    assert!(matches!(
        quantize_matrix(&w, &wrong, &QuantConfig::new(2, 4, 8)),
        Err(Error::Validation(_))
    ));
    let small = quantize_matrix(&w, &h, &QuantConfig::new(3, 4, 8)).unwrap();
    let res = quantize_matrix_with(
        &w,
        &h,
        &QuantConfig::new(2, 4, 8),
        QuantizeOptions {
            warm_start: Some(&small),
            observer: None,
        },
    );
    assert!(matches!(res, Err(Error::Validation(_))));
}

#[test]
fn eckart_young_on_fixed_instance() {
    let (w, h) = setup(14, 20, 16);
    let mut rng = rng(15);
    let w_hat = w.as_matrix() + gaussian(&mut rng, 20, 16) * 0.05;
    let r = w.as_matrix() - &w_hat;
    let sv = squared_singular_values(&(&r * h.cholesky_factor()));
    for rank in 0..=16 {
        let (a, b) = residual_lowrank(w.as_matrix(), &w_hat, &h, rank).unwrap();
        let left = ((&r - &a * &b) * h.cholesky_factor()).norm_squared();
        let tail: f64 = sv[rank..].iter().sum();
        assert!(
            (left - tail).abs() <= 1e-8 * tail.max(1e-12 * sv[0]),
            "rank {rank}"
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn int8_round_trip_within_half_step(seed in any::<u64>(), n in 1usize..64, d in 1usize..5, scale in 1e-3f64..1e3) {
        let mut rng = rng(seed);
        let cb = Codebook::new(gaussian(&mut rng, n, d) * scale).unwrap();
        let q = quantize_codebook_int8(&cb);
        let back = q.dequantize();
        for t in 0..d {
            let range = q.maxs[t] - q.mins[t];
            for a in 0..n {
                let err = (back.centroids()[(a, t)] - cb.centroids()[(a, t)]).abs();
                prop_assert!(err <= range / 510.0 * (1.0 + 1e-12));
            }
        }
    }
}
