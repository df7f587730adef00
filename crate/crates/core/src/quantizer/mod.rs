//! Hessian-guided vector quantization of one weight matrix.
//!
//! Columns are split into width-`d` groups. Each round builds a candidate codebook
//! quantization for every remaining group under that group's metric
//! `([H^-1]_QQ)^-1`, commits the group with the smallest second-order loss, pushes its
//! error onto the unquantized columns through the inverse Hessian, and eliminates the
//! group from the inverse. Optional int8 codebooks and a Hessian-weighted low-rank
//! correction of the final residual sit on top.

mod int8;
mod layer;
mod lowrank;

pub use int8::{quantize_codebook_int8, Int8Codebook};
pub use layer::{index_bits, CodebookPayload, Layout, LowRank, QuantizedLayer, StoredCodebook};
pub use lowrank::{default_rank, residual_lowrank};

use log::warn;
use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{ensure, Result};
use crate::hessian::{GroupSelector, HessianState, DEFAULT_DAMPING};
use crate::rng::derive_seed;
use crate::tensorio::WeightMatrix;
use crate::vq::{self, Assignment, Codebook};

/// Order in which column groups are committed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GroupOrder {
    /// Each round commits the remaining group with the smallest candidate loss.
    #[default]
    Greedy,
    /// Plain left-to-right order; skips candidate evaluation of other groups.
    LeftToRight,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantConfig {
    /// Codebook entry dimension `d`.
    pub dim: usize,
    /// Entries per codebook `n`.
    pub entries: usize,
    /// Rows sharing one codebook `k`.
    pub block_rows: usize,
    /// Relative diagonal damping added to the calibration Hessian.
    pub damping: f64,
    pub codebook_int8: bool,
    /// Low-rank correction rank, 0 disables it.
    pub lowrank_rank: usize,
    pub seed: u64,
    pub kmeans_max_iters: usize,
    pub flip_passes: usize,
    pub order: GroupOrder,
}

impl QuantConfig {
    pub fn new(dim: usize, entries: usize, block_rows: usize) -> Self {
        Self {
            dim,
            entries,
            block_rows,
            damping: DEFAULT_DAMPING,
            codebook_int8: false,
            lowrank_rank: 0,
            seed: 0,
            kmeans_max_iters: vq::DEFAULT_MAX_ITERS,
            flip_passes: 8,
            order: GroupOrder::Greedy,
        }
    }

    pub fn layout(&self) -> Layout {
        Layout {
            dim: self.dim,
            entries: self.entries,
            block_rows: self.block_rows,
            codebook_int8: self.codebook_int8,
            lowrank_rank: self.lowrank_rank,
        }
    }

    /// Check the hyperparameters against an `rows x cols` matrix.
    pub fn validate(&self, rows: usize, cols: usize) -> Result<()> {
        ensure!(
            self.dim >= 1 && self.dim <= cols,
            Validation,
            "entry dimension d = {} must lie in [1, {cols}]",
            self.dim
        );
        ensure!(
            self.block_rows >= 1 && self.block_rows <= rows,
            Validation,
            "block rows k = {} must lie in [1, {rows}]",
            self.block_rows
        );
        ensure!(
            self.entries >= 1 && self.entries <= self.block_rows,
            Validation,
            "codebook entries n = {} must lie in [1, k = {}]",
            self.entries,
            self.block_rows
        );
        ensure!(
            self.entries <= u32::MAX as usize,
            Validation,
            "codebook entries n = {} too large",
            self.entries
        );
        ensure!(
            self.lowrank_rank <= rows.min(cols),
            Validation,
            "low-rank rank {} exceeds min({rows}, {cols})",
            self.lowrank_rank
        );
        ensure!(
            self.damping > 0.0 && self.damping.is_finite(),
            Validation,
            "damping must be positive, got {}",
            self.damping
        );
        if !self.entries.is_power_of_two() {
            warn!(
                "codebook entries n = {} is not a power of two",
                self.entries
            );
        }
        Ok(())
    }
}

impl std::fmt::Display for QuantConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {})", self.dim, self.entries, self.block_rows)
    }
}

/// Partition of the columns into width-`d` groups, plus which are still unquantized.
#[derive(Debug, Clone)]
pub struct GroupPlan {
    groups: Vec<GroupSelector>,
    remaining: Vec<bool>,
}

impl GroupPlan {
    pub fn new(cols: usize, dim: usize) -> Result<Self> {
        ensure!(
            dim >= 1 && dim <= cols,
            Validation,
            "group width {dim} invalid for {cols} columns"
        );
        let groups = (0..cols.div_ceil(dim))
            .map(|g| {
                let start = g * dim;
                GroupSelector::contiguous(start, dim.min(cols - start), cols)
            })
            .collect::<Result<Vec<_>>>()?;
        let remaining = vec![true; groups.len()];
        Ok(Self { groups, remaining })
    }

    pub fn groups(&self) -> &[GroupSelector] {
        &self.groups
    }

    pub fn group(&self, id: usize) -> &GroupSelector {
        &self.groups[id]
    }

    pub fn remaining(&self) -> Vec<usize> {
        (0..self.groups.len())
            .filter(|&g| self.remaining[g])
            .collect()
    }

    pub fn is_done(&self) -> bool {
        !self.remaining.iter().any(|&r| r)
    }

    pub fn mark_done(&mut self, id: usize) {
        self.remaining[id] = false;
    }
}

/// `sum_rows 1/2 (w - w_hat)^T G (w - w_hat)` over the rows of an `N x |Q|` slice.
pub fn group_loss(w_q: &DMatrix<f64>, w_hat_q: &DMatrix<f64>, metric: &DMatrix<f64>) -> f64 {
    assert_eq!(w_q.shape(), w_hat_q.shape(), "group slices differ in shape");
    let delta = w_q - w_hat_q;
    let weighted = &delta * metric;
    0.5 * delta.component_mul(&weighted).sum()
}

/// The codebook quantization proposed for one column group: one `(codebook, assignment)`
/// per row block, and the group's loss under its metric.
#[derive(Debug, Clone)]
pub struct GroupCandidate {
    pub group: usize,
    pub cells: Vec<(Codebook, Assignment)>,
    pub loss: f64,
}

impl GroupCandidate {
    /// The `N x |Q|` reconstruction of the group's columns.
    pub fn reconstruction(&self, layout: &Layout, rows: usize) -> DMatrix<f64> {
        let width = self.cells[0].0.dim();
        let mut out = DMatrix::zeros(rows, width);
        for (b, (cb, asg)) in self.cells.iter().enumerate() {
            for (r, i) in layout.block_range(b, rows).enumerate() {
                out.set_row(i, &cb.centroids().row(asg.0[r]));
            }
        }
        out
    }
}

fn columns(w: &DMatrix<f64>, q: &GroupSelector) -> DMatrix<f64> {
    w.select_columns(q.indices())
}

/// Build the candidate quantization of group `group` at the current weights.
fn build_candidate(
    w: &DMatrix<f64>,
    plan: &GroupPlan,
    group: usize,
    metric: &DMatrix<f64>,
    cfg: &QuantConfig,
    warm: Option<&QuantizedLayer>,
) -> GroupCandidate {
    let layout = cfg.layout();
    let rows = w.nrows();
    let slice = columns(w, plan.group(group));
    let cells: Vec<(Codebook, Assignment)> = (0..layout.row_blocks(rows))
        .map(|b| {
            let range = layout.block_range(b, rows);
            let points = slice.rows(range.start, range.len()).into_owned();
            let seed = derive_seed(cfg.seed, &[group as u64, b as u64]);
            let init = warm.map(|l| l.codebook(b, group).centroids().centroids().clone());
            let (cb, asg) = vq::weighted_kmeans_from(
                &points,
                metric,
                init.as_ref(),
                cfg.entries,
                seed,
                cfg.kmeans_max_iters,
            );
            vq::flip_improve(&points, metric, &cb, &asg, cfg.flip_passes)
        })
        .collect();
    let mut cand = GroupCandidate {
        group,
        cells,
        loss: 0.0,
    };
    cand.loss = group_loss(&slice, &cand.reconstruction(&layout, rows), metric);
    cand
}

/// Evaluate every remaining group and return the one with the smallest candidate loss
/// (lowest id on ties), together with its candidate.
pub fn select_group(
    w: &DMatrix<f64>,
    plan: &GroupPlan,
    hess: &HessianState,
    cfg: &QuantConfig,
    warm: Option<&QuantizedLayer>,
) -> Result<GroupCandidate> {
    let remaining = plan.remaining();
    ensure!(
        !remaining.is_empty(),
        Validation,
        "no column groups left to select"
    );
    let candidates = remaining
        .par_iter()
        .map(|&g| {
            let metric = hess.group_metric(plan.group(g))?;
            Ok(build_candidate(w, plan, g, &metric, cfg, warm))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(candidates
        .into_iter()
        .reduce(|best, c| if c.loss < best.loss { c } else { best })
        .expect("at least one candidate"))
}

/// Apply the closed-form second-order update for quantizing columns `Q` to `w_hat_q`:
/// each row gets `dw = -H^-1[:,Q] G (w_Q - w_hat_Q)` with `G = ([H^-1]_QQ)^-1`.
///
/// Columns `Q` of the result equal `w_hat_q` up to rounding, and eliminated columns
/// are untouched because their rows of the inverse are zero.
pub fn compensate(
    w: &DMatrix<f64>,
    q: &GroupSelector,
    w_hat_q: &DMatrix<f64>,
    hess: &HessianState,
) -> Result<DMatrix<f64>> {
    ensure!(
        w.ncols() == hess.dim() && w_hat_q.shape() == (w.nrows(), q.len()),
        Validation,
        "compensation shapes disagree: W {:?}, target {:?}, group width {}",
        w.shape(),
        w_hat_q.shape(),
        q.len()
    );
    let metric = hess.group_metric(q)?;
    let delta = columns(w, q) - w_hat_q;
    let panel = hess.hinv().select_rows(q.indices());
    let update = delta * metric * panel;
    Ok(w - update)
}

/// `tr((W - W_hat) H (W - W_hat)^T)` with the damped, un-eliminated `H`.
pub fn proxy_loss(w: &DMatrix<f64>, w_hat: &DMatrix<f64>, hess: &HessianState) -> f64 {
    assert_eq!(w.shape(), w_hat.shape(), "proxy loss shapes differ");
    let r = w - w_hat;
    let rh = &r * hess.h();
    r.component_mul(&rh).sum()
}

/// Split of [`proxy_loss`] by column group: group `g` contributes
/// `sum_{j in g} sum_i R_ij (R H)_ij`. The parts add up to the total.
pub fn proxy_loss_by_group(
    w: &DMatrix<f64>,
    w_hat: &DMatrix<f64>,
    hess: &HessianState,
    dim: usize,
) -> Vec<f64> {
    let r = w - w_hat;
    let rh = &r * hess.h();
    let per_col = r.component_mul(&rh).row_sum();
    per_col
        .as_slice()
        .chunks(dim)
        .map(|c| c.iter().sum())
        .collect()
}

/// State after one group has been committed, handed to an observer.
pub struct QuantizeStep<'a> {
    pub round: usize,
    pub group: usize,
    pub columns: &'a [usize],
    /// Candidate loss of the committed group under its metric.
    pub loss: f64,
    /// Weights right after compensation.
    pub weights: &'a DMatrix<f64>,
    /// `N x |Q|` values the group is stored as.
    pub reconstruction: &'a DMatrix<f64>,
    /// Columns eliminated from the inverse Hessian so far, this group included.
    pub eliminated: usize,
}

/// Extra knobs for [`quantize_matrix_with`].
#[derive(Default)]
pub struct QuantizeOptions<'a> {
    /// A smaller-`n` layer of the same shape whose codebooks seed the first centroids
    /// of every cell (nested initialization for capacity sweeps).
    pub warm_start: Option<&'a QuantizedLayer>,
    pub observer: Option<&'a mut dyn FnMut(&QuantizeStep)>,
}

pub fn quantize_matrix(
    w: &WeightMatrix,
    hess: &HessianState,
    cfg: &QuantConfig,
) -> Result<QuantizedLayer> {
    quantize_matrix_with(w, hess, cfg, QuantizeOptions::default())
}

pub fn quantize_matrix_with(
    w: &WeightMatrix,
    hess: &HessianState,
    cfg: &QuantConfig,
    mut opts: QuantizeOptions<'_>,
) -> Result<QuantizedLayer> {
    let (rows, cols) = (w.rows(), w.cols());
    cfg.validate(rows, cols)?;
    ensure!(
        hess.dim() == cols,
        Validation,
        "Hessian dimension {} does not match {cols} weight columns",
        hess.dim()
    );
    ensure!(
        hess.eliminated_count() == 0,
        Validation,
        "Hessian state already has eliminated columns"
    );
    if let Some(warm) = opts.warm_start {
        let wl = warm.layout();
        ensure!(
            warm.rows() == rows
                && warm.cols() == cols
                && wl.dim == cfg.dim
                && wl.block_rows == cfg.block_rows
                && wl.entries <= cfg.entries,
            Validation,
            "warm-start layer is incompatible: {}x{} with {wl:?}",
            warm.rows(),
            warm.cols()
        );
    }

    let layout = cfg.layout();
    let groups = layout.column_groups(cols);
    let blocks = layout.row_blocks(rows);
    let mut plan = GroupPlan::new(cols, cfg.dim)?;
    let mut state = hess.clone();
    let mut weights = w.as_matrix().clone();
    let mut index = vec![0u32; rows * groups];
    let mut codebooks: Vec<Option<StoredCodebook>> = vec![None; blocks * groups];

    let mut round = 0;
    while !plan.is_done() {
        let cand = match cfg.order {
            GroupOrder::Greedy => select_group(&weights, &plan, &state, cfg, opts.warm_start)?,
            GroupOrder::LeftToRight => {
                let g = plan.remaining()[0];
                let metric = state.group_metric(plan.group(g))?;
                build_candidate(&weights, &plan, g, &metric, cfg, opts.warm_start)
            }
        };
        let g = cand.group;
        let q = plan.group(g).clone();
        let metric = state.group_metric(&q)?;

        // Commit at-rest codebooks and assign against them.
        let slice = columns(&weights, &q);
        let mut target = DMatrix::zeros(rows, q.len());
        for (b, (cb, _)) in cand.cells.iter().enumerate() {
            let stored = if cfg.codebook_int8 {
                StoredCodebook::int8(cb)?
            } else {
                StoredCodebook::fp16(cb)?
            };
            let centroids = stored.centroids();
            let range = layout.block_range(b, rows);
            let points = slice.rows(range.start, range.len()).into_owned();
            let asg = vq::assign(&points, &centroids, &metric);
            for (r, i) in range.enumerate() {
                let c = asg.0[r];
                index[i * groups + g] = c as u32;
                target.set_row(i, &centroids.centroids().row(c));
            }
            codebooks[b * groups + g] = Some(stored);
        }

        weights = compensate(&weights, &q, &target, &state)?;
        state.eliminate_group(&q)?;
        plan.mark_done(g);

        if let Some(obs) = opts.observer.as_mut() {
            obs(&QuantizeStep {
                round,
                group: g,
                columns: q.indices(),
                loss: cand.loss,
                weights: &weights,
                reconstruction: &target,
                eliminated: state.eliminated_count(),
            });
        }
        round += 1;
    }

    let mut layout_no_lr = layout;
    layout_no_lr.lowrank_rank = 0;
    let layer = QuantizedLayer::new(
        rows,
        cols,
        layout_no_lr,
        index,
        codebooks
            .into_iter()
            .map(|c| c.expect("every cell committed"))
            .collect(),
        None,
    )?;
    attach_lowrank(layer, w, hess, cfg.lowrank_rank)
}

/// Fit the Hessian-weighted low-rank correction of `layer` against the original weights.
pub fn attach_lowrank(
    layer: QuantizedLayer,
    w: &WeightMatrix,
    hess: &HessianState,
    rank: usize,
) -> Result<QuantizedLayer> {
    if rank == 0 {
        return layer.with_lowrank(None);
    }
    let base = layer.with_lowrank(None)?;
    let w_hat = crate::format::dequantize(&base);
    let (a, b) = residual_lowrank(w.as_matrix(), w_hat.as_matrix(), hess, rank)?;
    base.with_lowrank(Some(LowRank::to_half(a, b)?))
}

/// Control arm without second-order guidance: each cell is clustered on the original
/// weights under the plain Euclidean metric, groups go left to right, and nothing is
/// compensated. Codebook budget, precision and seeds match [`quantize_matrix`].
pub fn nearest_codebook_baseline(w: &WeightMatrix, cfg: &QuantConfig) -> Result<QuantizedLayer> {
    let (rows, cols) = (w.rows(), w.cols());
    cfg.validate(rows, cols)?;
    let layout = cfg.layout();
    let groups = layout.column_groups(cols);
    let plan = GroupPlan::new(cols, cfg.dim)?;
    let mut index = vec![0u32; rows * groups];
    let mut codebooks = Vec::with_capacity(layout.row_blocks(rows) * groups);
    let mut per_group: Vec<Vec<StoredCodebook>> = Vec::with_capacity(groups);
    for g in 0..groups {
        let q = plan.group(g);
        let eye = DMatrix::identity(q.len(), q.len());
        let cand = build_candidate(w.as_matrix(), &plan, g, &eye, cfg, None);
        let slice = columns(w.as_matrix(), q);
        let mut cells = Vec::new();
        for (b, (cb, _)) in cand.cells.iter().enumerate() {
            let stored = if cfg.codebook_int8 {
                StoredCodebook::int8(cb)?
            } else {
                StoredCodebook::fp16(cb)?
            };
            let range = layout.block_range(b, rows);
            let points = slice.rows(range.start, range.len()).into_owned();
            let asg = vq::assign(&points, &stored.centroids(), &eye);
            for (r, i) in range.enumerate() {
                index[i * groups + g] = asg.0[r] as u32;
            }
            cells.push(stored);
        }
        per_group.push(cells);
    }
    for b in 0..layout.row_blocks(rows) {
        for cells in &per_group {
            codebooks.push(cells[b].clone());
        }
    }
    let mut l = layout;
    l.lowrank_rank = 0;
    QuantizedLayer::new(rows, cols, l, index, codebooks, None)
}
