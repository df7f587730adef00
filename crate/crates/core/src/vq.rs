//! Codebook construction under a quadratic-form (Mahalanobis) metric.
//!
//! Points are the rows of a `k x d` matrix; distances are `(p - c)^T G (p - c)` with `G`
//! symmetric positive definite. [`weighted_kmeans`] runs seeded k-means++ followed by
//! Lloyd iterations, and [`flip_improve`] escapes Lloyd fixed points with exact
//! single-point moves. Ties are always broken toward the lowest centroid index.

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{ensure, Result};
use crate::rng::seeded;

pub const DEFAULT_MAX_ITERS: usize = 100;

/// Slack used by [`verify_lloyd`], applied as `tol * (1 + |reference|)`.
pub const LLOYD_TOL: f64 = 1e-9;

/// `n` centroids of dimension `d`, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    centroids: DMatrix<f64>,
}

impl Codebook {
    pub fn new(centroids: DMatrix<f64>) -> Result<Self> {
        ensure!(
            centroids.nrows() >= 1 && centroids.ncols() >= 1,
            Validation,
            "codebook must have at least one entry of dimension >= 1"
        );
        ensure!(
            centroids.iter().all(|v| v.is_finite()),
            Validation,
            "codebook contains non-finite values"
        );
        Ok(Self { centroids })
    }

    pub fn entries(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }

    pub fn centroids(&self) -> &DMatrix<f64> {
        &self.centroids
    }

    pub fn centroid(&self, i: usize) -> Vec<f64> {
        self.centroids.row(i).iter().copied().collect()
    }
}

/// Centroid index per point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment(pub Vec<usize>);

impl Assignment {
    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `(p - c)^T G (p - c)`.
pub fn weighted_distance(p: &[f64], c: &[f64], g: &DMatrix<f64>) -> f64 {
    Metric::from_matrix(g).dist(p, c)
}

/// Row-major copy of a small SPD matrix for the inner loops.
struct Metric {
    g: Vec<f64>,
    d: usize,
}

impl Metric {
    fn from_matrix(g: &DMatrix<f64>) -> Self {
        assert!(g.is_square(), "metric must be square");
        let d = g.nrows();
        Self {
            g: (0..d * d).map(|i| g[(i / d, i % d)]).collect(),
            d,
        }
    }

    #[inline]
    fn dist(&self, p: &[f64], c: &[f64]) -> f64 {
        match self.d {
            1 => {
                let e = p[0] - c[0];
                (self.g[0] * e * e).max(0.0)
            }
            2 => {
                let (e0, e1) = (p[0] - c[0], p[1] - c[1]);
                let g = &self.g;
                (g[0] * e0 * e0 + (g[1] + g[2]) * e0 * e1 + g[3] * e1 * e1).max(0.0)
            }
            _ => self.dist_general(p, c),
        }
    }

    fn dist_general(&self, p: &[f64], c: &[f64]) -> f64 {
        let d = self.d;
        let mut acc = 0.0;
        for a in 0..d {
            let da = p[a] - c[a];
            let row = &self.g[a * d..(a + 1) * d];
            let mut s = 0.0;
            for b in 0..d {
                s += row[b] * (p[b] - c[b]);
            }
            acc += da * s;
        }
        acc.max(0.0)
    }
}

/// Row-major view of the points and the current centroids.
struct Problem {
    pts: Vec<f64>,
    k: usize,
    d: usize,
    metric: Metric,
}

impl Problem {
    fn new(points: &DMatrix<f64>, g: &DMatrix<f64>) -> Self {
        let (k, d) = points.shape();
        assert_eq!(g.nrows(), d, "metric dimension must match point dimension");
        let mut pts = Vec::with_capacity(k * d);
        for i in 0..k {
            pts.extend(points.row(i).iter());
        }
        Self {
            pts,
            k,
            d,
            metric: Metric::from_matrix(g),
        }
    }

    #[inline]
    fn point(&self, i: usize) -> &[f64] {
        &self.pts[i * self.d..(i + 1) * self.d]
    }

    /// Nearest centroid and its distance; lowest index wins ties.
    fn nearest(&self, p: &[f64], centroids: &[f64], n: usize) -> (usize, f64) {
        let d = self.d;
        let mut best = (0, self.metric.dist(p, &centroids[0..d]));
        for c in 1..n {
            let dist = self.metric.dist(p, &centroids[c * d..(c + 1) * d]);
            if dist < best.1 {
                best = (c, dist);
            }
        }
        best
    }

    fn assign(&self, centroids: &[f64], n: usize) -> (Vec<usize>, f64) {
        let mut asg = Vec::with_capacity(self.k);
        let mut loss = 0.0;
        for i in 0..self.k {
            let (c, dist) = self.nearest(self.point(i), centroids, n);
            asg.push(c);
            loss += dist;
        }
        (asg, loss)
    }

    fn loss(&self, centroids: &[f64], asg: &[usize]) -> f64 {
        let d = self.d;
        asg.iter()
            .enumerate()
            .map(|(i, &c)| {
                self.metric
                    .dist(self.point(i), &centroids[c * d..(c + 1) * d])
            })
            .sum()
    }

    /// Replace each non-empty centroid by its cluster mean; returns cluster sizes.
    fn update_means(&self, asg: &[usize], centroids: &mut [f64], n: usize) -> Vec<usize> {
        let d = self.d;
        let mut sums = vec![0.0; n * d];
        let mut counts = vec![0usize; n];
        for (i, &c) in asg.iter().enumerate() {
            counts[c] += 1;
            for (s, &p) in sums[c * d..(c + 1) * d].iter_mut().zip(self.point(i)) {
                *s += p;
            }
        }
        for c in 0..n {
            if counts[c] > 0 {
                let inv = counts[c] as f64;
                for a in 0..d {
                    centroids[c * d + a] = sums[c * d + a] / inv;
                }
            }
        }
        counts
    }

    /// Move every empty centroid onto the farthest point from its current centroid.
    /// Returns whether any centroid moved.
    fn repair_empty(&self, asg: &[usize], counts: &[usize], centroids: &mut [f64]) -> bool {
        let d = self.d;
        let empty: Vec<usize> = (0..counts.len()).filter(|&c| counts[c] == 0).collect();
        if empty.is_empty() {
            return false;
        }
        let mut far: Vec<(usize, f64)> = (0..self.k)
            .map(|i| {
                let c = asg[i];
                (
                    i,
                    self.metric
                        .dist(self.point(i), &centroids[c * d..(c + 1) * d]),
                )
            })
            .filter(|&(_, dist)| dist > 0.0)
            .collect();
        far.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

        let mut reseeded: Vec<usize> = Vec::new();
        let mut candidates = far.into_iter();
        for &c in &empty {
            let pick = candidates
                .by_ref()
                .find(|&(i, _)| reseeded.iter().all(|&j| self.point(i) != self.point(j)));
            match pick {
                Some((i, _)) => {
                    centroids[c * d..(c + 1) * d].copy_from_slice(self.point(i));
                    reseeded.push(i);
                }
                None => break,
            }
        }
        !reseeded.is_empty()
    }

    /// Lloyd iterations from `centroids` until the assignment is stable.
    fn lloyd(&self, centroids: &mut [f64], n: usize, max_iters: usize) -> Vec<usize> {
        let (mut asg, mut prev_loss) = self.assign(centroids, n);
        let mut converged = false;
        for _ in 0..max_iters {
            let counts = self.update_means(&asg, centroids, n);
            let repaired = self.repair_empty(&asg, &counts, centroids);
            let (next, loss) = self.assign(centroids, n);
            debug_assert!(
                loss <= prev_loss + 1e-9 * (1.0 + prev_loss),
                "k-means loss increased: {prev_loss} -> {loss}"
            );
            prev_loss = loss;
            if next == asg && !repaired {
                converged = true;
                break;
            }
            asg = next;
        }
        if !converged {
            self.update_means(&asg, centroids, n);
        }
        asg
    }

    /// Seeded k-means++ under the metric, continuing from any supplied centroids.
    fn plus_plus(&self, n: usize, initial: &[f64], rng: &mut impl Rng) -> Vec<f64> {
        let d = self.d;
        let mut centroids = Vec::with_capacity(n * d);
        centroids.extend_from_slice(initial);
        if centroids.is_empty() {
            let first = rng.random_range(0..self.k);
            centroids.extend_from_slice(self.point(first));
        }
        let mut dists: Vec<f64> = (0..self.k)
            .map(|i| {
                self.nearest(self.point(i), &centroids, centroids.len() / d)
                    .1
            })
            .collect();
        while centroids.len() < n * d {
            let total: f64 = dists.iter().sum();
            let pick = if total > 0.0 {
                let target = rng.random::<f64>() * total;
                let mut acc = 0.0;
                let mut chosen = None;
                for (i, &w) in dists.iter().enumerate() {
                    if w <= 0.0 {
                        continue;
                    }
                    acc += w;
                    chosen = Some(i);
                    if acc > target {
                        break;
                    }
                }
                chosen
            } else {
                None
            };
            match pick {
                Some(i) => {
                    let p = self.point(i).to_vec();
                    centroids.extend_from_slice(&p);
                    for (j, dj) in dists.iter_mut().enumerate() {
                        let nd = self.metric.dist(self.point(j), &p);
                        if nd < *dj {
                            *dj = nd;
                        }
                    }
                }
                None => {
                    // Fewer distinct points than entries: pad with copies of entry 0.
                    let first = centroids[0..d].to_vec();
                    while centroids.len() < n * d {
                        centroids.extend_from_slice(&first);
                    }
                }
            }
        }
        centroids
    }
}

fn to_codebook(centroids: &[f64], n: usize, d: usize) -> Codebook {
    Codebook {
        centroids: DMatrix::from_row_slice(n, d, centroids),
    }
}

fn flatten(cb: &Codebook) -> Vec<f64> {
    crate::tensorio::row_major(cb.centroids())
}

/// Map each point to its metric-nearest centroid.
pub fn assign(points: &DMatrix<f64>, cb: &Codebook, g: &DMatrix<f64>) -> Assignment {
    assert_eq!(
        points.ncols(),
        cb.dim(),
        "point and codebook dimensions differ"
    );
    let p = Problem::new(points, g);
    Assignment(p.assign(&flatten(cb), cb.entries()).0)
}

/// Cluster means for a fixed assignment. The mean minimizes the summed quadratic form
/// for every SPD metric, so no metric is needed. Empty clusters get a zero centroid;
/// [`weighted_kmeans`] never leaves them there while a point is still unrepresented.
pub fn update_centroids(points: &DMatrix<f64>, asg: &Assignment, n: usize) -> Codebook {
    assert!(n >= 1, "codebook needs at least one entry");
    assert_eq!(
        points.nrows(),
        asg.len(),
        "assignment length differs from point count"
    );
    assert!(
        asg.0.iter().all(|&c| c < n),
        "assignment index out of range"
    );
    let d = points.ncols();
    let p = Problem::new(points, &DMatrix::identity(d, d));
    let mut centroids = vec![0.0; n * d];
    p.update_means(&asg.0, &mut centroids, n);
    to_codebook(&centroids, n, d)
}

/// Summed metric distance of every point to its assigned centroid.
pub fn total_loss(points: &DMatrix<f64>, g: &DMatrix<f64>, cb: &Codebook, asg: &Assignment) -> f64 {
    let p = Problem::new(points, g);
    p.loss(&flatten(cb), &asg.0)
}

/// k-means with seeded k-means++ initialization under the metric `g`.
pub fn weighted_kmeans(
    points: &DMatrix<f64>,
    g: &DMatrix<f64>,
    n: usize,
    seed: u64,
    max_iters: usize,
) -> (Codebook, Assignment) {
    weighted_kmeans_from(points, g, None, n, seed, max_iters)
}

/// Like [`weighted_kmeans`] but keeps the rows of `initial` as the first centroids and
/// only draws the remaining `n - initial.nrows()` with k-means++.
pub fn weighted_kmeans_from(
    points: &DMatrix<f64>,
    g: &DMatrix<f64>,
    initial: Option<&DMatrix<f64>>,
    n: usize,
    seed: u64,
    max_iters: usize,
) -> (Codebook, Assignment) {
    assert!(points.nrows() >= 1, "k-means needs at least one point");
    assert!(n >= 1, "codebook needs at least one entry");
    let p = Problem::new(points, g);
    let init: Vec<f64> = match initial {
        Some(m) => {
            assert_eq!(m.ncols(), p.d, "initial centroids have the wrong dimension");
            assert!(m.nrows() <= n, "more initial centroids than entries");
            crate::tensorio::row_major(m)
        }
        None => Vec::new(),
    };
    let mut rng = seeded(seed);
    let mut centroids = p.plus_plus(n, &init, &mut rng);
    let asg = p.lloyd(&mut centroids, n, max_iters);
    (to_codebook(&centroids, n, p.d), Assignment(asg))
}

/// Local search by exact single-point moves (Hartigan-style), alternated with Lloyd
/// refinement, until a full pass moves nothing or `max_passes` passes ran.
///
/// A point `x` leaves cluster `a` (size `s_a`, mean `m_a`) for cluster `b` only when
/// `s_b/(s_b+1)·dist(x, m_b) - s_a/(s_a-1)·dist(x, m_a) < 0`, the exact change in total
/// loss once both means are updated. Loss never increases.
pub fn flip_improve(
    points: &DMatrix<f64>,
    g: &DMatrix<f64>,
    cb: &Codebook,
    asg: &Assignment,
    max_passes: usize,
) -> (Codebook, Assignment) {
    let p = Problem::new(points, g);
    let (n, d) = (cb.entries(), cb.dim());
    assert_eq!(d, p.d, "point and codebook dimensions differ");
    assert_eq!(asg.len(), p.k, "assignment length differs from point count");

    let mut centroids = flatten(cb);
    let mut labels = asg.0.clone();
    let mut changed = false;

    for _ in 0..max_passes {
        let mut counts = p.update_means(&labels, &mut centroids, n);
        let mut sums = vec![0.0; n * d];
        for (i, &c) in labels.iter().enumerate() {
            for a in 0..d {
                sums[c * d + a] += p.pts[i * d + a];
            }
        }

        let mut moved = false;
        for (i, label) in labels.iter_mut().enumerate() {
            let a = *label;
            if counts[a] <= 1 {
                continue;
            }
            let x = p.point(i);
            let sa = counts[a] as f64;
            let leave = sa / (sa - 1.0) * p.metric.dist(x, &centroids[a * d..(a + 1) * d]);
            let mut best: Option<(usize, f64)> = None;
            for b in 0..n {
                if b == a {
                    continue;
                }
                let join = if counts[b] == 0 {
                    0.0
                } else {
                    let sb = counts[b] as f64;
                    sb / (sb + 1.0) * p.metric.dist(x, &centroids[b * d..(b + 1) * d])
                };
                let delta = join - leave;
                let threshold = best.map_or(-1e-12 * (1.0 + leave), |(_, bd)| bd);
                if delta < threshold {
                    best = Some((b, delta));
                }
            }
            if let Some((b, _)) = best {
                for t in 0..d {
                    sums[a * d + t] -= x[t];
                    sums[b * d + t] += x[t];
                }
                counts[a] -= 1;
                counts[b] += 1;
                for c in [a, b] {
                    let inv = counts[c] as f64;
                    for t in 0..d {
                        centroids[c * d + t] = sums[c * d + t] / inv;
                    }
                }
                *label = b;
                moved = true;
            }
        }
        if !moved {
            break;
        }
        changed = true;
        labels = p.lloyd(&mut centroids, n, DEFAULT_MAX_ITERS);
    }

    if !changed {
        return (cb.clone(), asg.clone());
    }
    (to_codebook(&centroids, n, d), Assignment(labels))
}

/// Both Lloyd conditions: every point sits with a nearest centroid, and every non-empty
/// centroid is its cluster mean, each within [`LLOYD_TOL`].
pub fn verify_lloyd(
    points: &DMatrix<f64>,
    g: &DMatrix<f64>,
    cb: &Codebook,
    asg: &Assignment,
) -> bool {
    if points.nrows() != asg.len() || points.ncols() != cb.dim() || g.nrows() != cb.dim() {
        return false;
    }
    let n = cb.entries();
    if asg.0.iter().any(|&c| c >= n) {
        return false;
    }
    let p = Problem::new(points, g);
    let centroids = flatten(cb);
    let d = p.d;
    for i in 0..p.k {
        let (_, best) = p.nearest(p.point(i), &centroids, n);
        let c = asg.0[i];
        let mine = p.metric.dist(p.point(i), &centroids[c * d..(c + 1) * d]);
        if mine > best + LLOYD_TOL * (1.0 + best) {
            return false;
        }
    }
    let mut means = centroids.clone();
    let counts = p.update_means(&asg.0, &mut means, n);
    for c in 0..n {
        if counts[c] == 0 {
            continue;
        }
        for t in 0..d {
            let (mean, have) = (means[c * d + t], centroids[c * d + t]);
            if (mean - have).abs() > LLOYD_TOL * (1.0 + mean.abs()) {
                return false;
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(values: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(values.len(), 1, values)
    }

    #[test]
    fn distance_basics() {
        let g = DMatrix::identity(2, 2);
        assert_eq!(weighted_distance(&[1.0, 2.0], &[1.0, 2.0], &g), 0.0);
        assert_eq!(weighted_distance(&[3.0, 4.0], &[0.0, 0.0], &g), 25.0);
        let g = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        // [1, 1] G [1, 1]^T = 2 + 1 + 1 + 3
        assert_eq!(weighted_distance(&[1.0, 1.0], &[0.0, 0.0], &g), 7.0);
    }

    #[test]
    fn points_on_centroids_map_to_themselves() {
        let pts = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 5.0, 1.0, -2.0, 3.0]);
        let cb = Codebook::new(pts.clone()).unwrap();
        let asg = assign(&pts, &cb, &DMatrix::identity(2, 2));
        assert_eq!(asg.0, vec![0, 1, 2]);
    }

    #[test]
    fn tie_goes_to_lowest_index() {
        let cb = Codebook::new(col(&[-1.0, 1.0])).unwrap();
        let asg = assign(&col(&[0.0]), &cb, &DMatrix::identity(1, 1));
        assert_eq!(asg.0, vec![0]);
    }

    #[test]
    fn update_means_simple() {
        let pts = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 2.0, 2.0]);
        let cb = update_centroids(&pts, &Assignment(vec![0, 0]), 1);
        assert_eq!(cb.centroid(0), vec![1.0, 1.0]);

        let same = DMatrix::from_row_slice(3, 2, &[1.5, -2.0, 1.5, -2.0, 1.5, -2.0]);
        let cb = update_centroids(&same, &Assignment(vec![1, 1, 1]), 2);
        assert_eq!(cb.centroid(1), vec![1.5, -2.0]);
    }

    #[test]
    fn few_points_are_exact() {
        let pts = DMatrix::from_row_slice(3, 2, &[0.0, 1.0, 4.0, 2.0, -3.0, 0.5]);
        let g = DMatrix::identity(2, 2);
        let (cb, asg) = weighted_kmeans(&pts, &g, 4, 1, DEFAULT_MAX_ITERS);
        assert_eq!(total_loss(&pts, &g, &cb, &asg), 0.0);
        assert!(verify_lloyd(&pts, &g, &cb, &asg));
    }

    #[test]
    fn single_entry_is_the_mean() {
        let pts = col(&[1.0, 2.0, 6.0]);
        let (cb, asg) = weighted_kmeans(&pts, &DMatrix::identity(1, 1), 1, 0, DEFAULT_MAX_ITERS);
        assert_eq!(cb.centroid(0), vec![3.0]);
        assert_eq!(asg.0, vec![0, 0, 0]);
    }

    #[test]
    fn duplicate_points_with_spare_entries() {
        let pts = col(&[2.0, 2.0, 2.0, 2.0]);
        let g = DMatrix::identity(1, 1);
        let (cb, asg) = weighted_kmeans(&pts, &g, 3, 5, DEFAULT_MAX_ITERS);
        assert_eq!(total_loss(&pts, &g, &cb, &asg), 0.0);
        assert!(verify_lloyd(&pts, &g, &cb, &asg));
    }

    #[test]
    fn verify_detects_violations() {
        let pts = col(&[0.0, 1.0]);
        let g = DMatrix::identity(1, 1);
        let cb = Codebook::new(col(&[0.0, 1.0])).unwrap();
        assert!(verify_lloyd(&pts, &g, &cb, &Assignment(vec![0, 1])));
        // Point 1.0 is nearer to centroid 1 by a full unit.
        assert!(!verify_lloyd(&pts, &g, &cb, &Assignment(vec![0, 0])));
        assert!(!verify_lloyd(&pts, &g, &cb, &Assignment(vec![0, 2])));
    }

    #[test]
    fn warm_start_keeps_initial_rows_first() {
        let pts = col(&[0.0, 0.1, 5.0, 5.1, 9.0, 9.1]);
        let g = DMatrix::identity(1, 1);
        let init = col(&[0.05]);
        let (cb, _) = weighted_kmeans_from(&pts, &g, Some(&init), 3, 0, DEFAULT_MAX_ITERS);
        assert!((cb.centroid(0)[0] - 0.05).abs() < 1e-12);
    }
}
