//! Shared numerical utilities: compensated summation, moment statistics,
//! deterministic parallel reduction, equal-mass binning, least-squares fits,
//! the digamma function, and a small k-d tree for nearest-neighbour queries.
//!
//! Everything here is deterministic: parallel reductions map over fixed-size
//! blocks and fold the per-block results sequentially in block order, so the
//! result is independent of thread scheduling.

use std::collections::BinaryHeap;
use std::ops::Range;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::real::Real;

/// Neumaier-compensated summation. Deterministic and accurate to a few ulps
/// even for badly conditioned sums, at roughly twice the cost of a naive loop.
pub fn compensated_sum<R: Real, I: IntoIterator<Item = R>>(values: I) -> R {
    let mut sum = R::zero();
    let mut comp = R::zero();
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Map disjoint index blocks of `0..n` in parallel and return the per-block
/// results **in block order**. Callers fold the returned vector sequentially,
/// which keeps reductions bitwise reproducible regardless of thread count.
pub fn par_block_map<A, F>(n: usize, block_size: usize, map: F) -> Vec<A>
where
    A: Send,
    F: Fn(usize, Range<usize>) -> A + Send + Sync,
{
    assert!(block_size > 0, "block_size must be positive");
    let nblocks = n.div_ceil(block_size);
    (0..nblocks)
        .into_par_iter()
        .map(|b| {
            let lo = b * block_size;
            let hi = ((b + 1) * block_size).min(n);
            map(b, lo..hi)
        })
        .collect()
}

/// Fold per-block `Result`s in block order, returning the first error if any.
pub fn collect_blocks<A>(parts: Vec<Result<A>>) -> Result<Vec<A>> {
    parts.into_iter().collect()
}

/// Sample mean, unbiased variance, and standard error of the mean.
#[derive(Debug, Clone, Copy)]
pub struct MeanStats<R> {
    pub n: usize,
    pub mean: R,
    pub variance: R,
    pub stderr: R,
}

impl<R: Real> MeanStats<R> {
    /// Two-pass computation with compensated sums.
    pub fn from_slice(xs: &[R]) -> Result<Self> {
        if xs.len() < 2 {
            return Err(Error::InsufficientSamples {
                need: 2,
                got: xs.len(),
                context: "mean/variance statistics",
            });
        }
        let n = xs.len();
        let nr = R::of(n as f64);
        let mean = compensated_sum(xs.iter().copied()) / nr;
        let variance = compensated_sum(xs.iter().map(|&x| (x - mean) * (x - mean)))
            / R::of((n - 1) as f64);
        let stderr = (variance / nr).sqrt();
        Ok(Self { n, mean, variance, stderr })
    }

    /// Standardized distance of the mean from `target` in units of the
    /// standard error. Used for "is this average consistent with zero" gates.
    pub fn zscore(&self, target: R) -> R {
        (self.mean - target) / self.stderr
    }
}

/// Equal-mass binning of a scalar sample: sorts indices by value and splits
/// them into `nbins` contiguous groups whose sizes differ by at most one.
/// Used for conditional (binned) expectations.
#[derive(Debug, Clone)]
pub struct EqualMassBins {
    /// Sample indices sorted by the binning coordinate.
    pub order: Vec<u32>,
    /// Bin `k` holds `order[offsets[k]..offsets[k+1]]`.
    pub offsets: Vec<usize>,
}

impl EqualMassBins {
    pub fn new<R: Real>(values: &[R], nbins: usize) -> Result<Self> {
        if nbins == 0 {
            return Err(Error::InvalidParameter("bin count must be positive".into()));
        }
        if values.len() < nbins {
            return Err(Error::InsufficientSamples {
                need: nbins,
                got: values.len(),
                context: "equal-mass binning",
            });
        }
        if values.len() > u32::MAX as usize {
            return Err(Error::InvalidParameter(
                "equal-mass binning supports at most 2^32-1 samples".into(),
            ));
        }
        let mut order: Vec<u32> = (0..values.len() as u32).collect();
        order.sort_unstable_by(|&a, &b| {
            values[a as usize]
                .partial_cmp(&values[b as usize])
                .expect("non-finite value in binning coordinate")
        });
        let n = values.len();
        let base = n / nbins;
        let extra = n % nbins;
        let mut offsets = Vec::with_capacity(nbins + 1);
        let mut acc = 0usize;
        offsets.push(0);
        for k in 0..nbins {
            acc += base + usize::from(k < extra);
            offsets.push(acc);
        }
        Ok(Self { order, offsets })
    }

    pub fn nbins(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Sample indices belonging to bin `k`.
    pub fn bin(&self, k: usize) -> &[u32] {
        &self.order[self.offsets[k]..self.offsets[k + 1]]
    }
}

/// Ordinary least-squares line `y ≈ slope·x + intercept`.
#[derive(Debug, Clone, Copy)]
pub struct LineFit<R> {
    pub slope: R,
    pub intercept: R,
    /// Largest absolute residual over the fitted points.
    pub max_residual: R,
}

pub fn linear_fit<R: Real>(xs: &[R], ys: &[R]) -> Result<LineFit<R>> {
    if xs.len() != ys.len() {
        return Err(Error::ShapeMismatch(format!(
            "linear fit needs matching lengths, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::InsufficientSamples {
            need: 2,
            got: xs.len(),
            context: "linear fit",
        });
    }
    let n = R::of(xs.len() as f64);
    let mx = compensated_sum(xs.iter().copied()) / n;
    let my = compensated_sum(ys.iter().copied()) / n;
    let sxx = compensated_sum(xs.iter().map(|&x| (x - mx) * (x - mx)));
    let sxy = compensated_sum(xs.iter().zip(ys).map(|(&x, &y)| (x - mx) * (y - my)));
    if sxx <= R::zero() {
        return Err(Error::InvalidParameter(
            "linear fit abscissae are all identical".into(),
        ));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let max_residual = xs
        .iter()
        .zip(ys)
        .map(|(&x, &y)| (y - slope * x - intercept).abs())
        .fold(R::zero(), R::max);
    Ok(LineFit { slope, intercept, max_residual })
}

/// Least-squares slope of a line constrained through the origin.
pub fn fit_through_origin<R: Real>(xs: &[R], ys: &[R]) -> Result<LineFit<R>> {
    if xs.len() != ys.len() {
        return Err(Error::ShapeMismatch(format!(
            "origin fit needs matching lengths, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let sxx = compensated_sum(xs.iter().map(|&x| x * x));
    if sxx <= R::zero() {
        return Err(Error::InvalidParameter(
            "origin fit abscissae are all zero".into(),
        ));
    }
    let sxy = compensated_sum(xs.iter().zip(ys).map(|(&x, &y)| x * y));
    let slope = sxy / sxx;
    let max_residual = xs
        .iter()
        .zip(ys)
        .map(|(&x, &y)| (y - slope * x).abs())
        .fold(R::zero(), R::max);
    Ok(LineFit { slope, intercept: R::zero(), max_residual })
}

/// Digamma function ψ(x) for x > 0, accurate to ~1e-12. Uses the recurrence
/// to push the argument above 8 and then the asymptotic series.
pub fn digamma(x: f64) -> f64 {
    assert!(x > 0.0, "digamma requires a positive argument");
    let mut acc = 0.0;
    let mut y = x;
    while y < 10.0 {
        acc -= 1.0 / y;
        y += 1.0;
    }
    let inv = 1.0 / y;
    let inv2 = inv * inv;
    // ln y − 1/(2y) − Σ B_{2n}/(2n y^{2n}), truncated after y^{-10}.
    acc + y.ln()
        - 0.5 * inv
        - inv2
            * (1.0 / 12.0
                - inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 / 132.0))))
}

/// Volume of the d-dimensional unit ball, d ∈ {1, 2, 3}.
pub fn unit_ball_volume(d: usize) -> Result<f64> {
    match d {
        1 => Ok(2.0),
        2 => Ok(std::f64::consts::PI),
        3 => Ok(4.0 * std::f64::consts::PI / 3.0),
        _ => Err(Error::InvalidParameter(format!(
            "unit ball volume implemented for d ≤ 3, got d = {d}"
        ))),
    }
}

/// f64 wrapper ordered by `total_cmp`, for heaps of distances.
#[derive(Debug, Clone, Copy, PartialEq)]
struct OrdF64(f64);

impl Eq for OrdF64 {}
impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Balanced k-d tree over points in up to three dimensions, specialised to
/// the k-th-nearest-neighbour distance queries the sample entropy estimator
/// needs. Points are stored in f64 regardless of the caller's scalar type.
pub struct KdTree {
    dim: usize,
    /// Point coordinates permuted into tree order (node-major).
    pts: Vec<f64>,
    /// Original index of each tree node.
    orig: Vec<u32>,
}

impl KdTree {
    /// Build from `n` points stored point-major (`points[i*dim..][..dim]`).
    pub fn build(points: &[f64], dim: usize) -> Result<Self> {
        if dim == 0 || dim > 3 {
            return Err(Error::InvalidParameter(format!(
                "k-d tree supports 1 ≤ d ≤ 3, got d = {dim}"
            )));
        }
        if points.is_empty() || points.len() % dim != 0 {
            return Err(Error::ShapeMismatch(format!(
                "point buffer length {} is not a positive multiple of d = {dim}",
                points.len()
            )));
        }
        let n = points.len() / dim;
        if n > u32::MAX as usize {
            return Err(Error::InvalidParameter(
                "k-d tree supports at most 2^32-1 points".into(),
            ));
        }
        let mut order: Vec<u32> = (0..n as u32).collect();
        Self::split(points, dim, &mut order, 0);
        let mut pts = Vec::with_capacity(points.len());
        for &i in &order {
            let base = i as usize * dim;
            pts.extend_from_slice(&points[base..base + dim]);
        }
        Ok(Self { dim, pts, orig: order })
    }

    fn split(points: &[f64], dim: usize, order: &mut [u32], depth: usize) {
        if order.len() <= 1 {
            return;
        }
        let axis = depth % dim;
        let mid = order.len() / 2;
        order.select_nth_unstable_by(mid, |&a, &b| {
            points[a as usize * dim + axis].total_cmp(&points[b as usize * dim + axis])
        });
        let (lo, rest) = order.split_at_mut(mid);
        Self::split(points, dim, lo, depth + 1);
        Self::split(points, dim, &mut rest[1..], depth + 1);
    }

    /// Euclidean distance from point `skip` (by original index) to its k-th
    /// nearest *other* point. `query` must be that point's coordinates.
    pub fn kth_neighbor_distance(&self, query: &[f64], skip: u32, k: usize) -> f64 {
        debug_assert_eq!(query.len(), self.dim);
        let mut heap: BinaryHeap<OrdF64> = BinaryHeap::with_capacity(k + 1);
        self.search(0..self.orig.len(), 0, query, skip, k, &mut heap);
        heap.peek().expect("k-NN query on too few points").0.sqrt()
    }

    fn search(
        &self,
        range: Range<usize>,
        depth: usize,
        query: &[f64],
        skip: u32,
        k: usize,
        heap: &mut BinaryHeap<OrdF64>,
    ) {
        if range.is_empty() {
            return;
        }
        let mid = range.start + (range.end - range.start) / 2;
        if self.orig[mid] != skip {
            let base = mid * self.dim;
            let mut d2 = 0.0;
            for a in 0..self.dim {
                let diff = self.pts[base + a] - query[a];
                d2 += diff * diff;
            }
            if heap.len() < k {
                heap.push(OrdF64(d2));
            } else if d2 < heap.peek().expect("nonempty heap").0 {
                heap.pop();
                heap.push(OrdF64(d2));
            }
        }
        let axis = depth % self.dim;
        let split = self.pts[mid * self.dim + axis];
        let delta = query[axis] - split;
        let (near, far) = if delta < 0.0 {
            (range.start..mid, mid + 1..range.end)
        } else {
            (mid + 1..range.end, range.start..mid)
        };
        self.search(near, depth + 1, query, skip, k, heap);
        let worst = heap.peek().map_or(f64::INFINITY, |w| w.0);
        if heap.len() < k || delta * delta < worst {
            self.search(far, depth + 1, query, skip, k, heap);
        }
    }
}

/// Distance from each point to its k-th nearest neighbour (self excluded).
/// Queries run in parallel over fixed blocks; output order is by point index.
pub fn kth_neighbor_distances(points: &[f64], dim: usize, k: usize) -> Result<Vec<f64>> {
    let tree = KdTree::build(points, dim)?;
    let n = points.len() / dim;
    if k == 0 || k >= n {
        return Err(Error::InvalidParameter(format!(
            "neighbour order k = {k} must satisfy 1 ≤ k < n = {n}"
        )));
    }
    let blocks = par_block_map(n, 4096, |_, range| {
        range
            .map(|i| tree.kth_neighbor_distance(&points[i * dim..(i + 1) * dim], i as u32, k))
            .collect::<Vec<f64>>()
    });
    Ok(blocks.concat())
}
