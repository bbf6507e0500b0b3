//! Quadratic-cost optimal transport and the Wasserstein-geometry checks:
//! metric derivative of the density flow, displacement interpolation,
//! steepest descent, the entropy–transport–information inequality, and
//! exponential entropy decay under a curvature bound.
//!
//! One-dimensional distances are computed **exactly** through quantile
//! functions: W₂(μ,ν)² = ∫₀¹ (F_μ⁻¹(u) − F_ν⁻¹(u))² du, integrated piecewise
//! (the integrand is polynomial between the merged CDF breakpoints of the
//! two inputs, so Simpson's rule per piece is exact). Multi-dimensional
//! distances use debiased entropic regularization (log-domain scaling
//! iterations with ε-annealing, Sinkhorn-divergence debiasing, and a final
//! rounding step that restores the marginals exactly).

use rayon::prelude::*;

use crate::entropy::{self, EntropyReport};
use crate::error::{Error, Result};
use crate::fpe::FpeRun;
use crate::grid::{GridDensity, GridSpec};
use crate::model::{Perturbation, ReferenceMeasure};
use crate::real::Real;
use crate::report::CheckReport;
use crate::stats::{compensated_sum, linear_fit};

/// Tolerance on |mass − 1| for inputs that must be probability densities.
const MASS_TOL: f64 = 1e-6;

/// Maximum support size per side for the entropic solver.
const MAX_SUPPORT: usize = 10_000;

// ---------------------------------------------------------------------------
// Quantile functions
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum QuantileRepr<R> {
    /// Continuous piecewise-linear quantile: Q(cdf[k]) = pos[k], linear in
    /// between (the quantile function of a piecewise-constant density).
    PiecewiseLinear { cdf: Vec<R>, pos: Vec<R> },
    /// Right-continuous step quantile of N equally weighted atoms.
    Steps { sorted: Vec<R> },
}

/// Quantile function F⁻¹ of a one-dimensional probability measure, either a
/// normalized grid density or an equally-weighted sample set.
#[derive(Debug, Clone)]
pub struct Quantile1D<R: Real> {
    repr: QuantileRepr<R>,
}

impl<R: Real> Quantile1D<R> {
    /// Quantile function of a normalized 1D grid density (piecewise-linear
    /// CDF through the cell edges). Unnormalized input is rejected.
    pub fn from_density(p: &GridDensity<R>) -> Result<Self> {
        let spec = p.spec();
        if spec.dim() != 1 {
            return Err(Error::InvalidParameter(
                "quantile functions require a one-dimensional density".into(),
            ));
        }
        let mass = p.mass();
        if (mass.to_f64_lossy() - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidParameter(format!(
                "transport inputs must be normalized; density mass is {mass}"
            )));
        }
        let values = p.values();
        let first = values
            .iter()
            .position(|&v| v > R::zero())
            .ok_or_else(|| Error::EmptyInput("density has no positive cells".into()))?;
        let last = values.iter().rposition(|&v| v > R::zero()).expect("first exists");
        let h = spec.dx(0);
        let mut cdf = Vec::with_capacity(last - first + 2);
        let mut pos = Vec::with_capacity(last - first + 2);
        cdf.push(R::zero());
        pos.push(spec.axis_edge(0, first));
        let mut acc = R::zero();
        for i in first..=last {
            acc = acc + values[i] * h;
            cdf.push(acc);
            pos.push(spec.axis_edge(0, i + 1));
        }
        let total = *cdf.last().expect("nonempty");
        for c in cdf.iter_mut() {
            *c = *c / total;
        }
        *cdf.last_mut().expect("nonempty") = R::one();
        Ok(Self { repr: QuantileRepr::PiecewiseLinear { cdf, pos } })
    }

    /// Empirical quantile function of equally weighted samples.
    pub fn from_samples(samples: &[R]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyInput("sample quantile needs at least one point".into()));
        }
        if let Some(&bad) = samples.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "samples must be finite, found {bad}"
            )));
        }
        let mut sorted = samples.to_vec();
        sorted.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite values"));
        Ok(Self { repr: QuantileRepr::Steps { sorted } })
    }

    /// Evaluate the quantile at level `u ∈ [0,1]` (clamped).
    pub fn eval(&self, u: R) -> R {
        let u = u.max(R::zero()).min(R::one());
        match &self.repr {
            QuantileRepr::PiecewiseLinear { cdf, pos } => {
                let k = cdf.partition_point(|&c| c < u).clamp(1, cdf.len() - 1);
                let (c0, c1) = (cdf[k - 1], cdf[k]);
                let span = c1 - c0;
                let t = if span > R::zero() { ((u - c0) / span).min(R::one()) } else { R::one() };
                pos[k - 1] + t * (pos[k] - pos[k - 1])
            }
            QuantileRepr::Steps { sorted } => {
                let n = sorted.len();
                let idx = (u.to_f64_lossy() * n as f64).ceil() as isize - 1;
                sorted[idx.clamp(0, n as isize - 1) as usize]
            }
        }
    }

    /// CDF at a point (inverse of `eval`).
    pub fn cdf_at(&self, x: R) -> R {
        match &self.repr {
            QuantileRepr::PiecewiseLinear { cdf, pos } => {
                if x <= pos[0] {
                    return R::zero();
                }
                if x >= *pos.last().expect("nonempty") {
                    return R::one();
                }
                let k = pos.partition_point(|&p| p < x).clamp(1, pos.len() - 1);
                let span = pos[k] - pos[k - 1];
                let t = if span > R::zero() { (x - pos[k - 1]) / span } else { R::one() };
                cdf[k - 1] + t * (cdf[k] - cdf[k - 1])
            }
            QuantileRepr::Steps { sorted } => {
                let rank = sorted.partition_point(|&s| s <= x);
                R::of(rank as f64 / sorted.len() as f64)
            }
        }
    }

    /// CDF breakpoints of this quantile function (sorted, in [0,1]).
    fn levels(&self) -> Vec<R> {
        match &self.repr {
            QuantileRepr::PiecewiseLinear { cdf, .. } => cdf.clone(),
            QuantileRepr::Steps { sorted } => {
                let n = sorted.len();
                (0..=n).map(|i| R::of(i as f64 / n as f64)).collect()
            }
        }
    }

    /// Values (f(l), f(mid), f(r)) on a piece (l, r) free of breakpoints;
    /// step quantiles are constant on the open piece, so the midpoint value
    /// is used throughout (endpoint evaluation would be side-ambiguous).
    fn eval_piece(&self, l: R, r: R) -> (R, R, R) {
        let mid = (l + r) * R::of(0.5);
        match &self.repr {
            QuantileRepr::PiecewiseLinear { .. } => (self.eval(l), self.eval(mid), self.eval(r)),
            QuantileRepr::Steps { .. } => {
                let v = self.eval(mid);
                (v, v, v)
            }
        }
    }
}

/// Exact 1D quadratic-cost distance through the quantile coupling:
/// W₂² = ∫₀¹ (Q_a(u) − Q_b(u))² du. The unit interval is partitioned at the
/// merged breakpoints of both quantile functions (refined to at least 2¹²
/// nodes); on every piece the integrand is a polynomial of degree ≤ 2, so
/// the per-piece Simpson rule integrates it exactly.
pub fn w2_1d<R: Real>(a: &Quantile1D<R>, b: &Quantile1D<R>) -> R {
    let mut levels = a.levels();
    levels.extend(b.levels());
    let refine = 1 << 12;
    levels.extend((0..=refine).map(|k| R::of(k as f64 / refine as f64)));
    levels.sort_unstable_by(|x, y| x.partial_cmp(y).expect("levels are finite"));
    levels.dedup();
    let sixth = R::of(1.0 / 6.0);
    let total = compensated_sum(levels.windows(2).map(|w| {
        let (l, r) = (w[0], w[1]);
        let du = r - l;
        if !(du > R::zero()) {
            return R::zero();
        }
        let (al, am, ar) = a.eval_piece(l, r);
        let (bl, bm, br) = b.eval_piece(l, r);
        let (dl, dm, dr) = (al - bl, am - bm, ar - br);
        du * sixth * (dl * dl + R::of(4.0) * dm * dm + dr * dr)
    }));
    total.max(R::zero()).sqrt()
}

// ---------------------------------------------------------------------------
// Monotone maps, displacement interpolation, geodesics
// ---------------------------------------------------------------------------

/// The monotone (non-decreasing) transport map T = Q_b ∘ F_a pushing a 1D
/// density μ_a to μ_b; in one dimension this is the optimal quadratic-cost
/// map (and automatically the gradient of a convex function).
#[derive(Debug, Clone)]
pub struct MonotoneMap<R: Real> {
    from: Quantile1D<R>,
    to: Quantile1D<R>,
}

impl<R: Real> MonotoneMap<R> {
    pub fn new(mu_a: &GridDensity<R>, mu_b: &GridDensity<R>) -> Result<Self> {
        Ok(Self {
            from: Quantile1D::from_density(mu_a)?,
            to: Quantile1D::from_density(mu_b)?,
        })
    }

    /// T(x) = Q_b(F_a(x)).
    pub fn eval(&self, x: R) -> R {
        self.to.eval(self.from.cdf_at(x))
    }
}

/// Density of the constant-speed interpolation ((1−s)Id + s·T)#μ_a at
/// parameter `s ∈ [0,1]`, resampled onto μ_a's grid. Cell masses are
/// computed exactly by inverting the monotone position map
/// X_s(u) = (1−s)Q_a(u) + s·Q_b(u) at every cell edge (bisection), so the
/// result has unit mass and reproduces μ_a exactly at s = 0.
pub fn displacement_interpolate<R: Real>(
    mu_a: &GridDensity<R>,
    mu_b: &GridDensity<R>,
    s: R,
) -> Result<GridDensity<R>> {
    if !(s >= R::zero() && s <= R::one()) {
        return Err(Error::InvalidParameter(format!(
            "interpolation parameter must lie in [0,1], got {s}"
        )));
    }
    let qa = Quantile1D::from_density(mu_a)?;
    let qb = Quantile1D::from_density(mu_b)?;
    let spec = mu_a.spec().clone();
    let pos = |u: R| (R::one() - s) * qa.eval(u) + s * qb.eval(u);
    let tiny = R::of(1e-12);
    if pos(R::zero()) < spec.lo(0) - tiny || pos(R::one()) > spec.hi(0) + tiny {
        return Err(Error::InvalidParameter(
            "interpolant support leaves the grid of the first density".into(),
        ));
    }
    let n = spec.cells(0);
    let mut edge_levels = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let e = spec.axis_edge(0, k);
        let u = if pos(R::zero()) >= e {
            R::zero()
        } else if pos(R::one()) <= e {
            R::one()
        } else {
            let (mut lo, mut hi) = (R::zero(), R::one());
            for _ in 0..80 {
                let mid = (lo + hi) * R::of(0.5);
                if pos(mid) < e {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            (lo + hi) * R::of(0.5)
        };
        edge_levels.push(u);
    }
    // Bisection noise can produce microscopic inversions; enforce
    // monotonicity before differencing.
    for k in 1..edge_levels.len() {
        if edge_levels[k] < edge_levels[k - 1] {
            edge_levels[k] = edge_levels[k - 1];
        }
    }
    let h = spec.dx(0);
    let values: Vec<R> = edge_levels.windows(2).map(|w| (w[1] - w[0]) / h).collect();
    GridDensity::from_values(spec, values, s)
}

/// Displacement interpolation with explicit endpoint times: the density at
/// time `t ∈ [t_a, t_b]` along the constant-speed curve from μ_a to μ_b.
pub fn displacement_interpolate_at<R: Real>(
    mu_a: &GridDensity<R>,
    mu_b: &GridDensity<R>,
    t_a: R,
    t_b: R,
    t: R,
) -> Result<GridDensity<R>> {
    if !(t_b > t_a) {
        return Err(Error::InvalidParameter(format!(
            "geodesic endpoints must satisfy t_a < t_b, got [{t_a}, {t_b}]"
        )));
    }
    if t < t_a || t > t_b {
        return Err(Error::InvalidParameter(format!(
            "interpolation time {t} lies outside [{t_a}, {t_b}]"
        )));
    }
    let mut out = displacement_interpolate(mu_a, mu_b, (t - t_a) / (t_b - t_a))?;
    out.set_time(t);
    Ok(out)
}

/// A constant-speed interpolation curve between two densities.
#[derive(Debug, Clone)]
pub struct GeodesicCurve<R: Real> {
    pub t_a: R,
    pub t_b: R,
    pub times: Vec<R>,
    pub densities: Vec<GridDensity<R>>,
}

/// Sample the constant-speed curve from μ_a (at t_a) to μ_b (at t_b) at the
/// given times.
pub fn geodesic_curve<R: Real>(
    mu_a: &GridDensity<R>,
    mu_b: &GridDensity<R>,
    t_a: R,
    t_b: R,
    times: &[R],
) -> Result<GeodesicCurve<R>> {
    if times.is_empty() {
        return Err(Error::EmptyInput("geodesic sampling needs at least one time".into()));
    }
    let densities = times
        .iter()
        .map(|&t| displacement_interpolate_at(mu_a, mu_b, t_a, t_b, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(GeodesicCurve { t_a, t_b, times: times.to_vec(), densities })
}

// ---------------------------------------------------------------------------
// Transport plans
// ---------------------------------------------------------------------------

/// A coupling between two discrete measures with its squared-distance cost.
/// Entropic plans carry a rank-one correction (`row_fix ⊗ col_fix / Σ`) that
/// restores the marginals exactly after sparsification.
#[derive(Debug, Clone)]
pub struct TransportPlan<R: Real> {
    rows: usize,
    cols: usize,
    cost: R,
    entries: Vec<(u32, u32, R)>,
    row_fix: Vec<R>,
    col_fix: Vec<R>,
}

impl<R: Real> TransportPlan<R> {
    /// Squared transport distance (debiased estimate for entropic plans).
    pub fn cost(&self) -> R {
        self.cost
    }

    pub fn distance(&self) -> R {
        self.cost.max(R::zero()).sqrt()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Sparse coupling entries `(source cell, target cell, mass)`.
    pub fn entries(&self) -> &[(u32, u32, R)] {
        &self.entries
    }

    /// Row and column sums of the full coupling (sparse entries plus the
    /// rank-one correction).
    pub fn marginals(&self) -> (Vec<R>, Vec<R>) {
        let mut row = vec![R::zero(); self.rows];
        let mut col = vec![R::zero(); self.cols];
        for &(i, j, m) in &self.entries {
            row[i as usize] += m;
            col[j as usize] += m;
        }
        if !self.row_fix.is_empty() {
            for (r, &f) in row.iter_mut().zip(&self.row_fix) {
                *r += f;
            }
            for (c, &f) in col.iter_mut().zip(&self.col_fix) {
                *c += f;
            }
        }
        (row, col)
    }
}

/// Exact 1D optimal plan between grid densities via the monotone coupling:
/// mass levels are merged from both CDFs, so each entry (i, j, m) moves the
/// CDF slice shared by source cell i and target cell j.
pub fn monotone_plan<R: Real>(
    mu_a: &GridDensity<R>,
    mu_b: &GridDensity<R>,
) -> Result<TransportPlan<R>> {
    for (side, d) in [("source", mu_a), ("target", mu_b)] {
        if d.spec().dim() != 1 {
            return Err(Error::InvalidParameter(format!(
                "monotone plans require one-dimensional densities ({side} is not)"
            )));
        }
        let mass = d.mass().to_f64_lossy();
        if (mass - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidParameter(format!(
                "transport inputs must be normalized; {side} mass is {mass}"
            )));
        }
    }
    let cdf = |d: &GridDensity<R>| -> Vec<R> {
        let h = d.spec().dx(0);
        let mut out = Vec::with_capacity(d.values().len() + 1);
        out.push(R::zero());
        let mut acc = R::zero();
        for &v in d.values() {
            acc = acc + v * h;
            out.push(acc);
        }
        let total = *out.last().expect("nonempty");
        for c in out.iter_mut() {
            *c = *c / total;
        }
        *out.last_mut().expect("nonempty") = R::one();
        out
    };
    let a = cdf(mu_a);
    let b = cdf(mu_b);
    let (na, nb) = (a.len() - 1, b.len() - 1);
    let mut entries = Vec::new();
    let (mut i, mut j) = (0usize, 0usize);
    let mut level = R::zero();
    let stop = R::one() - R::of(1e-15);
    while level < stop {
        while i + 1 < na && a[i + 1] <= level {
            i += 1;
        }
        while j + 1 < nb && b[j + 1] <= level {
            j += 1;
        }
        let next = a[i + 1].min(b[j + 1]).min(R::one());
        if next > level {
            entries.push((i as u32, j as u32, next - level));
            level = next;
        } else {
            // Both upper levels equal the current one at the final cells.
            break;
        }
    }
    let w = w2_1d(&Quantile1D::from_density(mu_a)?, &Quantile1D::from_density(mu_b)?);
    Ok(TransportPlan {
        rows: na,
        cols: nb,
        cost: w * w,
        entries,
        row_fix: Vec::new(),
        col_fix: Vec::new(),
    })
}

// ---------------------------------------------------------------------------
// Weighted point clouds and the entropic solver
// ---------------------------------------------------------------------------

/// A weighted point cloud (atoms with probability weights), the common
/// input format of the entropic solver. Grid densities convert to
/// cell-center atoms carrying cell masses.
#[derive(Debug, Clone)]
pub struct Cloud<R: Real> {
    dim: usize,
    points: Vec<R>,
    weights: Vec<R>,
}

impl<R: Real> Cloud<R> {
    /// Cell-center atoms with cell-mass weights. Cells lighter than
    /// 1e−12 × the heaviest cell are dropped and the rest renormalized
    /// (the dropped mass perturbs W₂ far below solver tolerance).
    pub fn from_density(p: &GridDensity<R>) -> Result<Self> {
        let mass = p.mass().to_f64_lossy();
        if (mass - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidParameter(format!(
                "transport inputs must be normalized; density mass is {mass}"
            )));
        }
        let spec = p.spec();
        let d = spec.dim();
        let vol = spec.cell_volume();
        let max_mass = p
            .values()
            .iter()
            .fold(R::zero(), |acc, &v| acc.max(v * vol));
        let cutoff = max_mass * R::of(1e-12);
        let mut points = Vec::new();
        let mut weights = Vec::new();
        let mut x = [R::zero(); 2];
        for flat in 0..spec.n_cells() {
            let m = p.values()[flat] * vol;
            if m > cutoff {
                spec.center(flat, &mut x[..d]);
                points.extend_from_slice(&x[..d]);
                weights.push(m);
            }
        }
        if weights.is_empty() {
            return Err(Error::EmptyInput("density has no positive cells".into()));
        }
        let total = compensated_sum(weights.iter().copied());
        for w in weights.iter_mut() {
            *w = *w / total;
        }
        Ok(Self { dim: d, points, weights })
    }

    /// Equally weighted atoms at the given positions (point-major layout).
    pub fn from_samples(points: &[R], dim: usize) -> Result<Self> {
        if dim == 0 || dim > 3 {
            return Err(Error::InvalidParameter(format!(
                "cloud dimension must be 1..=3, got {dim}"
            )));
        }
        if points.is_empty() || points.len() % dim != 0 {
            return Err(Error::ShapeMismatch(format!(
                "point buffer length {} is not a positive multiple of d = {dim}",
                points.len()
            )));
        }
        let n = points.len() / dim;
        let w = R::of(1.0 / n as f64);
        Ok(Self { dim, points: points.to_vec(), weights: vec![w; n] })
    }

    pub fn n(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points(&self) -> &[R] {
        &self.points
    }

    pub fn weights(&self) -> &[R] {
        &self.weights
    }

    fn to_f64(&self) -> (Vec<f64>, Vec<f64>) {
        (
            self.points.iter().map(|v| v.to_f64_lossy()).collect(),
            self.weights.iter().map(|v| v.to_f64_lossy()).collect(),
        )
    }
}

/// Bin samples (point-major) onto a grid as a histogram density. Points
/// outside the box are clamped into the boundary cells, so the result
/// always has unit mass; callers should choose boxes that contain the bulk.
pub fn histogram_density<R: Real>(
    spec: &GridSpec<R>,
    positions: &[R],
    dim: usize,
    time: R,
) -> Result<GridDensity<R>> {
    if dim != spec.dim() {
        return Err(Error::ShapeMismatch(format!(
            "histogram dimension {dim} does not match the {}-dimensional grid",
            spec.dim()
        )));
    }
    if positions.is_empty() || positions.len() % dim != 0 {
        return Err(Error::ShapeMismatch(format!(
            "position buffer length {} is not a positive multiple of d = {dim}",
            positions.len()
        )));
    }
    let n = positions.len() / dim;
    let mut counts = vec![0u64; spec.n_cells()];
    for p in positions.chunks_exact(dim) {
        let mut flat = 0usize;
        for a in 0..dim {
            let u = ((p[a] - spec.lo(a)) / spec.dx(a)).floor().to_f64_lossy();
            let i = (u as isize).clamp(0, spec.cells(a) as isize - 1) as usize;
            flat += i * spec.stride(a);
        }
        counts[flat] += 1;
    }
    let scale = R::of(1.0 / n as f64) / spec.cell_volume();
    let values = counts.iter().map(|&c| R::of(c as f64) * scale).collect();
    GridDensity::from_values(spec.clone(), values, time)
}

struct SinkhornSolution {
    cost: f64,
    f: Vec<f64>,
    g: Vec<f64>,
    eps: f64,
}

fn sq_dist(pa: &[f64], i: usize, pb: &[f64], j: usize, d: usize) -> f64 {
    let mut s = 0.0;
    for a in 0..d {
        let diff = pa[i * d + a] - pb[j * d + a];
        s += diff * diff;
    }
    s
}

/// Log-domain scaling iterations with ε-annealing. Returns converged dual
/// potentials and the transport cost ⟨π, C⟩ at the target ε.
fn sinkhorn_f64(
    pa: &[f64],
    wa: &[f64],
    pb: &[f64],
    wb: &[f64],
    d: usize,
    eps_target: f64,
    scale2: f64,
) -> Result<SinkhornSolution> {
    let n = wa.len();
    let m = wb.len();
    let la: Vec<f64> = wa.iter().map(|w| w.ln()).collect();
    let lb: Vec<f64> = wb.iter().map(|w| w.ln()).collect();
    let mut f = vec![0.0f64; n];
    let mut g = vec![0.0f64; m];

    let mut ladder = Vec::new();
    let mut e = (scale2 * 0.25).max(eps_target);
    while e > eps_target * 1.5 {
        ladder.push(e);
        e /= 3.0;
    }
    ladder.push(eps_target);

    let mut total_iter = 0usize;
    let mut last_err = f64::INFINITY;
    for (stage, &eps) in ladder.iter().enumerate() {
        let tol = if stage + 1 == ladder.len() { 1e-9 } else { 1e-4 };
        loop {
            total_iter += 1;
            if total_iter > 100_000 {
                return Err(Error::NoConvergence {
                    context: "entropic transport scaling iterations",
                    error: last_err,
                    iterations: total_iter,
                });
            }
            // Row pass: update f and measure how far the previous iterate's
            // row marginals had drifted (rows are exact right after their
            // own update, so this is the current convergence error).
            let row: Vec<(f64, f64)> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..m {
                        let v = lb[j] + (g[j] - sq_dist(pa, i, pb, j, d)) / eps;
                        if v > mx {
                            mx = v;
                        }
                    }
                    let mut sum = 0.0;
                    for j in 0..m {
                        let v = lb[j] + (g[j] - sq_dist(pa, i, pb, j, d)) / eps;
                        sum += (v - mx).exp();
                    }
                    let lse = mx + sum.ln();
                    let drift = ((la[i] + f[i] / eps + lse).exp() - wa[i]).abs();
                    (-eps * lse, drift)
                })
                .collect();
            let mut err = 0.0;
            for (i, (fi, drift)) in row.into_iter().enumerate() {
                f[i] = fi;
                err += drift;
            }
            // Column pass: after this, column marginals are exact.
            let col: Vec<f64> = (0..m)
                .into_par_iter()
                .map(|j| {
                    let mut mx = f64::NEG_INFINITY;
                    for i in 0..n {
                        let v = la[i] + (f[i] - sq_dist(pa, i, pb, j, d)) / eps;
                        if v > mx {
                            mx = v;
                        }
                    }
                    let mut sum = 0.0;
                    for i in 0..n {
                        let v = la[i] + (f[i] - sq_dist(pa, i, pb, j, d)) / eps;
                        sum += (v - mx).exp();
                    }
                    -eps * (mx + sum.ln())
                })
                .collect();
            g = col;
            last_err = err;
            if err < tol && total_iter > 1 {
                break;
            }
        }
    }

    let eps = *ladder.last().expect("nonempty ladder");
    let cost = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut acc = 0.0;
            for j in 0..m {
                let c = sq_dist(pa, i, pb, j, d);
                acc += c * (la[i] + lb[j] + (f[i] + g[j] - c) / eps).exp();
            }
            acc
        })
        .sum();
    Ok(SinkhornSolution { cost, f, g, eps })
}

/// Entropy-regularized quadratic-cost distance between weighted clouds,
/// debiased as ⟨γ_ab,C⟩ − ½⟨γ_aa,C⟩ − ½⟨γ_bb,C⟩, with the returned plan
/// rounded to match the marginals exactly. Returns (distance, plan); the
/// plan's `cost` is the debiased squared distance.
pub fn w2_entropic<R: Real>(
    a: &Cloud<R>,
    b: &Cloud<R>,
    eps: R,
) -> Result<(R, TransportPlan<R>)> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!(
            "cloud dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    if !(eps > R::zero()) {
        return Err(Error::InvalidParameter(
            "entropic regularization must be positive; use the exact 1D quantile solver for ε = 0"
                .into(),
        ));
    }
    for (side, c) in [("source", a), ("target", b)] {
        if c.n() > MAX_SUPPORT {
            return Err(Error::InvalidParameter(format!(
                "{side} cloud has {} support points, above the {MAX_SUPPORT} limit",
                c.n()
            )));
        }
    }
    let (pa, wa) = a.to_f64();
    let (pb, wb) = b.to_f64();
    let d = a.dim();
    let eps_f = eps.to_f64_lossy();

    // Squared diameter of the joint bounding box sets the annealing start.
    let mut scale2 = 0.0;
    for axis in 0..d {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for p in pa.chunks_exact(d).chain(pb.chunks_exact(d)) {
            lo = lo.min(p[axis]);
            hi = hi.max(p[axis]);
        }
        scale2 += (hi - lo) * (hi - lo);
    }
    scale2 = scale2.max(eps_f);

    let ab = sinkhorn_f64(&pa, &wa, &pb, &wb, d, eps_f, scale2)?;
    let aa = sinkhorn_f64(&pa, &wa, &pa, &wa, d, eps_f, scale2)?;
    let bb = sinkhorn_f64(&pb, &wb, &pb, &wb, d, eps_f, scale2)?;
    let debiased = (ab.cost - 0.5 * (aa.cost + bb.cost)).max(0.0);

    // Materialize the plan sparsely and round it to exact marginals: scale
    // rows then columns down to at most their targets, then add the
    // rank-one completion of the leftover deficits.
    let n = wa.len();
    let m = wb.len();
    let la: Vec<f64> = wa.iter().map(|w| w.ln()).collect();
    let lb: Vec<f64> = wb.iter().map(|w| w.ln()).collect();
    let mut entries: Vec<(u32, u32, f64)> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let mut row = Vec::new();
            for j in 0..m {
                let c = sq_dist(&pa, i, &pb, j, d);
                let mass = (la[i] + lb[j] + (ab.f[i] + ab.g[j] - c) / ab.eps).exp();
                if mass > 1e-16 {
                    row.push((i as u32, j as u32, mass));
                }
            }
            row
        })
        .collect();
    let mut row_sum = vec![0.0f64; n];
    for &(i, _, mass) in &entries {
        row_sum[i as usize] += mass;
    }
    for (i2, _, mass) in entries.iter_mut() {
        let r = row_sum[*i2 as usize];
        if r > wa[*i2 as usize] {
            *mass *= wa[*i2 as usize] / r;
        }
    }
    let mut col_sum = vec![0.0f64; m];
    for &(_, j, mass) in &entries {
        col_sum[j as usize] += mass;
    }
    for (_, j2, mass) in entries.iter_mut() {
        let c = col_sum[*j2 as usize];
        if c > wb[*j2 as usize] {
            *mass *= wb[*j2 as usize] / c;
        }
    }
    let mut row_fix = wa.clone();
    let mut col_fix = wb.clone();
    for &(i, j, mass) in &entries {
        row_fix[i as usize] -= mass;
        col_fix[j as usize] -= mass;
    }
    for v in row_fix.iter_mut().chain(col_fix.iter_mut()) {
        *v = v.max(0.0);
    }
    let sr: f64 = row_fix.iter().sum();
    let sc: f64 = col_fix.iter().sum();
    if sr > 0.0 && sc > 0.0 {
        // Normalize the correction so the rank-one term row_fix·col_fixᵀ/sr
        // adds exactly row_fix to rows and col_fix to columns.
        let adjust = sr / sc;
        for v in col_fix.iter_mut() {
            *v *= adjust;
        }
        let total = sr;
        for v in col_fix.iter_mut() {
            *v /= total;
        }
        // Fold the normalization into col_fix: contribution is
        // row_fix[i]·col_fix[j] with Σ col_fix = 1.
    } else {
        row_fix.clear();
        col_fix.clear();
    }
    // Store col_fix pre-multiplied so marginals() can add them directly:
    // column j receives Σ_i row_fix[i]·col_fix[j] = sr·col_fix[j].
    let col_fix_abs: Vec<f64> = col_fix.iter().map(|v| v * sr).collect();

    let plan = TransportPlan {
        rows: n,
        cols: m,
        cost: R::of(debiased),
        entries: entries
            .into_iter()
            .map(|(i, j, mass)| (i, j, R::of(mass)))
            .collect(),
        row_fix: row_fix.into_iter().map(R::of).collect(),
        col_fix: col_fix_abs.into_iter().map(R::of).collect(),
    };
    Ok((R::of(debiased.sqrt()), plan))
}

// ---------------------------------------------------------------------------
// Geometry checks
// ---------------------------------------------------------------------------

/// ∫ ‖∇log(p/q)(x) + 2β(x)‖² p(x) dx by midpoint quadrature.
fn weighted_velocity_norm2<R: Real>(
    p: &GridDensity<R>,
    m: &ReferenceMeasure<R>,
    pert: Option<&Perturbation<R>>,
) -> Result<R> {
    let grad = entropy::grad_log_ratio_field(p, m)?;
    let spec = p.spec();
    let d = spec.dim();
    let vol = spec.cell_volume();
    let two = R::of(2.0);
    let mut x = [R::zero(); 2];
    let mut g = vec![R::zero(); d];
    let terms: Vec<R> = (0..spec.n_cells())
        .map(|flat| {
            spec.center(flat, &mut x[..d]);
            grad.eval(&x[..d], &mut g).expect("cell centers lie inside the grid");
            if let Some(pt) = pert {
                let beta = pt.beta(&x[..d]);
                for a in 0..d {
                    g[a] += two * beta[a];
                }
            }
            let n2: R = g.iter().map(|&v| v * v).sum();
            n2 * p.values()[flat] * vol
        })
        .collect();
    Ok(compensated_sum(terms.into_iter()))
}

fn require_deltas<R: Real>(deltas: &[R], need: usize, context: &'static str) -> Result<()> {
    if deltas.len() < need {
        return Err(Error::InsufficientSamples { need, got: deltas.len(), context });
    }
    if deltas.iter().any(|&d| !(d > R::zero())) {
        return Err(Error::InvalidParameter(format!(
            "window widths must be positive ({context})"
        )));
    }
    Ok(())
}

/// Verify the limiting Wasserstein speed of the density flow at t₀:
/// W₂(p_{t₀+δ}, p_{t₀})/δ, extrapolated δ → 0, must equal
/// ½·(∫‖∇log(p/q) + 2β‖² p dx)^{1/2} (for β ≡ 0 this is ½√I).
pub fn metric_derivative_check<R: Real>(
    run: &FpeRun<R>,
    m: &ReferenceMeasure<R>,
    pert: Option<&Perturbation<R>>,
    t0: R,
    deltas: &[R],
) -> Result<CheckReport> {
    require_deltas(deltas, 3, "metric-derivative window sweep")?;
    let p0 = run.snapshot(run.index_at_time(t0)?);
    if p0.spec().dim() != 1 {
        return Err(Error::InvalidParameter(
            "the metric-derivative check uses the exact 1D distance; higher dimensions are not supported".into(),
        ));
    }
    let target = R::of(0.5) * weighted_velocity_norm2(p0, m, pert)?.sqrt();
    let q0 = Quantile1D::from_density(p0)?;
    let mut quotients = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let p = run.snapshot(run.index_at_time(t0 + delta)?);
        let w = w2_1d(&Quantile1D::from_density(p)?, &q0);
        quotients.push(w / delta);
    }
    let fit = linear_fit(deltas, &quotients)?;
    let scale = target.to_f64_lossy().max(0.05);
    let mut report = CheckReport::relative(
        "metric_derivative",
        "limiting W₂ speed of the flow equals half the L²(p) norm of ∇log(p/q) + 2β",
        fit.intercept.to_f64_lossy(),
        target.to_f64_lossy(),
        scale,
        0.05,
    )
    .with_detail("fit_slope", fit.slope.to_f64_lossy());
    for (&delta, &q) in deltas.iter().zip(&quotients) {
        report = report.with_detail(
            format!("quotient_delta_{}", delta.to_f64_lossy()),
            q.to_f64_lossy(),
        );
    }
    Ok(report)
}

/// Verify the steepest-descent property: the entropy-drop-per-Wasserstein-
/// displacement ratio of the unperturbed flow extrapolates to −√I at t₀,
/// and any perturbed flow's ratio is no smaller (strictly larger when the
/// perturbation is not parallel to the score in L²(p_{t₀})).
pub fn steepest_descent_check<R: Real>(
    run0: &FpeRun<R>,
    run_beta: Option<&FpeRun<R>>,
    m: &ReferenceMeasure<R>,
    pert: Option<&Perturbation<R>>,
    t0: R,
    deltas: &[R],
) -> Result<CheckReport> {
    require_deltas(deltas, 3, "steepest-descent window sweep")?;
    let p0 = run0.snapshot(run0.index_at_time(t0)?);
    if p0.spec().dim() != 1 {
        return Err(Error::InvalidParameter(
            "the steepest-descent check uses the exact 1D distance; higher dimensions are not supported".into(),
        ));
    }
    let ratio_intercept = |run: &FpeRun<R>| -> Result<R> {
        let base = run.snapshot(run.index_at_time(t0)?);
        let h0 = entropy::relative_entropy(base, m)?;
        let qb = Quantile1D::from_density(base)?;
        let mut ratios = Vec::with_capacity(deltas.len());
        for &delta in deltas {
            let p = run.snapshot(run.index_at_time(t0 + delta)?);
            let w = w2_1d(&Quantile1D::from_density(p)?, &qb);
            if !(w > R::zero()) {
                return Err(Error::InvalidParameter(format!(
                    "zero Wasserstein displacement over window {delta}; the ratio is undefined"
                )));
            }
            ratios.push((entropy::relative_entropy(p, m)? - h0) / w);
        }
        Ok(linear_fit(deltas, &ratios)?.intercept)
    };
    let ratio0 = ratio_intercept(run0)?;
    let i0 = entropy::fisher_information(p0, m)?;
    let target = -i0.sqrt();
    let scale = i0.sqrt().to_f64_lossy().max(0.05);
    let mut report = CheckReport::relative(
        "steepest_descent",
        "entropy drop per unit W₂ displacement extrapolates to −√I for the unperturbed flow",
        ratio0.to_f64_lossy(),
        target.to_f64_lossy(),
        scale,
        0.05,
    );
    if let Some(rb) = run_beta {
        let pert = pert.ok_or_else(|| {
            Error::InvalidParameter(
                "a perturbed run requires the perturbation that generated it".into(),
            )
        })?;
        let pb0 = rb.snapshot(rb.index_at_time(t0)?);
        if pb0.linf_diff(p0)?.to_f64_lossy() > 1e-8 {
            return Err(Error::InvalidParameter(
                "both runs must share the density at t₀ for a ratio comparison".into(),
            ));
        }
        let ratio_b = ratio_intercept(rb)?;
        let margin = ratio_b - ratio0;
        // Angle between the score ∇log(p/q) and 2β in L²(p_{t₀}).
        let grad = entropy::grad_log_ratio_field(p0, m)?;
        let spec = p0.spec();
        let vol = spec.cell_volume();
        let two = R::of(2.0);
        let mut x = [R::zero(); 1];
        let mut g = [R::zero(); 1];
        let mut gg = R::zero();
        let mut bb = R::zero();
        let mut gb = R::zero();
        for flat in 0..spec.n_cells() {
            spec.center(flat, &mut x);
            grad.eval(&x, &mut g).expect("cell centers lie inside the grid");
            let beta2 = two * pert.beta(&x)[0];
            let w = p0.values()[flat] * vol;
            gg += g[0] * g[0] * w;
            bb += beta2 * beta2 * w;
            gb += g[0] * beta2 * w;
        }
        let cos = if gg > R::zero() && bb > R::of(1e-12) {
            gb / (gg * bb).sqrt()
        } else {
            R::one()
        };
        let non_parallel = bb > R::of(1e-12)
            && (R::one() - cos * cos).to_f64_lossy() > 0.0025;
        report = report
            .with_detail("perturbed_ratio", ratio_b.to_f64_lossy())
            .with_detail("ratio_margin", margin.to_f64_lossy())
            .with_detail("score_angle_cosine", cos.to_f64_lossy())
            .and_require(
                margin.to_f64_lossy() >= -0.05 * scale,
                "perturbed ratio must not undercut the unperturbed steepest-descent ratio",
            );
        if non_parallel {
            report = report.and_require(
                margin > R::zero(),
                "non-parallel perturbations must raise the ratio strictly",
            );
        }
    }
    Ok(report)
}

/// Verify the initial derivative of relative entropy along a constant-speed
/// interpolation: (H[μ_s|Q] − H[μ_a|Q])/s extrapolated to s → 0 must match
/// ∫ ∇log(μ_a/q)(x)·(T(x) − x) μ_a(x) dx, with T the monotone map to μ_b.
pub fn geodesic_entropy_derivative_check<R: Real>(
    mu_a: &GridDensity<R>,
    mu_b: &GridDensity<R>,
    m: &ReferenceMeasure<R>,
    windows: &[R],
) -> Result<CheckReport> {
    require_deltas(windows, 2, "geodesic entropy-derivative window sweep")?;
    if windows.iter().any(|&w| w > R::one()) {
        return Err(Error::InvalidParameter(
            "geodesic windows are fractions of the curve and must lie in (0, 1]".into(),
        ));
    }
    let map = MonotoneMap::new(mu_a, mu_b)?;
    let grad = entropy::grad_log_ratio_field(mu_a, m)?;
    let spec = mu_a.spec();
    let vol = spec.cell_volume();
    let mut x = [R::zero(); 1];
    let mut g = [R::zero(); 1];
    let terms: Vec<R> = (0..spec.n_cells())
        .map(|flat| {
            spec.center(flat, &mut x);
            grad.eval(&x, &mut g).expect("cell centers lie inside the grid");
            g[0] * (map.eval(x[0]) - x[0]) * mu_a.values()[flat] * vol
        })
        .collect();
    let rhs = compensated_sum(terms.into_iter());
    let h_a = entropy::relative_entropy(mu_a, m)?;
    let mut quotients = Vec::with_capacity(windows.len());
    for &s in windows {
        let mu_s = displacement_interpolate(mu_a, mu_b, s)?;
        quotients.push((entropy::relative_entropy(&mu_s, m)? - h_a) / s);
    }
    let intercept = linear_fit(windows, &quotients)?.intercept;
    let scale = rhs.to_f64_lossy().abs().max(0.05);
    let mut report = CheckReport::relative(
        "geodesic_entropy_derivative",
        "initial entropy derivative along the displacement interpolation equals ∫∇log(μ/q)·(T−Id) dμ",
        intercept.to_f64_lossy(),
        rhs.to_f64_lossy(),
        scale,
        0.03,
    );
    for (&s, &q) in windows.iter().zip(&quotients) {
        report = report.with_detail(
            format!("quotient_window_{}", s.to_f64_lossy()),
            q.to_f64_lossy(),
        );
    }
    Ok(report)
}

/// Verify the entropy–transport–information inequality under the curvature
/// bound Hess ψ ≥ κ·Id:
/// H[μ_a|Q] − H[μ_b|Q] ≤ W₂(μ_a,μ_b)·√I[μ_a|Q] − (κ/2)·W₂(μ_a,μ_b)².
pub fn hwi_check<R: Real>(
    mu_a: &GridDensity<R>,
    mu_b: &GridDensity<R>,
    m: &ReferenceMeasure<R>,
    kappa: R,
) -> Result<CheckReport> {
    let h_a = entropy::relative_entropy(mu_a, m)?;
    let h_b = entropy::relative_entropy(mu_b, m)?;
    let i_a = entropy::fisher_information(mu_a, m)?;
    let w = w2_1d(
        &Quantile1D::from_density(mu_a)?,
        &Quantile1D::from_density(mu_b)?,
    );
    let slack = w * i_a.sqrt() - kappa * R::of(0.5) * w * w - (h_a - h_b);
    Ok(CheckReport::lower_bound(
        "hwi",
        "entropy gap is bounded by W₂·√I − (κ/2)·W₂² under the curvature bound",
        slack.to_f64_lossy(),
        0.0,
        1e-6,
    )
    .with_detail("entropy_a", h_a.to_f64_lossy())
    .with_detail("entropy_b", h_b.to_f64_lossy())
    .with_detail("fisher_a", i_a.to_f64_lossy())
    .with_detail("w2", w.to_f64_lossy()))
}

/// Verify exponential entropy decay under the curvature bound:
/// H(t) ≤ H(t₀)·e^{−κ(t−t₀)} at every sample with H > 0. Because the
/// reference measure is unnormalized, H can be negative; the bound is
/// meaningful only on the positive range, and the range is truncated (with
/// a warning) where H ≤ 0. The measured late-time decay rate is reported as
/// the fitted slope of log(H − H_floor) with H_floor = −log Z, the entropy
/// of the normalized reference density (H − H_floor ≥ 0 always, and for
/// quadratic potentials it decays at the sharper rate ≈ −2κ).
pub fn exponential_decay_check<R: Real>(
    series: &EntropyReport<R>,
    t0: R,
    kappa: R,
    log_z: R,
) -> Result<CheckReport> {
    if series.times.len() < 3 {
        return Err(Error::InsufficientSamples {
            need: 3,
            got: series.times.len(),
            context: "entropy decay series",
        });
    }
    if !(kappa > R::zero()) {
        return Err(Error::InvalidParameter(format!(
            "curvature constant must be positive, got {kappa}"
        )));
    }
    let times = &series.times;
    let hs = &series.relative_entropy;
    let k0 = times
        .iter()
        .position(|&t| t >= t0 - R::of(1e-9))
        .ok_or_else(|| {
            Error::InvalidParameter(format!("t₀ = {t0} lies beyond the recorded series"))
        })?;
    let t_anchor = times[k0];
    let h0 = hs[k0];
    let floor = -log_z;

    let mut report;
    if h0 > R::zero() {
        let mut worst = f64::NEG_INFINITY;
        let mut end = times.len();
        for k in k0..times.len() {
            if hs[k] <= R::zero() {
                end = k;
                break;
            }
            let bound = h0 * (-kappa * (times[k] - t_anchor)).exp();
            worst = worst.max((hs[k] - bound).to_f64_lossy());
        }
        report = CheckReport::upper_bound(
            "exponential_decay",
            "relative entropy stays below H(t₀)·e^{−κ(t−t₀)} on its positive range",
            worst.max(0.0),
            0.0,
            1e-9 * h0.to_f64_lossy().max(1.0),
        )
        .with_detail("samples_in_range", (end - k0) as f64);
        if end < times.len() {
            report = report.with_warning(format!(
                "range truncated at t = {}: relative entropy becomes nonpositive there \
                 (the reference measure is unnormalized, so the bound is vacuous past that point)",
                times[end].to_f64_lossy()
            ));
        }
    } else {
        report = CheckReport::upper_bound(
            "exponential_decay",
            "relative entropy stays below H(t₀)·e^{−κ(t−t₀)} on its positive range",
            0.0,
            0.0,
            0.0,
        )
        .with_warning(
            "relative entropy at t₀ is nonpositive; the decay bound is vacuous on the whole \
             range (the reference measure is unnormalized)"
                .to_string(),
        );
    }
    report = report
        .with_detail("entropy_at_t0", h0.to_f64_lossy())
        .with_detail("entropy_floor", floor.to_f64_lossy());

    // Late-time rate fit on the floor-referenced entropy.
    let t_end = *times.last().expect("nonempty");
    let t_mid = (t_anchor + t_end) * R::of(0.5);
    let gap_floor = R::of(1e-12) * (h0 - floor).abs().max(R::one());
    let mut ts = Vec::new();
    let mut logs = Vec::new();
    for k in k0..times.len() {
        let gap = hs[k] - floor;
        if times[k] >= t_mid && gap > gap_floor {
            ts.push(times[k]);
            logs.push(gap.ln());
        }
    }
    if ts.len() >= 3 {
        let fit = linear_fit(&ts, &logs)?;
        report = report.with_detail("fitted_log_slope", fit.slope.to_f64_lossy());
    } else {
        report = report.with_warning(
            "too few samples above the entropy floor in the late-time window for a rate fit"
                .to_string(),
        );
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fpe::{solve_fpe, stable_dt};
    use crate::model::Potential;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gaussian_density(
        lo: f64,
        hi: f64,
        cells: usize,
        mean: f64,
        var: f64,
    ) -> GridDensity<f64> {
        let spec = GridSpec::new(&[(lo, hi, cells)]).unwrap();
        GridDensity::from_fn(spec, 0.0, true, |x| {
            (-(x[0] - mean) * (x[0] - mean) / (2.0 * var)).exp()
        })
        .unwrap()
    }

    fn gaussian_density_2d(
        lo: (f64, f64),
        hi: (f64, f64),
        cells: usize,
        mean: (f64, f64),
        var: f64,
    ) -> GridDensity<f64> {
        let spec = GridSpec::new(&[(lo.0, hi.0, cells), (lo.1, hi.1, cells)]).unwrap();
        GridDensity::from_fn(spec, 0.0, true, |x| {
            let dx = x[0] - mean.0;
            let dy = x[1] - mean.1;
            (-(dx * dx + dy * dy) / (2.0 * var)).exp()
        })
        .unwrap()
    }

    #[test]
    fn quantile_inverts_its_own_cdf() {
        let p = gaussian_density(-8.0, 8.0, 512, 0.3, 0.7);
        let q = Quantile1D::from_density(&p).unwrap();
        for &u in &[0.01, 0.1, 0.5, 0.9, 0.99] {
            let x = q.eval(u);
            assert_abs_diff_eq!(q.cdf_at(x), u, epsilon = 1e-12);
        }
        // Median of a symmetric density sits at its mean.
        assert_abs_diff_eq!(q.eval(0.5), 0.3, epsilon = 1e-3);
    }

    #[test]
    fn w2_translation_and_scale_match_gaussian_oracles() {
        // Pure translation: W₂(N(0,1), N(1,1)) = 1.
        let a = gaussian_density(-8.0, 8.0, 1024, 0.0, 1.0);
        let b = gaussian_density(-8.0, 8.0, 1024, 1.0, 1.0);
        let w = w2_1d(
            &Quantile1D::from_density(&a).unwrap(),
            &Quantile1D::from_density(&b).unwrap(),
        );
        assert_relative_eq!(w, 1.0, max_relative = 2e-3);
        // Same mean, different spread: W₂(N(0,1), N(0,¼)) = |1 − ½| = ½.
        let c = gaussian_density(-8.0, 8.0, 1024, 0.0, 0.25);
        let w = w2_1d(
            &Quantile1D::from_density(&a).unwrap(),
            &Quantile1D::from_density(&c).unwrap(),
        );
        assert_relative_eq!(w, 0.5, max_relative = 2e-3);
        // Identity of indiscernibles.
        let w = w2_1d(
            &Quantile1D::from_density(&a).unwrap(),
            &Quantile1D::from_density(&a).unwrap(),
        );
        assert_abs_diff_eq!(w, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn w2_samples_use_the_exact_pairing() {
        // Equal counts: shifting every sorted sample by 1 gives W₂ = 1.
        let a = Quantile1D::from_samples(&[3.0f64, 0.0, 1.0, 2.0]).unwrap();
        let b = Quantile1D::from_samples(&[2.0f64, 4.0, 1.0, 3.0]).unwrap();
        assert_abs_diff_eq!(w2_1d(&a, &b), 1.0, epsilon = 1e-12);
        // Unequal counts: Qa is 0 then 2, Qb ≡ 1, so the integrand is 1.
        let a = Quantile1D::from_samples(&[0.0f64, 2.0]).unwrap();
        let b = Quantile1D::from_samples(&[1.0f64]).unwrap();
        assert_abs_diff_eq!(w2_1d(&a, &b), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn w2_metric_axioms_hold_on_random_gaussian_triples() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let mut draw = || {
                let mean = rng.gen_range(-1.5..1.5);
                let var = rng.gen_range(0.2..1.5);
                gaussian_density(-10.0, 10.0, 512, mean, var)
            };
            let (a, b, c) = (draw(), draw(), draw());
            let (qa, qb, qc) = (
                Quantile1D::from_density(&a).unwrap(),
                Quantile1D::from_density(&b).unwrap(),
                Quantile1D::from_density(&c).unwrap(),
            );
            let (ab, ba) = (w2_1d(&qa, &qb), w2_1d(&qb, &qa));
            assert_abs_diff_eq!(ab, ba, epsilon = 1e-12);
            let (ac, cb) = (w2_1d(&qa, &qc), w2_1d(&qc, &qb));
            assert!(ab <= ac + cb + 1e-9, "triangle violated: {ab} > {ac} + {cb}");
        }
    }

    #[test]
    fn displacement_interpolation_matches_gaussian_geodesics() {
        // Translation geodesic: N(0,1) → N(4,1) passes through N(2,1).
        let a = gaussian_density(-6.0, 10.0, 1024, 0.0, 1.0);
        let b = gaussian_density(-6.0, 10.0, 1024, 4.0, 1.0);
        let mid = displacement_interpolate(&a, &b, 0.5).unwrap();
        let oracle = gaussian_density(-6.0, 10.0, 1024, 2.0, 1.0);
        let h = 16.0 / 1024.0;
        let l1: f64 = mid
            .values()
            .iter()
            .zip(oracle.values())
            .map(|(&x, &y)| (x - y).abs() * h)
            .sum();
        assert!(l1 < 1e-3, "translation midpoint L¹ error {l1}");
        // Scale geodesic: σ interpolates linearly, N(0,1) → N(0,4) gives
        // σ_mid = 1.5, i.e. N(0, 2.25).
        let a = gaussian_density(-10.0, 10.0, 1024, 0.0, 1.0);
        let b = gaussian_density(-10.0, 10.0, 1024, 0.0, 4.0);
        let mid = displacement_interpolate(&a, &b, 0.5).unwrap();
        let oracle = gaussian_density(-10.0, 10.0, 1024, 0.0, 2.25);
        let h = 20.0 / 1024.0;
        let l1: f64 = mid
            .values()
            .iter()
            .zip(oracle.values())
            .map(|(&x, &y)| (x - y).abs() * h)
            .sum();
        assert!(l1 < 1e-3, "scale midpoint L¹ error {l1}");
    }

    #[test]
    fn displacement_endpoints_and_speed_are_exact() {
        let a = gaussian_density(-8.0, 8.0, 512, -1.0, 0.5);
        let b = gaussian_density(-8.0, 8.0, 512, 1.5, 1.2);
        let at_zero = displacement_interpolate(&a, &b, 0.0).unwrap();
        assert!(at_zero.linf_diff(&a).unwrap() < 1e-9);
        // Constant speed: W₂(μ_u, μ_v) = |v−u|·W₂(μ_a, μ_b).
        let total = w2_1d(
            &Quantile1D::from_density(&a).unwrap(),
            &Quantile1D::from_density(&b).unwrap(),
        );
        let curve = geodesic_curve(&a, &b, 0.0, 1.0, &[0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]).unwrap();
        for u in 0..curve.times.len() {
            for v in (u + 1)..curve.times.len() {
                let w = w2_1d(
                    &Quantile1D::from_density(&curve.densities[u]).unwrap(),
                    &Quantile1D::from_density(&curve.densities[v]).unwrap(),
                );
                let expected = (curve.times[v] - curve.times[u]) * total;
                assert_relative_eq!(w, expected, max_relative = 0.01);
            }
        }
        // Out-of-range parameter is rejected.
        assert!(displacement_interpolate(&a, &b, 1.5).is_err());
        assert!(displacement_interpolate_at(&a, &b, 0.0, 1.0, -0.1).is_err());
    }

    #[test]
    fn monotone_plan_has_exact_marginals_and_consistent_cost() {
        let a = gaussian_density(-8.0, 8.0, 256, -0.5, 0.4);
        let b = gaussian_density(-8.0, 8.0, 256, 1.0, 1.1);
        let plan = monotone_plan(&a, &b).unwrap();
        let (row, col) = plan.marginals();
        let h = 16.0 / 256.0;
        for (i, &r) in row.iter().enumerate() {
            assert_abs_diff_eq!(r, a.values()[i] * h / a.mass(), epsilon = 1e-9);
        }
        for (j, &c) in col.iter().enumerate() {
            assert_abs_diff_eq!(c, b.values()[j] * h / b.mass(), epsilon = 1e-9);
        }
        let w = w2_1d(
            &Quantile1D::from_density(&a).unwrap(),
            &Quantile1D::from_density(&b).unwrap(),
        );
        assert_relative_eq!(plan.cost(), w * w, max_relative = 1e-12);
        assert!(plan.cost() > 0.0);
    }

    #[test]
    fn entropic_distance_vanishes_for_identical_clouds() {
        let p = gaussian_density(-6.0, 6.0, 64, 0.0, 1.0);
        let cloud = Cloud::from_density(&p).unwrap();
        let (dist, plan) = w2_entropic(&cloud, &cloud, 0.01).unwrap();
        assert!(dist < 0.01 * 1e-3, "self distance {dist}");
        let (row, col) = plan.marginals();
        for (m, &w) in row.iter().chain(col.iter()).zip(
            cloud.weights().iter().chain(cloud.weights().iter()),
        ) {
            assert_abs_diff_eq!(*m, w, epsilon = 1e-9);
        }
    }

    #[test]
    fn entropic_distance_recovers_a_2d_translation() {
        // Clouds built from grids shifted by exactly (1, 0): the optimal
        // coupling is the shift itself, so W₂ = 1.
        let a = gaussian_density_2d((-4.0, -4.0), (4.0, 4.0), 32, (0.0, 0.0), 1.0);
        let b = gaussian_density_2d((-3.0, -4.0), (5.0, 4.0), 32, (1.0, 0.0), 1.0);
        let ca = Cloud::from_density(&a).unwrap();
        let cb = Cloud::from_density(&b).unwrap();
        let (dist, plan) = w2_entropic(&ca, &cb, 0.05).unwrap();
        assert_relative_eq!(dist, 1.0, max_relative = 0.02);
        let (row, col) = plan.marginals();
        let max_err = row
            .iter()
            .zip(ca.weights())
            .chain(col.iter().zip(cb.weights()))
            .map(|(m, w)| (m - w).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err < 1e-9, "marginal error {max_err}");
    }

    #[test]
    fn entropic_matches_the_exact_1d_distance() {
        let a = gaussian_density(-6.0, 6.0, 128, 0.0, 0.25);
        let b = gaussian_density(-6.0, 6.0, 128, 1.0, 0.5);
        let exact = w2_1d(
            &Quantile1D::from_density(&a).unwrap(),
            &Quantile1D::from_density(&b).unwrap(),
        );
        let (dist, _) = w2_entropic(
            &Cloud::from_density(&a).unwrap(),
            &Cloud::from_density(&b).unwrap(),
            0.1,
        )
        .unwrap();
        assert_relative_eq!(dist, exact, max_relative = 0.02);
    }

    #[test]
    fn entropic_rejects_zero_regularization() {
        let p = gaussian_density(-6.0, 6.0, 64, 0.0, 1.0);
        let c = Cloud::from_density(&p).unwrap();
        let err = w2_entropic(&c, &c, 0.0).unwrap_err();
        assert!(matches!(err, Error::InvalidParameter(_)), "{err}");
    }

    #[test]
    fn histogram_density_bins_samples_with_unit_mass() {
        let spec = GridSpec::new(&[(-4.0f64, 4.0, 64)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let samples: Vec<f64> = (0..50_000)
            .map(|_| {
                let (u1, u2): (f64, f64) = (rng.gen_range(1e-12..1.0), rng.gen_range(0.0..1.0));
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * 0.5
            })
            .collect();
        let hist = histogram_density(&spec, &samples, 1, 0.0).unwrap();
        assert_abs_diff_eq!(hist.mass(), 1.0, epsilon = 1e-12);
        // Histogram should be close to the generating Gaussian in W₂.
        let oracle = gaussian_density(-4.0, 4.0, 64, 0.0, 0.25);
        let w = w2_1d(
            &Quantile1D::from_density(&hist).unwrap(),
            &Quantile1D::from_density(&oracle).unwrap(),
        );
        assert!(w < 0.02, "histogram W₂ deviation {w}");
    }

    /// Shared OU run: κ = 1, p₀ = N(0, 0.25), snapshots every 0.0125.
    fn ou_run(t_end: f64, mean: f64) -> (FpeRun<f64>, ReferenceMeasure<f64>) {
        let pot = Potential::quadratic(1, 1.0).unwrap();
        let spec = GridSpec::new(&[(-6.0f64, 6.0, 512)]).unwrap();
        let p0 = GridDensity::from_fn(spec, 0.0, true, |x| {
            (-(x[0] - mean) * (x[0] - mean) / (2.0 * 0.25)).exp()
        })
        .unwrap();
        let snapshot_every = 0.0125;
        let dt = snapshot_every / 64.0;
        assert!(dt <= stable_dt(p0.spec(), &pot, None));
        let steps = (t_end / dt).round() as usize;
        let run = solve_fpe(&p0, &pot, None, dt, steps, 64).unwrap();
        (run, ReferenceMeasure::new(pot))
    }

    #[test]
    fn metric_derivative_matches_the_fisher_oracle() {
        // At t₀ = 0 with p₀ = N(0, 0.25) and κ = 1 the oracle gives I = 1,
        // so the limiting Wasserstein speed is ½√I = 0.5.
        let (run, m) = ou_run(0.15, 0.0);
        let report =
            metric_derivative_check(&run, &m, None, 0.0, &[0.1, 0.05, 0.025]).unwrap();
        assert!(report.pass, "{}", report.summary_line());
        assert_relative_eq!(report.rhs, 0.5, max_relative = 2e-3);
        assert!((report.lhs - 0.5).abs() < 0.025, "quotient limit {}", report.lhs);
    }

    #[test]
    fn steepest_descent_ratio_matches_negative_root_fisher() {
        let (run, m) = ou_run(0.15, 0.0);
        let report =
            steepest_descent_check(&run, None, &m, None, 0.0, &[0.1, 0.05, 0.025]).unwrap();
        assert!(report.pass, "{}", report.summary_line());
        assert!((report.lhs + 1.0).abs() < 0.05, "ratio limit {}", report.lhs);
    }

    #[test]
    fn geodesic_entropy_derivative_matches_the_scale_map_oracle() {
        // N(0, 0.25) → N(0, 0.5) under κ = 1: T(x) = √2·x and
        // ∇log(μ_a/q)(x) = −2x, so the right side is
        // ∫(−2x)(√2−1)x μ_a dx = −2(√2−1)·0.25 ≈ −0.20711.
        let a = gaussian_density(-6.0, 6.0, 512, 0.0, 0.25);
        let b = gaussian_density(-6.0, 6.0, 512, 0.0, 0.5);
        let m = ReferenceMeasure::new(Potential::quadratic(1, 1.0).unwrap());
        let report =
            geodesic_entropy_derivative_check(&a, &b, &m, &[0.1, 0.05, 0.025]).unwrap();
        assert!(report.pass, "{}", report.summary_line());
        let oracle = -2.0 * (std::f64::consts::SQRT_2 - 1.0) * 0.25;
        assert_relative_eq!(report.rhs, oracle, max_relative = 1e-3);
        // Identical endpoints: both sides vanish.
        let trivial = geodesic_entropy_derivative_check(&a, &a, &m, &[0.1, 0.05]).unwrap();
        assert!(trivial.pass);
        assert!(trivial.lhs.abs() < 1e-9 && trivial.rhs.abs() < 1e-9);
    }

    #[test]
    fn hwi_holds_across_random_gaussian_pairs() {
        let m = ReferenceMeasure::new(Potential::quadratic(1, 1.0).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..50 {
            let mut draw = || {
                let mean = rng.gen_range(-1.5..1.5);
                let var = rng.gen_range(0.15..1.5);
                gaussian_density(-9.0, 9.0, 512, mean, var)
            };
            let (a, b) = (draw(), draw());
            let report = hwi_check(&a, &b, &m, 1.0).unwrap();
            assert!(report.pass, "trial {trial}: {}", report.summary_line());
        }
        // Equal inputs: 0 ≤ 0.
        let a = gaussian_density(-9.0, 9.0, 512, 0.3, 0.6);
        let report = hwi_check(&a, &a, &m, 1.0).unwrap();
        assert!(report.pass);
    }

    #[test]
    fn exponential_decay_holds_with_the_expected_late_rate() {
        // κ = 1, p₀ = N(1, 0.25): positive entropy early, decaying toward
        // the floor −log√π at asymptotic rate −2κ.
        let (run, m) = ou_run(1.5, 1.0);
        let series = entropy::entropy_series(&run, &m).unwrap();
        let log_z = m.mass_on_grid(run.snapshot(0).spec()).unwrap().ln();
        let report = exponential_decay_check(&series, 0.1, 1.0, log_z).unwrap();
        assert!(report.pass, "{}", report.summary_line());
        let slope = report.details["fitted_log_slope"];
        assert!((-2.4..=-1.6).contains(&slope), "late-time slope {slope}");
        // The positive range ends before T, so the truncation path fires.
        assert!(!report.warnings.is_empty(), "expected a truncation warning");
    }

    #[test]
    fn exponential_decay_is_vacuous_from_the_stationary_start() {
        let pot = Potential::quadratic(1, 1.0).unwrap();
        let m = ReferenceMeasure::new(pot.clone());
        let spec = GridSpec::new(&[(-6.0f64, 6.0, 256)]).unwrap();
        let mut p0 = m.q_grid(&spec).unwrap();
        p0.normalize().unwrap();
        let dt = stable_dt(&spec, &pot, None) * 0.9;
        let run = solve_fpe(&p0, &pot, None, dt, 40, 10).unwrap();
        let series = entropy::entropy_series(&run, &m).unwrap();
        let log_z = m.mass_on_grid(&spec).unwrap().ln();
        let report = exponential_decay_check(&series, 0.0, 1.0, log_z).unwrap();
        assert!(report.pass, "{}", report.summary_line());
        assert!(
            report.warnings.iter().any(|w| w.contains("vacuous")),
            "expected the vacuous-range warning, got {:?}",
            report.warnings
        );
    }
}
