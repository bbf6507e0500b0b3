//! Tensor-product grids on rectangular boxes and densities sampled at cell
//! centers.
//!
//! All grid quantities live at cell centers; integrals are midpoint sums,
//! which converge at second order for smooth integrands and exponentially
//! fast in the domain size for rapidly decaying ones. Gradient fields are
//! built with central differences in the interior and one-sided differences
//! in boundary cells. Point evaluation between centers is multilinear, with
//! constant extension across the outermost half-cell; querying outside the
//! box is an error rather than a silent extrapolation.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::stats::compensated_sum;

/// Smallest density value whose logarithm is taken; cells below this floor
/// enter log-space quantities as `ln(floor)`. The floor only guards logs —
/// sums and fluxes always use the raw values.
pub const LOG_FLOOR: f64 = 1e-300;

/// A rectangular box `[lo, hi]` per axis, divided into equal cells.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec<R: Real> {
    los: Vec<R>,
    his: Vec<R>,
    cells: Vec<usize>,
}

impl<R: Real> GridSpec<R> {
    /// `axes` lists `(lo, hi, cells)` per dimension; one or two dimensions,
    /// at least 16 cells per axis.
    pub fn new(axes: &[(R, R, usize)]) -> Result<Self> {
        if axes.is_empty() || axes.len() > 2 {
            return Err(Error::InvalidParameter(format!(
                "grids support 1 or 2 dimensions, got {}",
                axes.len()
            )));
        }
        for &(lo, hi, cells) in axes {
            if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "grid axis needs finite lo < hi, got [{lo}, {hi}]"
                )));
            }
            if cells < 16 {
                return Err(Error::InvalidParameter(format!(
                    "grid axis needs at least 16 cells, got {cells}"
                )));
            }
        }
        Ok(Self {
            los: axes.iter().map(|a| a.0).collect(),
            his: axes.iter().map(|a| a.1).collect(),
            cells: axes.iter().map(|a| a.2).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.los.len()
    }

    pub fn cells(&self, axis: usize) -> usize {
        self.cells[axis]
    }

    pub fn lo(&self, axis: usize) -> R {
        self.los[axis]
    }

    pub fn hi(&self, axis: usize) -> R {
        self.his[axis]
    }

    /// Total number of cells.
    pub fn n_cells(&self) -> usize {
        self.cells.iter().product()
    }

    /// Cell width along `axis`.
    pub fn dx(&self, axis: usize) -> R {
        (self.his[axis] - self.los[axis]) / R::of(self.cells[axis] as f64)
    }

    /// Volume of one cell.
    pub fn cell_volume(&self) -> R {
        (0..self.dim()).map(|a| self.dx(a)).fold(R::one(), |acc, h| acc * h)
    }

    /// Smallest cell width over all axes.
    pub fn min_dx(&self) -> R {
        (0..self.dim()).map(|a| self.dx(a)).fold(R::infinity(), R::min)
    }

    /// Flat index stride of `axis` (row-major, first axis outermost).
    pub fn stride(&self, axis: usize) -> usize {
        self.cells[axis + 1..].iter().product()
    }

    /// Center coordinate of cell `i` along `axis`.
    pub fn axis_center(&self, axis: usize, i: usize) -> R {
        self.los[axis] + (R::of(i as f64) + R::of(0.5)) * self.dx(axis)
    }

    /// Edge coordinate `i ∈ 0..=cells` along `axis`.
    pub fn axis_edge(&self, axis: usize, i: usize) -> R {
        self.los[axis] + R::of(i as f64) * self.dx(axis)
    }

    /// All center coordinates along `axis`.
    pub fn axis_centers(&self, axis: usize) -> Vec<R> {
        (0..self.cells[axis]).map(|i| self.axis_center(axis, i)).collect()
    }

    /// Decompose a flat cell index into per-axis indices.
    pub fn unflatten(&self, flat: usize, out: &mut [usize]) {
        debug_assert_eq!(out.len(), self.dim());
        let mut rem = flat;
        for a in 0..self.dim() {
            let s = self.stride(a);
            out[a] = rem / s;
            rem %= s;
        }
    }

    /// Center coordinates of the cell with flat index `flat`.
    pub fn center(&self, flat: usize, out: &mut [R]) {
        debug_assert_eq!(out.len(), self.dim());
        let mut rem = flat;
        for a in 0..self.dim() {
            let s = self.stride(a);
            out[a] = self.axis_center(a, rem / s);
            rem %= s;
        }
    }

    /// Per-axis base cell and interpolation weight for a query point.
    /// Errors if the point lies outside the box.
    fn locate(&self, x: &[R]) -> Result<([usize; 2], [R; 2])> {
        if x.len() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "query point has dimension {}, grid has {}",
                x.len(),
                self.dim()
            )));
        }
        let mut base = [0usize; 2];
        let mut frac = [R::zero(); 2];
        for a in 0..self.dim() {
            let (lo, hi) = (self.los[a], self.his[a]);
            if !(x[a] >= lo && x[a] <= hi) {
                return Err(Error::OffGrid {
                    axis: a,
                    coordinate: x[a].to_f64_lossy(),
                    lo: lo.to_f64_lossy(),
                    hi: hi.to_f64_lossy(),
                });
            }
            let n = self.cells[a];
            // Coordinate in units of cell centers: u = 0 at the first center.
            let u = (x[a] - lo) / self.dx(a) - R::of(0.5);
            let i0f = u.floor();
            let mut i0 = if i0f < R::zero() { 0 } else { i0f.to_f64_lossy() as usize };
            if i0 > n - 2 {
                i0 = n - 2;
            }
            let t = (u - R::of(i0 as f64)).max(R::zero()).min(R::one());
            base[a] = i0;
            frac[a] = t;
        }
        Ok((base, frac))
    }
}

/// A density (or any scalar field) sampled at the cell centers of a grid.
#[derive(Debug, Clone)]
pub struct GridDensity<R: Real> {
    spec: GridSpec<R>,
    values: Vec<R>,
    time: R,
}

impl<R: Real> GridDensity<R> {
    /// Sample `f` at all cell centers; optionally rescale to unit mass.
    pub fn from_fn(
        spec: GridSpec<R>,
        time: R,
        normalize: bool,
        mut f: impl FnMut(&[R]) -> R,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(spec.n_cells());
        let mut x = [R::zero(); 2];
        let d = spec.dim();
        for flat in 0..spec.n_cells() {
            spec.center(flat, &mut x[..d]);
            let v = f(&x[..d]);
            if !v.is_finite() {
                return Err(Error::NonFiniteDensity { cell: flat, value: v.to_f64_lossy() });
            }
            values.push(v);
        }
        let mut out = Self { spec, values, time };
        if normalize {
            out.normalize()?;
        }
        Ok(out)
    }

    /// Wrap existing cell values (e.g. read back from a container file).
    pub fn from_values(spec: GridSpec<R>, values: Vec<R>, time: R) -> Result<Self> {
        if values.len() != spec.n_cells() {
            return Err(Error::ShapeMismatch(format!(
                "grid has {} cells but {} values were provided",
                spec.n_cells(),
                values.len()
            )));
        }
        if let Some((cell, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFiniteDensity { cell, value: value.to_f64_lossy() });
        }
        Ok(Self { spec, values, time })
    }

    pub fn spec(&self) -> &GridSpec<R> {
        &self.spec
    }

    pub fn values(&self) -> &[R] {
        &self.values
    }

    pub fn time(&self) -> R {
        self.time
    }

    pub(crate) fn set_time(&mut self, t: R) {
        self.time = t;
    }

    /// Midpoint-rule total mass.
    pub fn mass(&self) -> R {
        compensated_sum(self.values.iter().copied()) * self.spec.cell_volume()
    }

    /// Smallest cell value.
    pub fn min_value(&self) -> R {
        self.values.iter().copied().fold(R::infinity(), R::min)
    }

    /// Rescale to unit mass. Errors on non-positive total mass.
    pub fn normalize(&mut self) -> Result<()> {
        let m = self.mass();
        if !(m > R::zero()) || !m.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "cannot normalize density with mass {m}"
            )));
        }
        let inv = R::one() / m;
        for v in &mut self.values {
            *v *= inv;
        }
        Ok(())
    }

    /// Multilinear interpolation at `x` (constant across boundary half-cells).
    pub fn interpolate(&self, x: &[R]) -> Result<R> {
        let (base, frac) = self.spec.locate(x)?;
        Ok(match self.spec.dim() {
            1 => {
                let (i, t) = (base[0], frac[0]);
                self.values[i] * (R::one() - t) + self.values[i + 1] * t
            }
            _ => {
                let ny = self.spec.stride(0);
                let (ix, iy) = (base[0], base[1]);
                let (tx, ty) = (frac[0], frac[1]);
                let v00 = self.values[ix * ny + iy];
                let v01 = self.values[ix * ny + iy + 1];
                let v10 = self.values[(ix + 1) * ny + iy];
                let v11 = self.values[(ix + 1) * ny + iy + 1];
                let one = R::one();
                v00 * (one - tx) * (one - ty)
                    + v01 * (one - tx) * ty
                    + v10 * tx * (one - ty)
                    + v11 * tx * ty
            }
        })
    }

    /// Largest absolute cell-wise difference to another density.
    pub fn linf_diff(&self, other: &Self) -> Result<R> {
        if self.spec != other.spec {
            return Err(Error::ShapeMismatch(
                "grid mismatch in density comparison".into(),
            ));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| (a - b).abs())
            .fold(R::zero(), R::max))
    }

    /// Cell values as natural logs, floored at `LOG_FLOOR`.
    pub fn log_values(&self) -> Vec<R> {
        let floor = R::of(LOG_FLOOR);
        self.values.iter().map(|&v| v.max(floor).ln()).collect()
    }
}

/// A multi-channel field sampled at cell centers with multilinear point
/// evaluation — used for interpolated log-densities and score fields.
#[derive(Debug, Clone)]
pub struct InterpField<R: Real> {
    spec: GridSpec<R>,
    channels: usize,
    /// Cell-major data: `data[flat * channels + c]`.
    data: Vec<R>,
}

impl<R: Real> InterpField<R> {
    pub fn new(spec: GridSpec<R>, channels: usize, data: Vec<R>) -> Result<Self> {
        if channels == 0 || data.len() != spec.n_cells() * channels {
            return Err(Error::ShapeMismatch(format!(
                "field needs {} × {channels} values, got {}",
                spec.n_cells(),
                data.len()
            )));
        }
        Ok(Self { spec, channels, data })
    }

    pub fn spec(&self) -> &GridSpec<R> {
        &self.spec
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Evaluate all channels at `x` into `out`.
    pub fn eval(&self, x: &[R], out: &mut [R]) -> Result<()> {
        debug_assert_eq!(out.len(), self.channels);
        let (base, frac) = self.spec.locate(x)?;
        let ch = self.channels;
        match self.spec.dim() {
            1 => {
                let (i, t) = (base[0], frac[0]);
                for c in 0..ch {
                    out[c] = self.data[i * ch + c] * (R::one() - t)
                        + self.data[(i + 1) * ch + c] * t;
                }
            }
            _ => {
                let ny = self.spec.stride(0);
                let (ix, iy) = (base[0], base[1]);
                let (tx, ty) = (frac[0], frac[1]);
                let one = R::one();
                let w00 = (one - tx) * (one - ty);
                let w01 = (one - tx) * ty;
                let w10 = tx * (one - ty);
                let w11 = tx * ty;
                let b00 = (ix * ny + iy) * ch;
                let b01 = (ix * ny + iy + 1) * ch;
                let b10 = ((ix + 1) * ny + iy) * ch;
                let b11 = ((ix + 1) * ny + iy + 1) * ch;
                for c in 0..ch {
                    out[c] = self.data[b00 + c] * w00
                        + self.data[b01 + c] * w01
                        + self.data[b10 + c] * w10
                        + self.data[b11 + c] * w11;
                }
            }
        }
        Ok(())
    }

    /// Single-channel convenience evaluation.
    pub fn eval_scalar(&self, x: &[R]) -> Result<R> {
        debug_assert_eq!(self.channels, 1);
        let mut out = [R::zero()];
        self.eval(x, &mut out)?;
        Ok(out[0])
    }
}

/// Finite-difference gradient of a log-density: central differences in the
/// interior, one-sided at boundary cells. Channel `a` holds ∂ₐ log p.
pub fn score_field<R: Real>(p: &GridDensity<R>) -> InterpField<R> {
    let spec = p.spec().clone();
    let d = spec.dim();
    let logs = p.log_values();
    let n = spec.n_cells();
    let mut data = vec![R::zero(); n * d];
    for axis in 0..d {
        let stride = spec.stride(axis);
        let cells = spec.cells(axis);
        let h = spec.dx(axis);
        let two_h = h + h;
        let mut idx = [0usize; 2];
        for flat in 0..n {
            spec.unflatten(flat, &mut idx[..d]);
            let i = idx[axis];
            let g = if i == 0 {
                (logs[flat + stride] - logs[flat]) / h
            } else if i == cells - 1 {
                (logs[flat] - logs[flat - stride]) / h
            } else {
                (logs[flat + stride] - logs[flat - stride]) / two_h
            };
            data[flat * d + axis] = g;
        }
    }
    InterpField::new(spec, d, data).expect("score field dimensions are consistent")
}

/// Interpolatable log-density (single channel), floored at `LOG_FLOOR`.
pub fn log_field<R: Real>(p: &GridDensity<R>) -> InterpField<R> {
    InterpField::new(p.spec().clone(), 1, p.log_values())
        .expect("log field dimensions are consistent")
}
