//! Deterministic Fokker–Planck solver in divergence form.
//!
//! The density of the diffusion `dX = −∇ψ_eff(X) dt + dW` solves
//! `∂p/∂t = ∇·((∇ψ_eff) p) + ½Δp`, where ψ_eff = ψ before the perturbation
//! activates and ψ + B afterwards (β = ∇B is of gradient type, so the
//! perturbed drift is again a potential gradient).
//!
//! Space is discretized with an exponential-fitting two-point flux on cell
//! faces: for neighbouring cells l, r along an axis with spacing h,
//!
//! ```text
//! J = (D/h) · [ Bf(−τ) p_l − Bf(τ) p_r ],   D = ½,
//! τ = −2(ψ_eff(x_r) − ψ_eff(x_l)),          Bf(w) = w/(eʷ − 1),
//! ```
//!
//! which is the classical drift-stabilized finite-volume flux with
//! potential-difference weights. Its key structural property: the discrete
//! stationary state is exactly the cell-center sampling of e^{−2ψ_eff} —
//! for densities proportional to it, every face flux vanishes identically,
//! so stationarity is preserved to machine precision for *any* potential.
//! Zero-flux boundaries conserve mass exactly (up to roundoff).
//!
//! Time stepping is explicit Euler. The activation indicator `t > t₀` is
//! evaluated at the **left endpoint** of each step, strictly: the step
//! starting exactly at t₀ still uses the unperturbed drift.

use crate::error::{Error, Result};
use crate::grid::{GridDensity, GridSpec};
use crate::model::{Perturbation, Potential};
use crate::real::Real;

/// Drift-stabilizing face function Bf(w) = w/(eʷ − 1), continuously
/// extended by Bf(0) = 1. Computed via `exp_m1`, which is accurate for
/// small |w| and saturates correctly for large |w|.
pub fn bernoulli_face<R: Real>(w: R) -> R {
    if w == R::zero() {
        return R::one();
    }
    let d = w.exp_m1();
    if d.is_infinite() {
        // e^w overflowed: Bf(w) = w·e^{−w} underflows to zero.
        return R::zero();
    }
    w / d
}

/// Result of a Fokker–Planck run: snapshots every `stride` steps (including
/// the initial and final states), all on the same grid.
#[derive(Debug, Clone)]
pub struct FpeRun<R: Real> {
    snapshots: Vec<GridDensity<R>>,
    dt: R,
    stride: usize,
}

impl<R: Real> FpeRun<R> {
    pub fn snapshots(&self) -> &[GridDensity<R>] {
        &self.snapshots
    }

    pub fn snapshot(&self, k: usize) -> &GridDensity<R> {
        &self.snapshots[k]
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn last(&self) -> &GridDensity<R> {
        self.snapshots.last().expect("runs hold at least the initial snapshot")
    }

    /// Solver time step.
    pub fn dt(&self) -> R {
        self.dt
    }

    /// Steps between consecutive snapshots.
    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Time spacing between consecutive snapshots.
    pub fn snapshot_dt(&self) -> R {
        self.dt * R::of(self.stride as f64)
    }

    pub fn times(&self) -> Vec<R> {
        self.snapshots.iter().map(|s| s.time()).collect()
    }

    /// Snapshot whose time is closest to `t` (times are exact multiples of
    /// the snapshot spacing, so this is an index computation, not a search).
    pub fn index_at_time(&self, t: R) -> Result<usize> {
        let t0 = self.snapshots[0].time();
        let sdt = self.snapshot_dt();
        let kf = ((t - t0) / sdt).round();
        let k = kf.to_f64_lossy() as isize;
        if k < 0 || k as usize >= self.snapshots.len() {
            return Err(Error::InvalidParameter(format!(
                "time {t} lies outside the recorded range"
            )));
        }
        let k = k as usize;
        let actual = self.snapshots[k].time();
        if (actual - t).abs() > sdt * R::of(1e-6) {
            return Err(Error::InvalidParameter(format!(
                "time {t} does not align with the snapshot spacing (nearest is {actual})"
            )));
        }
        Ok(k)
    }
}

/// Precomputed face coefficients (Bf(−τ), Bf(τ)) for one drift phase.
struct FaceTables<R> {
    /// Per axis, per flat cell index that owns a right-neighbour face:
    /// `bm[axis][flat]` = Bf(−τ), `bp[axis][flat]` = Bf(τ).
    bm: Vec<Vec<R>>,
    bp: Vec<Vec<R>>,
}

fn build_face_tables<R: Real>(
    spec: &GridSpec<R>,
    psi_eff: &dyn Fn(&[R]) -> R,
) -> FaceTables<R> {
    let d = spec.dim();
    let n = spec.n_cells();
    let mut psi = Vec::with_capacity(n);
    let mut x = [R::zero(); 2];
    for flat in 0..n {
        spec.center(flat, &mut x[..d]);
        psi.push(psi_eff(&x[..d]));
    }
    let mut bm = vec![vec![R::zero(); n]; d];
    let mut bp = vec![vec![R::zero(); n]; d];
    let mut idx = [0usize; 2];
    for axis in 0..d {
        let stride = spec.stride(axis);
        let cells = spec.cells(axis);
        for flat in 0..n {
            spec.unflatten(flat, &mut idx[..d]);
            if idx[axis] + 1 >= cells {
                continue;
            }
            let tau = -(R::of(2.0)) * (psi[flat + stride] - psi[flat]);
            bm[axis][flat] = bernoulli_face(-tau);
            bp[axis][flat] = bernoulli_face(tau);
        }
    }
    FaceTables { bm, bp }
}

/// Largest admissible explicit time step for this grid and drift:
/// `min(h²_min/(2d), h_min / max‖∇ψ_eff‖)`, the diffusive and advective
/// stability bounds, with the maximum taken over cell centers and over both
/// drift phases.
pub fn stable_dt<R: Real>(
    spec: &GridSpec<R>,
    pot: &Potential<R>,
    pert: Option<&Perturbation<R>>,
) -> R {
    let d = spec.dim();
    let h = spec.min_dx();
    let mut x = [R::zero(); 2];
    let mut g = [R::zero(); 2];
    let mut gmax = R::zero();
    for flat in 0..spec.n_cells() {
        spec.center(flat, &mut x[..d]);
        pot.grad(&x[..d], &mut g[..d]);
        let base: R = g[..d].iter().map(|&v| v * v).sum::<R>().sqrt();
        gmax = gmax.max(base);
        if let Some(p) = pert {
            p.add_beta(&x[..d], &mut g[..d]);
            let pert_norm: R = g[..d].iter().map(|&v| v * v).sum::<R>().sqrt();
            gmax = gmax.max(pert_norm);
        }
    }
    let diffusive = h * h / R::of(2.0 * d as f64);
    if gmax > R::zero() {
        diffusive.min(h / gmax)
    } else {
        diffusive
    }
}

/// Evolve `p0` for `steps` explicit Euler steps of size `dt`, recording a
/// snapshot every `stride` steps. `steps` must be a multiple of `stride`.
///
/// Preconditions (checked): matching dimensions; `dt ≤ h²/(2d)` and
/// `dt·max‖∇ψ_eff‖ ≤ h` (explicit stability); nonnegative finite initial
/// values. During the run the solver monitors positivity, finiteness, and
/// mass conservation, and fails rather than returning a corrupted density.
pub fn solve_fpe<R: Real>(
    p0: &GridDensity<R>,
    pot: &Potential<R>,
    pert: Option<&Perturbation<R>>,
    dt: R,
    steps: usize,
    stride: usize,
) -> Result<FpeRun<R>> {
    let spec = p0.spec().clone();
    let d = spec.dim();
    if pot.dim() != d {
        return Err(Error::ShapeMismatch(format!(
            "potential dimension {} does not match grid dimension {d}",
            pot.dim()
        )));
    }
    if let Some(p) = pert {
        if p.dim() != d {
            return Err(Error::ShapeMismatch(format!(
                "perturbation dimension {} does not match grid dimension {d}",
                p.dim()
            )));
        }
    }
    if steps == 0 || stride == 0 || steps % stride != 0 {
        return Err(Error::InvalidParameter(format!(
            "steps ({steps}) must be a positive multiple of the snapshot stride ({stride})"
        )));
    }
    if !(dt > R::zero()) {
        return Err(Error::InvalidParameter(format!("time step must be positive, got {dt}")));
    }
    let h = spec.min_dx();
    let diffusive_limit = h * h / R::of(2.0 * d as f64);
    if dt > diffusive_limit * R::of(1.0 + 1e-12) {
        return Err(Error::CflViolation {
            bound: "dt ≤ h²/(2d)",
            limit: diffusive_limit.to_f64_lossy(),
            dt: dt.to_f64_lossy(),
        });
    }
    let advective_limit = stable_dt(&spec, pot, pert);
    if dt > advective_limit * R::of(1.0 + 1e-12) {
        return Err(Error::CflViolation {
            bound: "dt·max‖∇ψ+β‖ ≤ h",
            limit: advective_limit.to_f64_lossy(),
            dt: dt.to_f64_lossy(),
        });
    }
    let min0 = p0.min_value();
    if min0 < R::zero() {
        return Err(Error::PositivityLost {
            cell: 0,
            step: 0,
            value: min0.to_f64_lossy(),
        });
    }

    let t_start = p0.time();
    let mass0 = p0.mass();
    if !(mass0 > R::zero()) {
        return Err(Error::InvalidParameter(format!(
            "initial density must carry positive mass, got {mass0}"
        )));
    }

    let plain = build_face_tables(&spec, &|x| pot.psi(x));
    // The perturbed-phase tables are built lazily on first activation.
    let mut perturbed: Option<FaceTables<R>> = None;

    let n = spec.n_cells();
    let mut p = p0.values().to_vec();
    let mut next = vec![R::zero(); n];
    let mut snapshots = Vec::with_capacity(steps / stride + 1);
    snapshots.push(p0.clone());

    let inv_h: Vec<R> = (0..d).map(|a| R::one() / spec.dx(a)).collect();
    let half = R::of(0.5);
    let neg_floor = R::of(-1e-12);

    let mut idx = [0usize; 2];
    for k in 0..steps {
        // Left-endpoint activation rule, strict inequality.
        let t_left = t_start + dt * R::of(k as f64);
        let active = pert.is_some_and(|q| q.active(t_left));
        let tables: &FaceTables<R> = if active {
            let q = pert.expect("active phase implies a perturbation");
            perturbed.get_or_insert_with(|| {
                build_face_tables(&spec, &|x| pot.psi(x) + q.bump(x))
            })
        } else {
            &plain
        };

        next.copy_from_slice(&p);
        for axis in 0..d {
            let stride_a = spec.stride(axis);
            let cells_a = spec.cells(axis);
            let scale = dt * inv_h[axis] * half * inv_h[axis];
            let bm = &tables.bm[axis];
            let bp = &tables.bp[axis];
            for flat in 0..n {
                spec.unflatten(flat, &mut idx[..d]);
                if idx[axis] + 1 >= cells_a {
                    continue;
                }
                // scale·(Bf(−τ)p_l − Bf(τ)p_r) = (Δt/h)·J with D = ½.
                let flux = scale * (bm[flat] * p[flat] - bp[flat] * p[flat + stride_a]);
                next[flat] -= flux;
                next[flat + stride_a] += flux;
            }
        }

        for (cell, v) in next.iter_mut().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFiniteDensity { cell, value: v.to_f64_lossy() });
            }
            if *v < R::zero() {
                if *v < neg_floor * mass0 {
                    return Err(Error::PositivityLost {
                        cell,
                        step: k + 1,
                        value: v.to_f64_lossy(),
                    });
                }
                // Roundoff-scale undershoot: clamp. The mass monitor below
                // bounds the cumulative effect.
                *v = R::zero();
            }
        }
        std::mem::swap(&mut p, &mut next);

        if (k + 1) % stride == 0 {
            let t_snap = t_start + dt * R::of((k + 1) as f64);
            let snap = GridDensity::from_values(spec.clone(), p.clone(), t_snap)?;
            let drift = ((snap.mass() - mass0) / mass0).abs();
            let tol = R::of(1e-8).max(R::of(1e-12 * (k + 1) as f64));
            if drift > tol {
                return Err(Error::MassNotConserved {
                    step: k + 1,
                    drift: drift.to_f64_lossy(),
                });
            }
            snapshots.push(snap);
        }
    }

    Ok(FpeRun { snapshots, dt, stride })
}

/// Max-norm residual of the stationary equation `∇·((∇ψ)q + ½∇q) = 0` for
/// the *continuum* density q = e^{−2ψ} sampled at cell centers, using a
/// plain central-difference flux (arithmetic face means, analytic ∇ψ at
/// face midpoints).
///
/// This is a discretization-quality diagnostic, deliberately *not* the
/// solver's exponential-fitting stencil (which annihilates q by
/// construction): it measures how well the grid resolves the stationary
/// balance and converges at second order in h.
pub fn stationary_residual<R: Real>(pot: &Potential<R>, spec: &GridSpec<R>) -> Result<R> {
    if pot.dim() != spec.dim() {
        return Err(Error::ShapeMismatch(format!(
            "potential dimension {} does not match grid dimension {}",
            pot.dim(),
            spec.dim()
        )));
    }
    let d = spec.dim();
    let n = spec.n_cells();
    let mut q = Vec::with_capacity(n);
    let mut x = [R::zero(); 2];
    for flat in 0..n {
        spec.center(flat, &mut x[..d]);
        q.push((-(R::of(2.0)) * pot.psi(&x[..d])).exp());
    }
    let half = R::of(0.5);
    let mut resid = vec![R::zero(); n];
    let mut idx = [0usize; 2];
    let mut g = [R::zero(); 2];
    for axis in 0..d {
        let stride = spec.stride(axis);
        let cells = spec.cells(axis);
        let h = spec.dx(axis);
        let inv_h = R::one() / h;
        for flat in 0..n {
            spec.unflatten(flat, &mut idx[..d]);
            if idx[axis] + 1 >= cells {
                continue;
            }
            // Face midpoint between the two centers.
            spec.center(flat, &mut x[..d]);
            let xl = x[axis];
            spec.center(flat + stride, &mut x[..d]);
            let xr = x[axis];
            x[axis] = (xl + xr) * half;
            pot.grad(&x[..d], &mut g[..d]);
            let face = g[axis] * (q[flat] + q[flat + stride]) * half
                + half * (q[flat + stride] - q[flat]) * inv_h;
            resid[flat] += face * inv_h;
            resid[flat + stride] -= face * inv_h;
        }
    }
    Ok(resid.iter().map(|v| v.abs()).fold(R::zero(), R::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ReferenceMeasure;
    use approx::assert_relative_eq;

    fn quadratic_setup(cells: usize) -> (Potential<f64>, GridSpec<f64>) {
        let pot = Potential::quadratic(1, 1.0).unwrap();
        let spec = GridSpec::new(&[(-6.0, 6.0, cells)]).unwrap();
        (pot, spec)
    }

    #[test]
    fn face_function_limits_and_symmetry() {
        assert_eq!(bernoulli_face(0.0f64), 1.0);
        // Bf(−w) = eʷ·Bf(w).
        for &w in &[1e-8f64, 1e-3, 0.5, 5.0, 40.0] {
            assert_relative_eq!(
                bernoulli_face(-w),
                w.exp() * bernoulli_face(w),
                max_relative = 1e-13
            );
        }
        // Saturation: Bf(w) → 0 for large w, Bf(w) → −w for very negative w.
        assert_eq!(bernoulli_face(800.0f64), 0.0);
        assert_relative_eq!(bernoulli_face(-800.0f64), 800.0);
    }

    #[test]
    fn cfl_violations_are_rejected() {
        let (pot, spec) = quadratic_setup(512);
        let p0 = ReferenceMeasure::new(pot.clone()).q_grid(&spec).unwrap();
        let h = spec.dx(0);
        // Diffusive bound h²/2.
        let err = solve_fpe(&p0, &pot, None, h * h, 10, 10).unwrap_err();
        assert!(matches!(err, Error::CflViolation { .. }), "{err}");
        // Advective bound: max ‖∇ψ‖ = 6 on this grid; choose a grid where
        // the advective limit h/6 binds and violate it.
        let coarse = GridSpec::new(&[(-6.0, 6.0, 16)]).unwrap();
        let p0c = ReferenceMeasure::new(pot.clone()).q_grid(&coarse).unwrap();
        let hc = coarse.dx(0);
        let dt_bad = hc / 6.0 * 1.5; // > advective limit, < h²/2 = 0.28
        assert!(dt_bad < hc * hc / 2.0);
        let err = solve_fpe(&p0c, &pot, None, dt_bad, 10, 10).unwrap_err();
        assert!(matches!(err, Error::CflViolation { .. }), "{err}");
    }

    #[test]
    fn stationary_density_is_a_fixed_point_to_machine_precision() {
        let (pot, spec) = quadratic_setup(512);
        let mut p0 = ReferenceMeasure::new(pot.clone()).q_grid(&spec).unwrap();
        p0.normalize().unwrap();
        let dt = 2.0e-4;
        let steps = 1000; // T = 0.2
        let run = solve_fpe(&p0, &pot, None, dt, steps, steps).unwrap();
        let drift = run.last().linf_diff(&p0).unwrap();
        assert!(drift < 1e-13, "stationary drift {drift}");
    }

    #[test]
    fn stationarity_is_exact_for_the_double_well_too() {
        // The exponential-fitting flux kills e^{−2ψ} for any ψ, not just
        // quadratic ones.
        let pot = Potential::double_well(1.0, 0.0, 70.0).unwrap();
        let spec = GridSpec::new(&[(-3.0, 3.0, 256)]).unwrap();
        let mut p0 = ReferenceMeasure::new(pot.clone()).q_grid(&spec).unwrap();
        p0.normalize().unwrap();
        let dt = stable_dt(&spec, &pot, None) * 0.9;
        let run = solve_fpe(&p0, &pot, None, dt, 500, 500).unwrap();
        let drift = run.last().linf_diff(&p0).unwrap();
        assert!(drift < 1e-13, "stationary drift {drift}");
    }

    #[test]
    fn transient_conserves_mass_and_positivity() {
        let (pot, spec) = quadratic_setup(256);
        let p0 = GridDensity::from_fn(spec, 0.0, true, |x| {
            (-(x[0] - 1.0) * (x[0] - 1.0)).exp()
        })
        .unwrap();
        let run = solve_fpe(&p0, &pot, None, 2.0e-4, 1000, 100).unwrap();
        for snap in run.snapshots() {
            assert!(snap.min_value() >= 0.0);
            assert_relative_eq!(snap.mass(), p0.mass(), epsilon = 1e-10);
        }
    }

    #[test]
    fn gaussian_transient_matches_the_exact_evolution() {
        // For ψ = x²/2 and Gaussian initial data N(m₀, v₀), the density
        // stays Gaussian with m(t) = m₀e^{−t}, v(t) = v₀e^{−2t} + (1−e^{−2t})/2.
        let (pot, spec) = quadratic_setup(512);
        let (m0, v0) = (1.0, 0.25);
        let p0 = GridDensity::from_fn(spec.clone(), 0.0, false, |x| {
            (-(x[0] - m0) * (x[0] - m0) / (2.0 * v0)).exp()
                / (2.0 * std::f64::consts::PI * v0).sqrt()
        })
        .unwrap();
        let dt = 2.0e-4;
        let steps = 1250; // T = 0.25
        let run = solve_fpe(&p0, &pot, None, dt, steps, steps).unwrap();
        let t = 0.25f64;
        let m = m0 * (-t).exp();
        let v = v0 * (-2.0 * t).exp() + (1.0 - (-2.0 * t).exp()) / 2.0;
        let exact = GridDensity::from_fn(spec, t, false, |x| {
            (-(x[0] - m) * (x[0] - m) / (2.0 * v)).exp()
                / (2.0 * std::f64::consts::PI * v).sqrt()
        })
        .unwrap();
        let err = run.last().linf_diff(&exact).unwrap();
        assert!(err < 5e-4, "transient error {err}");
    }

    #[test]
    fn two_dimensional_stationarity_and_mass() {
        let pot = Potential::quadratic(2, 1.0).unwrap();
        let spec = GridSpec::new(&[(-5.0, 5.0, 64), (-5.0, 5.0, 64)]).unwrap();
        let mut p0 = ReferenceMeasure::new(pot.clone()).q_grid(&spec).unwrap();
        p0.normalize().unwrap();
        let dt = stable_dt(&spec, &pot, None) * 0.9;
        let run = solve_fpe(&p0, &pot, None, dt, 200, 200).unwrap();
        assert!(run.last().linf_diff(&p0).unwrap() < 1e-13);
        assert_relative_eq!(run.last().mass(), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn activation_uses_the_strict_left_endpoint_rule() {
        let (pot, spec) = quadratic_setup(128);
        let pert = Perturbation::new(0.5, 1.0, vec![0.0], 2.0 * 1e-4).unwrap();
        let p0 = GridDensity::from_fn(spec, 0.0, true, |x| {
            (-(x[0] - 1.0) * (x[0] - 1.0)).exp()
        })
        .unwrap();
        let dt = 1e-4;
        // t₀ = 2dt. Steps start at t = 0, dt, 2dt, 3dt, …: the indicator
        // t > t₀ is strict, so steps 0, 1, 2 are unperturbed and step 3 is
        // the first perturbed one.
        let plain = solve_fpe(&p0, &pot, None, dt, 4, 1).unwrap();
        let pert_run = solve_fpe(&p0, &pot, Some(&pert), dt, 4, 1).unwrap();
        for k in 0..=3 {
            assert_eq!(
                plain.snapshot(k).linf_diff(pert_run.snapshot(k)).unwrap(),
                0.0,
                "snapshot {k} should be bitwise unperturbed"
            );
        }
        assert!(plain.snapshot(4).linf_diff(pert_run.snapshot(4)).unwrap() > 0.0);
    }

    #[test]
    fn stationary_residual_converges_at_second_order() {
        let pot = Potential::quadratic(1, 1.0).unwrap();
        let coarse = stationary_residual(&pot, &GridSpec::new(&[(-6.0, 6.0, 256)]).unwrap()).unwrap();
        let fine = stationary_residual(&pot, &GridSpec::new(&[(-6.0, 6.0, 512)]).unwrap()).unwrap();
        let ratio = coarse / fine;
        assert!(
            (3.5..4.5).contains(&ratio),
            "expected ≈4x residual reduction per refinement, got {ratio} (coarse {coarse}, fine {fine})"
        );
    }

    #[test]
    fn snapshot_time_lookup_is_exact() {
        let (pot, spec) = quadratic_setup(128);
        let p0 = ReferenceMeasure::new(pot.clone()).q_grid(&spec).unwrap();
        let run = solve_fpe(&p0, &pot, None, 1e-4, 100, 10).unwrap();
        assert_eq!(run.index_at_time(0.0).unwrap(), 0);
        assert_eq!(run.index_at_time(5e-3).unwrap(), 5);
        assert_eq!(run.index_at_time(1e-2).unwrap(), 10);
        assert!(run.index_at_time(2e-2).is_err());
    }
}
