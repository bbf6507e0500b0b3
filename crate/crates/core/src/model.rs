//! Potentials, compactly supported gradient perturbations, and the reference
//! measure they induce.
//!
//! The diffusion model is built from a smooth confining potential ψ ≥ 0 with
//! linearly growing gradient, an optional perturbation field β = ∇B where B
//! is a smooth bump supported in a ball and switched on strictly after an
//! activation time, and the unnormalized reference density q = e^{−2ψ}. The
//! total reference mass Z = ∫ q dx is finite for confining potentials and is
//! always reported explicitly, never divided out.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::{GridDensity, GridSpec};
use crate::real::Real;
use crate::report::CheckReport;

/// Number of points in the dense radial scans used for analytic-profile
/// suprema of the bump and its derivatives.
const PROFILE_SCAN_POINTS: usize = 200_001;
/// Safety inflation applied to scanned suprema so they remain true upper
/// bounds despite the finite scan resolution.
const PROFILE_SCAN_INFLATION: f64 = 1.0 + 1e-6;

#[derive(Clone)]
enum Kind<R: Real> {
    /// ψ(x) = κ‖x‖²/2.
    Quadratic { kappa: R },
    /// ψ(x) = (x² − a)²/4 + b, one-dimensional.
    DoubleWell { a: R, b: R },
    /// User-supplied ψ and ∇ψ; the Hessian is finite-differenced from ∇ψ.
    Custom(CustomPotential<R>),
}

/// Boxed closures for a user-defined potential.
#[derive(Clone)]
pub struct CustomPotential<R: Real> {
    psi: Arc<dyn Fn(&[R]) -> R + Send + Sync>,
    grad: Arc<dyn Fn(&[R], &mut [R]) + Send + Sync>,
}

/// A smooth nonnegative confining potential on ℝᵈ.
#[derive(Clone)]
pub struct Potential<R: Real> {
    kind: Kind<R>,
    dim: usize,
    /// Growth constant K in the bound ‖∇ψ(x)‖ ≤ K(1 + ‖x‖), checked on
    /// every point the library evaluates (as a debug assertion in the hot
    /// stepping loops, and by explicit scans in the validation checks).
    growth: R,
}

impl<R: Real> fmt::Debug for Potential<R> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            Kind::Quadratic { kappa } => write!(f, "Quadratic(kappa={kappa})"),
            Kind::DoubleWell { a, b } => write!(f, "DoubleWell(a={a}, b={b})"),
            Kind::Custom(_) => write!(f, "Custom(dim={})", self.dim),
        }
    }
}

impl<R: Real> Potential<R> {
    /// Isotropic quadratic well ψ(x) = κ‖x‖²/2 with κ > 0. Its gradient
    /// norm is exactly κ‖x‖, so the growth constant is κ.
    pub fn quadratic(dim: usize, kappa: R) -> Result<Self> {
        if dim == 0 || dim > 3 {
            return Err(Error::InvalidParameter(format!(
                "potential dimension must be 1..=3, got {dim}"
            )));
        }
        if !(kappa > R::zero()) {
            return Err(Error::InvalidParameter(format!(
                "quadratic potential needs kappa > 0, got {kappa}"
            )));
        }
        Ok(Self { kind: Kind::Quadratic { kappa }, dim, growth: kappa })
    }

    /// One-dimensional double well ψ(x) = (x² − a)²/4 + b with b ≥ 0 (so
    /// ψ ≥ 0). Its gradient x³ − ax grows cubically, so the caller supplies
    /// the growth constant valid on the domain actually evaluated.
    pub fn double_well(a: R, b: R, growth: R) -> Result<Self> {
        if b < R::zero() {
            return Err(Error::InvalidParameter(format!(
                "double well offset must satisfy b ≥ 0 to keep ψ ≥ 0, got {b}"
            )));
        }
        if !(growth > R::zero()) {
            return Err(Error::InvalidParameter(
                "growth constant must be positive".into(),
            ));
        }
        Ok(Self { kind: Kind::DoubleWell { a, b }, dim: 1, growth })
    }

    /// User-defined potential from closures for ψ and ∇ψ. The Hessian is
    /// approximated by central differences of ∇ψ with step 1e-5‖x‖ + 1e-7.
    pub fn custom(
        dim: usize,
        psi: impl Fn(&[R]) -> R + Send + Sync + 'static,
        grad: impl Fn(&[R], &mut [R]) + Send + Sync + 'static,
        growth: R,
    ) -> Result<Self> {
        if dim == 0 || dim > 3 {
            return Err(Error::InvalidParameter(format!(
                "potential dimension must be 1..=3, got {dim}"
            )));
        }
        if !(growth > R::zero()) {
            return Err(Error::InvalidParameter(
                "growth constant must be positive".into(),
            ));
        }
        Ok(Self {
            kind: Kind::Custom(CustomPotential { psi: Arc::new(psi), grad: Arc::new(grad) }),
            dim,
            growth,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn growth_constant(&self) -> R {
        self.growth
    }

    /// ψ(x).
    pub fn psi(&self, x: &[R]) -> R {
        debug_assert_eq!(x.len(), self.dim);
        let v = match &self.kind {
            Kind::Quadratic { kappa } => {
                let sq: R = x.iter().map(|&xi| xi * xi).sum();
                *kappa * sq * R::of(0.5)
            }
            Kind::DoubleWell { a, b } => {
                let s = x[0] * x[0] - *a;
                s * s * R::of(0.25) + *b
            }
            Kind::Custom(c) => (c.psi)(x),
        };
        debug_assert!(v >= R::zero(), "potential must be nonnegative, got {v} at {x:?}");
        v
    }

    /// ∇ψ(x) written into `out`.
    pub fn grad(&self, x: &[R], out: &mut [R]) {
        debug_assert_eq!(x.len(), self.dim);
        debug_assert_eq!(out.len(), self.dim);
        match &self.kind {
            Kind::Quadratic { kappa } => {
                for (o, &xi) in out.iter_mut().zip(x) {
                    *o = *kappa * xi;
                }
            }
            Kind::DoubleWell { a, .. } => {
                out[0] = x[0] * (x[0] * x[0] - *a);
            }
            Kind::Custom(c) => (c.grad)(x, out),
        }
        debug_assert!(
            self.gradient_growth_ok(x, out),
            "gradient growth bound violated at {x:?}"
        );
    }

    /// Whether ‖g‖ ≤ K(1 + ‖x‖) holds for `g = ∇ψ(x)`.
    pub fn gradient_growth_ok(&self, x: &[R], g: &[R]) -> bool {
        let gn: R = g.iter().map(|&v| v * v).sum::<R>().sqrt();
        let xn: R = x.iter().map(|&v| v * v).sum::<R>().sqrt();
        gn <= self.growth * (R::one() + xn) * R::of(1.0 + 1e-12)
    }

    /// Hessian of ψ at `x`, row-major `d × d`.
    pub fn hessian(&self, x: &[R], out: &mut [R]) {
        let d = self.dim;
        debug_assert_eq!(x.len(), d);
        debug_assert_eq!(out.len(), d * d);
        match &self.kind {
            Kind::Quadratic { kappa } => {
                out.fill(R::zero());
                for i in 0..d {
                    out[i * d + i] = *kappa;
                }
            }
            Kind::DoubleWell { a, .. } => {
                out[0] = R::of(3.0) * x[0] * x[0] - *a;
            }
            Kind::Custom(c) => {
                // Central differences of the analytic gradient, symmetrized.
                let xn: R = x.iter().map(|&v| v * v).sum::<R>().sqrt();
                let h = R::of(1e-5) * xn + R::of(1e-7);
                let mut xp = x.to_vec();
                let mut gp = vec![R::zero(); d];
                let mut gm = vec![R::zero(); d];
                for i in 0..d {
                    xp[i] = x[i] + h;
                    (c.grad)(&xp, &mut gp);
                    xp[i] = x[i] - h;
                    (c.grad)(&xp, &mut gm);
                    xp[i] = x[i];
                    for j in 0..d {
                        out[i * d + j] = (gp[j] - gm[j]) / (h + h);
                    }
                }
                for i in 0..d {
                    for j in (i + 1)..d {
                        let s = (out[i * d + j] + out[j * d + i]) * R::of(0.5);
                        out[i * d + j] = s;
                        out[j * d + i] = s;
                    }
                }
            }
        }
    }

    /// Smallest eigenvalue of the Hessian at `x` (closed forms, d ≤ 2; the
    /// quadratic well is κ in any dimension).
    pub fn hessian_min_eigenvalue(&self, x: &[R]) -> Result<R> {
        if let Kind::Quadratic { kappa } = &self.kind {
            return Ok(*kappa);
        }
        match self.dim {
            1 => {
                let mut h = [R::zero()];
                self.hessian(x, &mut h);
                Ok(h[0])
            }
            2 => {
                let mut h = [R::zero(); 4];
                self.hessian(x, &mut h);
                let half = R::of(0.5);
                let mean = (h[0] + h[3]) * half;
                let delta = (h[0] - h[3]) * half;
                let off = (h[1] + h[2]) * half;
                Ok(mean - (delta * delta + off * off).sqrt())
            }
            d => Err(Error::InvalidParameter(format!(
                "Hessian eigenvalue scan supports d ≤ 2 for this potential, got d = {d}"
            ))),
        }
    }
}

/// Verify the confinement inequality x·∇ψ(x) ≥ −C‖x‖² on all grid centers
/// with ‖x‖ ≥ R. Reports the smallest slack x·∇ψ + C‖x‖² found.
pub fn check_drift_condition<R: Real>(
    pot: &Potential<R>,
    c: R,
    radius: R,
    grid: &GridSpec<R>,
) -> Result<CheckReport> {
    if grid.dim() != pot.dim() {
        return Err(Error::ShapeMismatch(format!(
            "potential dimension {} does not match grid dimension {}",
            pot.dim(),
            grid.dim()
        )));
    }
    if !(c > R::zero()) || !(radius > R::zero()) {
        return Err(Error::InvalidParameter(
            "drift condition constants C and R must be positive".into(),
        ));
    }
    let d = grid.dim();
    let mut x = [R::zero(); 2];
    let mut g = [R::zero(); 2];
    let mut scanned = 0usize;
    let mut min_slack = R::infinity();
    let mut argmin = [R::zero(); 2];
    for flat in 0..grid.n_cells() {
        grid.center(flat, &mut x[..d]);
        let norm2: R = x[..d].iter().map(|&v| v * v).sum();
        if norm2.sqrt() < radius {
            continue;
        }
        scanned += 1;
        pot.grad(&x[..d], &mut g[..d]);
        let radial: R = x[..d].iter().zip(&g[..d]).map(|(&xi, &gi)| xi * gi).sum();
        let slack = radial + c * norm2;
        if slack < min_slack {
            min_slack = slack;
            argmin[..d].copy_from_slice(&x[..d]);
        }
    }
    if scanned == 0 {
        return Err(Error::InvalidParameter(format!(
            "no grid centers with ‖x‖ ≥ {radius}; enlarge the scan grid"
        )));
    }
    let mut report = CheckReport::lower_bound(
        "drift_condition",
        "confinement: x·∇ψ(x) ≥ −C‖x‖² outside the ball of radius R",
        min_slack.to_f64_lossy(),
        0.0,
        0.0,
    )
    .with_detail("points_scanned", scanned as f64)
    .with_detail("argmin_x0", argmin[0].to_f64_lossy());
    if d > 1 {
        report = report.with_detail("argmin_x1", argmin[1].to_f64_lossy());
    }
    Ok(report)
}

/// Smallest Hessian eigenvalue of ψ over all grid centers — the curvature
/// lower bound entering convexity-based decay estimates.
pub fn curvature_lower_bound<R: Real>(pot: &Potential<R>, grid: &GridSpec<R>) -> Result<R> {
    if grid.dim() != pot.dim() {
        return Err(Error::ShapeMismatch(format!(
            "potential dimension {} does not match grid dimension {}",
            pot.dim(),
            grid.dim()
        )));
    }
    let d = grid.dim();
    let mut x = [R::zero(); 2];
    let mut min = R::infinity();
    for flat in 0..grid.n_cells() {
        grid.center(flat, &mut x[..d]);
        min = min.min(pot.hessian_min_eigenvalue(&x[..d])?);
    }
    Ok(min)
}

/// A gradient-type perturbation β = ∇B, where B is the standard smooth bump
/// `c · exp(−1/(1 − ‖(x−x₀)/r‖²))` inside the ball of radius r around x₀ and
/// exactly zero outside. The field switches on strictly after time t₀.
#[derive(Debug, Clone)]
pub struct Perturbation<R: Real> {
    amplitude: R,
    support_radius: R,
    center: Vec<R>,
    activation_time: R,
}

impl<R: Real> Perturbation<R> {
    pub fn new(amplitude: R, support_radius: R, center: Vec<R>, activation_time: R) -> Result<Self> {
        if !(support_radius > R::zero()) {
            return Err(Error::InvalidParameter(format!(
                "bump support radius must be positive, got {support_radius}"
            )));
        }
        if activation_time < R::zero() {
            return Err(Error::InvalidParameter(format!(
                "activation time must be nonnegative, got {activation_time}"
            )));
        }
        if center.is_empty() || center.len() > 3 {
            return Err(Error::InvalidParameter(format!(
                "bump center must have dimension 1..=3, got {}",
                center.len()
            )));
        }
        if center.iter().any(|c| !c.is_finite()) || !amplitude.is_finite() {
            return Err(Error::InvalidParameter(
                "bump parameters must be finite".into(),
            ));
        }
        Ok(Self { amplitude, support_radius, center, activation_time })
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn amplitude(&self) -> R {
        self.amplitude
    }

    pub fn support_radius(&self) -> R {
        self.support_radius
    }

    pub fn center(&self) -> &[R] {
        &self.center
    }

    pub fn activation_time(&self) -> R {
        self.activation_time
    }

    /// Whether the field is switched on at time `t` (strictly after t₀).
    pub fn active(&self, t: R) -> bool {
        t > self.activation_time
    }

    /// Normalized squared radius s = ‖x − x₀‖²/r² and the bump profile
    /// φ = exp(−1/(1−s)) (0 when s ≥ 1 or the exponential underflows).
    fn profile(&self, x: &[R]) -> (R, R) {
        debug_assert_eq!(x.len(), self.center.len());
        let r2 = self.support_radius * self.support_radius;
        let s: R = x
            .iter()
            .zip(&self.center)
            .map(|(&xi, &ci)| (xi - ci) * (xi - ci))
            .sum::<R>()
            / r2;
        if s >= R::one() {
            return (s, R::zero());
        }
        (s, (-(R::one() / (R::one() - s))).exp())
    }

    /// B(x).
    pub fn bump(&self, x: &[R]) -> R {
        let (_, phi) = self.profile(x);
        self.amplitude * phi
    }

    /// Add β(x) = ∇B(x) into `out`.
    pub fn add_beta(&self, x: &[R], out: &mut [R]) {
        let (s, phi) = self.profile(x);
        if phi == R::zero() {
            return;
        }
        let one_ms = R::one() - s;
        let r2 = self.support_radius * self.support_radius;
        // ∇B = −2 c φ (x−x₀) / (r² (1−s)²).
        let coeff = -(R::of(2.0)) * self.amplitude * phi / (r2 * one_ms * one_ms);
        for ((o, &xi), &ci) in out.iter_mut().zip(x).zip(&self.center) {
            *o += coeff * (xi - ci);
        }
    }

    /// β(x) as a fresh vector (convenience for diagnostics and tests).
    pub fn beta(&self, x: &[R]) -> Vec<R> {
        let mut out = vec![R::zero(); self.dim()];
        self.add_beta(x, &mut out);
        out
    }

    /// ∇·β(x) = ΔB(x), analytically.
    pub fn div_beta(&self, x: &[R]) -> R {
        let (s, phi) = self.profile(x);
        if phi == R::zero() {
            return R::zero();
        }
        let one_ms = R::one() - s;
        let inv2 = R::one() / (one_ms * one_ms);
        let inv3 = inv2 / one_ms;
        let inv4 = inv3 / one_ms;
        let r2 = self.support_radius * self.support_radius;
        let d = R::of(self.dim() as f64);
        // ΔB = (2cφ/r²) [ 2s((1−s)⁻⁴ − 2(1−s)⁻³) − d(1−s)⁻² ].
        R::of(2.0) * self.amplitude * phi / r2
            * (R::of(2.0) * s * (inv4 - R::of(2.0) * inv3) - d * inv2)
    }

    /// sup |B| = |c|/e, attained at the center (the radial profile is
    /// strictly decreasing).
    pub fn sup_abs_bump(&self) -> R {
        self.amplitude.abs() * R::of((-1.0f64).exp())
    }

    /// sup ‖β‖ over ℝᵈ via a dense scan of the analytic radial profile
    /// (β is radial, so scanning one ray is exact up to scan resolution;
    /// the result is inflated by 1e-6 to stay a true upper bound).
    pub fn sup_beta_norm(&self) -> R {
        self.scan_radial_sup(|x| {
            let b = self.beta(x);
            b.iter().map(|&v| v * v).sum::<R>().sqrt()
        })
    }

    /// sup |∇·β| over ℝᵈ, by the same radial scan.
    pub fn sup_abs_div_beta(&self) -> R {
        self.scan_radial_sup(|x| self.div_beta(x).abs())
    }

    fn scan_radial_sup(&self, f: impl Fn(&[R]) -> R) -> R {
        let mut x = self.center.clone();
        let mut sup = R::zero();
        for i in 0..PROFILE_SCAN_POINTS {
            let u = R::of(i as f64 / (PROFILE_SCAN_POINTS - 1) as f64);
            x[0] = self.center[0] + u * self.support_radius;
            sup = sup.max(f(&x));
        }
        sup * R::of(PROFILE_SCAN_INFLATION)
    }

    /// Whether the closed support ball lies inside the grid box.
    pub fn support_inside(&self, grid: &GridSpec<R>) -> bool {
        if grid.dim() != self.dim() {
            return false;
        }
        (0..grid.dim()).all(|a| {
            self.center[a] - self.support_radius >= grid.lo(a)
                && self.center[a] + self.support_radius <= grid.hi(a)
        })
    }
}

/// sup over the bump's support of |2 β·∇ψ − ∇·β| — the zeroth-order
/// coefficient the perturbation contributes to the dynamics of the
/// log-likelihood ratio. Computed by a dense deterministic scan of the
/// support (the integrand is smooth and compactly supported), inflated by
/// 1e-6 to remain a true upper bound.
pub fn sup_perturbation_generator<R: Real>(
    pot: &Potential<R>,
    pert: &Perturbation<R>,
) -> Result<R> {
    if pot.dim() != pert.dim() {
        return Err(Error::ShapeMismatch(format!(
            "potential dimension {} does not match perturbation dimension {}",
            pot.dim(),
            pert.dim()
        )));
    }
    let d = pot.dim();
    let n_per_axis: usize = match d {
        1 => 40_001,
        2 => 1_001,
        _ => 101,
    };
    let mut x = vec![R::zero(); d];
    let mut g = vec![R::zero(); d];
    let mut beta = vec![R::zero(); d];
    let mut sup = R::zero();
    let total: usize = n_per_axis.pow(d as u32);
    for flat in 0..total {
        let mut rem = flat;
        for a in 0..d {
            let i = rem % n_per_axis;
            rem /= n_per_axis;
            let u = R::of(2.0 * i as f64 / (n_per_axis - 1) as f64 - 1.0);
            x[a] = pert.center()[a] + u * pert.support_radius();
        }
        beta.fill(R::zero());
        pert.add_beta(&x, &mut beta);
        if beta.iter().all(|&v| v == R::zero()) && pert.div_beta(&x) == R::zero() {
            continue;
        }
        pot.grad(&x, &mut g);
        let dot: R = beta.iter().zip(&g).map(|(&b, &gi)| b * gi).sum();
        let val = (R::of(2.0) * dot - pert.div_beta(&x)).abs();
        sup = sup.max(val);
    }
    Ok(sup * R::of(PROFILE_SCAN_INFLATION))
}

/// The σ-finite reference measure with unnormalized density q = e^{−2ψ}.
#[derive(Debug, Clone)]
pub struct ReferenceMeasure<R: Real> {
    pot: Potential<R>,
}

impl<R: Real> ReferenceMeasure<R> {
    pub fn new(pot: Potential<R>) -> Self {
        Self { pot }
    }

    pub fn potential(&self) -> &Potential<R> {
        &self.pot
    }

    /// log q(x) = −2ψ(x).
    pub fn log_q(&self, x: &[R]) -> R {
        -(R::of(2.0)) * self.pot.psi(x)
    }

    /// q(x) = e^{−2ψ(x)} (strictly positive; errors if ψ is so negative
    /// that the exponential overflows).
    pub fn q(&self, x: &[R]) -> Result<R> {
        let v = self.log_q(x).exp();
        if !v.is_finite() {
            return Err(Error::NonFiniteDensity { cell: 0, value: v.to_f64_lossy() });
        }
        Ok(v)
    }

    /// q sampled at all cell centers (NOT normalized; its midpoint mass is
    /// the reported truncation of Z = ∫ q dx).
    pub fn q_grid(&self, spec: &GridSpec<R>) -> Result<GridDensity<R>> {
        GridDensity::from_fn(spec.clone(), R::zero(), false, |x| self.log_q(x).exp())
    }

    /// Midpoint-rule mass of q over the grid box — the truncated Z.
    pub fn mass_on_grid(&self, spec: &GridSpec<R>) -> Result<R> {
        Ok(self.q_grid(spec)?.mass())
    }
}
