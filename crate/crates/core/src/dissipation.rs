//! Expectation-level dissipation identities for the perturbed diffusion:
//! the entropy/Fisher-information derivative identity, its time-displaced
//! (integrated) form with the perturbation work term, the one-sided entropy
//! derivative at the activation time, change-of-measure (likelihood-ratio)
//! envelopes between the perturbed and unperturbed laws, and the
//! forward-time generator defect identity.
//!
//! All checks are pure post-processing over immutable solver output: grid
//! quadrature for expectations of the density flow, path averages for the
//! change-of-measure ledger.

use crate::entropy::{self, EntropyReport};
use crate::error::{Error, Result};
use crate::fpe::FpeRun;
use crate::grid::{GridDensity, GridSpec};
use crate::model::{self, Perturbation, Potential, ReferenceMeasure};
use crate::real::Real;
use crate::report::CheckReport;
use crate::simulate::PathBundle;
use crate::stats::{compensated_sum, fit_through_origin, MeanStats, linear_fit};

/// Cells with density below this floor are excluded from pointwise density
/// ratios: they sit many orders of magnitude under the bulk, where the
/// solver's relative accuracy carries no information.
const DENSITY_FLOOR: f64 = 1e-12;

/// Verify the entropy-derivative identity along an unperturbed flow: the
/// centered time difference of H(t) must match −½·I(t) at every interior
/// sample with t ≥ `t_min`, relative to max(I, 1).
///
/// `t_min` excludes the initial boundary layer, where the time-difference
/// truncation error is largest (rough starts have rapidly decaying
/// curvature); pass 0 to cover the whole series. The default tolerance for
/// transient scenarios is 0.02; stationary scenarios, where both sides
/// vanish, warrant an absolute 1e−4.
pub fn de_bruijn_check<R: Real>(
    series: &EntropyReport<R>,
    t_min: R,
    tolerance: f64,
) -> Result<CheckReport> {
    if series.times.len() < 3 {
        return Err(Error::InsufficientSamples {
            need: 3,
            got: series.times.len(),
            context: "entropy series for the derivative-identity check",
        });
    }
    let times = &series.times;
    let hs = &series.relative_entropy;
    let is = &series.fisher_information;
    let mut worst = f64::NEG_INFINITY;
    let mut worst_at = (R::zero(), R::zero(), R::zero());
    let mut used = 0usize;
    for k in 1..times.len() - 1 {
        if times[k] < t_min {
            continue;
        }
        let dhdt = (hs[k + 1] - hs[k - 1]) / (times[k + 1] - times[k - 1]);
        let gap = (dhdt + R::of(0.5) * is[k]).to_f64_lossy().abs()
            / is[k].to_f64_lossy().max(1.0);
        if gap > worst {
            worst = gap;
            worst_at = (times[k], dhdt, is[k]);
        }
        used += 1;
    }
    if used == 0 {
        return Err(Error::InvalidParameter(format!(
            "no interior samples at or after t_min = {} in the series",
            t_min.to_f64_lossy()
        )));
    }
    Ok(CheckReport::upper_bound(
        "de_bruijn",
        "the time derivative of relative entropy equals −½ × Fisher information along the flow",
        worst,
        0.0,
        tolerance,
    )
    .with_detail("worst_time", worst_at.0.to_f64_lossy())
    .with_detail("entropy_derivative_at_worst", worst_at.1.to_f64_lossy())
    .with_detail("fisher_information_at_worst", worst_at.2.to_f64_lossy())
    .with_detail("samples_checked", used as f64))
}

/// ∫ (∇·β − 2 β·∇ψ)(x) p(x) dx by midpoint quadrature — the rate at which
/// the perturbation feeds relative entropy into the flow.
fn perturbation_dissipation_term<R: Real>(
    p: &GridDensity<R>,
    pot: &Potential<R>,
    pert: &Perturbation<R>,
) -> R {
    let spec = p.spec();
    let d = spec.dim();
    let vol = spec.cell_volume();
    let two = R::of(2.0);
    let mut x = vec![R::zero(); d];
    let mut g = vec![R::zero(); d];
    let mut b = vec![R::zero(); d];
    let terms: Vec<R> = (0..spec.n_cells())
        .map(|flat| {
            spec.center(flat, &mut x);
            b.iter_mut().for_each(|v| *v = R::zero());
            pert.add_beta(&x, &mut b);
            if b.iter().all(|&v| v == R::zero()) {
                return R::zero();
            }
            pot.grad(&x, &mut g);
            let dot: R = b.iter().zip(&g).map(|(&bi, &gi)| bi * gi).sum();
            (pert.div_beta(&x) - two * dot) * p.values()[flat] * vol
        })
        .collect();
    compensated_sum(terms.into_iter())
}

/// Verify the time-displaced dissipation identity on [t₀, t]:
/// H(t) − H(t₀) = −½∫ I(θ) dθ + ∫ E[∇·β − 2 β·∇ψ](θ) dθ,
/// with the right side integrated over the run's snapshots by the
/// trapezoid rule. The perturbation term enters a node exactly when the
/// field is active just after it (its right limit is what the integral
/// sees at the activation kink). For β ≡ 0 pass `pert = None`; that
/// scenario warrants the tighter tolerance 0.01 (default perturbed: 0.02).
pub fn displacement_identity_check<R: Real>(
    run: &FpeRun<R>,
    m: &ReferenceMeasure<R>,
    pert: Option<&Perturbation<R>>,
    t0: R,
    t: R,
    tolerance: f64,
) -> Result<CheckReport> {
    if t < t0 {
        return Err(Error::InvalidParameter(format!(
            "the displacement window must run forward: t = {} < t₀ = {}",
            t.to_f64_lossy(),
            t0.to_f64_lossy()
        )));
    }
    let k0 = run.index_at_time(t0)?;
    let k1 = run.index_at_time(t)?;
    let anchor = "relative entropy change over a window equals the integrated \
                  −½·Fisher information plus the perturbation work ∫E[∇·β − 2β·∇ψ]";
    if k1 == k0 {
        return Ok(CheckReport::absolute("displacement_identity", anchor, 0.0, 0.0, tolerance)
            .with_detail("window", 0.0));
    }
    let pot = m.potential();
    let eps = run.snapshot_dt() * R::of(1e-6);
    let mut integrand = Vec::with_capacity(k1 - k0 + 1);
    for k in k0..=k1 {
        let p = run.snapshot(k);
        let mut f = -R::of(0.5) * entropy::fisher_information(p, m)?;
        if let Some(pt) = pert {
            if pt.active(p.time() + eps) {
                f += perturbation_dissipation_term(p, pot, pt);
            }
        }
        integrand.push(f);
    }
    let sdt = run.snapshot_dt();
    let rhs = compensated_sum(
        integrand
            .windows(2)
            .map(|w| (w[0] + w[1]) * R::of(0.5) * sdt),
    );
    let lhs = entropy::relative_entropy(run.snapshot(k1), m)?
        - entropy::relative_entropy(run.snapshot(k0), m)?;
    let dissipation = compensated_sum(
        (k0..=k1)
            .map(|k| entropy::fisher_information(run.snapshot(k), m))
            .collect::<Result<Vec<_>>>()?
            .windows(2)
            .map(|w| -(w[0] + w[1]) * R::of(0.25) * sdt),
    );
    let scale = rhs.to_f64_lossy().abs().max(0.05);
    Ok(CheckReport::relative(
        "displacement_identity",
        anchor,
        lhs.to_f64_lossy(),
        rhs.to_f64_lossy(),
        scale,
        tolerance,
    )
    .with_detail("entropy_change", lhs.to_f64_lossy())
    .with_detail("dissipation_integral", dissipation.to_f64_lossy())
    .with_detail(
        "perturbation_integral",
        (rhs - dissipation).to_f64_lossy(),
    ))
}

/// Verify the one-sided entropy derivative at the activation time t₀:
/// the difference quotients (H(t₀+δ) − H(t₀))/δ, extrapolated δ → 0,
/// must match −½·I[p_{t₀}] − ∫ β·∇log(p_{t₀}/q) p_{t₀} dx.
///
/// `run` is the flow whose perturbation (if any) switches on at t₀; the
/// target is evaluated on the shared density p_{t₀}. Pass `pert = None`
/// for the unperturbed reduction (the target is then −½·I).
pub fn perturbed_derivative_check<R: Real>(
    run: &FpeRun<R>,
    m: &ReferenceMeasure<R>,
    pert: Option<&Perturbation<R>>,
    t0: R,
    deltas: &[R],
) -> Result<CheckReport> {
    if deltas.len() < 2 {
        return Err(Error::InsufficientSamples {
            need: 2,
            got: deltas.len(),
            context: "one-sided derivative window sweep",
        });
    }
    if deltas.iter().any(|&d| !(d > R::zero())) {
        return Err(Error::InvalidParameter(
            "derivative windows must be positive".into(),
        ));
    }
    if let Some(pt) = pert {
        let act = pt.activation_time().to_f64_lossy();
        if (act - t0.to_f64_lossy()).abs() > 1e-9 * act.abs().max(1.0) {
            return Err(Error::InvalidParameter(format!(
                "the derivative target assumes the perturbation switches on at t₀ = {}, \
                 but it activates at {act}",
                t0.to_f64_lossy()
            )));
        }
    }
    let p0 = run.snapshot(run.index_at_time(t0)?);
    let h0 = entropy::relative_entropy(p0, m)?;
    let fisher = entropy::fisher_information(p0, m)?;
    let mut beta_term = R::zero();
    if let Some(pt) = pert {
        // ∫ β·∇log(p/q) p dx with the gradient field at cell centers.
        let grad = entropy::grad_log_ratio_field(p0, m)?;
        let spec = p0.spec();
        let d = spec.dim();
        let vol = spec.cell_volume();
        let mut x = vec![R::zero(); d];
        let mut g = vec![R::zero(); d];
        let mut b = vec![R::zero(); d];
        let terms: Vec<R> = (0..spec.n_cells())
            .map(|flat| {
                spec.center(flat, &mut x);
                b.iter_mut().for_each(|v| *v = R::zero());
                pt.add_beta(&x, &mut b);
                if b.iter().all(|&v| v == R::zero()) {
                    return R::zero();
                }
                grad.eval(&x, &mut g).expect("cell centers lie inside the grid");
                let dot: R = b.iter().zip(&g).map(|(&bi, &gi)| bi * gi).sum();
                dot * p0.values()[flat] * vol
            })
            .collect();
        beta_term = compensated_sum(terms.into_iter());
    }
    let target = -R::of(0.5) * fisher - beta_term;
    let mut quotients = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let p = run.snapshot(run.index_at_time(t0 + delta)?);
        quotients.push((entropy::relative_entropy(p, m)? - h0) / delta);
    }
    let fit = linear_fit(deltas, &quotients)?;
    let scale = target.to_f64_lossy().abs().max(0.05);
    let mut report = CheckReport::relative(
        "perturbed_derivative",
        "the right derivative of entropy at activation equals −½·I − ∫β·∇log(p/q) p dx",
        fit.intercept.to_f64_lossy(),
        target.to_f64_lossy(),
        scale,
        0.03,
    )
    .with_detail("fisher_information", fisher.to_f64_lossy())
    .with_detail("perturbation_term", beta_term.to_f64_lossy())
    .with_detail("fit_slope", fit.slope.to_f64_lossy());
    for (&delta, &q) in deltas.iter().zip(&quotients) {
        report = report.with_detail(
            format!("quotient_delta_{}", delta.to_f64_lossy()),
            q.to_f64_lossy(),
        );
    }
    Ok(report)
}

/// Pathwise change-of-measure ledger between the perturbed and unperturbed
/// path laws, accumulated along **unperturbed** trajectories:
/// log Z_t = −∫ β·dW − ½∫‖β‖² dθ (the integrand active strictly after the
/// activation time, matching the simulator's convention). The envelope
/// constants are analytic: because β = ∇B for the compactly supported bump
/// scalar B, the stochastic integral satisfies
/// −∫β·dW = −ΔB(X) − ½∫(2β·∇ψ − ∇·β) dθ, so
/// |log Z| ≤ C′ + C″ with C′ = ½·T_active·sup‖β‖² and
/// C″ = osc(B) + ½·T_active·sup|2β·∇ψ − ∇·β|.
/// The grid-level density ratio this ledger controls is evaluated on
/// demand by [`girsanov_ratio_checks`].
#[derive(Debug, Clone)]
pub struct GirsanovLedger<R: Real> {
    /// ½ · T_active · sup‖β‖² — quadratic-variation half of the envelope.
    pub c_prime: R,
    /// osc(B) + ½ · T_active · sup|2β·∇ψ − ∇·β| — stochastic-integral half.
    pub c_double_prime: R,
    /// Per path: the running minimum of log Z over the window.
    pub log_z_min: Vec<R>,
    /// Per path: the running maximum of log Z over the window.
    pub log_z_max: Vec<R>,
    /// Per path: log Z at the final time.
    pub log_z_final: Vec<R>,
}

impl<R: Real> GirsanovLedger<R> {
    /// The uniform analytic bound C′ + C″ on |log Z|.
    pub fn envelope_log(&self) -> R {
        self.c_prime + self.c_double_prime
    }

    /// Largest |log Z| observed over all paths and times.
    pub fn max_abs_log_z(&self) -> R {
        self.log_z_min
            .iter()
            .zip(&self.log_z_max)
            .fold(R::zero(), |acc, (&lo, &hi)| acc.max(lo.abs()).max(hi.abs()))
    }
}

/// Accumulate the change-of-measure ledger along recorded unperturbed paths.
pub fn girsanov_ledger<R: Real>(
    bundle: &PathBundle<R>,
    pot: &Potential<R>,
    pert: &Perturbation<R>,
) -> Result<GirsanovLedger<R>> {
    if bundle.dim() != pert.dim() || bundle.dim() != pot.dim() {
        return Err(Error::ShapeMismatch(format!(
            "bundle dimension {} must match potential ({}) and perturbation ({})",
            bundle.dim(),
            pot.dim(),
            pert.dim()
        )));
    }
    let d = bundle.dim();
    let dt = bundle.dt();
    let steps = bundle.steps();
    let t_end = bundle.time(steps);
    let t_active = (t_end - pert.activation_time().max(bundle.t_start())).max(R::zero());
    let sup_beta = pert.sup_beta_norm();
    let c_prime = R::of(0.5) * t_active * sup_beta * sup_beta;
    let c_double_prime = pert.sup_abs_bump()
        + R::of(0.5) * t_active * model::sup_perturbation_generator(pot, pert)?;
    let half = R::of(0.5);
    let mut b = vec![R::zero(); d];
    let n = bundle.n();
    let mut log_z_min = Vec::with_capacity(n);
    let mut log_z_max = Vec::with_capacity(n);
    let mut log_z_final = Vec::with_capacity(n);
    for i in 0..n {
        let mut lz = R::zero();
        let (mut lo, mut hi) = (R::zero(), R::zero());
        for k in 0..steps {
            if !pert.active(bundle.time(k)) {
                continue;
            }
            b.iter_mut().for_each(|v| *v = R::zero());
            pert.add_beta(bundle.position(i, k), &mut b);
            let dw = bundle.noise_increment(i, k);
            let mut dot = R::zero();
            let mut norm2 = R::zero();
            for a in 0..d {
                dot += b[a] * dw[a];
                norm2 += b[a] * b[a];
            }
            lz = lz - dot - half * norm2 * dt;
            lo = lo.min(lz);
            hi = hi.max(lz);
        }
        log_z_min.push(lo);
        log_z_max.push(hi);
        log_z_final.push(lz);
    }
    Ok(GirsanovLedger { c_prime, c_double_prime, log_z_min, log_z_max, log_z_final })
}

fn same_grid<R: Real>(a: &GridSpec<R>, b: &GridSpec<R>) -> bool {
    a.dim() == b.dim()
        && (0..a.dim()).all(|ax| {
            a.cells(ax) == b.cells(ax) && a.lo(ax) == b.lo(ax) && a.hi(ax) == b.hi(ax)
        })
}

/// Verify the change-of-measure bounds tying the perturbed flow to the
/// unperturbed one:
///
/// 1. the pathwise weight stays inside the analytic envelope,
///    |log Z| ≤ C′ + C″, and E[Z] = 1 within Monte Carlo error;
/// 2. reweighted unperturbed path averages reproduce perturbed
///    expectations (E⁰[Z·f(X_T)] = E^β[f(X_T)] for f(x) = x₁ and ‖x‖²);
/// 3. the density ratio p^β/p⁰ lies inside [e^{−(C′+C″)}, e^{C′+C″}] on
///    every snapshot, equals 1 before activation, and its worst deviation
///    from 1 grows at most linearly in the time since activation (the
///    minimal bounding slope through the origin is reported).
///
/// Low-density cells (below an absolute floor) are excluded from the
/// pointwise ratio and reported.
pub fn girsanov_ratio_checks<R: Real>(
    bundle0: &PathBundle<R>,
    bundle_beta: &PathBundle<R>,
    run_beta: &FpeRun<R>,
    run0: &FpeRun<R>,
    pot: &Potential<R>,
    pert: &Perturbation<R>,
) -> Result<CheckReport> {
    let spec = run0.snapshot(0).spec();
    if !same_grid(spec, run_beta.snapshot(0).spec()) {
        return Err(Error::ShapeMismatch(
            "the perturbed and unperturbed density runs must share one grid".into(),
        ));
    }
    if run0.len() != run_beta.len() {
        return Err(Error::ShapeMismatch(format!(
            "snapshot counts differ: {} vs {}",
            run0.len(),
            run_beta.len()
        )));
    }
    let times0 = run0.times();
    for (ta, tb) in times0.iter().zip(run_beta.times()) {
        if (ta.to_f64_lossy() - tb.to_f64_lossy()).abs() > 1e-9 {
            return Err(Error::ShapeMismatch(
                "the two density runs must share their snapshot times".into(),
            ));
        }
    }

    // --- pathwise ledger ---
    let ledger = girsanov_ledger(bundle0, pot, pert)?;
    let envelope = ledger.envelope_log().to_f64_lossy();
    let weights: Vec<R> = ledger.log_z_final.iter().map(|&l| l.exp()).collect();
    let z_stats = MeanStats::from_slice(&weights)?;
    let mean_z_score = z_stats.zscore(R::one()).to_f64_lossy().abs();

    // --- observable transfer E⁰[Z·f] = E^β[f] ---
    let k_last = bundle0.steps();
    let transfer = |f: &dyn Fn(&[R]) -> R| -> Result<f64> {
        let lhs: Vec<R> = (0..bundle_beta.n())
            .map(|i| f(bundle_beta.position(i, bundle_beta.steps())))
            .collect();
        let rhs: Vec<R> = (0..bundle0.n())
            .map(|i| weights[i] * f(bundle0.position(i, k_last)))
            .collect();
        let (a, b) = (MeanStats::from_slice(&lhs)?, MeanStats::from_slice(&rhs)?);
        let se = (a.stderr * a.stderr + b.stderr * b.stderr).sqrt();
        Ok(((a.mean - b.mean) / se).to_f64_lossy().abs())
    };
    let transfer_mean = transfer(&|x: &[R]| x[0])?;
    let transfer_sq = transfer(&|x: &[R]| x.iter().map(|&v| v * v).sum())?;

    // --- density-ratio scan ---
    let floor = R::of(DENSITY_FLOOR);
    let act = pert.activation_time();
    let tiny = run0.snapshot_dt() * R::of(1e-6);
    let mut ratio_min = f64::INFINITY;
    let mut ratio_max = f64::NEG_INFINITY;
    let mut excluded = 0usize;
    let mut pre_activation_dev = 0.0f64;
    let mut windows = Vec::new();
    let mut deviations = Vec::new();
    for (k, &tk) in times0.iter().enumerate() {
        let p0 = run0.snapshot(k);
        let pb = run_beta.snapshot(k);
        let mut dev = 0.0f64;
        let mut seen = false;
        for (&a, &b) in p0.values().iter().zip(pb.values()) {
            if a < floor || b < floor {
                excluded += 1;
                continue;
            }
            let ratio = (b / a).to_f64_lossy();
            ratio_min = ratio_min.min(ratio);
            ratio_max = ratio_max.max(ratio);
            dev = dev.max((ratio - 1.0).abs());
            seen = true;
        }
        if !seen {
            return Err(Error::EmptyInput(format!(
                "every cell fell below the density floor at t = {}",
                tk.to_f64_lossy()
            )));
        }
        if tk <= act + tiny {
            pre_activation_dev = pre_activation_dev.max(dev);
        } else {
            windows.push((tk - act).to_f64_lossy());
            deviations.push(dev);
        }
    }
    if windows.is_empty() {
        return Err(Error::InvalidParameter(
            "the runs contain no snapshots after the activation time".into(),
        ));
    }
    let slope_bound = windows
        .iter()
        .zip(&deviations)
        .map(|(&w, &d)| d / w)
        .fold(0.0f64, f64::max);
    let slope_fit = fit_through_origin(&windows, &deviations)?.slope;
    let max_abs_log_ratio = ratio_max.ln().max((-ratio_min.ln()).max(0.0));

    let mut report = CheckReport::upper_bound(
        "girsanov_ratio",
        "the perturbed/unperturbed density ratio stays inside the pathwise \
         change-of-measure envelope and leaves 1 at most linearly after activation",
        max_abs_log_ratio,
        envelope,
        0.0,
    )
    .with_detail("c_prime", ledger.c_prime.to_f64_lossy())
    .with_detail("c_double_prime", ledger.c_double_prime.to_f64_lossy())
    .with_detail("ratio_min", ratio_min)
    .with_detail("ratio_max", ratio_max)
    .with_detail("max_abs_log_z", ledger.max_abs_log_z().to_f64_lossy())
    .with_detail("mean_weight", z_stats.mean.to_f64_lossy())
    .with_detail("mean_weight_zscore", mean_z_score)
    .with_detail("transfer_zscore_mean", transfer_mean)
    .with_detail("transfer_zscore_square", transfer_sq)
    .with_detail("deviation_slope_bound", slope_bound)
    .with_detail("deviation_slope_fit", slope_fit)
    .with_detail("final_deviation", *deviations.last().expect("nonempty"))
    .with_detail("excluded_cells", excluded as f64)
    .and_require(
        ledger.max_abs_log_z().to_f64_lossy() <= envelope,
        "pathwise log-weight must stay inside the analytic envelope",
    )
    .and_require(
        mean_z_score <= 5.0,
        "the mean change-of-measure weight must equal 1 within Monte Carlo error",
    )
    .and_require(
        transfer_mean <= 5.0 && transfer_sq <= 5.0,
        "reweighted unperturbed averages must reproduce perturbed expectations",
    )
    .and_require(
        pre_activation_dev <= 1e-12,
        "the two densities must coincide before activation",
    )
    .and_require(
        slope_bound.is_finite(),
        "the deviation-per-window slope must be finite",
    );
    if excluded > 0 {
        report = report.with_warning(format!(
            "{excluded} cell evaluations fell below the {DENSITY_FLOOR:.0e} density floor \
             and were excluded from the ratio scan"
        ));
    }
    Ok(report)
}

/// Verify the forward-time generator defect identity at one time: with
/// ℓ = p/q, grid quadrature of (Δℓ/ℓ − 2∇log ℓ·∇ψ)·p must vanish — the
/// two terms cancel exactly in expectation for any smooth density.
/// Both derivatives are taken from log ℓ with centered stencils
/// (Δℓ/ℓ = (e^{Δ₊} − 2 + e^{Δ₋})/h² per axis, with Δ± the log-ratio
/// increments), which is stable far into the tails. Boundary cells carry
/// no stencil and are skipped; their mass is reported.
pub fn forward_defect_check<R: Real>(
    run: &FpeRun<R>,
    m: &ReferenceMeasure<R>,
    t: R,
) -> Result<CheckReport> {
    let p = run.snapshot(run.index_at_time(t)?);
    let spec = p.spec();
    let d = spec.dim();
    let vol = spec.cell_volume();
    let pot = m.potential();
    if let Some(&bad) = p.values().iter().find(|&&v| !(v > R::zero())) {
        return Err(Error::InvalidParameter(format!(
            "the defect check needs a strictly positive density, found {bad}"
        )));
    }
    // log ℓ = log p + 2ψ, cell by cell.
    let mut x = vec![R::zero(); d];
    let log_ratio: Vec<R> = (0..spec.n_cells())
        .map(|flat| {
            spec.center(flat, &mut x);
            p.values()[flat].ln() + R::of(2.0) * pot.psi(&x)
        })
        .collect();
    let two = R::of(2.0);
    let mut idx = vec![0usize; d];
    let mut g = vec![R::zero(); d];
    let mut laplacian_sum = R::zero();
    let mut cross_sum = R::zero();
    let mut skipped_mass = R::zero();
    for flat in 0..spec.n_cells() {
        spec.unflatten(flat, &mut idx);
        let interior = (0..d).all(|a| idx[a] > 0 && idx[a] + 1 < spec.cells(a));
        let w = p.values()[flat] * vol;
        if !interior {
            skipped_mass += w;
            continue;
        }
        spec.center(flat, &mut x);
        pot.grad(&x, &mut g);
        let r0 = log_ratio[flat];
        let mut lap = R::zero();
        let mut cross = R::zero();
        for a in 0..d {
            let h = spec.dx(a);
            let s = spec.stride(a);
            let rp = log_ratio[flat + s];
            let rm = log_ratio[flat - s];
            lap += ((rp - r0).exp() - two + (rm - r0).exp()) / (h * h);
            cross += (rp - rm) / (two * h) * g[a];
        }
        laplacian_sum += lap * w;
        cross_sum += two * cross * w;
    }
    let defect = laplacian_sum - cross_sum;
    let fisher = entropy::fisher_information(p, m)?;
    let tolerance = (1e-3 * fisher.to_f64_lossy()).max(1e-4);
    Ok(CheckReport::absolute(
        "forward_defect",
        "E[Δℓ/ℓ − 2∇log ℓ·∇ψ] = 0 for ℓ = p/q along the forward flow",
        defect.to_f64_lossy(),
        0.0,
        tolerance,
    )
    .with_detail("laplacian_term", laplacian_sum.to_f64_lossy())
    .with_detail("interaction_term", cross_sum.to_f64_lossy())
    .with_detail("fisher_information", fisher.to_f64_lossy())
    .with_detail("boundary_mass_skipped", skipped_mass.to_f64_lossy()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fpe::{solve_fpe, stable_dt};
    use crate::grid::GridSpec;
    use crate::simulate::{sample_gaussian_ensemble, simulate_forward_recorded, SimParams};
    use approx::assert_relative_eq;

    fn gaussian_start(spec: &GridSpec<f64>, mean: f64, var: f64) -> GridDensity<f64> {
        GridDensity::from_fn(spec.clone(), 0.0, true, |x| {
            (-(x[0] - mean) * (x[0] - mean) / (2.0 * var)).exp()
        })
        .unwrap()
    }

    /// OU run: κ = 1 on [−6, 6] × 512 cells, solver step fixed at
    /// 0.0125/64 ≈ 1.95e−4 (inside the stability bound); `stride` sets the
    /// snapshot spacing stride·dt.
    fn ou_run(
        var0: f64,
        mean0: f64,
        t_end: f64,
        stride: usize,
        pert: Option<&Perturbation<f64>>,
    ) -> (FpeRun<f64>, ReferenceMeasure<f64>) {
        let pot = Potential::quadratic(1, 1.0).unwrap();
        let spec = GridSpec::new(&[(-6.0f64, 6.0, 512)]).unwrap();
        let p0 = gaussian_start(&spec, mean0, var0);
        let dt = 0.0125 / 64.0;
        assert!(dt <= stable_dt(&spec, &pot, pert));
        let steps = (t_end / dt).round() as usize;
        let run = solve_fpe(&p0, &pot, pert, dt, steps, stride).unwrap();
        (run, ReferenceMeasure::new(pot))
    }

    #[test]
    fn de_bruijn_gap_is_small_across_starting_spreads() {
        for &var0 in &[0.1, 0.25, 1.0] {
            let (run, m) = ou_run(var0, 0.0, 0.4, 64, None);
            let series = entropy::entropy_series(&run, &m).unwrap();
            let report = de_bruijn_check(&series, 0.1, 0.02).unwrap();
            assert!(report.pass, "σ₀² = {var0}: {}", report.summary_line());
        }
    }

    #[test]
    fn de_bruijn_gap_shrinks_under_time_refinement() {
        // Δt here is the entropy-sampling step entering the centered
        // difference; the solver runs at its stability-limited step in
        // both runs. The coarse spacing is chosen so the O(Δt²)
        // difference error dominates the fixed spatial floor.
        let coarse = {
            let (run, m) = ou_run(0.25, 0.5, 0.5, 256, None);
            let series = entropy::entropy_series(&run, &m).unwrap();
            de_bruijn_check(&series, 0.1, 0.02).unwrap()
        };
        let fine = {
            let (run, m) = ou_run(0.25, 0.5, 0.5, 128, None);
            let series = entropy::entropy_series(&run, &m).unwrap();
            de_bruijn_check(&series, 0.1, 0.02).unwrap()
        };
        assert!(coarse.pass && fine.pass);
        let ratio = coarse.lhs / fine.lhs;
        assert!(
            ratio >= 1.8,
            "halving the sampling step shrank the gap only {ratio:.2}× ({} → {})",
            coarse.lhs,
            fine.lhs
        );
    }

    #[test]
    fn de_bruijn_is_flat_at_stationarity() {
        let pot = Potential::quadratic(1, 1.0).unwrap();
        let spec = GridSpec::new(&[(-6.0f64, 6.0, 512)]).unwrap();
        let m = ReferenceMeasure::new(pot.clone());
        let mut p0 = m.q_grid(&spec).unwrap();
        p0.normalize().unwrap();
        let dt = 0.0125 / 64.0;
        let run = solve_fpe(&p0, &pot, None, dt, 8 * 64, 64).unwrap();
        let series = entropy::entropy_series(&run, &m).unwrap();
        let report = de_bruijn_check(&series, 0.0, 1e-4).unwrap();
        assert!(report.pass, "{}", report.summary_line());
    }

    #[test]
    fn de_bruijn_needs_at_least_three_samples() {
        let series = EntropyReport {
            times: vec![0.0f64, 0.1],
            relative_entropy: vec![0.5, 0.4],
            fisher_information: vec![1.0, 0.9],
            estimator: crate::entropy::EstimatorKind::Grid,
        };
        assert!(matches!(
            de_bruijn_check(&series, 0.0, 0.02),
            Err(Error::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn displacement_identity_holds_unperturbed_within_one_percent() {
        let (run, m) = ou_run(0.25, 0.0, 0.5, 64, None);
        let report = displacement_identity_check(&run, &m, None, 0.0, 0.5, 0.01).unwrap();
        assert!(report.pass, "{}", report.summary_line());
        // Something actually happened over the window.
        assert!(report.lhs.abs() > 0.05, "entropy change {}", report.lhs);
        // Zero-length window: both sides exactly 0.
        let trivial = displacement_identity_check(&run, &m, None, 0.25, 0.25, 0.01).unwrap();
        assert!(trivial.pass && trivial.lhs == 0.0 && trivial.rhs == 0.0);
        // Backward window is rejected.
        assert!(displacement_identity_check(&run, &m, None, 0.5, 0.25, 0.01).is_err());
    }

    #[test]
    fn displacement_identity_holds_with_a_bump_within_two_percent() {
        let pert = Perturbation::new(0.5, 1.0, vec![0.0f64], 0.25).unwrap();
        let (run, m) = ou_run(0.25, 0.0, 0.75, 64, Some(&pert));
        let report =
            displacement_identity_check(&run, &m, Some(&pert), 0.25, 0.75, 0.02).unwrap();
        assert!(report.pass, "{}", report.summary_line());
        // The perturbation contributed a visible share of the balance.
        let pert_integral = report.details["perturbation_integral"];
        assert!(pert_integral.abs() > 1e-3, "perturbation integral {pert_integral}");
    }

    #[test]
    fn perturbed_derivative_matches_the_quadrature_target() {
        // Off-center bump so the cross term ∫β·∇log(p/q) p dx is nonzero.
        let pert = Perturbation::new(0.5, 1.0, vec![0.5f64], 0.1).unwrap();
        let (run, m) = ou_run(0.25, 0.0, 0.25, 64, Some(&pert));
        let report =
            perturbed_derivative_check(&run, &m, Some(&pert), 0.1, &[0.1, 0.05, 0.025])
                .unwrap();
        assert!(report.pass, "{}", report.summary_line());
        assert!(
            report.details["perturbation_term"].abs() > 0.01,
            "cross term too small to be probative: {}",
            report.details["perturbation_term"]
        );
    }

    #[test]
    fn perturbed_derivative_reduces_to_de_bruijn_without_a_bump() {
        let (run, m) = ou_run(0.25, 0.0, 0.25, 64, None);
        let report =
            perturbed_derivative_check(&run, &m, None, 0.1, &[0.1, 0.05, 0.025]).unwrap();
        assert!(report.pass, "{}", report.summary_line());
        assert_eq!(report.details["perturbation_term"], 0.0);
        // Target is −½I by construction.
        assert_relative_eq!(
            report.rhs,
            -0.5 * report.details["fisher_information"],
            max_relative = 1e-12
        );
    }

    #[test]
    fn perturbed_derivative_ignores_a_remote_bump() {
        // Support [3.5, 5.5] sits where the density is ~e⁻⁴⁰: the cross
        // term must be numerically invisible.
        let pert = Perturbation::new(0.5, 1.0, vec![4.5f64], 0.1).unwrap();
        let (run, m) = ou_run(0.25, 0.0, 0.25, 64, Some(&pert));
        let report =
            perturbed_derivative_check(&run, &m, Some(&pert), 0.1, &[0.1, 0.05, 0.025])
                .unwrap();
        assert!(report.pass, "{}", report.summary_line());
        assert!(
            report.details["perturbation_term"].abs() < 1e-8,
            "remote bump leaked into the target: {}",
            report.details["perturbation_term"]
        );
    }

    #[test]
    fn perturbed_derivative_rejects_misaligned_activation() {
        let pert = Perturbation::new(0.5, 1.0, vec![0.5f64], 0.2).unwrap();
        let (run, m) = ou_run(0.25, 0.0, 0.25, 64, Some(&pert));
        assert!(matches!(
            perturbed_derivative_check(&run, &m, Some(&pert), 0.1, &[0.1, 0.05]),
            Err(Error::InvalidParameter(_))
        ));
    }

    /// Shared setup for the change-of-measure checks: paired path bundles
    /// (same seed, with/without the bump) and paired density runs.
    fn girsanov_setup(
        amplitude: f64,
    ) -> (
        PathBundle<f64>,
        PathBundle<f64>,
        FpeRun<f64>,
        FpeRun<f64>,
        Potential<f64>,
        Perturbation<f64>,
    ) {
        let pot = Potential::quadratic(1, 1.0).unwrap();
        let pert = Perturbation::new(amplitude, 1.0, vec![0.0f64], 0.1).unwrap();
        let state = sample_gaussian_ensemble(20_000, &[0.0f64], 0.25, 31).unwrap();
        let dt = 1e-3;
        let steps = 600;
        let (_, bundle0) = simulate_forward_recorded(
            &state,
            &SimParams { pot: &pot, pert: None, dt, steps },
        )
        .unwrap();
        let (_, bundle_beta) = simulate_forward_recorded(
            &state,
            &SimParams { pot: &pot, pert: Some(&pert), dt, steps },
        )
        .unwrap();
        let spec = GridSpec::new(&[(-6.0f64, 6.0, 512)]).unwrap();
        let p0 = gaussian_start(&spec, 0.0, 0.25);
        let fpe_dt = 0.0125f64 / 64.0;
        let fpe_steps = (0.6 / fpe_dt).round() as usize;
        let run0 = solve_fpe(&p0, &pot, None, fpe_dt, fpe_steps, 64).unwrap();
        let run_beta = solve_fpe(&p0, &pot, Some(&pert), fpe_dt, fpe_steps, 64).unwrap();
        (bundle0, bundle_beta, run_beta, run0, pot, pert)
    }

    #[test]
    fn girsanov_ratio_checks_hold_for_the_bump() {
        let (bundle0, bundle_beta, run_beta, run0, pot, pert) = girsanov_setup(0.5);
        let report =
            girsanov_ratio_checks(&bundle0, &bundle_beta, &run_beta, &run0, &pot, &pert)
                .unwrap();
        assert!(report.pass, "{}", report.summary_line());
        // The perturbation genuinely moved the density…
        assert!(report.details["final_deviation"] > 1e-3);
        // …and the measured ratio spread sits strictly inside the envelope.
        assert!(report.lhs > 0.0 && report.lhs < report.rhs);
        assert!(report.details["deviation_slope_bound"].is_finite());
    }

    #[test]
    fn girsanov_envelope_scales_with_amplitude() {
        let (b0, bb, rb, r0, pot, pert) = girsanov_setup(0.5);
        let base = girsanov_ratio_checks(&b0, &bb, &rb, &r0, &pot, &pert).unwrap();
        let (b0, bb, rb, r0, pot, pert) = girsanov_setup(1.0);
        let doubled = girsanov_ratio_checks(&b0, &bb, &rb, &r0, &pot, &pert).unwrap();
        assert!(base.pass && doubled.pass);
        let scaling = doubled.lhs / base.lhs;
        assert!(
            scaling > 1.0 && scaling <= 2.2,
            "doubling the amplitude scaled the log-ratio bound by {scaling:.3}"
        );
    }

    #[test]
    fn forward_defect_vanishes_at_stationarity_and_in_transit() {
        // Stationary start: ℓ is constant on the grid, so both stencil
        // terms vanish identically.
        let pot = Potential::quadratic(1, 1.0).unwrap();
        let spec = GridSpec::new(&[(-6.0f64, 6.0, 512)]).unwrap();
        let m = ReferenceMeasure::new(pot.clone());
        let mut p0 = m.q_grid(&spec).unwrap();
        p0.normalize().unwrap();
        let dt = 0.0125 / 64.0;
        let run = solve_fpe(&p0, &pot, None, dt, 2 * 64, 64).unwrap();
        let stationary = forward_defect_check(&run, &m, 0.0125).unwrap();
        assert!(stationary.pass, "{}", stationary.summary_line());
        assert!(stationary.lhs.abs() < 1e-8, "stationary defect {}", stationary.lhs);

        // Transient: the defect must vanish within tolerance while the
        // dropped-term control stays large.
        let (run, m) = ou_run(0.25, 0.0, 0.3, 64, None);
        let report = forward_defect_check(&run, &m, 0.3).unwrap();
        assert!(report.pass, "{}", report.summary_line());
        let fisher = report.details["fisher_information"];
        let dropped = report.details["laplacian_term"];
        assert!(
            dropped.abs() >= fisher / 2.0,
            "negative control: |laplacian term| {dropped} should exceed I/2 = {}",
            fisher / 2.0
        );
    }

    #[test]
    fn expectation_checks_agree_between_grid_and_monte_carlo() {
        // The perturbation work term E[∇·β − 2β·∇ψ] at p = N(0, 0.25):
        // grid quadrature vs a direct Monte Carlo average over exact
        // Gaussian samples, within 3 combined standard errors.
        let pot = Potential::quadratic(1, 1.0).unwrap();
        let pert = Perturbation::new(0.5, 1.0, vec![0.5f64], 0.0).unwrap();
        let spec = GridSpec::new(&[(-6.0f64, 6.0, 512)]).unwrap();
        let p = gaussian_start(&spec, 0.0, 0.25);
        let grid_value = perturbation_dissipation_term(&p, &pot, &pert);

        let state = sample_gaussian_ensemble(200_000, &[0.0f64], 0.25, 99).unwrap();
        let samples: Vec<f64> = (0..state.n())
            .map(|i| {
                let x = state.position(i);
                let b = pert.beta(x);
                let mut g = vec![0.0f64; 1];
                pot.grad(x, &mut g);
                pert.div_beta(x) - 2.0 * b[0] * g[0]
            })
            .collect();
        let stats = MeanStats::from_slice(&samples).unwrap();
        let z = stats.zscore(grid_value).abs();
        assert!(
            z <= 3.0,
            "grid {grid_value} vs Monte Carlo {} ± {} (z = {z:.2})",
            stats.mean,
            stats.stderr
        );
        assert!(grid_value.abs() > 1e-3, "term too small to be probative");
    }
}
