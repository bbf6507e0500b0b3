//! Registry of every check the binary can run, with one runner per name.
//!
//! Core check operations carry their own report names and identity anchors;
//! the registry repeats those strings so `list-checks` can describe a check
//! without executing it, and adds three orchestration-level checks
//! (`stationarity`, `reversal_fidelity`, `sde_pde_consistency`) that
//! combine several core operations into a single verdict.
//!
//! Fixed runner parameters (window sweeps, bin counts, ensemble caps) are
//! chosen for the bundled scenarios; scenarios with horizons too short for
//! a window sweep fail at runtime with the originating module's error.

use entflow_core::model::{check_drift_condition, curvature_lower_bound};
use entflow_core::report::CheckReport;
use entflow_core::reversal::{
    backward_marginals, martingale_suite_streaming, reconstruct_backward_brownian,
    trajectorial_displacement_streaming, trajectorial_rate_streaming, IncrementKind,
};
use entflow_core::simulate::gronwall_envelope_check;
use entflow_core::transport::{
    exponential_decay_check, geodesic_entropy_derivative_check, histogram_density, hwi_check,
    metric_derivative_check, steepest_descent_check, w2_1d, w2_entropic,
};
use entflow_core::{dissipation, fpe, Cloud64, Error, GridDensity64, Quantile1D64, Result};

use crate::scenario::ScenarioContext;

/// Confinement constant C used by `drift_condition` and `gronwall_envelope`.
const CONFINEMENT_C: f64 = 1.0;
/// Confinement radius R used by `drift_condition` and `gronwall_envelope`.
const CONFINEMENT_RADIUS: f64 = 2.0;
/// Window sweep for the derivative-extrapolation checks.
const WINDOW_SWEEP: [f64; 3] = [0.1, 0.05, 0.025];
/// Window sweep for the trajectorial rate check.
const RATE_SWEEP: [f64; 4] = [0.2, 0.1, 0.05, 0.025];
/// Curve-fraction sweep for the geodesic derivative check. These are
/// fractions of the displacement interpolation, not times, so they can be
/// finer than the solver windows; the smaller span keeps the quadratic
/// curvature of H along the geodesic out of the extrapolated intercept.
const GEODESIC_SWEEP: [f64; 3] = [0.05, 0.025, 0.0125];
/// Regularization of the debiased entropic transport distance used by the
/// two-dimensional consistency check. Debiasing cancels the entropic blur
/// almost completely on smooth densities, so this can stay coarse — which
/// keeps the scaling iterations affordable on a single core.
const SINKHORN_EPS: f64 = 0.1;
/// Bin count of the trajectorial displacement check.
const DISPLACEMENT_BINS: usize = 64;
/// Bin count of the trajectorial rate check.
const RATE_BINS: usize = 8;

type Runner = fn(&ScenarioContext, Option<f64>) -> Result<CheckReport>;

/// One registered check.
pub struct CheckDef {
    /// Stable name used in configs, reports, and `--only` filters.
    pub name: &'static str,
    /// One-line description for `list-checks`.
    pub summary: &'static str,
    /// The identity the check exercises (same string the report carries).
    pub anchor: &'static str,
    /// Whether a config may override the pass bound with `tolerance`.
    pub tunable: bool,
    /// Whether the check is meaningless without a `[perturbation]` section.
    pub needs_perturbation: bool,
    run: Runner,
}

impl CheckDef {
    pub fn run(&self, ctx: &ScenarioContext, tolerance: Option<f64>) -> Result<CheckReport> {
        (self.run)(ctx, tolerance)
    }
}

/// All checks, sorted by name. `list_checks` prints this order and configs
/// may select any subset.
pub static REGISTRY: &[CheckDef] = &[
    CheckDef {
        name: "backward_brownian",
        summary: "noise increments reconstructed from reversed paths pass Brownian null tests",
        anchor: "increments reconstructed with the score correction behave as Brownian noise \
                 independent of the terminal state",
        tunable: false,
        needs_perturbation: false,
        run: run_backward_brownian,
    },
    CheckDef {
        name: "de_bruijn",
        summary: "entropy decays at half the Fisher information along the unperturbed flow",
        anchor: "the time derivative of relative entropy equals −½ × Fisher information along the flow",
        tunable: true,
        needs_perturbation: false,
        run: run_de_bruijn,
    },
    CheckDef {
        name: "displacement_identity",
        summary: "entropy change over a window equals the integrated dissipation",
        anchor: "relative entropy change over a window equals the integrated \
                 −½·Fisher information plus the perturbation work ∫E[∇·β − 2β·∇ψ]",
        tunable: true,
        needs_perturbation: false,
        run: run_displacement_identity,
    },
    CheckDef {
        name: "drift_condition",
        summary: "the potential is confining outside a bounded region",
        anchor: "confinement: x·∇ψ(x) ≥ −C‖x‖² outside the ball of radius R",
        tunable: false,
        needs_perturbation: false,
        run: run_drift_condition,
    },
    CheckDef {
        name: "exponential_decay",
        summary: "relative entropy decays at least exponentially on its positive range",
        anchor: "relative entropy stays below H(t₀)·e^{−κ(t−t₀)} on its positive range",
        tunable: false,
        needs_perturbation: false,
        run: run_exponential_decay,
    },
    CheckDef {
        name: "forward_defect",
        summary: "the likelihood ratio satisfies the forward generator identity",
        anchor: "E[Δℓ/ℓ − 2∇log ℓ·∇ψ] = 0 for ℓ = p/q along the forward flow",
        tunable: false,
        needs_perturbation: false,
        run: run_forward_defect,
    },
    CheckDef {
        name: "geodesic_entropy_derivative",
        summary: "the entropy derivative along the displacement geodesic matches the transport form",
        anchor: "initial entropy derivative along the displacement interpolation equals ∫∇log(μ/q)·(T−Id) dμ",
        tunable: false,
        needs_perturbation: false,
        run: run_geodesic_entropy_derivative,
    },
    CheckDef {
        name: "girsanov_ratio",
        summary: "perturbed and unperturbed density ratios stay inside the change-of-measure envelope",
        anchor: "the perturbed/unperturbed density ratio stays inside the pathwise \
                 change-of-measure envelope and leaves 1 at most linearly after activation",
        tunable: false,
        needs_perturbation: true,
        run: run_girsanov_ratio,
    },
    CheckDef {
        name: "gronwall_envelope",
        summary: "ensemble second moments stay below the confinement envelope",
        anchor: "second moments stay below the confinement envelope m₀e^{2Ct} + (C_R+d)(e^{2Ct}−1)/(2C)",
        tunable: false,
        needs_perturbation: false,
        run: run_gronwall_envelope,
    },
    CheckDef {
        name: "hwi",
        summary: "entropy, transport distance and Fisher information satisfy the interpolation inequality",
        anchor: "entropy gap is bounded by W₂·√I − (κ/2)·W₂² under the curvature bound",
        tunable: false,
        needs_perturbation: false,
        run: run_hwi,
    },
    CheckDef {
        name: "martingale",
        summary: "reversed-time entropy increments are orthogonal to the past and L²-isometric",
        anchor: "increments of the reversed-time entropy martingale are orthogonal to the \
                 reversed past and match the accumulated squared gradient",
        tunable: false,
        needs_perturbation: false,
        run: run_martingale,
    },
    CheckDef {
        name: "metric_derivative",
        summary: "the W₂ speed of the flow matches the weighted velocity norm",
        anchor: "limiting W₂ speed of the flow equals half the L²(p) norm of ∇log(p/q) + 2β",
        tunable: false,
        needs_perturbation: false,
        run: run_metric_derivative,
    },
    CheckDef {
        name: "perturbed_derivative",
        summary: "the entropy derivative at activation gains the perturbation work term",
        anchor: "the right derivative of entropy at activation equals −½·I − ∫β·∇log(p/q) p dx",
        tunable: false,
        needs_perturbation: true,
        run: run_perturbed_derivative,
    },
    CheckDef {
        name: "reversal_fidelity",
        summary: "the score-corrected reversed walk returns the terminal law to the initial one",
        anchor: "the reversed-time walk with the score correction carries the terminal law \
                 back to the initial density",
        tunable: true,
        needs_perturbation: false,
        run: run_reversal_fidelity,
    },
    CheckDef {
        name: "sde_pde_consistency",
        summary: "particle ensembles and the grid density solver agree in transport distance",
        anchor: "the particle dynamics and the density evolution solve the same flow: their \
                 laws coincide at the horizon",
        tunable: true,
        needs_perturbation: false,
        run: run_sde_pde_consistency,
    },
    CheckDef {
        name: "stationarity",
        summary: "the normalized reference density is a fixed point of the density evolution",
        anchor: "the reference density e^{−2ψ}, normalized on the grid, is stationary under \
                 the density evolution",
        tunable: true,
        needs_perturbation: false,
        run: run_stationarity,
    },
    CheckDef {
        name: "steepest_descent",
        summary: "the flow realizes the steepest entropy descent per unit W₂ displacement",
        anchor: "entropy drop per unit W₂ displacement extrapolates to −√I for the unperturbed flow",
        tunable: false,
        needs_perturbation: false,
        run: run_steepest_descent,
    },
    CheckDef {
        name: "trajectorial_displacement",
        summary: "binned pathwise entropy displacement matches the conditional drift integral",
        anchor: "binned conditional entropy displacement matches the conditional \
                 time-integrated dissipation drift",
        tunable: false,
        needs_perturbation: false,
        run: run_trajectorial_displacement,
    },
    CheckDef {
        name: "trajectorial_rate",
        summary: "shrinking-window pathwise quotients converge to the dissipation rate",
        anchor: "shrinking-window conditional entropy quotients converge to the \
                 instantaneous dissipation rate",
        tunable: false,
        needs_perturbation: false,
        run: run_trajectorial_rate,
    },
];

/// Look a check up by name.
pub fn find(name: &str) -> Option<&'static CheckDef> {
    REGISTRY.iter().find(|c| c.name == name)
}

// ---------------------------------------------------------------------------
// Runners
// ---------------------------------------------------------------------------

fn run_backward_brownian(ctx: &ScenarioContext, _tol: Option<f64>) -> Result<CheckReport> {
    let bundle = ctx.forward_bundle()?;
    let run = ctx.run()?;
    let (_, report) = reconstruct_backward_brownian(bundle, &run)?;
    Ok(report)
}

fn run_de_bruijn(ctx: &ScenarioContext, tol: Option<f64>) -> Result<CheckReport> {
    let t_min = 0.1f64.min(ctx.cfg().horizon * 0.25);
    dissipation::de_bruijn_check(ctx.entropy0()?, t_min, tol.unwrap_or(0.02))
}

fn run_displacement_identity(ctx: &ScenarioContext, tol: Option<f64>) -> Result<CheckReport> {
    let run = ctx.run()?;
    dissipation::displacement_identity_check(
        &run,
        ctx.measure(),
        ctx.pert(),
        ctx.cfg().t0,
        ctx.cfg().horizon,
        tol.unwrap_or(0.02),
    )
}

fn run_drift_condition(ctx: &ScenarioContext, _tol: Option<f64>) -> Result<CheckReport> {
    check_drift_condition(ctx.pot(), CONFINEMENT_C, CONFINEMENT_RADIUS, ctx.spec())
}

fn run_exponential_decay(ctx: &ScenarioContext, _tol: Option<f64>) -> Result<CheckReport> {
    let kappa = curvature_lower_bound(ctx.pot(), ctx.spec())?;
    let log_z = ctx.measure().mass_on_grid(ctx.spec())?.ln();
    exponential_decay_check(ctx.entropy0()?, ctx.cfg().t0, kappa, log_z)
}

fn run_forward_defect(ctx: &ScenarioContext, _tol: Option<f64>) -> Result<CheckReport> {
    let run0 = ctx.run0()?;
    let t_mid = ctx.snap_to_grid(0.5 * (ctx.cfg().t0 + ctx.cfg().horizon));
    dissipation::forward_defect_check(&run0, ctx.measure(), t_mid)
}

fn run_geodesic_entropy_derivative(ctx: &ScenarioContext, _tol: Option<f64>) -> Result<CheckReport> {
    let run0 = ctx.run0()?;
    let mu_a = run0.snapshot(run0.index_at_time(ctx.cfg().t0)?);
    let mu_b = run0.last();
    geodesic_entropy_derivative_check(mu_a, mu_b, ctx.measure(), &GEODESIC_SWEEP)
}

fn run_girsanov_ratio(ctx: &ScenarioContext, _tol: Option<f64>) -> Result<CheckReport> {
    let (bundle0, bundle_beta) = ctx.coupled_bundles()?;
    let run_beta = ctx.run()?;
    let run0 = ctx.run0()?;
    let pert = ctx.pert().expect("validated: girsanov_ratio needs a perturbation");
    dissipation::girsanov_ratio_checks(bundle0, bundle_beta, &run_beta, &run0, ctx.pot(), pert)
}

fn run_gronwall_envelope(ctx: &ScenarioContext, _tol: Option<f64>) -> Result<CheckReport> {
    gronwall_envelope_check(
        ctx.moments()?,
        ctx.pot(),
        ctx.pert(),
        CONFINEMENT_C,
        CONFINEMENT_RADIUS,
    )
}

fn run_hwi(ctx: &ScenarioContext, _tol: Option<f64>) -> Result<CheckReport> {
    let run0 = ctx.run0()?;
    let mu_a = run0.snapshot(run0.index_at_time(ctx.cfg().t0)?);
    let mu_b = run0.last();
    let kappa = curvature_lower_bound(ctx.pot(), ctx.spec())?;
    hwi_check(mu_a, mu_b, ctx.measure(), kappa)
}

fn run_martingale(ctx: &ScenarioContext, _tol: Option<f64>) -> Result<CheckReport> {
    let run = ctx.run()?;
    martingale_suite_streaming(
        ctx.terminal()?,
        &run,
        &ctx.backward_params(),
        IncrementKind::Martingale,
    )
}

fn run_metric_derivative(ctx: &ScenarioContext, _tol: Option<f64>) -> Result<CheckReport> {
    let run = ctx.run()?;
    metric_derivative_check(&run, ctx.measure(), ctx.pert(), ctx.cfg().t0, &WINDOW_SWEEP)
}

fn run_perturbed_derivative(ctx: &ScenarioContext, _tol: Option<f64>) -> Result<CheckReport> {
    let run = ctx.run()?;
    dissipation::perturbed_derivative_check(
        &run,
        ctx.measure(),
        ctx.pert(),
        ctx.cfg().t0,
        &WINDOW_SWEEP,
    )
}

fn run_reversal_fidelity(ctx: &ScenarioContext, tol: Option<f64>) -> Result<CheckReport> {
    if ctx.cfg().dimension != 1 {
        return Err(Error::InvalidParameter(
            "reversal_fidelity uses the exact 1D distance; higher dimensions are not supported"
                .into(),
        ));
    }
    let run = ctx.run()?;
    let params = ctx.backward_params();
    let states = backward_marginals(ctx.terminal()?, &run, &params, &[params.steps])?;
    let back = &states[0];
    let w2 = w2_1d(
        &Quantile1D64::from_samples(back.positions())?,
        &Quantile1D64::from_density(ctx.initial())?,
    );
    let def = find("reversal_fidelity").expect("registered");
    Ok(
        CheckReport::upper_bound(def.name, def.anchor, w2, tol.unwrap_or(0.05), 0.0)
            .with_detail("paths", back.n() as f64)
            .with_detail("reversed_steps", params.steps as f64),
    )
}

fn run_sde_pde_consistency(ctx: &ScenarioContext, tol: Option<f64>) -> Result<CheckReport> {
    let run = ctx.run()?;
    let p_end = run.last();
    let state = ctx.forward_final()?;
    let d = ctx.cfg().dimension;
    let (w2, method) = if d == 1 {
        let dist = w2_1d(
            &Quantile1D64::from_samples(state.positions())?,
            &Quantile1D64::from_density(p_end)?,
        );
        (dist, "quantile")
    } else {
        let hist = histogram_density(ctx.spec(), state.positions(), d, ctx.cfg().horizon)?;
        let (dist, _) = w2_entropic(
            &Cloud64::from_density(&hist)?,
            &Cloud64::from_density(p_end)?,
            SINKHORN_EPS,
        )?;
        (dist, "entropic")
    };
    let bound = tol.unwrap_or(if d == 1 { 0.05 } else { 0.08 });
    let def = find("sde_pde_consistency").expect("registered");
    Ok(
        CheckReport::upper_bound(def.name, def.anchor, w2, bound, 0.0)
            .with_detail("particles", state.n() as f64)
            .with_warning(format!("distance computed with the {method} solver")),
    )
}

fn run_stationarity(ctx: &ScenarioContext, tol: Option<f64>) -> Result<CheckReport> {
    let spec = ctx.spec();
    let pot = ctx.pot();
    let residual = fpe::stationary_residual(pot, spec)?;
    let p0 = GridDensity64::from_fn(spec.clone(), 0.0, true, |x| (-2.0 * pot.psi(x)).exp())?;
    let run = ctx.solve_from(&p0, None)?;
    let p_end = run.last();
    let drift = p_end
        .values()
        .iter()
        .zip(p0.values())
        .map(|(&a, &b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    let def = find("stationarity").expect("registered");
    Ok(
        CheckReport::upper_bound(def.name, def.anchor, drift, tol.unwrap_or(1e-4), 0.0)
            .with_detail("stationary_residual", residual)
            .with_detail("horizon", ctx.cfg().horizon)
            .and_require(
                residual < 1e-3,
                format!("discrete stationary defect {residual:.3e} is not below 1e-3"),
            ),
    )
}

fn run_steepest_descent(ctx: &ScenarioContext, _tol: Option<f64>) -> Result<CheckReport> {
    let run0 = ctx.run0()?;
    let t0 = ctx.cfg().t0;
    match ctx.pert() {
        Some(pert) => {
            let run_beta = ctx.run()?;
            steepest_descent_check(
                &run0,
                Some(&run_beta),
                ctx.measure(),
                Some(pert),
                t0,
                &WINDOW_SWEEP,
            )
        }
        None => steepest_descent_check(&run0, None, ctx.measure(), None, t0, &WINDOW_SWEEP),
    }
}

fn run_trajectorial_displacement(ctx: &ScenarioContext, _tol: Option<f64>) -> Result<CheckReport> {
    let run = ctx.run()?;
    let t_mid = ctx.snap_to_grid(0.5 * (ctx.cfg().t0 + ctx.cfg().horizon));
    trajectorial_displacement_streaming(
        ctx.terminal()?,
        &run,
        &ctx.backward_params(),
        t_mid,
        ctx.cfg().t0,
        DISPLACEMENT_BINS,
    )
}

fn run_trajectorial_rate(ctx: &ScenarioContext, _tol: Option<f64>) -> Result<CheckReport> {
    let run = ctx.run()?;
    trajectorial_rate_streaming(
        ctx.terminal()?,
        &run,
        &ctx.backward_params(),
        ctx.cfg().t0,
        &RATE_SWEEP,
        RATE_BINS,
    )
}
