//! Strict scenario configuration: TOML schema, validation with per-field
//! diagnostics, and resolution into the core model types.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use entflow_core::grid::GridSpec;
use entflow_core::model::{Perturbation, Potential};
use entflow_core::{container, GridDensity64, GridSpec64, Perturbation64, Potential64};

use crate::checks;
use crate::{CliError, CliResult};

/// Environment variable that overrides the configured output directory.
pub const OUTPUT_DIR_ENV: &str = "ENTFLOW_OUTPUT_DIR";

/// Raw scenario file. Every struct rejects unknown keys so that typos
/// surface as configuration errors instead of silently ignored settings.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Scenario name, echoed into the report.
    pub name: String,
    /// State-space dimension (1 or 2; every solver artifact lives on the grid).
    pub dimension: usize,
    /// Ensemble size for particle-based checks.
    pub n: usize,
    /// Particle time step; also the snapshot spacing of the density solver.
    pub dt: f64,
    /// Final time T of the run.
    pub horizon: f64,
    /// Activation/window anchor time t₀ (defaults to 0).
    #[serde(default)]
    pub t0: f64,
    /// Seed for every random artifact of the scenario.
    pub seed: u64,
    /// Output directory for report.json and CSV exports
    /// (overridden by `ENTFLOW_OUTPUT_DIR` when set).
    pub output: PathBuf,
    pub potential: PotentialConfig,
    #[serde(default)]
    pub perturbation: Option<PerturbationConfig>,
    pub initial: InitialConfig,
    pub grid: GridConfig,
    #[serde(default, rename = "check")]
    pub checks: Vec<CheckConfig>,
}

/// Potential selector: `kind = "quadratic"` takes `kappa`;
/// `kind = "double_well"` takes `a`, `b`, `growth`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialConfig {
    pub kind: String,
    pub kappa: Option<f64>,
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub growth: Option<f64>,
}

/// Compact bump-gradient drift perturbation; it activates strictly after
/// the scenario's `t0`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationConfig {
    pub amplitude: f64,
    pub support_radius: f64,
    pub center: Vec<f64>,
}

/// Initial density: either an isotropic Gaussian (`mean` + `variance`) or
/// a density container file (`file`), never both.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    pub mean: Option<Vec<f64>>,
    pub variance: Option<f64>,
    pub file: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub cells: Vec<usize>,
}

/// One selected check; `tolerance` is accepted only for checks whose bound
/// is tunable (see `list-checks`).
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckConfig {
    pub name: String,
    pub tolerance: Option<f64>,
}

/// Read and validate a scenario file, returning the raw config.
pub fn load(path: &Path) -> CliResult<ScenarioConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        CliError::Config(format!("cannot read configuration {}: {e}", path.display()))
    })?;
    let cfg: ScenarioConfig = toml::from_str(&text).map_err(|e| {
        CliError::Config(format!("configuration error in {}:\n{e}", path.display()))
    })?;
    let problems = validate(&cfg);
    if !problems.is_empty() {
        return Err(CliError::Config(format!(
            "invalid configuration {}:\n  - {}",
            path.display(),
            problems.join("\n  - ")
        )));
    }
    Ok(cfg)
}

/// Semantic validation with one message per offending field.
pub fn validate(cfg: &ScenarioConfig) -> Vec<String> {
    let mut bad = Vec::new();
    let d = cfg.dimension;

    if cfg.name.is_empty() {
        bad.push("name: must not be empty".into());
    }
    if d == 0 || d > 2 {
        bad.push(format!("dimension: must be 1 or 2, got {d}"));
    }
    if cfg.n == 0 {
        bad.push("n: ensemble size must be at least 1".into());
    }
    if !(cfg.dt > 0.0) {
        bad.push(format!("dt: must be positive, got {}", cfg.dt));
    }
    if !(cfg.horizon > 0.0) {
        bad.push(format!("horizon: must be positive, got {}", cfg.horizon));
    }
    if cfg.dt > 0.0 && cfg.horizon > 0.0 {
        if cfg.dt > cfg.horizon {
            bad.push(format!(
                "dt: time step {} exceeds the horizon {}",
                cfg.dt, cfg.horizon
            ));
        } else if !is_multiple(cfg.horizon, cfg.dt) {
            bad.push(format!(
                "horizon: {} is not an integer multiple of dt = {}",
                cfg.horizon, cfg.dt
            ));
        }
        if cfg.t0 < 0.0 || cfg.t0 > cfg.horizon {
            bad.push(format!(
                "t0: must lie in [0, horizon], got {}",
                cfg.t0
            ));
        } else if !is_multiple(cfg.t0, cfg.dt) {
            bad.push(format!(
                "t0: {} is not an integer multiple of dt = {}",
                cfg.t0, cfg.dt
            ));
        }
    }

    validate_potential(&cfg.potential, d, &mut bad);

    if let Some(p) = &cfg.perturbation {
        if p.center.len() != d {
            bad.push(format!(
                "perturbation.center: has {} coordinates for a {d}-dimensional scenario",
                p.center.len()
            ));
        }
        if !p.amplitude.is_finite() {
            bad.push(format!(
                "perturbation.amplitude: must be finite, got {}",
                p.amplitude
            ));
        }
        if !(p.support_radius > 0.0) {
            bad.push(format!(
                "perturbation.support_radius: must be positive, got {}",
                p.support_radius
            ));
        }
    }

    match (&cfg.initial.mean, cfg.initial.variance, &cfg.initial.file) {
        (Some(mean), Some(var), None) => {
            if mean.len() != d {
                bad.push(format!(
                    "initial.mean: has {} coordinates for a {d}-dimensional scenario",
                    mean.len()
                ));
            }
            if !(var > 0.0) {
                bad.push(format!("initial.variance: must be positive, got {var}"));
            }
        }
        (None, None, Some(_)) => {}
        _ => bad.push(
            "initial: set either `mean` and `variance`, or `file`, and not both".into(),
        ),
    }

    if cfg.grid.lo.len() != d || cfg.grid.hi.len() != d || cfg.grid.cells.len() != d {
        bad.push(format!(
            "grid: lo/hi/cells must each have {d} entries, got {}/{}/{}",
            cfg.grid.lo.len(),
            cfg.grid.hi.len(),
            cfg.grid.cells.len()
        ));
    } else {
        for a in 0..d {
            if !(cfg.grid.lo[a] < cfg.grid.hi[a]) {
                bad.push(format!(
                    "grid: axis {a} is empty (lo = {}, hi = {})",
                    cfg.grid.lo[a], cfg.grid.hi[a]
                ));
            }
            if cfg.grid.cells[a] < 16 {
                bad.push(format!(
                    "grid.cells: axis {a} needs at least 16 cells, got {}",
                    cfg.grid.cells[a]
                ));
            }
        }
    }

    if cfg.checks.is_empty() {
        bad.push("check: select at least one check (see `entflow list-checks`)".into());
    }
    let mut seen = std::collections::BTreeSet::new();
    for c in &cfg.checks {
        match checks::find(&c.name) {
            None => bad.push(format!(
                "check: unknown check `{}` (see `entflow list-checks`)",
                c.name
            )),
            Some(def) => {
                if !seen.insert(c.name.clone()) {
                    bad.push(format!("check: `{}` is selected twice", c.name));
                }
                if let Some(tol) = c.tolerance {
                    if !(tol > 0.0) {
                        bad.push(format!(
                            "check.{}.tolerance: must be positive, got {tol}",
                            c.name
                        ));
                    }
                    if !def.tunable {
                        bad.push(format!(
                            "check.{}: this check's bound is fixed and takes no tolerance",
                            c.name
                        ));
                    }
                }
                if def.needs_perturbation && cfg.perturbation.is_none() {
                    bad.push(format!(
                        "check.{}: requires a [perturbation] section",
                        c.name
                    ));
                }
            }
        }
    }

    bad
}

fn validate_potential(p: &PotentialConfig, dim: usize, bad: &mut Vec<String>) {
    match p.kind.as_str() {
        "quadratic" => {
            match p.kappa {
                Some(k) if k > 0.0 => {}
                Some(k) => bad.push(format!("potential.kappa: must be positive, got {k}")),
                None => bad.push("potential.kappa: required for kind = \"quadratic\"".into()),
            }
            for (key, v) in [("a", p.a), ("b", p.b), ("growth", p.growth)] {
                if v.is_some() {
                    bad.push(format!(
                        "potential.{key}: not a parameter of kind = \"quadratic\""
                    ));
                }
            }
        }
        "double_well" => {
            if dim != 1 {
                bad.push("potential: kind = \"double_well\" is one-dimensional".into());
            }
            for (key, v) in [("a", p.a), ("b", p.b), ("growth", p.growth)] {
                if v.is_none() {
                    bad.push(format!(
                        "potential.{key}: required for kind = \"double_well\""
                    ));
                }
            }
            if p.kappa.is_some() {
                bad.push("potential.kappa: not a parameter of kind = \"double_well\"".into());
            }
        }
        other => bad.push(format!(
            "potential.kind: must be \"quadratic\" or \"double_well\", got \"{other}\""
        )),
    }
}

/// True when `t` is a whole number of steps `dt` (up to rounding noise).
fn is_multiple(t: f64, dt: f64) -> bool {
    let k = (t / dt).round();
    (k * dt - t).abs() <= 1e-9 * t.abs().max(1.0)
}

/// Number of `dt` steps in `t`, assuming [`is_multiple`] held.
pub fn steps_in(t: f64, dt: f64) -> usize {
    (t / dt).round() as usize
}

/// A validated scenario resolved into core model objects.
pub struct ResolvedScenario {
    pub cfg: ScenarioConfig,
    pub pot: Potential64,
    pub pert: Option<Perturbation64>,
    pub spec: GridSpec64,
    pub initial: GridDensity64,
    /// Snapshot count over (0, horizon]; snapshots are spaced by `cfg.dt`.
    pub snapshots: usize,
    /// Output directory after applying the environment override.
    pub out_dir: PathBuf,
}

/// Build the core model objects from a validated config. Errors here are
/// still configuration problems (exit 2): they come from core constructor
/// preconditions or from an unreadable/incompatible initial-density file.
pub fn resolve(cfg: ScenarioConfig) -> CliResult<ResolvedScenario> {
    let cfg_err = |field: &str, e: entflow_core::Error| {
        CliError::Config(format!("invalid configuration: {field}: {e}"))
    };

    let pot: Potential64 = match cfg.potential.kind.as_str() {
        "quadratic" => Potential::quadratic(cfg.dimension, cfg.potential.kappa.unwrap())
            .map_err(|e| cfg_err("potential", e))?,
        "double_well" => Potential::double_well(
            cfg.potential.a.unwrap(),
            cfg.potential.b.unwrap(),
            cfg.potential.growth.unwrap(),
        )
        .map_err(|e| cfg_err("potential", e))?,
        other => unreachable!("validated potential kind {other}"),
    };

    let pert: Option<Perturbation64> = match &cfg.perturbation {
        None => None,
        Some(p) => Some(
            Perturbation::new(p.amplitude, p.support_radius, p.center.clone(), cfg.t0)
                .map_err(|e| cfg_err("perturbation", e))?,
        ),
    };

    let axes: Vec<(f64, f64, usize)> = (0..cfg.dimension)
        .map(|a| (cfg.grid.lo[a], cfg.grid.hi[a], cfg.grid.cells[a]))
        .collect();
    let spec: GridSpec64 = GridSpec::new(&axes).map_err(|e| cfg_err("grid", e))?;

    let initial = initial_density(&cfg, &spec)?;

    let out_dir = std::env::var_os(OUTPUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| cfg.output.clone());
    let snapshots = steps_in(cfg.horizon, cfg.dt);

    Ok(ResolvedScenario { cfg, pot, pert, spec, initial, snapshots, out_dir })
}

fn initial_density(cfg: &ScenarioConfig, spec: &GridSpec64) -> CliResult<GridDensity64> {
    if let Some(path) = &cfg.initial.file {
        let p: GridDensity64 = container::read_density(path).map_err(|e| {
            CliError::Config(format!(
                "invalid configuration: initial.file {}: {e}",
                path.display()
            ))
        })?;
        if p.spec() != spec {
            return Err(CliError::Config(format!(
                "invalid configuration: initial.file {}: its grid does not match [grid]",
                path.display()
            )));
        }
        if p.time() != 0.0 {
            return Err(CliError::Config(format!(
                "invalid configuration: initial.file {}: density is stamped t = {}, expected 0",
                path.display(),
                p.time()
            )));
        }
        return Ok(p);
    }
    let mean = cfg.initial.mean.clone().unwrap();
    let var = cfg.initial.variance.unwrap();
    GridDensity64::from_fn(spec.clone(), 0.0, true, move |x| {
        let q: f64 = x
            .iter()
            .zip(&mean)
            .map(|(&xi, &mi)| (xi - mi) * (xi - mi))
            .sum();
        (-0.5 * q / var).exp()
    })
    .map_err(|e| CliError::Config(format!("invalid configuration: initial: {e}")))
}
