//! Scenario execution: one context caches every artifact the selected
//! checks share (density evolutions, entropy series, ensembles, recorded
//! path bundles), the runner executes checks in name order, and the
//! results land in `report.json` plus CSV exports.

use std::cell::OnceCell;
use std::path::Path;
use std::rc::Rc;
use std::time::Instant;

use entflow_core::entropy::{entropy_series, EntropyReport};
use entflow_core::fpe::{solve_fpe, stable_dt, FpeRun};
use entflow_core::model::ReferenceMeasure;
use entflow_core::reversal::{sample_from_density, BackwardParams};
use entflow_core::simulate::{
    sample_gaussian_ensemble, second_moment_series, simulate_forward, simulate_forward_recorded,
    MomentSeries, SimParams,
};
use entflow_core::{
    container, EnsembleState64, GridDensity64, GridSpec64, PathBundle64, Perturbation64,
    Potential64, ReferenceMeasure64, Result, RunReport, Scalar,
};

use crate::checks;
use crate::config::{ResolvedScenario, ScenarioConfig};
use crate::{CliError, CliResult};

/// Ensemble cap for materialized path bundles (their memory is
/// `n·steps·d·2` doubles; statistics at this size already resolve the
/// Brownian nulls and the change-of-measure envelope decisively).
const BUNDLE_PATH_CAP: usize = 30_000;
const COUPLED_PATH_CAP: usize = 20_000;
/// Step cap for materialized path bundles.
const BUNDLE_STEP_CAP: usize = 250;

/// Seed offsets keeping the scenario's random artifacts decorrelated
/// while remaining a pure function of the configured seed.
const SEED_INITIAL: u64 = 0;
const SEED_TERMINAL: u64 = 1;
const SEED_BACKWARD: u64 = 2;
const SEED_BUNDLE: u64 = 3;
const SEED_COUPLED: u64 = 4;

/// Cached artifacts of one scenario run. Checks request what they need;
/// anything computed once is reused by later checks in the same run.
pub struct ScenarioContext {
    scenario: ResolvedScenario,
    measure: ReferenceMeasure64,
    solver_dt: Scalar,
    substeps: usize,
    run: OnceCell<Rc<FpeRun<Scalar>>>,
    run0: OnceCell<Rc<FpeRun<Scalar>>>,
    entropy: OnceCell<EntropyReport<Scalar>>,
    entropy0: OnceCell<EntropyReport<Scalar>>,
    initial_ensemble: OnceCell<EnsembleState64>,
    terminal: OnceCell<EnsembleState64>,
    forward_final: OnceCell<EnsembleState64>,
    forward_bundle: OnceCell<PathBundle64>,
    coupled: OnceCell<(PathBundle64, PathBundle64)>,
    moments: OnceCell<MomentSeries<Scalar>>,
}

fn cached<'s, T>(
    slot: &'s OnceCell<T>,
    make: impl FnOnce() -> Result<T>,
) -> Result<&'s T> {
    if slot.get().is_none() {
        let value = make()?;
        let _ = slot.set(value);
    }
    Ok(slot.get().expect("slot was just filled"))
}

impl ScenarioContext {
    pub fn new(scenario: ResolvedScenario) -> Self {
        let measure = ReferenceMeasure::new(scenario.pot.clone());
        let stable = stable_dt(&scenario.spec, &scenario.pot, scenario.pert.as_ref());
        let mut substeps = (scenario.cfg.dt / stable).ceil().max(1.0) as usize;
        if scenario.cfg.dt / substeps as f64 > stable {
            substeps += 1;
        }
        let solver_dt = scenario.cfg.dt / substeps as f64;
        Self {
            scenario,
            measure,
            solver_dt,
            substeps,
            run: OnceCell::new(),
            run0: OnceCell::new(),
            entropy: OnceCell::new(),
            entropy0: OnceCell::new(),
            initial_ensemble: OnceCell::new(),
            terminal: OnceCell::new(),
            forward_final: OnceCell::new(),
            forward_bundle: OnceCell::new(),
            coupled: OnceCell::new(),
            moments: OnceCell::new(),
        }
    }

    pub fn cfg(&self) -> &ScenarioConfig {
        &self.scenario.cfg
    }

    pub fn pot(&self) -> &Potential64 {
        &self.scenario.pot
    }

    pub fn pert(&self) -> Option<&Perturbation64> {
        self.scenario.pert.as_ref()
    }

    pub fn spec(&self) -> &GridSpec64 {
        &self.scenario.spec
    }

    pub fn initial(&self) -> &GridDensity64 {
        &self.scenario.initial
    }

    pub fn measure(&self) -> &ReferenceMeasure64 {
        &self.measure
    }

    /// Nearest snapshot time to `t` on the `dt` grid.
    pub fn snap_to_grid(&self, t: f64) -> f64 {
        (t / self.cfg().dt).round() * self.cfg().dt
    }

    /// Evolve a density over the full horizon with the scenario's solver
    /// plan (sub-stepped under the stability bound, one snapshot per `dt`).
    pub fn solve_from(
        &self,
        p0: &GridDensity64,
        pert: Option<&Perturbation64>,
    ) -> Result<FpeRun<Scalar>> {
        solve_fpe(
            p0,
            self.pot(),
            pert,
            self.solver_dt,
            self.substeps * self.scenario.snapshots,
            self.substeps,
        )
    }

    /// Density evolution with the configured perturbation (if any).
    pub fn run(&self) -> Result<Rc<FpeRun<Scalar>>> {
        if self.run.get().is_none() {
            let run = self.solve_from(self.initial(), self.pert())?;
            let _ = self.run.set(Rc::new(run));
        }
        Ok(Rc::clone(self.run.get().expect("slot was just filled")))
    }

    /// Unperturbed density evolution from the same initial density.
    pub fn run0(&self) -> Result<Rc<FpeRun<Scalar>>> {
        if self.pert().is_none() {
            return self.run();
        }
        if self.run0.get().is_none() {
            let run = self.solve_from(self.initial(), None)?;
            let _ = self.run0.set(Rc::new(run));
        }
        Ok(Rc::clone(self.run0.get().expect("slot was just filled")))
    }

    /// Entropy and Fisher-information series along [`Self::run`].
    pub fn entropy(&self) -> Result<&EntropyReport<Scalar>> {
        let run = self.run()?;
        cached(&self.entropy, || entropy_series(&run, &self.measure))
    }

    /// Entropy and Fisher-information series along [`Self::run0`].
    pub fn entropy0(&self) -> Result<&EntropyReport<Scalar>> {
        let run = self.run0()?;
        cached(&self.entropy0, || entropy_series(&run, &self.measure))
    }

    fn sample_initial(&self, n: usize, seed: u64) -> Result<EnsembleState64> {
        match (&self.cfg().initial.mean, self.cfg().initial.variance) {
            (Some(mean), Some(var)) => sample_gaussian_ensemble(n, mean, var, seed),
            _ => sample_from_density(self.initial(), n, seed),
        }
    }

    /// Particle ensemble drawn from the initial density.
    pub fn initial_ensemble(&self) -> Result<&EnsembleState64> {
        cached(&self.initial_ensemble, || {
            self.sample_initial(self.cfg().n, self.cfg().seed.wrapping_add(SEED_INITIAL))
        })
    }

    /// Ensemble drawn from the final density snapshot; the starting point
    /// of every reversed-time walk.
    pub fn terminal(&self) -> Result<&EnsembleState64> {
        let run = self.run()?;
        cached(&self.terminal, || {
            sample_from_density(
                run.last(),
                self.cfg().n,
                self.cfg().seed.wrapping_add(SEED_TERMINAL),
            )
        })
    }

    /// Parameters of the reversed-time walk over the full horizon.
    pub fn backward_params(&self) -> BackwardParams<'_, Scalar> {
        BackwardParams {
            pot: self.pot(),
            pert: self.pert(),
            dt: self.cfg().dt,
            steps: self.scenario.snapshots,
            seed: self.cfg().seed.wrapping_add(SEED_BACKWARD),
        }
    }

    /// Forward ensemble advanced to the horizon (full configured size).
    pub fn forward_final(&self) -> Result<&EnsembleState64> {
        cached(&self.forward_final, || {
            let params = SimParams {
                pot: self.pot(),
                pert: self.pert(),
                dt: self.cfg().dt,
                steps: self.scenario.snapshots,
            };
            simulate_forward(self.initial_ensemble()?, &params)
        })
    }

    /// Recorded forward trajectories (capped size) for reconstruction tests.
    pub fn forward_bundle(&self) -> Result<&PathBundle64> {
        cached(&self.forward_bundle, || {
            let n = self.cfg().n.min(BUNDLE_PATH_CAP);
            let steps = self.scenario.snapshots.min(BUNDLE_STEP_CAP);
            let start = self.sample_initial(n, self.cfg().seed.wrapping_add(SEED_BUNDLE))?;
            let params = SimParams {
                pot: self.pot(),
                pert: self.pert(),
                dt: self.cfg().dt,
                steps,
            };
            Ok(simulate_forward_recorded(&start, &params)?.1)
        })
    }

    /// A pair of recorded runs driven by the same noise, one without and
    /// one with the perturbation.
    pub fn coupled_bundles(&self) -> Result<(&PathBundle64, &PathBundle64)> {
        let pair = cached(&self.coupled, || {
            let n = self.cfg().n.min(COUPLED_PATH_CAP);
            let steps = self.scenario.snapshots.min(BUNDLE_STEP_CAP);
            let start = self.sample_initial(n, self.cfg().seed.wrapping_add(SEED_COUPLED))?;
            let plain = SimParams { pot: self.pot(), pert: None, dt: self.cfg().dt, steps };
            let pushed = SimParams {
                pot: self.pot(),
                pert: self.pert(),
                dt: self.cfg().dt,
                steps,
            };
            let bundle0 = simulate_forward_recorded(&start, &plain)?.1;
            let bundle_beta = simulate_forward_recorded(&start, &pushed)?.1;
            Ok((bundle0, bundle_beta))
        })?;
        Ok((&pair.0, &pair.1))
    }

    /// Second-moment series of the forward ensemble.
    pub fn moments(&self) -> Result<&MomentSeries<Scalar>> {
        cached(&self.moments, || {
            let params = SimParams {
                pot: self.pot(),
                pert: self.pert(),
                dt: self.cfg().dt,
                steps: self.scenario.snapshots,
            };
            Ok(second_moment_series(self.initial_ensemble()?, &params)?.1)
        })
    }
}

/// Run the selected checks of a resolved scenario and write its artifacts.
/// `only` restricts execution to a subset of the configured checks.
pub fn run_scenario(
    scenario: ResolvedScenario,
    only: Option<&[String]>,
) -> CliResult<RunReport> {
    let mut selected: Vec<(String, Option<f64>)> = Vec::new();
    match only {
        None => {
            for c in &scenario.cfg.checks {
                selected.push((c.name.clone(), c.tolerance));
            }
        }
        Some(names) => {
            for name in names {
                match scenario.cfg.checks.iter().find(|c| &c.name == name) {
                    Some(c) => selected.push((c.name.clone(), c.tolerance)),
                    None => {
                        return Err(CliError::Config(format!(
                            "--only: check `{name}` is not selected by scenario `{}`",
                            scenario.cfg.name
                        )))
                    }
                }
            }
        }
    }
    selected.sort_by(|a, b| a.0.cmp(&b.0));
    selected.dedup_by(|a, b| a.0 == b.0);

    let out_dir = scenario.out_dir.clone();
    let ctx = ScenarioContext::new(scenario);
    let mut report = RunReport::new(ctx.cfg().name.clone(), ctx.cfg().seed);

    for (name, tolerance) in &selected {
        let def = checks::find(name).expect("selection was validated");
        let start = Instant::now();
        let check = def.run(&ctx, *tolerance)?;
        report
            .timings
            .insert(name.clone(), start.elapsed().as_secs_f64());
        report.checks.push(check);
    }

    write_artifacts(&ctx, &report, &out_dir)?;
    Ok(report)
}

fn write_artifacts(ctx: &ScenarioContext, report: &RunReport, out_dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Runtime(entflow_core::Error::Io(e)))?;
    std::fs::write(out_dir.join("report.json"), report.to_json_pretty())
        .map_err(|e| CliError::Runtime(entflow_core::Error::Io(e)))?;

    let series = ctx.entropy()?;
    container::write_entropy_csv(out_dir.join("entropy.csv"), series)?;
    container::write_entropy_json(out_dir.join("entropy.json"), &ctx.cfg().name, series)?;
    if let Ok(p) = ctx.run() {
        container::write_density_csv(out_dir.join("density_final.csv"), p.last())?;
    }
    if let Some(moments) = ctx.moments.get() {
        container::write_moments_csv(out_dir.join("moments.csv"), moments)?;
    }
    Ok(())
}

/// Stable, sorted listing of every registered check: name, one-line
/// description, and the identity it exercises.
pub fn list_checks() -> String {
    let mut out = String::new();
    for def in checks::REGISTRY {
        let mut flags = Vec::new();
        if def.tunable {
            flags.push("tolerance tunable");
        }
        if def.needs_perturbation {
            flags.push("needs perturbation");
        }
        let suffix = if flags.is_empty() {
            String::new()
        } else {
            format!(" [{}]", flags.join(", "))
        };
        out.push_str(&format!("{}  {}{}\n", def.name, def.summary, suffix));
        out.push_str(&format!("    identity: {}\n", def.anchor));
    }
    out
}
