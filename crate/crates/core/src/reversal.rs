//! Time reversal of the simulated diffusion.
//!
//! Given a recorded density evolution, the diffusion can be run backwards:
//! the reversed process `X̄_t = X_{T−t}` solves an SDE whose drift is the
//! score of the forward marginal plus the confining drift (plus the bump
//! field while it is switched on),
//!
//! ```text
//!   dX̄_t = [∇log p_{T−t}(X̄_t) + ∇ψ(X̄_t) + β(X̄_t)·1_{t < T−t₀}] dt + dW̄_t,
//! ```
//!
//! with `W̄` a Brownian motion for the reversed filtration. Along reversed
//! paths the log-ratio `𝓡 = log(p/q)` decomposes into a drift part and a
//! backward martingale,
//!
//! ```text
//!   d𝓡(X̄_t) = [½‖∇𝓡‖² + (2β·∇ψ − ∇·β)·1] dt + ∇𝓡·dW̄_t,
//! ```
//!
//! which is what makes entropy dissipation a pathwise statement rather than
//! only an averaged one. This module provides the backward sampler, the
//! reconstruction of `W̄` from recorded forward paths, the per-step ledger of
//! the decomposition, and the statistical checks built on it (martingale
//! orthogonality and isometry, binned displacement and shrinking-window rate
//! identities).
//!
//! Scale note: the ledger type stores per-path per-step arrays and is meant
//! for moderate ensembles. Every check built on it also has a streaming
//! variant that walks backward paths block by block and keeps only per-path
//! summary scalars, so million-path runs need memory proportional to the
//! path count, not to paths × steps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fpe::FpeRun;
use crate::grid::{log_field, score_field, GridDensity, InterpField};
use crate::model::{Perturbation, Potential};
use crate::real::Real;
use crate::report::CheckReport;
use crate::simulate::{EnsembleState, PathBundle, PathVisitor, BLOWUP_LIMIT};
use crate::stats::{collect_blocks, compensated_sum, par_block_map, EqualMassBins};

/// Particles advanced per parallel work item.
const BLOCK: usize = 4096;

/// Default equal-mass bin count for the conditional displacement check.
const DISPLACEMENT_BINS: usize = 64;

/// Default equal-mass bin count for the shrinking-window rate check. The
/// window quotient has conditional variance ~ ‖∇𝓡‖²/δ, so coarser bins are
/// needed to keep the Monte Carlo floor below the identity's tolerance.
const RATE_BINS: usize = 8;

/// Bins holding fewer paths than this are excluded from binned checks.
const MIN_BIN_PATHS: usize = 30;

/// Paths required before the martingale regression is meaningful.
const MIN_MARTINGALE_PATHS: usize = 10_000;

/// Half-width of the central window over which the displacement check is
/// scored (bins whose mean coordinate falls outside are reported only).
const CENTRAL_HALF_WIDTH: f64 = 2.0;

/// Interpolants built from one forward snapshot, used at one reversed step.
struct StepFields<R: Real> {
    log_p: InterpField<R>,
    score: InterpField<R>,
    forward_time: R,
}

/// Per-step data shared by the backward sampler and the ledger kernel:
/// snapshot interpolants indexed by reversed step and the perturbation
/// activity of each step (evaluated at the reversed-left endpoint, i.e. the
/// later forward instant, mirroring the left-endpoint rule of the forward
/// scheme).
struct BackwardContext<R: Real> {
    fields: Vec<StepFields<R>>,
    active: Vec<bool>,
    /// Forward time of the last snapshot — reversed clock zero.
    t_end: R,
}

/// Step size, reversed horizon, and noise seed of a backward integration.
/// The seed drives per-particle counter streams independent of any forward
/// simulation; pass a seed distinct from the one used to draw the terminal
/// ensemble.
#[derive(Clone, Copy)]
pub struct BackwardParams<'a, R: Real> {
    pub pot: &'a Potential<R>,
    pub pert: Option<&'a Perturbation<R>>,
    pub dt: R,
    pub steps: usize,
    pub seed: u64,
}

/// Integer number of snapshot spacings per backward step.
fn snapshot_stride<R: Real>(run: &FpeRun<R>, dt: R) -> Result<usize> {
    let sdt = run.snapshot_dt();
    if !(dt > R::zero()) {
        return Err(Error::InvalidParameter(format!(
            "backward step must be positive, got {dt}"
        )));
    }
    let ratio = dt / sdt;
    let m = ratio.round();
    if m < R::one() || (ratio - m).abs() > R::of(1e-9) * ratio.max(R::one()) {
        return Err(Error::InvalidParameter(format!(
            "backward step {dt} must be a positive integer multiple of the snapshot spacing {sdt}"
        )));
    }
    Ok(m.to_f64_lossy() as usize)
}

fn backward_context<R: Real>(
    run: &FpeRun<R>,
    pert: Option<&Perturbation<R>>,
    dt: R,
    steps: usize,
) -> Result<BackwardContext<R>> {
    if steps == 0 {
        return Err(Error::InvalidParameter("step count must be positive".into()));
    }
    let m = snapshot_stride(run, dt)?;
    let last = run.snapshots().len() - 1;
    if steps * m > last {
        return Err(Error::InvalidParameter(format!(
            "reversing {steps} steps of {dt} reaches past the earliest recorded forward time"
        )));
    }
    let fields: Vec<StepFields<R>> = (0..=steps)
        .map(|j| {
            let snap = run.snapshot(last - j * m);
            StepFields {
                log_p: log_field(snap),
                score: score_field(snap),
                forward_time: snap.time(),
            }
        })
        .collect();
    let active: Vec<bool> = (0..steps)
        .map(|j| pert.is_some_and(|p| p.active(fields[j].forward_time)))
        .collect();
    Ok(BackwardContext { active, t_end: fields[0].forward_time, fields })
}

fn check_backward_dims<R: Real>(
    d: usize,
    run: &FpeRun<R>,
    pot: &Potential<R>,
    pert: Option<&Perturbation<R>>,
) -> Result<()> {
    if run.snapshot(0).spec().dim() != d {
        return Err(Error::ShapeMismatch(format!(
            "recorded density dimension {} does not match state dimension {d}",
            run.snapshot(0).spec().dim()
        )));
    }
    if pot.dim() != d {
        return Err(Error::ShapeMismatch(format!(
            "potential dimension {} does not match state dimension {d}",
            pot.dim()
        )));
    }
    if let Some(p) = pert {
        if p.dim() != d {
            return Err(Error::ShapeMismatch(format!(
                "perturbation dimension {} does not match state dimension {d}",
                p.dim()
            )));
        }
    }
    Ok(())
}

/// Euler–Maruyama integration of the reversed SDE, streaming each completed
/// path through `visitor`. The terminal ensemble must sit at the last
/// recorded forward time; the returned state carries the forward time
/// reached after `steps` reversed steps.
fn backward_engine<R: Real, V: PathVisitor<R>>(
    terminal: &EnsembleState<R>,
    ctx: &BackwardContext<R>,
    params: &BackwardParams<R>,
    visitor: &V,
) -> Result<(EnsembleState<R>, V::Acc)> {
    let d = terminal.dim();
    let n = terminal.n();
    let steps = params.steps;
    let dt = params.dt;
    let sqrt_dt = dt.sqrt();
    let limit = R::of(BLOWUP_LIMIT);
    let blocks = par_block_map(n, BLOCK, |_, range| -> Result<(Vec<R>, V::Acc)> {
        let mut finals = Vec::with_capacity(range.len() * d);
        let mut acc = visitor.new_acc();
        let mut path = vec![R::zero(); (steps + 1) * d];
        let mut noise = vec![R::zero(); steps * d];
        let mut drift = vec![R::zero(); d];
        let mut score = vec![R::zero(); d];
        for i in range {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            rng.set_stream(i as u64);
            path[..d].copy_from_slice(terminal.position(i));
            for j in 0..steps {
                let (cur, rest) = path[j * d..].split_at_mut(d);
                let next = &mut rest[..d];
                ctx.fields[j].score.eval(cur, &mut score)?;
                params.pot.grad(cur, &mut drift);
                if ctx.active[j] {
                    params
                        .pert
                        .expect("active step implies a perturbation")
                        .add_beta(cur, &mut drift);
                }
                for a in 0..d {
                    let dw = sqrt_dt * R::standard_normal(&mut rng);
                    noise[j * d + a] = dw;
                    let x = cur[a] + (score[a] + drift[a]) * dt + dw;
                    if !(x.abs() <= limit) {
                        return Err(Error::BlowUp {
                            particle: i,
                            step: j,
                            magnitude: x.to_f64_lossy(),
                        });
                    }
                    next[a] = x;
                }
            }
            visitor.visit(&mut acc, i, &path, &noise)?;
            finals.extend_from_slice(&path[steps * d..]);
        }
        Ok((finals, acc))
    });
    let blocks = collect_blocks(blocks)?;

    let mut positions = Vec::with_capacity(n * d);
    let mut merged: Option<V::Acc> = None;
    for (finals, acc) in blocks {
        positions.extend_from_slice(&finals);
        merged = Some(match merged.take() {
            None => acc,
            Some(m) => visitor.merge(m, acc)?,
        });
    }
    let mut state =
        EnsembleState::from_positions(positions, d, ctx.fields[steps].forward_time, params.seed)?;
    state.set_draw_counters(vec![(steps * d) as u64; n]);
    Ok((state, merged.expect("at least one block")))
}

fn prepare_backward<R: Real>(
    terminal: &EnsembleState<R>,
    run: &FpeRun<R>,
    params: &BackwardParams<R>,
) -> Result<BackwardContext<R>> {
    check_backward_dims(terminal.dim(), run, params.pot, params.pert)?;
    let ctx = backward_context(run, params.pert, params.dt, params.steps)?;
    if (terminal.time() - ctx.t_end).abs() > run.snapshot_dt() * R::of(1e-6) {
        return Err(Error::InvalidParameter(format!(
            "terminal ensemble time {} does not match the last recorded forward time {}",
            terminal.time(),
            ctx.t_end
        )));
    }
    Ok(ctx)
}

/// Run the reversed SDE and stream every trajectory through `visitor`.
/// Paths are laid out exactly as in the forward engine ((steps+1)·d
/// positions, steps·d noise increments), but on the reversed clock: entry 0
/// is the terminal state and the noise increments are those of `W̄`.
pub fn visit_backward_paths<R: Real, V: PathVisitor<R>>(
    terminal: &EnsembleState<R>,
    run: &FpeRun<R>,
    params: &BackwardParams<R>,
    visitor: &V,
) -> Result<(EnsembleState<R>, V::Acc)> {
    let ctx = prepare_backward(terminal, run, params)?;
    backward_engine(terminal, &ctx, params, visitor)
}

struct NullVisitor;

impl<R: Real> PathVisitor<R> for NullVisitor {
    type Acc = ();
    fn new_acc(&self) {}
    fn visit(&self, _: &mut (), _: usize, _: &[R], _: &[R]) -> Result<()> {
        Ok(())
    }
    fn merge(&self, _: (), _: ()) -> Result<()> {
        Ok(())
    }
}

struct BundleCollector {
    dim: usize,
}

impl<R: Real> PathVisitor<R> for BundleCollector {
    type Acc = (Vec<R>, Vec<R>);
    fn new_acc(&self) -> Self::Acc {
        (Vec::new(), Vec::new())
    }
    fn visit(&self, acc: &mut Self::Acc, _: usize, path: &[R], noise: &[R]) -> Result<()> {
        debug_assert_eq!(path.len() % self.dim, 0);
        acc.0.extend_from_slice(path);
        acc.1.extend_from_slice(noise);
        Ok(())
    }
    fn merge(&self, mut a: Self::Acc, b: Self::Acc) -> Result<Self::Acc> {
        a.0.extend_from_slice(&b.0);
        a.1.extend_from_slice(&b.1);
        Ok(a)
    }
}

/// Visitor recording the ensemble positions at selected reversed steps.
struct MarginalRecorder<'a> {
    record: &'a [usize],
    dim: usize,
}

impl<R: Real> PathVisitor<R> for MarginalRecorder<'_> {
    type Acc = Vec<Vec<R>>;
    fn new_acc(&self) -> Self::Acc {
        vec![Vec::new(); self.record.len()]
    }
    fn visit(&self, acc: &mut Self::Acc, _: usize, path: &[R], _: &[R]) -> Result<()> {
        for (slot, &j) in self.record.iter().enumerate() {
            acc[slot].extend_from_slice(&path[j * self.dim..(j + 1) * self.dim]);
        }
        Ok(())
    }
    fn merge(&self, mut a: Self::Acc, b: Self::Acc) -> Result<Self::Acc> {
        for (slot, part) in b.into_iter().enumerate() {
            a[slot].extend_from_slice(&part);
        }
        Ok(a)
    }
}

/// Simulate the reversed SDE from `terminal` and record full trajectories.
/// The bundle lives on the reversed clock (start time 0); its noise
/// increments are the reversed Brownian increments that drove the paths.
pub fn simulate_backward<R: Real>(
    terminal: &EnsembleState<R>,
    run: &FpeRun<R>,
    params: &BackwardParams<R>,
) -> Result<PathBundle<R>> {
    let d = terminal.dim();
    let (_, (states, noise)) =
        visit_backward_paths(terminal, run, params, &BundleCollector { dim: d })?;
    PathBundle::from_raw(d, params.steps, params.dt, R::zero(), params.seed, states, noise)
}

/// Final ensemble of the reversed SDE without storing trajectories. The
/// returned state sits at forward time `T − steps·dt`.
pub fn backward_marginal<R: Real>(
    terminal: &EnsembleState<R>,
    run: &FpeRun<R>,
    params: &BackwardParams<R>,
) -> Result<EnsembleState<R>> {
    Ok(visit_backward_paths(terminal, run, params, &NullVisitor)?.0)
}

/// Ensembles of the reversed SDE at the requested reversed steps (strictly
/// increasing indices ≤ `steps`), each carrying its forward time. Memory is
/// one position buffer per requested step, independent of `steps`.
pub fn backward_marginals<R: Real>(
    terminal: &EnsembleState<R>,
    run: &FpeRun<R>,
    params: &BackwardParams<R>,
    record: &[usize],
) -> Result<Vec<EnsembleState<R>>> {
    if record.is_empty() {
        return Err(Error::EmptyInput("no reversed steps requested".into()));
    }
    if record.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidParameter(
            "recorded reversed steps must be strictly increasing".into(),
        ));
    }
    if *record.last().expect("nonempty") > params.steps {
        return Err(Error::InvalidParameter(format!(
            "recorded reversed step {} exceeds the horizon {}",
            record.last().expect("nonempty"),
            params.steps
        )));
    }
    let ctx = prepare_backward(terminal, run, params)?;
    let d = terminal.dim();
    let recorder = MarginalRecorder { record, dim: d };
    let (_, slots) = backward_engine(terminal, &ctx, params, &recorder)?;
    record
        .iter()
        .zip(slots)
        .map(|(&j, positions)| {
            EnsembleState::from_positions(positions, d, ctx.fields[j].forward_time, params.seed)
        })
        .collect()
}

/// Draw `n` points from a grid density: cells by inverse CDF of the cell
/// masses, then uniformly within each cell. The state carries the density's
/// time stamp; drive any subsequent simulation with a different seed.
pub fn sample_from_density<R: Real>(
    p: &GridDensity<R>,
    n: usize,
    seed: u64,
) -> Result<EnsembleState<R>> {
    if n == 0 {
        return Err(Error::EmptyInput("sample size must be positive".into()));
    }
    let spec = p.spec();
    let d = spec.dim();
    let vol = spec.cell_volume();
    let mut cum = Vec::with_capacity(spec.n_cells());
    let mut acc = R::zero();
    for &v in p.values() {
        acc = acc + v.max(R::zero()) * vol;
        cum.push(acc);
    }
    let total = acc;
    if !(total > R::zero()) {
        return Err(Error::EmptyInput("density has no positive mass".into()));
    }
    let blocks = par_block_map(n, BLOCK, |_, range| {
        let mut out = Vec::with_capacity(range.len() * d);
        let mut center = [R::zero(); 2];
        for i in range {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let u = R::of(rng.gen::<f64>()) * total;
            let flat = cum.partition_point(|&c| c < u).min(cum.len() - 1);
            p.spec().center(flat, &mut center[..d]);
            for a in 0..d {
                let shift = R::of(rng.gen::<f64>() - 0.5);
                out.push(center[a] + shift * spec.dx(a));
            }
        }
        out
    });
    EnsembleState::from_positions(blocks.concat(), d, p.time(), seed)
}

/// Whether the score correction enters the reconstruction of the reversed
/// Brownian increments. `Omitted` yields the sign-flipped forward noise — a
/// diagnostic variant demonstrating that the terminal-independence test has
/// the power to detect the missing correction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreCorrection {
    Applied,
    Omitted,
}

/// Reversed Brownian increments reconstructed from recorded forward paths,
/// path-major: entry `(i, j)` is the increment of `W̄` over reversed step `j`
/// of path `i`.
pub struct BackwardIncrements<R: Real> {
    dim: usize,
    steps: usize,
    dt: R,
    values: Vec<R>,
}

impl<R: Real> BackwardIncrements<R> {
    pub fn n(&self) -> usize {
        self.values.len() / (self.steps * self.dim)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> R {
        self.dt
    }

    /// Increment of reversed step `j` along path `i`.
    pub fn increment(&self, i: usize, j: usize) -> &[R] {
        let base = (i * self.steps + j) * self.dim;
        &self.values[base..base + self.dim]
    }

    pub fn values(&self) -> &[R] {
        &self.values
    }
}

/// Reconstruct the reversed Brownian increments along recorded forward
/// paths and test that they behave as Brownian noise for the reversed
/// filtration: per-step variance `≈ dt`, vanishing lag-one correlation, and
/// no correlation with the terminal state. Each statistic is a z-score and
/// the check passes when the worst |z| stays below five.
pub fn reconstruct_backward_brownian<R: Real>(
    bundle: &PathBundle<R>,
    run: &FpeRun<R>,
) -> Result<(BackwardIncrements<R>, CheckReport)> {
    reconstruct_backward_brownian_with(bundle, run, ScoreCorrection::Applied)
}

/// As [`reconstruct_backward_brownian`], with the score correction made
/// explicit so the negative control (omitted correction) can be exercised.
pub fn reconstruct_backward_brownian_with<R: Real>(
    bundle: &PathBundle<R>,
    run: &FpeRun<R>,
    correction: ScoreCorrection,
) -> Result<(BackwardIncrements<R>, CheckReport)> {
    let d = bundle.dim();
    let n = bundle.n();
    let steps = bundle.steps();
    if n < 2 {
        return Err(Error::InsufficientSamples {
            need: 2,
            got: n,
            context: "backward increment reconstruction",
        });
    }
    if steps < 2 {
        return Err(Error::InvalidParameter(
            "the reconstruction tests need at least two steps".into(),
        ));
    }
    if run.snapshot(0).spec().dim() != d {
        return Err(Error::ShapeMismatch(format!(
            "recorded density dimension {} does not match path dimension {d}",
            run.snapshot(0).spec().dim()
        )));
    }
    let m = snapshot_stride(run, bundle.dt())?;
    let k1 = run.index_at_time(bundle.time(1))?;
    run.index_at_time(bundle.time(steps))?;
    // Score of the forward marginal at the later endpoint of forward step k,
    // i.e. at the reversed-left endpoint of the matching reversed step.
    let scores: Vec<InterpField<R>> =
        (0..steps).map(|k| score_field(run.snapshot(k1 + k * m))).collect();
    let dt = bundle.dt();

    let blocks = par_block_map(n, BLOCK, |_, range| -> Result<Vec<R>> {
        let mut out = Vec::with_capacity(range.len() * steps * d);
        let mut s = vec![R::zero(); d];
        for i in range {
            for j in 0..steps {
                let k = steps - 1 - j;
                match correction {
                    ScoreCorrection::Applied => {
                        scores[k].eval(bundle.position(i, k + 1), &mut s)?;
                    }
                    ScoreCorrection::Omitted => s.fill(R::zero()),
                }
                let dw = bundle.noise_increment(i, k);
                for a in 0..d {
                    out.push(-dw[a] - s[a] * dt);
                }
            }
        }
        Ok(out)
    });
    let values = collect_blocks(blocks)?.concat();
    let increments = BackwardIncrements { dim: d, steps, dt, values };
    let report = brownian_increment_report(&increments, bundle, correction);
    Ok((increments, report))
}

fn brownian_increment_report<R: Real>(
    inc: &BackwardIncrements<R>,
    bundle: &PathBundle<R>,
    correction: ScoreCorrection,
) -> CheckReport {
    let d = inc.dim;
    let n = inc.n();
    let steps = inc.steps;
    let cols = steps * d;
    let nf = R::of(n as f64);
    let dt = inc.dt;

    // Column means, then variances and the covariances entering the lag-one
    // and terminal-correlation statistics.
    let mut mean = vec![R::zero(); cols];
    for i in 0..n {
        let row = &inc.values[i * cols..(i + 1) * cols];
        for (m, &v) in mean.iter_mut().zip(row) {
            *m = *m + v;
        }
    }
    for m in &mut mean {
        *m = *m / nf;
    }
    let mut term_mean = vec![R::zero(); d];
    for i in 0..n {
        for (m, &v) in term_mean.iter_mut().zip(bundle.position(i, steps)) {
            *m = *m + v;
        }
    }
    for m in &mut term_mean {
        *m = *m / nf;
    }

    let mut var = vec![R::zero(); cols];
    let mut lag = vec![R::zero(); cols.saturating_sub(d)];
    let mut term_cov = vec![R::zero(); cols];
    let mut term_var = vec![R::zero(); d];
    for i in 0..n {
        let row = &inc.values[i * cols..(i + 1) * cols];
        let terminal = bundle.position(i, steps);
        for c in 0..cols {
            let dv = row[c] - mean[c];
            var[c] = var[c] + dv * dv;
            if c + d < cols {
                lag[c] = lag[c] + dv * (row[c + d] - mean[c + d]);
            }
            let dterm = terminal[c % d] - term_mean[c % d];
            term_cov[c] = term_cov[c] + dv * dterm;
        }
        for a in 0..d {
            let dterm = terminal[a] - term_mean[a];
            term_var[a] = term_var[a] + dterm * dterm;
        }
    }
    let nm1 = R::of((n - 1) as f64);
    for v in var.iter_mut().chain(&mut lag).chain(&mut term_cov).chain(&mut term_var) {
        *v = *v / nm1;
    }

    // Worst z-scores per family. Variance uses the normal-theory standard
    // error s²·√(2/(n−1)); the correlations use 1/√n.
    let var_se = (R::of(2.0) / nm1).sqrt();
    let sqrt_n = nf.sqrt();
    let mut worst_var = (R::zero(), 0usize);
    let mut worst_lag = (R::zero(), 0usize);
    let mut worst_term = (R::zero(), 0usize);
    for c in 0..cols {
        let z = ((var[c] - dt) / (var[c] * var_se)).abs();
        if z > worst_var.0 {
            worst_var = (z, c / d);
        }
        if c + d < cols {
            let r = lag[c] / (var[c].sqrt() * var[c + d].sqrt());
            let z = (r * sqrt_n).abs();
            if z > worst_lag.0 {
                worst_lag = (z, c / d);
            }
        }
        let r = term_cov[c] / (var[c].sqrt() * term_var[c % d].sqrt());
        let z = (r * sqrt_n).abs();
        if z > worst_term.0 {
            worst_term = (z, c / d);
        }
    }

    let worst = worst_var.0.max(worst_lag.0).max(worst_term.0);
    let mut report = CheckReport::upper_bound(
        "backward_brownian",
        "increments reconstructed with the score correction behave as Brownian noise \
         independent of the terminal state",
        worst.to_f64_lossy(),
        5.0,
        0.0,
    )
    .with_detail("worst_variance_z", worst_var.0.to_f64_lossy())
    .with_detail("worst_variance_step", worst_var.1 as f64)
    .with_detail("worst_lag1_z", worst_lag.0.to_f64_lossy())
    .with_detail("worst_lag1_step", worst_lag.1 as f64)
    .with_detail("worst_terminal_corr_z", worst_term.0.to_f64_lossy())
    .with_detail("worst_terminal_corr_step", worst_term.1 as f64)
    .with_detail("paths", n as f64)
    .with_detail("steps", steps as f64);
    if correction == ScoreCorrection::Omitted {
        report = report.with_warning(
            "score correction omitted: increments are the sign-flipped forward noise \
             (diagnostic variant)",
        );
    }
    report
}

/// Backward Itô sum `Σ y_{j+1}·(x_{j+1} − x_j)`: the integrand is frozen at
/// the *later* endpoint of each increment, the evaluation rule under which
/// the reversed-time integrals of this module are martingales.
pub fn backward_ito_sum<R: Real>(y: &[R], x: &[R]) -> Result<R> {
    if y.len() != x.len() {
        return Err(Error::ShapeMismatch(format!(
            "integrand length {} does not match path length {}",
            y.len(),
            x.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::EmptyInput(
            "a backward sum needs at least two path samples".into(),
        ));
    }
    Ok(compensated_sum(
        (0..x.len() - 1).map(|j| y[j + 1] * (x[j + 1] - x[j])),
    ))
}

/// Reusable per-path buffers for the ledger kernel.
struct LedgerScratch<R: Real> {
    r: Vec<R>,
    dm: Vec<R>,
    df: Vec<R>,
    resid: Vec<R>,
    g2: Vec<R>,
    score: Vec<R>,
    gp: Vec<R>,
    b: Vec<R>,
}

impl<R: Real> LedgerScratch<R> {
    fn new(steps: usize, d: usize) -> Self {
        Self {
            r: vec![R::zero(); steps + 1],
            dm: vec![R::zero(); steps],
            df: vec![R::zero(); steps],
            resid: vec![R::zero(); steps],
            g2: vec![R::zero(); steps],
            score: vec![R::zero(); d],
            gp: vec![R::zero(); d],
            b: vec![R::zero(); d],
        }
    }
}

/// Evaluate the entropy decomposition along one reversed path: the log-ratio
/// `𝓡 = log p + 2ψ` at every step, the martingale increments `∇𝓡·ΔW̄`, the
/// drift increments `(½‖∇𝓡‖² + (2β·∇ψ − ∇·β)·1)·dt`, and the bookkeeping
/// residual `Δ𝓡 − ΔM − Δ𝓕` (exactly as subtracted, bit for bit). Returns
/// the accumulated `Σ‖∇𝓡‖²·dt` of the path. The gradient combines the
/// interpolated score with the analytic `2∇ψ`.
fn ledger_path<R: Real>(
    path: &[R],
    noise: &[R],
    ctx: &BackwardContext<R>,
    pot: &Potential<R>,
    pert: Option<&Perturbation<R>>,
    dt: R,
    s: &mut LedgerScratch<R>,
) -> Result<R> {
    let d = pot.dim();
    let steps = ctx.fields.len() - 1;
    let two = R::of(2.0);
    let half = R::of(0.5);
    for j in 0..=steps {
        let x = &path[j * d..(j + 1) * d];
        s.r[j] = ctx.fields[j].log_p.eval_scalar(x)? + two * pot.psi(x);
    }
    let mut fisher = R::zero();
    for j in 0..steps {
        let x = &path[j * d..(j + 1) * d];
        ctx.fields[j].score.eval(x, &mut s.score)?;
        pot.grad(x, &mut s.gp);
        let mut g2 = R::zero();
        let mut mdw = R::zero();
        for a in 0..d {
            let g = s.score[a] + two * s.gp[a];
            g2 = g2 + g * g;
            mdw = mdw + g * noise[j * d + a];
        }
        fisher = fisher + g2 * dt;
        let mut gen = R::zero();
        if ctx.active[j] {
            let p = pert.expect("active step implies a perturbation");
            gen = generator_term(p, x, &mut s.b, &s.gp);
        }
        s.g2[j] = g2;
        s.dm[j] = mdw;
        s.df[j] = (half * g2 + gen) * dt;
        s.resid[j] = (s.r[j + 1] - s.r[j]) - s.dm[j] - s.df[j];
    }
    Ok(fisher)
}

/// `(2β·∇ψ − ∇·β)(x)`, the reversed-time drift contribution of the bump
/// field. `gp` must already hold `∇ψ(x)`.
fn generator_term<R: Real>(pert: &Perturbation<R>, x: &[R], b: &mut [R], gp: &[R]) -> R {
    b.fill(R::zero());
    pert.add_beta(x, b);
    let mut dot = R::zero();
    for a in 0..x.len() {
        dot = dot + b[a] * gp[a];
    }
    R::of(2.0) * dot - pert.div_beta(x)
}

/// Per-path, per-step record of the reversed-time entropy decomposition.
/// Owns the backward bundle it was computed from, so the binned checks can
/// condition on intermediate states without copying them.
pub struct TrajectorialLedger<R: Real> {
    bundle: PathBundle<R>,
    pot: Potential<R>,
    pert: Option<Perturbation<R>>,
    t_forward_end: R,
    r: Vec<R>,
    dm: Vec<R>,
    df: Vec<R>,
    residual: Vec<R>,
    fisher_path: Vec<R>,
    step_mean_residual: Vec<R>,
    step_mean_grad_norm2: Vec<R>,
}

impl<R: Real> TrajectorialLedger<R> {
    pub fn n(&self) -> usize {
        self.bundle.n()
    }

    pub fn steps(&self) -> usize {
        self.bundle.steps()
    }

    pub fn dim(&self) -> usize {
        self.bundle.dim()
    }

    pub fn dt(&self) -> R {
        self.bundle.dt()
    }

    /// Forward time corresponding to reversed clock zero.
    pub fn t_forward_end(&self) -> R {
        self.t_forward_end
    }

    pub fn bundle(&self) -> &PathBundle<R> {
        &self.bundle
    }

    /// `𝓡` along path `i` (steps+1 values on the reversed clock).
    pub fn log_ratio(&self, i: usize) -> &[R] {
        let k = self.steps() + 1;
        &self.r[i * k..(i + 1) * k]
    }

    /// Martingale increments `∇𝓡·ΔW̄` along path `i`.
    pub fn martingale_increments(&self, i: usize) -> &[R] {
        let k = self.steps();
        &self.dm[i * k..(i + 1) * k]
    }

    /// Drift increments `(½‖∇𝓡‖² + (2β·∇ψ − ∇·β)·1)·dt` along path `i`.
    pub fn drift_increments(&self, i: usize) -> &[R] {
        let k = self.steps();
        &self.df[i * k..(i + 1) * k]
    }

    /// Bookkeeping residuals `Δ𝓡 − ΔM − Δ𝓕` along path `i`.
    pub fn residuals(&self, i: usize) -> &[R] {
        let k = self.steps();
        &self.residual[i * k..(i + 1) * k]
    }

    /// `Σ‖∇𝓡‖²·dt` per path (the quadratic variation of the martingale).
    pub fn fisher_path(&self) -> &[R] {
        &self.fisher_path
    }

    /// Residual averaged over paths, per reversed step.
    pub fn step_mean_residual(&self) -> &[R] {
        &self.step_mean_residual
    }

    /// `‖∇𝓡‖²` averaged over paths, per reversed step.
    pub fn step_mean_grad_norm2(&self) -> &[R] {
        &self.step_mean_grad_norm2
    }

    pub fn log_ratio_flat(&self) -> &[R] {
        &self.r
    }

    pub fn martingale_flat(&self) -> &[R] {
        &self.dm
    }

    pub fn drift_flat(&self) -> &[R] {
        &self.df
    }

    pub fn residual_flat(&self) -> &[R] {
        &self.residual
    }

    /// Reassemble a ledger from stored columns (the container reader);
    /// shapes are validated against the bundle.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        bundle: PathBundle<R>,
        pot: Potential<R>,
        pert: Option<Perturbation<R>>,
        t_forward_end: R,
        r: Vec<R>,
        dm: Vec<R>,
        df: Vec<R>,
        residual: Vec<R>,
        fisher_path: Vec<R>,
        step_mean_residual: Vec<R>,
        step_mean_grad_norm2: Vec<R>,
    ) -> Result<Self> {
        let (n, steps) = (bundle.n(), bundle.steps());
        let expect = [
            ("log-ratio", r.len(), n * (steps + 1)),
            ("martingale", dm.len(), n * steps),
            ("drift", df.len(), n * steps),
            ("residual", residual.len(), n * steps),
            ("quadratic variation", fisher_path.len(), n),
            ("residual mean", step_mean_residual.len(), steps),
            ("gradient mean", step_mean_grad_norm2.len(), steps),
        ];
        for (what, got, want) in expect {
            if got != want {
                return Err(Error::ShapeMismatch(format!(
                    "ledger {what} column holds {got} values, expected {want}"
                )));
            }
        }
        Ok(Self {
            bundle,
            pot,
            pert,
            t_forward_end,
            r,
            dm,
            df,
            residual,
            fisher_path,
            step_mean_residual,
            step_mean_grad_norm2,
        })
    }
}

/// Evaluate the entropy decomposition along every path of a backward bundle
/// (as produced by [`simulate_backward`]; the bundle must start at reversed
/// clock zero, i.e. at the last recorded forward time).
pub fn decompose_entropy_process<R: Real>(
    bundle: PathBundle<R>,
    run: &FpeRun<R>,
    pot: &Potential<R>,
    pert: Option<&Perturbation<R>>,
) -> Result<TrajectorialLedger<R>> {
    let d = bundle.dim();
    check_backward_dims(d, run, pot, pert)?;
    if bundle.time(0).abs() > bundle.dt() * R::of(1e-9) {
        return Err(Error::InvalidParameter(
            "the decomposition expects a reversed-time bundle starting at reversed clock zero"
                .into(),
        ));
    }
    let ctx = backward_context(run, pert, bundle.dt(), bundle.steps())?;
    let n = bundle.n();
    let steps = bundle.steps();
    let dt = bundle.dt();

    type Chunk<R> = (Vec<R>, Vec<R>, Vec<R>, Vec<R>, Vec<R>, Vec<R>, Vec<R>);
    let blocks = par_block_map(n, BLOCK, |_, range| -> Result<Chunk<R>> {
        let mut s = LedgerScratch::new(steps, d);
        let len = range.len();
        let mut r = Vec::with_capacity(len * (steps + 1));
        let mut dm = Vec::with_capacity(len * steps);
        let mut df = Vec::with_capacity(len * steps);
        let mut resid = Vec::with_capacity(len * steps);
        let mut fisher = Vec::with_capacity(len);
        let mut resid_sum = vec![R::zero(); steps];
        let mut g2_sum = vec![R::zero(); steps];
        for i in range {
            let f = ledger_path(bundle.path(i), bundle.noise_of(i), &ctx, pot, pert, dt, &mut s)?;
            r.extend_from_slice(&s.r);
            dm.extend_from_slice(&s.dm);
            df.extend_from_slice(&s.df);
            resid.extend_from_slice(&s.resid);
            fisher.push(f);
            for j in 0..steps {
                resid_sum[j] = resid_sum[j] + s.resid[j];
                g2_sum[j] = g2_sum[j] + s.g2[j];
            }
        }
        Ok((r, dm, df, resid, fisher, resid_sum, g2_sum))
    });
    let blocks = collect_blocks(blocks)?;

    let mut r = Vec::with_capacity(n * (steps + 1));
    let mut dm = Vec::with_capacity(n * steps);
    let mut df = Vec::with_capacity(n * steps);
    let mut residual = Vec::with_capacity(n * steps);
    let mut fisher_path = Vec::with_capacity(n);
    let mut step_mean_residual = vec![R::zero(); steps];
    let mut step_mean_grad_norm2 = vec![R::zero(); steps];
    for (br, bdm, bdf, bresid, bfisher, bresid_sum, bg2_sum) in blocks {
        r.extend_from_slice(&br);
        dm.extend_from_slice(&bdm);
        df.extend_from_slice(&bdf);
        residual.extend_from_slice(&bresid);
        fisher_path.extend_from_slice(&bfisher);
        for j in 0..steps {
            step_mean_residual[j] = step_mean_residual[j] + bresid_sum[j];
            step_mean_grad_norm2[j] = step_mean_grad_norm2[j] + bg2_sum[j];
        }
    }
    let nf = R::of(n as f64);
    for v in step_mean_residual.iter_mut().chain(&mut step_mean_grad_norm2) {
        *v = *v / nf;
    }
    Ok(TrajectorialLedger {
        t_forward_end: ctx.t_end,
        bundle,
        pot: pot.clone(),
        pert: pert.cloned(),
        r,
        dm,
        df,
        residual,
        fisher_path,
        step_mean_residual,
        step_mean_grad_norm2,
    })
}

/// One path's view of the streaming entropy decomposition: the trajectory,
/// its reversed noise, and the per-step ledger columns, all on the reversed
/// clock. Slices are only valid during the callback.
pub struct LedgerRow<'a, R: Real> {
    pub particle: usize,
    pub path: &'a [R],
    pub noise: &'a [R],
    pub log_ratio: &'a [R],
    pub martingale: &'a [R],
    pub drift: &'a [R],
    pub residual: &'a [R],
    pub fisher: R,
}

struct LedgerWalkVisitor<'x, R: Real, A, NEW, FOLD, MERGE> {
    ctx: &'x BackwardContext<R>,
    pot: &'x Potential<R>,
    pert: Option<&'x Perturbation<R>>,
    dt: R,
    d: usize,
    steps: usize,
    new_acc: NEW,
    fold: FOLD,
    merge_fn: MERGE,
    _marker: std::marker::PhantomData<fn() -> A>,
}

impl<R, A, NEW, FOLD, MERGE> PathVisitor<R> for LedgerWalkVisitor<'_, R, A, NEW, FOLD, MERGE>
where
    R: Real,
    A: Send,
    NEW: Fn() -> A + Sync,
    FOLD: Fn(&mut A, &LedgerRow<'_, R>) -> Result<()> + Sync,
    MERGE: Fn(A, A) -> Result<A> + Sync,
{
    type Acc = (A, LedgerScratch<R>);

    fn new_acc(&self) -> Self::Acc {
        ((self.new_acc)(), LedgerScratch::new(self.steps, self.d))
    }

    fn visit(&self, acc: &mut Self::Acc, particle: usize, path: &[R], noise: &[R]) -> Result<()> {
        let (user, scratch) = acc;
        let fisher = ledger_path(path, noise, self.ctx, self.pot, self.pert, self.dt, scratch)?;
        let row = LedgerRow {
            particle,
            path,
            noise,
            log_ratio: &scratch.r,
            martingale: &scratch.dm,
            drift: &scratch.df,
            residual: &scratch.resid,
            fisher,
        };
        (self.fold)(user, &row)
    }

    fn merge(&self, a: Self::Acc, b: Self::Acc) -> Result<Self::Acc> {
        Ok(((self.merge_fn)(a.0, b.0)?, a.1))
    }
}

/// Simulate backward paths and fold the per-path entropy decomposition into
/// an accumulator without storing trajectories: the scalable route to every
/// ledger-based statistic. Accumulators are merged in block order, so the
/// result is deterministic for a fixed seed.
pub fn walk_backward_ledger<R, A, NEW, FOLD, MERGE>(
    terminal: &EnsembleState<R>,
    run: &FpeRun<R>,
    params: &BackwardParams<R>,
    new_acc: NEW,
    fold: FOLD,
    merge: MERGE,
) -> Result<(EnsembleState<R>, A)>
where
    R: Real,
    A: Send,
    NEW: Fn() -> A + Sync,
    FOLD: Fn(&mut A, &LedgerRow<'_, R>) -> Result<()> + Sync,
    MERGE: Fn(A, A) -> Result<A> + Sync,
{
    let ctx = prepare_backward(terminal, run, params)?;
    let visitor = LedgerWalkVisitor {
        ctx: &ctx,
        pot: params.pot,
        pert: params.pert,
        dt: params.dt,
        d: terminal.dim(),
        steps: params.steps,
        new_acc,
        fold,
        merge_fn: merge,
        _marker: std::marker::PhantomData,
    };
    let (state, (acc, _)) = backward_engine(terminal, &ctx, params, &visitor)?;
    Ok((state, acc))
}

/// Which increments enter the orthogonality regression: the martingale
/// increments `∇𝓡·ΔW̄`, or the raw entropy differences `Δ𝓡` (a negative
/// control — the drift part makes them predictable from the reversed past).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IncrementKind {
    Martingale,
    EntropyDifference,
}

/// Columns feeding the martingale statistics: regressor state coordinate,
/// window increment, full-span increment, accumulated quadratic variation.
struct MartingaleColumns<R> {
    u: Vec<R>,
    win: Vec<R>,
    total: Vec<R>,
    fisher: Vec<R>,
}

fn martingale_windows(steps: usize) -> Result<(usize, usize)> {
    if steps < 4 {
        return Err(Error::InvalidParameter(format!(
            "the martingale test needs at least four reversed steps, got {steps}"
        )));
    }
    Ok((steps / 4, 3 * steps / 4))
}

/// Orthogonality and isometry statistics from per-path columns.
fn martingale_core<R: Real>(cols: &MartingaleColumns<R>) -> Result<CheckReport> {
    let n = cols.u.len();
    if n < MIN_MARTINGALE_PATHS {
        return Err(Error::InsufficientSamples {
            need: MIN_MARTINGALE_PATHS,
            got: n,
            context: "martingale orthogonality test",
        });
    }
    let nf = R::of(n as f64);
    let m2 = compensated_sum(cols.total.iter().map(|&m| m * m)) / nf;
    let qv = compensated_sum(cols.fisher.iter().copied()) / nf;

    let anchor = "increments of the reversed-time entropy martingale are orthogonal to the \
                  reversed past and match the accumulated squared gradient";
    if !(qv > R::zero()) && !(m2 > R::zero()) {
        return Ok(CheckReport::upper_bound("martingale", anchor, 0.0, 5.0, 0.0)
            .with_detail("isometry_martingale_mean_square", 0.0)
            .with_detail("isometry_quadratic_variation", 0.0)
            .with_detail("paths", n as f64)
            .with_warning("degenerate case: the gradient vanishes along every path"));
    }

    let (coefs, ses) = regress_on_state_basis(&cols.u, &cols.win)?;
    let mut worst = R::zero();
    let mut zs = [R::zero(); 4];
    for (k, z) in zs.iter_mut().enumerate() {
        *z = if ses[k] > R::zero() { (coefs[k] / ses[k]).abs() } else { R::zero() };
        worst = worst.max(*z);
    }

    let iso_gap = ((m2 - qv) / qv).abs();
    Ok(CheckReport::upper_bound("martingale", anchor, worst.to_f64_lossy(), 5.0, 0.0)
        .with_detail("z_const", zs[0].to_f64_lossy())
        .with_detail("z_linear", zs[1].to_f64_lossy())
        .with_detail("z_quadratic", zs[2].to_f64_lossy())
        .with_detail("z_gaussian", zs[3].to_f64_lossy())
        .with_detail("isometry_martingale_mean_square", m2.to_f64_lossy())
        .with_detail("isometry_quadratic_variation", qv.to_f64_lossy())
        .with_detail("isometry_rel_gap", iso_gap.to_f64_lossy())
        .with_detail("paths", n as f64)
        .and_require(
            iso_gap.to_f64_lossy() <= 0.05,
            "the martingale mean square must match the accumulated squared gradient within \
             five percent",
        ))
}

/// Least squares of `y` on the basis `(1, u, u², e^{−u²})`, returning the
/// coefficients and their standard errors.
fn regress_on_state_basis<R: Real>(u: &[R], y: &[R]) -> Result<([R; 4], [R; 4])> {
    let n = u.len();
    let basis = |v: R| -> [R; 4] { [R::one(), v, v * v, (-(v * v)).exp()] };
    let mut xtx = [[R::zero(); 4]; 4];
    let mut xty = [R::zero(); 4];
    for i in 0..n {
        let row = basis(u[i]);
        for a in 0..4 {
            for b in a..4 {
                xtx[a][b] = xtx[a][b] + row[a] * row[b];
            }
            xty[a] = xty[a] + row[a] * y[i];
        }
    }
    for a in 0..4 {
        for b in 0..a {
            xtx[a][b] = xtx[b][a];
        }
    }
    let coefs = solve_sym4(xtx, xty)?;
    let mut rss = R::zero();
    for i in 0..n {
        let row = basis(u[i]);
        let mut fit = R::zero();
        for a in 0..4 {
            fit = fit + coefs[a] * row[a];
        }
        let e = y[i] - fit;
        rss = rss + e * e;
    }
    let sigma2 = rss / R::of((n - 4) as f64);
    let mut ses = [R::zero(); 4];
    for a in 0..4 {
        let mut unit = [R::zero(); 4];
        unit[a] = R::one();
        let col = solve_sym4(xtx, unit)?;
        ses[a] = (sigma2 * col[a]).max(R::zero()).sqrt();
    }
    Ok((coefs, ses))
}

/// Solve a 4×4 system by Gaussian elimination with partial pivoting.
fn solve_sym4<R: Real>(mut a: [[R; 4]; 4], mut b: [R; 4]) -> Result<[R; 4]> {
    for col in 0..4 {
        let mut pivot = col;
        for row in col + 1..4 {
            if a[row][col].abs() > a[pivot][col].abs() {
                pivot = row;
            }
        }
        if !(a[pivot][col].abs() > R::zero()) {
            return Err(Error::InvalidParameter(
                "degenerate regression basis (singular normal equations)".into(),
            ));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..4 {
            let f = a[row][col] / a[col][col];
            for k in col..4 {
                a[row][k] = a[row][k] - f * a[col][k];
            }
            b[row] = b[row] - f * b[col];
        }
    }
    let mut x = [R::zero(); 4];
    for col in (0..4).rev() {
        let mut s = b[col];
        for k in col + 1..4 {
            s = s - a[col][k] * x[k];
        }
        x[col] = s / a[col][col];
    }
    Ok(x)
}

/// Martingale test on a stored ledger: regress the window increment
/// (reversed quarter-span to three-quarter-span) on the basis
/// `(1, x, x², e^{−x²})` of the first state coordinate at the window start,
/// all coefficients within five standard errors of zero, and require the
/// full-span isometry `E[M²] ≈ E[Σ‖∇𝓡‖²·dt]` within five percent.
pub fn martingale_test<R: Real>(ledger: &TrajectorialLedger<R>) -> Result<CheckReport> {
    martingale_test_with(ledger, IncrementKind::Martingale)
}

/// As [`martingale_test`], selecting which increments are regressed.
pub fn martingale_test_with<R: Real>(
    ledger: &TrajectorialLedger<R>,
    kind: IncrementKind,
) -> Result<CheckReport> {
    let (j_s, j_t) = martingale_windows(ledger.steps())?;
    let n = ledger.n();
    let mut cols = MartingaleColumns {
        u: Vec::with_capacity(n),
        win: Vec::with_capacity(n),
        total: Vec::with_capacity(n),
        fisher: ledger.fisher_path().to_vec(),
    };
    for i in 0..n {
        cols.u.push(ledger.bundle.position(i, j_s)[0]);
        let (win, total) = match kind {
            IncrementKind::Martingale => {
                let dm = ledger.martingale_increments(i);
                (
                    compensated_sum(dm[j_s..j_t].iter().copied()),
                    compensated_sum(dm.iter().copied()),
                )
            }
            IncrementKind::EntropyDifference => {
                let r = ledger.log_ratio(i);
                (r[j_t] - r[j_s], r[ledger.steps()] - r[0])
            }
        };
        cols.win.push(win);
        cols.total.push(total);
    }
    martingale_core(&cols)
}

/// Streaming martingale test: simulate backward paths and keep only the
/// per-path columns. Equivalent to [`martingale_test`] on the bundle the
/// same parameters would produce, at memory O(paths).
pub fn martingale_suite_streaming<R: Real>(
    terminal: &EnsembleState<R>,
    run: &FpeRun<R>,
    params: &BackwardParams<R>,
    kind: IncrementKind,
) -> Result<CheckReport> {
    let (j_s, j_t) = martingale_windows(params.steps)?;
    let d = terminal.dim();
    let steps = params.steps;
    let (_, cols) = walk_backward_ledger(
        terminal,
        run,
        params,
        || MartingaleColumns {
            u: Vec::new(),
            win: Vec::new(),
            total: Vec::new(),
            fisher: Vec::new(),
        },
        |acc: &mut MartingaleColumns<R>, row: &LedgerRow<'_, R>| {
            acc.u.push(row.path[j_s * d]);
            let (win, total) = match kind {
                IncrementKind::Martingale => (
                    compensated_sum(row.martingale[j_s..j_t].iter().copied()),
                    compensated_sum(row.martingale.iter().copied()),
                ),
                IncrementKind::EntropyDifference => (
                    row.log_ratio[j_t] - row.log_ratio[j_s],
                    row.log_ratio[steps] - row.log_ratio[0],
                ),
            };
            acc.win.push(win);
            acc.total.push(total);
            acc.fisher.push(row.fisher);
            Ok(())
        },
        |mut a, b| {
            a.u.extend_from_slice(&b.u);
            a.win.extend_from_slice(&b.win);
            a.total.extend_from_slice(&b.total);
            a.fisher.extend_from_slice(&b.fisher);
            Ok(a)
        },
    )?;
    martingale_core(&cols)
}

/// Map a reversed time to its step index, requiring alignment.
fn time_to_step<R: Real>(t: R, dt: R, steps: usize, what: &str) -> Result<usize> {
    if t < R::zero() {
        return Err(Error::InvalidParameter(format!(
            "{what} must be nonnegative, got {t}"
        )));
    }
    let k = (t / dt).round().to_f64_lossy() as usize;
    if (t - R::of(k as f64) * dt).abs() > dt * R::of(1e-6) {
        return Err(Error::InvalidParameter(format!(
            "{what} {t} does not align with the backward step {dt}"
        )));
    }
    if k > steps {
        return Err(Error::InvalidParameter(format!(
            "{what} {t} lies beyond the recorded reversed range"
        )));
    }
    Ok(k)
}

/// Per-path columns of the displacement identity over the reversed window
/// `[j_t, j_end]`: conditioning coordinate, entropy displacement, and the
/// accumulated drift increments.
struct DisplacementColumns<R> {
    x: Vec<R>,
    lhs: Vec<R>,
    rhs: Vec<R>,
}

/// Binned comparison of the conditional entropy displacement against the
/// conditional drift integral. Per-bin discrepancies are measured beyond
/// three standard errors of the bin mean, relative to the bin's own drift
/// magnitude floored at a tenth of the peak across bins; the check value is
/// the worst such discrepancy over bins centred within the scoring window.
fn displacement_core<R: Real>(cols: &DisplacementColumns<R>, nbins: usize) -> Result<CheckReport> {
    let n = cols.x.len();
    let bins = EqualMassBins::new(&cols.x, nbins)?;
    let anchor = "binned conditional entropy displacement matches the conditional \
                  time-integrated dissipation drift";

    struct BinStat {
        center: f64,
        lhs: f64,
        rhs: f64,
        se: f64,
        count: usize,
    }
    let mut stats = Vec::with_capacity(bins.nbins());
    let mut excluded = 0usize;
    for k in 0..bins.nbins() {
        let members = bins.bin(k);
        if members.len() < MIN_BIN_PATHS {
            excluded += 1;
            continue;
        }
        let nb = R::of(members.len() as f64);
        let mut sx = R::zero();
        let mut sl = R::zero();
        let mut sr = R::zero();
        for &i in members {
            let i = i as usize;
            sx = sx + cols.x[i];
            sl = sl + cols.lhs[i];
            sr = sr + cols.rhs[i];
        }
        let (mx, ml, mr) = (sx / nb, sl / nb, sr / nb);
        let mut sv = R::zero();
        for &i in members {
            let i = i as usize;
            let dvi = (cols.lhs[i] - cols.rhs[i]) - (ml - mr);
            sv = sv + dvi * dvi;
        }
        let se = (sv / (nb * (nb - R::one()))).sqrt();
        stats.push(BinStat {
            center: mx.to_f64_lossy(),
            lhs: ml.to_f64_lossy(),
            rhs: mr.to_f64_lossy(),
            se: se.to_f64_lossy(),
            count: members.len(),
        });
    }
    if stats.is_empty() {
        return Err(Error::InsufficientSamples {
            need: MIN_BIN_PATHS,
            got: n / nbins.max(1),
            context: "binned displacement check (every bin under the path minimum)",
        });
    }

    let peak = stats.iter().map(|s| s.rhs.abs()).fold(0.0f64, f64::max);
    if peak <= 1e-9 {
        let mut report = CheckReport::upper_bound("trajectorial_displacement", anchor, 0.0, 0.10, 0.0)
            .with_detail("bins_used", stats.len() as f64)
            .with_detail("bins_excluded", excluded as f64)
            .with_warning("degenerate case: the drift integral vanishes across all bins");
        if excluded > 0 {
            report = report.with_warning(format!(
                "{excluded} bin(s) excluded for holding fewer than {MIN_BIN_PATHS} paths"
            ));
        }
        return Ok(report);
    }

    let mut worst_central = 0.0f64;
    let mut worst_raw_central = 0.0f64;
    let mut worst_all = 0.0f64;
    let mut worst_bin: Option<&BinStat> = None;
    let mut worst_rank = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for s in &stats {
        let scale = s.rhs.abs().max(0.1 * peak);
        let gap = (s.lhs - s.rhs).abs();
        let adj = (gap - 3.0 * s.se).max(0.0) / scale;
        worst_all = worst_all.max(adj);
        if s.center.abs() <= CENTRAL_HALF_WIDTH {
            let raw = gap / scale;
            worst_central = worst_central.max(adj);
            worst_raw_central = worst_raw_central.max(raw);
            // Rank by the noise-adjusted discrepancy first so the reported
            // bin is the scored worst even when every adjustment is zero.
            if (adj, raw) > worst_rank {
                worst_rank = (adj, raw);
                worst_bin = Some(s);
            }
        }
    }

    let mut report =
        CheckReport::upper_bound("trajectorial_displacement", anchor, worst_central, 0.10, 0.0)
            .with_detail("max_discrepancy_all_bins", worst_all)
            .with_detail("max_raw_discrepancy_central", worst_raw_central)
            .with_detail("bins_used", stats.len() as f64)
            .with_detail("bins_excluded", excluded as f64)
            .with_detail("paths", n as f64);
    if let Some(s) = worst_bin {
        report = report
            .with_detail("worst_bin_center", s.center)
            .with_detail("worst_bin_lhs", s.lhs)
            .with_detail("worst_bin_rhs", s.rhs)
            .with_detail("worst_bin_paths", s.count as f64);
    } else {
        report = report.with_warning("no bin centred within the scoring window");
    }
    if excluded > 0 {
        report = report.with_warning(format!(
            "{excluded} bin(s) excluded for holding fewer than {MIN_BIN_PATHS} paths"
        ));
    }
    Ok(report)
}

/// Window endpoints of the displacement identity on the reversed clock:
/// `t` is the representative reversed time (conditioning instant) and `t0`
/// the forward anchor; the window runs from `t` to `T − t0`.
fn displacement_window<R: Real>(
    t: R,
    t0: R,
    t_forward_end: R,
    dt: R,
    steps: usize,
) -> Result<(usize, usize)> {
    if t0 < R::zero() {
        return Err(Error::InvalidParameter(format!(
            "forward anchor must be nonnegative, got {t0}"
        )));
    }
    if t >= t_forward_end - t0 {
        return Err(Error::InvalidParameter(format!(
            "empty reversed window: representative time {t} must precede the reversed anchor {}",
            t_forward_end - t0
        )));
    }
    let j_t = time_to_step(t, dt, steps, "representative reversed time")?;
    let j_end = time_to_step(t_forward_end - t0, dt, steps, "reversed anchor")?;
    Ok((j_t, j_end))
}

/// Displacement identity on a stored ledger with the default bin count.
pub fn trajectorial_displacement_check<R: Real>(
    ledger: &TrajectorialLedger<R>,
    t: R,
    t0: R,
) -> Result<CheckReport> {
    trajectorial_displacement_check_binned(ledger, t, t0, DISPLACEMENT_BINS)
}

/// Displacement identity on a stored ledger: condition on the state at
/// reversed time `t`, compare the conditional mean of `𝓡_{t₀} − 𝓡_{T−t}`
/// with the conditional drift integral over the reversed window.
pub fn trajectorial_displacement_check_binned<R: Real>(
    ledger: &TrajectorialLedger<R>,
    t: R,
    t0: R,
    nbins: usize,
) -> Result<CheckReport> {
    if ledger.dim() != 1 {
        return Err(Error::InvalidParameter(
            "binned trajectorial checks require a one-dimensional state".into(),
        ));
    }
    let (j_t, j_end) =
        displacement_window(t, t0, ledger.t_forward_end(), ledger.dt(), ledger.steps())?;
    let n = ledger.n();
    let mut cols = DisplacementColumns {
        x: Vec::with_capacity(n),
        lhs: Vec::with_capacity(n),
        rhs: Vec::with_capacity(n),
    };
    for i in 0..n {
        cols.x.push(ledger.bundle.position(i, j_t)[0]);
        let r = ledger.log_ratio(i);
        cols.lhs.push(r[j_end] - r[j_t]);
        cols.rhs.push(compensated_sum(
            ledger.drift_increments(i)[j_t..j_end].iter().copied(),
        ));
    }
    displacement_core(&cols, nbins)
}

/// Streaming displacement identity: simulate backward paths and keep three
/// scalars per path. Suitable for million-path runs.
pub fn trajectorial_displacement_streaming<R: Real>(
    terminal: &EnsembleState<R>,
    run: &FpeRun<R>,
    params: &BackwardParams<R>,
    t: R,
    t0: R,
    nbins: usize,
) -> Result<CheckReport> {
    if terminal.dim() != 1 {
        return Err(Error::InvalidParameter(
            "binned trajectorial checks require a one-dimensional state".into(),
        ));
    }
    let t_forward_end = run.snapshot(run.snapshots().len() - 1).time();
    let (j_t, j_end) = displacement_window(t, t0, t_forward_end, params.dt, params.steps)?;
    let (_, cols) = walk_backward_ledger(
        terminal,
        run,
        params,
        || DisplacementColumns { x: Vec::new(), lhs: Vec::new(), rhs: Vec::new() },
        |acc: &mut DisplacementColumns<R>, row: &LedgerRow<'_, R>| {
            acc.x.push(row.path[j_t]);
            acc.lhs.push(row.log_ratio[j_end] - row.log_ratio[j_t]);
            acc.rhs.push(compensated_sum(row.drift[j_t..j_end].iter().copied()));
            Ok(())
        },
        |mut a, b| {
            a.x.extend_from_slice(&b.x);
            a.lhs.extend_from_slice(&b.lhs);
            a.rhs.extend_from_slice(&b.rhs);
            Ok(a)
        },
    )?;
    displacement_core(&cols, nbins)
}

/// Per-path columns of the shrinking-window rate statistic.
struct RateColumns<R> {
    /// Conditioning coordinate at each window start (one vector per window).
    xs: Vec<Vec<R>>,
    /// Window quotient `(𝓡_{t₀} − 𝓡_{t₀+δ})/δ` (one vector per window).
    qs: Vec<Vec<R>>,
    /// Instantaneous target `½‖∇𝓡‖² + (2β·∇ψ − ∇·β)·1` at the anchor.
    target: Vec<R>,
    /// `½‖∇𝓡‖²` at the anchor (the tolerance scale).
    half_g2: Vec<R>,
}

impl<R: Real> RateColumns<R> {
    fn new(windows: usize) -> Self {
        Self {
            xs: vec![Vec::new(); windows],
            qs: vec![Vec::new(); windows],
            target: Vec::new(),
            half_g2: Vec::new(),
        }
    }

    fn append(&mut self, other: &Self) {
        for (a, b) in self.xs.iter_mut().zip(&other.xs) {
            a.extend_from_slice(b);
        }
        for (a, b) in self.qs.iter_mut().zip(&other.qs) {
            a.extend_from_slice(b);
        }
        self.target.extend_from_slice(&other.target);
        self.half_g2.extend_from_slice(&other.half_g2);
    }
}

/// Validated index geometry of the rate check.
struct RateWindows<R> {
    j_end: usize,
    j_deltas: Vec<usize>,
    deltas: Vec<R>,
    /// Whether the drift target includes the bump term: right-limit of the
    /// activation indicator at the forward anchor.
    include_bump: bool,
    /// Whether the anchor step itself ran with the bump switched on.
    step_bump: bool,
}

fn rate_windows<R: Real>(
    t0: R,
    deltas: &[R],
    t_forward_end: R,
    dt: R,
    steps: usize,
    pert: Option<&Perturbation<R>>,
) -> Result<RateWindows<R>> {
    if deltas.len() < 2 {
        return Err(Error::InvalidParameter(
            "the rate check needs at least two shrinking windows".into(),
        ));
    }
    if deltas.iter().any(|&d| !(d > R::zero()))
        || deltas.windows(2).any(|w| w[1] >= w[0])
    {
        return Err(Error::InvalidParameter(
            "window sequence must be positive and strictly decreasing".into(),
        ));
    }
    if t0 < R::zero() || t0 >= t_forward_end {
        return Err(Error::InvalidParameter(format!(
            "forward anchor {t0} must lie inside the recorded range [0, {t_forward_end})"
        )));
    }
    let j_end = time_to_step(t_forward_end - t0, dt, steps, "reversed anchor")?;
    if j_end >= steps {
        return Err(Error::InvalidParameter(
            "the anchor must lie strictly inside the reversed range (no step leaves the \
             final state)"
                .into(),
        ));
    }
    let mut j_deltas = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let jd = time_to_step(delta, dt, steps, "window width")?;
        if jd == 0 || jd > j_end {
            return Err(Error::InvalidParameter(format!(
                "window width {delta} does not fit between the anchor and the terminal state"
            )));
        }
        j_deltas.push(jd);
    }
    let forward_epsilon = dt * R::of(1e-6);
    Ok(RateWindows {
        j_end,
        j_deltas,
        deltas: deltas.to_vec(),
        include_bump: pert.is_some_and(|p| p.active(t0 + forward_epsilon)),
        step_bump: pert.is_some_and(|p| p.active(t0)),
    })
}

/// Fill the per-path rate columns from one ledger row (or stored path).
#[allow(clippy::too_many_arguments)]
fn rate_fold<R: Real>(
    cols: &mut RateColumns<R>,
    windows: &RateWindows<R>,
    path: &[R],
    log_ratio: &[R],
    drift: &[R],
    dt: R,
    pot: &Potential<R>,
    pert: Option<&Perturbation<R>>,
    scratch: &mut ([R; 2], [R; 2]),
) {
    let j_end = windows.j_end;
    for ((xs, qs), (&jd, &delta)) in cols
        .xs
        .iter_mut()
        .zip(&mut cols.qs)
        .zip(windows.j_deltas.iter().zip(&windows.deltas))
    {
        let j_start = j_end - jd;
        xs.push(path[j_start]);
        qs.push((log_ratio[j_end] - log_ratio[j_start]) / delta);
    }
    // Recover ½‖∇𝓡‖² from the stored drift increment, and re-attach the
    // bump term per the right-limit convention at the anchor.
    let x = &path[j_end..j_end + 1];
    let mut gen = R::zero();
    if windows.include_bump || windows.step_bump {
        let p = pert.expect("bump indicators imply a perturbation");
        let (b, gp) = scratch;
        pot.grad(x, &mut gp[..1]);
        gen = generator_term(p, x, &mut b[..1], &gp[..1]);
    }
    let step_part = if windows.step_bump { gen } else { R::zero() };
    let half_g2 = drift[j_end] / dt - step_part;
    let target = if windows.include_bump { half_g2 + gen } else { half_g2 };
    cols.half_g2.push(half_g2);
    cols.target.push(target);
}

/// Binned comparison of the window quotients against the instantaneous
/// target across the shrinking windows: the weighted conditional L¹ gap must
/// decrease (up to twice its sampling floor) and the final gap must stay
/// within five percent of the mean `½‖∇𝓡‖²` scale.
fn rate_core<R: Real>(cols: &RateColumns<R>, deltas: &[R], nbins: usize) -> Result<CheckReport> {
    let n = cols.target.len();
    if n == 0 {
        return Err(Error::EmptyInput("no paths reached the rate windows".into()));
    }
    let nf = R::of(n as f64);
    let scale = compensated_sum(cols.half_g2.iter().copied()) / nf;
    let anchor = "shrinking-window conditional entropy quotients converge to the \
                  instantaneous dissipation rate";
    if !(scale > R::zero()) {
        return Ok(CheckReport::upper_bound("trajectorial_rate", anchor, 0.0, 0.0, 1e-12)
            .with_warning("degenerate case: the gradient vanishes along every path"));
    }

    let mut gaps = Vec::with_capacity(deltas.len());
    let mut floors = Vec::with_capacity(deltas.len());
    for (xs, qs) in cols.xs.iter().zip(&cols.qs) {
        let bins = EqualMassBins::new(xs, nbins)?;
        let mut gap = R::zero();
        let mut floor = R::zero();
        for k in 0..bins.nbins() {
            let members = bins.bin(k);
            if members.len() < MIN_BIN_PATHS {
                continue;
            }
            let nb = R::of(members.len() as f64);
            let mut s = R::zero();
            for &i in members {
                let i = i as usize;
                s = s + (qs[i] - cols.target[i]);
            }
            let mean = s / nb;
            let mut sv = R::zero();
            for &i in members {
                let i = i as usize;
                let dv = (qs[i] - cols.target[i]) - mean;
                sv = sv + dv * dv;
            }
            let se = (sv / (nb * (nb - R::one()))).sqrt();
            let w = nb / nf;
            gap = gap + w * mean.abs();
            floor = floor + w * se;
        }
        gaps.push(gap);
        floors.push(floor);
    }

    let mut mono_ok = true;
    for k in 1..gaps.len() {
        if gaps[k] > gaps[k - 1] + R::of(2.0) * (floors[k] + floors[k - 1]) {
            mono_ok = false;
        }
    }
    let final_gap = *gaps.last().expect("at least two windows");
    let bound = R::of(0.05) * scale;

    let mut report = CheckReport::upper_bound(
        "trajectorial_rate",
        anchor,
        final_gap.to_f64_lossy(),
        bound.to_f64_lossy(),
        0.0,
    )
    .with_detail("dissipation_scale", scale.to_f64_lossy())
    .with_detail("paths", n as f64);
    for (k, ((&g, &f), &d)) in gaps.iter().zip(&floors).zip(deltas).enumerate() {
        report = report
            .with_detail(format!("delta_{k}"), d.to_f64_lossy())
            .with_detail(format!("gap_{k}"), g.to_f64_lossy())
            .with_detail(format!("floor_{k}"), f.to_f64_lossy());
    }
    Ok(report.and_require(
        mono_ok,
        "the conditional gaps must decrease across the shrinking windows (up to the \
         sampling floor)",
    ))
}

/// Shrinking-window rate identity on a stored ledger with the default bin
/// count.
pub fn trajectorial_rate_check<R: Real>(
    ledger: &TrajectorialLedger<R>,
    t0: R,
    deltas: &[R],
) -> Result<CheckReport> {
    trajectorial_rate_check_binned(ledger, t0, deltas, RATE_BINS)
}

/// Shrinking-window rate identity on a stored ledger: for each window width
/// δ the quotient `(𝓡_{t₀} − 𝓡_{t₀+δ})/δ`, conditioned on the state at the
/// window start, must approach `½‖∇𝓡‖² + (2β·∇ψ − ∇·β)·1` at the anchor.
pub fn trajectorial_rate_check_binned<R: Real>(
    ledger: &TrajectorialLedger<R>,
    t0: R,
    deltas: &[R],
    nbins: usize,
) -> Result<CheckReport> {
    if ledger.dim() != 1 {
        return Err(Error::InvalidParameter(
            "binned trajectorial checks require a one-dimensional state".into(),
        ));
    }
    let windows = rate_windows(
        t0,
        deltas,
        ledger.t_forward_end(),
        ledger.dt(),
        ledger.steps(),
        ledger.pert.as_ref(),
    )?;
    let n = ledger.n();
    let mut cols = RateColumns::new(deltas.len());
    let mut scratch = ([R::zero(); 2], [R::zero(); 2]);
    for i in 0..n {
        rate_fold(
            &mut cols,
            &windows,
            ledger.bundle.path(i),
            ledger.log_ratio(i),
            ledger.drift_increments(i),
            ledger.dt(),
            &ledger.pot,
            ledger.pert.as_ref(),
            &mut scratch,
        );
    }
    rate_core(&cols, deltas, nbins)
}

/// Streaming shrinking-window rate identity, memory O(paths × windows).
pub fn trajectorial_rate_streaming<R: Real>(
    terminal: &EnsembleState<R>,
    run: &FpeRun<R>,
    params: &BackwardParams<R>,
    t0: R,
    deltas: &[R],
    nbins: usize,
) -> Result<CheckReport> {
    if terminal.dim() != 1 {
        return Err(Error::InvalidParameter(
            "binned trajectorial checks require a one-dimensional state".into(),
        ));
    }
    let t_forward_end = run.snapshot(run.snapshots().len() - 1).time();
    let windows = rate_windows(t0, deltas, t_forward_end, params.dt, params.steps, params.pert)?;
    let windows = &windows;
    let n_windows = deltas.len();
    let (_, cols) = walk_backward_ledger(
        terminal,
        run,
        params,
        || (RateColumns::new(n_windows), ([R::zero(); 2], [R::zero(); 2])),
        |acc: &mut (RateColumns<R>, ([R; 2], [R; 2])), row: &LedgerRow<'_, R>| {
            let (cols, scratch) = acc;
            rate_fold(
                cols,
                windows,
                row.path,
                row.log_ratio,
                row.drift,
                params.dt,
                params.pot,
                params.pert,
                scratch,
            );
            Ok(())
        },
        |mut a, b| {
            a.0.append(&b.0);
            Ok(a)
        },
    )?;
    rate_core(&cols.0, deltas, nbins)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fpe::{solve_fpe, stable_dt};
    use crate::grid::GridSpec;
    use crate::simulate::{sample_gaussian_ensemble, simulate_forward_recorded, SimParams};
    use crate::transport::{w2_1d, Quantile1D};

    fn gaussian_start(spec: &GridSpec<f64>, mean: f64, var: f64) -> GridDensity<f64> {
        GridDensity::from_fn(spec.clone(), 0.0, true, |x| {
            (-(x[0] - mean) * (x[0] - mean) / (2.0 * var)).exp()
        })
        .unwrap()
    }

    fn ou_spec() -> GridSpec<f64> {
        GridSpec::new(&[(-6.0f64, 6.0, 512)]).unwrap()
    }

    /// Unperturbed κ = 1 run from `p0`, recorded every `sdt` up to `horizon`.
    fn ou_run(p0: &GridDensity<f64>, sdt: f64, horizon: f64) -> FpeRun<f64> {
        let pot = Potential::quadratic(1, 1.0).unwrap();
        let substeps = (sdt / 2.0e-4).ceil() as usize;
        let dt = sdt / substeps as f64;
        assert!(dt <= stable_dt(p0.spec(), &pot, None));
        let steps = (horizon / dt).round() as usize;
        solve_fpe(p0, &pot, None, dt, steps, substeps).unwrap()
    }

    /// Stationary density for κ = 1 (normalized e^{−x²}).
    fn stationary_density(spec: &GridSpec<f64>) -> GridDensity<f64> {
        GridDensity::from_fn(spec.clone(), 0.0, true, |x| (-x[0] * x[0]).exp()).unwrap()
    }

    #[test]
    fn backward_step_from_point_mass_matches_drift() {
        let spec = ou_spec();
        let pot = Potential::quadratic(1, 1.0).unwrap();
        let run = ou_run(&stationary_density(&spec), 0.01, 0.01);
        let n = 40_000;
        let x0 = 0.7;
        let terminal =
            EnsembleState::from_positions(vec![x0; n], 1, 0.01, 900).unwrap();

        // Stationary score is −2x, confining drift is +x: one reversed Euler
        // step from a point mass shifts the mean by (−2x₀ + x₀)·dt.
        let params = BackwardParams { pot: &pot, pert: None, dt: 0.01, steps: 1, seed: 901 };
        let state = backward_marginal(&terminal, &run, &params).unwrap();
        let mean = state.positions().iter().sum::<f64>() / n as f64;
        let expected = x0 - x0 * 0.01;
        let tol = 5.0 * (0.1 / (n as f64).sqrt());
        assert!(
            (mean - expected).abs() < tol,
            "backward drift off: mean {mean}, expected {expected}"
        );
        assert!(state.time().abs() < 1e-12, "one reversed step should land at forward time 0");

        // Switched-on bump adds β to the reversed drift. Same seed, same
        // noise: the two ensembles differ by exactly β(x₀)·dt.
        let pert = Perturbation::new(0.5, 1.0, vec![0.5], 0.0).unwrap();
        let params_p =
            BackwardParams { pot: &pot, pert: Some(&pert), dt: 0.01, steps: 1, seed: 901 };
        let shifted = backward_marginal(&terminal, &run, &params_p).unwrap();
        let beta = pert.beta(&[x0])[0];
        assert!(beta.abs() > 0.01, "bump must act at x₀ for the wiring check");
        for i in (0..n).step_by(1000) {
            let diff = shifted.position(i)[0] - state.position(i)[0];
            assert!(
                (diff - beta * 0.01).abs() < 1e-12,
                "perturbed reversed drift mis-wired: diff {diff}, beta·dt {}",
                beta * 0.01
            );
        }
    }

    #[test]
    fn backward_marginals_recover_earlier_densities() {
        let spec = ou_spec();
        let pot = Potential::quadratic(1, 1.0).unwrap();
        let p0 = gaussian_start(&spec, 1.0, 0.25);
        let run = ou_run(&p0, 1e-3, 0.5);
        let terminal = sample_from_density(run.snapshot(500), 20_000, 11).unwrap();
        let params = BackwardParams { pot: &pot, pert: None, dt: 1e-3, steps: 500, seed: 12 };
        let states = backward_marginals(&terminal, &run, &params, &[250, 500]).unwrap();

        assert!((states[0].time() - 0.25).abs() < 1e-9);
        assert!(states[1].time().abs() < 1e-9);
        for (state, snap_index) in states.iter().zip([250usize, 0]) {
            let q_samples = Quantile1D::from_samples(&state.axis(0)).unwrap();
            let q_density = Quantile1D::from_density(run.snapshot(snap_index)).unwrap();
            let w2 = w2_1d(&q_samples, &q_density);
            assert!(
                w2 < 0.05,
                "reversed marginal at forward time {} drifted: W₂ = {w2}",
                state.time()
            );
        }
    }

    #[test]
    fn sampled_terminal_states_match_density() {
        let spec = ou_spec();
        let p = gaussian_start(&spec, 1.0, 0.25);
        let state = sample_from_density(&p, 20_000, 5).unwrap();
        assert_eq!(state.n(), 20_000);
        assert_eq!(state.time(), 0.0);
        let w2 = w2_1d(
            &Quantile1D::from_samples(&state.axis(0)).unwrap(),
            &Quantile1D::from_density(&p).unwrap(),
        );
        assert!(w2 < 0.02, "sampled ensemble far from its density: W₂ = {w2}");

        let again = sample_from_density(&p, 20_000, 5).unwrap();
        assert_eq!(state.positions(), again.positions(), "fixed seed must reproduce draws");
        let other = sample_from_density(&p, 20_000, 6).unwrap();
        assert_ne!(state.positions(), other.positions());
    }

    #[test]
    fn reconstructed_increments_pass_brownian_tests_and_flag_missing_score() {
        let spec = ou_spec();
        let pot = Potential::quadratic(1, 1.0).unwrap();
        let run = ou_run(&stationary_density(&spec), 1e-3, 0.25);
        let start = sample_gaussian_ensemble(30_000, &[0.0], 0.5, 21).unwrap();
        let params = SimParams { pot: &pot, pert: None, dt: 1e-3, steps: 250 };
        let (_, bundle) = simulate_forward_recorded(&start, &params).unwrap();

        let (inc, report) = reconstruct_backward_brownian(&bundle, &run).unwrap();
        assert_eq!(inc.n(), 30_000);
        assert_eq!(inc.steps(), 250);
        assert!(
            report.pass,
            "reconstructed increments failed the Brownian tests: {report:?}"
        );

        let (_, control) =
            reconstruct_backward_brownian_with(&bundle, &run, ScoreCorrection::Omitted).unwrap();
        assert!(!control.pass, "omitting the score correction must fail");
        assert!(
            control.details["worst_terminal_corr_z"] > 5.0,
            "the missing correction shows up as terminal-state correlation"
        );
        assert!(
            control.details["worst_variance_z"] <= 5.0,
            "per-step variance alone cannot detect the missing correction"
        );
    }

    #[test]
    fn backward_sums_use_the_later_endpoint() {
        // Constant integrand telescopes exactly regardless of the endpoint
        // rule.
        let x: Vec<f64> = (0..50).map(|k| (k as f64 * 0.37).sin()).collect();
        let ones = vec![1.0; 50];
        let sum = backward_ito_sum(&ones, &x).unwrap();
        assert!((sum - (x[49] - x[0])).abs() < 1e-14);

        // For Brownian paths the backward and forward sums of W·dW differ by
        // the quadratic variation: E[Σ W_{j+1}ΔW_j − Σ W_j ΔW_j] = T.
        let n = 20_000;
        let steps = 100;
        let dt = 0.01f64;
        let mut gap_sum = 0.0;
        let mut fwd_sum = 0.0;
        for i in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            rng.set_stream(i as u64);
            let mut w = vec![0.0f64; steps + 1];
            for j in 0..steps {
                w[j + 1] = w[j] + dt.sqrt() * f64::standard_normal(&mut rng);
            }
            let back = backward_ito_sum(&w, &w).unwrap();
            let fwd: f64 = (0..steps).map(|j| w[j] * (w[j + 1] - w[j])).sum();
            gap_sum += back - fwd;
            fwd_sum += fwd;
        }
        let gap = gap_sum / n as f64;
        assert!((gap - 1.0).abs() < 5e-3, "⟨backward − forward⟩ = {gap}, want 1");
        assert!((fwd_sum / n as f64).abs() < 0.025);

        assert!(matches!(
            backward_ito_sum(&ones[..3], &x),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            backward_ito_sum(&ones[..1], &x[..1]),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn stationary_ledger_vanishes() {
        let spec = ou_spec();
        let pot = Potential::quadratic(1, 1.0).unwrap();
        let run = ou_run(&stationary_density(&spec), 1e-3, 0.05);
        let terminal = sample_from_density(run.snapshot(50), 200, 31).unwrap();
        let params = BackwardParams { pot: &pot, pert: None, dt: 1e-3, steps: 50, seed: 32 };
        let bundle = simulate_backward(&terminal, &run, &params).unwrap();
        let ledger = decompose_entropy_process(bundle, &run, &pot, None).unwrap();

        // In equilibrium the log-ratio is constant and its gradient vanishes:
        // every ledger column collapses to rounding/interpolation floor.
        for i in 0..ledger.n() {
            for j in 0..ledger.steps() {
                assert!(ledger.martingale_increments(i)[j].abs() < 1e-9);
                assert!(ledger.drift_increments(i)[j].abs() < 1e-18);
                let dr = ledger.log_ratio(i)[j + 1] - ledger.log_ratio(i)[j];
                assert!(dr.abs() < 2e-3, "stationary Δ𝓡 too large: {dr}");
            }
            assert!(ledger.fisher_path()[i] < 1e-15);
        }
        // The residual is defined by subtraction, so it must reproduce
        // exactly, bit for bit.
        for &(i, j) in &[(0usize, 0usize), (7, 13), (199, 49)] {
            let recomputed = (ledger.log_ratio(i)[j + 1] - ledger.log_ratio(i)[j])
                - ledger.martingale_increments(i)[j]
                - ledger.drift_increments(i)[j];
            assert_eq!(recomputed.to_bits(), ledger.residuals(i)[j].to_bits());
        }
    }

    #[test]
    fn transient_ledger_martingale_and_displacement() {
        let spec = ou_spec();
        let pot = Potential::quadratic(1, 1.0).unwrap();
        let p0 = gaussian_start(&spec, 1.0, 0.25);
        let run = ou_run(&p0, 1e-3, 0.4);
        let terminal = sample_from_density(run.snapshot(400), 20_000, 41).unwrap();
        let params = BackwardParams { pot: &pot, pert: None, dt: 2e-3, steps: 200, seed: 42 };
        let bundle = simulate_backward(&terminal, &run, &params).unwrap();
        let ledger = decompose_entropy_process(bundle, &run, &pot, None).unwrap();

        // Mean log-ratio at reversed clock zero is the relative entropy of
        // the forward-time-0.4 marginal: m = e^{−0.4}, σ² = 0.25e^{−0.8} +
        // (1 − e^{−0.8})/2, H = −½ln(2πσ²) − ½ + m² + σ².
        let m = (-0.4f64).exp();
        let s2 = 0.25 * (-0.8f64).exp() + 0.5 * (1.0 - (-0.8f64).exp());
        let h = -0.5 * (2.0 * std::f64::consts::PI * s2).ln() - 0.5 + m * m + s2;
        let mean_r0 = (0..ledger.n()).map(|i| ledger.log_ratio(i)[0]).sum::<f64>()
            / ledger.n() as f64;
        assert!(
            (mean_r0 - h).abs() < 0.02,
            "mean initial log-ratio {mean_r0} vs closed form {h}"
        );

        let mart = martingale_test(&ledger).unwrap();
        assert!(mart.pass, "martingale test failed: {mart:?}");
        assert!(mart.details["isometry_rel_gap"] <= 0.05);

        let control = martingale_test_with(&ledger, IncrementKind::EntropyDifference).unwrap();
        assert!(
            !control.pass,
            "raw entropy differences carry drift and must fail orthogonality: {control:?}"
        );

        let disp = trajectorial_displacement_check_binned(&ledger, 0.2, 0.0, 8).unwrap();
        assert!(disp.pass, "displacement identity failed: {disp:?}");
        assert_eq!(disp.details["bins_excluded"], 0.0);

        let recomputed = (ledger.log_ratio(7)[14] - ledger.log_ratio(7)[13])
            - ledger.martingale_increments(7)[13]
            - ledger.drift_increments(7)[13];
        assert_eq!(recomputed.to_bits(), ledger.residuals(7)[13].to_bits());
    }

    #[test]
    fn residual_scale_shrinks_with_the_time_step() {
        let spec = ou_spec();
        let pot = Potential::quadratic(1, 1.0).unwrap();
        let p0 = gaussian_start(&spec, 1.0, 0.25);
        let run = ou_run(&p0, 1e-3, 0.4);

        // Mean per-step residual across all paths and steps, relative to dt
        // times the mean squared-gradient scale.
        let metric = |dt: f64, steps: usize, n: usize, seed: u64| -> f64 {
            let terminal = sample_from_density(run.snapshot(400), n, 41).unwrap();
            let params = BackwardParams { pot: &pot, pert: None, dt, steps, seed };
            let bundle = simulate_backward(&terminal, &run, &params).unwrap();
            let ledger = decompose_entropy_process(bundle, &run, &pot, None).unwrap();
            let mr = ledger.step_mean_residual().iter().sum::<f64>() / steps as f64;
            let mg = ledger.step_mean_grad_norm2().iter().sum::<f64>() / steps as f64;
            mr.abs() / (dt * mg)
        };

        let fine_small = metric(1e-3, 400, 20_000, 43);
        assert!(fine_small < 5e-3, "per-step residual too large at dt = 1e-3: {fine_small}");
        let coarse = metric(5e-2, 8, 80_000, 43);
        let fine = metric(2.5e-2, 16, 80_000, 43);
        assert!(
            coarse / fine >= 1.5,
            "residual did not shrink ≈ linearly with dt: coarse {coarse}, fine {fine}"
        );
    }

    #[test]
    fn streaming_displacement_matches_binned_identity() {
        let spec = ou_spec();
        let pot = Potential::quadratic(1, 1.0).unwrap();
        let pert = Perturbation::new(0.4, 1.0, vec![0.5], 0.1).unwrap();
        let p0 = gaussian_start(&spec, 1.0, 0.25);
        let solver_dt = 2e-4;
        assert!(solver_dt <= stable_dt(&spec, &pot, Some(&pert)));
        let run = solve_fpe(&p0, &pot, Some(&pert), solver_dt, 2500, 5).unwrap();

        // Streaming and stored-ledger evaluations walk the same paths in the
        // same block order, so their reports must agree exactly.
        let terminal = sample_from_density(run.snapshot(500), 10_000, 51).unwrap();
        let params =
            BackwardParams { pot: &pot, pert: Some(&pert), dt: 5e-3, steps: 100, seed: 52 };
        let streamed =
            trajectorial_displacement_streaming(&terminal, &run, &params, 0.25, 0.0, 24).unwrap();
        let bundle = simulate_backward(&terminal, &run, &params).unwrap();
        let ledger = decompose_entropy_process(bundle, &run, &pot, Some(&pert)).unwrap();
        let stored = trajectorial_displacement_check_binned(&ledger, 0.25, 0.0, 24).unwrap();
        assert_eq!(streamed.lhs.to_bits(), stored.lhs.to_bits());
        assert_eq!(streamed.details["bins_used"], stored.details["bins_used"]);
        assert_eq!(streamed.pass, stored.pass);

        // At scale, the perturbed displacement identity holds within the
        // binned tolerance (the reversed window crosses the activation time,
        // exercising both indicator regimes).
        let terminal = sample_from_density(run.snapshot(500), 100_000, 53).unwrap();
        let params =
            BackwardParams { pot: &pot, pert: Some(&pert), dt: 5e-3, steps: 100, seed: 54 };
        let report =
            trajectorial_displacement_streaming(&terminal, &run, &params, 0.25, 0.0, 24).unwrap();
        assert!(report.pass, "perturbed displacement identity failed: {report:?}");
        assert_eq!(report.details["bins_excluded"], 0.0);
    }

    #[test]
    fn shrinking_windows_approach_the_dissipation_rate() {
        // Translation family: the variance starts at its equilibrium value
        // ½, so ∇𝓡 = 2m(t) is spatially constant, the dissipation rate is
        // 2m²(t₀) at the anchor, and the window bias is purely the decay of
        // m² across the window.
        let spec = ou_spec();
        let pot = Potential::quadratic(1, 1.0).unwrap();
        let p0 = gaussian_start(&spec, 1.2, 0.5);
        let solver_dt = 2.5e-3 / 15.0;
        assert!(solver_dt <= stable_dt(&spec, &pot, None));
        let run = solve_fpe(&p0, &pot, None, solver_dt, 2100, 15).unwrap();
        let terminal = sample_from_density(run.snapshot(140), 400_000, 61).unwrap();
        let params = BackwardParams { pot: &pot, pert: None, dt: 2.5e-3, steps: 140, seed: 62 };
        let report = trajectorial_rate_streaming(
            &terminal,
            &run,
            &params,
            0.1,
            &[0.2, 0.1, 0.05, 0.025],
            8,
        )
        .unwrap();
        assert!(report.pass, "rate identity failed: {report:?}");

        let scale = report.details["dissipation_scale"];
        let expected = 2.0 * (1.2 * (-0.1f64).exp()).powi(2);
        assert!(
            (scale - expected).abs() < 0.03,
            "dissipation scale {scale} vs closed form {expected}"
        );
        assert!(
            report.details["gap_0"] > 2.0 * report.details["gap_3"],
            "gaps should shrink with the window: {report:?}"
        );
    }

    #[test]
    fn reversal_input_validation() {
        let spec = ou_spec();
        let pot = Potential::quadratic(1, 1.0).unwrap();
        let run = ou_run(&stationary_density(&spec), 1e-3, 0.05);
        let terminal = sample_from_density(run.snapshot(50), 200, 71).unwrap();

        // Step size must align with the snapshot spacing.
        let params = BackwardParams { pot: &pot, pert: None, dt: 1.5e-3, steps: 4, seed: 72 };
        assert!(matches!(
            backward_marginal(&terminal, &run, &params),
            Err(Error::InvalidParameter(_))
        ));

        // The reversed horizon cannot outrun the recorded range.
        let params = BackwardParams { pot: &pot, pert: None, dt: 1e-3, steps: 51, seed: 72 };
        assert!(matches!(
            backward_marginal(&terminal, &run, &params),
            Err(Error::InvalidParameter(_))
        ));

        // The terminal ensemble must sit at the last recorded time.
        let early = sample_gaussian_ensemble(200, &[0.0], 0.5, 73).unwrap();
        let params = BackwardParams { pot: &pot, pert: None, dt: 1e-3, steps: 4, seed: 74 };
        assert!(matches!(
            backward_marginal(&early, &run, &params),
            Err(Error::InvalidParameter(_))
        ));

        // Positions outside the recorded grid cannot be reversed.
        let off = EnsembleState::from_positions(vec![6.05], 1, 0.05, 75).unwrap();
        let params = BackwardParams { pot: &pot, pert: None, dt: 1e-3, steps: 2, seed: 76 };
        assert!(matches!(
            backward_marginal(&off, &run, &params),
            Err(Error::OffGrid { .. })
        ));

        // Reconstruction needs at least two paths.
        let one = EnsembleState::from_positions(vec![0.1], 1, 0.0, 77).unwrap();
        let sim = SimParams { pot: &pot, pert: None, dt: 1e-3, steps: 4 };
        let (_, tiny) = simulate_forward_recorded(&one, &sim).unwrap();
        assert!(matches!(
            reconstruct_backward_brownian(&tiny, &run),
            Err(Error::InsufficientSamples { need: 2, .. })
        ));

        // Ledger-based checks validate their windows and sample counts.
        let params = BackwardParams { pot: &pot, pert: None, dt: 1e-3, steps: 8, seed: 78 };
        let bundle = simulate_backward(&terminal, &run, &params).unwrap();
        let ledger = decompose_entropy_process(bundle, &run, &pot, None).unwrap();

        let err = trajectorial_displacement_check(&ledger, 0.05, 0.0).unwrap_err();
        match err {
            Error::InvalidParameter(msg) => {
                assert!(msg.contains("empty reversed window"), "unexpected message: {msg}")
            }
            other => panic!("expected InvalidParameter, got {other:?}"),
        }

        assert!(matches!(
            martingale_test(&ledger),
            Err(Error::InsufficientSamples { context: "martingale orthogonality test", .. })
        ));

        // Window widths must decrease strictly.
        assert!(matches!(
            trajectorial_rate_check(&ledger, 0.045, &[2e-3, 4e-3]),
            Err(Error::InvalidParameter(_))
        ));

        // The rate anchor needs an interior step (a drift increment taken
        // at the anchor itself).
        assert!(matches!(
            trajectorial_rate_check(&ledger, 0.042, &[4e-3, 2e-3]),
            Err(Error::InvalidParameter(_))
        ));
    }
}
