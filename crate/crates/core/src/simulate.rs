//! Euler–Maruyama simulation of the perturbed diffusion with reproducible,
//! order-independent noise.
//!
//! Each particle owns a dedicated counter-based RNG stream (ChaCha8 seeded
//! by the run seed, stream = particle index), so trajectories are identical
//! regardless of thread count, particle batching, or whether a run is
//! executed in one call or resumed across several. The update rule is
//!
//! ```text
//! X_{k+1} = X_k − (∇ψ(X_k) + β(X_k)·1_{t_k > t₀}) Δt + ΔW_k,
//! ```
//!
//! with ΔW_k = √Δt·ξ_k, ξ_k ~ N(0, I_d), and the activation indicator
//! evaluated at the **left endpoint** t_k of each step, strictly — matching
//! the density solver's convention exactly.
//!
//! Large ensembles are processed through the [`PathVisitor`] interface: the
//! engine materializes each trajectory (positions and noise increments) in
//! a thread-local buffer, hands it to the visitor, and discards it, so
//! memory stays O(block) instead of O(N·steps). Per-block accumulators are
//! merged sequentially in block order, keeping every reduction bitwise
//! deterministic. [`PathBundle`] is the fully materialized form for
//! desk-scale ensembles; a test pins its equivalence to the streaming path.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Perturbation, Potential};
use crate::real::Real;
use crate::report::CheckReport;
use crate::stats::{collect_blocks, compensated_sum, par_block_map};

/// Particles whose sup-norm exceeds this are treated as numerically
/// divergent and abort the run.
pub const BLOWUP_LIMIT: f64 = 1e6;

/// Number of particles simulated per parallel work item.
const BLOCK: usize = 4096;

/// An ensemble of particles at a common time, with enough bookkeeping to
/// resume its noise streams deterministically.
#[derive(Debug, Clone)]
pub struct EnsembleState<R: Real> {
    positions: Vec<R>,
    dim: usize,
    time: R,
    seed: u64,
    /// Standard-normal draws already consumed per particle stream.
    counters: Vec<u64>,
}

impl<R: Real> EnsembleState<R> {
    /// Wrap given positions (point-major) with fresh noise streams.
    pub fn from_positions(positions: Vec<R>, dim: usize, time: R, seed: u64) -> Result<Self> {
        if dim == 0 || dim > 3 {
            return Err(Error::InvalidParameter(format!(
                "ensemble dimension must be 1..=3, got {dim}"
            )));
        }
        if positions.is_empty() || positions.len() % dim != 0 {
            return Err(Error::ShapeMismatch(format!(
                "position buffer length {} is not a positive multiple of d = {dim}",
                positions.len()
            )));
        }
        let n = positions.len() / dim;
        Ok(Self { positions, dim, time, seed, counters: vec![0; n] })
    }

    pub fn n(&self) -> usize {
        self.counters.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn time(&self) -> R {
        self.time
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Point-major positions.
    pub fn positions(&self) -> &[R] {
        &self.positions
    }

    pub fn position(&self, i: usize) -> &[R] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    /// Coordinates of axis `a` for all particles.
    pub fn axis(&self, a: usize) -> Vec<R> {
        self.positions.iter().skip(a).step_by(self.dim).copied().collect()
    }

    /// Mean of ‖x‖².
    pub fn mean_square_norm(&self) -> R {
        compensated_sum(
            self.positions
                .chunks_exact(self.dim)
                .map(|x| x.iter().map(|&v| v * v).sum::<R>()),
        ) / R::of(self.n() as f64)
    }

    /// Record how many standard-normal draws each particle stream has
    /// consumed, so a later forward continuation resumes distinct noise.
    pub(crate) fn set_draw_counters(&mut self, counters: Vec<u64>) {
        debug_assert_eq!(counters.len(), self.n());
        self.counters = counters;
    }
}

/// Draw an isotropic Gaussian ensemble N(mean, variance·I) of `n` particles
/// using one RNG stream per particle (stream = particle index).
pub fn sample_gaussian_ensemble<R: Real>(
    n: usize,
    mean: &[R],
    variance: R,
    seed: u64,
) -> Result<EnsembleState<R>> {
    let dim = mean.len();
    if dim == 0 || dim > 3 {
        return Err(Error::InvalidParameter(format!(
            "ensemble dimension must be 1..=3, got {dim}"
        )));
    }
    if n == 0 {
        return Err(Error::EmptyInput("ensemble size must be positive".into()));
    }
    if !(variance > R::zero()) {
        return Err(Error::InvalidParameter(format!(
            "initial variance must be positive, got {variance}"
        )));
    }
    let sd = variance.sqrt();
    let blocks = par_block_map(n, BLOCK, |_, range| {
        let mut out = Vec::with_capacity(range.len() * dim);
        for i in range {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            for a in 0..dim {
                out.push(mean[a] + sd * R::standard_normal(&mut rng));
            }
        }
        out
    });
    let positions = blocks.concat();
    Ok(EnsembleState {
        positions,
        dim,
        time: R::zero(),
        seed,
        counters: vec![dim as u64; n],
    })
}

/// Drift specification shared by the forward simulation entry points.
#[derive(Clone, Copy)]
pub struct SimParams<'a, R: Real> {
    pub pot: &'a Potential<R>,
    pub pert: Option<&'a Perturbation<R>>,
    pub dt: R,
    pub steps: usize,
}

/// Streaming consumer of completed trajectories. `visit` receives each
/// particle's full path (`(steps+1)·d` positions) and noise increments
/// (`steps·d` values of ΔW); accumulators are merged in block order.
pub trait PathVisitor<R: Real>: Sync {
    type Acc: Send;
    fn new_acc(&self) -> Self::Acc;
    fn visit(&self, acc: &mut Self::Acc, particle: usize, path: &[R], noise: &[R]) -> Result<()>;
    fn merge(&self, a: Self::Acc, b: Self::Acc) -> Result<Self::Acc>;
}

/// Simulate every particle forward and stream the trajectories through
/// `visitor`. Returns the advanced ensemble and the merged accumulator.
pub fn visit_forward_paths<R: Real, V: PathVisitor<R>>(
    state: &EnsembleState<R>,
    params: &SimParams<R>,
    visitor: &V,
) -> Result<(EnsembleState<R>, V::Acc)> {
    let d = state.dim;
    if params.pot.dim() != d {
        return Err(Error::ShapeMismatch(format!(
            "potential dimension {} does not match ensemble dimension {d}",
            params.pot.dim()
        )));
    }
    if let Some(p) = params.pert {
        if p.dim() != d {
            return Err(Error::ShapeMismatch(format!(
                "perturbation dimension {} does not match ensemble dimension {d}",
                p.dim()
            )));
        }
    }
    if params.steps == 0 {
        return Err(Error::InvalidParameter("step count must be positive".into()));
    }
    if !(params.dt > R::zero()) {
        return Err(Error::InvalidParameter(format!(
            "time step must be positive, got {}",
            params.dt
        )));
    }

    let n = state.n();
    let steps = params.steps;
    let dt = params.dt;
    let sqrt_dt = dt.sqrt();
    let t_start = state.time;
    let limit = R::of(BLOWUP_LIMIT);

    // Precompute which steps run with the perturbed drift (left endpoint,
    // strict) — identical for every particle.
    let active: Vec<bool> = (0..steps)
        .map(|k| {
            params
                .pert
                .is_some_and(|p| p.active(t_start + dt * R::of(k as f64)))
        })
        .collect();

    let blocks = par_block_map(n, BLOCK, |_, range| -> Result<(Vec<R>, Vec<u64>, V::Acc)> {
        let mut finals = Vec::with_capacity(range.len() * d);
        let mut counters = Vec::with_capacity(range.len());
        let mut acc = visitor.new_acc();
        let mut path = vec![R::zero(); (steps + 1) * d];
        let mut noise = vec![R::zero(); steps * d];
        let mut drift = vec![R::zero(); d];
        for i in range {
            let mut rng = ChaCha8Rng::seed_from_u64(state.seed);
            rng.set_stream(i as u64);
            for _ in 0..state.counters[i] {
                let _ = R::standard_normal(&mut rng);
            }
            path[..d].copy_from_slice(state.position(i));
            for k in 0..steps {
                let (cur, rest) = path[k * d..].split_at_mut(d);
                let next = &mut rest[..d];
                params.pot.grad(cur, &mut drift);
                if active[k] {
                    params.pert.expect("active step implies perturbation").add_beta(cur, &mut drift);
                }
                for a in 0..d {
                    let dw = sqrt_dt * R::standard_normal(&mut rng);
                    noise[k * d + a] = dw;
                    let x = cur[a] - drift[a] * dt + dw;
                    if !(x.abs() <= limit) {
                        return Err(Error::BlowUp {
                            particle: i,
                            step: k,
                            magnitude: x.to_f64_lossy(),
                        });
                    }
                    next[a] = x;
                }
            }
            visitor.visit(&mut acc, i, &path, &noise)?;
            finals.extend_from_slice(&path[steps * d..]);
            counters.push(state.counters[i] + (steps * d) as u64);
        }
        Ok((finals, counters, acc))
    });
    let blocks = collect_blocks(blocks)?;

    let mut positions = Vec::with_capacity(n * d);
    let mut counters = Vec::with_capacity(n);
    let mut merged: Option<V::Acc> = None;
    for (finals, ctrs, acc) in blocks {
        positions.extend_from_slice(&finals);
        counters.extend_from_slice(&ctrs);
        merged = Some(match merged.take() {
            None => acc,
            Some(m) => visitor.merge(m, acc)?,
        });
    }
    let final_state = EnsembleState {
        positions,
        dim: d,
        time: t_start + dt * R::of(steps as f64),
        seed: state.seed,
        counters,
    };
    Ok((final_state, merged.expect("at least one block")))
}

/// Visitor that ignores the trajectories (final state only).
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

/// Advance the ensemble without recording trajectories.
pub fn simulate_forward<R: Real>(
    state: &EnsembleState<R>,
    params: &SimParams<R>,
) -> Result<EnsembleState<R>> {
    Ok(visit_forward_paths(state, params, &NullVisitor)?.0)
}

/// Fully materialized trajectories of an ensemble run (desk scale only:
/// memory is N·(steps+1)·d positions plus N·steps·d noise increments).
#[derive(Debug, Clone)]
pub struct PathBundle<R: Real> {
    dim: usize,
    steps: usize,
    dt: R,
    t_start: R,
    seed: u64,
    /// Particle-major positions: `states[(i·(steps+1) + k)·d + a]`.
    states: Vec<R>,
    /// Particle-major noise increments ΔW: `noise[(i·steps + k)·d + a]`.
    noise: Vec<R>,
}

impl<R: Real> PathBundle<R> {
    pub fn n(&self) -> usize {
        self.states.len() / ((self.steps + 1) * self.dim)
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

    pub fn t_start(&self) -> R {
        self.t_start
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Time of step index `k ∈ 0..=steps`.
    pub fn time(&self, k: usize) -> R {
        self.t_start + self.dt * R::of(k as f64)
    }

    pub fn times(&self) -> Vec<R> {
        (0..=self.steps).map(|k| self.time(k)).collect()
    }

    /// Position of particle `i` after `k` steps.
    pub fn position(&self, i: usize, k: usize) -> &[R] {
        let base = (i * (self.steps + 1) + k) * self.dim;
        &self.states[base..base + self.dim]
    }

    /// Noise increment ΔW consumed by particle `i` in step `k`.
    pub fn noise_increment(&self, i: usize, k: usize) -> &[R] {
        let base = (i * self.steps + k) * self.dim;
        &self.noise[base..base + self.dim]
    }

    /// Whole path of particle `i` as a `(steps+1)·d` slice.
    pub fn path(&self, i: usize) -> &[R] {
        let w = (self.steps + 1) * self.dim;
        &self.states[i * w..(i + 1) * w]
    }

    /// All noise increments of particle `i` as a `steps·d` slice.
    pub fn noise_of(&self, i: usize) -> &[R] {
        let w = self.steps * self.dim;
        &self.noise[i * w..(i + 1) * w]
    }

    pub(crate) fn raw_states(&self) -> &[R] {
        &self.states
    }

    pub(crate) fn raw_noise(&self) -> &[R] {
        &self.noise
    }

    pub(crate) fn from_raw(
        dim: usize,
        steps: usize,
        dt: R,
        t_start: R,
        seed: u64,
        states: Vec<R>,
        noise: Vec<R>,
    ) -> Result<Self> {
        if dim == 0
            || steps == 0
            || states.len() % ((steps + 1) * dim) != 0
            || noise.len() % (steps * dim) != 0
            || states.len() / ((steps + 1) * dim) != noise.len() / (steps * dim)
        {
            return Err(Error::ShapeMismatch(
                "path bundle buffers do not match the declared shape".into(),
            ));
        }
        Ok(Self { dim, steps, dt, t_start, seed, states, noise })
    }
}

struct BundleCollector {
    dim: usize,
    steps: usize,
}

impl<R: Real> PathVisitor<R> for BundleCollector {
    type Acc = (Vec<R>, Vec<R>);
    fn new_acc(&self) -> Self::Acc {
        (Vec::new(), Vec::new())
    }
    fn visit(&self, acc: &mut Self::Acc, _: usize, path: &[R], noise: &[R]) -> Result<()> {
        debug_assert_eq!(path.len(), (self.steps + 1) * self.dim);
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

/// Advance the ensemble and keep every trajectory and noise increment.
pub fn simulate_forward_recorded<R: Real>(
    state: &EnsembleState<R>,
    params: &SimParams<R>,
) -> Result<(EnsembleState<R>, PathBundle<R>)> {
    let collector = BundleCollector { dim: state.dim(), steps: params.steps };
    let (final_state, (states, noise)) = visit_forward_paths(state, params, &collector)?;
    let bundle = PathBundle::from_raw(
        state.dim(),
        params.steps,
        params.dt,
        state.time(),
        state.seed(),
        states,
        noise,
    )?;
    Ok((final_state, bundle))
}

/// Time series of E‖X_t‖² with standard errors, recorded at every step.
#[derive(Debug, Clone)]
pub struct MomentSeries<R> {
    pub times: Vec<R>,
    pub mean_square: Vec<R>,
    pub stderr: Vec<R>,
    pub n: usize,
}

struct MomentVisitor {
    dim: usize,
    steps: usize,
}

impl<R: Real> PathVisitor<R> for MomentVisitor {
    /// Per-step sums of ‖x‖² and ‖x‖⁴.
    type Acc = (Vec<R>, Vec<R>);
    fn new_acc(&self) -> Self::Acc {
        (vec![R::zero(); self.steps + 1], vec![R::zero(); self.steps + 1])
    }
    fn visit(&self, acc: &mut Self::Acc, _: usize, path: &[R], _: &[R]) -> Result<()> {
        for k in 0..=self.steps {
            let x = &path[k * self.dim..(k + 1) * self.dim];
            let sq: R = x.iter().map(|&v| v * v).sum();
            acc.0[k] += sq;
            acc.1[k] += sq * sq;
        }
        Ok(())
    }
    fn merge(&self, mut a: Self::Acc, b: Self::Acc) -> Result<Self::Acc> {
        for k in 0..a.0.len() {
            a.0[k] += b.0[k];
            a.1[k] += b.1[k];
        }
        Ok(a)
    }
}

/// Simulate forward and record the second-moment series (streaming; paths
/// are not kept).
pub fn second_moment_series<R: Real>(
    state: &EnsembleState<R>,
    params: &SimParams<R>,
) -> Result<(EnsembleState<R>, MomentSeries<R>)> {
    let visitor = MomentVisitor { dim: state.dim(), steps: params.steps };
    let (final_state, (sum2, sum4)) = visit_forward_paths(state, params, &visitor)?;
    let n = state.n();
    if n < 2 {
        return Err(Error::InsufficientSamples {
            need: 2,
            got: n,
            context: "moment series standard errors",
        });
    }
    let nr = R::of(n as f64);
    let mut mean_square = Vec::with_capacity(sum2.len());
    let mut stderr = Vec::with_capacity(sum2.len());
    for k in 0..sum2.len() {
        let m2 = sum2[k] / nr;
        let var = (sum4[k] / nr - m2 * m2).max(R::zero());
        mean_square.push(m2);
        stderr.push((var / nr).sqrt());
    }
    let times = (0..=params.steps)
        .map(|k| state.time() + params.dt * R::of(k as f64))
        .collect();
    Ok((final_state, MomentSeries { times, mean_square, stderr, n }))
}

/// Closed form of the second-moment a-priori envelope
/// `m₀·e^{2Ct} + (C_R + d)(e^{2Ct} − 1)/(2C)`, where C is the confinement
/// constant and C_R = sup{d − 2x·(∇ψ + β·1)(x) : ‖x‖ ≤ R} over both drift
/// phases. (It solves y' = 2Cy + (C_R + d), y(0) = m₀, which dominates the
/// differential inequality satisfied by E‖X_t‖².)
pub fn second_moment_envelope<R: Real>(m0: R, c: R, c_r: R, dim: usize, t: R) -> R {
    let growth = (R::of(2.0) * c * t).exp();
    m0 * growth + (c_r + R::of(dim as f64)) * (growth - R::one()) / (R::of(2.0) * c)
}

/// sup{d − 2x·(∇ψ + β·1_active)(x) : ‖x‖ ≤ R}, over both phases, by a dense
/// deterministic scan of the ball (inflated by 1e−6).
pub fn confinement_offset<R: Real>(
    pot: &Potential<R>,
    pert: Option<&Perturbation<R>>,
    radius: R,
) -> Result<R> {
    let d = pot.dim();
    let n_per_axis: usize = match d {
        1 => 40_001,
        2 => 641,
        _ => 101,
    };
    let mut sup = R::neg_infinity();
    let mut x = vec![R::zero(); d];
    let mut g = vec![R::zero(); d];
    let dimr = R::of(d as f64);
    let two = R::of(2.0);
    let total = n_per_axis.pow(d as u32);
    for flat in 0..total {
        let mut rem = flat;
        for a in 0..d {
            let i = rem % n_per_axis;
            rem /= n_per_axis;
            x[a] = radius * R::of(2.0 * i as f64 / (n_per_axis - 1) as f64 - 1.0);
        }
        let norm2: R = x.iter().map(|&v| v * v).sum();
        if norm2.sqrt() > radius {
            continue;
        }
        pot.grad(&x, &mut g);
        let dot: R = x.iter().zip(&g).map(|(&xi, &gi)| xi * gi).sum();
        sup = sup.max(dimr - two * dot);
        if let Some(p) = pert {
            p.add_beta(&x, &mut g);
            let dot: R = x.iter().zip(&g).map(|(&xi, &gi)| xi * gi).sum();
            sup = sup.max(dimr - two * dot);
        }
    }
    Ok(sup * R::of(if sup > R::zero() { 1.0 + 1e-6 } else { 1.0 - 1e-6 }))
}

/// Verify that measured second moments stay below the a-priori envelope at
/// every recorded time (with a 3-standard-error statistical allowance).
pub fn gronwall_envelope_check<R: Real>(
    series: &MomentSeries<R>,
    pot: &Potential<R>,
    pert: Option<&Perturbation<R>>,
    c: R,
    radius: R,
) -> Result<CheckReport> {
    if !(c > R::zero()) || !(radius > R::zero()) {
        return Err(Error::InvalidParameter(
            "envelope constants C and R must be positive".into(),
        ));
    }
    let c_r = confinement_offset(pot, pert, radius)?;
    let m0 = series.mean_square[0];
    let mut worst_ratio = R::zero();
    let mut worst_excess = R::neg_infinity();
    for k in 0..series.times.len() {
        let t = series.times[k] - series.times[0];
        let env = second_moment_envelope(m0, c, c_r, pot.dim(), t);
        let allowed = env + R::of(3.0) * series.stderr[k];
        if k > 0 {
            // At t = 0 the envelope equals m₀ by construction; the ratio is
            // informative only at later times.
            worst_ratio = worst_ratio.max(series.mean_square[k] / env);
        }
        worst_excess = worst_excess.max(series.mean_square[k] - allowed);
    }
    Ok(CheckReport::upper_bound(
        "gronwall_envelope",
        "second moments stay below the confinement envelope m₀e^{2Ct} + (C_R+d)(e^{2Ct}−1)/(2C)",
        worst_excess.to_f64_lossy().max(0.0),
        0.0,
        0.0,
    )
    .with_detail("max_moment_to_envelope_ratio", worst_ratio.to_f64_lossy())
    .with_detail("confinement_offset_c_r", c_r.to_f64_lossy())
    .with_detail("ensemble_size", series.n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn ou_params(pot: &Potential<f64>, dt: f64, steps: usize) -> SimParams<'_, f64> {
        SimParams { pot, pert: None, dt, steps }
    }

    #[test]
    fn gaussian_ensemble_has_requested_moments() {
        let state = sample_gaussian_ensemble(200_000, &[1.0f64], 0.5, 11).unwrap();
        let xs = state.axis(0);
        let stats = crate::stats::MeanStats::from_slice(&xs).unwrap();
        assert_abs_diff_eq!(stats.mean, 1.0, epsilon = 5.0 * stats.stderr.max(1e-4));
        assert_abs_diff_eq!(stats.variance, 0.5, epsilon = 0.01);
    }

    #[test]
    fn replay_invariant_reconstructs_every_step() {
        let pot = Potential::quadratic(2, 1.0).unwrap();
        let state = sample_gaussian_ensemble(64, &[0.5f64, -0.25], 0.3, 7).unwrap();
        let params = SimParams { pot: &pot, pert: None, dt: 1e-3, steps: 50 };
        let (_, bundle) = simulate_forward_recorded(&state, &params).unwrap();
        let mut drift = [0.0f64; 2];
        for i in 0..bundle.n() {
            for k in 0..bundle.steps() {
                let x = bundle.position(i, k);
                pot.grad(x, &mut drift);
                let dw = bundle.noise_increment(i, k);
                let next = bundle.position(i, k + 1);
                for a in 0..2 {
                    let expect = x[a] - drift[a] * params.dt + dw[a];
                    assert_eq!(next[a], expect, "particle {i} step {k} axis {a}");
                }
            }
        }
    }

    #[test]
    fn runs_are_bitwise_deterministic_and_thread_independent() {
        let pot = Potential::quadratic(1, 1.0).unwrap();
        let state = sample_gaussian_ensemble(10_000, &[1.0f64], 0.5, 3).unwrap();
        let params = ou_params(&pot, 1e-3, 20);
        let (a, _) = simulate_forward_recorded(&state, &params).unwrap();
        let (b, _) = simulate_forward_recorded(&state, &params).unwrap();
        assert_eq!(a.positions(), b.positions());
        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| simulate_forward(&state, &params).unwrap());
        assert_eq!(a.positions(), single.positions());
    }

    #[test]
    fn chained_runs_match_a_single_run_bitwise() {
        let pot = Potential::quadratic(1, 1.0).unwrap();
        let state = sample_gaussian_ensemble(500, &[0.0f64], 1.0, 19).unwrap();
        let once = simulate_forward(&state, &ou_params(&pot, 1e-3, 40)).unwrap();
        let mid = simulate_forward(&state, &ou_params(&pot, 1e-3, 15)).unwrap();
        let twice = simulate_forward(&mid, &ou_params(&pot, 1e-3, 25)).unwrap();
        assert_eq!(once.positions(), twice.positions());
        assert_eq!(once.time(), twice.time());
    }

    #[test]
    fn streaming_and_bundle_paths_are_identical() {
        // A visitor that hashes positions must see exactly the bundle data.
        struct Probe;
        impl PathVisitor<f64> for Probe {
            type Acc = Vec<(usize, Vec<f64>, Vec<f64>)>;
            fn new_acc(&self) -> Self::Acc {
                Vec::new()
            }
            fn visit(
                &self,
                acc: &mut Self::Acc,
                particle: usize,
                path: &[f64],
                noise: &[f64],
            ) -> crate::error::Result<()> {
                acc.push((particle, path.to_vec(), noise.to_vec()));
                Ok(())
            }
            fn merge(&self, mut a: Self::Acc, b: Self::Acc) -> crate::error::Result<Self::Acc> {
                a.extend(b);
                Ok(a)
            }
        }
        let pot = Potential::quadratic(1, 1.0).unwrap();
        let state = sample_gaussian_ensemble(300, &[0.5f64], 0.25, 23).unwrap();
        let params = ou_params(&pot, 2e-3, 10);
        let (_, probe) = visit_forward_paths(&state, &params, &Probe).unwrap();
        let (_, bundle) = simulate_forward_recorded(&state, &params).unwrap();
        assert_eq!(probe.len(), bundle.n());
        for (i, path, noise) in probe {
            assert_eq!(path.as_slice(), bundle.path(i));
            assert_eq!(noise.as_slice(), bundle.noise_of(i));
        }
    }

    #[test]
    fn perturbation_activates_strictly_after_t0() {
        let pot = Potential::quadratic(1, 1.0).unwrap();
        let pert = Perturbation::new(5.0, 1.0, vec![0.0f64], 2e-3).unwrap();
        let state = sample_gaussian_ensemble(200, &[0.0f64], 0.25, 5).unwrap();
        let dt = 1e-3;
        let plain = simulate_forward_recorded(&state, &ou_params(&pot, dt, 4)).unwrap().1;
        let pert_params = SimParams { pot: &pot, pert: Some(&pert), dt, steps: 4 };
        let perturbed = simulate_forward_recorded(&state, &pert_params).unwrap().1;
        // t₀ = 2dt: steps at t = 0, dt, 2dt are unperturbed (strict), the
        // step at t = 3dt is the first perturbed one.
        for i in 0..plain.n() {
            for k in 0..=3 {
                assert_eq!(plain.position(i, k), perturbed.position(i, k));
            }
        }
        let diverged = (0..plain.n()).any(|i| plain.position(i, 4) != perturbed.position(i, 4));
        assert!(diverged, "perturbation must act on the step starting at 3dt");
    }

    #[test]
    fn ou_moments_match_the_exact_law_and_weak_error_shrinks_linearly() {
        // OU: E[X_t²] = m₀²e^{−2t} + v₀e^{−2t} + (1 − e^{−2t})/2.
        let pot = Potential::quadratic(1, 1.0).unwrap();
        let exact = |t: f64| (1.0f64 + 0.25) * (-2.0 * t).exp() + 0.5 * (1.0 - (-2.0 * t).exp());
        let t_end = 0.5;
        let mut biases = Vec::new();
        for &dt in &[0.025f64, 0.0125] {
            let steps = (t_end / dt).round() as usize;
            let state = sample_gaussian_ensemble(400_000, &[1.0f64], 0.25, 77).unwrap();
            let (_, series) = second_moment_series(&state, &ou_params(&pot, dt, steps)).unwrap();
            let measured = *series.mean_square.last().unwrap();
            biases.push(measured - exact(t_end));
        }
        // First-order weak convergence: halving dt should roughly halve the
        // bias. Statistical noise (se ≈ 1.6e−3) is well below the coarse
        // bias for this step size.
        let ratio = biases[0] / biases[1];
        assert!(
            (1.4..=2.9).contains(&ratio),
            "weak-error ratio {ratio} (biases {biases:?})"
        );
    }

    #[test]
    fn envelope_formula_matches_quadrature_of_the_integral_form() {
        // The closed form must agree with direct numerical evaluation of
        // m₀ + at + 2C∫₀ᵗ e^{2C(t−θ)}(m₀ + aθ)dθ, a = C_R + d.
        let (m0, c, c_r, d) = (1.25f64, 0.8, 3.0, 1usize);
        for &t in &[0.3f64, 1.0, 2.0] {
            let a = c_r + d as f64;
            let nq = 20_000;
            let h = t / nq as f64;
            let mut integral = 0.0;
            for j in 0..=nq {
                let th = j as f64 * h;
                let w = if j == 0 || j == nq { 0.5 } else { 1.0 };
                integral += w * (2.0 * c * (t - th)).exp() * (m0 + a * th);
            }
            integral *= h;
            let reference = m0 + a * t + 2.0 * c * integral;
            let closed = second_moment_envelope(m0, c, c_r, d, t);
            assert_relative_eq!(closed, reference, max_relative = 1e-6);
        }
    }

    #[test]
    fn ou_ensemble_respects_the_envelope() {
        let pot = Potential::quadratic(1, 1.0).unwrap();
        let state = sample_gaussian_ensemble(100_000, &[1.0f64], 0.25, 13).unwrap();
        let (_, series) = second_moment_series(&state, &ou_params(&pot, 1e-3, 500)).unwrap();
        let report = gronwall_envelope_check(&series, &pot, None, 1.0, 2.0).unwrap();
        assert!(report.pass, "{}", report.summary_line());
        // The envelope is loose but not vacuous.
        let ratio = report.details["max_moment_to_envelope_ratio"];
        assert!(ratio > 0.05 && ratio < 1.0, "ratio {ratio}");
    }

    #[test]
    fn blow_up_is_detected() {
        // An inverted potential (custom, growth constant large) expels
        // particles exponentially fast; with a huge dt the first step
        // already exceeds the limit.
        let pot = Potential::custom(
            1,
            |x: &[f64]| x[0] * x[0] * 0.0,
            |x, g| g[0] = -1e7 * x[0].signum() * (1.0 + x[0].abs()),
            2e7,
        )
        .unwrap();
        let state = sample_gaussian_ensemble(8, &[1.0f64], 0.1, 3).unwrap();
        let err = simulate_forward(&state, &SimParams { pot: &pot, pert: None, dt: 1.0, steps: 2 })
            .unwrap_err();
        assert!(matches!(err, Error::BlowUp { .. }), "{err}");
    }
}
