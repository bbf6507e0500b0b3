//! Binary containers and text exports for the laboratory's artifacts.
//!
//! One fixed binary layout serves three payload kinds, distinguished by a
//! four-byte magic: trajectory bundles (`ENTF`), grid densities (`ENTG`),
//! and trajectorial ledgers (`ENTL`). Every file starts with the same
//! header — magic, format version, and the shape scalars — followed by a
//! flat little-endian `f64` payload. Containers always store `f64`
//! regardless of the scalar type the data was computed with; reading into a
//! narrower type rounds.
//!
//! Layouts after the 52-byte header (all values little-endian `f64`):
//!
//! * `ENTF`: positions (`n·(steps+1)·d`, particle-major), then noise
//!   increments (`n·steps·d`).
//! * `ENTG`: axis table (`d` rows of `lo, hi, cells`), then cell values
//!   (`n` values, row-major). The header's `n` is the cell count, `steps`
//!   and `seed` are zero, and the time slot holds the density's time stamp.
//! * `ENTL`: the forward time of reversed clock zero (one value), then the
//!   backward bundle (positions, noise as in `ENTF`), then the ledger
//!   columns: log-ratio (`n·(steps+1)`), martingale, drift, and residual
//!   increments (`n·steps` each), per-path quadratic variation (`n`), and
//!   the per-step residual and squared-gradient means (`steps` each).
//!
//! The text exports are plain CSV with a header row (values printed in
//! Rust's shortest round-trip notation, so re-reading reproduces the exact
//! binary values) plus one JSON summary for entropy series.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::entropy::EntropyReport;
use crate::error::{Error, Result};
use crate::grid::{GridDensity, GridSpec};
use crate::model::{Perturbation, Potential};
use crate::real::Real;
use crate::reversal::TrajectorialLedger;
use crate::simulate::{MomentSeries, PathBundle};
use crate::transport::TransportPlan;

/// Format version written into every container header.
const VERSION: u32 = 1;

const MAGIC_BUNDLE: [u8; 4] = *b"ENTF";
const MAGIC_DENSITY: [u8; 4] = *b"ENTG";
const MAGIC_LEDGER: [u8; 4] = *b"ENTL";

/// Shape scalars shared by all three payload kinds.
struct Header {
    magic: [u8; 4],
    n: u64,
    steps: u64,
    dim: u32,
    dt: f64,
    t_start: f64,
    seed: u64,
}

fn write_header<W: Write>(w: &mut W, h: &Header) -> Result<()> {
    w.write_all(&h.magic)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&h.n.to_le_bytes())?;
    w.write_all(&h.steps.to_le_bytes())?;
    w.write_all(&h.dim.to_le_bytes())?;
    w.write_all(&h.dt.to_le_bytes())?;
    w.write_all(&h.t_start.to_le_bytes())?;
    w.write_all(&h.seed.to_le_bytes())?;
    Ok(())
}

fn read_header<Rd: Read>(r: &mut Rd, expected: [u8; 4]) -> Result<Header> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != expected {
        return Err(Error::Container(format!(
            "wrong container kind: expected magic {:?}, found {:?}",
            String::from_utf8_lossy(&expected),
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(Error::Container(format!(
            "unsupported container version {version} (this build reads {VERSION})"
        )));
    }
    r.read_exact(&mut b8)?;
    let n = u64::from_le_bytes(b8);
    r.read_exact(&mut b8)?;
    let steps = u64::from_le_bytes(b8);
    r.read_exact(&mut b4)?;
    let dim = u32::from_le_bytes(b4);
    r.read_exact(&mut b8)?;
    let dt = f64::from_le_bytes(b8);
    r.read_exact(&mut b8)?;
    let t_start = f64::from_le_bytes(b8);
    r.read_exact(&mut b8)?;
    let seed = u64::from_le_bytes(b8);
    Ok(Header { magic, n, steps, dim, dt, t_start, seed })
}

/// Buffered little-endian dump of a scalar slice as `f64`.
fn write_values<W: Write, R: Real>(w: &mut W, values: &[R]) -> Result<()> {
    let mut buf = [0u8; 8 * 1024];
    for chunk in values.chunks(1024) {
        for (v, out) in chunk.iter().zip(buf.chunks_exact_mut(8)) {
            out.copy_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
        w.write_all(&buf[..chunk.len() * 8])?;
    }
    Ok(())
}

fn read_values<Rd: Read, R: Real>(r: &mut Rd, count: usize, what: &str) -> Result<Vec<R>> {
    let mut out = Vec::with_capacity(count);
    let mut buf = [0u8; 8 * 1024];
    let mut remaining = count;
    while remaining > 0 {
        let take = remaining.min(1024);
        r.read_exact(&mut buf[..take * 8]).map_err(|e| {
            Error::Container(format!("container truncated while reading {what}: {e}"))
        })?;
        for b in buf[..take * 8].chunks_exact(8) {
            out.push(R::of(f64::from_le_bytes(b.try_into().expect("8-byte chunk"))));
        }
        remaining -= take;
    }
    Ok(out)
}

/// Fail if the reader still holds bytes after the declared payload.
fn expect_end<Rd: Read>(r: &mut Rd) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(Error::Container(
            "container holds trailing data beyond the declared payload".into(),
        )),
    }
}

/// Checked product of shape scalars coming from an untrusted header.
fn shape_product(factors: &[u64], what: &str) -> Result<usize> {
    let mut acc: u64 = 1;
    for &f in factors {
        acc = acc.checked_mul(f).ok_or_else(|| {
            Error::Container(format!("container shape overflows while sizing {what}"))
        })?;
    }
    usize::try_from(acc)
        .map_err(|_| Error::Container(format!("container shape too large for {what}")))
}

// ---------------------------------------------------------------------------
// Trajectory bundles
// ---------------------------------------------------------------------------

/// Persist a trajectory bundle (magic `ENTF`).
pub fn write_bundle<R: Real>(path: impl AsRef<Path>, bundle: &PathBundle<R>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(
        &mut w,
        &Header {
            magic: MAGIC_BUNDLE,
            n: bundle.n() as u64,
            steps: bundle.steps() as u64,
            dim: bundle.dim() as u32,
            dt: bundle.dt().to_f64_lossy(),
            t_start: bundle.t_start().to_f64_lossy(),
            seed: bundle.seed(),
        },
    )?;
    write_values(&mut w, bundle.raw_states())?;
    write_values(&mut w, bundle.raw_noise())?;
    w.flush()?;
    Ok(())
}

/// Read a trajectory bundle written by [`write_bundle`].
pub fn read_bundle<R: Real>(path: impl AsRef<Path>) -> Result<PathBundle<R>> {
    let mut r = BufReader::new(File::open(path)?);
    let h = read_header(&mut r, MAGIC_BUNDLE)?;
    let d = h.dim as u64;
    let states = read_values(&mut r, shape_product(&[h.n, h.steps + 1, d], "positions")?,
        "positions")?;
    let noise = read_values(&mut r, shape_product(&[h.n, h.steps, d], "noise")?, "noise")?;
    expect_end(&mut r)?;
    PathBundle::from_raw(
        h.dim as usize,
        h.steps as usize,
        R::of(h.dt),
        R::of(h.t_start),
        h.seed,
        states,
        noise,
    )
}

// ---------------------------------------------------------------------------
// Grid densities
// ---------------------------------------------------------------------------

/// Persist a grid density (magic `ENTG`).
pub fn write_density<R: Real>(path: impl AsRef<Path>, p: &GridDensity<R>) -> Result<()> {
    let spec = p.spec();
    let mut w = BufWriter::new(File::create(path)?);
    write_header(
        &mut w,
        &Header {
            magic: MAGIC_DENSITY,
            n: spec.n_cells() as u64,
            steps: 0,
            dim: spec.dim() as u32,
            dt: 0.0,
            t_start: p.time().to_f64_lossy(),
            seed: 0,
        },
    )?;
    let mut axes = Vec::with_capacity(spec.dim() * 3);
    for a in 0..spec.dim() {
        axes.push(spec.lo(a));
        axes.push(spec.hi(a));
        axes.push(R::of(spec.cells(a) as f64));
    }
    write_values(&mut w, &axes)?;
    write_values(&mut w, p.values())?;
    w.flush()?;
    Ok(())
}

/// Read a grid density written by [`write_density`].
pub fn read_density<R: Real>(path: impl AsRef<Path>) -> Result<GridDensity<R>> {
    let mut r = BufReader::new(File::open(path)?);
    let h = read_header(&mut r, MAGIC_DENSITY)?;
    let d = h.dim as usize;
    if d == 0 || d > 2 {
        return Err(Error::Container(format!(
            "density container declares unsupported dimension {d}"
        )));
    }
    let table: Vec<R> = read_values(&mut r, 3 * d, "axis table")?;
    let axes: Vec<(R, R, usize)> = table
        .chunks_exact(3)
        .map(|row| {
            let cells = row[2].to_f64_lossy();
            if cells < 1.0 || cells.fract() != 0.0 {
                return Err(Error::Container(format!(
                    "density container holds a non-integer cell count {cells}"
                )));
            }
            Ok((row[0], row[1], cells as usize))
        })
        .collect::<Result<_>>()?;
    let spec = GridSpec::new(&axes)?;
    if spec.n_cells() as u64 != h.n {
        return Err(Error::Container(format!(
            "density container declares {} cells but the axes span {}",
            h.n,
            spec.n_cells()
        )));
    }
    let values = read_values(&mut r, spec.n_cells(), "cell values")?;
    expect_end(&mut r)?;
    GridDensity::from_values(spec, values, R::of(h.t_start))
}

// ---------------------------------------------------------------------------
// Trajectorial ledgers
// ---------------------------------------------------------------------------

/// Persist a trajectorial ledger and its backward bundle (magic `ENTL`).
pub fn write_ledger<R: Real>(
    path: impl AsRef<Path>,
    ledger: &TrajectorialLedger<R>,
) -> Result<()> {
    let bundle = ledger.bundle();
    let mut w = BufWriter::new(File::create(path)?);
    write_header(
        &mut w,
        &Header {
            magic: MAGIC_LEDGER,
            n: bundle.n() as u64,
            steps: bundle.steps() as u64,
            dim: bundle.dim() as u32,
            dt: bundle.dt().to_f64_lossy(),
            t_start: bundle.t_start().to_f64_lossy(),
            seed: bundle.seed(),
        },
    )?;
    write_values(&mut w, &[ledger.t_forward_end()])?;
    write_values(&mut w, bundle.raw_states())?;
    write_values(&mut w, bundle.raw_noise())?;
    write_values(&mut w, ledger.log_ratio_flat())?;
    write_values(&mut w, ledger.martingale_flat())?;
    write_values(&mut w, ledger.drift_flat())?;
    write_values(&mut w, ledger.residual_flat())?;
    write_values(&mut w, ledger.fisher_path())?;
    write_values(&mut w, ledger.step_mean_residual())?;
    write_values(&mut w, ledger.step_mean_grad_norm2())?;
    w.flush()?;
    Ok(())
}

/// Read a ledger written by [`write_ledger`]. Containers carry only data;
/// the potential and perturbation that defined the decomposition must be
/// re-supplied (they parameterize the binned rate check).
pub fn read_ledger<R: Real>(
    path: impl AsRef<Path>,
    pot: &Potential<R>,
    pert: Option<&Perturbation<R>>,
) -> Result<TrajectorialLedger<R>> {
    let mut r = BufReader::new(File::open(path)?);
    let h = read_header(&mut r, MAGIC_LEDGER)?;
    let d = h.dim as u64;
    let t_forward_end = read_values::<_, R>(&mut r, 1, "anchor time")?[0];
    let states = read_values(&mut r, shape_product(&[h.n, h.steps + 1, d], "positions")?,
        "positions")?;
    let noise = read_values(&mut r, shape_product(&[h.n, h.steps, d], "noise")?, "noise")?;
    let bundle = PathBundle::from_raw(
        h.dim as usize,
        h.steps as usize,
        R::of(h.dt),
        R::of(h.t_start),
        h.seed,
        states,
        noise,
    )?;
    let per_path = shape_product(&[h.n, h.steps + 1], "log-ratio")?;
    let per_step = shape_product(&[h.n, h.steps], "increments")?;
    let r_col = read_values(&mut r, per_path, "log-ratio")?;
    let dm = read_values(&mut r, per_step, "martingale increments")?;
    let df = read_values(&mut r, per_step, "drift increments")?;
    let resid = read_values(&mut r, per_step, "residuals")?;
    let fisher = read_values(&mut r, h.n as usize, "quadratic variation")?;
    let step_mean_residual = read_values(&mut r, h.steps as usize, "residual means")?;
    let step_mean_grad_norm2 = read_values(&mut r, h.steps as usize, "gradient means")?;
    expect_end(&mut r)?;
    TrajectorialLedger::from_parts(
        bundle,
        pot.clone(),
        pert.cloned(),
        t_forward_end,
        r_col,
        dm,
        df,
        resid,
        fisher,
        step_mean_residual,
        step_mean_grad_norm2,
    )
}

// ---------------------------------------------------------------------------
// Text exports
// ---------------------------------------------------------------------------

/// CSV of a second-moment series: `t,second_moment,stderr`.
pub fn write_moments_csv<R: Real>(path: impl AsRef<Path>, series: &MomentSeries<R>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "t,second_moment,stderr")?;
    for ((t, m), s) in series.times.iter().zip(&series.mean_square).zip(&series.stderr) {
        writeln!(w, "{},{},{}", t.to_f64_lossy(), m.to_f64_lossy(), s.to_f64_lossy())?;
    }
    w.flush()?;
    Ok(())
}

/// CSV of a grid density: `x,p` in one dimension, `x,y,p` in two, one row
/// per cell in row-major order with cell-center coordinates.
pub fn write_density_csv<R: Real>(path: impl AsRef<Path>, p: &GridDensity<R>) -> Result<()> {
    let spec = p.spec();
    let d = spec.dim();
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", if d == 1 { "x,p" } else { "x,y,p" })?;
    let mut center = [R::zero(); 2];
    for (flat, &v) in p.values().iter().enumerate() {
        spec.center(flat, &mut center[..d]);
        for c in &center[..d] {
            write!(w, "{},", c.to_f64_lossy())?;
        }
        writeln!(w, "{}", v.to_f64_lossy())?;
    }
    w.flush()?;
    Ok(())
}

/// CSV of an entropy series: `t,H,I,estimator`.
pub fn write_entropy_csv<R: Real>(path: impl AsRef<Path>, series: &EntropyReport<R>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "t,H,I,estimator")?;
    for ((t, h), i) in series
        .times
        .iter()
        .zip(&series.relative_entropy)
        .zip(&series.fisher_information)
    {
        writeln!(
            w,
            "{},{},{},{}",
            t.to_f64_lossy(),
            h.to_f64_lossy(),
            i.to_f64_lossy(),
            series.estimator.as_str()
        )?;
    }
    w.flush()?;
    Ok(())
}

/// JSON summary of an entropy series:
/// `{scenario, times[], H[], I[]}`.
pub fn write_entropy_json<R: Real>(
    path: impl AsRef<Path>,
    scenario: &str,
    series: &EntropyReport<R>,
) -> Result<()> {
    let to64 = |v: &[R]| v.iter().map(|x| x.to_f64_lossy()).collect::<Vec<f64>>();
    let doc = serde_json::json!({
        "scenario": scenario,
        "times": to64(&series.times),
        "H": to64(&series.relative_entropy),
        "I": to64(&series.fisher_information),
    });
    let mut w = BufWriter::new(File::create(path)?);
    let text = serde_json::to_string_pretty(&doc)
        .map_err(|e| Error::Container(format!("entropy summary serialization failed: {e}")))?;
    w.write_all(text.as_bytes())?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Coordinate-sparse CSV of a transport plan: `i,j,mass`, one row per
/// stored entry (the rank-one marginal correction of entropic plans is not
/// expanded).
pub fn write_plan_csv<R: Real>(path: impl AsRef<Path>, plan: &TransportPlan<R>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "i,j,mass")?;
    for &(i, j, mass) in plan.entries() {
        writeln!(w, "{i},{j},{}", mass.to_f64_lossy())?;
    }
    w.flush()?;
    Ok(())
}
