//! Structured results for numerical verification checks.
//!
//! Every check in this crate reduces to comparing two numbers (or a number
//! against a bound) at an explicit tolerance, plus named diagnostic details.
//! Reports are plain data: serializable, printable, and independent of how
//! the check was computed.

use std::collections::BTreeMap;

use serde::Serialize;

/// Outcome of one verification check.
#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    /// Stable machine-readable check name (snake_case).
    pub name: String,
    /// The mathematical statement being verified, in plain language.
    pub anchor: String,
    /// Left-hand side (measured quantity).
    pub lhs: f64,
    /// Right-hand side (target quantity or bound).
    pub rhs: f64,
    /// |lhs − rhs|, or the bound violation for one-sided checks (0 if slack).
    pub abs_gap: f64,
    /// Gap divided by the comparison scale.
    pub rel_gap: f64,
    /// Threshold on the gap named by `gap_kind`.
    pub tolerance: f64,
    /// Which gap the tolerance applies to: "abs" or "rel".
    pub gap_kind: &'static str,
    pub pass: bool,
    /// Named scalar diagnostics (deterministically ordered).
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub details: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub warnings: Vec<String>,
}

fn rel_scale(lhs: f64, rhs: f64) -> f64 {
    lhs.abs().max(rhs.abs()).max(f64::MIN_POSITIVE)
}

impl CheckReport {
    /// Two-sided comparison with an absolute tolerance: |lhs − rhs| ≤ tol.
    pub fn absolute(
        name: impl Into<String>,
        anchor: impl Into<String>,
        lhs: f64,
        rhs: f64,
        tolerance: f64,
    ) -> Self {
        let abs_gap = (lhs - rhs).abs();
        Self {
            name: name.into(),
            anchor: anchor.into(),
            lhs,
            rhs,
            abs_gap,
            rel_gap: abs_gap / rel_scale(lhs, rhs),
            tolerance,
            gap_kind: "abs",
            pass: abs_gap <= tolerance,
            details: BTreeMap::new(),
            warnings: Vec::new(),
        }
    }

    /// Two-sided comparison with a relative tolerance against an explicit
    /// scale: |lhs − rhs| / scale ≤ tol.
    pub fn relative(
        name: impl Into<String>,
        anchor: impl Into<String>,
        lhs: f64,
        rhs: f64,
        scale: f64,
        tolerance: f64,
    ) -> Self {
        let abs_gap = (lhs - rhs).abs();
        let rel_gap = abs_gap / scale.abs().max(f64::MIN_POSITIVE);
        Self {
            name: name.into(),
            anchor: anchor.into(),
            lhs,
            rhs,
            abs_gap,
            rel_gap,
            tolerance,
            gap_kind: "rel",
            pass: rel_gap <= tolerance,
            details: BTreeMap::new(),
            warnings: Vec::new(),
        }
    }

    /// One-sided check `value ≤ bound + slack`.
    pub fn upper_bound(
        name: impl Into<String>,
        anchor: impl Into<String>,
        value: f64,
        bound: f64,
        slack: f64,
    ) -> Self {
        let violation = (value - bound).max(0.0);
        Self {
            name: name.into(),
            anchor: anchor.into(),
            lhs: value,
            rhs: bound,
            abs_gap: violation,
            rel_gap: violation / rel_scale(value, bound),
            tolerance: slack,
            gap_kind: "abs",
            pass: violation <= slack,
            details: BTreeMap::new(),
            warnings: Vec::new(),
        }
    }

    /// One-sided check `value ≥ bound − slack`.
    pub fn lower_bound(
        name: impl Into<String>,
        anchor: impl Into<String>,
        value: f64,
        bound: f64,
        slack: f64,
    ) -> Self {
        let violation = (bound - value).max(0.0);
        Self {
            name: name.into(),
            anchor: anchor.into(),
            lhs: value,
            rhs: bound,
            abs_gap: violation,
            rel_gap: violation / rel_scale(value, bound),
            tolerance: slack,
            gap_kind: "abs",
            pass: violation <= slack,
            details: BTreeMap::new(),
            warnings: Vec::new(),
        }
    }

    pub fn with_detail(mut self, key: impl Into<String>, value: f64) -> Self {
        self.details.insert(key.into(), value);
        self
    }

    pub fn with_warning(mut self, message: impl Into<String>) -> Self {
        self.warnings.push(message.into());
        self
    }

    /// Force-fail a report (used when a structural precondition of the check
    /// itself is violated, e.g. a fit with the wrong sign).
    pub fn and_require(mut self, requirement_met: bool, message: impl Into<String>) -> Self {
        if !requirement_met {
            self.pass = false;
            self.warnings.push(message.into());
        }
        self
    }

    /// One-line human-readable rendering.
    pub fn summary_line(&self) -> String {
        let gap = match self.gap_kind {
            "rel" => self.rel_gap,
            _ => self.abs_gap,
        };
        format!(
            "{} {:28} lhs={:+.6e} rhs={:+.6e} gap={:.3e} tol={:.1e}",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.lhs,
            self.rhs,
            gap,
            self.tolerance
        )
    }
}

/// Aggregate of all checks executed for one scenario run.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    /// Unix timestamp (seconds). Excluded from determinism comparisons.
    pub generated_at_unix: f64,
    pub checks: Vec<CheckReport>,
    /// Wall-clock seconds per stage, deterministically keyed.
    pub timings: BTreeMap<String, f64>,
}

impl RunReport {
    pub fn new(scenario: impl Into<String>, seed: u64) -> Self {
        let now = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0);
        Self {
            scenario: scenario.into(),
            seed,
            generated_at_unix: now,
            checks: Vec::new(),
            timings: BTreeMap::new(),
        }
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("run report serializes")
    }
}
