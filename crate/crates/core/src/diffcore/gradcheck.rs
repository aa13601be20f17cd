//! Central-difference verification of tape gradients.

use std::fmt;

use serde::Serialize;

use super::{DiffError, GradMap, ParamStore};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub h: f64,
    /// Maximum tolerated relative error.
    pub tol: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { h: 1e-5, tol: 1e-4 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EntryCheck {
    pub entry: String,
    pub elements: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub h: f64,
    pub tol: f64,
    pub entries: Vec<EntryCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &EntryCheck> {
        self.entries.iter().filter(|e| !e.passed)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<28} {:>6} {:>12} {:>12}  status",
            "entry", "n", "max rel", "max abs"
        )?;
        for e in &self.entries {
            writeln!(
                f,
                "{:<28} {:>6} {:>12.3e} {:>12.3e}  {}",
                e.entry,
                e.elements,
                e.max_rel_error,
                e.max_abs_error,
                if e.passed { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares `analytic` against `(f(θ+h) − f(θ−h)) / 2h` element-wise for
/// every entry in `entries`.
///
/// `loss` must be deterministic: it is re-evaluated twice per element.
pub fn grad_check<F>(
    loss: F,
    params: &ParamStore,
    analytic: &GradMap,
    entries: &[String],
    opts: GradCheckOptions,
) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&ParamStore) -> f64,
{
    if !(opts.h > 0.0) {
        return Err(DiffError::InvalidStep(opts.h));
    }
    let mut work = params.clone();
    let mut report = GradCheckReport {
        h: opts.h,
        tol: opts.tol,
        entries: Vec::with_capacity(entries.len()),
    };

    for name in entries {
        let base = params
            .get(name)
            .ok_or_else(|| DiffError::UnknownEntry(name.clone()))?
            .clone();
        let grad = analytic
            .get(name)
            .ok_or_else(|| DiffError::UnknownEntry(name.clone()))?;
        if grad.dim() != base.dim() {
            return Err(DiffError::ShapeMismatch {
                entry: name.clone(),
                expected: base.dim(),
                found: grad.dim(),
            });
        }

        let mut check = EntryCheck {
            entry: name.clone(),
            elements: base.len(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst_index: 0,
            passed: true,
        };
        for (flat, (&theta, &a)) in base.iter().zip(grad.iter()).enumerate() {
            let slot = work.get_mut(name).expect("entry exists");
            *slot.iter_mut().nth(flat).unwrap() = theta + opts.h;
            let up = loss(&work);
            let slot = work.get_mut(name).expect("entry exists");
            *slot.iter_mut().nth(flat).unwrap() = theta - opts.h;
            let down = loss(&work);
            let slot = work.get_mut(name).expect("entry exists");
            *slot.iter_mut().nth(flat).unwrap() = theta;

            if !up.is_finite() || !down.is_finite() {
                return Err(DiffError::NonFiniteLoss {
                    entry: name.clone(),
                    index: flat,
                });
            }
            let numeric = (up - down) / (2.0 * opts.h);
            let rel = relative_error(a, numeric);
            if rel > check.max_rel_error {
                check.max_rel_error = rel;
                check.worst_index = flat;
            }
            check.max_abs_error = check.max_abs_error.max((a - numeric).abs());
        }
        check.passed = check.max_rel_error <= opts.tol;
        report.entries.push(check);
    }
    Ok(report)
}
