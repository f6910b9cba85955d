//! Central finite-difference gradient oracle.

use std::fmt;

use super::rng::SeededRng;
use super::tensor::{Gradients, ParamId, ParamSet};
use crate::error::{Error, Result};

/// Denominator floor so that near-zero gradients compare absolutely.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub entries_checked: usize,
    pub worst_index: usize,
    pub worst_relative_error: f64,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tol: f64,
    pub step: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn worst_relative_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.worst_relative_error)
            .fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| !p.passed)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<28} {:>8} {:>12} {:>14} {:>14}  status",
            "parameter", "checked", "worst_rel", "analytic", "numeric"
        )?;
        for p in &self.params {
            writeln!(
                f,
                "{:<28} {:>8} {:>12.3e} {:>14.6e} {:>14.6e}  {}",
                p.name,
                p.entries_checked,
                p.worst_relative_error,
                p.analytic,
                p.numeric,
                if p.passed { "PASS" } else { "FAIL" }
            )?;
        }
        write!(
            f,
            "overall: {} (tol {:.1e}, step {:.1e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.tol,
            self.step
        )
    }
}

/// Compares every scalar entry of `grads` against `(f(θ+h) − f(θ−h)) / 2h`.
pub fn finite_diff_check<F>(
    params: &ParamSet,
    grads: &Gradients,
    f: F,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    check(params, grads, f, step, tol, None)
}

/// Like [`finite_diff_check`], but probes at most `per_param` randomly
/// chosen entries of each parameter.
pub fn finite_diff_check_sampled<F>(
    params: &ParamSet,
    grads: &Gradients,
    f: F,
    step: f64,
    tol: f64,
    per_param: usize,
    rng: &mut SeededRng,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    check(params, grads, f, step, tol, Some((per_param, rng)))
}

fn check<F>(
    params: &ParamSet,
    grads: &Gradients,
    mut f: F,
    step: f64,
    tol: f64,
    sample: Option<(usize, &mut SeededRng)>,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&step) {
        return Err(Error::Config(format!(
            "finite-difference step {step:e} outside [1e-7, 1e-3]"
        )));
    }
    let first = f(params)?;
    let second = f(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut work = params.clone();
    let mut sample = sample;
    let mut out = Vec::with_capacity(params.len());
    for id in params.ids() {
        let n = params.get(id).len();
        let entries: Vec<usize> = match sample.as_mut() {
            Some((k, rng)) if *k < n => {
                let mut all: Vec<usize> = (0..n).collect();
                rng.shuffle(&mut all);
                all.truncate(*k);
                all.sort_unstable();
                all
            }
            _ => (0..n).collect(),
        };
        out.push(check_param(&mut work, grads, id, &entries, &mut f, step, tol)?);
    }
    Ok(GradCheckReport {
        tol,
        step,
        params: out,
    })
}

fn check_param<F>(
    work: &mut ParamSet,
    grads: &Gradients,
    id: ParamId,
    entries: &[usize],
    f: &mut F,
    step: f64,
    tol: f64,
) -> Result<ParamCheck>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    let mut worst = ParamCheck {
        name: work.name(id).to_string(),
        entries_checked: entries.len(),
        worst_index: 0,
        worst_relative_error: 0.0,
        analytic: 0.0,
        numeric: 0.0,
        passed: true,
    };
    for &k in entries {
        let orig = work.get(id).values()[k];
        work.get_mut(id).values_mut()[k] = orig + step;
        let plus = f(work)?;
        work.get_mut(id).values_mut()[k] = orig - step;
        let minus = f(work)?;
        work.get_mut(id).values_mut()[k] = orig;

        let numeric = (plus - minus) / (2.0 * step);
        let analytic = grads.get(id)[k];
        let err = relative_error(analytic, numeric);
        if !err.is_finite() || err > worst.worst_relative_error || k == entries[0] {
            worst.worst_index = k;
            worst.worst_relative_error = if err.is_finite() { err } else { f64::INFINITY };
            worst.analytic = analytic;
            worst.numeric = numeric;
        }
    }
    worst.passed = worst.worst_relative_error <= tol;
    Ok(worst)
}
