//! Central finite-difference checks of analytic gradients.

use rand::seq::index::sample;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::noise::seeded;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// Check at most this many coordinates (sampled with `seed`).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-4,
            tolerance: 1e-4,
            floor: 1e-6,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_coord: Option<usize>,
    pub tolerance: f64,
    pub pass: bool,
}

/// Compares `analytic` against (f(p+h) − f(p−h))/2h coordinate by coordinate.
///
/// Relative error is |a − n| / max(|a|, |n|, floor).
pub fn grad_check<F>(point: &[f64], analytic: &[f64], mut loss: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if point.len() != analytic.len() {
        return Err(Error::Dimension {
            expected: point.len(),
            got: analytic.len(),
        });
    }
    let base = loss(point)?;
    if !base.is_finite() {
        return Err(Error::NonFinite {
            what: "loss at probe point".into(),
            indices: vec![],
        });
    }
    let coords: Vec<usize> = match opts.max_coords {
        Some(k) if k < point.len() => {
            let mut idx = sample(&mut seeded(opts.seed), point.len(), k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..point.len()).collect(),
    };
    let mut probe = point.to_vec();
    let mut report = GradCheckReport {
        checked: coords.len(),
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_coord: None,
        tolerance: opts.tolerance,
        pass: true,
    };
    for &i in &coords {
        let orig = probe[i];
        probe[i] = orig + opts.step;
        let up = loss(&probe)?;
        probe[i] = orig - opts.step;
        let down = loss(&probe)?;
        probe[i] = orig;
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::NonFinite {
                what: "loss during finite differences".into(),
                indices: vec![i],
            });
        }
        let numeric = (up - down) / (2.0 * opts.step);
        let abs = (analytic[i] - numeric).abs();
        let rel = abs / analytic[i].abs().max(numeric.abs()).max(opts.floor);
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error || report.worst_coord.is_none() {
            report.max_rel_error = rel;
            report.worst_coord = Some(i);
        }
    }
    report.pass = report.max_rel_error < opts.tolerance;
    Ok(report)
}
