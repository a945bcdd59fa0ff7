//! Finite-difference verification of analytic gradients.
//!
//! The checker re-evaluates a scalar loss with individual parameter entries
//! perturbed by ±h and compares the central difference against the analytic
//! gradient. It is deliberately independent of how the analytic gradients
//! were produced: callers hand over a plain evaluation closure and a map of
//! gradient tensors.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Tuning knobs for a finite-difference check.
#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Maximum allowed relative error.
    pub tolerance: f64,
    /// Entries where both analytic and numeric magnitudes fall below this
    /// floor count as matching (the relative error is noise there).
    pub absolute_floor: f64,
    /// Cap on checked entries per tensor; larger tensors are subsampled.
    pub max_entries_per_tensor: usize,
    /// Seed for the entry subsampling.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            absolute_floor: 1e-7,
            max_entries_per_tensor: 16,
            seed: 0,
        }
    }
}

/// The worst-offending entry of a check.
#[derive(Debug, Clone)]
pub struct WorstEntry {
    pub name: String,
    pub flat_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries_checked: usize,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub worst: Option<WorstEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance
    }
}

/// Relative error with an absolute floor: zero when both magnitudes are
/// below `floor`, else `|a − n| / max(|a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom < floor {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Verify `analytic` gradients of `eval_loss` over every parameter.
///
/// `eval_loss` must be a pure function of the store contents; it is called
/// twice per checked entry with one entry nudged by ±step.
pub fn check_gradients<F>(
    store: &ParamStore,
    analytic: &BTreeMap<String, Tensor>,
    mut eval_loss: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut work = store.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        entries_checked: 0,
        max_relative_error: 0.0,
        tolerance: opts.tolerance,
        worst: None,
    };
    for name in store.names() {
        let grad = analytic.get(name).ok_or_else(|| {
            Error::Data(format!("no analytic gradient supplied for parameter {name:?}"))
        })?;
        let n = grad.len();
        if grad.shape() != store.get(name)?.shape() {
            return Err(Error::Data(format!(
                "gradient shape {:?} does not match parameter {name:?} shape {:?}",
                grad.shape(),
                store.get(name)?.shape()
            )));
        }
        let indices: Vec<usize> = if n <= opts.max_entries_per_tensor {
            (0..n).collect()
        } else {
            let mut picked = sample(&mut rng, n, opts.max_entries_per_tensor).into_vec();
            picked.sort_unstable();
            picked
        };
        let grad_flat = grad.as_slice().expect("gradients are contiguous");
        for &idx in &indices {
            let original = work.get(name)?.as_slice().unwrap()[idx];
            {
                let t = work.get_mut(name)?;
                t.as_slice_mut().unwrap()[idx] = original + opts.step;
            }
            let plus = eval_loss(&work)?;
            {
                let t = work.get_mut(name)?;
                t.as_slice_mut().unwrap()[idx] = original - opts.step;
            }
            let minus = eval_loss(&work)?;
            {
                let t = work.get_mut(name)?;
                t.as_slice_mut().unwrap()[idx] = original;
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = grad_flat[idx];
            let rel = relative_error(a, numeric, opts.absolute_floor);
            report.entries_checked += 1;
            if rel >= report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = Some(WorstEntry {
                    name: name.clone(),
                    flat_index: idx,
                    analytic: a,
                    numeric,
                    relative_error: rel,
                });
            }
        }
    }
    Ok(report)
}
