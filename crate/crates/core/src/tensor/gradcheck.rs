//! Central finite-difference check of tape gradients.

use std::sync::Arc;

use super::{DiffTensor, Tape};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Denominator floor of the relative error, so that gradients at the
    /// level of finite-difference noise are compared absolutely.
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tol: 1e-4,
            abs_floor: 1e-5,
        }
    }
}

/// Which coordinates to probe: `(tensor index, flat element index)` pairs.
#[derive(Debug, Clone)]
pub enum Probe {
    All,
    Coords(Vec<(usize, usize)>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordCheck {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GradCheckFailure {
    /// The function produced NaN/Inf at or around this coordinate.
    NonFinite {
        tensor: usize,
        index: usize,
    },
    /// One-sided slopes disagree: the function has a kink here.
    NonDifferentiable {
        tensor: usize,
        index: usize,
        forward: f64,
        backward: f64,
    },
    Tolerance {
        tensor: usize,
        index: usize,
        rel_error: f64,
    },
    /// `f` returned an error; its message.
    Evaluation(String),
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub coords: Vec<CoordCheck>,
    pub max_rel_error: f64,
    pub failures: Vec<GradCheckFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub(crate) fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of the scalar function `f` at `point` against
/// central differences, coordinate by coordinate.
///
/// `f` receives the point tensors (registered as leaves on an active tape for
/// the analytic pass, plain constants for the perturbed evaluations) and must
/// return a one-element tensor.
pub fn grad_check<F, E>(f: F, point: &[DiffTensor<f64>], probe: &Probe, cfg: &GradCheckConfig) -> GradCheckReport
where
    F: Fn(&Tape<f64>, &[DiffTensor<f64>]) -> Result<DiffTensor<f64>, E>,
    E: std::fmt::Display,
{
    let mut report = GradCheckReport {
        coords: Vec::new(),
        max_rel_error: 0.0,
        failures: Vec::new(),
    };
    let tape = Tape::new();
    let leaves: Vec<_> = point.iter().map(|t| tape.leaf(t)).collect();
    let loss = match f(&tape, &leaves) {
        Ok(l) => l,
        Err(e) => {
            report.failures.push(GradCheckFailure::Evaluation(e.to_string()));
            return report;
        }
    };
    let grads = match tape.backward(&loss) {
        Ok(g) => g,
        Err(e) => {
            report.failures.push(GradCheckFailure::Evaluation(e.to_string()));
            return report;
        }
    };
    let analytic: Vec<Vec<f64>> = leaves.iter().map(|l| grads.wrt_or_zero(l).to_f64_vec()).collect();
    let base = loss.item();

    let coords: Vec<(usize, usize)> = match probe {
        Probe::All => point
            .iter()
            .enumerate()
            .flat_map(|(ti, t)| (0..t.len()).map(move |i| (ti, i)))
            .collect(),
        Probe::Coords(c) => c.clone(),
    };

    let eval = |ti: usize, idx: usize, delta: f64| -> Result<f64, E> {
        let quiet = Tape::inactive();
        let mut shifted: Vec<DiffTensor<f64>> = point.to_vec();
        let mut vals = shifted[ti].values().to_vec();
        vals[idx] += delta;
        shifted[ti] = DiffTensor::from_parts(shifted[ti].shape().to_vec(), Arc::new(vals), None);
        Ok(f(&quiet, &shifted)?.item())
    };

    let h = cfg.step;
    for (ti, idx) in coords {
        let (plus, minus) = match (eval(ti, idx, h), eval(ti, idx, -h)) {
            (Ok(p), Ok(m)) => (p, m),
            (Err(e), _) | (_, Err(e)) => {
                report.failures.push(GradCheckFailure::Evaluation(e.to_string()));
                continue;
            }
        };
        let a = analytic[ti][idx];
        if !(plus.is_finite() && minus.is_finite() && base.is_finite() && a.is_finite()) {
            report.failures.push(GradCheckFailure::NonFinite { tensor: ti, index: idx });
            continue;
        }
        let forward = (plus - base) / h;
        let backward = (base - minus) / h;
        if (forward - backward).abs() > h.sqrt() * 1f64.max(forward.abs()).max(backward.abs()) {
            report.failures.push(GradCheckFailure::NonDifferentiable {
                tensor: ti,
                index: idx,
                forward,
                backward,
            });
            continue;
        }
        let numeric = (plus - minus) / (2.0 * h);
        let rel = relative_error(a, numeric, cfg.abs_floor);
        report.max_rel_error = report.max_rel_error.max(rel);
        if rel > cfg.tol {
            report.failures.push(GradCheckFailure::Tolerance {
                tensor: ti,
                index: idx,
                rel_error: rel,
            });
        }
        report.coords.push(CoordCheck {
            tensor: ti,
            index: idx,
            analytic: a,
            numeric,
            rel_error: rel,
        });
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_passes() {
        let x = DiffTensor::new(&[3], vec![0.3, -1.2, 2.5]).unwrap();
        let report = grad_check(
            |tape, p| {
                let sq = tape.mul(&p[0], &p[0])?;
                tape.sum(&sq)
            },
            &[x],
            &Probe::All,
            &GradCheckConfig::default(),
        );
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.coords.len(), 3);
    }

    #[test]
    fn abs_at_zero_is_reported_as_kink() {
        let x = DiffTensor::new(&[1], vec![0.0]).unwrap();
        let report = grad_check(
            |tape, p| tape.sum(&tape.abs(&p[0])?),
            &[x],
            &Probe::All,
            &GradCheckConfig::default(),
        );
        assert!(!report.passed());
        assert!(matches!(
            report.failures[0],
            GradCheckFailure::NonDifferentiable { tensor: 0, index: 0, .. }
        ));
    }

    #[test]
    fn nan_is_reported_with_coordinate() {
        let x = DiffTensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let report = grad_check(
            |tape, p| {
                let nan = DiffTensor::new(&[2], vec![0.0, f64::NAN])?;
                tape.sum(&tape.mul(&p[0], &nan)?)
            },
            &[x],
            &Probe::Coords(vec![(0, 1)]),
            &GradCheckConfig::default(),
        );
        assert_eq!(report.failures, vec![GradCheckFailure::NonFinite { tensor: 0, index: 1 }]);
    }
}
