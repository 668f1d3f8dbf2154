//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

/// Absolute floor on the relative-error denominator, so coordinates with a
/// vanishing gradient are judged on absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Blocks larger than this are probed on a seeded random subset of this
    /// many coordinates (at least 64).
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            max_coords: 256,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    pub checked: usize,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares `analytic` against `(f(x+h) - f(x-h)) / 2h` coordinate by coordinate.
pub fn grad_check<F>(
    loss: F,
    params: &[f64],
    analytic: &[f64],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if !(cfg.step > 0.0) {
        return Err(Error::Config(format!("step must be > 0, got {}", cfg.step)));
    }
    if params.len() != analytic.len() {
        return Err(Error::Dimension(format!(
            "{} params but {} gradient entries",
            params.len(),
            analytic.len()
        )));
    }
    let limit = cfg.max_coords.max(64);
    let coords: Vec<usize> = if params.len() <= limit {
        (0..params.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut picked = sample(&mut rng, params.len(), limit).into_vec();
        picked.sort_unstable();
        picked
    };

    let mut x = params.to_vec();
    let mut worst = (0.0f64, 0usize);
    for &k in &coords {
        let orig = x[k];
        x[k] = orig + cfg.step;
        let up = loss(&x)?;
        x[k] = orig - cfg.step;
        let down = loss(&x)?;
        x[k] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NumericalInstability(format!(
                "non-finite loss while probing coordinate {k}"
            )));
        }
        let numeric = (up - down) / (2.0 * cfg.step);
        let err = relative_error(analytic[k], numeric);
        if err > worst.0 || err.is_nan() {
            worst = (err, k);
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst_coordinate: worst.1,
        checked: coords.len(),
        passed: worst.0 < cfg.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let f = |x: &[f64]| Ok(x.iter().map(|v| v * v).sum::<f64>());
        let cfg = GradCheckConfig {
            tolerance: 1e-8,
            ..Default::default()
        };
        let r = grad_check(f, &[1.0, 2.0], &[2.0, 4.0], &cfg).unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.checked, 2);
    }

    #[test]
    fn wrong_gradient_fails() {
        let f = |x: &[f64]| Ok(x.iter().map(|v| v * v).sum::<f64>());
        let r = grad_check(f, &[1.0, 2.0], &[2.0, 5.0], &GradCheckConfig::default()).unwrap();
        assert!(!r.passed);
        assert_eq!(r.worst_coordinate, 1);
    }

    #[test]
    fn non_finite_probe_is_reported() {
        let f = |x: &[f64]| Ok(if x[0] > 1.0 { f64::NAN } else { x[0] });
        let r = grad_check(f, &[1.0], &[1.0], &GradCheckConfig::default());
        assert!(matches!(r, Err(Error::NumericalInstability(_))));
    }

    #[test]
    fn subsamples_large_blocks() {
        let n = 1000;
        let f = |x: &[f64]| Ok(x.iter().map(|v| 0.5 * v * v).sum::<f64>());
        let x: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        let cfg = GradCheckConfig {
            max_coords: 10,
            ..Default::default()
        };
        let r = grad_check(f, &x, &x, &cfg).unwrap();
        assert_eq!(r.checked, 64);
        assert!(r.passed);
    }
}
