//! Synthetic routing study: empirical CAR behaviour next to its closed-form
//! expectation under the generating Gaussians.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::backends::{SyntheticBackend, SyntheticBackendConfig};
use crate::calibration::CalibrationProfile;
use crate::error::{CarError, Result};
use crate::eval::{evaluate, Dataset, MatchRule, PolicySetup};
use crate::router::{decide, short_region, Route, ShortRegion};

/// Synthetic PPL draws are resampled below this value.
pub const PPL_FLOOR: f64 = 1.0;

/// Probability that `x ~ N(mu, var)` conditioned on `x ≥ lower` lands in the
/// Long region (the complement of `region`).
pub fn long_mass(region: &ShortRegion, mu: f64, var: f64, lower: f64) -> f64 {
    let n = Normal::new(mu, var.sqrt()).expect("positive variance");
    let above = 1.0 - n.cdf(lower);
    let short: f64 = region
        .intervals
        .iter()
        .map(|&(lo, hi)| {
            let lo = lo.max(lower);
            if hi <= lo {
                0.0
            } else {
                n.cdf(hi) - n.cdf(lo)
            }
        })
        .sum();
    (1.0 - short / above).clamp(0.0, 1.0)
}

/// Expected long-route fraction and accuracy of CAR with `profile` on the
/// synthetic generator `cfg`.
pub fn analytic_car(cfg: &SyntheticBackendConfig, profile: &CalibrationProfile) -> Result<(f64, f64)> {
    let region = short_region(profile)?;
    let l1 = long_mass(&region, cfg.mu1, cfg.var1, PPL_FLOOR);
    let l0 = long_mass(&region, cfg.mu0, cfg.var0, PPL_FLOOR);
    let p = cfg.p_correct;
    let long_rate = p * l1 + (1.0 - p) * l0;
    let accuracy = p * ((1.0 - l1) + l1 * (1.0 - cfg.long_break_probability))
        + (1.0 - p) * l0 * cfg.long_fix_probability;
    Ok((long_rate, accuracy))
}

/// Boundaries of `decide`, located by scanning for route changes and bisecting.
pub fn empirical_boundaries(profile: &CalibrationProfile, lo: f64, hi: f64, steps: usize) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    let step = (hi - lo) / steps as f64;
    let mut prev_x = lo;
    let mut prev = decide(lo, profile)?;
    for i in 1..=steps {
        let x = lo + i as f64 * step;
        let cur = decide(x, profile)?;
        if cur != prev {
            let (mut a, mut b) = (prev_x, x);
            for _ in 0..200 {
                let m = 0.5 * (a + b);
                if m <= a || m >= b {
                    break;
                }
                if decide(m, profile)? == prev {
                    a = m;
                } else {
                    b = m;
                }
            }
            out.push(0.5 * (a + b));
        }
        prev = cur;
        prev_x = x;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridParam {
    Mu1,
    Var1,
    Mu0,
    Var0,
    PCorrect,
    LongFixProbability,
}

impl FromStr for GridParam {
    type Err = CarError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "mu1" => GridParam::Mu1,
            "var1" => GridParam::Var1,
            "mu0" => GridParam::Mu0,
            "var0" => GridParam::Var0,
            "p_correct" => GridParam::PCorrect,
            "long_fix_probability" => GridParam::LongFixProbability,
            other => return Err(CarError::InvalidGrid(format!("unknown parameter {other}"))),
        })
    }
}

impl fmt::Display for GridParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GridParam::Mu1 => "mu1",
            GridParam::Var1 => "var1",
            GridParam::Mu0 => "mu0",
            GridParam::Var0 => "var0",
            GridParam::PCorrect => "p_correct",
            GridParam::LongFixProbability => "long_fix_probability",
        })
    }
}

impl GridParam {
    fn apply(self, cfg: &mut SyntheticBackendConfig, value: f64) {
        match self {
            GridParam::Mu1 => cfg.mu1 = value,
            GridParam::Var1 => cfg.var1 = value,
            GridParam::Mu0 => cfg.mu0 = value,
            GridParam::Var0 => cfg.var0 = value,
            GridParam::PCorrect => cfg.p_correct = value,
            GridParam::LongFixProbability => cfg.long_fix_probability = value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationRow {
    pub param: GridParam,
    pub value: f64,
    pub analytic_boundaries: Vec<f64>,
    pub empirical_boundaries: Vec<f64>,
    pub analytic_long_rate: f64,
    pub empirical_long_rate: f64,
    pub analytic_accuracy: f64,
    pub empirical_accuracy: f64,
}

/// Routes `queries` synthetic queries through CAR at every grid point, using
/// a profile equal to the generating parameters.
pub fn run_simulation(
    base: &SyntheticBackendConfig,
    param: GridParam,
    values: &[f64],
    queries: usize,
) -> Result<Vec<SimulationRow>> {
    if values.is_empty() {
        return Err(CarError::InvalidGrid("no grid values".into()));
    }
    if queries == 0 {
        return Err(CarError::InvalidGrid("need at least one query per point".into()));
    }
    let dataset = Dataset::synthetic("sim", queries, MatchRule::Containment);
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let mut cfg = base.clone();
        param.apply(&mut cfg, value);
        let backend = SyntheticBackend::new(cfg.clone())?;
        let profile = CalibrationProfile::balanced(cfg.mu1, cfg.var1, cfg.mu0, cfg.var0)?;

        let (analytic_long_rate, analytic_accuracy) = analytic_car(&cfg, &profile)?;
        let spread = 10.0 * cfg.var1.max(cfg.var0).sqrt();
        let lo = cfg.mu1.min(cfg.mu0) - spread;
        let hi = cfg.mu1.max(cfg.mu0) + spread;

        let records = evaluate(&dataset, PolicySetup::Car(&profile), &backend)?;
        let n = records.len() as f64;
        let long = records.iter().filter(|r| r.route == Route::Long).count() as f64;
        let correct = records.iter().filter(|r| r.correct).count() as f64;

        rows.push(SimulationRow {
            param,
            value,
            analytic_boundaries: short_region(&profile)?.boundaries(),
            empirical_boundaries: empirical_boundaries(&profile, lo, hi, 20_000)?,
            analytic_long_rate,
            empirical_long_rate: long / n,
            analytic_accuracy,
            empirical_accuracy: correct / n,
        });
    }
    Ok(rows)
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.12}")).collect::<Vec<_>>().join(";")
}

/// Comma-separated table, one line per grid point.
pub fn rows_to_csv(rows: &[SimulationRow]) -> String {
    let mut out = String::from(
        "param,value,analytic_boundaries,empirical_boundaries,analytic_long_rate,empirical_long_rate,analytic_accuracy,empirical_accuracy\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
            r.param,
            r.value,
            join(&r.analytic_boundaries),
            join(&r.empirical_boundaries),
            r.analytic_long_rate,
            r.empirical_long_rate,
            r.analytic_accuracy,
            r.empirical_accuracy
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn long_mass_of_symmetric_split() {
        let p = CalibrationProfile::balanced(1.5, 0.01, 2.0, 0.01).unwrap();
        let region = short_region(&p).unwrap();
        // Boundary at 1.75 is the mean of N(1.75, ·): half the mass is Long.
        let m = long_mass(&region, 1.75, 0.01, f64::NEG_INFINITY);
        assert!((m - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empirical_matches_closed_form_boundary() {
        let p = CalibrationProfile::new(1.15, 0.01, 1.28, 0.01, 0.3).unwrap();
        let b = empirical_boundaries(&p, 0.5, 2.0, 1000).unwrap();
        let closed = short_region(&p).unwrap().boundaries();
        assert_eq!(b.len(), 1);
        assert!((b[0] - closed[0]).abs() < 1e-9);
    }

    #[test]
    fn grid_errors() {
        let base = SyntheticBackendConfig::default();
        assert!(matches!(
            run_simulation(&base, GridParam::Mu0, &[], 10),
            Err(CarError::InvalidGrid(_))
        ));
        assert!(matches!(
            run_simulation(&base, GridParam::Var1, &[0.0], 10),
            Err(CarError::InvalidVariance(_))
        ));
        assert!("sigma".parse::<GridParam>().is_err());
    }
}
