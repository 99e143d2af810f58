//! Bayes-posterior routing between the short answer and long-form reasoning,
//! plus the percentile-threshold baseline.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backends::{BackendError, GenerationBackend, InferenceQuery};
use crate::calibration::{log_gaussian_pdf, CalibrationProfile};
use crate::error::{CarError, Result, Stage};
use crate::ppl::{compute_ppl, Perplexity};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    Short,
    Long,
}

impl fmt::Display for Route {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Route::Short => f.write_str("short"),
            Route::Long => f.write_str("long"),
        }
    }
}

/// Everything that happened while routing one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingOutcome {
    pub query_id: String,
    pub short_answer: String,
    pub short_tokens: u64,
    pub ppl: Perplexity,
    pub posterior_correct: f64,
    pub route: Route,
    pub long_answer: Option<String>,
    pub long_tokens: u64,
    pub final_answer: String,
    pub total_tokens: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

/// ln[f1(x)·P(C=1)] − ln[f0(x)·P(C=0)].
///
/// Positive means the correct-class hypothesis wins.
pub fn log_posterior_odds(ppl_value: f64, p: &CalibrationProfile) -> Result<f64> {
    p.validate()?;
    if !ppl_value.is_finite() {
        return Err(CarError::InvalidProfile(format!(
            "cannot score non-finite ppl {ppl_value}"
        )));
    }
    let l1 = log_gaussian_pdf(ppl_value, p.mu1, p.var1)? + p.prior1.ln();
    let l0 = log_gaussian_pdf(ppl_value, p.mu0, p.var0)? + p.prior0.ln();
    Ok(match (l1 == f64::NEG_INFINITY, l0 == f64::NEG_INFINITY) {
        (true, _) => f64::NEG_INFINITY,
        (false, true) => f64::INFINITY,
        _ => l1 - l0,
    })
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// P(C=1 | PPL) under the profile's two Gaussians.
pub fn posterior_correct(ppl_value: f64, p: &CalibrationProfile) -> Result<f64> {
    Ok(logistic(log_posterior_odds(ppl_value, p)?))
}

/// P(C=0 | PPL); the complement of [`posterior_correct`].
pub fn posterior_incorrect(ppl_value: f64, p: &CalibrationProfile) -> Result<f64> {
    Ok(logistic(-log_posterior_odds(ppl_value, p)?))
}

/// Short only when the correct-class posterior strictly exceeds one half.
///
/// Compares the log odds against zero, which is the same test as
/// `posterior > 0.5` without the rounding of the logistic near the boundary.
pub fn decide(ppl_value: f64, p: &CalibrationProfile) -> Result<Route> {
    Ok(if log_posterior_odds(ppl_value, p)? > 0.0 {
        Route::Short
    } else {
        Route::Long
    })
}

/// Linear-interpolation percentile: rank `q/100·(n−1)` in the sorted values.
pub fn percentile_threshold(ppls: &[f64], q: f64) -> Result<f64> {
    if ppls.is_empty() {
        return Err(CarError::EmptySequence);
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(CarError::Config(format!("percentile {q} outside [0, 100]")));
    }
    if let Some(i) = ppls.iter().position(|v| !v.is_finite()) {
        return Err(CarError::InvariantViolation(format!(
            "non-finite ppl at index {i}"
        )));
    }
    let mut sorted = ppls.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// Long only when the PPL strictly exceeds the threshold.
pub fn threshold_decide(ppl_value: f64, threshold: f64) -> Route {
    if ppl_value > threshold {
        Route::Long
    } else {
        Route::Short
    }
}

/// The set of PPL values routed Short, as disjoint open intervals in
/// increasing order. Endpoints may be infinite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShortRegion {
    pub intervals: Vec<(f64, f64)>,
}

impl ShortRegion {
    pub fn contains(&self, x: f64) -> bool {
        self.intervals.iter().any(|&(lo, hi)| x > lo && x < hi)
    }

    /// Finite interval endpoints, i.e. the decision boundaries.
    pub fn boundaries(&self) -> Vec<f64> {
        self.intervals
            .iter()
            .flat_map(|&(lo, hi)| [lo, hi])
            .filter(|v| v.is_finite())
            .collect()
    }
}

/// Closed-form Short region of [`decide`].
///
/// Equal variances give a single threshold at
/// `(mu1 + mu0)/2 + var·ln(prior1/prior0)/(mu0 − mu1)`; unequal variances give
/// a quadratic discriminant whose Short set is an interval or the complement
/// of one.
pub fn short_region(p: &CalibrationProfile) -> Result<ShortRegion> {
    p.validate()?;
    let all = ShortRegion {
        intervals: vec![(f64::NEG_INFINITY, f64::INFINITY)],
    };
    let none = ShortRegion { intervals: vec![] };
    if p.prior1 == 0.0 {
        return Ok(none);
    }
    if p.prior0 == 0.0 {
        return Ok(all);
    }
    let log_prior_ratio = p.prior1.ln() - p.prior0.ln();

    if p.var1 == p.var0 {
        let var = p.var1;
        if p.mu1 == p.mu0 {
            return Ok(if log_prior_ratio > 0.0 { all } else { none });
        }
        let x = 0.5 * (p.mu1 + p.mu0) + var * log_prior_ratio / (p.mu0 - p.mu1);
        let interval = if p.mu1 < p.mu0 {
            (f64::NEG_INFINITY, x)
        } else {
            (x, f64::INFINITY)
        };
        return Ok(ShortRegion {
            intervals: vec![interval],
        });
    }

    // Work in y = x − mu1 to keep the coefficients well conditioned.
    let delta = p.mu0 - p.mu1;
    let a = 0.5 / p.var0 - 0.5 / p.var1;
    let b = -delta / p.var0;
    let c = delta * delta / (2.0 * p.var0) + log_prior_ratio - 0.5 * (p.var1 / p.var0).ln();
    let disc = b * b - 4.0 * a * c;

    if disc <= 0.0 {
        // No sign change: d(y) has the sign of `a` everywhere (up to a tangent point).
        return Ok(if a > 0.0 { all } else { none });
    }
    let sq = disc.sqrt();
    let q = -0.5 * (b + if b >= 0.0 { sq } else { -sq });
    // |q| >= sq > 0, so both divisions are safe.
    let (r1, r2) = (q / a, c / q);
    let (lo, hi) = if r1 < r2 { (r1, r2) } else { (r2, r1) };
    let (lo, hi) = (lo + p.mu1, hi + p.mu1);
    Ok(if a < 0.0 {
        ShortRegion {
            intervals: vec![(lo, hi)],
        }
    } else {
        ShortRegion {
            intervals: vec![(f64::NEG_INFINITY, lo), (hi, f64::INFINITY)],
        }
    })
}

/// Short-answer first; escalates to long-form reasoning when [`decide`] says Long.
pub fn route_query(
    query: &InferenceQuery,
    backend: &dyn GenerationBackend,
    p: &CalibrationProfile,
) -> Result<RoutingOutcome> {
    let short = backend
        .generate_short(query)
        .map_err(|source| CarError::Backend {
            stage: Stage::Short,
            source,
        })?;
    let logprobs = short.logprobs.as_ref().ok_or(CarError::Backend {
        stage: Stage::Short,
        source: BackendError::MissingLogprobs,
    })?;
    let ppl = compute_ppl(logprobs)?;
    let posterior = posterior_correct(ppl.value, p)?;
    let route = decide(ppl.value, p)?;
    let mut diagnostics = short.diagnostics;

    let (long_answer, long_tokens, final_answer) = match route {
        Route::Short => (None, 0, short.answer.clone()),
        Route::Long => {
            let long = backend
                .generate_long(query)
                .map_err(|source| CarError::Backend {
                    stage: Stage::Long,
                    source,
                })?;
            diagnostics.extend(long.diagnostics);
            (Some(long.answer.clone()), long.generated_tokens, long.answer)
        }
    };

    Ok(RoutingOutcome {
        query_id: query.query_id.clone(),
        short_answer: short.answer,
        short_tokens: short.generated_tokens,
        ppl,
        posterior_correct: posterior,
        route,
        long_answer,
        long_tokens,
        final_answer,
        total_tokens: short.generated_tokens + long_tokens,
        diagnostics,
    })
}
