//! Class-conditional Gaussian calibration of short-answer perplexity.
//!
//! Correct and incorrect short answers each get one Gaussian over PPL,
//! fitted with the maximum-likelihood (1/n) variance. The majority class is
//! subsampled first so both classes contribute equally and the priors come
//! out at one half each.

use std::f64::consts::PI;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{CarError, Class, Result};
use crate::io::write_atomic;

pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-6;
pub const PROFILE_FORMAT_VERSION: u64 = 1;

const PRIOR_SUM_TOLERANCE: f64 = 1e-12;

/// One (PPL, correctness) observation from a calibration run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSample {
    pub example_id: String,
    pub ppl: f64,
    pub correct: bool,
}

impl CalibrationSample {
    pub fn new(example_id: impl Into<String>, ppl: f64, correct: bool) -> Self {
        Self {
            example_id: example_id.into(),
            ppl,
            correct,
        }
    }
}

/// Fitted Gaussians and priors for the correct (`1`) and incorrect (`0`) classes.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationProfile {
    pub mu1: f64,
    pub var1: f64,
    pub mu0: f64,
    pub var0: f64,
    pub prior1: f64,
    pub prior0: f64,
    pub n1: u64,
    pub n0: u64,
    pub seed: u64,
    pub variance_floor: f64,
}

impl CalibrationProfile {
    /// Builds a profile from explicit parameters, checking every invariant.
    pub fn new(mu1: f64, var1: f64, mu0: f64, var0: f64, prior1: f64) -> Result<Self> {
        let floor = DEFAULT_VARIANCE_FLOOR.min(var1).min(var0);
        let p = Self {
            mu1,
            var1,
            mu0,
            var0,
            prior1,
            prior0: 1.0 - prior1,
            n1: 0,
            n0: 0,
            seed: 0,
            variance_floor: floor,
        };
        p.validate()?;
        Ok(p)
    }

    /// Equal priors, as produced by balanced fitting.
    pub fn balanced(mu1: f64, var1: f64, mu0: f64, var0: f64) -> Result<Self> {
        Self::new(mu1, var1, mu0, var0, 0.5)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("mu1", self.mu1), ("mu0", self.mu0)] {
            if !v.is_finite() {
                return Err(CarError::InvalidProfile(format!("{name} is not finite")));
            }
        }
        if !(self.variance_floor > 0.0 && self.variance_floor.is_finite()) {
            return Err(CarError::InvalidVariance(self.variance_floor));
        }
        for (name, v) in [("var1", self.var1), ("var0", self.var0)] {
            if !v.is_finite() || v < self.variance_floor {
                return Err(CarError::InvalidProfile(format!(
                    "{name} = {v} is below the variance floor {}",
                    self.variance_floor
                )));
            }
        }
        for (name, v) in [("prior1", self.prior1), ("prior0", self.prior0)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(CarError::InvalidProfile(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if (self.prior1 + self.prior0 - 1.0).abs() > PRIOR_SUM_TOLERANCE {
            return Err(CarError::InvalidProfile(format!(
                "priors sum to {}",
                self.prior1 + self.prior0
            )));
        }
        Ok(())
    }

    /// Serialized profile document, 17 significant digits per real field.
    pub fn to_document(&self) -> String {
        let real = |v: f64| format!("{v:.16e}");
        format!(
            "{{\n  \"format_version\": {},\n  \"mu1\": {},\n  \"var1\": {},\n  \"mu0\": {},\n  \"var0\": {},\n  \"prior1\": {},\n  \"prior0\": {},\n  \"n1\": {},\n  \"n0\": {},\n  \"seed\": {},\n  \"variance_floor\": {}\n}}\n",
            PROFILE_FORMAT_VERSION,
            real(self.mu1),
            real(self.var1),
            real(self.mu0),
            real(self.var0),
            real(self.prior1),
            real(self.prior0),
            self.n1,
            self.n0,
            self.seed,
            real(self.variance_floor),
        )
    }

    pub fn from_document(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)
            .map_err(|e| CarError::schema("<document>", e.to_string()))?;
        let Value::Object(map) = value else {
            return Err(CarError::schema("<document>", "expected a JSON object"));
        };
        const FIELDS: [&str; 11] = [
            "format_version",
            "mu1",
            "var1",
            "mu0",
            "var0",
            "prior1",
            "prior0",
            "n1",
            "n0",
            "seed",
            "variance_floor",
        ];
        if let Some(unknown) = map.keys().find(|k| !FIELDS.contains(&k.as_str())) {
            return Err(CarError::schema(unknown.clone(), "unknown field"));
        }
        let version = req_u64(&map, "format_version")?;
        if version != PROFILE_FORMAT_VERSION {
            return Err(CarError::schema(
                "format_version",
                format!("unsupported version {version}"),
            ));
        }
        let p = Self {
            mu1: req_f64(&map, "mu1")?,
            var1: req_f64(&map, "var1")?,
            mu0: req_f64(&map, "mu0")?,
            var0: req_f64(&map, "var0")?,
            prior1: req_f64(&map, "prior1")?,
            prior0: req_f64(&map, "prior0")?,
            n1: req_u64(&map, "n1")?,
            n0: req_u64(&map, "n0")?,
            seed: req_u64(&map, "seed")?,
            variance_floor: req_f64(&map, "variance_floor")?,
        };
        p.validate()
            .map_err(|e| CarError::InvariantViolation(e.to_string()))?;
        Ok(p)
    }

    /// Hex SHA-256 of the serialized document; identifies the profile in reports.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_document().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn req<'a>(map: &'a Map<String, Value>, field: &str) -> Result<&'a Value> {
    map.get(field)
        .ok_or_else(|| CarError::schema(field, "missing field"))
}

fn req_f64(map: &Map<String, Value>, field: &str) -> Result<f64> {
    req(map, field)?
        .as_f64()
        .ok_or_else(|| CarError::schema(field, "expected a number"))
}

fn req_u64(map: &Map<String, Value>, field: &str) -> Result<u64> {
    req(map, field)?
        .as_u64()
        .ok_or_else(|| CarError::schema(field, "expected a non-negative integer"))
}

pub fn save_profile(p: &CalibrationProfile, path: impl AsRef<Path>) -> Result<()> {
    p.validate()?;
    write_atomic(path.as_ref(), p.to_document().as_bytes())
}

pub fn load_profile(path: impl AsRef<Path>) -> Result<CalibrationProfile> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| CarError::io(path, e))?;
    CalibrationProfile::from_document(&text)
}

fn class_counts(samples: &[CalibrationSample]) -> (usize, usize) {
    let correct = samples.iter().filter(|s| s.correct).count();
    (correct, samples.len() - correct)
}

/// Subsamples the majority class (uniformly, without replacement) down to
/// the minority count. Input order is preserved in the output.
pub fn balance_samples(samples: &[CalibrationSample], seed: u64) -> Result<Vec<CalibrationSample>> {
    let (n1, n0) = class_counts(samples);
    if n1 == 0 {
        return Err(CarError::MissingClass(Class::Correct));
    }
    if n0 == 0 {
        return Err(CarError::MissingClass(Class::Incorrect));
    }
    if n1 == n0 {
        return Ok(samples.to_vec());
    }
    let majority_is_correct = n1 > n0;
    let (major, minor) = if majority_is_correct { (n1, n0) } else { (n0, n1) };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; major];
    for i in rand::seq::index::sample(&mut rng, major, minor) {
        keep[i] = true;
    }

    let mut rank = 0usize;
    let mut out = Vec::with_capacity(2 * minor);
    for s in samples {
        if s.correct == majority_is_correct {
            if keep[rank] {
                out.push(s.clone());
            }
            rank += 1;
        } else {
            out.push(s.clone());
        }
    }
    Ok(out)
}

/// Running mean and sum of squared deviations (Welford).
#[derive(Default)]
struct Moments {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn mle_variance(&self) -> f64 {
        self.m2 / self.n as f64
    }
}

/// Fits both class Gaussians from balanced samples.
///
/// Variances use the 1/n denominator and are clamped up to `variance_floor`.
/// The recorded seed is 0; use [`fit_balanced`] to balance and fit in one go.
pub fn fit_profile(samples: &[CalibrationSample], variance_floor: f64) -> Result<CalibrationProfile> {
    if !(variance_floor > 0.0 && variance_floor.is_finite()) {
        return Err(CarError::InvalidVariance(variance_floor));
    }
    let mut correct = Moments::default();
    let mut incorrect = Moments::default();
    for s in samples {
        if !s.ppl.is_finite() {
            return Err(CarError::InvariantViolation(format!(
                "sample {} has non-finite ppl",
                s.example_id
            )));
        }
        if s.correct {
            correct.push(s.ppl);
        } else {
            incorrect.push(s.ppl);
        }
    }
    if correct.n == 0 {
        return Err(CarError::MissingClass(Class::Correct));
    }
    if incorrect.n == 0 {
        return Err(CarError::MissingClass(Class::Incorrect));
    }
    if correct.n != incorrect.n {
        return Err(CarError::UnbalancedSamples {
            correct: correct.n as usize,
            incorrect: incorrect.n as usize,
        });
    }

    let total = (correct.n + incorrect.n) as f64;
    let prior0 = incorrect.n as f64 / total;
    Ok(CalibrationProfile {
        mu1: correct.mean,
        var1: correct.mle_variance().max(variance_floor),
        mu0: incorrect.mean,
        var0: incorrect.mle_variance().max(variance_floor),
        prior1: 1.0 - prior0,
        prior0,
        n1: correct.n,
        n0: incorrect.n,
        seed: 0,
        variance_floor,
    })
}

/// Balances with `seed`, fits, and records the seed in the profile.
pub fn fit_balanced(
    samples: &[CalibrationSample],
    seed: u64,
    variance_floor: f64,
) -> Result<CalibrationProfile> {
    let balanced = balance_samples(samples, seed)?;
    let mut profile = fit_profile(&balanced, variance_floor)?;
    profile.seed = seed;
    Ok(profile)
}

pub fn log_gaussian_pdf(x: f64, mu: f64, var: f64) -> Result<f64> {
    if var <= 0.0 || !var.is_finite() {
        return Err(CarError::InvalidVariance(var));
    }
    let d = x - mu;
    Ok(-0.5 * (2.0 * PI * var).ln() - d * d / (2.0 * var))
}

pub fn gaussian_pdf(x: f64, mu: f64, var: f64) -> Result<f64> {
    Ok(log_gaussian_pdf(x, mu, var)?.exp())
}
