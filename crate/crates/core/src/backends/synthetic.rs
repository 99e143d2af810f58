//! Seeded simulator that draws short-answer PPL from one Gaussian per
//! correctness class.
//!
//! Every draw for a query is a pure function of `(config, seed, query_id,
//! stage)`, like greedy decoding: asking the same question twice yields the
//! same answer, whatever the request order or thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    extract_final_answer, BackendError, GenerationBackend, GenerationResult, InferenceQuery,
    ANSWER_MARKER,
};
use crate::error::{CarError, Result};
use crate::ppl::TokenLogProbs;
use crate::seed::{derive_seed, fnv1a};

/// A token-count distribution: a constant or a uniform integer range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TokenCount {
    Constant(u64),
    Uniform { min: u64, max: u64 },
}

impl TokenCount {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        match *self {
            TokenCount::Constant(n) => n,
            TokenCount::Uniform { min, max } => rng.random_range(min..=max),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            TokenCount::Constant(n) => n as f64,
            TokenCount::Uniform { min, max } => (min + max) as f64 / 2.0,
        }
    }

    pub fn min(&self) -> u64 {
        match *self {
            TokenCount::Constant(n) => n,
            TokenCount::Uniform { min, .. } => min,
        }
    }

    pub fn max(&self) -> u64 {
        match *self {
            TokenCount::Constant(n) => n,
            TokenCount::Uniform { max, .. } => max,
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        let ok = match *self {
            TokenCount::Constant(n) => n >= 1,
            TokenCount::Uniform { min, max } => min >= 1 && min <= max,
        };
        if ok {
            Ok(())
        } else {
            Err(CarError::Config(format!("{name} must be a positive count or range")))
        }
    }
}

/// Missing fields in a config document take their [`Default`] values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticBackendConfig {
    /// Probability that a query is answered correctly in short mode.
    pub p_correct: f64,
    pub mu1: f64,
    pub var1: f64,
    pub mu0: f64,
    pub var0: f64,
    pub short_token_count: TokenCount,
    pub long_token_count: TokenCount,
    /// Probability that long reasoning fixes an incorrect short answer.
    pub long_fix_probability: f64,
    /// Probability that long reasoning breaks a correct short answer.
    pub long_break_probability: f64,
    pub seed: u64,
    pub max_in_flight: usize,
}

fn default_in_flight() -> usize {
    std::thread::available_parallelism().map_or(4, |n| n.get())
}

impl Default for SyntheticBackendConfig {
    fn default() -> Self {
        Self {
            p_correct: 0.6,
            mu1: 1.15,
            var1: 0.0025,
            mu0: 1.28,
            var0: 0.0025,
            short_token_count: TokenCount::Uniform { min: 4, max: 16 },
            long_token_count: TokenCount::Uniform { min: 150, max: 450 },
            long_fix_probability: 0.7,
            long_break_probability: 0.0,
            seed: 0,
            max_in_flight: default_in_flight(),
        }
    }
}

impl SyntheticBackendConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("p_correct", self.p_correct),
            ("long_fix_probability", self.long_fix_probability),
            ("long_break_probability", self.long_break_probability),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(CarError::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        for (mu, var) in [(self.mu1, self.var1), (self.mu0, self.var0)] {
            if var <= 0.0 || !var.is_finite() {
                return Err(CarError::InvalidVariance(var));
            }
            if !mu.is_finite() {
                return Err(CarError::Config(format!("non-finite mean {mu}")));
            }
            // Rejection sampling above 1 needs non-negligible mass there.
            if mu + 6.0 * var.sqrt() < 1.0 {
                return Err(CarError::Config(format!(
                    "N({mu}, {var}) has almost no mass at or above 1"
                )));
            }
        }
        self.short_token_count.validate("short_token_count")?;
        self.long_token_count.validate("long_token_count")?;
        if self.max_in_flight == 0 {
            return Err(CarError::Config("max_in_flight must be at least 1".into()));
        }
        Ok(())
    }
}

/// One PPL draw from the class-conditional Gaussian, resampled until it is ≥ 1.
pub fn synth_sample_ppl<R: Rng + ?Sized>(
    cfg: &SyntheticBackendConfig,
    correct: bool,
    rng: &mut R,
) -> f64 {
    let (mu, var) = if correct {
        (cfg.mu1, cfg.var1)
    } else {
        (cfg.mu0, cfg.var0)
    };
    let normal = Normal::new(mu, var.sqrt()).expect("validated config");
    loop {
        let x = normal.sample(rng);
        if x >= 1.0 {
            return x;
        }
    }
}

/// Latent short-mode draw for one query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShortDraw {
    pub correct: bool,
    pub ppl: f64,
    pub tokens: u64,
}

#[derive(Debug, Clone)]
pub struct SyntheticBackend {
    cfg: SyntheticBackendConfig,
}

const SHORT_STREAM: u64 = 1;
const LONG_STREAM: u64 = 2;

impl SyntheticBackend {
    pub fn new(cfg: SyntheticBackendConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &SyntheticBackendConfig {
        &self.cfg
    }

    fn rng(&self, query_id: &str, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, fnv1a(query_id)));
        rng.set_stream(stream);
        rng
    }

    pub fn short_draw(&self, query_id: &str) -> ShortDraw {
        let mut rng = self.rng(query_id, SHORT_STREAM);
        let correct = rng.random_bool(self.cfg.p_correct);
        let ppl = synth_sample_ppl(&self.cfg, correct, &mut rng);
        let tokens = self.cfg.short_token_count.sample(&mut rng);
        ShortDraw {
            correct,
            ppl,
            tokens,
        }
    }

    /// Whether the long path answers this query correctly, and its length.
    pub fn long_draw(&self, query_id: &str) -> (bool, u64) {
        let short_correct = self.short_draw(query_id).correct;
        let mut rng = self.rng(query_id, LONG_STREAM);
        let fixes = rng.random_bool(self.cfg.long_fix_probability);
        let breaks = rng.random_bool(self.cfg.long_break_probability);
        let tokens = self.cfg.long_token_count.sample(&mut rng);
        let correct = if short_correct { !breaks } else { fixes };
        (correct, tokens)
    }
}

fn correct_answer(q: &InferenceQuery) -> String {
    q.reference
        .clone()
        .unwrap_or_else(|| format!("answer-{}", q.query_id))
}

/// A non-empty string that neither equals nor contains the correct answer:
/// a run of one character that does not occur in it.
fn wrong_answer(q: &InferenceQuery) -> String {
    let truth = caseless::default_case_fold_str(&correct_answer(q));
    let filler = ['0', '1', 'x', '#', '@', '~', 'q', 'z', '%']
        .into_iter()
        .find(|c| !truth.contains(*c))
        .unwrap_or('\u{2205}');
    std::iter::repeat_n(filler, truth.chars().count().clamp(1, 8)).collect()
}

impl GenerationBackend for SyntheticBackend {
    fn generate_short(&self, q: &InferenceQuery) -> Result<GenerationResult, BackendError> {
        let draw = self.short_draw(&q.query_id);
        let answer = if draw.correct {
            correct_answer(q)
        } else {
            wrong_answer(q)
        };
        let logprobs = TokenLogProbs::from_logprobs(vec![-draw.ppl.ln(); draw.tokens as usize]);
        Ok(GenerationResult {
            raw_output: answer.clone(),
            answer,
            logprobs: Some(logprobs),
            generated_tokens: draw.tokens,
            diagnostics: Vec::new(),
        })
    }

    fn generate_long(&self, q: &InferenceQuery) -> Result<GenerationResult, BackendError> {
        let (correct, tokens) = self.long_draw(&q.query_id);
        let answer = if correct {
            correct_answer(q)
        } else {
            wrong_answer(q)
        };
        let raw = format!("Synthetic reasoning over {tokens} tokens.\n{ANSWER_MARKER} {answer}");
        Ok(GenerationResult {
            answer: extract_final_answer(&raw)?,
            raw_output: raw,
            logprobs: None,
            generated_tokens: tokens,
            diagnostics: Vec::new(),
        })
    }

    fn max_in_flight(&self) -> usize {
        self.cfg.max_in_flight
    }

    fn name(&self) -> &str {
        "synthetic"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::containment_match;
    use crate::ppl::compute_ppl;

    fn query(i: usize) -> InferenceQuery {
        InferenceQuery::new(format!("q{i}"), "prompt", Some(format!("ref {i}"))).unwrap()
    }

    #[test]
    fn degenerate_variance_returns_mean() {
        let cfg = SyntheticBackendConfig {
            var1: 1e-18,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = synth_sample_ppl(&cfg, true, &mut rng);
        assert!((x - cfg.mu1).abs() < 1e-8);
    }

    #[test]
    fn same_rng_state_same_value() {
        let cfg = SyntheticBackendConfig::default();
        let a = synth_sample_ppl(&cfg, false, &mut ChaCha8Rng::seed_from_u64(11));
        let b = synth_sample_ppl(&cfg, false, &mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn draws_never_below_one() {
        let cfg = SyntheticBackendConfig {
            mu1: 1.0,
            var1: 0.01,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10_000 {
            assert!(synth_sample_ppl(&cfg, true, &mut rng) >= 1.0);
        }
    }

    #[test]
    fn sample_mean_matches_generator() {
        let cfg = SyntheticBackendConfig {
            mu1: 1.15,
            var1: 0.01,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let mean = (0..n).map(|_| synth_sample_ppl(&cfg, true, &mut rng)).sum::<f64>() / n as f64;
        // Truncation at 1 lifts the mean by sd·φ(a)/(1−Φ(a)) with a = −1.5:
        // 0.1 · 0.129518 / 0.933193 = 0.013879.
        let truncated_mean = 1.15 + 0.013_879;
        // 5 standard errors of the (truncated) sample mean.
        assert!((mean - truncated_mean).abs() < 5.0 * 0.1 / (n as f64).sqrt(), "{mean}");
    }

    #[test]
    fn short_generation_is_deterministic_and_scoreable() {
        let backend = SyntheticBackend::new(SyntheticBackendConfig {
            seed: 42,
            ..Default::default()
        })
        .unwrap();
        for i in 0..200 {
            let q = query(i);
            let a = backend.generate_short(&q).unwrap();
            let b = backend.generate_short(&q).unwrap();
            assert_eq!(a, b);
            let lp = a.logprobs.as_ref().unwrap();
            assert_eq!(lp.len() as u64, a.generated_tokens);
            let ppl = compute_ppl(lp).unwrap();
            let draw = backend.short_draw(&q.query_id);
            assert!((ppl.value - draw.ppl).abs() < 1e-12);
            assert_eq!(
                containment_match(&a.answer, q.reference.as_deref().unwrap()),
                draw.correct
            );
        }
    }

    #[test]
    fn forced_fix_makes_long_correct() {
        let backend = SyntheticBackend::new(SyntheticBackendConfig {
            p_correct: 0.0,
            long_fix_probability: 1.0,
            ..Default::default()
        })
        .unwrap();
        for i in 0..100 {
            let q = query(i);
            let short = backend.generate_short(&q).unwrap();
            assert!(!containment_match(&short.answer, q.reference.as_deref().unwrap()));
            let long = backend.generate_long(&q).unwrap();
            assert_eq!(long.answer, q.reference.clone().unwrap());
            assert!(long.raw_output.contains("Answer:"));
        }
    }

    #[test]
    fn no_fix_keeps_short_label() {
        let backend = SyntheticBackend::new(SyntheticBackendConfig {
            long_fix_probability: 0.0,
            ..Default::default()
        })
        .unwrap();
        for i in 0..300 {
            let q = query(i);
            let r = q.reference.as_deref().unwrap();
            let short = containment_match(&backend.generate_short(&q).unwrap().answer, r);
            let long = containment_match(&backend.generate_long(&q).unwrap().answer, r);
            assert_eq!(short, long);
        }
    }

    #[test]
    fn wrong_answers_never_match() {
        for reference in ["0", "1x#@", "a", "0123456789xyz#@~%qz", "Ünïcode"] {
            let q = InferenceQuery::new("id", "p", Some(reference.to_string())).unwrap();
            let w = wrong_answer(&q);
            assert!(!w.is_empty());
            assert!(!containment_match(&w, reference), "{w} vs {reference}");
        }
    }

    #[test]
    fn invalid_configs() {
        let bad_var = SyntheticBackendConfig {
            var0: 0.0,
            ..Default::default()
        };
        assert!(matches!(
            SyntheticBackend::new(bad_var),
            Err(CarError::InvalidVariance(_))
        ));
        let bad_p = SyntheticBackendConfig {
            p_correct: 1.5,
            ..Default::default()
        };
        assert!(SyntheticBackend::new(bad_p).is_err());
        let unreachable = SyntheticBackendConfig {
            mu1: 0.2,
            var1: 0.001,
            ..Default::default()
        };
        assert!(SyntheticBackend::new(unreachable).is_err());
    }
}
