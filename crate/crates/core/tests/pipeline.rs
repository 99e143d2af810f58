use car_core::backends::{
    BackendError, FixtureBackend, FixtureDocument, GenerationBackend, GenerationResult,
    InferenceQuery, SyntheticBackend, SyntheticBackendConfig,
};
use car_core::calibration::{fit_balanced, CalibrationProfile};
use car_core::error::CarError;
use car_core::eval::{
    build_report, calibration_run, evaluate, evaluate_resuming, Dataset, MatchRule, PolicySetup,
    ReportMetadata,
};
use car_core::router::{percentile_threshold, Route};
use car_core::simulate::{run_simulation, GridParam};
use serde_json::json;

fn synthetic(cfg: SyntheticBackendConfig) -> SyntheticBackend {
    SyntheticBackend::new(cfg).unwrap()
}

#[test]
fn confident_regime_never_escalates() {
    let backend = synthetic(SyntheticBackendConfig {
        p_correct: 1.0,
        mu1: 1.02,
        var1: 1e-4,
        ..Default::default()
    });
    let profile = CalibrationProfile::balanced(1.02, 1e-4, 1.5, 1e-4).unwrap();
    let ds = Dataset::synthetic("easy", 2_000, MatchRule::Containment);
    let rs = evaluate(&ds, PolicySetup::Car(&profile), &backend).unwrap();
    assert!(rs.iter().all(|r| r.route == Route::Short && r.correct));
}

#[test]
fn long_only_with_forced_fix_is_perfect() {
    let backend = synthetic(SyntheticBackendConfig {
        long_fix_probability: 1.0,
        seed: 4,
        ..Default::default()
    });
    let ds = Dataset::synthetic("fix", 10_000, MatchRule::ExactMatch);
    let long = evaluate(&ds, PolicySetup::LongOnly, &backend).unwrap();
    assert!(long.iter().all(|r| r.correct));
    let short = evaluate(&ds, PolicySetup::ShortOnly, &backend).unwrap();
    let acc = short.iter().filter(|r| r.correct).count() as f64 / 1e4;
    // Five binomial standard errors around p_correct = 0.6.
    assert!((acc - 0.6).abs() < 5.0 * (0.6f64 * 0.4 / 1e4).sqrt(), "{acc}");
}

#[test]
fn top_percentile_threshold_matches_short_only() {
    let backend = synthetic(SyntheticBackendConfig::default());
    let calib = Dataset::synthetic("calib", 500, MatchRule::Containment);
    let ppls: Vec<f64> = calibration_run(&calib, &backend)
        .unwrap()
        .iter()
        .map(|s| s.ppl)
        .collect();
    let threshold = percentile_threshold(&ppls, 100.0).unwrap();
    // The calibration split itself routes nothing Long at q = 100.
    let rs = evaluate(&calib, PolicySetup::PercentileThreshold { threshold }, &backend).unwrap();
    let short = evaluate(&calib, PolicySetup::ShortOnly, &backend).unwrap();
    assert!(rs.iter().all(|r| r.route == Route::Short));
    let tokens = |v: &[car_core::eval::EvalRecord]| v.iter().map(|r| r.total_tokens).sum::<u64>();
    assert_eq!(tokens(&rs), tokens(&short));
}

#[test]
fn equal_variance_histograms_mirror_about_midpoint() {
    let backend = synthetic(SyntheticBackendConfig {
        p_correct: 0.5,
        var1: 0.0025,
        var0: 0.0025,
        seed: 9,
        ..Default::default()
    });
    let ds = Dataset::synthetic("hist", 100_000, MatchRule::Containment);
    let samples = calibration_run(&ds, &backend).unwrap();
    let mid = (1.15 + 1.28) / 2.0;
    // Reflect incorrect-class draws through the midpoint; both classes should
    // then share one distribution. Compare a few quantiles.
    let mut c: Vec<f64> = samples.iter().filter(|s| s.correct).map(|s| s.ppl).collect();
    let mut r: Vec<f64> = samples.iter().filter(|s| !s.correct).map(|s| 2.0 * mid - s.ppl).collect();
    c.sort_by(f64::total_cmp);
    r.sort_by(f64::total_cmp);
    for q in [0.1, 0.25, 0.5, 0.75, 0.9] {
        let a = c[(q * (c.len() - 1) as f64) as usize];
        let b = r[(q * (r.len() - 1) as f64) as usize];
        assert!((a - b).abs() < 0.002, "quantile {q}: {a} vs {b}");
    }
}

fn fixture_docs() -> Vec<FixtureDocument> {
    [("a", "42", -0.01), ("b", "7", -0.5), ("c", "42", -0.02), ("d", "9", -0.45)]
        .into_iter()
        .map(|(id, text, lp)| {
            serde_json::from_value(json!({
                "query_id": id,
                "short": {"response": {"text": text, "tokens": [text, "</s>"], "token_logprobs": [lp, lp]}},
                "long": {"response": {"text": "so\nAnswer: 42", "token_logprobs": [-0.1, -0.1, -0.1]}}
            }))
            .unwrap()
        })
        .collect()
}

fn fixture_dataset() -> Dataset {
    let text: String = ["a", "b", "c", "d"]
        .iter()
        .map(|id| format!("{{\"id\": \"{id}\", \"prompt\": \"p\", \"reference\": \"42\"}}\n"))
        .collect();
    Dataset::parse_jsonl("fx", &text, MatchRule::ExactMatch, "fx.jsonl".as_ref()).unwrap()
}

#[test]
fn fixture_calibration_and_eval() {
    let backend = FixtureBackend::from_documents(fixture_docs());
    let ds = fixture_dataset();
    let samples = calibration_run(&ds, &backend).unwrap();
    assert_eq!(samples.iter().filter(|s| s.correct).count(), 2);
    let profile = fit_balanced(&samples, 1, 1e-6).unwrap();
    assert!(profile.mu1 < profile.mu0);

    let mut records = Vec::new();
    for setup in [PolicySetup::ShortOnly, PolicySetup::LongOnly, PolicySetup::Car(&profile)] {
        records.extend(evaluate(&ds, setup, &backend).unwrap());
    }
    let report = build_report(&records, ReportMetadata::default()).unwrap();
    let rows = &report.datasets[0].rows;
    let acc: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
    assert_eq!(acc, [50.0, 100.0, 100.0]);
}

/// Fails the short call for one query id.
struct Faulty<'a> {
    inner: &'a dyn GenerationBackend,
    bad: &'static str,
}

impl GenerationBackend for Faulty<'_> {
    fn generate_short(&self, q: &InferenceQuery) -> Result<GenerationResult, BackendError> {
        if q.query_id == self.bad {
            return Err(BackendError::Timeout);
        }
        self.inner.generate_short(q)
    }

    fn generate_long(&self, q: &InferenceQuery) -> Result<GenerationResult, BackendError> {
        self.inner.generate_long(q)
    }

    fn name(&self) -> &str {
        "faulty"
    }
}

#[test]
fn aborted_eval_keeps_partial_records_and_resumes() {
    let backend = FixtureBackend::from_documents(fixture_docs());
    let faulty = Faulty { inner: &backend, bad: "c" };
    let ds = fixture_dataset();
    let partial = match evaluate(&ds, PolicySetup::ShortOnly, &faulty) {
        Err(CarError::EvalAborted { partial, source }) => {
            assert!(matches!(*source, CarError::Backend { .. }));
            partial
        }
        other => panic!("unexpected {other:?}"),
    };
    assert!(partial.iter().all(|r| r.query_id != "c"));
    assert!(!partial.is_empty());

    let resumed = evaluate_resuming(&ds, PolicySetup::ShortOnly, &backend, &partial).unwrap();
    let fresh = evaluate(&ds, PolicySetup::ShortOnly, &backend).unwrap();
    assert_eq!(resumed, fresh);
}

#[test]
fn simulation_tracks_closed_form_over_mu0_grid() {
    let rows = run_simulation(
        &SyntheticBackendConfig::default(),
        GridParam::Mu0,
        &[1.20, 1.28, 1.36],
        40_000,
    )
    .unwrap();
    assert_eq!(rows.len(), 3);
    for r in &rows {
        assert_eq!(r.analytic_boundaries.len(), r.empirical_boundaries.len());
        for (a, b) in r.analytic_boundaries.iter().zip(&r.empirical_boundaries) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!((r.analytic_long_rate - r.empirical_long_rate).abs() < 0.015, "{r:?}");
        assert!((r.analytic_accuracy - r.empirical_accuracy).abs() < 0.015, "{r:?}");
    }
    // Moving the incorrect class away shrinks the Long region.
    assert!(rows[0].analytic_long_rate > rows[2].analytic_long_rate);
}
