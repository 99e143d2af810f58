//! Batch evaluation: answer matching, policy runs, calibration harvesting,
//! and the accuracy / token-count report.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backends::{BackendError, GenerationBackend, InferenceQuery};
use crate::calibration::{CalibrationProfile, CalibrationSample};
use crate::error::{CarError, Result, Stage};
use crate::io::write_atomic;
use crate::ppl::compute_ppl;
use crate::router::{route_query, threshold_decide, Route};

/// Normalization applied before matching, recorded in every report.
pub const NORMALIZATION: &str = "unicode case fold; whitespace runs collapsed to one space; trimmed";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum MatchRule {
    Containment,
    ExactMatch,
}

impl fmt::Display for MatchRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MatchRule::Containment => f.write_str("containment"),
            MatchRule::ExactMatch => f.write_str("exact_match"),
        }
    }
}

pub fn normalize(text: &str) -> String {
    caseless::default_case_fold_str(text)
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn containment_match(prediction: &str, reference: &str) -> bool {
    normalize(prediction).contains(&normalize(reference))
}

pub fn exact_match(prediction: &str, reference: &str) -> bool {
    normalize(prediction) == normalize(reference)
}

impl MatchRule {
    pub fn is_match(self, prediction: &str, reference: &str) -> bool {
        match self {
            MatchRule::Containment => containment_match(prediction, reference),
            MatchRule::ExactMatch => exact_match(prediction, reference),
        }
    }
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum,
)]
pub enum Policy {
    #[serde(rename = "ShortOnly")]
    #[value(name = "short-only")]
    ShortOnly,
    #[serde(rename = "LongOnly")]
    #[value(name = "long-only")]
    LongOnly,
    #[serde(rename = "CAR")]
    #[value(name = "car")]
    Car,
    #[serde(rename = "PercentileThreshold")]
    #[value(name = "percentile-threshold")]
    PercentileThreshold,
}

impl Policy {
    pub const ALL: [Policy; 4] = [
        Policy::ShortOnly,
        Policy::LongOnly,
        Policy::Car,
        Policy::PercentileThreshold,
    ];
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Policy::ShortOnly => "ShortOnly",
            Policy::LongOnly => "LongOnly",
            Policy::Car => "CAR",
            Policy::PercentileThreshold => "PercentileThreshold",
        })
    }
}

/// A policy together with whatever it needs to make decisions.
#[derive(Debug, Clone, Copy)]
pub enum PolicySetup<'a> {
    ShortOnly,
    LongOnly,
    Car(&'a CalibrationProfile),
    PercentileThreshold { threshold: f64 },
}

impl PolicySetup<'_> {
    pub fn policy(&self) -> Policy {
        match self {
            PolicySetup::ShortOnly => Policy::ShortOnly,
            PolicySetup::LongOnly => Policy::LongOnly,
            PolicySetup::Car(_) => Policy::Car,
            PolicySetup::PercentileThreshold { .. } => Policy::PercentileThreshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetItem {
    pub query: InferenceQuery,
    pub match_rule: MatchRule,
    /// Fields present in the source record but not used here.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub items: Vec<DatasetItem>,
}

#[derive(Deserialize)]
struct RawRecord {
    id: String,
    prompt: String,
    #[serde(default)]
    reference: Option<String>,
    #[serde(default)]
    match_rule: Option<MatchRule>,
    #[serde(flatten)]
    extra: BTreeMap<String, Value>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, items: Vec<DatasetItem>) -> Self {
        Self {
            name: name.into(),
            items,
        }
    }

    /// Parses line-delimited `{id, prompt, reference, match_rule}` records.
    /// Records without `match_rule` get `default_rule`.
    pub fn parse_jsonl(
        name: impl Into<String>,
        text: &str,
        default_rule: MatchRule,
        path: &Path,
    ) -> Result<Self> {
        let mut items = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |detail: String| CarError::Dataset {
                path: path.to_path_buf(),
                line: i + 1,
                detail,
            };
            let raw: RawRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
            let query = InferenceQuery::new(raw.id, raw.prompt, raw.reference)
                .map_err(|e| err(e.to_string()))?;
            let match_rule = raw.match_rule.unwrap_or(default_rule);
            if items.first().is_some_and(|f: &DatasetItem| f.match_rule != match_rule) {
                return Err(err(format!(
                    "match_rule {match_rule} differs from earlier records; split mixed rules into separate datasets"
                )));
            }
            if !seen.insert(query.query_id.clone()) {
                return Err(err(format!("duplicate id {}", query.query_id)));
            }
            items.push(DatasetItem {
                query,
                match_rule,
                extra: raw.extra,
            });
        }
        Ok(Self::new(name, items))
    }

    /// Loads a dataset file; the dataset is named after the file stem.
    pub fn load(path: &Path, default_rule: MatchRule) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CarError::io(path, e))?;
        let name = path
            .file_name()
            .and_then(|s| s.to_str())
            .map(|s| s.trim_end_matches(".jsonl").trim_end_matches(".json").to_string())
            .unwrap_or_else(|| "dataset".into());
        Self::parse_jsonl(name, &text, default_rule, path)
    }

    /// `n` queries with ids `{name}-000000…` and distinct references.
    pub fn synthetic(name: &str, n: usize, rule: MatchRule) -> Self {
        let items = (0..n)
            .map(|i| DatasetItem {
                query: InferenceQuery {
                    query_id: format!("{name}-{i:06}"),
                    prompt_body: format!("Synthetic question {i} of {name}."),
                    reference: Some(format!("answer {i}")),
                },
                match_rule: rule,
                extra: BTreeMap::new(),
            })
            .collect();
        Self::new(name, items)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    fn check_references(&self) -> Result<()> {
        match self
            .items
            .iter()
            .find(|it| it.query.reference.as_deref().is_none_or(str::is_empty))
        {
            Some(it) => Err(CarError::MissingReference(it.query.query_id.clone())),
            None => Ok(()),
        }
    }
}

/// One query evaluated under one policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub dataset: String,
    pub query_id: String,
    pub policy: Policy,
    pub match_rule: MatchRule,
    pub correct: bool,
    pub route: Route,
    pub final_answer: String,
    pub ppl: Option<f64>,
    pub posterior_correct: Option<f64>,
    pub short_tokens: u64,
    pub long_tokens: u64,
    pub total_tokens: u64,
}

fn backend_err(stage: Stage) -> impl FnOnce(BackendError) -> CarError {
    move |source| CarError::Backend { stage, source }
}

fn eval_one(
    dataset: &str,
    item: &DatasetItem,
    setup: PolicySetup<'_>,
    backend: &dyn GenerationBackend,
) -> Result<EvalRecord> {
    let q = &item.query;
    let reference = q.reference.as_deref().unwrap_or_default();
    let mut rec = EvalRecord {
        dataset: dataset.to_string(),
        query_id: q.query_id.clone(),
        policy: setup.policy(),
        match_rule: item.match_rule,
        correct: false,
        route: Route::Short,
        final_answer: String::new(),
        ppl: None,
        posterior_correct: None,
        short_tokens: 0,
        long_tokens: 0,
        total_tokens: 0,
    };
    match setup {
        PolicySetup::ShortOnly => {
            let short = backend.generate_short(q).map_err(backend_err(Stage::Short))?;
            if let Some(lp) = &short.logprobs {
                rec.ppl = Some(compute_ppl(lp)?.value);
            }
            rec.short_tokens = short.generated_tokens;
            rec.final_answer = short.answer;
        }
        PolicySetup::LongOnly => {
            let long = backend.generate_long(q).map_err(backend_err(Stage::Long))?;
            rec.route = Route::Long;
            rec.long_tokens = long.generated_tokens;
            rec.final_answer = long.answer;
        }
        PolicySetup::Car(profile) => {
            let out = route_query(q, backend, profile)?;
            rec.route = out.route;
            rec.ppl = Some(out.ppl.value);
            rec.posterior_correct = Some(out.posterior_correct);
            rec.short_tokens = out.short_tokens;
            rec.long_tokens = out.long_tokens;
            rec.final_answer = out.final_answer;
        }
        PolicySetup::PercentileThreshold { threshold } => {
            let short = backend.generate_short(q).map_err(backend_err(Stage::Short))?;
            let lp = short
                .logprobs
                .as_ref()
                .ok_or(BackendError::MissingLogprobs)
                .map_err(backend_err(Stage::Short))?;
            let ppl = compute_ppl(lp)?.value;
            rec.ppl = Some(ppl);
            rec.short_tokens = short.generated_tokens;
            rec.route = threshold_decide(ppl, threshold);
            rec.final_answer = match rec.route {
                Route::Short => short.answer,
                Route::Long => {
                    let long = backend.generate_long(q).map_err(backend_err(Stage::Long))?;
                    rec.long_tokens = long.generated_tokens;
                    long.answer
                }
            };
        }
    }
    rec.total_tokens = rec.short_tokens + rec.long_tokens;
    rec.correct = item.match_rule.is_match(&rec.final_answer, reference);
    Ok(rec)
}

/// Runs `f` over `0..n` on up to `workers` threads. Results keep index order.
/// After the first failure no new indices are started; the failure with the
/// lowest index is reported alongside every result that completed.
fn run_indexed<T: Send>(
    n: usize,
    workers: usize,
    f: impl Fn(usize) -> Result<T> + Sync,
) -> (Vec<Option<T>>, Option<CarError>) {
    let slots: Vec<Mutex<Option<T>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let failure: Mutex<Option<(usize, CarError)>> = Mutex::new(None);
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let workers = workers.clamp(1, n.max(1));

    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                if stop.load(Ordering::Relaxed) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                match f(i) {
                    Ok(v) => *slots[i].lock().unwrap() = Some(v),
                    Err(e) => {
                        stop.store(true, Ordering::Relaxed);
                        let mut slot = failure.lock().unwrap();
                        if slot.as_ref().is_none_or(|(j, _)| i < *j) {
                            *slot = Some((i, e));
                        }
                    }
                }
            });
        }
    });

    let results = slots.into_iter().map(|m| m.into_inner().unwrap()).collect();
    (results, failure.into_inner().unwrap().map(|(_, e)| e))
}

/// Evaluates every query of `dataset` under `setup`, one record per query in
/// dataset order.
pub fn evaluate(
    dataset: &Dataset,
    setup: PolicySetup<'_>,
    backend: &dyn GenerationBackend,
) -> Result<Vec<EvalRecord>> {
    evaluate_resuming(dataset, setup, backend, &[])
}

/// Like [`evaluate`], reusing `done` records (matched by query id and policy)
/// instead of regenerating them.
///
/// On failure returns [`CarError::EvalAborted`] carrying every finished record.
pub fn evaluate_resuming(
    dataset: &Dataset,
    setup: PolicySetup<'_>,
    backend: &dyn GenerationBackend,
    done: &[EvalRecord],
) -> Result<Vec<EvalRecord>> {
    dataset.check_references()?;
    let policy = setup.policy();
    let finished: HashMap<&str, &EvalRecord> = done
        .iter()
        .filter(|r| r.policy == policy && r.dataset == dataset.name)
        .map(|r| (r.query_id.as_str(), r))
        .collect();

    let (results, failure) = run_indexed(dataset.len(), backend.max_in_flight(), |i| {
        let item = &dataset.items[i];
        match finished.get(item.query.query_id.as_str()) {
            Some(r) => Ok((*r).clone()),
            None => eval_one(&dataset.name, item, setup, backend),
        }
    });
    match failure {
        None => Ok(results.into_iter().map(|r| r.expect("all slots filled")).collect()),
        Some(source) => Err(CarError::EvalAborted {
            partial: results.into_iter().flatten().collect(),
            source: Box::new(source),
        }),
    }
}

/// Short-generates every query and labels its PPL with answer correctness.
pub fn calibration_run(
    dataset: &Dataset,
    backend: &dyn GenerationBackend,
) -> Result<Vec<CalibrationSample>> {
    dataset.check_references()?;
    let (results, failure) = run_indexed(dataset.len(), backend.max_in_flight(), |i| {
        let item = &dataset.items[i];
        let q = &item.query;
        let short = backend.generate_short(q).map_err(backend_err(Stage::Short))?;
        let lp = short
            .logprobs
            .as_ref()
            .ok_or(BackendError::MissingLogprobs)
            .map_err(backend_err(Stage::Short))?;
        let ppl = compute_ppl(lp)?.value;
        let correct = item
            .match_rule
            .is_match(&short.answer, q.reference.as_deref().unwrap_or_default());
        Ok(CalibrationSample::new(q.query_id.clone(), ppl, correct))
    });
    match failure {
        None => Ok(results.into_iter().map(|r| r.expect("all slots filled")).collect()),
        Some(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRow {
    pub policy: Policy,
    pub n: u64,
    pub correct: u64,
    /// Percent, 0–100.
    pub accuracy: f64,
    pub total_tokens: u64,
    pub mean_tokens: f64,
    pub long_routed: u64,
    pub long_fraction: f64,
    /// Long-path tokens summed over routed queries.
    pub routed_long_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub name: String,
    pub size: u64,
    pub match_rule: MatchRule,
    pub rows: Vec<PolicyRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AverageRow {
    pub policy: Policy,
    pub accuracy: f64,
    pub mean_tokens: f64,
    pub long_fraction: f64,
    pub datasets: u64,
}

/// Run context recorded in the report.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub backend: String,
    pub seed: Option<u64>,
    pub profile_fingerprint: Option<String>,
    pub percentile: Option<f64>,
    pub threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub datasets: Vec<DatasetReport>,
    /// Unweighted mean of per-dataset values.
    pub average: Vec<AverageRow>,
    /// Pooled over all records, weighting datasets by size.
    pub weighted_average: Vec<AverageRow>,
    pub normalization: String,
    pub metadata: ReportMetadata,
}

fn policy_row(policy: Policy, records: &[&EvalRecord]) -> PolicyRow {
    let n = records.len() as u64;
    let correct = records.iter().filter(|r| r.correct).count() as u64;
    let total_tokens: u64 = records.iter().map(|r| r.total_tokens).sum();
    let long: Vec<_> = records.iter().filter(|r| r.route == Route::Long).collect();
    PolicyRow {
        policy,
        n,
        correct,
        accuracy: 100.0 * correct as f64 / n as f64,
        total_tokens,
        mean_tokens: total_tokens as f64 / n as f64,
        long_routed: long.len() as u64,
        long_fraction: long.len() as f64 / n as f64,
        routed_long_tokens: long.iter().map(|r| r.long_tokens).sum(),
    }
}

/// Aggregates records per dataset (in order of first appearance) and per
/// policy, then averages across datasets.
pub fn build_report(records: &[EvalRecord], metadata: ReportMetadata) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(CarError::EmptyRecords);
    }
    let mut order: Vec<&str> = Vec::new();
    let mut by_dataset: HashMap<&str, Vec<&EvalRecord>> = HashMap::new();
    for r in records {
        let entry = by_dataset.entry(&r.dataset).or_default();
        if entry.is_empty() {
            order.push(&r.dataset);
        }
        entry.push(r);
    }

    let mut datasets = Vec::new();
    for name in order {
        let recs = &by_dataset[name];
        let rule = recs[0].match_rule;
        if recs.iter().any(|r| r.match_rule != rule) {
            return Err(CarError::RuleMix(name.to_string()));
        }
        let mut per_policy: BTreeMap<Policy, Vec<&EvalRecord>> = BTreeMap::new();
        for r in recs {
            per_policy.entry(r.policy).or_default().push(r);
        }
        let rows: Vec<PolicyRow> = per_policy
            .iter()
            .map(|(&p, rs)| policy_row(p, rs))
            .collect();
        let size = rows.iter().map(|r| r.n).max().unwrap_or(0);
        datasets.push(DatasetReport {
            name: name.to_string(),
            size,
            match_rule: rule,
            rows,
        });
    }

    let mut average = Vec::new();
    let mut weighted_average = Vec::new();
    for policy in Policy::ALL {
        let rows: Vec<&PolicyRow> = datasets
            .iter()
            .flat_map(|d| d.rows.iter().filter(|r| r.policy == policy))
            .collect();
        if rows.is_empty() {
            continue;
        }
        let k = rows.len() as f64;
        average.push(AverageRow {
            policy,
            accuracy: rows.iter().map(|r| r.accuracy).sum::<f64>() / k,
            mean_tokens: rows.iter().map(|r| r.mean_tokens).sum::<f64>() / k,
            long_fraction: rows.iter().map(|r| r.long_fraction).sum::<f64>() / k,
            datasets: rows.len() as u64,
        });
        let n: u64 = rows.iter().map(|r| r.n).sum();
        weighted_average.push(AverageRow {
            policy,
            accuracy: 100.0 * rows.iter().map(|r| r.correct).sum::<u64>() as f64 / n as f64,
            mean_tokens: rows.iter().map(|r| r.total_tokens).sum::<u64>() as f64 / n as f64,
            long_fraction: rows.iter().map(|r| r.long_routed).sum::<u64>() as f64 / n as f64,
            datasets: rows.len() as u64,
        });
    }

    Ok(EvalReport {
        datasets,
        average,
        weighted_average,
        normalization: NORMALIZATION.to_string(),
        metadata,
    })
}

/// Accuracy %, mean tokens and Long % per policy.
type Cells = BTreeMap<Policy, (f64, f64, f64)>;

impl EvalReport {
    /// Fixed-width table: one row per policy, `Acc | #Token | Long%` per
    /// dataset, then the unweighted Average.
    pub fn render_table(&self) -> String {
        let mut groups: Vec<(String, Cells)> = self
            .datasets
            .iter()
            .map(|d| {
                let cells = d
                    .rows
                    .iter()
                    .map(|r| (r.policy, (r.accuracy, r.mean_tokens, 100.0 * r.long_fraction)))
                    .collect();
                (d.name.clone(), cells)
            })
            .collect();
        groups.push((
            "Average".into(),
            self.average
                .iter()
                .map(|r| (r.policy, (r.accuracy, r.mean_tokens, 100.0 * r.long_fraction)))
                .collect(),
        ));

        const CELL: usize = 26;
        let mut out = String::new();
        let _ = write!(out, "{:<20}", "Policy");
        for (name, _) in &groups {
            let _ = write!(out, " | {:^CELL$}", truncate(name, CELL));
        }
        out.push('\n');
        let _ = write!(out, "{:<20}", "");
        for _ in &groups {
            let _ = write!(out, " | {:>7} {:>9} {:>8}", "Acc", "#Token", "Long%");
        }
        out.push('\n');
        out.push_str(&"-".repeat(20 + groups.len() * (CELL + 3)));
        out.push('\n');
        for policy in Policy::ALL {
            if !groups.iter().any(|(_, cells)| cells.contains_key(&policy)) {
                continue;
            }
            let _ = write!(out, "{:<20}", policy.to_string());
            for (_, cells) in &groups {
                match cells.get(&policy) {
                    Some((acc, tok, long)) => {
                        let _ = write!(out, " | {acc:>7.2} {tok:>9.2} {long:>8.2}");
                    }
                    None => {
                        let _ = write!(out, " | {:>7} {:>9} {:>8}", "-", "-", "-");
                    }
                }
            }
            out.push('\n');
        }
        out.push('\n');
        let _ = writeln!(out, "Average = unweighted mean over datasets.");
        let _ = writeln!(out, "Matching normalization: {}.", self.normalization);
        for d in &self.datasets {
            let _ = writeln!(out, "{}: n = {}, match rule = {}", d.name, d.size, d.match_rule);
        }
        for note in &self.metadata.notes {
            let _ = writeln!(out, "Note: {note}");
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Writes `report.txt` and `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        let txt = dir.join("report.txt");
        let json = dir.join("report.json");
        write_atomic(&txt, self.render_table().as_bytes())?;
        write_atomic(&json, self.to_json().as_bytes())?;
        Ok((txt, json))
    }
}

fn truncate(s: &str, width: usize) -> String {
    s.chars().take(width).collect()
}

/// Writes records as one JSON object per line.
pub fn write_records(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("record serializes"));
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| CarError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CarError::Dataset {
                path: path.to_path_buf(),
                line: i + 1,
                detail: e.to_string(),
            })
        })
        .collect()
}
