//! Command-line front end: calibrate, route, eval, simulate.
//!
//! Exit codes: 0 success, 2 configuration, 3 data, 4 backend, 5 numeric.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::backends::{
    FixtureBackend, GenerationBackend, HttpBackend, HttpBackendConfig, InferenceQuery,
    SyntheticBackend, SyntheticBackendConfig,
};
use crate::calibration::{
    fit_balanced, load_profile, save_profile, CalibrationProfile, CalibrationSample,
    DEFAULT_VARIANCE_FLOOR,
};
use crate::error::{CarError, Class, Result};
use crate::eval::{
    build_report, calibration_run, evaluate_resuming, read_records, write_records, Dataset,
    EvalRecord, MatchRule, Policy, PolicySetup, ReportMetadata,
};
use crate::io::write_atomic;
use crate::router::{percentile_threshold, route_query};
use crate::seed::component_seed;
use crate::simulate::{rows_to_csv, run_simulation, GridParam};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Synthetic,
    Http,
    Fixture,
}

#[derive(Debug, Parser)]
#[command(
    name = "car",
    about = "Perplexity-gated adaptive reasoning: answer briefly, reason at length only when unsure",
    after_help = "Exit codes: 0 success, 2 configuration error, 3 data error, 4 backend error, 5 numeric error."
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GlobalArgs {
    #[arg(long, global = true, value_enum, default_value = "synthetic")]
    pub backend: BackendKind,
    /// TOML file with optional [synthetic] and [http] tables.
    #[arg(long, global = true)]
    pub backend_config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub fixture_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub profile: Option<PathBuf>,
    /// Line-delimited dataset; repeat for several datasets.
    #[arg(long, global = true)]
    pub dataset: Vec<PathBuf>,
    /// Dataset used for calibration and percentile thresholds.
    #[arg(long, global = true)]
    pub calibration_dataset: Option<PathBuf>,
    /// Calibration samples (JSON lines) to take percentile thresholds from.
    #[arg(long, global = true)]
    pub calibration_samples: Option<PathBuf>,
    /// Policies to evaluate; repeatable. Defaults to all four.
    #[arg(long, global = true, value_enum)]
    pub policy: Vec<Policy>,
    #[arg(long, global = true, value_enum, default_value = "containment")]
    pub match_rule: MatchRule,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, global = true, default_value_t = 75.0)]
    pub percentile: f64,
    #[arg(long, global = true, default_value = "car-out")]
    pub out_dir: PathBuf,
    #[arg(long, global = true, default_value_t = DEFAULT_VARIANCE_FLOOR)]
    pub variance_floor: f64,
    /// Size of the generated test split when no --dataset is given (synthetic backend).
    #[arg(long, global = true, default_value_t = 1000)]
    pub synthetic_queries: usize,
    /// Size of the generated calibration split (synthetic backend).
    #[arg(long, global = true, default_value_t = 2000)]
    pub synthetic_calibration: usize,
    /// Print the fully resolved configuration before running.
    #[arg(long, global = true)]
    #[serde(skip)]
    pub print_config: bool,
}

#[derive(Debug, Clone, Subcommand, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Fit and save a calibration profile.
    Calibrate,
    /// Route a single query and print the outcome.
    Route {
        #[arg(long)]
        query_id: String,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        reference: Option<String>,
    },
    /// Evaluate policies over datasets and write report files.
    Eval {
        /// Records file from an aborted run; finished queries are not regenerated.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sweep a synthetic parameter and compare routing with closed forms.
    Simulate {
        #[arg(long, default_value = "mu0")]
        grid_param: String,
        #[arg(long, value_delimiter = ',', default_value = "1.20,1.28,1.36")]
        grid_values: Vec<f64>,
        #[arg(long, default_value_t = 100_000)]
        queries: usize,
    },
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct BackendFile {
    synthetic: Option<SyntheticBackendConfig>,
    http: Option<HttpBackendConfig>,
}

/// Every setting a command runs with, after defaults, files and seeds.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub command: Command,
    #[serde(flatten)]
    pub args: GlobalArgs,
    pub synthetic: Option<SyntheticBackendConfig>,
    pub http: Option<HttpBackendConfig>,
    pub balance_seed: u64,
}

impl RunConfig {
    pub fn resolve(cli: &Cli) -> Result<Self> {
        let args = cli.global.clone();
        let file = match &args.backend_config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| CarError::io(path, e))?;
                toml::from_str::<BackendFile>(&text)
                    .map_err(|e| CarError::Config(format!("{}: {e}", path.display())))?
            }
            None => BackendFile::default(),
        };
        let (synthetic, http) = match args.backend {
            BackendKind::Synthetic => {
                let mut cfg = file.synthetic.unwrap_or_default();
                cfg.seed = component_seed(args.seed, "synthetic-backend");
                (Some(cfg), None)
            }
            BackendKind::Http => {
                let mut cfg = file.http.ok_or_else(|| {
                    CarError::Config("http backend needs an [http] table in --backend-config".into())
                })?;
                cfg.apply_env()?;
                (None, Some(cfg))
            }
            BackendKind::Fixture => {
                if args.fixture_dir.is_none() {
                    return Err(CarError::Config("fixture backend needs --fixture-dir".into()));
                }
                (None, None)
            }
        };
        if !(0.0..=100.0).contains(&args.percentile) {
            return Err(CarError::Config(format!(
                "--percentile {} outside [0, 100]",
                args.percentile
            )));
        }
        Ok(Self {
            command: cli.command.clone(),
            balance_seed: component_seed(args.seed, "balance"),
            args,
            synthetic,
            http,
        })
    }

    pub fn backend(&self) -> Result<Box<dyn GenerationBackend>> {
        Ok(match self.args.backend {
            BackendKind::Synthetic => Box::new(SyntheticBackend::new(
                self.synthetic.clone().expect("resolved"),
            )?),
            BackendKind::Http => Box::new(HttpBackend::new(self.http.clone().expect("resolved"))?),
            BackendKind::Fixture => Box::new(FixtureBackend::load(
                self.args.fixture_dir.as_deref().expect("resolved"),
            )?),
        })
    }

    fn policies(&self) -> Vec<Policy> {
        if self.args.policy.is_empty() {
            Policy::ALL.to_vec()
        } else {
            let mut p = self.args.policy.clone();
            p.sort();
            p.dedup();
            p
        }
    }

    fn synthetic_only(&self, what: &str) -> Result<()> {
        if self.args.backend == BackendKind::Synthetic {
            Ok(())
        } else {
            Err(CarError::Config(format!(
                "{what} is required unless the backend is synthetic"
            )))
        }
    }

    fn calibration_dataset(&self) -> Result<Dataset> {
        match (&self.args.calibration_dataset, self.args.dataset.first()) {
            (Some(p), _) => Dataset::load(p, self.args.match_rule),
            (None, Some(p)) if matches!(self.command, Command::Calibrate) => {
                Dataset::load(p, self.args.match_rule)
            }
            _ => {
                self.synthetic_only("--calibration-dataset")?;
                Ok(Dataset::synthetic(
                    "calibration",
                    self.args.synthetic_calibration,
                    self.args.match_rule,
                ))
            }
        }
    }

    fn eval_datasets(&self) -> Result<Vec<Dataset>> {
        if self.args.dataset.is_empty() {
            self.synthetic_only("--dataset")?;
            return Ok(vec![Dataset::synthetic(
                "synthetic",
                self.args.synthetic_queries,
                self.args.match_rule,
            )]);
        }
        self.args
            .dataset
            .iter()
            .map(|p| Dataset::load(p, self.args.match_rule))
            .collect()
    }

    fn profile_path(&self) -> PathBuf {
        self.args
            .profile
            .clone()
            .unwrap_or_else(|| self.args.out_dir.join("profile.carprofile.json"))
    }

    fn require_profile(&self) -> Result<CalibrationProfile> {
        let path = self
            .args
            .profile
            .as_ref()
            .ok_or_else(|| CarError::Config("--profile is required".into()))?;
        load_profile(path)
    }
}

fn out_err(e: std::io::Error) -> CarError {
    CarError::io("<stdout>", e)
}

/// Parses `args` and runs the selected command, printing to `out`.
pub fn run_from<I, T>(args: I, out: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CarError::Config(e.to_string()))?;
    run(&cli, out)
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let cfg = RunConfig::resolve(cli)?;
    if cfg.args.print_config {
        let text = serde_json::to_string_pretty(&cfg).expect("config serializes");
        writeln!(out, "{text}").map_err(out_err)?;
    }
    match &cfg.command {
        Command::Calibrate => cmd_calibrate(&cfg, out).map(|_| ()),
        Command::Route {
            query_id,
            prompt,
            reference,
        } => {
            let q = InferenceQuery::new(query_id.clone(), prompt.clone(), reference.clone())?;
            cmd_route(&cfg, &q, out)
        }
        Command::Eval { resume } => cmd_eval(&cfg, resume.as_deref(), out),
        Command::Simulate {
            grid_param,
            grid_values,
            queries,
        } => cmd_simulate(&cfg, grid_param, grid_values, *queries, out),
    }
}

fn write_samples(path: &Path, samples: &[CalibrationSample]) -> Result<()> {
    let mut text = String::new();
    for s in samples {
        text.push_str(&serde_json::to_string(s).expect("sample serializes"));
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

fn read_samples(path: &Path) -> Result<Vec<CalibrationSample>> {
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

/// Calibration run → balance → fit → save. Returns the fitted profile.
pub fn cmd_calibrate(cfg: &RunConfig, out: &mut dyn Write) -> Result<CalibrationProfile> {
    let backend = cfg.backend()?;
    let dataset = cfg.calibration_dataset()?;
    let samples = calibration_run(&dataset, backend.as_ref())?;
    let raw_correct = samples.iter().filter(|s| s.correct).count();
    let profile = fit_balanced(&samples, cfg.balance_seed, cfg.args.variance_floor)?;

    let path = cfg.profile_path();
    save_profile(&profile, &path)?;
    let samples_path = cfg.args.out_dir.join("calibration_samples.jsonl");
    write_samples(&samples_path, &samples)?;

    writeln!(
        out,
        "calibration dataset: {} ({} queries; {} correct, {} incorrect)",
        dataset.name,
        samples.len(),
        raw_correct,
        samples.len() - raw_correct
    )
    .and_then(|_| {
        writeln!(
            out,
            "correct:   mu1 = {:.6}  var1 = {:.6e}  n1 = {}",
            profile.mu1, profile.var1, profile.n1
        )
    })
    .and_then(|_| {
        writeln!(
            out,
            "incorrect: mu0 = {:.6}  var0 = {:.6e}  n0 = {}",
            profile.mu0, profile.var0, profile.n0
        )
    })
    .and_then(|_| writeln!(out, "priors:    {} / {}", profile.prior1, profile.prior0))
    .and_then(|_| writeln!(out, "profile written to {}", path.display()))
    .map_err(out_err)?;
    Ok(profile)
}

fn quoted(s: &str) -> String {
    serde_json::to_string(s).expect("string serializes")
}

pub fn cmd_route(cfg: &RunConfig, q: &InferenceQuery, out: &mut dyn Write) -> Result<()> {
    let profile = cfg.require_profile()?;
    let backend = cfg.backend()?;
    let o = route_query(q, backend.as_ref(), &profile)?;
    let long_answer = o.long_answer.as_deref().map_or("null".to_string(), quoted);
    let text = format!(
        "query_id: {}\nshort_answer: {}\nshort_tokens: {}\nppl: {}\nposterior_correct: {}\nroute: {}\nlong_answer: {}\nlong_tokens: {}\nfinal_answer: {}\ntotal_tokens: {}\n",
        quoted(&o.query_id),
        quoted(&o.short_answer),
        o.short_tokens,
        o.ppl.value,
        o.posterior_correct,
        o.route,
        long_answer,
        o.long_tokens,
        quoted(&o.final_answer),
        o.total_tokens,
    );
    out.write_all(text.as_bytes()).map_err(out_err)?;
    for d in &o.diagnostics {
        writeln!(out, "diagnostic: {}", quoted(d)).map_err(out_err)?;
    }
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, resume: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let policies = cfg.policies();
    let backend = cfg.backend()?;
    let datasets = cfg.eval_datasets()?;
    let done = match resume {
        Some(p) => read_records(p)?,
        None => Vec::new(),
    };

    let profile = if policies.contains(&Policy::Car) {
        Some(cfg.require_profile()?)
    } else {
        None
    };
    let mut notes = Vec::new();
    let threshold = if policies.contains(&Policy::PercentileThreshold) {
        let samples = match &cfg.args.calibration_samples {
            Some(p) => read_samples(p)?,
            None => calibration_run(&cfg.calibration_dataset()?, backend.as_ref())?,
        };
        let ppls: Vec<f64> = samples.iter().map(|s| s.ppl).collect();
        let t = percentile_threshold(&ppls, cfg.args.percentile)?;
        notes.push(format!(
            "PercentileThreshold uses the {}th percentile of {} calibration-split PPLs ({t:.6}), not the test split's own PPLs",
            cfg.args.percentile,
            ppls.len()
        ));
        Some(t)
    } else {
        None
    };

    let mut records: Vec<EvalRecord> = Vec::new();
    for ds in &datasets {
        for &policy in &policies {
            let setup = match policy {
                Policy::ShortOnly => PolicySetup::ShortOnly,
                Policy::LongOnly => PolicySetup::LongOnly,
                Policy::Car => PolicySetup::Car(profile.as_ref().expect("loaded")),
                Policy::PercentileThreshold => PolicySetup::PercentileThreshold {
                    threshold: threshold.expect("computed"),
                },
            };
            match evaluate_resuming(ds, setup, backend.as_ref(), &done) {
                Ok(mut rs) => records.append(&mut rs),
                Err(CarError::EvalAborted { mut partial, source }) => {
                    records.append(&mut partial);
                    let path = cfg.args.out_dir.join("partial_records.jsonl");
                    write_records(&path, &records)?;
                    writeln!(
                        out,
                        "aborted; {} finished records written to {}",
                        records.len(),
                        path.display()
                    )
                    .map_err(out_err)?;
                    return Err(*source);
                }
                Err(e) => return Err(e),
            }
        }
    }

    let metadata = ReportMetadata {
        backend: backend.name().to_string(),
        seed: Some(cfg.args.seed),
        profile_fingerprint: profile.as_ref().map(CalibrationProfile::fingerprint),
        percentile: threshold.map(|_| cfg.args.percentile),
        threshold,
        notes,
    };
    let report = build_report(&records, metadata)?;
    write_records(&cfg.args.out_dir.join("records.jsonl"), &records)?;
    let (txt, json) = report.write(&cfg.args.out_dir)?;
    out.write_all(report.render_table().as_bytes()).map_err(out_err)?;
    writeln!(out, "wrote {} and {}", txt.display(), json.display()).map_err(out_err)?;
    Ok(())
}

pub fn cmd_simulate(
    cfg: &RunConfig,
    grid_param: &str,
    grid_values: &[f64],
    queries: usize,
    out: &mut dyn Write,
) -> Result<()> {
    let base = cfg
        .synthetic
        .as_ref()
        .ok_or_else(|| CarError::Config("simulate requires --backend synthetic".into()))?;
    let param: GridParam = grid_param.parse()?;
    let rows = run_simulation(base, param, grid_values, queries)?;
    let csv = rows_to_csv(&rows);
    write_atomic(&cfg.args.out_dir.join("simulation.csv"), csv.as_bytes())?;
    let json = serde_json::to_string_pretty(&rows).expect("rows serialize") + "\n";
    write_atomic(&cfg.args.out_dir.join("simulation.json"), json.as_bytes())?;
    out.write_all(csv.as_bytes()).map_err(out_err)?;
    Ok(())
}

/// Convenience for callers that only care whether calibration found both classes.
pub fn missing_class(e: &CarError) -> Option<Class> {
    match e {
        CarError::MissingClass(c) => Some(*c),
        _ => None,
    }
}
