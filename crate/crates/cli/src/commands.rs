use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use timeuse_core::agents::{prepare_items, run_batch, Agent, AgentConfig, BatchItem, BatchOutcome, HttpAgent, MockAgent, ResponseCache};
use timeuse_core::alignment::{alignment_report, AlignmentOptions};
use timeuse_core::estimator::{bootstrap_ci, fit_ols, fit_structural, FitOptions, FitResult, MultiStart};
use timeuse_core::ingest::{apply_standardization, clean_rows, fit_standardization, read_raw_csv, summarize, HeaderMap};
use timeuse_core::model::{Activity, Feature, ThetaMatrix, DEFAULT_TOTAL_MINUTES, FEATURE_DIM};
use timeuse_core::rag::{
    mitigation_csv, mitigation_table, prepare_augmented_items, retrieval_log_csv, save_kb, CachedEmbedder, EmbeddedKb,
    Embedder, EmbedderConfig, HttpEmbedder, KnowledgeBase, MockEmbedder,
};
use timeuse_core::record::{load_json, load_records, save_json, save_records, write_atomic, Demographics, Record, StandardizationParams};
use timeuse_core::shifts::{
    run_invariance, write_drift, EstimatorKind, InvarianceOptions, OutcomePolicy, ShiftProvenance, ShiftSpec, Standardization,
};
use timeuse_core::synth::{generate_population, random_theta, simulate_allocations, CovariateLinks, NoiseConfig, PopulationConfig, SynthMetadata};
use timeuse_core::{Error, Result};

use crate::report;

pub const RUN_CONFIG_FILE: &str = "run_config.json";

#[derive(Subcommand, Serialize, Deserialize, Clone, Debug)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Clean a raw survey extract into the records format.
    Ingest(IngestArgs),
    /// Generate a synthetic population with outcomes from a known model.
    Synth(SynthArgs),
    /// Query language-model agents for allocation decisions.
    Agents {
        #[command(subcommand)]
        action: AgentsCommand,
    },
    /// Fit the structural model (and optionally the OLS baseline).
    Fit(FitArgs),
    /// Compare model fits against a human fit.
    Compare(CompareArgs),
    /// Re-estimate under covariate shifts and report parameter drift.
    ShiftTest(ShiftTestArgs),
    /// Retrieval-augmented prompting.
    Rag {
        #[command(subcommand)]
        action: RagCommand,
    },
    /// Summarize output directories as markdown with SVG charts.
    Report(ReportArgs),
    /// Re-execute the command recorded in a run_config.json.
    Rerun(RerunArgs),
}

#[derive(Subcommand, Serialize, Deserialize, Clone, Debug)]
#[serde(rename_all = "kebab-case")]
pub enum AgentsCommand {
    /// Collect one decision per record.
    Run(AgentsRunArgs),
}

#[derive(Subcommand, Serialize, Deserialize, Clone, Debug)]
#[serde(rename_all = "kebab-case")]
pub enum RagCommand {
    /// Collect decisions with retrieved findings injected into the prompt.
    Run(RagRunArgs),
    /// Attribute cosines against the human fit before and after augmentation.
    Compare(RagCompareArgs),
}

#[derive(Args, Serialize, Deserialize, Clone, Debug)]
pub struct IngestArgs {
    /// Raw delimited extract with a header row.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON object mapping logical fields to column names.
    #[arg(long)]
    pub header_map: Option<PathBuf>,
    #[arg(long, default_value_t = ',')]
    pub delimiter: char,
}

#[derive(Args, Serialize, Deserialize, Clone, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Population config JSON; --n and --seed override its fields.
    #[arg(long)]
    pub population: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Use correlated covariate links instead of independent marginals.
    #[arg(long)]
    pub correlated: bool,
    /// Ground-truth parameters (theta JSON or a synth metadata file).
    #[arg(long)]
    pub theta: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub theta_seed: u64,
    #[arg(long, default_value_t = 0.5)]
    pub theta_scale: f64,
    /// Dirichlet concentration; omitted means noiseless outcomes.
    #[arg(long)]
    pub kappa: Option<f64>,
    #[arg(long, default_value_t = 2)]
    pub noise_seed: u64,
}

#[derive(Args, Serialize, Deserialize, Clone, Debug)]
pub struct AgentArgs {
    /// HTTP agent config JSON (endpoint, model, sampling, retries, rate limit).
    #[arg(long)]
    pub agent_config: Option<PathBuf>,
    /// Answer offline from a hidden structural model.
    #[arg(long)]
    pub mock: bool,
    /// Hidden parameters of the mock agent (theta JSON or synth metadata).
    #[arg(long)]
    pub mock_theta: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    pub mock_theta_seed: u64,
    #[arg(long, default_value_t = 0.5)]
    pub mock_theta_scale: f64,
    /// Parameters the mock uses when the prompt carries retrieved findings.
    #[arg(long)]
    pub mock_augmented_theta: Option<PathBuf>,
    /// Dirichlet concentration of mock answers; omitted means noiseless.
    #[arg(long)]
    pub mock_kappa: Option<f64>,
    #[arg(long, default_value_t = 11)]
    pub mock_seed: u64,
    /// Moments the mock uses to rebuild features from a persona; fitted on the input when omitted.
    #[arg(long)]
    pub standardization: Option<PathBuf>,
    /// Response cache directory.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Overrides the configured concurrency.
    #[arg(long)]
    pub concurrency: Option<usize>,
}

#[derive(Args, Serialize, Deserialize, Clone, Debug)]
pub struct AgentsRunArgs {
    /// Records whose demographics define the personas.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub agent: AgentArgs,
}

#[derive(Args, Serialize, Deserialize, Clone, Debug)]
pub struct FitArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also fit the per-activity OLS baseline.
    #[arg(long)]
    pub ols: bool,
    /// Percentile bootstrap with this many replicates.
    #[arg(long)]
    pub bootstrap: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub bootstrap_seed: u64,
    /// Known parameters (theta JSON or synth metadata); reports recovery error.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Comma-separated active features; the rest are pinned at zero.
    #[arg(long, value_delimiter = ',')]
    pub features: Option<Vec<String>>,
    /// Number of perturbed restarts.
    #[arg(long)]
    pub multi_start: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub multi_start_seed: u64,
    /// Full estimator options JSON; flags above override its fields.
    #[arg(long)]
    pub options: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Clone, Debug)]
pub struct CompareArgs {
    /// Fit of the human data.
    #[arg(long)]
    pub human: PathBuf,
    /// Model fit as NAME=PATH; repeatable.
    #[arg(long = "model", required = true)]
    pub models: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Leave intercepts out of the cosine and divergence vectors.
    #[arg(long)]
    pub exclude_intercept: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorArg {
    Structural,
    Ols,
}

#[derive(Args, Serialize, Deserialize, Clone, Debug)]
pub struct ShiftTestArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Baseline moments; fitted on the input when omitted.
    #[arg(long)]
    pub standardization: Option<PathBuf>,
    /// JSON array of shift specs; the standard four when omitted.
    #[arg(long)]
    pub specs: Option<PathBuf>,
    /// Seed of the standard shift set.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Set every magnitude to zero.
    #[arg(long)]
    pub zero: bool,
    /// Re-fit moments on each shifted sample instead of reusing the baseline.
    #[arg(long)]
    pub refit_standardization: bool,
    /// Regenerate outcomes from these parameters instead of carrying them.
    #[arg(long)]
    pub simulate_theta: Option<PathBuf>,
    #[arg(long)]
    pub simulate_kappa: Option<f64>,
    #[arg(long, default_value_t = 3)]
    pub simulate_seed: u64,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [EstimatorArg::Structural, EstimatorArg::Ols])]
    pub estimators: Vec<EstimatorArg>,
    /// Also write every shifted dataset.
    #[arg(long)]
    pub write_shifted: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    Mock,
    Http,
}

#[derive(Args, Serialize, Deserialize, Clone, Debug)]
pub struct RagRunArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Knowledge-base JSON file; repeatable.
    #[arg(long = "kb", required = true)]
    pub kbs: Vec<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = EmbedderKind::Mock)]
    pub embedder: EmbedderKind,
    #[arg(long)]
    pub embedder_config: Option<PathBuf>,
    /// Embedding cache directory.
    #[arg(long)]
    pub embed_cache: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub agent: AgentArgs,
}

#[derive(Args, Serialize, Deserialize, Clone, Debug)]
pub struct RagCompareArgs {
    #[arg(long)]
    pub human: PathBuf,
    /// Model fit without augmentation.
    #[arg(long)]
    pub before: PathBuf,
    /// Model fit with augmentation.
    #[arg(long)]
    pub after: PathBuf,
    #[arg(
        long,
        value_delimiter = ',',
        default_values_t = ["spouse_present", "partner_present", "race_black", "race_native", "race_asian", "race_pacific"].map(String::from)
    )]
    pub features: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Serialize, Deserialize, Clone, Debug)]
pub struct ReportArgs {
    /// Output directory of an earlier command; repeatable.
    #[arg(long = "input", required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Serialize, Deserialize, Clone, Debug)]
pub struct RerunArgs {
    /// A run_config.json written by an earlier command.
    #[arg(long)]
    pub config: PathBuf,
    /// Write to this directory instead of the recorded one.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// The resolved configuration written beside every output.
#[derive(Serialize, Deserialize, Debug)]
pub struct RunConfig {
    pub tool: String,
    pub version: String,
    #[serde(flatten)]
    pub command: Command,
    /// Values loaded from files or filled by defaults, recorded for audit.
    pub resolved: BTreeMap<String, Value>,
}

type Resolved = BTreeMap<String, Value>;

impl Command {
    fn out_mut(&mut self) -> Option<&mut PathBuf> {
        match self {
            Command::Ingest(a) => Some(&mut a.out),
            Command::Synth(a) => Some(&mut a.out),
            Command::Agents { action: AgentsCommand::Run(a) } => Some(&mut a.out),
            Command::Fit(a) => Some(&mut a.out),
            Command::Compare(a) => Some(&mut a.out),
            Command::ShiftTest(a) => Some(&mut a.out),
            Command::Rag { action: RagCommand::Run(a) } => Some(&mut a.out),
            Command::Rag { action: RagCommand::Compare(a) } => Some(&mut a.out),
            Command::Report(a) => Some(&mut a.out),
            Command::Rerun(_) => None,
        }
    }
}

pub fn execute(mut command: Command) -> Result<()> {
    if let Command::Rerun(args) = &command {
        let recorded: RunConfig = load_json(&args.config)?;
        let mut inner = recorded.command;
        match (inner.out_mut(), &args.out) {
            (None, _) => return Err(Error::InvalidConfig("a rerun config cannot itself be a rerun".into())),
            (Some(out), Some(new)) => *out = new.clone(),
            (Some(_), None) => {}
        }
        return execute(inner);
    }
    let resolved = match &command {
        Command::Ingest(a) => ingest(a),
        Command::Synth(a) => synth(a),
        Command::Agents { action: AgentsCommand::Run(a) } => agents_run(a),
        Command::Fit(a) => fit(a),
        Command::Compare(a) => compare(a),
        Command::ShiftTest(a) => shift_test(a),
        Command::Rag { action: RagCommand::Run(a) } => rag_run(a),
        Command::Rag { action: RagCommand::Compare(a) } => rag_compare(a),
        Command::Report(a) => report::run(&a.inputs, &a.out),
        Command::Rerun(_) => unreachable!("handled above"),
    }?;
    let out = command.out_mut().expect("every non-rerun command has an output directory").clone();
    let converged = resolved.get("converged").and_then(Value::as_bool).unwrap_or(true);
    let config = RunConfig { tool: "timeuse".into(), version: env!("CARGO_PKG_VERSION").into(), command, resolved };
    save_json(&out.join(RUN_CONFIG_FILE), &config)?;
    if !converged {
        // Outputs are kept for inspection, but the run still fails.
        return Err(Error::NotConverged(format!("iteration limit reached; see {}", out.join("fit.json").display())));
    }
    Ok(())
}

fn put_csv(path: &Path, bytes: Vec<u8>) -> Result<()> {
    write_atomic(path, &bytes)
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

/// Accepts either a bare theta matrix or a synth metadata file.
fn load_theta(path: &Path) -> Result<ThetaMatrix> {
    let value: Value = load_json(path)?;
    let theta = value.get("theta_star").cloned().unwrap_or(value);
    serde_json::from_value(theta).map_err(|e| Error::Json(e).context(format!("reading parameters from {}", path.display())))
}

fn noise(kappa: Option<f64>) -> NoiseConfig {
    kappa.map_or(NoiseConfig::None, |kappa| NoiseConfig::Dirichlet { kappa })
}

fn parse_features(names: &[String]) -> Result<Vec<Feature>> {
    names
        .iter()
        .map(|n| Feature::from_name(n.trim()).ok_or_else(|| Error::InvalidConfig(format!("unknown feature `{n}`"))))
        .collect()
}

fn fitted_standardization(records: &[Record]) -> Result<StandardizationParams> {
    let demos: Vec<Demographics> = records.iter().map(|r| r.demo).collect();
    fit_standardization(&demos)
}

fn ingest(a: &IngestArgs) -> Result<Resolved> {
    let map: HeaderMap = match &a.header_map {
        Some(p) => load_json(p)?,
        None => HeaderMap::default(),
    };
    if !a.delimiter.is_ascii() {
        return Err(Error::InvalidConfig("delimiter must be a single ASCII character".into()));
    }
    let file = fs::File::open(&a.input).map_err(|e| Error::io(&a.input, e))?;
    let rows = read_raw_csv(file, &map, a.delimiter as u8).map_err(|e| e.context(format!("reading {}", a.input.display())))?;
    let cleaned = clean_rows(rows);
    let funnel = cleaned.funnel();
    if cleaned.accepted.is_empty() {
        return Err(Error::InsufficientData("no rows survived cleaning".into()));
    }
    let demos: Vec<Demographics> = cleaned.accepted.iter().map(|s| s.demo).collect();
    let params = fit_standardization(&demos)?;
    let records = apply_standardization(&cleaned.accepted, &params);

    save_records(&a.out.join("records.csv"), &records)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["record_id", "reason"])?;
    for (id, reason) in &cleaned.rejected {
        w.write_record([id.as_str(), reason.as_str()])?;
    }
    put_csv(&a.out.join("rejections.csv"), w.into_inner().map_err(|e| Error::io("<csv>", e.into_error()))?)?;
    save_json(&a.out.join("standardization.json"), &params)?;
    save_json(&a.out.join("funnel.json"), &funnel)?;
    put_csv(&a.out.join("summary.csv"), summarize(&records)?.to_csv()?)?;
    println!("ingested {} of {} rows ({} rejected)", funnel.accepted, funnel.raw, funnel.raw - funnel.accepted);
    Ok(BTreeMap::from([("header_map".into(), to_value(&map))]))
}

fn synth(a: &SynthArgs) -> Result<Resolved> {
    let mut population: PopulationConfig = match &a.population {
        Some(p) => load_json(p)?,
        None => PopulationConfig::default(),
    };
    if let Some(n) = a.n {
        population.n = n;
    }
    if let Some(seed) = a.seed {
        population.seed = seed;
    }
    if a.correlated {
        population.links = CovariateLinks::correlated();
    }
    let theta = match &a.theta {
        Some(p) => load_theta(p)?,
        None => random_theta(a.theta_seed, a.theta_scale),
    };
    let noise = noise(a.kappa);
    let (people, params) = generate_population(&population)?;
    let records = simulate_allocations(&theta, &people, &noise, a.noise_seed, DEFAULT_TOTAL_MINUTES)?;
    let meta = SynthMetadata::new(population.clone(), theta.clone(), noise, a.noise_seed, params);

    save_records(&a.out.join("records.csv"), &records)?;
    save_json(&a.out.join("metadata.json"), &meta)?;
    save_json(&a.out.join("theta_star.json"), &theta)?;
    save_json(&a.out.join("standardization.json"), &params)?;
    println!("generated {} records", records.len());
    Ok(BTreeMap::from([("population".into(), to_value(&population)), ("theta_star".into(), to_value(&theta))]))
}

fn build_agent(a: &AgentArgs, records: &[Record], resolved: &mut Resolved) -> Result<(Box<dyn Agent>, usize)> {
    if a.mock {
        let theta = match &a.mock_theta {
            Some(p) => load_theta(p)?,
            None => random_theta(a.mock_theta_seed, a.mock_theta_scale),
        };
        let params = match &a.standardization {
            Some(p) => load_json(p)?,
            None => fitted_standardization(records)?,
        };
        let mut agent = MockAgent::new(theta, noise(a.mock_kappa), a.mock_seed, params);
        if let Some(p) = &a.mock_augmented_theta {
            agent.augmented_theta = Some(load_theta(p)?);
        }
        resolved.insert("mock_agent".into(), to_value(&agent));
        return Ok((Box::new(agent), a.concurrency.unwrap_or(4)));
    }
    let Some(path) = &a.agent_config else {
        return Err(Error::InvalidConfig("either --mock or --agent-config is required".into()));
    };
    let config: AgentConfig = load_json(path)?;
    resolved.insert("agent_config".into(), to_value(&config));
    let concurrency = a.concurrency.unwrap_or(config.concurrency);
    Ok((Box::new(HttpAgent::new(config)?), concurrency))
}

fn write_batch(out: &Path, outcome: &BatchOutcome) -> Result<()> {
    save_records(&out.join("records.csv"), &outcome.records)?;
    put_csv(&out.join("responses.csv"), outcome.index_csv()?)?;
    let mut lines = Vec::new();
    for r in &outcome.responses {
        let line = json!({
            "record_id": r.record_id,
            "model": r.model,
            "prompt_hash": r.prompt_hash,
            "status": r.status,
            "raw": r.raw,
            "failure": r.failure,
            "retries": r.retries,
        });
        lines.extend(serde_json::to_vec(&line)?);
        lines.push(b'\n');
    }
    write_atomic(&out.join("responses.jsonl"), &lines)?;
    let dropped = outcome.dropped().count();
    println!(
        "{} decisions parsed, {} dropped, {} network calls",
        outcome.records.len(),
        dropped,
        outcome.network_calls
    );
    if dropped > 0 {
        log::warn!("{dropped} responses could not be parsed; see responses.csv");
    }
    Ok(())
}

fn batch(a: &AgentArgs, records: &[Record], items: &[BatchItem], resolved: &mut Resolved) -> Result<BatchOutcome> {
    let (agent, concurrency) = build_agent(a, records, resolved)?;
    let cache = a.cache.as_ref().map(ResponseCache::new);
    resolved.insert("concurrency".into(), json!(concurrency));
    run_batch(agent.as_ref(), cache.as_ref(), items, concurrency)
}

fn agents_run(a: &AgentsRunArgs) -> Result<Resolved> {
    let records = load_records(&a.input, DEFAULT_TOTAL_MINUTES)?;
    let items = prepare_items(&records)?;
    let mut resolved = Resolved::new();
    let outcome = batch(&a.agent, &records, &items, &mut resolved)?;
    write_batch(&a.out, &outcome)?;
    Ok(resolved)
}

fn fit(a: &FitArgs) -> Result<Resolved> {
    let records = load_records(&a.input, DEFAULT_TOTAL_MINUTES)?;
    let mut opts: FitOptions = match &a.options {
        Some(p) => load_json(p)?,
        None => FitOptions::default(),
    };
    if let Some(names) = &a.features {
        opts.active_features = parse_features(names)?;
    }
    if let Some(starts) = a.multi_start {
        opts.multi_start = Some(MultiStart { starts, seed: a.multi_start_seed, ..MultiStart::default() });
    }
    let mut result = fit_structural(&records, &opts)?;
    if let Some(b) = a.bootstrap {
        let boot = bootstrap_ci(&records, &opts, b, a.bootstrap_seed)?;
        result = result.with_bootstrap(&boot);
    }
    save_json(&a.out.join("fit.json"), &result)?;
    println!("structural fit: n = {}, sse = {:.6e}, converged = {}", result.n_obs, result.sse, result.converged);
    if a.ols {
        let ols = fit_ols(&records, &opts.active_features)?;
        save_json(&a.out.join("ols.json"), &ols)?;
    }
    if let Some(p) = &a.truth {
        let truth = load_theta(p)?;
        let recovery = recovery(&result, &truth);
        println!("MAD(theta_hat, theta_star) = {:.6e}", recovery["mad"].as_f64().unwrap_or(f64::NAN));
        save_json(&a.out.join("recovery.json"), &recovery)?;
    }
    Ok(BTreeMap::from([("fit_options".into(), to_value(&opts)), ("converged".into(), json!(result.converged))]))
}

fn recovery(fit: &FitResult, truth: &ThetaMatrix) -> Value {
    let (est, tru) = (fit.flat(), truth.flat());
    let diffs: Vec<f64> = est.iter().zip(&tru).map(|(a, b)| (a - b).abs()).collect();
    let mad = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let max_abs = diffs.iter().copied().fold(0.0, f64::max);
    let cosines: BTreeMap<&str, Option<f64>> = Activity::FREE
        .iter()
        .enumerate()
        .map(|(j, act)| {
            let r = j * FEATURE_DIM..(j + 1) * FEATURE_DIM;
            (act.name(), timeuse_core::alignment::cosine_similarity(&est[r.clone()], &tru[r]).ok())
        })
        .collect();
    json!({ "mad": mad, "max_abs_error": max_abs, "activity_cosine": cosines })
}

fn compare(a: &CompareArgs) -> Result<Resolved> {
    let human: FitResult = load_json(&a.human)?;
    let models = a
        .models
        .iter()
        .map(|spec| {
            let (name, path) = spec
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("--model expects NAME=PATH, got `{spec}`")))?;
            Ok((name.to_string(), load_json::<FitResult>(Path::new(path))?))
        })
        .collect::<Result<Vec<_>>>()?;
    let opts = AlignmentOptions { include_intercept: !a.exclude_intercept };
    let report = alignment_report(&human, &models, &opts)?;
    report.write(&a.out)?;
    for row in &report.model_divergence {
        println!("{}: M = {:.6}", row.model, row.m_cells);
    }
    Ok(BTreeMap::from([("alignment_options".into(), to_value(&opts))]))
}

fn shift_test(a: &ShiftTestArgs) -> Result<Resolved> {
    let records = load_records(&a.input, DEFAULT_TOTAL_MINUTES)?;
    let baseline = match &a.standardization {
        Some(p) => load_json(p)?,
        None => fitted_standardization(&records)?,
    };
    let mut specs: Vec<ShiftSpec> = match &a.specs {
        Some(p) => load_json(p)?,
        None => ShiftSpec::standard_set(a.seed),
    };
    if a.zero {
        specs = specs.iter().map(ShiftSpec::zeroed).collect();
    }
    let outcomes = match &a.simulate_theta {
        Some(p) => OutcomePolicy::Simulate { theta: load_theta(p)?, noise: noise(a.simulate_kappa), seed: a.simulate_seed },
        None => OutcomePolicy::Carry,
    };
    let standardization = if a.refit_standardization { Standardization::Refit } else { Standardization::Baseline };
    let opts = InvarianceOptions { fit: FitOptions::default(), standardization, outcomes };
    let mut estimators: Vec<EstimatorKind> = a
        .estimators
        .iter()
        .map(|e| match e {
            EstimatorArg::Structural => EstimatorKind::Structural,
            EstimatorArg::Ols => EstimatorKind::Ols,
        })
        .collect();
    estimators.sort();
    estimators.dedup();
    let run = run_invariance(&records, &baseline, &specs, &estimators, &opts)?;
    write_drift(&a.out, &run.reports)?;
    let provenance: Vec<ShiftProvenance> = run
        .shifted
        .iter()
        .map(|s| ShiftProvenance {
            spec: s.spec.clone(),
            realization: s.realization.clone(),
            standardization_mode: standardization,
            standardization: s.standardization,
        })
        .collect();
    save_json(&a.out.join("shifts.json"), &provenance)?;
    if a.write_shifted {
        for (i, s) in run.shifted.iter().enumerate() {
            save_records(&a.out.join("shifted").join(format!("{i:02}_{}.csv", s.spec.kind.name())), &s.records)?;
        }
    }
    for r in &run.reports {
        println!("{} / {}: MAD = {:.6e}, RelL2 = {:.6e}, 1-cos = {:.6e}", r.shift, r.estimator.name(), r.mad, r.rel_l2, r.one_minus_cos);
    }
    Ok(BTreeMap::from([
        ("baseline_standardization".into(), to_value(&baseline)),
        ("shift_specs".into(), to_value(&specs)),
        ("invariance_options".into(), to_value(&opts)),
    ]))
}

fn rag_run(a: &RagRunArgs) -> Result<Resolved> {
    let records = load_records(&a.input, DEFAULT_TOTAL_MINUTES)?;
    let kb = KnowledgeBase::load(&a.kbs)?;
    let mut resolved = Resolved::new();
    let base: Box<dyn Embedder> = match a.embedder {
        EmbedderKind::Mock => Box::new(MockEmbedder::default()),
        EmbedderKind::Http => {
            let config: EmbedderConfig = match &a.embedder_config {
                Some(p) => load_json(p)?,
                None => EmbedderConfig::default(),
            };
            resolved.insert("embedder_config".into(), to_value(&config));
            Box::new(HttpEmbedder::new(config)?)
        }
    };
    let cached;
    let embedder: &dyn Embedder = match &a.embed_cache {
        Some(dir) => {
            cached = CachedEmbedder::new(base.as_ref(), dir);
            &cached
        }
        None => base.as_ref(),
    };
    let ekb = EmbeddedKb::build(kb.clone(), embedder)?;
    let (items, log) = prepare_augmented_items(&records, &ekb, embedder, a.k)?;
    let outcome = batch(&a.agent, &records, &items, &mut resolved)?;
    write_batch(&a.out, &outcome)?;
    put_csv(&a.out.join("retrieval_log.csv"), retrieval_log_csv(&log)?)?;
    save_kb(&a.out.join("kb.json"), &kb)?;
    resolved.insert("embedder_model".into(), json!(embedder.model_id()));
    Ok(resolved)
}

fn rag_compare(a: &RagCompareArgs) -> Result<Resolved> {
    let human: FitResult = load_json(&a.human)?;
    let before: FitResult = load_json(&a.before)?;
    let after: FitResult = load_json(&a.after)?;
    let features = parse_features(&a.features)?;
    let rows = mitigation_table(&human, &before, &after, &features)?;
    put_csv(&a.out.join("mitigation.csv"), mitigation_csv(&rows)?)?;
    save_json(&a.out.join("mitigation.json"), &rows)?;
    for r in &rows {
        let f = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.4}"));
        println!("{}: {} -> {}", r.feature.name(), f(r.cosine_before), f(r.cosine_after));
    }
    Ok(Resolved::new())
}
