//! `fairlm` command line. Every subcommand reads one config document (TOML or
//! JSON), applies `--set key=value` overrides, runs, and writes its outputs plus
//! a `manifest.json` into the configured output directory.
//!
//! Exit codes: 0 success, 1 invalid input, 2 runtime or numerical failure.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fairlm::config::{read_with_overrides, ConfigError};
use fairlm::dataset::{
    load_dataset, write_dataset, Dataset, DatasetError, EmbeddingTable, GroupConfig, IngestConfig, Split,
};
use fairlm::harness::{
    emit_report, evaluate_prompt_variants, gen_synthetic, pareto_frontier, project_embeddings, read_points_csv,
    read_predictions, sweep_with_models, transfer_experiment, write_predictions, HarnessError, ParetoPoint,
    RunManifest, SweepConfig, SyntheticSpec,
};
use fairlm::metrics::{self, EvalReport, DEFAULT_THRESHOLD};
use fairlm::prompting::{
    PromptVariant, ScorerBinding, VariantKind, DEFAULT_SUPER_GROUP_PHRASE, DEFAULT_TARGET_GROUP_PHRASE,
};
use fairlm::training::{
    postprocess_predictions, predict_all, train_emfairening_with, train_head, Features, ModelDocument, ModelKind,
    RemediationConfig,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(
    name = "fairlm",
    version,
    about = "Measure and remediate false-positive-rate gaps between groups"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a planted FPR gap
    GenSynth(Common),
    /// Train a classification head on the dataset embeddings
    TrainHead(Common),
    /// Sweep lambda for one remediation method
    Sweep(Common),
    /// Fit a post-processing model on top of baseline predictions
    Postproc(Common),
    /// Fit post-processing on one baseline and apply it to another
    Transfer(Common),
    /// Evaluate prompt variants through a scorer
    PromptEval(PromptArgs),
    /// Merge sweep outputs and recompute frontiers
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// Config document (.toml or .json)
    config: PathBuf,
    /// Override a config value, e.g. --set sweep.lambdas=[0,1]
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (same as --set out=DIR)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PromptArgs {
    #[command(flatten)]
    common: Common,
    /// Variants to evaluate (base, pbf, pbf2sg, pbf2tg); replaces the config list
    #[arg(long = "variant")]
    variants: Vec<VariantKind>,
    /// Phrase for pbf2tg
    #[arg(long)]
    group_phrase: Option<String>,
    /// Phrase for pbf2sg
    #[arg(long)]
    super_group_phrase: Option<String>,
}

// ---------------------------------------------------------------------------
// errors

enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Runtime(m) => write!(f, "run failed: {m}"),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Validation(e.to_string())
    }
}

macro_rules! via_harness {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                HarnessError::from(e).into()
            }
        }
    )*};
}
via_harness!(
    DatasetError,
    fairlm::training::TrainError,
    fairlm::metrics::MetricsError,
    fairlm::prompting::ScorerError
);

fn io_err(path: &Path, e: impl fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

type Result<T> = std::result::Result<T, CliError>;

// ---------------------------------------------------------------------------
// config documents

/// A dataset file plus how to read it.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetSource {
    records: PathBuf,
    #[serde(flatten)]
    ingest: IngestConfig,
}

impl DatasetSource {
    fn load(&self) -> Result<Dataset> {
        Ok(load_dataset(&self.records, &self.ingest)?)
    }
}

fn default_split_test() -> Split {
    Split::Test
}
fn default_split_train() -> Split {
    Split::Train
}
fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

#[derive(Debug, Deserialize)]
struct ThirdParty {
    dimension: usize,
    #[serde(default)]
    noise: f64,
    #[serde(default)]
    seed: u64,
}

#[derive(Debug, Deserialize)]
struct GenSynthDoc {
    out: PathBuf,
    synthetic: SyntheticSpec,
    #[serde(default)]
    third_party: Option<ThirdParty>,
}

#[derive(Debug, Deserialize)]
struct TrainHeadDoc {
    out: PathBuf,
    dataset: DatasetSource,
    remediation: RemediationConfig,
    #[serde(default = "default_split_test")]
    eval_split: Split,
    #[serde(default = "default_threshold")]
    threshold: f64,
}

#[derive(Debug, Deserialize)]
struct SweepDoc {
    out: PathBuf,
    dataset: DatasetSource,
    sweep: SweepConfig,
    /// Baseline predictions, required for post-processing sweeps.
    #[serde(default)]
    baseline: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
struct PostprocDoc {
    out: PathBuf,
    dataset: DatasetSource,
    remediation: RemediationConfig,
    baseline: PathBuf,
    /// Embedding table used as delta-model input instead of the dataset embeddings.
    #[serde(default)]
    features: Option<PathBuf>,
    #[serde(default = "default_split_train")]
    train_split: Split,
    #[serde(default = "default_split_test")]
    eval_split: Split,
    #[serde(default = "default_threshold")]
    threshold: f64,
}

#[derive(Debug, Deserialize)]
struct TransferDoc {
    out: PathBuf,
    dataset: DatasetSource,
    sweep: SweepConfig,
    source_baseline: PathBuf,
    target_baseline: PathBuf,
    embeddings: PathBuf,
}

fn default_variants() -> Vec<PromptVariant> {
    vec![PromptVariant::Base]
}

#[derive(Debug, Deserialize)]
struct PromptEvalDoc {
    out: PathBuf,
    dataset: DatasetSource,
    scorer: ScorerBinding,
    #[serde(default = "default_variants")]
    variants: Vec<PromptVariant>,
    #[serde(default = "default_split_test")]
    split: Split,
    #[serde(default = "default_threshold")]
    threshold: f64,
}

#[derive(Debug, Deserialize)]
struct ReportDoc {
    out: PathBuf,
    inputs: Vec<PathBuf>,
}

fn load_doc<T: DeserializeOwned>(common: &Common) -> Result<(T, serde_json::Value)> {
    let mut overrides = common.overrides.clone();
    if let Some(out) = &common.out {
        overrides.push(format!(
            "out={}",
            serde_json::to_string(&out.display().to_string()).expect("string")
        ));
    }
    Ok(read_with_overrides(&common.config, &overrides)?)
}

fn prepare_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| io_err(out, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("outputs always serialize");
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_manifest(out: &Path, command: &str, seeds: Vec<u64>, doc: serde_json::Value) -> Result<()> {
    write_json(&out.join("manifest.json"), &RunManifest::new(command, seeds, doc))
}

fn write_report(out: &Path, name: &str, report: &EvalReport) -> Result<()> {
    report.write_json(&out.join("report.json"))?;
    report.write_csv(&out.join("groups.csv"), name)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// subcommands

fn gen_synth(common: &Common) -> Result<()> {
    let (doc, raw): (GenSynthDoc, _) = load_doc(common)?;
    prepare_out(&doc.out)?;
    let dataset = gen_synthetic(&doc.synthetic)?;
    let records = doc.out.join("records.jsonl");
    let embeddings = doc.out.join("embeddings.jsonl");
    let ingest = write_dataset(&dataset, "label", &records, Some(&embeddings))?;
    write_json(&doc.out.join("dataset.json"), &DatasetSource { records, ingest })?;
    if let Some(meta) = dataset.metadata() {
        write_json(&doc.out.join("metadata.json"), meta)?;
    }
    let mut seeds = vec![doc.synthetic.seed];
    if let Some(tp) = &doc.third_party {
        let table = project_embeddings(&dataset, tp.dimension, tp.noise, tp.seed)?;
        let path = doc.out.join("third_party.jsonl");
        let ids: Vec<&str> = dataset.examples().map(|ex| ex.id.as_str()).collect();
        table.write_jsonl(&path, ids)?;
        seeds.push(tp.seed);
    }
    write_manifest(&doc.out, "gen-synth", seeds, raw)?;
    log::info!("wrote {} examples to {}", dataset.len(), doc.out.display());
    Ok(())
}

fn train_head_cmd(common: &Common) -> Result<()> {
    let (doc, raw): (TrainHeadDoc, _) = load_doc(common)?;
    prepare_out(&doc.out)?;
    let dataset = doc.dataset.load()?;
    let trained = train_head(&dataset, &doc.remediation)?;
    ModelDocument::new(ModelKind::Head, &trained.model, &doc.remediation, &trained.loss_trace)
        .save(&doc.out.join("model.json"))?;
    let predictions = predict_all(&trained.model, &dataset)?;
    write_predictions(&doc.out.join("predictions.jsonl"), &predictions)?;
    let groups = GroupConfig::new(vec![doc.remediation.pair.clone()])?;
    let report = metrics::evaluate(&dataset, doc.eval_split, &predictions, &groups, doc.threshold)?;
    write_report(&doc.out, "head", &report)?;
    write_manifest(&doc.out, "train-head", vec![doc.remediation.seed], raw)
}

fn sweep_cmd(common: &Common) -> Result<()> {
    let (doc, raw): (SweepDoc, _) = load_doc(common)?;
    prepare_out(&doc.out)?;
    let dataset = doc.dataset.load()?;
    let baseline = doc.baseline.as_deref().map(read_predictions).transpose()?;
    let results = sweep_with_models(&dataset, &doc.sweep, baseline.as_ref())?;
    let models = doc.out.join("models");
    prepare_out(&models)?;
    let mut points = Vec::with_capacity(results.len());
    let mut reports = BTreeMap::new();
    for (i, r) in results.iter().enumerate() {
        r.model
            .save(&models.join(format!("{i:02}-lambda-{}.json", r.point.lambda)))?;
        reports.insert(format!("lambda={}", r.point.lambda), r.report.clone());
        points.push(r.point.clone());
    }
    let manifest = RunManifest::new("sweep", vec![doc.sweep.base.seed], raw);
    emit_report(&points, &reports, &manifest, &doc.out)?;
    Ok(())
}

fn postproc_cmd(common: &Common) -> Result<()> {
    let (doc, raw): (PostprocDoc, _) = load_doc(common)?;
    prepare_out(&doc.out)?;
    let dataset = doc.dataset.load()?;
    let baseline = read_predictions(&doc.baseline)?;
    let table = doc
        .features
        .as_deref()
        .map(|p| EmbeddingTable::load(p, None))
        .transpose()?;
    let features = match &table {
        Some(t) => Features::Table(t),
        None => Features::Dataset,
    };
    let trained = train_emfairening_with(&baseline, &dataset, doc.train_split, &doc.remediation, features)?;
    ModelDocument::new(
        ModelKind::Emfairening,
        &trained.model.delta,
        &doc.remediation,
        &trained.loss_trace,
    )
    .save(&doc.out.join("model.json"))?;
    let mut predictions = HashMap::new();
    for split in Split::ALL {
        predictions.extend(postprocess_predictions(
            &trained.model,
            &baseline,
            &dataset,
            split,
            features,
        )?);
    }
    write_predictions(&doc.out.join("predictions.jsonl"), &predictions)?;
    let groups = GroupConfig::new(vec![doc.remediation.pair.clone()])?;
    let report = metrics::evaluate(&dataset, doc.eval_split, &predictions, &groups, doc.threshold)?;
    write_report(&doc.out, "postproc", &report)?;
    write_manifest(&doc.out, "postproc", vec![doc.remediation.seed], raw)
}

fn transfer_cmd(common: &Common) -> Result<()> {
    let (doc, raw): (TransferDoc, _) = load_doc(common)?;
    prepare_out(&doc.out)?;
    let dataset = doc.dataset.load()?;
    let source = read_predictions(&doc.source_baseline)?;
    let target = read_predictions(&doc.target_baseline)?;
    let table = EmbeddingTable::load(&doc.embeddings, None)?;
    let outcome = transfer_experiment(&source, &target, &table, &dataset, &doc.sweep)?;
    let points: Vec<ParetoPoint> = outcome.native.into_iter().chain(outcome.transfer).collect();
    let manifest = RunManifest::new("transfer", vec![doc.sweep.base.seed], raw);
    emit_report(&points, &BTreeMap::new(), &manifest, &doc.out)?;
    Ok(())
}

fn prompt_eval_cmd(args: &PromptArgs) -> Result<()> {
    let (mut doc, mut raw): (PromptEvalDoc, serde_json::Value) = load_doc(&args.common)?;
    if !args.variants.is_empty() {
        let mut variants = Vec::with_capacity(args.variants.len());
        for &kind in &args.variants {
            let (target, super_group) = match kind {
                VariantKind::Pbf2sg => (
                    None,
                    Some(
                        args.super_group_phrase
                            .clone()
                            .unwrap_or_else(|| DEFAULT_SUPER_GROUP_PHRASE.into()),
                    ),
                ),
                VariantKind::Pbf2tg => (
                    Some(
                        args.group_phrase
                            .clone()
                            .unwrap_or_else(|| DEFAULT_TARGET_GROUP_PHRASE.into()),
                    ),
                    None,
                ),
                _ => (None, None),
            };
            let variant = PromptVariant::from_parts(kind, target, super_group)
                .map_err(|e| CliError::Validation(e.to_string()))?;
            variants.push(variant);
        }
        doc.variants = variants;
        raw["variants"] = serde_json::to_value(&doc.variants).expect("variants serialize");
    } else if args.group_phrase.is_some() || args.super_group_phrase.is_some() {
        return Err(CliError::Validation(
            "--group-phrase and --super-group-phrase need at least one --variant".into(),
        ));
    }
    prepare_out(&doc.out)?;
    let dataset = doc.dataset.load()?;
    let groups = dataset.group_table().clone();
    if groups.pairs.is_empty() {
        return Err(CliError::Validation(
            "the dataset config declares no group pairs".into(),
        ));
    }
    let reports = evaluate_prompt_variants(&dataset, doc.split, &doc.scorer, &doc.variants, &groups, doc.threshold)?;
    // prompts have no lambda; each variant is a single point per pair
    let mut points = Vec::new();
    for (key, report) in &reports {
        for pair in &groups.pairs {
            let mut p = ParetoPoint::from_report(0.0, &format!("prompt:{key}"), report, pair);
            if groups.pairs.len() > 1 {
                p.method = format!("prompt:{key}:{}/{}", pair.group, pair.majority);
            }
            points.push(p);
        }
    }
    let manifest = RunManifest::new("prompt-eval", vec![], raw);
    emit_report(&points, &reports, &manifest, &doc.out)?;
    Ok(())
}

fn report_cmd(common: &Common) -> Result<()> {
    let (doc, raw): (ReportDoc, _) = load_doc(common)?;
    if doc.inputs.is_empty() {
        return Err(CliError::Validation("report needs at least one input".into()));
    }
    prepare_out(&doc.out)?;
    let mut points = Vec::new();
    for path in &doc.inputs {
        points.extend(read_points_csv(path)?);
    }
    let manifest = RunManifest::new("report", vec![], raw);
    let files = emit_report(&points, &BTreeMap::new(), &manifest, &doc.out)?;
    let overall = pareto_frontier(&points);
    fs::write(
        doc.out.join("frontier_all.csv"),
        fairlm::harness::points_to_csv(&overall),
    )
    .map_err(|e| io_err(&files.frontier, e))?;
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenSynth(c) => gen_synth(c),
        Command::TrainHead(c) => train_head_cmd(c),
        Command::Sweep(c) => sweep_cmd(c),
        Command::Postproc(c) => postproc_cmd(c),
        Command::Transfer(c) => transfer_cmd(c),
        Command::PromptEval(a) => prompt_eval_cmd(a),
        Command::Report(c) => report_cmd(c),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fairlm: {e}");
            ExitCode::from(e.code())
        }
    }
}
