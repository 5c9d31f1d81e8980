//! Command-line entry points.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use crate::aggregation::{AggregatorKind, PriorSet};
use crate::checkpoint;
use crate::data::{Dataset, SplitSpec};
use crate::embeddings::load_embeddings;
use crate::error::{Error, Result};
use crate::gradcheck::{self, GradcheckConfig};
use crate::interpretation::{evidence, explain, write_evidence_csv};
use crate::labels::{kaplan_meier, GridScheme};
use crate::metrics::{evaluate, EvaluationReport, PatientOutput, TieMode};
use crate::prediction::HeadKind;
use crate::prompts::PhraseConfig;
use crate::synth::{generate, SynthConfig};
use crate::trainer::{fit, predict_outputs, write_log_csv, TrainConfig};

pub const OUT_DIR_ENV: &str = "VLSA_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "vlsa", version, about = "Discrete-time survival analysis with language-encoded priors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort.
    Synth(SynthArgs),
    /// Train a model on one fold (or the whole manifest).
    Train(TrainArgs),
    /// Evaluate a checkpoint, or average saved reports with --aggregate.
    Eval(EvalArgs),
    /// Shapley attribution and top instances for one patient.
    Interpret(InterpretArgs),
    /// Kaplan-Meier curve of a manifest.
    Km(KmArgs),
    /// Finite-difference check of all analytic gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, env = OUT_DIR_ENV)]
    pub out: PathBuf,
    /// JSON file with synth settings; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub k_min: Option<usize>,
    #[arg(long)]
    pub k_max: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub prototypes: Option<usize>,
    #[arg(long)]
    pub signal: Option<f64>,
    #[arg(long)]
    pub censoring: Option<f64>,
    #[arg(long)]
    pub baseline: Option<f64>,
    #[arg(long)]
    pub hazard_slope: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    NoOrdinalPrompts,
    NoEmd,
    Attention,
    Prototypes,
    HazardHead,
    QuantileBins,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// VLSB file with one prior embedding per row.
    #[arg(long)]
    pub priors: Option<PathBuf>,
    /// JSON phrase file; its `priors` list labels the prior rows.
    #[arg(long)]
    pub phrases: Option<PathBuf>,
    #[arg(long, env = OUT_DIR_ENV)]
    pub out: PathBuf,
    /// JSON file with training settings; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Fold to hold out, as `i/k`. Without it the whole manifest is used.
    #[arg(long)]
    pub fold: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub ablation: Vec<Ablation>,
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub accumulation: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub token_dim: Option<usize>,
    /// Output file stem; defaults to `fold<i>` or `model`.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "aggregate")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, required_unless_present = "aggregate")]
    pub manifest: Option<PathBuf>,
    #[arg(long, env = OUT_DIR_ENV)]
    pub out: PathBuf,
    /// Override the checkpoint's stored fold, as `i/k`.
    #[arg(long)]
    pub fold: Option<String>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    /// Evaluate on the training part of the split instead of the held-out part.
    #[arg(long)]
    pub on_train: bool,
    #[arg(long, default_value_t = 10)]
    pub dcal_bins: usize,
    /// Score risk ties as 0.5 in the concordance index.
    #[arg(long)]
    pub ties_half: bool,
    /// Average these report files instead of evaluating a checkpoint.
    #[arg(long, num_args = 1.., conflicts_with = "checkpoint")]
    pub aggregate: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InterpretArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub patient: String,
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
    #[arg(long, env = OUT_DIR_ENV)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct KmArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, env = OUT_DIR_ENV)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Corrupt the analytic head gradient to confirm the check can fail.
    #[arg(long)]
    pub break_head: bool,
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

pub fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Interpret(a) => cmd_interpret(a),
        Command::Km(a) => cmd_km(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn read_json<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => Ok(serde_json::from_str(&fs::read_to_string(p)?)?),
        None => Ok(T::default()),
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn cmd_synth(a: SynthArgs) -> Result<ExitCode> {
    let mut cfg: SynthConfig = read_json(a.config.as_deref())?;
    set(&mut cfg.n_patients, a.n);
    set(&mut cfg.seed, a.seed);
    set(&mut cfg.k_min, a.k_min);
    set(&mut cfg.k_max, a.k_max);
    set(&mut cfg.dim, a.dim);
    set(&mut cfg.n_prototypes, a.prototypes);
    set(&mut cfg.signal_strength, a.signal);
    set(&mut cfg.censoring_rate, a.censoring);
    set(&mut cfg.baseline_scale, a.baseline);
    set(&mut cfg.hazard_slope, a.hazard_slope);
    let cohort = generate(&cfg)?;
    cohort.write(&a.out)?;
    println!(
        "synth: {} patients, censored {:.3}, oracle CI {:.4}, written to {}",
        cohort.data.len(),
        cohort.censored_fraction(),
        cohort.oracle_ci()?,
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn load_priors(path: &Path, phrases: Option<&Path>) -> Result<PriorSet> {
    let base = load_embeddings(path)?;
    let mut texts = match phrases {
        Some(p) => serde_json::from_str::<PhraseConfig>(&fs::read_to_string(p)?)?.priors,
        None => Vec::new(),
    };
    if !texts.is_empty() && texts.len() != base.nrows() {
        return Err(Error::Shape(format!("{} prior texts for {} prior rows", texts.len(), base.nrows())));
    }
    if texts.is_empty() {
        texts = (1..=base.nrows()).map(|i| format!("prior {i}")).collect();
    }
    PriorSet::new(base, texts)
}

pub fn train_config_from(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = read_json(a.config.as_deref())?;
    set(&mut cfg.seed, a.seed);
    set(&mut cfg.epochs, a.epochs);
    set(&mut cfg.learning_rate, a.lr);
    set(&mut cfg.weight_decay, a.weight_decay);
    set(&mut cfg.accumulation_steps, a.accumulation);
    set(&mut cfg.beta, a.beta);
    set(&mut cfg.aggregator.alpha, a.alpha);
    set(&mut cfg.token_dim, a.token_dim);
    if a.bins.is_some() {
        cfg.bins = a.bins;
    }
    for ab in &a.ablation {
        match ab {
            Ablation::NoOrdinalPrompts => cfg.ordinal_prompts = false,
            Ablation::NoEmd => {
                cfg.use_emd = false;
                cfg.beta = 0.0;
            }
            Ablation::Attention => cfg.aggregator.kind = AggregatorKind::Attention,
            Ablation::Prototypes => cfg.aggregator.kind = AggregatorKind::LearnablePrototypes,
            Ablation::HazardHead => cfg.head = HeadKind::Hazard,
            Ablation::QuantileBins => cfg.scheme = GridScheme::Quantile,
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    let cfg = train_config_from(&a)?;
    let data = Dataset::load(&a.manifest)?;
    let split = a.fold.as_deref().map(|f| SplitSpec::parse(f, a.split_seed)).transpose()?;
    let train_set = match split {
        Some(s) => data.subset(&s.apply(data.len())?.train),
        None => data,
    };
    let priors = match (&a.priors, cfg.aggregator.kind) {
        (Some(p), _) => Some(load_priors(p, a.phrases.as_deref())?),
        (None, AggregatorKind::PriorGuided) => {
            return Err(Error::Invalid("--priors is required for prior-guided aggregation".into()))
        }
        (None, _) => None,
    };
    let outcome = fit(&train_set, priors, &cfg, None)?;
    fs::create_dir_all(&a.out)?;
    let stem = a.name.clone().unwrap_or_else(|| split.map_or("model".into(), |s| format!("fold{}", s.fold)));
    let ckpt = a.out.join(format!("{stem}.vlsk"));
    checkpoint::save(&ckpt, &outcome.model, &cfg, &outcome.log, split)?;
    write_log_csv(a.out.join(format!("{stem}_log.csv")), &outcome.log)?;
    println!(
        "train: {} patients, C = {}, aggregator {:?}, beta = {}, ordinal prompts {}, head {:?}",
        train_set.len(),
        outcome.model.num_classes(),
        cfg.aggregator.kind,
        if cfg.use_emd { cfg.beta } else { 0.0 },
        cfg.ordinal_prompts,
        cfg.head
    );
    for e in &outcome.log {
        println!("epoch {:>3}  loss {:.6}", e.epoch, e.mean_loss);
    }
    println!("checkpoint written to {}", ckpt.display());
    Ok(ExitCode::SUCCESS)
}

fn write_predictions(path: &Path, data: &Dataset, outputs: &[PatientOutput]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let c = outputs.first().map_or(0, |o| o.survival.len());
    let mut header = vec!["patient_id".to_string(), "time".into(), "event".into(), "risk".into(), "expected_time".into()];
    header.extend((1..=c).map(|k| format!("survival_{k}")));
    w.write_record(&header)?;
    for (p, o) in data.patients.iter().zip(outputs) {
        let mut row = vec![
            p.record.patient_id.clone(),
            p.record.time.to_string(),
            u8::from(p.record.event).to_string(),
            o.risk.to_string(),
            o.expected_time.to_string(),
        ];
        row.extend(o.survival.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<ExitCode> {
    fs::create_dir_all(&a.out)?;
    if !a.aggregate.is_empty() {
        let reports = a
            .aggregate
            .iter()
            .map(|p| Ok(serde_json::from_str::<EvaluationReport>(&fs::read_to_string(p)?)?))
            .collect::<Result<Vec<_>>>()?;
        let mean = EvaluationReport::mean(&reports)?;
        let path = a.out.join("aggregate_report.json");
        fs::write(&path, serde_json::to_string_pretty(&mean)?)?;
        println!("aggregate over {} reports: CI {:.4}, MAE {:.3}", reports.len(), mean.ci, mean.mae);
        return Ok(ExitCode::SUCCESS);
    }
    let (Some(ckpt_path), Some(manifest)) = (a.checkpoint, a.manifest) else {
        return Err(Error::Invalid("--checkpoint and --manifest are required".into()));
    };
    let ckpt = checkpoint::load(&ckpt_path)?;
    let data = Dataset::load(&manifest)?;
    let seed = a.split_seed.or(ckpt.header.split.map(|s| s.seed)).unwrap_or(0);
    let split = match a.fold.as_deref() {
        Some(f) => Some(SplitSpec::parse(f, seed)?),
        None => ckpt.header.split,
    };
    let eval_set = match split {
        Some(s) => {
            let fold = s.apply(data.len())?;
            data.subset(if a.on_train { &fold.train } else { &fold.test })
        }
        None => data,
    };
    if eval_set.is_empty() {
        return Err(Error::Empty("evaluation fold"));
    }
    let outputs = predict_outputs(&ckpt.model, &eval_set)?;
    let ties = if a.ties_half { TieMode::Half } else { TieMode::Strict };
    let (report, grouping) = evaluate(&outputs, &eval_set.records(), &ckpt.model.grid, a.dcal_bins, ties)?;
    let stem = ckpt_path.file_stem().and_then(|s| s.to_str()).unwrap_or("model").to_string();
    let suffix = if a.on_train { "_train" } else { "" };
    fs::write(a.out.join(format!("{stem}{suffix}_report.json")), serde_json::to_string_pretty(&report)?)?;
    write_predictions(&a.out.join(format!("{stem}{suffix}_predictions.csv")), &eval_set, &outputs)?;
    if let Some(g) = &grouping {
        g.low_km.write_csv(fs::File::create(a.out.join(format!("{stem}{suffix}_km_low.csv")))?)?;
        g.high_km.write_csv(fs::File::create(a.out.join(format!("{stem}{suffix}_km_high.csv")))?)?;
    }
    println!(
        "eval: {} patients, CI {:.4}, MAE {:.3}, D-cal p {:.4}{}",
        report.n_patients,
        report.ci,
        report.mae,
        report.dcal.pvalue,
        report.logrank.as_ref().map(|l| format!(", log-rank p {:.4}", l.pvalue)).unwrap_or_default()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_interpret(a: InterpretArgs) -> Result<ExitCode> {
    let ckpt = checkpoint::load(&a.checkpoint)?;
    let data = Dataset::load(&a.manifest)?;
    let idx = data
        .position(&a.patient)
        .ok_or_else(|| Error::Invalid(format!("patient `{}` not in manifest", a.patient)))?;
    let bag = data.patients[idx].bag.view();
    let report = explain(&ckpt.model, bag)?;
    let rows = evidence(&ckpt.model, bag, a.top_k)?;
    fs::create_dir_all(&a.out)?;
    report.write_csv(fs::File::create(a.out.join(format!("{}_shapley.csv", a.patient)))?)?;
    write_evidence_csv(fs::File::create(a.out.join(format!("{}_evidence.csv", a.patient)))?, &rows)?;
    println!(
        "interpret {}: risk {:.6} vs baseline {:.6}, efficiency gap {:.2e}",
        a.patient,
        report.full_risk,
        report.baseline_risk,
        report.efficiency_gap()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_km(a: KmArgs) -> Result<ExitCode> {
    let records: Vec<_> =
        crate::data::read_manifest(&a.manifest)?.iter().map(|r| r.record()).collect::<Result<_>>()?;
    let km = kaplan_meier(&records)?;
    fs::create_dir_all(&a.out)?;
    let path = a.out.join("km.csv");
    km.write_csv(fs::File::create(&path)?)?;
    println!("km: {} records, {} event times, written to {}", records.len(), km.times.len(), path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let rows = gradcheck::run(&GradcheckConfig { seed: a.seed, break_head: a.break_head, ..Default::default() })?;
    println!("{:<14} {:>7} {:>12}  status", "group", "params", "rel_error");
    for r in &rows {
        println!("{:<14} {:>7} {:>12.3e}  {}", r.group, r.params, r.rel_error, if r.passed { "pass" } else { "FAIL" });
    }
    Ok(if rows.iter().all(|r| r.passed) { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
