//! Batch command-line surface: one subcommand per pipeline stage, artifacts
//! and metrics written as files, JSON on stdout where a result is the point
//! of the command. Every run drops a `run.json` echoing the fully-resolved
//! configuration so it can be reproduced.

use crate::data::{split, synth_generate, Corpus, SynthSpec};
use crate::encoder::{Encoder, EncoderConfig, TokenBatch, TokenizerConfig};
use crate::error::{Error, Result};
use crate::expert::init_expert;
use crate::gating::GateLossConfig;
use crate::moe::moe_forward;
use crate::registry::{
    assemble_moe, bundle_from_expert, load_bundle, save_bundle, ExpertSelector, GatingSource,
    Registry,
};
use crate::train::{
    evaluate_moe, pretrain_encoder, train_expert, train_gating, LinearHead, OptimizerConfig,
    TrainReport, DEFAULT_BATCH_SIZE,
};
use chrono::Utc;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub const GATE_FILE: &str = "gate.moec";

#[derive(Debug, Parser)]
#[command(
    name = "moecollab",
    version,
    about = "Collaborative mixture-of-experts text classification: pretrain a shared encoder, \
             contribute per-domain experts to a registry, train a gate over them."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-domain corpus and a stratified train/eval split.
    Synth(SynthArgs),
    /// Train the shared encoder on the mixed corpus and store it in the registry.
    Pretrain(PretrainArgs),
    /// Fine-tune one expert on a domain slice against the frozen encoder.
    TrainExpert(TrainExpertArgs),
    /// Validate an expert bundle and add it to the registry.
    Register(RegisterArgs),
    /// Train the gating network over registered experts (encoder and experts frozen).
    TrainGate(TrainGateArgs),
    /// Evaluate an assembled model; prints accuracy / macro-F1 / utilization as JSON.
    Eval(EvalArgs),
    /// Route a single text; prints gate weights and per-expert logits as JSON.
    Route(RouteArgs),
    /// Export per-epoch expert utilization and routing entropy as CSV.
    Stats(StatsArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CommonArgs {
    /// Seed for every random choice the command makes.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Directory for artifacts, reports, and run.json.
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RegistryArgs {
    /// Registry directory (shared encoder + expert bundles + index).
    #[arg(long, env = "MOECOLLAB_REGISTRY")]
    pub registry_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, default_value_t = 4)]
    pub num_domains: usize,
    /// Comma-separated class count per domain; defaults to 3 for every domain.
    #[arg(long, value_delimiter = ',')]
    pub classes_per_domain: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    pub vocab_words_per_class: usize,
    #[arg(long, default_value_t = 40)]
    pub samples_per_class: usize,
    #[arg(long, default_value_t = 0.15)]
    pub noise_rate: f64,
    #[arg(long, default_value_t = 12)]
    pub doc_length: usize,
    /// Fraction of each (domain, label) stratum that goes to train.jsonl.
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub registry: RegistryArgs,
    /// Mixed-domain training corpus (.jsonl with sibling .meta.json).
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 6)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 32)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 64)]
    pub ff_dim: usize,
    #[arg(long, default_value_t = 16)]
    pub max_len: usize,
    #[arg(long, default_value_t = 512)]
    pub vocab_size: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainExpertArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub registry: RegistryArgs,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Domain name whose slice this expert trains on.
    #[arg(long)]
    pub domain: String,
    #[arg(long)]
    pub expert_id: String,
    #[arg(long, default_value = "1.0.0")]
    pub version: String,
    #[arg(long, default_value = "local")]
    pub contributor: String,
    #[arg(long, default_value_t = 8)]
    pub adapter_dim: usize,
    #[arg(long, default_value_t = 12)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
    pub batch_size: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct RegisterArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub registry: RegistryArgs,
    /// Bundle file written by train-expert.
    #[arg(long)]
    pub bundle: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainGateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub registry: RegistryArgs,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Comma-separated expert selectors: `id` (latest) or `id@MAJOR.MINOR.PATCH`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub experts: Vec<String>,
    #[arg(long, default_value_t = 0.01)]
    pub lambda1: f64,
    #[arg(long, default_value_t = 0.1)]
    pub lambda2: f64,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
    pub batch_size: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub registry: RegistryArgs,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    pub experts: Vec<String>,
    /// Gate file to use; defaults to the registry's gate.moec when present,
    /// otherwise a fresh uniform gate.
    #[arg(long)]
    pub gate: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct RouteArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub registry: RegistryArgs,
    /// Input text to route.
    #[arg(long)]
    pub text: String,
    #[arg(long, value_delimiter = ',', required = true)]
    pub experts: Vec<String>,
    #[arg(long)]
    pub gate: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct StatsArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Gate training report (report.json written by train-gate).
    #[arg(long)]
    pub report: PathBuf,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => cmd_synth(&args),
        Command::Pretrain(args) => cmd_pretrain(&args),
        Command::TrainExpert(args) => cmd_train_expert(&args),
        Command::Register(args) => cmd_register(&args),
        Command::TrainGate(args) => cmd_train_gate(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Route(args) => cmd_route(&args),
        Command::Stats(args) => cmd_stats(&args),
    }
}

fn write_run_json<T: Serialize>(out_dir: &Path, command: &str, args: &T) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    #[derive(Serialize)]
    struct RunConfig<'a, T> {
        command: &'a str,
        created_at: String,
        config: &'a T,
    }
    let run = RunConfig {
        command,
        created_at: Utc::now().to_rfc3339(),
        config: args,
    };
    fs::write(
        out_dir.join("run.json"),
        serde_json::to_string_pretty(&run)?,
    )?;
    Ok(())
}

fn write_report(out_dir: &Path, report: &TrainReport) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    fs::write(
        out_dir.join("report.json"),
        serde_json::to_string_pretty(report)?,
    )?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    fs::write(out_dir.join("report.csv"), csv)?;
    Ok(())
}

fn parse_selectors(specs: &[String]) -> Result<Vec<ExpertSelector>> {
    specs.iter().map(|s| ExpertSelector::from_str(s)).collect()
}

fn gate_source(registry_dir: &Path, explicit: &Option<PathBuf>) -> GatingSource {
    match explicit {
        Some(path) => GatingSource::FromFile(path.clone()),
        None => {
            let default = registry_dir.join(GATE_FILE);
            if default.exists() {
                GatingSource::FromFile(default)
            } else {
                GatingSource::Fresh
            }
        }
    }
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let classes_per_domain = if args.classes_per_domain.is_empty() {
        vec![3; args.num_domains]
    } else {
        args.classes_per_domain.clone()
    };
    let spec = SynthSpec {
        num_domains: args.num_domains,
        classes_per_domain,
        vocab_words_per_class: args.vocab_words_per_class,
        samples_per_class: args.samples_per_class,
        noise_rate: args.noise_rate,
        doc_length: args.doc_length,
        seed: args.common.seed,
    };
    let corpus = synth_generate(&spec)?;
    let (train, eval) = split(&corpus, args.train_fraction, args.common.seed)?;
    write_run_json(&args.common.out_dir, "synth", args)?;
    corpus.save(&args.common.out_dir.join("corpus.jsonl"))?;
    train.save(&args.common.out_dir.join("train.jsonl"))?;
    eval.save(&args.common.out_dir.join("eval.jsonl"))?;
    println!(
        "wrote {} examples ({} train / {} eval) across {} domains to {}",
        corpus.examples.len(),
        train.examples.len(),
        eval.examples.len(),
        corpus.domain_names.len(),
        args.common.out_dir.display()
    );
    Ok(())
}

fn cmd_pretrain(args: &PretrainArgs) -> Result<()> {
    let corpus = Corpus::load(&args.corpus)?;
    let tok = TokenizerConfig {
        vocab_size: args.vocab_size,
        max_len: args.max_len,
        lowercase: true,
    };
    tok.validate()?;
    let enc_cfg = EncoderConfig {
        hidden_dim: args.hidden_dim,
        num_layers: args.layers,
        num_heads: args.heads,
        ff_dim: args.ff_dim,
        max_len: args.max_len,
    };
    let mut encoder = Encoder::init(enc_cfg, args.vocab_size, args.common.seed)?;
    let product_classes: usize = corpus.classes_per_domain.iter().sum();
    let mut head = LinearHead::init(args.hidden_dim, product_classes, args.common.seed ^ 1);
    let opt = OptimizerConfig::adam(args.lr, args.common.seed);
    let report = pretrain_encoder(
        &corpus,
        &tok,
        &mut encoder,
        &mut head,
        &opt,
        args.epochs,
        args.batch_size,
    )?;
    let registry = Registry::open(&args.registry.registry_dir)?;
    let fingerprint = registry.save_encoder(&encoder, &tok, &Utc::now().to_rfc3339())?;
    write_run_json(&args.common.out_dir, "pretrain", args)?;
    write_report(&args.common.out_dir, &report)?;
    println!(
        "encoder stored in {} (fingerprint {fingerprint:016x}), final loss {:.4}",
        args.registry.registry_dir.display(),
        report.final_loss().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_train_expert(args: &TrainExpertArgs) -> Result<()> {
    let corpus = Corpus::load(&args.corpus)?;
    let domain = corpus
        .domain_names
        .iter()
        .position(|n| n == &args.domain)
        .ok_or_else(|| {
            Error::Validation(format!(
                "unknown domain {:?}; corpus has {:?}",
                args.domain, corpus.domain_names
            ))
        })?;
    let examples = corpus.domain_slice(domain);
    let registry = Registry::open(&args.registry.registry_dir)?;
    let (encoder, tok, fingerprint) = registry.load_encoder()?;
    let mut expert = init_expert(
        &args.expert_id,
        &args.domain,
        corpus.domain_labels(domain)?,
        encoder.hidden_dim(),
        args.adapter_dim,
        args.common.seed,
    )?;
    let opt = OptimizerConfig::adam(args.lr, args.common.seed);
    let report = train_expert(
        &examples,
        &tok,
        &mut expert,
        &encoder,
        &opt,
        args.epochs,
        args.batch_size,
    )?;
    let version = args.version.parse()?;
    let bundle = bundle_from_expert(
        &expert,
        fingerprint,
        version,
        &args.contributor,
        &Utc::now().to_rfc3339(),
    );
    write_run_json(&args.common.out_dir, "train-expert", args)?;
    write_report(&args.common.out_dir, &report)?;
    let bundle_path = args
        .common
        .out_dir
        .join(format!("{}-{}.moec", args.expert_id, args.version));
    save_bundle(&bundle, &bundle_path)?;
    let last = report.epochs.last();
    println!(
        "expert {} trained on domain {:?} ({} examples), accuracy {:.3}, bundle {}",
        args.expert_id,
        args.domain,
        examples.len(),
        last.map(|e| e.accuracy).unwrap_or(f64::NAN),
        bundle_path.display()
    );
    Ok(())
}

fn cmd_register(args: &RegisterArgs) -> Result<()> {
    let bundle = load_bundle(&args.bundle)?;
    let mut registry = Registry::open(&args.registry.registry_dir)?;
    registry.register_expert(&bundle)?;
    write_run_json(&args.common.out_dir, "register", args)?;
    println!(
        "registered {}@{} in {}",
        bundle.manifest.expert_id,
        bundle.manifest.version,
        args.registry.registry_dir.display()
    );
    Ok(())
}

fn cmd_train_gate(args: &TrainGateArgs) -> Result<()> {
    let corpus = Corpus::load(&args.corpus)?;
    let selectors = parse_selectors(&args.experts)?;
    let registry = Registry::open(&args.registry.registry_dir)?;
    let (_, tok, _) = registry.load_encoder()?;
    let mut moe = assemble_moe(&registry, &selectors, &GatingSource::Fresh)?;
    let cfg = GateLossConfig {
        lambda1: args.lambda1,
        lambda2: args.lambda2,
    };
    let opt = OptimizerConfig::adam(args.lr, args.common.seed);
    let report = train_gating(
        &corpus,
        &tok,
        &mut moe,
        &cfg,
        &opt,
        args.epochs,
        args.batch_size,
    )?;
    // record the exact versions the gate was trained against
    let expert_refs: Vec<String> = selectors
        .iter()
        .map(|s| {
            let entry = registry.resolve(&s.id, s.version)?;
            Ok(format!("{}@{}", entry.expert_id, entry.version))
        })
        .collect::<Result<_>>()?;
    let gate_path = args.registry.registry_dir.join(GATE_FILE);
    registry.save_gate(&gate_path, &moe.gating, &expert_refs, &Utc::now().to_rfc3339())?;
    write_run_json(&args.common.out_dir, "train-gate", args)?;
    write_report(&args.common.out_dir, &report)?;
    println!(
        "gate over [{}] stored at {}, final loss {:.4}",
        expert_refs.join(", "),
        gate_path.display(),
        report.final_loss().unwrap_or(f64::NAN)
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput {
    accuracy: f64,
    macro_f1: f64,
    per_domain: Vec<crate::train::DomainMetrics>,
    experts: Vec<String>,
    utilization: Vec<f64>,
    routing_entropy: Vec<f64>,
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let corpus = Corpus::load(&args.corpus)?;
    let selectors = parse_selectors(&args.experts)?;
    let registry = Registry::open(&args.registry.registry_dir)?;
    let (_, tok, _) = registry.load_encoder()?;
    let gate = gate_source(&args.registry.registry_dir, &args.gate);
    let moe = assemble_moe(&registry, &selectors, &gate)?;
    let summary = evaluate_moe(&corpus, &tok, &moe)?;
    let routing = summary
        .routing
        .as_ref()
        .expect("moe evaluation always tallies routing")
        .summary()?;
    let out = EvalOutput {
        accuracy: summary.accuracy,
        macro_f1: summary.macro_f1,
        per_domain: summary.per_domain.clone(),
        experts: moe.experts.iter().map(|e| e.id.clone()).collect(),
        utilization: routing.utilization,
        routing_entropy: routing.routing_entropy,
    };
    write_run_json(&args.common.out_dir, "eval", args)?;
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

#[derive(Serialize)]
struct RouteOutput {
    text: String,
    gate_weights: Vec<f64>,
    top_expert: String,
    per_expert_logits: Vec<RouteExpert>,
}

#[derive(Serialize)]
struct RouteExpert {
    id: String,
    domain_tag: String,
    weight: f64,
    logits: Vec<f64>,
}

fn cmd_route(args: &RouteArgs) -> Result<()> {
    let selectors = parse_selectors(&args.experts)?;
    let registry = Registry::open(&args.registry.registry_dir)?;
    let (_, tok, _) = registry.load_encoder()?;
    let gate = gate_source(&args.registry.registry_dir, &args.gate);
    let moe = assemble_moe(&registry, &selectors, &gate)?;
    let batch = TokenBatch::from_texts([args.text.as_str()], &tok)?;
    let combined = moe_forward(&batch, &moe)?;
    let weights = combined.gate_weights.row(0).to_vec();
    let top = weights
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("gate weights are finite"))
        .map(|(i, _)| i)
        .expect("at least one expert");
    let out = RouteOutput {
        text: args.text.clone(),
        gate_weights: weights.clone(),
        top_expert: moe.experts[top].id.clone(),
        per_expert_logits: moe
            .experts
            .iter()
            .enumerate()
            .map(|(i, e)| RouteExpert {
                id: e.id.clone(),
                domain_tag: e.domain_tag.clone(),
                weight: weights[i],
                logits: combined.per_expert_logits[i].row(0).to_vec(),
            })
            .collect(),
    };
    write_run_json(&args.common.out_dir, "route", args)?;
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn cmd_stats(args: &StatsArgs) -> Result<()> {
    if !args.report.exists() {
        return Err(Error::Validation(format!(
            "report {} does not exist",
            args.report.display()
        )));
    }
    let report: TrainReport = serde_json::from_slice(&fs::read(&args.report)?)?;
    let mut csv = String::from("epoch,expert,utilization,routing_entropy\n");
    for epoch in &report.epochs {
        let stats = epoch.routing.as_ref().ok_or_else(|| {
            Error::Validation(format!(
                "epoch {} carries no routing stats; stats needs a gate training report",
                epoch.epoch
            ))
        })?;
        let summary = stats.summary()?;
        for e in 0..summary.utilization.len() {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                epoch.epoch, e, summary.utilization[e], summary.routing_entropy[e]
            ));
        }
    }
    write_run_json(&args.common.out_dir, "stats", args)?;
    match &args.out {
        Some(path) => fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}
