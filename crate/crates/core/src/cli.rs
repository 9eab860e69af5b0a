//! Command-line front end: `generate`, `protocol`, `eval` and `audit`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::checkpoint;
use crate::config::{run_protocol, GenerateConfig, ProtocolConfig};
use crate::data::{dataset_from_manifest, load_manifest, Dataset};
use crate::error::{DilError, Result};
use crate::inference::AgnosticOptions;
use crate::metrics::{AgnosticStep, MetricsReport};
use crate::model::{ArchConfig, DilModel, ParamAudit};
use crate::tensor::Real;
use crate::trainer::{evaluate_agnostic_model, evaluate_domain, EvalGroup, TrainLog};

#[derive(Debug, Parser)]
#[command(
    name = "dil",
    version,
    about = "Domain-incremental learning with per-domain batch-norm banks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic domains, their manifests and a protocol file.
    Generate(GenerateArgs),
    /// Train and evaluate an incremental sequence of domains.
    Protocol(ProtocolArgs),
    /// Score a checkpoint on the records of a manifest.
    Eval(EvalArgs),
    /// Print shared and per-domain parameter counts.
    Audit(AuditArgs),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Generator config (TOML); built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ProtocolArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Directory holding `<domain>/train.csv` and `<domain>/test.csv`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("mode").required(true).args(["domain_id", "agnostic"])))]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    /// Manifest of the records to score.
    #[arg(long)]
    pub data: PathBuf,
    /// Score every record through this bank.
    #[arg(long)]
    pub domain_id: Option<usize>,
    /// Pick a bank per sample by lowest predictive entropy.
    #[arg(long)]
    pub agnostic: bool,
    /// Compare entropies relative to their maxima.
    #[arg(long, requires = "agnostic")]
    pub normalize_entropy: bool,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
    /// Also write the scores document here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("target").required(true).args(["checkpoint", "cnn14"])))]
pub struct AuditArgs {
    pub checkpoint: Option<PathBuf>,
    /// Audit the full-size six-block architecture instead of a checkpoint.
    #[arg(long)]
    pub cnn14: bool,
    /// Class count of the base and new domain for `--cnn14`.
    #[arg(long, default_value_t = 10, requires = "cnn14")]
    pub classes: usize,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Protocol(a) => match a.precision {
            Precision::F32 => cmd_protocol::<f32>(&a).map(drop),
            Precision::F64 => cmd_protocol::<f64>(&a).map(drop),
        },
        Command::Eval(a) => {
            let doc = match a.precision {
                Precision::F32 => cmd_eval::<f32>(&a)?,
                Precision::F64 => cmd_eval::<f64>(&a)?,
            };
            let text = json(&doc)?;
            println!("{text}");
            if let Some(out) = &a.out {
                write(out, text.as_bytes())?;
            }
            Ok(())
        }
        Command::Audit(a) => {
            println!("{}", json(&cmd_audit(&a)?)?);
            Ok(())
        }
    }
}

/// The single line printed on failure.
pub fn error_line(err: &DilError) -> String {
    format!(
        "error[{}]: {}",
        err.kind(),
        err.to_string().replace('\n', " ")
    )
}

fn json<S: Serialize>(value: &S) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| DilError::InvalidArgument(e.to_string()))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| DilError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| DilError::io(path, e))
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => GenerateConfig::from_path(p)?,
        None => GenerateConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.write(&args.out)?;
    println!(
        "wrote {} domains and protocol.toml to {}",
        cfg.domains.len(),
        args.out.display()
    );
    Ok(())
}

pub fn checkpoint_path(out: &Path, step: usize) -> PathBuf {
    out.join("checkpoints").join(format!("step_{step:02}.dilc"))
}

/// Runs a protocol and writes per-step checkpoints, `report.json`,
/// `plot.csv` and `train_log.json` under `--out`.
pub fn cmd_protocol<T: Real>(args: &ProtocolArgs) -> Result<MetricsReport> {
    let mut cfg = ProtocolConfig::from_path(&args.config)?;
    if let Some(s) = &args.strategy {
        cfg.strategy = s.clone();
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        cfg.train.epochs = epochs;
    }
    cfg.plan()?;
    let out = &args.out;
    let outcome = run_protocol::<T>(&cfg, &args.data, |step, model| {
        checkpoint::save(model, &checkpoint_path(out, step))
    })?;
    let report = outcome.report;
    write(&out.join("report.json"), report.to_json().as_bytes())?;
    write(&out.join("plot.csv"), report.to_csv().as_bytes())?;
    write(
        &out.join("train_log.json"),
        json::<Vec<TrainLog>>(&outcome.logs)?.as_bytes(),
    )?;
    write(&out.join("protocol.toml"), cfg.to_toml()?.as_bytes())?;
    println!("{}", report.to_table());
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DomainScore {
    pub domain: String,
    pub samples: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalDocument {
    pub mode: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bank: Option<usize>,
    pub domains: Vec<DomainScore>,
    pub average: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selection_accuracy: Option<f64>,
    /// Bank names, the columns of `confusion`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub banks: Option<Vec<String>>,
    /// `confusion[i][b]`: records of domain `i` routed to bank `b`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confusion: Option<Vec<Vec<usize>>>,
}

/// Domains of a manifest in order of first appearance.
fn manifest_domains(domains: impl Iterator<Item = String>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for d in domains {
        if !out.contains(&d) {
            out.push(d);
        }
    }
    out
}

pub fn cmd_eval<T: Real>(args: &EvalArgs) -> Result<EvalDocument> {
    if args.batch_size == 0 {
        return Err(DilError::Config("batch size must be >= 1".into()));
    }
    let model: DilModel<T> = checkpoint::load(&args.checkpoint)?;
    let manifest = load_manifest(&args.data, &model.vocabulary)?;
    let names = manifest_domains(manifest.records.iter().map(|r| r.domain.clone()));
    let (f, t) = (model.arch.mel_bins, model.arch.frames);
    if let Some(bank) = args.domain_id {
        let spec = &model.bank(bank)?.spec;
        let mut domains = Vec::new();
        for name in &names {
            let ds = dataset_from_manifest(
                &manifest,
                name,
                &spec.class_list,
                &model.vocabulary,
                spec.task_kind,
                f,
                t,
            )?;
            domains.push(DomainScore {
                domain: name.clone(),
                samples: ds.len(),
                score: evaluate_domain(&model, bank, &ds, args.batch_size)?,
            });
        }
        let average = domains.iter().map(|d| d.score).sum::<f64>() / domains.len() as f64;
        return Ok(EvalDocument {
            mode: "aware".into(),
            bank: Some(bank),
            domains,
            average,
            selection_accuracy: None,
            banks: None,
            confusion: None,
        });
    }
    let mut sets: Vec<(usize, Dataset)> = Vec::new();
    for name in &names {
        let bank = model
            .banks
            .iter()
            .position(|b| &b.spec.name == name)
            .ok_or_else(|| {
                DilError::Data(format!(
                    "manifest domain '{name}' has no bank in the checkpoint"
                ))
            })?;
        let spec = &model.banks[bank].spec;
        let ds = dataset_from_manifest(
            &manifest,
            name,
            &spec.class_list,
            &model.vocabulary,
            spec.task_kind,
            f,
            t,
        )?;
        sets.push((bank, ds));
    }
    let groups: Vec<EvalGroup> = sets
        .iter()
        .map(|(bank, ds)| EvalGroup {
            true_bank: *bank,
            data: ds,
            classes: &model.banks[*bank].spec.class_list,
        })
        .collect();
    let options = AgnosticOptions {
        normalize_by_classes: args.normalize_entropy,
    };
    let AgnosticStep {
        scores,
        average,
        selection_accuracy,
        confusion,
    } = evaluate_agnostic_model(&model, &groups, options, args.batch_size)?;
    Ok(EvalDocument {
        mode: "agnostic".into(),
        bank: None,
        domains: names
            .iter()
            .zip(&sets)
            .zip(scores)
            .map(|((n, (_, ds)), score)| DomainScore {
                domain: n.clone(),
                samples: ds.len(),
                score,
            })
            .collect(),
        average,
        selection_accuracy: Some(selection_accuracy),
        banks: Some(model.banks.iter().map(|b| b.spec.name.clone()).collect()),
        confusion: Some(confusion),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditDocument {
    pub source: String,
    pub banks: usize,
    #[serde(flatten)]
    pub audit: ParamAudit,
}

pub fn cmd_audit(args: &AuditArgs) -> Result<AuditDocument> {
    if args.cnn14 {
        return Ok(AuditDocument {
            source: "cnn14".into(),
            banks: 2,
            audit: ArchConfig::cnn14().audit(args.classes, args.classes),
        });
    }
    let path = args.checkpoint.as_ref().expect("clap requires a target");
    let model: DilModel<f32> = checkpoint::load(path)?;
    Ok(AuditDocument {
        source: path.display().to_string(),
        banks: model.n_banks(),
        audit: model.param_audit(),
    })
}
