//! Command-line front end.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use tracing::info;

use crate::config::{self, Resolved};
use crate::corpus::pipeline::{build_type_library, TYPELIB_FILE};
use crate::corpus::{self, read_corpus, read_split, Split, Vocabularies};
use crate::error::{Error, Result};
use crate::evaluation::{
    baseline_decompiler_remap, baseline_frequency_by_size, decompiler_remap_predictions, frequency_by_size_predictions,
    partition_report, FunctionPredictions,
};
use crate::io;
use crate::model::{FunctionInput, Model};
use crate::predict::{FunctionOut, PredictOptions, Predictor, VariableConstraint};
use crate::service::{self, AppState};
use crate::training::{self, TrainOutputs, Variant};
use crate::typelib::TypeLibrary;

#[derive(Debug, Parser)]
#[command(name = "varlift", version, about = "Recover variable names and types in decompiled code")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// TOML file with [preprocess], [model] and [train] sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for splitting, initialization and shuffling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override a configuration key, e.g. `--set train.epochs=3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Collect every gold type of a corpus into a type library.
    BuildTypelib {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split, build vocabularies and encode a corpus.
    Preprocess {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Type library whose entries are registered before the corpus's own.
        #[arg(long)]
        types: Option<PathBuf>,
        #[arg(long)]
        max_seq_length: Option<usize>,
    },
    /// Train a model on a preprocessed dataset.
    Train {
        /// Dataset directory written by `preprocess`.
        #[arg(long = "in")]
        input: PathBuf,
        /// Run directory for checkpoints and the training log.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        max_seq_length: Option<usize>,
    },
    /// Predict types and names.
    Predict {
        /// A dataset directory (its test split is used) or a JSONL file of
        /// raw functions.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Dataset directory holding the vocabularies the model was trained on.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5)]
        beam: usize,
        #[arg(long, conflicts_with = "beam")]
        greedy: bool,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
        /// JSONL of `{binary_id, function_id, constraints}` records.
        #[arg(long)]
        constraints: Option<PathBuf>,
        #[arg(long)]
        max_seq_length: Option<usize>,
    },
    /// Score predictions against the test split.
    Evaluate {
        /// Dataset directory.
        #[arg(long = "in")]
        input: PathBuf,
        /// Defaults to `predictions.jsonl` in the dataset directory.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Score a baseline instead of a predictions file.
        #[arg(long)]
        baseline: Option<Baseline>,
        /// Where to write the JSON report; printed after the table otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    FrequencyBySize,
    DecompilerRemap,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConstraintRecord {
    binary_id: String,
    function_id: String,
    constraints: Vec<VariableConstraint>,
}

fn resolve(global: &Global) -> Result<Resolved> {
    let mut r = config::load(global.config.as_deref(), &global.overrides)?;
    if let Some(seed) = global.seed {
        r.set_seed(seed);
    }
    Ok(r)
}

fn log_config<T: serde::Serialize>(what: &str, value: &T) {
    let text = serde_json::to_string(value).unwrap_or_default();
    info!(config = %text, "resolved {what} configuration");
}

pub fn run(cli: Cli) -> Result<()> {
    let resolved = resolve(&cli.global)?;
    match cli.command {
        Command::BuildTypelib { input, out } => {
            let fns = read_corpus(&input)?;
            let lib = build_type_library(&fns, &[])?;
            lib.write(&out)?;
            info!(types = lib.len(), out = %out.display(), "type library written");
        }
        Command::Preprocess {
            input,
            out,
            types,
            max_seq_length,
        } => {
            let mut cfg = resolved.config.preprocess.clone();
            if let Some(n) = max_seq_length {
                cfg.max_seq_length = n;
            }
            log_config("preprocess", &cfg);
            let seed_types: Vec<String> = match types {
                Some(p) => TypeLibrary::read(&p)?.iter().skip(2).map(|(_, e)| e.canonical()).collect(),
                None => Vec::new(),
            };
            let manifest = corpus::preprocess(&input, &out, &cfg, &seed_types)?;
            info!(counts = ?manifest.counts, out = %out.display(), "dataset written");
        }
        Command::Train {
            input,
            out,
            variant,
            max_seq_length,
        } => {
            train_command(&resolved, &input, &out, variant, max_seq_length)?;
        }
        Command::Predict {
            input,
            out,
            model,
            data,
            beam,
            greedy,
            top_k,
            constraints,
            max_seq_length,
        } => {
            let options = PredictOptions {
                beam_width: if greedy { 1 } else { beam },
                top_k,
                max_seq_length,
            };
            log_config("predict", &options);
            let predictor = Predictor::open(&model, &data)?;
            let outs = predict_command(&predictor, &input, constraints.as_deref(), &options)?;
            io::write_jsonl(&out, &outs)?;
            info!(functions = outs.len(), out = %out.display(), "predictions written");
        }
        Command::Evaluate {
            input,
            predictions,
            baseline,
            out,
        } => {
            let text = evaluate_command(&input, predictions, baseline, out.as_deref())?;
            print!("{text}");
        }
        Command::Serve { model, data, addr } => {
            let state = match (model, data) {
                (Some(m), Some(d)) => AppState::new(Predictor::open(&m, &d)?),
                (None, None) => AppState::default(),
                _ => return Err(Error::Config("--model and --data go together".into())),
            };
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io("tokio runtime", e))?;
            rt.block_on(service::serve(addr, state))?;
        }
    }
    Ok(())
}

fn inputs(data: &[corpus::ProcessedFunction], vocab: &Vocabularies, model: &Model) -> Vec<FunctionInput> {
    data.iter()
        .map(|f| {
            let mut f = f.clone();
            f.truncate(model.config.max_seq_length);
            FunctionInput::from_processed(&f, &vocab.layouts, model.config.max_layout_len)
        })
        .collect()
}

pub fn train_command(
    resolved: &Resolved,
    input: &Path,
    out: &Path,
    variant: Option<Variant>,
    max_seq_length: Option<usize>,
) -> Result<training::TrainSummary> {
    let vocab = Vocabularies::load(input)?;
    let (mut model_cfg, train_cfg) = resolved.for_variant(variant);
    if let Some(n) = max_seq_length {
        model_cfg.max_seq_length = n;
    }
    let model_cfg = model_cfg.with_vocabularies(&vocab);
    log_config("model", &model_cfg);
    log_config("train", &train_cfg);
    let mut model = Model::new(model_cfg, train_cfg.seed)?;
    let train_set = inputs(&read_split(input, Split::Train)?, &vocab, &model);
    let valid_set = inputs(&read_split(input, Split::Valid)?, &vocab, &model);
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    io::write_json(
        &out.join("config.json"),
        &serde_json::json!({ "model": model.config, "train": train_cfg }),
    )?;
    let outputs = TrainOutputs {
        dir: out.to_path_buf(),
        data_hashes: Vocabularies::file_hashes(input)?,
    };
    let summary = training::train(&mut model, &train_set, &valid_set, &train_cfg, Some(&outputs))?;
    info!(best_epoch = ?summary.best_epoch, best_valid = ?summary.best_valid_accuracy, "training finished");
    Ok(summary)
}

pub fn predict_command(
    predictor: &Predictor,
    input: &Path,
    constraints: Option<&Path>,
    options: &PredictOptions,
) -> Result<Vec<FunctionOut>> {
    let mut fixed: HashMap<(String, String), Vec<VariableConstraint>> = HashMap::new();
    if let Some(p) = constraints {
        for r in io::read_jsonl::<ConstraintRecord>(p)? {
            fixed.entry((r.binary_id, r.function_id)).or_default().extend(r.constraints);
        }
    }
    let lookup = |b: &str, f: &str| fixed.get(&(b.to_string(), f.to_string())).map(Vec::as_slice).unwrap_or(&[]);
    if input.is_dir() {
        read_split(input, Split::Test)?
            .into_iter()
            .map(|f| {
                let c = lookup(&f.binary_id, &f.function_id).to_vec();
                predictor.refine_processed(f, &c, options)
            })
            .collect()
    } else {
        read_corpus(input)?
            .iter()
            .map(|f| predictor.refine(f, lookup(&f.binary_id, &f.function_id), options))
            .collect()
    }
}

/// Scores predictions (or a baseline) on the test split and returns the
/// rendered table.
pub fn evaluate_command(
    input: &Path,
    predictions: Option<PathBuf>,
    baseline: Option<Baseline>,
    out: Option<&Path>,
) -> Result<String> {
    let lib = TypeLibrary::read(&input.join(TYPELIB_FILE))?;
    let test = read_split(input, Split::Test)?;
    let preds: Vec<FunctionPredictions> = match baseline {
        Some(Baseline::FrequencyBySize) => {
            let b = baseline_frequency_by_size(&read_split(input, Split::Train)?, &lib);
            frequency_by_size_predictions(&test, &b)
        }
        Some(Baseline::DecompilerRemap) => {
            let b = baseline_decompiler_remap(&read_split(input, Split::Train)?, &lib)?;
            decompiler_remap_predictions(&test, &b)?
        }
        None => {
            let path = predictions.unwrap_or_else(|| input.join("predictions.jsonl"));
            if !path.exists() {
                return Err(Error::MissingArtifact(path));
            }
            io::read_jsonl(&path)?
        }
    };
    let report = partition_report(&preds, &test, &lib);
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Model(e.to_string()))?;
    let mut text = report.to_table();
    match out {
        Some(p) => io::write_atomic(p, json.as_bytes())?,
        None => {
            text.push_str(&json);
            text.push('\n');
        }
    }
    Ok(text)
}

/// Short, distinct label and exit code per error kind.
pub fn error_kind(e: &Error) -> (&'static str, u8) {
    match e {
        Error::Io { .. } => ("io error", 3),
        Error::MissingArtifact(_) => ("missing artifact", 4),
        Error::Schema { .. } => ("schema error", 5),
        Error::Type(_) => ("type error", 6),
        Error::Config(_) => ("configuration error", 7),
        Error::Vocab(_) => ("vocabulary error", 8),
        Error::InvalidFunction { .. } => ("invalid function", 9),
        Error::Model(_) => ("model error", 10),
        Error::Decode(_) => ("decoding error", 11),
        Error::Constraint(_) => ("constraint error", 12),
        Error::Divergence(_) => ("training diverged", 13),
        Error::Checkpoint { .. } => ("checkpoint error", 14),
        Error::MissingField { .. } => ("missing corpus field", 15),
    }
}

pub fn init_tracing() {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into());
    let _ = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).try_init();
}

pub fn main() -> ExitCode {
    init_tracing();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = error_kind(&e);
            eprintln!("{kind}: {e}");
            ExitCode::from(code)
        }
    }
}
