//! The `idsplit` command line: extract, train, split and evaluate.

use std::ffi::OsString;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use regex::Regex;

use crate::corpus::{extract_from_file, read_dataset, write_dataset, CorpusBuilder, Dataset, RawIdentifier};
use crate::dp::{self, DpConfig, DpSplitter, Mode};
use crate::error::{Error, Result};
use crate::eval::{compare, evaluate_model, EvalReport};
use crate::io::write_atomic;
use crate::lm::{Combine, LmSplitter, DEFAULT_DEPTH};
use crate::nn::{AdamConfig, CellKind};
use crate::rnn::{self, ModelManifest, RnnModel, TrainConfig};
use crate::splitter::{split_identifier, Splitter};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "idsplit", version, about = "Split source code identifiers into subtokens")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a dataset from source files or directories.
    Extract {
        /// Files or directories to scan.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
        /// Only read files with these extensions (repeatable).
        #[arg(long = "ext")]
        extensions: Vec<String>,
        /// Identifier regex replacing the default.
        #[arg(long)]
        pattern: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model on a dataset's train split.
    Train {
        dataset: PathBuf,
        #[arg(long, value_enum)]
        model: ModelKind,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, default_value_t = rnn::DEFAULT_HIDDEN)]
        hidden: usize,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 512)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Trie depth of the character language model.
        #[arg(long, default_value_t = DEFAULT_DEPTH)]
        depth: usize,
        /// Overrides the combination (`and`, `or`) or frequency (`posterior`,
        /// `zipf`) mode implied by `--model`.
        #[arg(long)]
        mode: Option<String>,
        /// Per-character cost of unknown words in the DP segmenter.
        #[arg(long, default_value_t = DpConfig::default().oov_penalty)]
        oov_penalty: f64,
        /// Longest word the DP segmenter considers.
        #[arg(long, default_value_t = DpConfig::default().max_word_len)]
        max_word_len: usize,
        /// `word<TAB>count` file to use instead of the dataset's subtoken counts.
        #[arg(long)]
        frequencies: Option<PathBuf>,
        #[arg(long, default_value_t = rnn::DEFAULT_THRESHOLD)]
        threshold: f64,
    },
    /// Split identifiers given as arguments, or one per line on standard input.
    Split {
        #[arg(long, required_unless_present = "heuristic_only")]
        model: Option<PathBuf>,
        /// Use only the naming-convention heuristics.
        #[arg(long)]
        heuristic_only: bool,
        #[arg(long)]
        threshold: Option<f64>,
        identifiers: Vec<String>,
    },
    /// Score models on a dataset's validation split.
    Evaluate {
        /// Model files; `heuristic` names the convention-only splitter.
        #[arg(required = true)]
        models: Vec<String>,
        #[arg(long)]
        dataset: PathBuf,
        /// Write precision/recall points and F1 isocurves here.
        #[arg(long)]
        emit_plot: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
        /// Print tab-separated values instead of the aligned table.
        #[arg(long)]
        tsv: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Heuristic,
    LmAnd,
    LmOr,
    DpZipf,
    DpPosterior,
    Bilstm,
    Bigru,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = self.to_possible_value().expect("no skipped variants");
        f.write_str(name.get_name())
    }
}

/// Maps an error to the process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::NonFinite(_) => EXIT_INTERNAL,
        _ => EXIT_DATA,
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I, stdin: &mut dyn BufRead, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                stderr.write_all(text.as_bytes())
            } else {
                stdout.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match execute(cli.command, stdin, stdout, stderr) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

fn execute(command: Command, stdin: &mut dyn BufRead, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match command {
        Command::Extract {
            inputs,
            out: path,
            extensions,
            pattern,
            seed,
        } => cmd_extract(&inputs, &path, &extensions, pattern.as_deref(), seed, out),
        Command::Train {
            dataset,
            model,
            out: path,
            hidden,
            epochs,
            batch_size,
            lr,
            seed,
            depth,
            mode,
            oov_penalty,
            max_word_len,
            frequencies,
            threshold,
        } => {
            let options = TrainOptions {
                hidden,
                epochs,
                batch_size,
                lr,
                seed,
                depth,
                mode,
                oov_penalty,
                max_word_len,
                frequencies,
                threshold,
            };
            cmd_train(&dataset, model, &path, &options, out, err)
        }
        Command::Split {
            model,
            heuristic_only,
            threshold,
            identifiers,
        } => cmd_split(model.as_deref(), heuristic_only, threshold, &identifiers, stdin, out),
        Command::Evaluate {
            models,
            dataset,
            emit_plot,
            threshold,
            tsv,
        } => cmd_evaluate(&models, &dataset, emit_plot.as_deref(), threshold, tsv, out, err),
    }
}

fn output(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

fn worker_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var("IDSPLIT_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("IDSPLIT_THREADS must be a positive integer, got {v:?}")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Files under `inputs` in a stable order, filtered by extension.
pub fn collect_files(inputs: &[PathBuf], extensions: &[String]) -> Result<Vec<PathBuf>> {
    let wanted = |p: &Path| {
        extensions.is_empty()
            || p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| extensions.iter().any(|x| x.trim_start_matches('.') == e))
    };
    let mut files = Vec::new();
    for input in inputs {
        let meta = std::fs::metadata(input).map_err(|e| Error::io(input, e))?;
        if meta.is_file() {
            files.push(input.clone());
            continue;
        }
        for entry in walkdir::WalkDir::new(input).sort_by_file_name() {
            let entry = entry.map_err(|e| {
                let path = e.path().map(Path::to_path_buf).unwrap_or_else(|| input.clone());
                Error::io(path, e.into())
            })?;
            if entry.file_type().is_file() && wanted(entry.path()) {
                files.push(entry.into_path());
            }
        }
    }
    Ok(files)
}

/// Files read concurrently before their identifiers are folded into the builder.
const FILE_CHUNK: usize = 256;

/// Extracts a dataset from files, reading each chunk of them in parallel.
pub fn extract_dataset(
    files: &[PathBuf],
    pattern: Option<&Regex>,
    seed: u64,
) -> Result<(Dataset, crate::corpus::Funnel)> {
    let pool = worker_pool()?;
    let mut builder = CorpusBuilder::new();
    for chunk in files.chunks(FILE_CHUNK) {
        let per_file: Vec<Option<Vec<RawIdentifier>>> = pool.install(|| {
            chunk
                .par_iter()
                .map(|f| match extract_from_file(f, pattern) {
                    Ok(ids) => Some(ids),
                    Err(e) => {
                        log::warn!("skipping {}: {e}", f.display());
                        None
                    }
                })
                .collect()
        });
        for ids in per_file {
            builder.note_file(ids.is_some());
            for id in ids.iter().flatten() {
                builder.push(id);
            }
        }
    }
    Ok(builder.finish(seed))
}

fn cmd_extract(
    inputs: &[PathBuf],
    path: &Path,
    extensions: &[String],
    pattern: Option<&str>,
    seed: u64,
    out: &mut dyn Write,
) -> Result<()> {
    let pattern = pattern
        .map(|p| Regex::new(p).map_err(|e| Error::Config(format!("bad pattern: {e}"))))
        .transpose()?;
    let files = collect_files(inputs, extensions)?;
    let (dataset, funnel) = extract_dataset(&files, pattern.as_ref(), seed)?;
    if dataset.is_empty() {
        return Err(Error::Empty("no identifiers extracted".into()));
    }
    write_dataset(&dataset, path)?;
    let text = format!(
        "files\t{}\nunreadable_files\t{}\nidentifiers\t{}\ndistinct_identifiers\t{}\nnon_ascii\t{}\n\
         single_part\t{}\ndropped_by_length\t{}\nrecords\t{}\nunique_records\t{}\ntrain\t{}\nvalidation\t{}\n",
        funnel.files,
        funnel.unreadable_files,
        funnel.identifiers,
        funnel.distinct_identifiers,
        funnel.non_ascii,
        funnel.single_part,
        funnel.too_long,
        funnel.records,
        funnel.unique_records,
        dataset.train().count(),
        dataset.validation().count(),
    );
    output(out, &text)
}

#[derive(Debug, Clone)]
struct TrainOptions {
    hidden: usize,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
    depth: usize,
    mode: Option<String>,
    oov_penalty: f64,
    max_word_len: usize,
    frequencies: Option<PathBuf>,
    threshold: f64,
}

fn cmd_train(
    dataset_path: &Path,
    kind: ModelKind,
    path: &Path,
    o: &TrainOptions,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<()> {
    let dataset = read_dataset(dataset_path)?;
    let bytes = match kind {
        ModelKind::Heuristic => {
            return Err(Error::Config("the heuristic model needs no training".into()));
        }
        ModelKind::LmAnd | ModelKind::LmOr => {
            let mut mode = if kind == ModelKind::LmAnd {
                Combine::And
            } else {
                Combine::Or
            };
            if let Some(m) = &o.mode {
                mode = m.parse()?;
            }
            LmSplitter::train(&dataset, o.depth, mode)?.to_bytes()
        }
        ModelKind::DpZipf | ModelKind::DpPosterior => {
            let mut mode = if kind == ModelKind::DpZipf {
                Mode::Zipf
            } else {
                Mode::Posterior
            };
            if let Some(m) = &o.mode {
                mode = m.parse()?;
            }
            let table = match &o.frequencies {
                Some(f) => {
                    let (table, skipped) = dp::load_frequency_file(f, mode)?;
                    if skipped > 0 {
                        let _ = writeln!(err, "warning: skipped {skipped} malformed frequency lines");
                    }
                    table
                }
                None => {
                    let table = dp::table_from_dataset(&dataset)?;
                    match mode {
                        Mode::Posterior => table,
                        Mode::Zipf => table.to_zipf(),
                    }
                }
            };
            let config = DpConfig {
                oov_penalty: o.oov_penalty,
                max_word_len: o.max_word_len,
                ..DpConfig::default()
            };
            DpSplitter::new(table, config).to_bytes()
        }
        ModelKind::Bilstm | ModelKind::Bigru => {
            if o.mode.is_some() {
                return Err(Error::Config("--mode does not apply to recurrent models".into()));
            }
            let cell = if kind == ModelKind::Bilstm {
                CellKind::Lstm
            } else {
                CellKind::Gru
            };
            let mut manifest = ModelManifest::new(cell, o.hidden);
            manifest.threshold = o.threshold;
            let config = TrainConfig {
                epochs: o.epochs,
                batch_size: o.batch_size,
                seed: o.seed,
                adam: AdamConfig {
                    lr: o.lr,
                    ..AdamConfig::default()
                },
            };
            if o.epochs == 0 {
                let _ = writeln!(err, "warning: --epochs 0 writes the untrained initialization");
            }
            let mut write_error = None;
            let model = rnn::train_with(&dataset, &manifest, &config, |e, _| {
                let f1 = e.f1.map_or_else(|| "-".to_string(), |f| format!("{f:.6}"));
                match writeln!(out, "{}\t{:.6}\t{f1}", e.epoch, e.train_loss).and_then(|_| out.flush()) {
                    Ok(()) => true,
                    Err(x) => {
                        write_error = Some(x);
                        false
                    }
                }
            })?;
            if let Some(e) = write_error {
                return Err(Error::io("<stdout>", e));
            }
            model.to_bytes()
        }
    };
    write_atomic(path, &bytes)
}

/// Any trained model, detected from its file header.
pub enum LoadedModel {
    Heuristic,
    Lm(LmSplitter),
    Dp(DpSplitter),
    Rnn(RnnModel),
}

impl Splitter for LoadedModel {
    fn split(&self, merged: &str) -> crate::corpus::Boundaries {
        match self {
            // merged strings carry no convention left to split on
            LoadedModel::Heuristic => crate::corpus::Boundaries::new(),
            LoadedModel::Lm(m) => m.split(merged),
            LoadedModel::Dp(m) => m.split(merged),
            LoadedModel::Rnn(m) => m.split(merged),
        }
    }

    fn split_batch(&self, merged: &[&str]) -> Vec<crate::corpus::Boundaries> {
        match self {
            LoadedModel::Rnn(m) => m.split_batch(merged),
            _ => merged.iter().map(|m| self.split(m)).collect(),
        }
    }
}

pub fn load_any(path: &Path, threshold: Option<f64>) -> Result<LoadedModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if RnnModel::is_container(&bytes) {
        let mut model = RnnModel::from_bytes(&bytes)?;
        if let Some(t) = threshold {
            model = model.with_threshold(t)?;
        }
        Ok(LoadedModel::Rnn(model))
    } else if LmSplitter::is_container(&bytes) {
        Ok(LoadedModel::Lm(LmSplitter::from_bytes(&bytes)?))
    } else if DpSplitter::is_container(&bytes) {
        Ok(LoadedModel::Dp(DpSplitter::from_bytes(&bytes)?))
    } else {
        Err(Error::Format(format!("{} is not a model file", path.display())))
    }
}

fn cmd_split(
    model: Option<&Path>,
    heuristic_only: bool,
    threshold: Option<f64>,
    identifiers: &[String],
    stdin: &mut dyn BufRead,
    out: &mut dyn Write,
) -> Result<()> {
    let model = match (heuristic_only, model) {
        (true, _) => LoadedModel::Heuristic,
        (false, Some(path)) => load_any(path, threshold)?,
        (false, None) => return Err(Error::Config("--model is required".into())),
    };
    let mut emit = |line: &str| -> Result<()> {
        let parts = split_identifier(&model, line.trim_end_matches('\r'));
        writeln!(out, "{}", parts.join(" ")).map_err(|e| Error::io("<stdout>", e))
    };
    if identifiers.is_empty() {
        for line in stdin.lines() {
            let line = line.map_err(|e| Error::io("<stdin>", e))?;
            emit(&line)?;
        }
    } else {
        for id in identifiers {
            emit(id)?;
        }
    }
    Ok(())
}

/// Heuristic-only evaluation: each record's subtokens joined by `_` and
/// re-split by the conventions.
fn heuristic_report(dataset: &Dataset) -> Result<EvalReport> {
    let records: Vec<_> = dataset.validation().collect();
    if records.is_empty() {
        return Err(Error::Empty("validation split".into()));
    }
    let start = std::time::Instant::now();
    let mut counts = crate::eval::Counts::default();
    let mut exact = 0;
    for r in &records {
        let joined = r.subtokens().join("_");
        let predicted = crate::corpus::boundaries_of(&crate::corpus::heuristic_split(&joined));
        counts.add(crate::eval::score(&predicted, r.boundaries()));
        exact += usize::from(&predicted == r.boundaries());
    }
    let mut report = EvalReport::from_counts("heuristic", counts, records.len(), exact);
    report.runtime = start.elapsed();
    Ok(report)
}

fn cmd_evaluate(
    models: &[String],
    dataset_path: &Path,
    plot: Option<&Path>,
    threshold: Option<f64>,
    tsv: bool,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<()> {
    let dataset = read_dataset(dataset_path)?;
    let mut reports = Vec::new();
    for name in models {
        let report = if name == "heuristic" {
            heuristic_report(&dataset)?
        } else {
            let path = Path::new(name);
            let model = load_any(path, threshold)?;
            let label = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| name.clone());
            evaluate_model(&label, &model, &dataset)?
        };
        let _ = writeln!(
            err,
            "{}: {} records in {:.2}s",
            report.label,
            report.records,
            report.runtime.as_secs_f64()
        );
        reports.push(report);
    }
    let comparison = compare(&reports)?;
    if let Some(p) = plot {
        write_atomic(p, comparison.plot.as_bytes())?;
    }
    output(out, if tsv { &comparison.tsv } else { &comparison.table })
}
