//! Split-point precision, recall and F1, model comparison tables and the
//! vocabulary and error-horizon summaries derived from them.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use crate::corpus::{split_at_boundaries, Boundaries, Dataset, SubtokenRecord};
use crate::error::{Error, Result};
use crate::splitter::Splitter;

/// Batch size used when feeding validation strings to a splitter.
const EVAL_CHUNK: usize = 512;

pub const ISO_F1: [f64; 4] = [0.7, 0.8, 0.9, 0.95];

/// Micro-averaged split-point counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Counts {
    pub fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// 0 when nothing was predicted.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        f1(self.precision(), self.recall())
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean, 0 when both inputs are 0.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn score(predicted: &Boundaries, truth: &Boundaries) -> Counts {
    let tp = predicted.intersection(truth).count() as u64;
    Counts {
        tp,
        fp: predicted.len() as u64 - tp,
        fn_: truth.len() as u64 - tp,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub label: String,
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub records: usize,
    /// Records whose predicted boundary set equals the truth.
    pub exact: usize,
    pub runtime: Duration,
}

impl EvalReport {
    pub fn from_counts(label: impl Into<String>, counts: Counts, records: usize, exact: usize) -> Self {
        EvalReport {
            label: label.into(),
            counts,
            precision: counts.precision(),
            recall: counts.recall(),
            f1: counts.f1(),
            records,
            exact,
            runtime: Duration::ZERO,
        }
    }

    /// A report known only by its headline numbers.
    pub fn from_metrics(label: impl Into<String>, precision: f64, recall: f64, f1: f64) -> Self {
        EvalReport {
            label: label.into(),
            counts: Counts::default(),
            precision,
            recall,
            f1,
            records: 0,
            exact: 0,
            runtime: Duration::ZERO,
        }
    }

    /// Fraction of records split exactly right.
    pub fn identifier_accuracy(&self) -> f64 {
        ratio(self.exact as u64, self.records as u64)
    }
}

/// Scores `splitter` on `records`, feeding it batches of merged strings.
pub fn evaluate_records<'a, S, I>(label: &str, splitter: &S, records: I) -> EvalReport
where
    S: Splitter + ?Sized,
    I: IntoIterator<Item = &'a SubtokenRecord>,
{
    let start = Instant::now();
    let records: Vec<&SubtokenRecord> = records.into_iter().collect();
    let mut counts = Counts::default();
    let mut exact = 0;
    for chunk in records.chunks(EVAL_CHUNK) {
        let merged: Vec<&str> = chunk.iter().map(|r| r.merged()).collect();
        for (record, predicted) in chunk.iter().zip(splitter.split_batch(&merged)) {
            counts.add(score(&predicted, record.boundaries()));
            if &predicted == record.boundaries() {
                exact += 1;
            }
        }
    }
    let mut report = EvalReport::from_counts(label, counts, records.len(), exact);
    report.runtime = start.elapsed();
    report
}

/// Scores `splitter` on the validation split of `dataset`.
pub fn evaluate_model<S: Splitter + ?Sized>(label: &str, splitter: &S, dataset: &Dataset) -> Result<EvalReport> {
    let validation: Vec<&SubtokenRecord> = dataset.validation().collect();
    if validation.is_empty() {
        return Err(Error::Empty("validation split".into()));
    }
    Ok(evaluate_records(label, splitter, validation))
}

/// Reports ordered by F1 (descending), ties by label.
pub fn rank(reports: &[EvalReport]) -> Vec<&EvalReport> {
    let mut ordered: Vec<&EvalReport> = reports.iter().collect();
    ordered.sort_by(|a, b| b.f1.total_cmp(&a.f1).then_with(|| a.label.cmp(&b.label)));
    ordered
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    /// Aligned text table.
    pub table: String,
    /// Tab-separated values with a header line.
    pub tsv: String,
    /// Precision/recall points and F1 isocurves, tab-separated.
    pub plot: String,
}

pub fn compare(reports: &[EvalReport]) -> Result<Comparison> {
    if reports.is_empty() {
        return Err(Error::Empty("no reports to compare".into()));
    }
    let ordered = rank(reports);
    let width = ordered
        .iter()
        .map(|r| r.label.chars().count())
        .max()
        .unwrap_or(0)
        .max("Model".len());
    let mut table = format!(
        "{:<width$}  {:>9}  {:>9}  {:>9}\n",
        "Model", "Precision", "Recall", "F1"
    );
    let mut tsv = String::from("model\tprecision\trecall\tf1\ttp\tfp\tfn\trecords\n");
    for r in &ordered {
        let _ = writeln!(
            table,
            "{:<width$}  {:>9.3}  {:>9.3}  {:>9.3}",
            r.label, r.precision, r.recall, r.f1
        );
        let _ = writeln!(
            tsv,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.label, r.precision, r.recall, r.f1, r.counts.tp, r.counts.fp, r.counts.fn_, r.records
        );
    }
    Ok(Comparison {
        table,
        tsv,
        plot: plot_data(&ordered),
    })
}

/// Points of the `F1 = f` curve, precision running from `f / (2 - f)` to 1.
pub fn isocurve(f: f64, points: usize) -> Vec<(f64, f64)> {
    let lo = f / (2.0 - f);
    let points = points.max(2);
    (0..points)
        .map(|i| {
            let p = lo + (1.0 - lo) * i as f64 / (points - 1) as f64;
            (p, f * p / (2.0 * p - f))
        })
        .collect()
}

fn plot_data(reports: &[&EvalReport]) -> String {
    let mut out = String::from("kind\tlabel\tprecision\trecall\n");
    for r in reports {
        let _ = writeln!(out, "point\t{}\t{}\t{}", r.label, r.precision, r.recall);
    }
    for f in ISO_F1 {
        for (p, r) in isocurve(f, 50) {
            let _ = writeln!(out, "iso\tf1={f}\t{p}\t{r}");
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VocabReduction {
    pub before: usize,
    pub after: usize,
    pub ratio: f64,
}

/// Unique subtokens under the ground truth versus after re-splitting each of
/// them with `splitter`.
pub fn vocab_reduction<S: Splitter + ?Sized>(dataset: &Dataset, splitter: &S) -> Result<VocabReduction> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset".into()));
    }
    let vocab: BTreeSet<&str> = dataset.records().iter().flat_map(|r| r.subtokens()).collect();
    let words: Vec<&str> = vocab.iter().copied().collect();
    let mut after = BTreeSet::new();
    for chunk in words.chunks(EVAL_CHUNK) {
        for (word, boundaries) in chunk.iter().zip(splitter.split_batch(chunk)) {
            after.extend(split_at_boundaries(word, &boundaries));
        }
    }
    let before = vocab.len();
    Ok(VocabReduction {
        before,
        after: after.len(),
        ratio: 1.0 - after.len() as f64 / before as f64,
    })
}

/// Number of identifiers after which at least one error has 50% probability.
pub fn half_error_horizon(per_identifier_accuracy: f64) -> Result<f64> {
    let a = per_identifier_accuracy;
    if !(a > 0.0 && a < 1.0) {
        return Err(Error::Config(format!("accuracy {a} outside (0, 1)")));
    }
    Ok(0.5f64.ln() / a.ln())
}
