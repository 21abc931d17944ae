//! Identifier extraction, naming-convention splitting and labeled datasets.
//!
//! The pipeline is: source text → [`extract_identifiers`] → [`heuristic_split`]
//! → [`to_record`] → [`build_dataset`]. A [`SubtokenRecord`] stores the merged
//! lowercase identifier together with the positions where a new subtoken
//! begins; this pair is what every splitter is trained and scored on.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use regex::Regex;

use crate::error::{Error, Result};

/// Longest merged identifier kept in a dataset.
pub const MAX_MERGED_LEN: usize = 40;

/// Positions `p` (with `0 < p < len`) at which a new subtoken starts.
pub type Boundaries = BTreeSet<usize>;

/// An identifier as it appears in source code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawIdentifier {
    pub text: String,
    pub origin: Option<Origin>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Origin {
    pub path: Option<PathBuf>,
    /// 1-based line number.
    pub line: usize,
}

impl RawIdentifier {
    pub fn is_ascii(&self) -> bool {
        self.text.is_ascii()
    }
}

fn default_pattern() -> &'static Regex {
    static PATTERN: OnceLock<Regex> = OnceLock::new();
    PATTERN.get_or_init(|| Regex::new(r"[%$]?[\p{L}\p{N}_]+").expect("static regex"))
}

/// Extracts identifier candidates from source text.
///
/// The default pattern accepts an optional `%`/`$` sigil followed by a maximal
/// word run; runs starting with a digit (numeric literals) are skipped. On ASCII
/// input this is `[A-Za-z_%$][A-Za-z0-9_]*` restricted to word boundaries.
/// Non-ASCII identifiers are returned as well so callers can count and drop
/// them. Every returned identifier contains at least one ASCII letter.
pub fn extract_identifiers(source: &str, pattern: Option<&Regex>) -> Vec<RawIdentifier> {
    let custom = pattern.is_some();
    let re = pattern.unwrap_or_else(|| default_pattern());
    let mut out = Vec::new();
    let mut line = 1;
    let mut scanned = 0;
    for m in re.find_iter(source) {
        line += source.as_bytes()[scanned..m.start()]
            .iter()
            .filter(|&&b| b == b'\n')
            .count();
        scanned = m.start();
        let text = m.as_str();
        if !custom {
            let body = text.trim_start_matches(['%', '$']);
            if body.chars().next().is_some_and(|c| c.is_numeric()) {
                continue;
            }
        }
        if !text.bytes().any(|b| b.is_ascii_alphabetic()) {
            continue;
        }
        out.push(RawIdentifier {
            text: text.to_string(),
            origin: Some(Origin { path: None, line }),
        });
    }
    out
}

/// Like [`extract_identifiers`] but validates UTF-8 first.
pub fn extract_identifiers_bytes(source: &[u8], pattern: Option<&Regex>) -> Result<Vec<RawIdentifier>> {
    let text = std::str::from_utf8(source).map_err(|e| Error::Utf8 {
        offset: e.valid_up_to(),
    })?;
    Ok(extract_identifiers(text, pattern))
}

/// Reads a file and extracts its identifiers, recording the path as origin.
pub fn extract_from_file(path: &Path, pattern: Option<&Regex>) -> Result<Vec<RawIdentifier>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut ids = extract_identifiers_bytes(&bytes, pattern)?;
    for id in &mut ids {
        if let Some(origin) = id.origin.as_mut() {
            origin.path = Some(path.to_path_buf());
        }
    }
    Ok(ids)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Case {
    Lower,
    Upper,
}

/// Splits an identifier by naming conventions and lowercases the parts.
///
/// Rules, in order: non-alphanumeric runs are delimiters; a split is made
/// before an uppercase letter that follows a lowercase one; inside an uppercase
/// run followed by a lowercase letter the split goes before the last uppercase
/// letter (`HTMLParser` → `html parser`); digits take the case of the letter
/// before them, so they stay attached to it. Single-character parts are kept.
pub fn heuristic_split(text: &str) -> Vec<String> {
    let mut parts = Vec::new();
    for fragment in text
        .split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|f| !f.is_empty())
    {
        let bytes = fragment.as_bytes();
        let mut classes = Vec::with_capacity(bytes.len());
        let mut current = Case::Lower;
        for &b in bytes {
            if b.is_ascii_uppercase() {
                current = Case::Upper;
            } else if b.is_ascii_lowercase() {
                current = Case::Lower;
            }
            classes.push(current);
        }
        let mut start = 0;
        for i in 1..bytes.len() {
            if !bytes[i].is_ascii_uppercase() {
                continue;
            }
            let split = match classes[i - 1] {
                Case::Lower => true,
                Case::Upper => bytes.get(i + 1).is_some_and(|b| b.is_ascii_lowercase()),
            };
            if split {
                parts.push(fragment[start..i].to_ascii_lowercase());
                start = i;
            }
        }
        parts.push(fragment[start..].to_ascii_lowercase());
    }
    parts
}

/// Boundaries induced by a subtoken sequence (cumulative prefix lengths).
pub fn boundaries_of<S: AsRef<str>>(subtokens: &[S]) -> Boundaries {
    let mut pos = 0;
    let mut out = Boundaries::new();
    for (i, t) in subtokens.iter().enumerate() {
        if i > 0 {
            out.insert(pos);
        }
        pos += t.as_ref().len();
    }
    out
}

/// Cuts `merged` at `boundaries`.
pub fn split_at_boundaries<'a>(merged: &'a str, boundaries: &Boundaries) -> Vec<&'a str> {
    let mut out = Vec::with_capacity(boundaries.len() + 1);
    let mut start = 0;
    for &b in boundaries {
        out.push(&merged[start..b]);
        start = b;
    }
    out.push(&merged[start..]);
    out
}

pub(crate) fn is_subtoken(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit())
}

/// A merged lowercase identifier with its ground-truth boundaries.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SubtokenRecord {
    merged: String,
    boundaries: Boundaries,
}

impl SubtokenRecord {
    /// Validates `merged` against `[a-z0-9]+` and every boundary against
    /// `0 < p < len`.
    pub fn new(merged: impl Into<String>, boundaries: Boundaries) -> Result<Self> {
        let merged = merged.into();
        if !is_subtoken(&merged) {
            return Err(Error::InvalidSubtoken { token: merged });
        }
        if let Some(&bad) = boundaries.iter().find(|&&p| p == 0 || p >= merged.len()) {
            return Err(Error::Config(format!(
                "boundary {bad} outside {merged:?} (length {})",
                merged.len()
            )));
        }
        Ok(SubtokenRecord { merged, boundaries })
    }

    pub fn merged(&self) -> &str {
        &self.merged
    }

    pub fn boundaries(&self) -> &Boundaries {
        &self.boundaries
    }

    pub fn subtokens(&self) -> Vec<&str> {
        split_at_boundaries(&self.merged, &self.boundaries)
    }
}

/// Turns heuristic output into a dataset record.
///
/// Returns `Ok(None)` for single-part identifiers and for merged strings longer
/// than [`MAX_MERGED_LEN`].
pub fn to_record<S: AsRef<str>>(subtokens: &[S]) -> Result<Option<SubtokenRecord>> {
    if let Some(bad) = subtokens.iter().find(|t| !is_subtoken(t.as_ref())) {
        return Err(Error::InvalidSubtoken {
            token: bad.as_ref().to_string(),
        });
    }
    if subtokens.len() < 2 {
        return Ok(None);
    }
    let merged: String = subtokens.iter().map(|t| t.as_ref()).collect();
    if merged.len() > MAX_MERGED_LEN {
        return Ok(None);
    }
    let boundaries = boundaries_of(subtokens);
    Ok(Some(SubtokenRecord { merged, boundaries }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

/// 64-bit FNV-1a over the seed and the merged string, finished with a
/// splitmix64 avalanche. Platform independent.
pub fn stable_hash(seed: u64, text: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(text.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

pub fn assign_split(seed: u64, merged: &str) -> Split {
    if stable_hash(seed, merged).is_multiple_of(5) {
        Split::Validation
    } else {
        Split::Train
    }
}

/// Deduplicated records sorted by merged string, with a hash-based 80/20 split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    records: Vec<SubtokenRecord>,
    assignment: Vec<Split>,
    seed: u64,
}

/// Deduplicates by `(merged, boundaries)` and assigns each record to the
/// validation split iff `stable_hash(seed, merged) % 5 == 0`.
pub fn build_dataset<I>(records: I, seed: u64) -> Dataset
where
    I: IntoIterator<Item = SubtokenRecord>,
{
    let unique: BTreeSet<SubtokenRecord> = records.into_iter().collect();
    let records: Vec<SubtokenRecord> = unique.into_iter().collect();
    let assignment = records.iter().map(|r| assign_split(seed, &r.merged)).collect();
    Dataset {
        records,
        assignment,
        seed,
    }
}

impl Dataset {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[SubtokenRecord] {
        &self.records
    }

    pub fn split_of(&self, index: usize) -> Split {
        self.assignment[index]
    }

    pub fn train(&self) -> impl Iterator<Item = &SubtokenRecord> + '_ {
        self.in_split(Split::Train)
    }

    pub fn validation(&self) -> impl Iterator<Item = &SubtokenRecord> + '_ {
        self.in_split(Split::Validation)
    }

    fn in_split(&self, split: Split) -> impl Iterator<Item = &SubtokenRecord> + '_ {
        self.records
            .iter()
            .zip(&self.assignment)
            .filter(move |(_, s)| **s == split)
            .map(|(r, _)| r)
    }

    /// Keeps records whose hash under `salt` falls into the first `keep` of
    /// every `out_of` buckets. Split assignment is unchanged.
    pub fn subsample(&self, salt: u64, keep: u64, out_of: u64) -> Dataset {
        let (records, assignment) = self
            .records
            .iter()
            .zip(&self.assignment)
            .filter(|(r, _)| stable_hash(salt, &r.merged) % out_of < keep)
            .map(|(r, s)| (r.clone(), *s))
            .unzip();
        Dataset {
            records,
            assignment,
            seed: self.seed,
        }
    }
}

const DATASET_HEADER: &str = "# idsplit dataset seed=";

/// Serializes a dataset: a seed comment, then `merged<TAB>sub tokens` lines
/// sorted by merged string.
pub fn format_dataset(dataset: &Dataset) -> String {
    let mut out = String::with_capacity(dataset.len() * 32);
    let _ = writeln!(out, "{DATASET_HEADER}{}", dataset.seed);
    for r in &dataset.records {
        out.push_str(&r.merged);
        out.push('\t');
        out.push_str(&r.subtokens().join(" "));
        out.push('\n');
    }
    out
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, format_dataset(dataset).as_bytes())
}

fn parse_record(line: &str, lineno: usize) -> Result<SubtokenRecord> {
    let (merged, tokens) = line
        .split_once('\t')
        .ok_or_else(|| Error::parse(lineno, "expected two tab-separated columns"))?;
    if tokens.contains('\t') {
        return Err(Error::parse(lineno, "more than two columns"));
    }
    let subtokens: Vec<&str> = tokens.split(' ').collect();
    if let Some(bad) = subtokens.iter().find(|t| !is_subtoken(t)) {
        return Err(Error::parse(lineno, format!("invalid subtoken {bad:?}")));
    }
    if subtokens.concat() != merged {
        return Err(Error::parse(
            lineno,
            format!("subtokens {tokens:?} do not concatenate to {merged:?}"),
        ));
    }
    if subtokens.len() < 2 {
        return Err(Error::parse(lineno, "record has a single subtoken"));
    }
    if merged.len() > MAX_MERGED_LEN {
        return Err(Error::parse(
            lineno,
            format!("merged identifier longer than {MAX_MERGED_LEN}"),
        ));
    }
    SubtokenRecord::new(merged, boundaries_of(&subtokens)).map_err(|e| Error::parse(lineno, e.to_string()))
}

pub fn parse_dataset<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut seed = 0;
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::parse(lineno, e.to_string()))?;
        if let Some(rest) = line.strip_prefix(DATASET_HEADER) {
            seed = rest
                .trim()
                .parse()
                .map_err(|_| Error::parse(lineno, "bad seed in header"))?;
            continue;
        }
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        records.push(parse_record(&line, lineno)?);
    }
    Ok(build_dataset(records, seed))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(BufReader::new(file))
}

/// Counters describing how raw identifiers were turned into records.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Funnel {
    pub files: usize,
    pub unreadable_files: usize,
    pub identifiers: usize,
    pub distinct_identifiers: usize,
    pub non_ascii: usize,
    pub single_part: usize,
    pub too_long: usize,
    pub records: usize,
    pub unique_records: usize,
}

/// Accumulates identifiers into records, tracking the [`Funnel`].
#[derive(Debug, Default)]
pub struct CorpusBuilder {
    seen: BTreeSet<String>,
    records: Vec<SubtokenRecord>,
    funnel: Funnel,
}

impl CorpusBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn note_file(&mut self, readable: bool) {
        if readable {
            self.funnel.files += 1;
        } else {
            self.funnel.unreadable_files += 1;
        }
    }

    pub fn push(&mut self, identifier: &RawIdentifier) {
        self.funnel.identifiers += 1;
        if !self.seen.insert(identifier.text.clone()) {
            return;
        }
        self.funnel.distinct_identifiers += 1;
        if !identifier.is_ascii() {
            self.funnel.non_ascii += 1;
            return;
        }
        let parts = heuristic_split(&identifier.text);
        if parts.len() < 2 {
            self.funnel.single_part += 1;
            return;
        }
        match to_record(&parts) {
            Ok(Some(record)) => {
                self.funnel.records += 1;
                self.records.push(record);
            }
            Ok(None) => self.funnel.too_long += 1,
            // ASCII input always yields [a-z0-9] parts
            Err(_) => self.funnel.non_ascii += 1,
        }
    }

    pub fn finish(mut self, seed: u64) -> (Dataset, Funnel) {
        let dataset = build_dataset(self.records, seed);
        self.funnel.unique_records = dataset.len();
        (dataset, self.funnel)
    }
}
